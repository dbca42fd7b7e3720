//! Desk-scale parameter-server SGD engine for biased latent-factor matrix
//! factorization.
//!
//! The pieces mirror the architecture they implement: [`dataprep`] splits
//! and column-partitions the input graph, [`server`] holds rows of U behind
//! a batched key-value protocol, [`trainer`] streams each edge partition
//! and runs lock-free multi-threaded SGD against a co-located V partition,
//! and [`eval`] measures hold-out RMSE across the hyperparameter
//! combinations packed into a single run.

pub mod client;
pub mod dataprep;
pub mod eval;
pub mod model;
pub mod protocol;
pub mod server;
pub mod store;
pub mod synth;
pub mod trainer;
pub mod util;

pub use client::{
    ClientConfig, ClientError, ClientTrafficLog, InProcessClient, KeyClass, KeyClassifier,
    ParamClient, ParameterStore,
};
pub use dataprep::{PartitionManifest, PrepError, SplitCounts, SplitPaths, SplitRatios};
pub use eval::{EvalError, FactorSource, LookupSource, ModelReport, RmseReport, StoreSource};
pub use model::{
    EdgeContext, GlobalBias, HyperGrid, Hyperparameters, ModelError, ModelLayout, ModelVariant,
};
pub use server::{ServerConfig, ServerError, ServerHandle, VectorStore};
pub use store::{
    Edge, ExportedFactors, FactorMatrixPartition, GraphStats, HogwildPartition, StoreError,
};
pub use trainer::{
    ExportPaths, PassReport, TrainError, TrainOutcome, TrainerConfig,
};
