//! Model math: prediction, the per-edge SGD update, packed multi-model
//! updates, loss computation and estimation, and parameter initialization.
//!
//! Everything in this module is pure over caller-supplied storage and safe
//! to call from many threads on disjoint vectors. Callers that share
//! vectors across threads (the trainer does, for the local V partition)
//! accept racy-but-word-atomic writes.

mod hyper;
mod init;
mod layout;
mod loss;
mod sgd;

pub use hyper::{GlobalBias, HyperGrid, Hyperparameters, ModelVariant};
pub use init::{init_vector, slice_stream_seed, V_KEY_DOMAIN};
pub use layout::ModelLayout;
pub use loss::{estimate_loss, exact_loss, FactorLookup, LossTotals};
pub use sgd::{learning_rate, packed_sgd_step, predict, sgd_step, EdgeContext};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model index {index} out of range for {num_models} packed models")]
    ModelIndexOutOfRange { index: usize, num_models: usize },
    #[error("vector has {got} slots, layout needs at least {need}")]
    VectorTooShort { got: usize, need: usize },
    #[error("non-finite {what} in SGD update")]
    NonFinite { what: &'static str },
    #[error("empty sample for {what} with a non-empty population")]
    EmptySample { what: &'static str },
    #[error("sample of {what} larger than its stated total ({sample} > {total})")]
    SampleExceedsTotal {
        what: &'static str,
        sample: u64,
        total: u64,
    },
    #[error("no factor vector for id {0}")]
    MissingVector(u64),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparameters(String),
}
