//! Offline input preparation: train/validation/test splitting, graph
//! statistics, and column partitioning with a per-partition shuffle.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{open_edge_file, Edge, EdgeFileWriter, GraphStats, StoreError};
use crate::util::{mix64, splitmix64};

#[derive(Debug, Error)]
pub enum PrepError {
    #[error("invalid split ratios: {0}")]
    BadRatios(String),
    #[error("storage error: {0}")]
    Store(#[from] StoreError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Fractions of edges assigned to each split. Must sum to one.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self, PrepError> {
        let ratios = SplitRatios {
            train,
            validation,
            test,
        };
        ratios.validate()?;
        Ok(ratios)
    }

    pub fn validate(&self) -> Result<(), PrepError> {
        for (name, value) in [
            ("train", self.train),
            ("validation", self.validation),
            ("test", self.test),
        ] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(PrepError::BadRatios(format!(
                    "{name} ratio must be non-negative, got {value}"
                )));
            }
        }
        let sum = self.train + self.validation + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(PrepError::BadRatios(format!(
                "ratios must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: u64,
    pub validation: u64,
    pub test: u64,
}

#[derive(Debug, Clone)]
pub struct SplitPaths {
    pub train: PathBuf,
    pub validation: PathBuf,
    pub test: PathBuf,
}

/// Unit-interval position of an edge under a seed; drives split assignment.
fn split_position(i: u64, j: u64, seed: u64) -> f64 {
    let h = mix64(mix64(seed, i), j);
    // top 53 bits -> [0, 1)
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Splits an edge file into train/validation/test by a seeded hash of each
/// edge's endpoints: disjoint, exhaustive, deterministic, single pass.
/// `binarize` maps every nonzero strength to 1.0 on the way through.
pub fn split(
    input: &Path,
    ratios: SplitRatios,
    seed: u64,
    out: &SplitPaths,
    binarize: bool,
) -> Result<SplitCounts, PrepError> {
    ratios.validate()?;
    let mut writers = [
        EdgeFileWriter::create(&out.train)?,
        EdgeFileWriter::create(&out.validation)?,
        EdgeFileWriter::create(&out.test)?,
    ];
    let mut counts = [0u64; 3];
    for item in open_edge_file(input)? {
        let mut edge = item?;
        if binarize {
            edge.a = if edge.a != 0.0 { 1.0 } else { 0.0 };
        }
        let x = split_position(edge.i, edge.j, seed);
        let bucket = if x < ratios.train {
            0
        } else if x < ratios.train + ratios.validation {
            1
        } else {
            2
        };
        writers[bucket].write(&edge)?;
        counts[bucket] += 1;
    }
    for writer in writers {
        writer.finish()?;
    }
    Ok(SplitCounts {
        train: counts[0],
        validation: counts[1],
        test: counts[2],
    })
}

/// Computes graph statistics over the positive edges of a training file.
/// Duplicate (i, j) pairs are deduplicated (first occurrence wins); the
/// number dropped comes back alongside the stats.
pub fn compute_stats(train_path: &Path) -> Result<(GraphStats, u64), PrepError> {
    let mut out_degree: HashMap<u64, u32> = HashMap::new();
    let mut in_degree: HashMap<u64, u32> = HashMap::new();
    let mut seen: HashSet<(u64, u64)> = HashSet::new();
    let mut duplicates = 0u64;
    let mut num_edges = 0u64;
    let mut strength_sum = 0.0f64;
    for item in open_edge_file(train_path)? {
        let edge = item?;
        if edge.a == 0.0 {
            continue; // degrees and averages cover positive edges only
        }
        if !seen.insert((edge.i, edge.j)) {
            duplicates += 1;
            continue;
        }
        *out_degree.entry(edge.i).or_insert(0) += 1;
        *in_degree.entry(edge.j).or_insert(0) += 1;
        num_edges += 1;
        strength_sum += edge.a as f64;
    }
    let stats = GraphStats {
        num_rows: out_degree.len() as u64,
        num_cols: in_degree.len() as u64,
        num_edges,
        avg_strength: if num_edges > 0 {
            (strength_sum / num_edges as f64) as f32
        } else {
            0.0
        },
        out_degree,
        in_degree,
    };
    Ok((stats, duplicates))
}

/// Describes one column partition written by [`partition_by_column`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub index: usize,
    pub path: String,
    pub edge_count: u64,
    pub column_id_count: u64,
    /// Sorted column ids owned by this partition; the trainer sizes its
    /// local V from this set.
    pub column_ids: Vec<u64>,
}

/// Routes each training edge to partition `hash(j) mod n`, shuffles every
/// partition with the seed, and writes one edge file per partition plus a
/// `manifest.json` listing each partition's column set. Duplicate edges are
/// dropped with the same first-occurrence rule as [`compute_stats`].
pub fn partition_by_column(
    train_path: &Path,
    num_partitions: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PartitionManifest>, PrepError> {
    assert!(num_partitions >= 1);
    std::fs::create_dir_all(out_dir)?;
    let mut buckets: Vec<Vec<Edge>> = vec![Vec::new(); num_partitions];
    let mut seen: HashSet<(u64, u64)> = HashSet::new();
    for item in open_edge_file(train_path)? {
        let edge = item?;
        if edge.a != 0.0 && !seen.insert((edge.i, edge.j)) {
            continue;
        }
        let bucket = (splitmix64(edge.j) % num_partitions as u64) as usize;
        buckets[bucket].push(edge);
    }

    let mut manifests = Vec::with_capacity(num_partitions);
    for (index, mut edges) in buckets.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed, index as u64));
        edges.shuffle(&mut rng);
        let file_name = format!("part-{index:05}.fbed");
        let path = out_dir.join(&file_name);
        let mut writer = EdgeFileWriter::create(&path)?;
        let mut columns: HashSet<u64> = HashSet::new();
        for edge in &edges {
            writer.write(edge)?;
            columns.insert(edge.j);
        }
        let edge_count = writer.finish()?;
        let mut column_ids: Vec<u64> = columns.into_iter().collect();
        column_ids.sort_unstable();
        manifests.push(PartitionManifest {
            index,
            path: file_name,
            edge_count,
            column_id_count: column_ids.len() as u64,
            column_ids,
        });
    }

    let manifest_json = serde_json::to_string_pretty(&manifests).map_err(std::io::Error::other)?;
    std::fs::write(out_dir.join("manifest.json"), manifest_json + "\n")?;
    Ok(manifests)
}

pub fn load_manifests(path: &Path) -> Result<Vec<PartitionManifest>, PrepError> {
    let data = std::fs::read_to_string(path)?;
    let manifests: Vec<PartitionManifest> =
        serde_json::from_str(&data).map_err(std::io::Error::other)?;
    Ok(manifests)
}
