//! Memory-efficient storage: packed factor-matrix partitions, graph
//! statistics, and the binary file formats they travel in.

mod edges;
mod factors;
mod stats;

pub use edges::{
    open_edge_file, read_all_edges, Edge, EdgeFileReader, EdgeFileWriter, TsvEdgeReader,
};
pub use factors::{
    load_factor_matrix, load_global_bias, save_factor_matrix, save_global_bias, ExportedFactors,
};
pub use stats::GraphStats;

use std::cell::UnsafeCell;
use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use crate::model::FactorLookup;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("duplicate vertex id {0}")]
    DuplicateVertex(u64),
    #[error("unknown vertex id {0}")]
    UnknownVertex(u64),
    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: u64, message: String },
    #[error("parse error at line {line}: {message}")]
    ParseLine { line: u64, message: String },
    #[error("vector width mismatch: expected {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("partition width must be at least 2, got {0}")]
    BadWidth(usize),
}

/// A partition of a factor matrix: one contiguous preallocated f32 array
/// into which fixed-width factor vectors are packed, plus an index from
/// vertex id to its position. No per-vector allocation happens after
/// construction.
#[derive(Debug)]
pub struct FactorMatrixPartition {
    backing: Vec<f32>,
    ordinals: HashMap<u64, usize>,
    ids: Vec<u64>,
    width: usize,
}

impl FactorMatrixPartition {
    /// Allocates a zero-filled partition for the given vertex ids. Offsets
    /// follow the order of `vertex_ids`.
    pub fn allocate(vertex_ids: &[u64], width: usize) -> Result<Self, StoreError> {
        if width < 2 {
            return Err(StoreError::BadWidth(width));
        }
        let mut ordinals = HashMap::with_capacity(vertex_ids.len());
        for (ordinal, &id) in vertex_ids.iter().enumerate() {
            if ordinals.insert(id, ordinal).is_some() {
                return Err(StoreError::DuplicateVertex(id));
            }
        }
        Ok(FactorMatrixPartition {
            backing: vec![0.0; vertex_ids.len() * width],
            ordinals,
            ids: vertex_ids.to_vec(),
            width,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_vectors(&self) -> usize {
        self.ids.len()
    }

    pub fn contains(&self, vertex_id: u64) -> bool {
        self.ordinals.contains_key(&vertex_id)
    }

    /// Vertex ids in allocation (offset) order.
    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn backing_len(&self) -> usize {
        self.backing.len()
    }

    fn offset_of(&self, vertex_id: u64) -> Result<usize, StoreError> {
        self.ordinals
            .get(&vertex_id)
            .map(|&ordinal| ordinal * self.width)
            .ok_or(StoreError::UnknownVertex(vertex_id))
    }

    /// Zero-copy view of a vertex's factor vector.
    pub fn vector_of(&self, vertex_id: u64) -> Result<&[f32], StoreError> {
        let off = self.offset_of(vertex_id)?;
        Ok(&self.backing[off..off + self.width])
    }

    /// Mutable view; writes go straight to the backing array.
    pub fn vector_of_mut(&mut self, vertex_id: u64) -> Result<&mut [f32], StoreError> {
        let off = self.offset_of(vertex_id)?;
        Ok(&mut self.backing[off..off + self.width])
    }

    /// Iterates vectors in offset order.
    pub fn iter(&self) -> impl Iterator<Item = (u64, &[f32])> {
        self.ids
            .iter()
            .enumerate()
            .map(|(ordinal, &id)| (id, &self.backing[ordinal * self.width..(ordinal + 1) * self.width]))
    }
}

impl FactorLookup for FactorMatrixPartition {
    fn vector(&self, id: u64) -> Option<&[f32]> {
        self.vector_of(id).ok()
    }

    fn for_each_vector(&self, f: &mut dyn FnMut(u64, &[f32])) {
        for (id, v) in self.iter() {
            f(id, v);
        }
    }
}

/// Shared handle over a partition for lock-free parallel SGD.
///
/// Clones share one underlying partition; `vector_mut_racy` hands out
/// mutable slices without exclusion. Concurrent writers may race — under
/// the sparse-update training contract those races are rare and benign,
/// and each f32 slot write is atomic at word granularity. The index is
/// never mutated through this handle.
#[derive(Clone)]
pub struct HogwildPartition(Arc<UnsafeCell<FactorMatrixPartition>>);

unsafe impl Send for HogwildPartition {}
unsafe impl Sync for HogwildPartition {}

impl HogwildPartition {
    pub fn new(partition: FactorMatrixPartition) -> Self {
        #[allow(clippy::arc_with_non_send_sync)] // Send/Sync impls live on the wrapper
        HogwildPartition(Arc::new(UnsafeCell::new(partition)))
    }

    pub fn get(&self) -> &FactorMatrixPartition {
        unsafe { &*self.0.get() }
    }

    /// Mutable slice of one vertex's vector, without exclusion.
    #[allow(clippy::mut_from_ref)]
    pub fn vector_mut_racy(&self, vertex_id: u64) -> Result<&mut [f32], StoreError> {
        unsafe { (*self.0.get()).vector_of_mut(vertex_id) }
    }

    /// Recovers the partition once all other handles are dropped.
    pub fn try_into_inner(self) -> Result<FactorMatrixPartition, HogwildPartition> {
        Arc::try_unwrap(self.0)
            .map(UnsafeCell::into_inner)
            .map_err(HogwildPartition)
    }
}
