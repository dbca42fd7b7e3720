use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Geometry of `c` models packed side by side into one factor vector.
///
/// Each model occupies a `stride = k + 1` slot slice laid out as
/// `[bias, f_1, .., f_k]`; the full vector is `c * stride` slots wide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelLayout {
    k: usize,
    num_models: usize,
}

impl ModelLayout {
    pub fn new(k: usize, num_models: usize) -> Self {
        assert!(k >= 1, "rank must be at least 1");
        assert!(num_models >= 1, "need at least one packed model");
        ModelLayout { k, num_models }
    }

    /// Factors per model.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of packed models `c`.
    pub fn num_models(&self) -> usize {
        self.num_models
    }

    /// Slots per model slice: one bias slot plus `k` factor slots.
    pub fn stride(&self) -> usize {
        self.k + 1
    }

    /// Total slots per packed vector: `c * (k + 1)`.
    pub fn width(&self) -> usize {
        self.num_models * self.stride()
    }

    /// Slot range of model `p` within a packed vector.
    pub fn slice_range(&self, model_index: usize) -> Range<usize> {
        let off = model_index * self.stride();
        off..off + self.stride()
    }

    /// Slot holding the bias of model `p`.
    pub fn bias_slot(&self, model_index: usize) -> usize {
        model_index * self.stride()
    }

    /// Slots holding the `k` factors of model `p` (bias excluded).
    pub fn factor_range(&self, model_index: usize) -> Range<usize> {
        let off = model_index * self.stride();
        off + 1..off + self.stride()
    }

    /// True when `slot` is a bias slot of some model.
    pub fn is_bias_slot(&self, slot: usize) -> bool {
        slot.is_multiple_of(self.stride())
    }

    pub fn check_model_index(&self, model_index: usize) -> Result<(), ModelError> {
        if model_index >= self.num_models {
            return Err(ModelError::ModelIndexOutOfRange {
                index: model_index,
                num_models: self.num_models,
            });
        }
        Ok(())
    }

    pub fn check_vector(&self, v: &[f32]) -> Result<(), ModelError> {
        if v.len() < self.width() {
            return Err(ModelError::VectorTooShort {
                got: v.len(),
                need: self.width(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slices_are_disjoint_and_cover_width() {
        let layout = ModelLayout::new(5, 16);
        assert_eq!(layout.stride(), 6);
        assert_eq!(layout.width(), 96);
        let mut covered = vec![false; layout.width()];
        for p in 0..16 {
            for slot in layout.slice_range(p) {
                assert!(!covered[slot], "slot {slot} covered twice");
                covered[slot] = true;
            }
        }
        assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn bias_and_factor_slots_partition_each_slice() {
        let layout = ModelLayout::new(3, 4);
        for p in 0..4 {
            let r = layout.slice_range(p);
            assert_eq!(layout.bias_slot(p), r.start);
            assert_eq!(layout.factor_range(p), r.start + 1..r.end);
            assert!(layout.is_bias_slot(layout.bias_slot(p)));
            for slot in layout.factor_range(p) {
                assert!(!layout.is_bias_slot(slot));
            }
        }
    }

    #[test]
    fn out_of_range_model_index_is_an_error() {
        let layout = ModelLayout::new(2, 2);
        assert!(layout.check_model_index(1).is_ok());
        assert!(layout.check_model_index(2).is_err());
    }
}
