use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::util::{mix64, model_stream_seed};

use super::ModelLayout;

/// Key-domain tag for column (V-side) vectors, so a row and a column that
/// happen to share a vertex id do not receive identical initial factors.
pub const V_KEY_DOMAIN: u64 = 0x56_4b_45_59; // "VKEY"

/// Seed of the generator that fills the slice of model `p` in the vector
/// keyed by `key` under `base_seed`.
pub fn slice_stream_seed(base_seed: u64, key: u64, model_index: usize) -> u64 {
    mix64(model_stream_seed(base_seed, model_index), key)
}

/// Fills a packed factor vector with its initial values: bias slots are set
/// to zero, factor slots receive zero-mean Gaussian draws with the given
/// standard deviation. Each model slice draws from its own stream seeded by
/// (base_seed, key, model index), so the initial slice of model `p` depends
/// only on those three values and not on how many models are packed beside
/// it.
pub fn init_vector(vector: &mut [f32], base_seed: u64, key: u64, stddev: f32, layout: &ModelLayout) {
    assert!(stddev > 0.0, "stddev must be positive");
    assert!(vector.len() >= layout.width());
    let normal = Normal::new(0.0f32, stddev).expect("finite stddev");
    for p in 0..layout.num_models() {
        vector[layout.bias_slot(p)] = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(slice_stream_seed(base_seed, key, p));
        for slot in layout.factor_range(p) {
            vector[slot] = normal.sample(&mut rng);
        }
    }
}
