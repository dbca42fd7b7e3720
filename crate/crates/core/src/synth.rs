//! Deterministic synthetic interaction data with planted structure
//! (global bias + vertex biases + low-rank term + noise), used by the
//! integration tests, the acceptance suite, and the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::store::Edge;

/// Column ids sit in a different range than row ids so that row/column
/// roles can never be confused and traffic classification by id is exact.
pub const COLUMN_ID_BASE: u64 = 1 << 32;

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    /// Probability that a cell is observed.
    pub density: f64,
    pub global_bias: f32,
    pub bias_stddev: f32,
    /// Standard deviation of each planted factor entry.
    pub factor_stddev: f32,
    pub noise_stddev: f32,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn row_ids(&self) -> impl Iterator<Item = u64> {
        0..self.rows as u64
    }

    pub fn col_ids(&self) -> impl Iterator<Item = u64> + use<> {
        (0..self.cols as u64).map(|j| COLUMN_ID_BASE + j)
    }
}

/// Generates the observed entries of a planted-structure matrix:
/// `a(i,j) = g* + b_i* + b_j* + u_i* . v_j* + noise`, each cell observed
/// independently with the configured density. Deterministic per seed.
pub fn generate(spec: &SyntheticSpec) -> Vec<Edge> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bias = Normal::new(0.0f32, spec.bias_stddev).expect("finite stddev");
    let factor = Normal::new(0.0f32, spec.factor_stddev).expect("finite stddev");
    let noise = Normal::new(0.0f32, spec.noise_stddev.max(f32::MIN_POSITIVE)).expect("finite");

    let row_bias: Vec<f32> = (0..spec.rows).map(|_| bias.sample(&mut rng)).collect();
    let col_bias: Vec<f32> = (0..spec.cols).map(|_| bias.sample(&mut rng)).collect();
    let row_factors: Vec<Vec<f32>> = (0..spec.rows)
        .map(|_| (0..spec.rank).map(|_| factor.sample(&mut rng)).collect())
        .collect();
    let col_factors: Vec<Vec<f32>> = (0..spec.cols)
        .map(|_| (0..spec.rank).map(|_| factor.sample(&mut rng)).collect())
        .collect();

    let mut edges = Vec::new();
    for i in 0..spec.rows {
        for j in 0..spec.cols {
            if !rng.gen_bool(spec.density) {
                continue;
            }
            let dot: f32 = row_factors[i]
                .iter()
                .zip(&col_factors[j])
                .map(|(a, b)| a * b)
                .sum();
            let strength = spec.global_bias
                + row_bias[i]
                + col_bias[j]
                + dot
                + if spec.noise_stddev > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
            edges.push(Edge::new(i as u64, COLUMN_ID_BASE + j as u64, strength, 1.0));
        }
    }
    edges
}
