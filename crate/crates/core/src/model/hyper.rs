use serde::{Deserialize, Serialize};

use super::{ModelError, ModelLayout};

/// Which parts of a model slice the SGD update may touch.
///
/// `GlobalBiasOnly` and `BiasOnly` realize reduced-complexity baselines as
/// grid entries: the frozen parts are initialized to zero and never updated,
/// so their contribution to predictions is exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    /// Only the global bias g is learned.
    GlobalBiasOnly,
    /// g plus per-vertex biases; factors stay frozen at zero.
    BiasOnly,
    /// The complete biased factorization model.
    #[default]
    Full,
}

/// One hyperparameter combination for a sub-model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    /// Initial learning rate.
    pub eta0: f32,
    /// Regularization constant.
    pub lambda: f32,
    /// Per-pass multiplicative learning-rate decay, in (0, 1].
    pub decay: f32,
    /// Number of factors.
    pub k: usize,
    #[serde(default)]
    pub variant: ModelVariant,
}

impl Hyperparameters {
    pub fn new(eta0: f32, lambda: f32, decay: f32, k: usize) -> Self {
        Hyperparameters {
            eta0,
            lambda,
            decay,
            k,
            variant: ModelVariant::Full,
        }
    }

    pub fn with_variant(mut self, variant: ModelVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.eta0.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(ModelError::InvalidHyperparameters(format!(
                "eta0 must be positive, got {}",
                self.eta0
            )));
        }
        if self.lambda.partial_cmp(&0.0).is_none_or(|o| o == std::cmp::Ordering::Less) {
            return Err(ModelError::InvalidHyperparameters(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(ModelError::InvalidHyperparameters(format!(
                "decay must be in (0, 1], got {}",
                self.decay
            )));
        }
        if self.k < 1 {
            return Err(ModelError::InvalidHyperparameters(
                "k must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// An ordered list of `c` hyperparameter combinations sharing one rank `k`,
/// trained simultaneously by packing their factor slices into one wide
/// vector. Model index `p` always refers to `combos()[p]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Hyperparameters>", into = "Vec<Hyperparameters>")]
pub struct HyperGrid {
    combos: Vec<Hyperparameters>,
}

impl HyperGrid {
    pub fn new(combos: Vec<Hyperparameters>) -> Result<Self, ModelError> {
        if combos.is_empty() {
            return Err(ModelError::InvalidHyperparameters(
                "grid must contain at least one combination".into(),
            ));
        }
        let k = combos[0].k;
        for (p, h) in combos.iter().enumerate() {
            // eta0 == 0 is tolerated here: a zero learning rate freezes that
            // slice, which is how degenerate/frozen grid entries are built.
            if !(h.eta0 >= 0.0 && h.eta0.is_finite()) {
                return Err(ModelError::InvalidHyperparameters(format!(
                    "combo {p}: eta0 must be a finite non-negative value, got {}",
                    h.eta0
                )));
            }
            if !(h.lambda >= 0.0 && h.lambda.is_finite()) {
                return Err(ModelError::InvalidHyperparameters(format!(
                    "combo {p}: lambda must be non-negative, got {}",
                    h.lambda
                )));
            }
            if !(h.decay > 0.0 && h.decay <= 1.0) {
                return Err(ModelError::InvalidHyperparameters(format!(
                    "combo {p}: decay must be in (0, 1], got {}",
                    h.decay
                )));
            }
            if h.k < 1 {
                return Err(ModelError::InvalidHyperparameters(format!(
                    "combo {p}: k must be at least 1"
                )));
            }
            if h.k != k {
                return Err(ModelError::InvalidHyperparameters(format!(
                    "all combos must share one k: combo 0 has k={k}, combo {p} has k={}",
                    h.k
                )));
            }
        }
        Ok(HyperGrid { combos })
    }

    /// Cross product of learning rates and regularization constants, all
    /// with the same decay and rank. Etas vary fastest.
    pub fn cross(etas: &[f32], lambdas: &[f32], decay: f32, k: usize) -> Result<Self, ModelError> {
        let mut combos = Vec::with_capacity(etas.len() * lambdas.len());
        for &lambda in lambdas {
            for &eta0 in etas {
                combos.push(Hyperparameters::new(eta0, lambda, decay, k));
            }
        }
        HyperGrid::new(combos)
    }

    pub fn single(h: Hyperparameters) -> Result<Self, ModelError> {
        HyperGrid::new(vec![h])
    }

    pub fn combos(&self) -> &[Hyperparameters] {
        &self.combos
    }

    pub fn num_models(&self) -> usize {
        self.combos.len()
    }

    pub fn k(&self) -> usize {
        self.combos[0].k
    }

    pub fn layout(&self) -> ModelLayout {
        ModelLayout::new(self.k(), self.num_models())
    }
}

impl TryFrom<Vec<Hyperparameters>> for HyperGrid {
    type Error = ModelError;
    fn try_from(combos: Vec<Hyperparameters>) -> Result<Self, ModelError> {
        HyperGrid::new(combos)
    }
}

impl From<HyperGrid> for Vec<Hyperparameters> {
    fn from(g: HyperGrid) -> Self {
        g.combos
    }
}

/// The per-model global bias terms of a packed run, one value per sub-model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalBias {
    values: Vec<f32>,
}

impl GlobalBias {
    pub fn zeros(num_models: usize) -> Self {
        GlobalBias {
            values: vec![0.0; num_models],
        }
    }

    pub fn from_values(values: Vec<f32>) -> Self {
        assert!(!values.is_empty());
        GlobalBias { values }
    }

    pub fn get(&self, model_index: usize) -> f32 {
        self.values[model_index]
    }

    pub fn set(&mut self, model_index: usize, value: f32) {
        self.values[model_index] = value;
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}
