use std::collections::HashMap;

use crate::store::Edge;

use super::{predict, ModelError, ModelLayout};

/// Read access to a set of packed factor vectors, by vertex id.
pub trait FactorLookup {
    fn vector(&self, id: u64) -> Option<&[f32]>;
    fn for_each_vector(&self, f: &mut dyn FnMut(u64, &[f32]));
}

impl FactorLookup for HashMap<u64, Vec<f32>> {
    fn vector(&self, id: u64) -> Option<&[f32]> {
        self.get(&id).map(|v| v.as_slice())
    }

    fn for_each_vector(&self, f: &mut dyn FnMut(u64, &[f32])) {
        for (id, v) in self {
            f(*id, v);
        }
    }
}

impl<T: FactorLookup> FactorLookup for &T {
    fn vector(&self, id: u64) -> Option<&[f32]> {
        (*self).vector(id)
    }

    fn for_each_vector(&self, f: &mut dyn FnMut(u64, &[f32])) {
        (*self).for_each_vector(f)
    }
}

/// Population sizes a sampled loss estimate scales up to.
#[derive(Debug, Clone, Copy)]
pub struct LossTotals {
    pub num_edges: u64,
    pub num_rows_u: u64,
    pub num_cols_v: u64,
}

fn slice_norm_sq(vector: &[f32], layout: &ModelLayout, model_index: usize) -> f64 {
    vector[layout.slice_range(model_index)]
        .iter()
        .map(|&x| (x as f64) * (x as f64))
        .sum()
}

/// The exact regularized loss of one model slice over a fully addressable
/// instance:
/// `1/2 sum w (p - a)^2 + lambda/2 (g^2 + |b_u|^2 + |b_v|^2 + |U|_F^2 + |V|_F^2)`.
///
/// The bias norms and Frobenius norms together are the sum of squares over
/// each vector's whole slice, bias slot included. Accumulates in f64.
pub fn exact_loss(
    edges: &[Edge],
    u: &impl FactorLookup,
    v: &impl FactorLookup,
    g: f32,
    lambda: f32,
    layout: &ModelLayout,
    model_index: usize,
) -> Result<f64, ModelError> {
    layout.check_model_index(model_index)?;
    let mut error_term = 0.0f64;
    for edge in edges {
        let ui = u.vector(edge.i).ok_or(ModelError::MissingVector(edge.i))?;
        let vj = v.vector(edge.j).ok_or(ModelError::MissingVector(edge.j))?;
        let p = predict(ui, vj, g, layout, model_index)?;
        let d = (p - edge.a) as f64;
        error_term += 0.5 * edge.w as f64 * d * d;
    }

    let mut norm_sq = (g as f64) * (g as f64);
    let mut add_norms = |_id: u64, vec: &[f32]| {
        norm_sq += slice_norm_sq(vec, layout, model_index);
    };
    u.for_each_vector(&mut add_norms);
    v.for_each_vector(&mut add_norms);

    Ok(error_term + 0.5 * lambda as f64 * norm_sq)
}

/// Estimates the two components of the loss from samples, scaled up by the
/// population totals: the error component from a sample of edges, the
/// regularization component from samples of U rows and V columns plus the
/// exact g term. Returns `(error_component, regularization_component)`.
///
/// A sample may only be empty when its population total is zero, in which
/// case it contributes nothing.
#[allow(clippy::too_many_arguments)]
pub fn estimate_loss(
    edge_sample: &[Edge],
    u: &impl FactorLookup,
    v: &impl FactorLookup,
    u_sample: &[&[f32]],
    v_sample: &[&[f32]],
    totals: &LossTotals,
    g: f32,
    lambda: f32,
    layout: &ModelLayout,
    model_index: usize,
) -> Result<(f64, f64), ModelError> {
    layout.check_model_index(model_index)?;
    check_sample("edges", edge_sample.len() as u64, totals.num_edges)?;
    check_sample("rows of U", u_sample.len() as u64, totals.num_rows_u)?;
    check_sample("columns of V", v_sample.len() as u64, totals.num_cols_v)?;

    let mut error_component = 0.0f64;
    if !edge_sample.is_empty() {
        let mut sampled = 0.0f64;
        for edge in edge_sample {
            let ui = u.vector(edge.i).ok_or(ModelError::MissingVector(edge.i))?;
            let vj = v.vector(edge.j).ok_or(ModelError::MissingVector(edge.j))?;
            let p = predict(ui, vj, g, layout, model_index)?;
            let d = (p - edge.a) as f64;
            sampled += 0.5 * edge.w as f64 * d * d;
        }
        error_component = sampled * totals.num_edges as f64 / edge_sample.len() as f64;
    }

    let half_lambda = 0.5 * lambda as f64;
    let mut reg_component = half_lambda * (g as f64) * (g as f64);
    if !u_sample.is_empty() {
        let sampled: f64 = u_sample
            .iter()
            .map(|vec| slice_norm_sq(vec, layout, model_index))
            .sum();
        reg_component += half_lambda * sampled * totals.num_rows_u as f64 / u_sample.len() as f64;
    }
    if !v_sample.is_empty() {
        let sampled: f64 = v_sample
            .iter()
            .map(|vec| slice_norm_sq(vec, layout, model_index))
            .sum();
        reg_component += half_lambda * sampled * totals.num_cols_v as f64 / v_sample.len() as f64;
    }

    Ok((error_component, reg_component))
}

fn check_sample(what: &'static str, sample: u64, total: u64) -> Result<(), ModelError> {
    if sample == 0 && total > 0 {
        return Err(ModelError::EmptySample { what });
    }
    if sample > total {
        return Err(ModelError::SampleExceedsTotal {
            what,
            sample,
            total,
        });
    }
    Ok(())
}
