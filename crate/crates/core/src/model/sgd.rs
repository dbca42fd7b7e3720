use super::{GlobalBias, HyperGrid, Hyperparameters, ModelError, ModelLayout, ModelVariant};

/// Per-edge context the update needs besides the factor vectors: the
/// observed strength, the error weight, and the vertex degrees that scale
/// the regularization pull.
#[derive(Debug, Clone, Copy)]
pub struct EdgeContext {
    /// Observed interaction strength a(i, j).
    pub strength: f32,
    /// Error weight w(i, j).
    pub weight: f32,
    /// Out-degree of the row vertex i.
    pub out_degree: u32,
    /// In-degree of the column vertex j.
    pub in_degree: u32,
}

/// Learning rate of a combination at a given pass: eta0 * decay^pass.
pub fn learning_rate(h: &Hyperparameters, pass: usize) -> f32 {
    h.eta0 * h.decay.powi(pass as i32)
}

/// Predicted interaction strength of model `p`:
/// `g + b_u + b_v + u . v` over that model's slice.
pub fn predict(
    u: &[f32],
    v: &[f32],
    g: f32,
    layout: &ModelLayout,
    model_index: usize,
) -> Result<f32, ModelError> {
    layout.check_model_index(model_index)?;
    layout.check_vector(u)?;
    layout.check_vector(v)?;
    let r = layout.slice_range(model_index);
    Ok(predict_slice(&u[r.clone()], &v[r], g))
}

/// Prediction over one `[bias, f_1..f_k]` slice.
#[inline]
fn predict_slice(u: &[f32], v: &[f32], g: f32) -> f32 {
    let mut dot = 0.0f32;
    for t in 1..u.len() {
        dot += u[t] * v[t];
    }
    g + u[0] + v[0] + dot
}

/// One SGD step on a single model slice. `u` and `v` are the
/// `[bias, f_1..f_k]` slices of the row and column vectors; `g` is that
/// model's global bias.
///
/// The weighted error `e = w * (a - p)` is computed from pre-update values
/// and all parameter updates descend the per-edge regularized objective
/// simultaneously: both factor updates see the peer's pre-update values.
/// Returns `e`. On a non-finite error value nothing is written.
pub fn sgd_step(
    u: &mut [f32],
    v: &mut [f32],
    g: &mut f32,
    ctx: &EdgeContext,
    h: &Hyperparameters,
    eta: f32,
) -> Result<f32, ModelError> {
    debug_assert_eq!(u.len(), v.len());
    debug_assert!(ctx.out_degree >= 1 && ctx.in_degree >= 1);
    debug_assert!(ctx.weight > 0.0);

    let e = ctx.weight * (ctx.strength - predict_slice(u, v, *g));
    if !e.is_finite() {
        return Err(ModelError::NonFinite {
            what: "weighted prediction error",
        });
    }

    let lam = h.lambda;
    let reg_i = lam / ctx.out_degree as f32;
    let reg_j = lam / ctx.in_degree as f32;

    *g += eta * (e - lam * *g);
    if h.variant == ModelVariant::GlobalBiasOnly {
        return Ok(e);
    }

    u[0] += eta * (e - reg_i * u[0]);
    v[0] += eta * (e - reg_j * v[0]);
    if h.variant == ModelVariant::BiasOnly {
        return Ok(e);
    }

    for t in 1..u.len() {
        let ut = u[t];
        let vt = v[t];
        u[t] = ut + eta * (e * vt - reg_i * ut);
        v[t] = vt + eta * (e * ut - reg_j * vt);
    }
    Ok(e)
}

/// Applies `sgd_step` independently to every packed model slice, using each
/// combination's own learning rate at the given pass. Slices whose learning
/// rate is exactly zero are not written at all (their error is still
/// computed and reported). Writes each model's weighted error into
/// `errors_out`, which must hold one slot per packed model.
pub fn packed_sgd_step(
    u: &mut [f32],
    v: &mut [f32],
    g: &mut GlobalBias,
    ctx: &EdgeContext,
    grid: &HyperGrid,
    pass: usize,
    errors_out: &mut [f32],
) -> Result<(), ModelError> {
    let layout = grid.layout();
    layout.check_vector(u)?;
    layout.check_vector(v)?;
    assert_eq!(errors_out.len(), grid.num_models());
    assert_eq!(g.len(), grid.num_models());

    for (p, h) in grid.combos().iter().enumerate() {
        let r = layout.slice_range(p);
        let us = &mut u[r.clone()];
        let vs = &mut v[r];
        let eta = learning_rate(h, pass);
        if eta == 0.0 {
            errors_out[p] = ctx.weight * (ctx.strength - predict_slice(us, vs, g.get(p)));
            continue;
        }
        let mut gp = g.get(p);
        errors_out[p] = sgd_step(us, vs, &mut gp, ctx, h, eta)?;
        g.set(p, gp);
    }
    Ok(())
}
