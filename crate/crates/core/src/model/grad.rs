//! Exact gradients of the batch objective for the fixed two-head architecture.
//!
//! OT outputs (corrected labels, matchings) enter as constants.

use ndarray::{Array2, ArrayView2};

use super::{ModelState, Params};
use crate::error::{arg_err, Error, Result};
use crate::linalg::{clamped_ln, softmax_rows, LOG_CLAMP};
use crate::relation::bhg_parts;

/// What to differentiate on one batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchObjective<'a> {
    /// `B x K` label weights for the cross-entropy term (noisy one-hots,
    /// soft targets or rescaled corrected labels). `None` drops the term.
    pub label_weights: Option<ArrayView2<'a, f64>>,
    /// `B x B` matching block for the alignment term. `None` drops it.
    pub matching: Option<ArrayView2<'a, f64>>,
    pub lambda: f64,
    pub tau3: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub label: f64,
    pub bhg: f64,
    pub total: f64,
}

/// Cross-entropy value and dLoss/dlogits for one modality.
fn label_term(weights: ArrayView2<f64>, probs: &Array2<f64>, tau1: f64) -> (f64, Array2<f64>) {
    let b = weights.nrows() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(probs.raw_dim());
    for ((w_row, p_row), mut g_row) in weights.outer_iter().zip(probs.outer_iter()).zip(grad.outer_iter_mut()) {
        let live: f64 = w_row.iter().zip(p_row.iter()).filter(|(_, &p)| p >= LOG_CLAMP).map(|(w, _)| w).sum();
        for ((&w, &p), g) in w_row.iter().zip(p_row.iter()).zip(g_row.iter_mut()) {
            if w != 0.0 {
                loss -= w * clamped_ln(p);
            }
            let own = if p >= LOG_CLAMP { w } else { 0.0 };
            *g = -(own - p * live) / b / tau1;
        }
    }
    (loss / b, grad)
}

/// Loss and parameter gradients on one batch.
pub fn forward_backward(
    state: &ModelState,
    x_v: ArrayView2<f64>,
    x_t: ArrayView2<f64>,
    objective: &BatchObjective,
) -> Result<(LossBreakdown, Params)> {
    let p = &state.params;
    let b = x_v.nrows();
    if x_t.nrows() != b {
        return arg_err("visual and text batches differ in size");
    }
    if x_v.ncols() != p.head_v.input_dim() || x_t.ncols() != p.head_t.input_dim() {
        return arg_err("batch feature width does not match the model");
    }
    let (z_v, trace_v) = p.head_v.forward_traced(x_v);
    let (z_t, trace_t) = p.head_t.forward_traced(x_t);
    let mut dz_v = Array2::<f64>::zeros(z_v.raw_dim());
    let mut dz_t = Array2::<f64>::zeros(z_t.raw_dim());
    let mut grads = Params::zeros_like(p);
    let mut losses = LossBreakdown::default();

    if let Some(w) = objective.label_weights {
        if w.dim() != (b, p.prototypes.nrows()) {
            return arg_err(format!("label weights {:?} do not match batch of {b}", w.dim()));
        }
        let mu = &p.prototypes;
        for (z, dz) in [(&z_v, &mut dz_v), (&z_t, &mut dz_t)] {
            let probs = softmax_rows((z.dot(&mu.t()) / state.tau1).view());
            let (loss, dlogits) = label_term(w, &probs, state.tau1);
            losses.label += loss;
            *dz += &dlogits.dot(mu);
            grads.prototypes += &dlogits.t().dot(z);
        }
    }

    if let Some(m) = objective.matching {
        if objective.lambda != 0.0 {
            let parts = bhg_parts(m, z_v.view(), z_t.view(), objective.tau3)?;
            losses.bhg = parts.loss;
            let g = parts.grad_logits * (objective.lambda / objective.tau3);
            dz_v += &g.dot(&z_t);
            dz_t += &g.t().dot(&z_v);
        }
    }
    losses.total = losses.label + objective.lambda * losses.bhg;

    p.head_v.backward(x_v, &trace_v, &dz_v, &mut grads.head_v);
    p.head_t.backward(x_t, &trace_t, &dz_t, &mut grads.head_t);

    if !losses.total.is_finite() || !grads.is_finite() {
        return Err(Error::Training(format!("non-finite loss or gradient (loss = {})", losses.total)));
    }
    Ok((losses, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, ModelState};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn zero_loss_has_zero_gradient() {
        let arch = Architecture { input_v: 3, input_t: 3, hidden: 4, embed: 2, classes: 2 };
        let state = ModelState::init(arch, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = Array2::from_elem((3, 3), 0.5);
        let w = Array2::zeros((3, 2));
        let obj = BatchObjective { label_weights: Some(w.view()), matching: None, lambda: 0.0, tau3: 1.0 };
        let (loss, g) = forward_backward(&state, x.view(), x.view(), &obj).unwrap();
        assert_eq!(loss.total, 0.0);
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn duplicated_sample_doubles_its_contribution() {
        let arch = Architecture { input_v: 3, input_t: 3, hidden: 5, embed: 4, classes: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let state = ModelState::init(arch, 1.0, &mut rng).unwrap();
        let x1 = Array2::from_shape_fn((1, 3), |_| StandardNormal.sample(&mut rng));
        let x2 = ndarray::concatenate![ndarray::Axis(0), x1, x1];
        let w1 = ndarray::array![[0.0, 1.0, 0.0]];
        let w2 = ndarray::concatenate![ndarray::Axis(0), w1, w1];
        let obj = |w: &Array2<f64>| -> Params {
            let o = BatchObjective { label_weights: Some(w.view()), matching: None, lambda: 0.0, tau3: 1.0 };
            // Scale by batch size to undo the 1/B mean.
            let (_, mut g) = forward_backward(&state, x1.view(), x1.view(), &o).unwrap();
            for t in g.tensors_mut() {
                t.iter_mut().for_each(|v| *v *= w.nrows() as f64);
            }
            g
        };
        let single = obj(&w1);
        let o2 = BatchObjective { label_weights: Some(w2.view()), matching: None, lambda: 0.0, tau3: 1.0 };
        let (_, mut double) = forward_backward(&state, x2.view(), x2.view(), &o2).unwrap();
        for t in double.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= 2.0);
        }
        for (a, b) in single.tensors().iter().zip(double.tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((2.0 * x - y).abs() < 1e-12);
            }
        }
    }
}
