//! Relation alignment: each sample is described by its softmax affinity to
//! the confident pairs, cross-modal matchings come from OT over the JSD
//! between those descriptions, and the matching weights an InfoNCE loss.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{arg_err, Result};
use crate::linalg::{self, clamped_ln, log_sum_exp, LOG_CLAMP};
use crate::ot::{sinkhorn, CostMatrix, Marginal, SinkhornParams};
use crate::semantic::ConfidentSet;

/// Row-stochastic relation scores of `N` samples against `|G|` confident members.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationMatrix {
    pub values: Array2<f64>,
}

/// Uniform-marginal coupling between visual rows and textual columns.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchingMatrix {
    pub values: Array2<f64>,
    pub converged: bool,
}

/// Softmax over confident members of `-(1 - cos)/tau2`.
///
/// `z` holds the samples to describe; `z_conf_source` is the same modality's
/// embedding table that the confident-set indices point into.
pub fn relation_scores(
    z: ArrayView2<f64>,
    conf: &ConfidentSet,
    z_conf_source: ArrayView2<f64>,
    tau2: f64,
) -> Result<RelationMatrix> {
    if !(tau2 > 0.0) {
        return arg_err(format!("tau2 must be positive, got {tau2}"));
    }
    let members = conf.members();
    if members.is_empty() {
        return arg_err("confident set is empty");
    }
    if z.ncols() != z_conf_source.ncols() || members.iter().any(|&m| m >= z_conf_source.nrows()) {
        return arg_err("confident indices or embedding widths inconsistent");
    }
    let zero_norm = || crate::Error::Argument("embedding row with zero or non-finite norm".into());
    let unit = linalg::normalize_rows(z).ok_or_else(zero_norm)?;
    let anchors = linalg::normalize_rows(z_conf_source.select(ndarray::Axis(0), &members).view())
        .ok_or_else(zero_norm)?;
    let logits = unit.dot(&anchors.t()).mapv(|c| -(1.0 - c) / tau2);
    Ok(RelationMatrix { values: linalg::softmax_rows(logits.view()) })
}

/// Pairwise cost `C[i][j] = JSD(R_v[i], R_t[j])`.
pub fn relation_cost(r_v: &RelationMatrix, r_t: &RelationMatrix) -> Result<CostMatrix> {
    if r_v.values.ncols() != r_t.values.ncols() {
        return arg_err(format!(
            "relation widths differ: {} vs {}",
            r_v.values.ncols(),
            r_t.values.ncols()
        ));
    }
    let (n, m) = (r_v.values.nrows(), r_t.values.nrows());
    let neg_entropy = |r: &Array2<f64>| -> Vec<f64> {
        r.outer_iter().map(|row| row.iter().filter(|&&a| a > 0.0).map(|&a| a * a.ln()).sum()).collect()
    };
    let (h_v, h_t) = (neg_entropy(&r_v.values), neg_entropy(&r_t.values));
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let p = r_v.values.row(i);
            (0..m)
                .map(|j| {
                    let mixed: f64 = p
                        .iter()
                        .zip(r_t.values.row(j))
                        .map(|(&a, &b)| a + b)
                        .filter(|&s| s > 0.0)
                        .map(|s| s * (0.5 * s).ln())
                        .sum();
                    (0.5 * (h_v[i] + h_t[j] - mixed)).max(0.0)
                })
                .collect()
        })
        .collect();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let values = Array2::from_shape_vec((n, m), flat).map_err(|e| crate::Error::Argument(e.to_string()))?;
    CostMatrix::new(values)
}

/// Sinkhorn with uniform `1/N` marginals on the max-normalized relation cost.
pub fn solve_matching(cost: &CostMatrix, params: &SinkhornParams) -> Result<MatchingMatrix> {
    let (n, m) = cost.dim();
    if n != m {
        return arg_err(format!("matching needs a square cost, got {n}x{m}"));
    }
    let u = Marginal::uniform(n)?;
    let plan = sinkhorn(&cost.normalized_by_max(), &u, &u, params)?;
    Ok(MatchingMatrix { values: plan.values, converged: plan.converged })
}

/// Intermediate quantities of the matching-weighted InfoNCE, shared with the gradient code.
pub(crate) struct BhgParts {
    pub loss: f64,
    /// dLoss/dS where `S[i][j] = z_v[i] . z_t[j] / tau3`.
    pub grad_logits: Array2<f64>,
}

fn normalized_rows(m: ArrayView2<f64>) -> (Array2<f64>, Vec<bool>) {
    let mut out = m.to_owned();
    let mut live = Vec::with_capacity(m.nrows());
    for mut row in out.outer_iter_mut() {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
            live.push(true);
        } else {
            live.push(false);
        }
    }
    (out, live)
}

pub(crate) fn bhg_parts(
    matching: ArrayView2<f64>,
    z_v: ArrayView2<f64>,
    z_t: ArrayView2<f64>,
    tau3: f64,
) -> Result<BhgParts> {
    if !(tau3 > 0.0) {
        return arg_err(format!("tau3 must be positive, got {tau3}"));
    }
    let b = z_v.nrows();
    if z_t.dim() != z_v.dim() || matching.dim() != (b, b) {
        return arg_err(format!(
            "bhg shapes inconsistent: M {:?}, z_v {:?}, z_t {:?}",
            matching.dim(),
            z_v.dim(),
            z_t.dim()
        ));
    }
    let logits = z_v.dot(&z_t.t()) / tau3;
    let (m_v2t, live_v) = normalized_rows(matching);
    let (m_t2v, live_t) = normalized_rows(matching.t());

    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros((b, b));
    let mut count = 0usize;
    for i in 0..b {
        if !(live_v[i] || live_t[i]) {
            continue;
        }
        count += 1;
        if live_v[i] {
            loss += direction_term(logits.row(i), m_v2t.row(i), |j, g| grad[[i, j]] += g);
        }
        if live_t[i] {
            loss += direction_term(logits.column(i), m_t2v.row(i), |j, g| grad[[j, i]] += g);
        }
    }
    if count == 0 {
        return Ok(BhgParts { loss: 0.0, grad_logits: grad });
    }
    let scale = 1.0 / count as f64;
    grad *= -scale;
    Ok(BhgParts { loss: -loss * scale, grad_logits: grad })
}

/// Adds `sum_j w_j log softmax(s)_j` and reports `d/ds_j` of that sum through `emit`.
fn direction_term(
    scores: ndarray::ArrayView1<f64>,
    weights: ndarray::ArrayView1<f64>,
    mut emit: impl FnMut(usize, f64),
) -> f64 {
    let lse = log_sum_exp(scores.iter().copied());
    let probs: Vec<f64> = scores.iter().map(|s| (s - lse).exp()).collect();
    let live_mass: f64 = weights
        .iter()
        .zip(&probs)
        .filter(|(_, &p)| p >= LOG_CLAMP)
        .map(|(w, _)| w)
        .sum();
    let mut total = 0.0;
    for (j, (&w, &p)) in weights.iter().zip(&probs).enumerate() {
        if w != 0.0 {
            total += w * clamped_ln(p);
        }
        let own = if p >= LOG_CLAMP { w } else { 0.0 };
        emit(j, own - p * live_mass);
    }
    total
}

/// Matching-weighted bidirectional InfoNCE over one batch.
///
/// `matching` is the batch's `B x B` block; it is row-normalized for the
/// visual-to-text direction and column-normalized for text-to-visual. Rows
/// with no matching mass in either direction are left out of the mean.
pub fn bhg_loss(matching: ArrayView2<f64>, z_v: ArrayView2<f64>, z_t: ArrayView2<f64>, tau3: f64) -> Result<f64> {
    Ok(bhg_parts(matching, z_v, z_t, tau3)?.loss)
}
