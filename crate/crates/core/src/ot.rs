//! Entropic optimal transport between two discrete measures.
//!
//! The solver works on dual potentials in the log domain, so small
//! regularization strengths do not underflow the Gibbs kernel. An
//! exhaustive assignment oracle is provided for small square problems.

use itertools::Itertools;
use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{arg_err, Result};

/// Largest problem the permutation oracle accepts.
pub const ORACLE_MAX_N: usize = 8;

/// Dense cost matrix with finite, nonnegative entries.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix(Array2<f64>);

impl CostMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (m, n) = values.dim();
        if m == 0 || n == 0 {
            return arg_err(format!("cost matrix must be non-empty, got {m}x{n}"));
        }
        if let Some(bad) = values.iter().find(|x| !x.is_finite()) {
            return arg_err(format!("cost matrix has non-finite entry {bad}"));
        }
        if let Some(bad) = values.iter().find(|&&x| x < 0.0) {
            return arg_err(format!("cost matrix has negative entry {bad}"));
        }
        Ok(Self(values))
    }

    /// Builds a cost matrix from arbitrary finite values by subtracting the global minimum.
    pub fn shifted_nonnegative(values: Array2<f64>) -> Result<Self> {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        if !min.is_finite() {
            return arg_err("cost matrix has non-finite entries");
        }
        Self::new(values.mapv(|x| (x - min).max(0.0)))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return arg_err("ragged cost rows");
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let values = Array2::from_shape_vec((rows.len(), n), flat)
            .map_err(|e| crate::Error::Argument(e.to_string()))?;
        Self::new(values)
    }

    /// Divides by the largest absolute entry. An all-zero matrix is returned unchanged.
    pub fn normalized_by_max(&self) -> Self {
        let max = self.0.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        if max > 0.0 {
            Self(self.0.mapv(|x| x / max))
        } else {
            self.clone()
        }
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.0.mapv(|x| x * factor))
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }
}

/// Nonnegative weight vector with positive total mass.
#[derive(Clone, Debug, PartialEq)]
pub struct Marginal(Array1<f64>);

impl Marginal {
    pub fn new(weights: impl Into<Array1<f64>>) -> Result<Self> {
        let weights = weights.into();
        if weights.is_empty() {
            return arg_err("marginal must be non-empty");
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return arg_err("marginal weights must be finite and nonnegative");
        }
        if weights.sum() <= 0.0 {
            return arg_err("marginal must carry positive mass");
        }
        Ok(Self(weights))
    }

    /// `n` equal weights of `1/n`.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return arg_err("uniform marginal needs n >= 1");
        }
        Self::new(Array1::from_elem(n, 1.0 / n as f64))
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornParams {
    pub epsilon: f64,
    pub max_iters: usize,
    /// Stop once the L∞ marginal violation is at most this.
    pub tol: f64,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        Self { epsilon: 0.1, max_iters: 5000, tol: 1e-6 }
    }
}

impl SinkhornParams {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self { epsilon, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return arg_err(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.tol > 0.0) {
            return arg_err(format!("tol must be positive, got {}", self.tol));
        }
        if self.max_iters == 0 {
            return arg_err("max_iters must be positive");
        }
        Ok(())
    }
}

/// Output of [`sinkhorn`]. Non-convergence is reported through `converged`, not an error.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub values: Array2<f64>,
    pub row_marginal: Marginal,
    pub col_marginal: Marginal,
    pub converged: bool,
    pub iterations: usize,
    /// L∞ marginal violation of the last Sinkhorn iterate. `values` is that
    /// iterate rounded onto the marginals, so it is always feasible.
    pub max_violation: f64,
}

impl TransportPlan {
    pub fn objective(&self, cost: &CostMatrix) -> Result<f64> {
        ot_objective(self.values.view(), cost)
    }
}

const CHECK_EVERY: usize = 10;
/// Marginal tolerance for the coarse warm-start stages.
const STAGE_TOL: f64 = 1e-3;
/// Largest cost range over epsilon solved without warm starts.
const WELL_CONDITIONED: f64 = 16.0;

/// Epsilons to solve at, target first, doubling until the cost range over
/// epsilon is small. Warm starting from coarser stages does not change the
/// fixed point but avoids the slow convergence of a cold start at small epsilon.
fn epsilon_stages(cost: &CostMatrix, epsilon: f64) -> Vec<f64> {
    let v = cost.values();
    let range = v.fold(f64::NEG_INFINITY, |a, &b| a.max(b)) - v.fold(f64::INFINITY, |a, &b| a.min(b));
    let mut stages = vec![epsilon];
    while range / stages[stages.len() - 1] > WELL_CONDITIONED && stages.len() < 64 {
        stages.push(stages[stages.len() - 1] * 2.0);
    }
    stages
}

/// Solves entropy-regularized OT between `alpha` and `beta` under `cost`.
///
/// Marginals need not be normalized, but their totals must agree. The
/// returned plan has the form `diag(u) exp(-cost/eps) diag(v)`.
pub fn sinkhorn(
    cost: &CostMatrix,
    alpha: &Marginal,
    beta: &Marginal,
    params: &SinkhornParams,
) -> Result<TransportPlan> {
    params.validate()?;
    let (m, n) = cost.dim();
    if alpha.len() != m || beta.len() != n {
        return arg_err(format!(
            "marginal lengths ({}, {}) do not match cost shape {m}x{n}",
            alpha.len(),
            beta.len()
        ));
    }
    let (ta, tb) = (alpha.total(), beta.total());
    if (ta - tb).abs() > 1e-9 * ta.max(tb) {
        return arg_err(format!("marginal totals differ: {ta} vs {tb}"));
    }

    let log_a = alpha.weights().mapv(f64::ln);
    let log_b = beta.weights().mapv(f64::ln);
    // Potentials in cost units; each stage works with them divided by its epsilon.
    let mut f_cost = Array1::<f64>::zeros(m);
    let mut g_cost = Array1::<f64>::zeros(n);
    let mut f = Array1::<f64>::zeros(m);
    let mut g = Array1::<f64>::zeros(n);
    let mut buf = vec![0.0; m.max(n)];

    let mut iterations = 0;
    let mut violation = f64::INFINITY;
    let mut converged = false;
    let mut scaled = Array2::zeros((m, n));
    for (stage, eps) in epsilon_stages(cost, params.epsilon).into_iter().enumerate().rev() {
        let last = stage == 0;
        let stage_tol = if last { params.tol } else { params.tol.max(STAGE_TOL) };
        scaled = cost.values().mapv(|c| c / eps);
        let scaled_t = scaled.t().as_standard_layout().into_owned();
        f.assign(&(&f_cost / eps));
        g.assign(&(&g_cost / eps));
        while iterations < params.max_iters {
            potential_pass(&scaled, &log_a, &g, &mut f, &mut buf);
            potential_pass(&scaled_t, &log_b, &f, &mut g, &mut buf);
            iterations += 1;
            if iterations % CHECK_EVERY == 0 || iterations == params.max_iters {
                let plan = assemble(&scaled, &f, &g);
                violation = marginal_violation(plan.view(), alpha, beta);
                if violation <= stage_tol {
                    converged = last;
                    break;
                }
            }
        }
        if converged || iterations == params.max_iters {
            break;
        }
        f_cost = f.mapv(|x| x * eps);
        g_cost = g.mapv(|x| x * eps);
    }

    let raw = assemble(&scaled, &f, &g);
    violation = violation.min(marginal_violation(raw.view(), alpha, beta));
    let values = round_to_marginals(raw, alpha, beta);
    Ok(TransportPlan {
        values,
        row_marginal: alpha.clone(),
        col_marginal: beta.clone(),
        converged,
        iterations,
        max_violation: violation,
    })
}

/// Projects a near-feasible plan onto the transport polytope.
///
/// Rows and then columns are scaled down to their targets; the remaining
/// deficits are filled with a rank-one correction. The result differs from
/// `plan` by at most twice its L1 marginal violation.
pub fn round_to_marginals(mut plan: Array2<f64>, alpha: &Marginal, beta: &Marginal) -> Array2<f64> {
    let shrink = |target: f64, have: f64| if have > target { target / have } else { 1.0 };
    let rows = crate::linalg::row_sums(plan.view());
    for (mut row, (&a, &r)) in plan.outer_iter_mut().zip(alpha.weights().iter().zip(&rows)) {
        row *= shrink(a, r);
    }
    let cols = crate::linalg::col_sums(plan.view());
    for (mut col, (&b, &c)) in plan.columns_mut().into_iter().zip(beta.weights().iter().zip(&cols)) {
        col *= shrink(b, c);
    }
    let err_r = alpha.weights() - &crate::linalg::row_sums(plan.view());
    let err_c = beta.weights() - &crate::linalg::col_sums(plan.view());
    let total = err_r.sum();
    if total > 0.0 {
        for ((i, j), p) in plan.indexed_iter_mut() {
            *p += err_r[i] * err_c[j] / total;
        }
    }
    plan
}

/// `out[i] = log_w[i] - logsumexp_j(other[j] - scaled[i][j])`.
fn potential_pass(scaled: &Array2<f64>, log_w: &Array1<f64>, other: &Array1<f64>, out: &mut Array1<f64>, buf: &mut [f64]) {
    let other = other.as_slice().expect("contiguous potentials");
    for (i, row) in scaled.outer_iter().enumerate() {
        if log_w[i] == f64::NEG_INFINITY {
            out[i] = f64::NEG_INFINITY;
            continue;
        }
        let row = row.to_slice().expect("standard layout");
        let terms = &mut buf[..row.len()];
        let mut max = f64::NEG_INFINITY;
        for ((t, &o), &c) in terms.iter_mut().zip(other).zip(row) {
            *t = o - c;
            max = max.max(*t);
        }
        out[i] = if max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            log_w[i] - (max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln())
        };
    }
}

fn assemble(scaled: &Array2<f64>, f: &Array1<f64>, g: &Array1<f64>) -> Array2<f64> {
    let mut plan = Array2::zeros(scaled.raw_dim());
    for ((i, j), p) in plan.indexed_iter_mut() {
        let e = f[i] + g[j] - scaled[[i, j]];
        *p = if e == f64::NEG_INFINITY { 0.0 } else { e.exp() };
    }
    plan
}

/// L∞ violation of both marginal constraints.
pub fn marginal_violation(plan: ArrayView2<f64>, alpha: &Marginal, beta: &Marginal) -> f64 {
    let rows = crate::linalg::row_sums(plan);
    let cols = crate::linalg::col_sums(plan);
    let r = rows
        .iter()
        .zip(alpha.weights())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let c = cols
        .iter()
        .zip(beta.weights())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    r.max(c)
}

/// Frobenius inner product `<plan, cost>`.
pub fn ot_objective(plan: ArrayView2<f64>, cost: &CostMatrix) -> Result<f64> {
    if plan.dim() != cost.dim() {
        return arg_err(format!(
            "plan shape {:?} does not match cost shape {:?}",
            plan.dim(),
            cost.dim()
        ));
    }
    Ok(plan.iter().zip(cost.values().iter()).map(|(p, c)| p * c).sum())
}

/// Exact uniform-marginal OT on an `n x n` cost by enumerating permutations.
///
/// Returns the minimizing permutation (`sigma[i]` is the column matched to
/// row `i`; the lexicographically first on ties) and its objective
/// `(1/n) * sum_i cost[i, sigma(i)]`.
pub fn exact_ot_oracle(cost: &CostMatrix) -> Result<(Vec<usize>, f64)> {
    let (m, n) = cost.dim();
    if m != n {
        return arg_err(format!("oracle needs a square cost, got {m}x{n}"));
    }
    if n > ORACLE_MAX_N {
        return arg_err(format!("oracle refuses n = {n} > {ORACLE_MAX_N}"));
    }
    let c = cost.values();
    let mut best: Option<(Vec<usize>, f64)> = None;
    for perm in (0..n).permutations(n) {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum();
        if best.as_ref().is_none_or(|(_, b)| total < *b) {
            best = Some((perm, total));
        }
    }
    let (perm, total) = best.expect("n >= 1");
    Ok((perm, total / n as f64))
}
