//! Progressive label correction as partial optimal transport.
//!
//! Only a fraction `s` of the sample mass is transported to classes. The
//! problem is turned into a balanced one by appending a slack row and a
//! slack column, and the sample-by-class block of the balanced plan is the
//! corrected label assignment.

use ndarray::{Array1, Array2};

use crate::error::{arg_err, Result};
use crate::ot::{sinkhorn, CostMatrix, Marginal, SinkhornParams};

/// Cost put on the slack-to-slack cell before solving, relative to the
/// largest normalized cost. With an entropic solver a zero corner lets mass
/// leak through the slack pair and inflates the transported mass beyond `s`.
pub const SLACK_CORNER_COST: f64 = 1e3;

/// Row-sum threshold below which a sample counts as unassigned.
pub const ASSIGNED_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct PartialOtProblem {
    cost: CostMatrix,
    mass: f64,
    class_prior: Marginal,
}

impl PartialOtProblem {
    pub fn new(cost: CostMatrix, mass: f64, class_prior: Marginal) -> Result<Self> {
        if !(0.0..=1.0).contains(&mass) {
            return arg_err(format!("transported mass must lie in [0, 1], got {mass}"));
        }
        let (_, k) = cost.dim();
        if class_prior.len() != k {
            return arg_err(format!(
                "class prior has {} entries but cost has {k} classes",
                class_prior.len()
            ));
        }
        if (class_prior.total() - 1.0).abs() > 1e-9 {
            return arg_err(format!("class prior must sum to 1, got {}", class_prior.total()));
        }
        Ok(Self { cost, mass, class_prior })
    }

    /// Same as [`PartialOtProblem::new`] with a uniform class prior.
    pub fn uniform(cost: CostMatrix, mass: f64) -> Result<Self> {
        let k = cost.dim().1;
        Self::new(cost, mass, Marginal::uniform(k)?)
    }

    pub fn cost(&self) -> &CostMatrix {
        &self.cost
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn class_prior(&self) -> &Marginal {
        &self.class_prior
    }

    pub fn samples(&self) -> usize {
        self.cost.dim().0
    }

    pub fn classes(&self) -> usize {
        self.cost.dim().1
    }
}

/// Corrected labels, already rescaled by `N` so each row sums to at most one.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabelMatrix {
    pub values: Array2<f64>,
    /// `(1/N) * sum(values)`, the transported fraction.
    pub assigned_mass: f64,
    pub converged: bool,
}

impl SoftLabelMatrix {
    pub fn zeros(n: usize, k: usize) -> Self {
        Self { values: Array2::zeros((n, k)), assigned_mass: 0.0, converged: true }
    }

    pub fn row_mass(&self, i: usize) -> f64 {
        self.values.row(i).sum()
    }

    pub fn is_assigned(&self, i: usize) -> bool {
        self.row_mass(i) >= ASSIGNED_THRESHOLD
    }
}

/// Builds the balanced problem: cost with a zero slack row and column, row
/// marginal `[1/N; 1-s]` and column marginal `[r; 1-s]`.
pub fn augment(problem: &PartialOtProblem) -> Result<(CostMatrix, Marginal, Marginal)> {
    let (n, k) = problem.cost.dim();
    let mut cost = Array2::zeros((n + 1, k + 1));
    cost.slice_mut(ndarray::s![..n, ..k]).assign(&problem.cost.values());
    let slack = 1.0 - problem.mass;

    let mut alpha = Array1::from_elem(n + 1, 1.0 / n as f64);
    alpha[n] = slack;
    let mut beta = Array1::zeros(k + 1);
    beta.slice_mut(ndarray::s![..k]).assign(problem.class_prior.weights());
    beta[k] = slack;

    Ok((CostMatrix::new(cost)?, Marginal::new(alpha)?, Marginal::new(beta)?))
}

/// Solves the partial problem and returns `N * Yhat`.
///
/// The sample-by-class cost is normalized by its maximum before solving so
/// `params.epsilon` is relative to the cost range.
pub fn solve_partial(problem: &PartialOtProblem, params: &SinkhornParams) -> Result<SoftLabelMatrix> {
    let (n, k) = problem.cost.dim();
    if problem.mass == 0.0 {
        return Ok(SoftLabelMatrix::zeros(n, k));
    }
    let normalized = PartialOtProblem {
        cost: problem.cost.normalized_by_max(),
        mass: problem.mass,
        class_prior: problem.class_prior.clone(),
    };
    let (cost, alpha, beta) = augment(&normalized)?;
    let mut blocked = cost.into_inner();
    blocked[[n, k]] = SLACK_CORNER_COST;
    let cost = CostMatrix::new(blocked)?;

    let plan = sinkhorn(&cost, &alpha, &beta, params)?;
    let values = plan.values.slice(ndarray::s![..n, ..k]).mapv(|y| y * n as f64);
    let assigned_mass = values.sum() / n as f64;
    Ok(SoftLabelMatrix { values, assigned_mass, converged: plan.converged })
}

/// Linear ramp of the transported mass over the correction epochs.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MassSchedule {
    pub s_start: f64,
    pub s_end: f64,
    pub total_epochs: usize,
}

impl MassSchedule {
    pub fn new(s_start: f64, s_end: f64, total_epochs: usize) -> Result<Self> {
        if !(0.0 <= s_start && s_start <= s_end && s_end <= 1.0) {
            return arg_err(format!("need 0 <= s_start <= s_end <= 1, got {s_start}, {s_end}"));
        }
        if total_epochs == 0 {
            return arg_err("mass schedule needs at least one epoch");
        }
        Ok(Self { s_start, s_end, total_epochs })
    }

    pub fn mass_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return arg_err(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            ));
        }
        if self.total_epochs == 1 {
            return Ok(self.s_end);
        }
        let t = epoch as f64 / (self.total_epochs - 1) as f64;
        Ok(self.s_start + (self.s_end - self.s_start) * t)
    }
}

/// Class prior estimated from the argmax histogram of `labels`, floored so no class is empty.
pub fn prior_from_argmax(labels: &Array2<f64>) -> Result<Marginal> {
    let k = labels.ncols();
    let mut counts = Array1::<f64>::zeros(k);
    for row in labels.outer_iter() {
        counts[crate::linalg::argmax(row)] += 1.0;
    }
    counts.mapv_inplace(|c| c.max(1.0));
    let total = counts.sum();
    Marginal::new(counts / total)
}
