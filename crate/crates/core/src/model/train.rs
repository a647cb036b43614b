//! The alternating solve-then-descend training loop.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward_backward, Adam, AdamConfig, Architecture, BatchObjective, ModelState, Modality};
use crate::data::Dataset;
use crate::error::{arg_err, Result};
use crate::eval::{correction_accuracy, evaluate_retrieval, RetrievalResult};
use crate::ot::{CostMatrix, Marginal, SinkhornParams};
use crate::partial::{prior_from_argmax, solve_partial, MassSchedule, PartialOtProblem, SoftLabelMatrix};
use crate::relation::{relation_cost, relation_scores, solve_matching};
use crate::semantic::{default_neighbors, knn, select_confident, semantic_cost, update_targets, ConfidentSet, TargetMatrix};

/// Which loss terms are active after warm-up.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Corrected-label loss plus relation alignment.
    #[default]
    Full,
    /// Plain cross-entropy on the observed labels for every epoch.
    CeBaseline,
    /// Cross-entropy on observed labels plus relation alignment.
    AblatePlc,
    /// Corrected-label loss only.
    AblateBhg,
}

impl Mode {
    fn corrects_labels(self) -> bool {
        matches!(self, Mode::Full | Mode::AblateBhg)
    }

    fn aligns_relations(self) -> bool {
        matches!(self, Mode::Full | Mode::AblatePlc)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    /// Weight of the alignment loss.
    pub lambda: f64,
    /// Momentum of the soft-target update.
    pub gamma: f64,
    pub s_start: f64,
    pub s_end: f64,
    pub epsilon_ot: f64,
    pub sinkhorn_max_iters: usize,
    pub sinkhorn_tol: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub tau3: f64,
    pub hidden: usize,
    pub embed_dim: usize,
    pub confident_per_class: usize,
    /// Neighbors per sample for the semantic cost; 0 picks about 0.5% of the training set.
    pub neighbors: usize,
    /// Estimate the class prior from the current labels instead of assuming uniform.
    pub estimate_prior: bool,
    pub adam: AdamConfig,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            warmup_epochs: 2,
            batch_size: 200,
            lambda: 0.4,
            gamma: 0.99,
            s_start: 0.2,
            s_end: 0.8,
            epsilon_ot: 0.1,
            sinkhorn_max_iters: 5000,
            sinkhorn_tol: 1e-6,
            tau1: 1.0,
            tau2: 0.1,
            tau3: 1.0,
            hidden: 64,
            embed_dim: 16,
            confident_per_class: 5,
            neighbors: 0,
            estimate_prior: false,
            adam: AdamConfig { lr: 1e-2, ..AdamConfig::default() },
            mode: Mode::Full,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return arg_err("epochs and batch size must be positive");
        }
        if self.warmup_epochs > self.epochs {
            return arg_err(format!(
                "warm-up ({}) cannot exceed the number of epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.lambda >= 0.0) {
            return arg_err(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return arg_err(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(self.tau1 > 0.0 && self.tau2 > 0.0 && self.tau3 > 0.0) {
            return arg_err("temperatures must be positive");
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.eps > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return arg_err("Adam needs lr > 0, eps > 0 and betas in [0, 1)");
        }
        if self.epochs > self.warmup_epochs {
            MassSchedule::new(self.s_start, self.s_end, self.epochs - self.warmup_epochs)?;
        }
        self.sinkhorn().validate()?;
        Ok(())
    }

    /// The configuration with the alignment weight zeroed when that loss is disabled.
    pub fn effective_lambda(&self) -> f64 {
        if self.mode.aligns_relations() {
            self.lambda
        } else {
            0.0
        }
    }

    pub fn sinkhorn(&self) -> SinkhornParams {
        SinkhornParams { epsilon: self.epsilon_ot, max_iters: self.sinkhorn_max_iters, tol: self.sinkhorn_tol }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Warmup,
    Ce,
    Correct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: Phase,
    pub loss_label: f64,
    pub loss_bhg: f64,
    pub loss_total: f64,
    pub mass: Option<f64>,
    pub assigned_mass: Option<f64>,
    pub partial_converged: Option<bool>,
    pub unconverged_matchings: usize,
    pub correction_acc_assigned: Option<f64>,
    pub correction_acc_all: Option<f64>,
    pub val_map_i2t: Option<f64>,
    pub val_map_t2i: Option<f64>,
    pub test_map_i2t: Option<f64>,
    pub test_map_t2i: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochMetrics>,
    /// Test retrieval of the final model.
    pub final_test: Option<RetrievalResult>,
    /// Test retrieval at the epoch with the best mean validation mAP.
    pub selected_test: Option<RetrievalResult>,
    pub selected_epoch: Option<usize>,
}

/// How often each OT solver ran.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub partial_ot_solves: usize,
    pub relation_ot_solves: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub optimizer: Adam,
    /// Evolving soft targets used by the neighbor vote.
    pub targets: TargetMatrix,
    /// Per-sample supervision of the last epoch.
    pub training_targets: Array2<f64>,
    pub last_correction: Option<SoftLabelMatrix>,
    pub log: TrainingLog,
    pub counters: Counters,
    pub rng: ChaCha8Rng,
    pub epochs_done: usize,
}

struct Snapshot {
    z_v: Array2<f64>,
    z_t: Array2<f64>,
    conf: ConfidentSet,
}

fn rows(m: ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    m.select(Axis(0), idx)
}

/// Test/validation retrieval for one split, `None` when the split is empty.
pub fn split_retrieval(state: &ModelState, data: &Dataset, range: std::ops::Range<usize>) -> Result<Option<RetrievalResult>> {
    if range.is_empty() {
        return Ok(None);
    }
    let z_v = state.embed(data.view_v(range.clone()), Modality::Visual)?;
    let z_t = state.embed(data.view_t(range.clone()), Modality::Text)?;
    Ok(Some(evaluate_retrieval(z_v.view(), z_t.view(), data.reference_labels(range))?))
}

/// One partial-OT label correction from the given training-split embeddings.
pub fn correction_step(
    conf: &ConfidentSet,
    z_v: ArrayView2<f64>,
    z_t: ArrayView2<f64>,
    targets: &TargetMatrix,
    training_targets: ArrayView2<f64>,
    mass: f64,
    config: &TrainConfig,
) -> Result<SoftLabelMatrix> {
    let n = z_v.nrows();
    let neighbors = if config.neighbors == 0 { default_neighbors(n) } else { config.neighbors };
    let nbrs_v = knn(z_v, neighbors)?;
    let nbrs_t = knn(z_t, neighbors)?;
    let raw = semantic_cost(conf, &nbrs_v, &nbrs_t, targets, z_v, z_t)?;
    let prior = if config.estimate_prior {
        prior_from_argmax(&training_targets.to_owned())?
    } else {
        Marginal::uniform(targets.values.ncols())?
    };
    let problem = PartialOtProblem::new(CostMatrix::shifted_nonnegative(raw)?, mass, prior)?;
    solve_partial(&problem, &config.sinkhorn())
}

/// Trains from scratch on the training split of `data`.
pub fn train(data: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(data, config, |_| Ok(()))
}

/// [`train`], handing every finished epoch's metrics to `observer`.
pub fn train_observed(
    data: &Dataset,
    config: &TrainConfig,
    mut observer: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_range = data.splits.train_range();
    let n = train_range.len();
    let k = data.classes;
    if config.confident_per_class * k > n {
        return arg_err("training split too small for the confident set");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let arch = Architecture {
        input_v: data.features_v.ncols(),
        input_t: data.features_t.ncols(),
        hidden: config.hidden,
        embed: config.embed_dim,
        classes: k,
    };
    let mut state = ModelState::init(arch, config.tau1, &mut rng)?;
    let mut optimizer = Adam::new(config.adam, &state.params);
    let x_v = data.view_v(train_range.clone());
    let x_t = data.view_t(train_range.clone());
    let noisy = data.one_hot(train_range.clone());
    let truth = data.true_labels.as_ref().map(|t| &t[train_range.clone()]);
    let mut targets = TargetMatrix { values: noisy.clone() };
    let mut training_targets = noisy.clone();
    let mut last_correction = None;
    let lambda = config.effective_lambda();
    let sinkhorn = config.sinkhorn();
    let correcting_epochs = config.epochs - config.warmup_epochs;
    let schedule = (correcting_epochs > 0)
        .then(|| MassSchedule::new(config.s_start, config.s_end, correcting_epochs))
        .transpose()?;

    let mut log = TrainingLog::default();
    let mut counters = Counters::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut best_val = f64::NEG_INFINITY;

    for epoch in 0..config.epochs {
        let correcting = config.mode != Mode::CeBaseline && epoch >= config.warmup_epochs;
        let phase = match (epoch < config.warmup_epochs, config.mode) {
            (true, _) => Phase::Warmup,
            (false, Mode::CeBaseline) => Phase::Ce,
            _ => Phase::Correct,
        };
        let mut metrics = EpochMetrics {
            epoch,
            phase,
            loss_label: 0.0,
            loss_bhg: 0.0,
            loss_total: 0.0,
            mass: None,
            assigned_mass: None,
            partial_converged: None,
            unconverged_matchings: 0,
            correction_acc_assigned: None,
            correction_acc_all: None,
            val_map_i2t: None,
            val_map_t2i: None,
            test_map_i2t: None,
            test_map_t2i: None,
        };

        let snapshot = if correcting {
            let z_v = state.embed(x_v, Modality::Visual)?;
            let z_t = state.embed(x_t, Modality::Text)?;
            let conf = select_confident(state.predict(z_v.view()).view(), state.predict(z_t.view()).view(), config.confident_per_class)?;
            if config.mode.corrects_labels() {
                let s = schedule.as_ref().expect("correcting epochs exist").mass_at(epoch - config.warmup_epochs)?;
                let soft = correction_step(&conf, z_v.view(), z_t.view(), &targets, training_targets.view(), s, config)?;
                counters.partial_ot_solves += 1;
                if soft.converged {
                    for i in 0..n {
                        if soft.is_assigned(i) {
                            training_targets.row_mut(i).assign(&soft.values.row(i));
                        }
                    }
                }
                metrics.mass = Some(s);
                metrics.assigned_mass = Some(soft.assigned_mass);
                metrics.partial_converged = Some(soft.converged);
                if let Some(truth) = truth {
                    let acc = correction_accuracy(&soft, training_targets.view(), truth)?;
                    metrics.correction_acc_assigned = acc.assigned;
                    metrics.correction_acc_all = Some(acc.all);
                }
                targets = update_targets(&targets, state.params.prototypes.view(), z_v.view(), z_t.view(), config.gamma)?;
                last_correction = Some(soft);
            }
            Some(Snapshot { z_v, z_t, conf })
        } else {
            None
        };

        order.shuffle(&mut rng);
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let bv = rows(x_v, batch);
            let bt = rows(x_t, batch);
            let weights = if correcting && config.mode.corrects_labels() {
                rows(training_targets.view(), batch)
            } else {
                rows(noisy.view(), batch)
            };
            let matching = match &snapshot {
                Some(snap) if lambda > 0.0 && batch.len() > 1 => {
                    let r_v = relation_scores(state.embed(bv.view(), Modality::Visual)?.view(), &snap.conf, snap.z_v.view(), config.tau2)?;
                    let r_t = relation_scores(state.embed(bt.view(), Modality::Text)?.view(), &snap.conf, snap.z_t.view(), config.tau2)?;
                    let m = solve_matching(&relation_cost(&r_v, &r_t)?, &sinkhorn)?;
                    counters.relation_ot_solves += 1;
                    if !m.converged {
                        metrics.unconverged_matchings += 1;
                    }
                    Some(m.values)
                }
                _ => None,
            };
            let objective = BatchObjective {
                label_weights: Some(weights.view()),
                matching: matching.as_ref().map(|m| m.view()),
                lambda,
                tau3: config.tau3,
            };
            let (losses, grads) = forward_backward(&state, bv.view(), bt.view(), &objective)?;
            optimizer.update(&mut state.params, &grads);
            if !state.params.is_finite() {
                return Err(crate::Error::Training(format!("parameters became non-finite in epoch {epoch}")));
            }
            metrics.loss_label += losses.label;
            metrics.loss_bhg += losses.bhg;
            metrics.loss_total += losses.total;
            batches += 1;
        }
        let per = batches.max(1) as f64;
        metrics.loss_label /= per;
        metrics.loss_bhg /= per;
        metrics.loss_total /= per;

        let val = split_retrieval(&state, data, data.splits.val_range())?;
        let test = split_retrieval(&state, data, data.splits.test_range())?;
        if let Some(v) = &val {
            metrics.val_map_i2t = Some(v.map_i2t);
            metrics.val_map_t2i = Some(v.map_t2i);
            if v.mean() > best_val {
                best_val = v.mean();
                log.selected_test = test.clone();
                log.selected_epoch = Some(epoch);
            }
        }
        if let Some(t) = &test {
            metrics.test_map_i2t = Some(t.map_i2t);
            metrics.test_map_t2i = Some(t.map_t2i);
        }
        log.final_test = test;
        observer(&metrics)?;
        log.epochs.push(metrics);
    }

    Ok(TrainOutcome {
        state,
        optimizer,
        targets,
        training_targets,
        last_correction,
        log,
        counters,
        rng,
        epochs_done: config.epochs,
    })
}
