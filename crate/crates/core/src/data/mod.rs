//! Bimodal datasets: synthetic generation, symmetric label noise and file I/O.

pub mod io;

use std::ops::Range;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};

/// Contiguous train / validation / test partition sizes; rows are laid out in that order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Splits {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn train_range(&self) -> Range<usize> {
        0..self.train
    }

    pub fn val_range(&self) -> Range<usize> {
        self.train..self.train + self.val
    }

    pub fn test_range(&self) -> Range<usize> {
        self.train + self.val..self.total()
    }
}

/// Paired visual/text features with (possibly noisy) labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features_v: Array2<f64>,
    pub features_t: Array2<f64>,
    /// Observed labels as class indices. Only the training split is corrupted.
    pub noisy_labels: Vec<usize>,
    pub true_labels: Option<Vec<usize>>,
    pub classes: usize,
    pub splits: Splits,
}

impl Dataset {
    pub fn new(
        features_v: Array2<f64>,
        features_t: Array2<f64>,
        noisy_labels: Vec<usize>,
        true_labels: Option<Vec<usize>>,
        classes: usize,
        splits: Splits,
    ) -> Result<Self> {
        let n = features_v.nrows();
        if features_t.nrows() != n {
            return arg_err(format!(
                "modalities disagree on sample count: visual has {n}, text has {}",
                features_t.nrows()
            ));
        }
        if noisy_labels.len() != n {
            return arg_err(format!("{} labels for {n} samples", noisy_labels.len()));
        }
        if let Some(t) = &true_labels {
            if t.len() != n {
                return arg_err(format!("{} true labels for {n} samples", t.len()));
            }
        }
        if classes < 2 {
            return arg_err("need at least two classes");
        }
        let bad = noisy_labels.iter().chain(true_labels.iter().flatten()).find(|&&c| c >= classes);
        if let Some(c) = bad {
            return arg_err(format!("label {c} out of range for {classes} classes"));
        }
        if splits.total() != n {
            return arg_err(format!("splits cover {} rows but the dataset has {n}", splits.total()));
        }
        if features_v.iter().chain(features_t.iter()).any(|x| !x.is_finite()) {
            return arg_err("features contain non-finite values");
        }
        Ok(Self { features_v, features_t, noisy_labels, true_labels, classes, splits })
    }

    pub fn len(&self) -> usize {
        self.noisy_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noisy_labels.is_empty()
    }

    pub fn view_v(&self, range: Range<usize>) -> ArrayView2<'_, f64> {
        self.features_v.slice(s![range, ..])
    }

    pub fn view_t(&self, range: Range<usize>) -> ArrayView2<'_, f64> {
        self.features_t.slice(s![range, ..])
    }

    /// Clean labels where known, otherwise the observed ones.
    pub fn reference_labels(&self, range: Range<usize>) -> &[usize] {
        match &self.true_labels {
            Some(t) => &t[range],
            None => &self.noisy_labels[range],
        }
    }

    /// Observed labels of `range` as one-hot rows.
    pub fn one_hot(&self, range: Range<usize>) -> Array2<f64> {
        let labels = &self.noisy_labels[range];
        let mut out = Array2::zeros((labels.len(), self.classes));
        for (i, &c) in labels.iter().enumerate() {
            out[[i, c]] = 1.0;
        }
        out
    }

    /// Number of training labels that differ from the truth.
    pub fn corrupted_count(&self) -> Option<usize> {
        let truth = self.true_labels.as_ref()?;
        let r = self.splits.train_range();
        Some(self.noisy_labels[r.clone()].iter().zip(&truth[r]).filter(|(a, b)| a != b).count())
    }
}

/// Parameters of the synthetic Gaussian-cluster generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Training pairs; validation and test pairs come on top.
    pub n: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub k: usize,
    pub d_v: usize,
    pub d_t: usize,
    pub latent_dim: usize,
    /// Standard deviation of a latent around its class center.
    pub cluster_spread: f64,
    /// Standard deviation of the per-modality feature noise.
    pub modality_noise: f64,
    pub noise_ratio: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            n_val: 500,
            n_test: 500,
            k: 10,
            d_v: 32,
            d_t: 32,
            latent_dim: 16,
            cluster_spread: 0.2,
            modality_noise: 0.3,
            noise_ratio: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return arg_err(format!("need k >= 2, got {}", self.k));
        }
        if !(0.0..1.0).contains(&self.noise_ratio) {
            return arg_err(format!("noise ratio must lie in [0, 1), got {}", self.noise_ratio));
        }
        if self.n == 0 || self.d_v == 0 || self.d_t == 0 || self.latent_dim == 0 {
            return arg_err("sizes must be positive");
        }
        if !(self.cluster_spread >= 0.0 && self.modality_noise >= 0.0) {
            return arg_err("spreads must be nonnegative");
        }
        Ok(())
    }
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let x: f64 = StandardNormal.sample(rng);
        std * x
    })
}

/// Draws a dataset of Gaussian clusters seen through two random affine views.
///
/// Class centers lie on the unit sphere of the latent space. The training
/// split's labels are corrupted with [`inject_symmetric_noise`]; validation
/// and test labels stay clean.
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (k, dim) = (config.k, config.latent_dim);
    let mut centers = gaussian_matrix(k, dim, 1.0, &mut rng);
    for mut c in centers.outer_iter_mut() {
        let norm = c.dot(&c).sqrt();
        c /= norm;
    }
    let map_v = gaussian_matrix(config.d_v, dim, 1.0 / (dim as f64).sqrt(), &mut rng);
    let map_t = gaussian_matrix(config.d_t, dim, 1.0 / (dim as f64).sqrt(), &mut rng);
    let shift_v = gaussian_matrix(1, config.d_v, 0.1, &mut rng);
    let shift_t = gaussian_matrix(1, config.d_t, 0.1, &mut rng);

    let splits = Splits { train: config.n, val: config.n_val, test: config.n_test };
    let total = splits.total();
    let labels: Vec<usize> = (0..total).map(|_| rng.random_range(0..k)).collect();
    let mut latent = gaussian_matrix(total, dim, config.cluster_spread, &mut rng);
    for (mut row, &c) in latent.outer_iter_mut().zip(&labels) {
        row += &centers.row(c);
    }
    let features_v = latent.dot(&map_v.t()) + &shift_v + gaussian_matrix(total, config.d_v, config.modality_noise, &mut rng);
    let features_t = latent.dot(&map_t.t()) + &shift_t + gaussian_matrix(total, config.d_t, config.modality_noise, &mut rng);

    let mut noisy = labels.clone();
    let train_noisy = inject_symmetric_noise(&labels[..config.n], k, config.noise_ratio, config.seed ^ 0x006e_6f69_7365)?;
    noisy[..config.n].copy_from_slice(&train_noisy);
    Dataset::new(features_v, features_t, noisy, Some(labels), k, splits)
}

/// Replaces the labels of exactly `floor(rho * N)` uniformly chosen samples
/// with a uniform draw over the other `K - 1` classes.
pub fn inject_symmetric_noise(labels: &[usize], k: usize, rho: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&rho) {
        return arg_err(format!("noise ratio must lie in [0, 1), got {rho}"));
    }
    if k < 2 {
        return arg_err("symmetric noise needs at least two classes");
    }
    if let Some(c) = labels.iter().find(|&&c| c >= k) {
        return arg_err(format!("label {c} out of range for {k} classes"));
    }
    let n = labels.len();
    let count = (rho * n as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = labels.to_vec();
    let mut picked: Vec<usize> = sample(&mut rng, n, count).into_vec();
    picked.sort_unstable();
    for i in picked {
        let draw = rng.random_range(0..k - 1);
        out[i] = if draw >= labels[i] { draw + 1 } else { draw };
    }
    Ok(out)
}
