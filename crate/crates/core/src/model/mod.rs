//! Projection heads, prototype classifier, losses, gradients and training.

mod adam;
mod grad;
mod train;

pub use adam::{Adam, AdamConfig};
pub use grad::{forward_backward, BatchObjective, LossBreakdown};
pub use train::{
    correction_step, split_retrieval, train, train_observed, Counters, EpochMetrics, Mode, Phase, TrainConfig,
    TrainOutcome, TrainingLog,
};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::linalg::{self, clamped_ln};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Text,
}

/// Two-layer head: affine, ReLU, affine.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Activations kept from a forward pass for backpropagation.
pub(crate) struct HeadTrace {
    pub pre: Array2<f64>,
    pub hidden: Array2<f64>,
}

impl Head {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: Array2::zeros((hidden, input)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((output, hidden)),
            b2: Array1::zeros(output),
        }
    }

    /// Uniform fan-in initialization with zero biases.
    pub fn random(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        let mut head = Self::zeros(input, hidden, output);
        let a1 = (6.0 / input as f64).sqrt();
        let u1 = Uniform::new_inclusive(-a1, a1).expect("finite bounds");
        head.w1.mapv_inplace(|_| u1.sample(rng));
        let a2 = (3.0 / hidden as f64).sqrt();
        let u2 = Uniform::new_inclusive(-a2, a2).expect("finite bounds");
        head.w2.mapv_inplace(|_| u2.sample(rng));
        head
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub(crate) fn forward_traced(&self, x: ArrayView2<f64>) -> (Array2<f64>, HeadTrace) {
        let pre = x.dot(&self.w1.t()) + &self.b1;
        let hidden = pre.mapv(|v| v.max(0.0));
        let z = hidden.dot(&self.w2.t()) + &self.b2;
        (z, HeadTrace { pre, hidden })
    }

    /// Embeds a batch of rows.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return arg_err(format!(
                "input width {} does not match head input {}",
                x.ncols(),
                self.input_dim()
            ));
        }
        Ok(self.forward_traced(x).0)
    }

    /// Accumulates parameter gradients into `grad` and returns nothing else; `dz` is dLoss/dOutput.
    pub(crate) fn backward(&self, x: ArrayView2<f64>, trace: &HeadTrace, dz: &Array2<f64>, grad: &mut Head) {
        grad.w2 += &dz.t().dot(&trace.hidden);
        grad.b2 += &dz.sum_axis(Axis(0));
        let mut dpre = dz.dot(&self.w2);
        ndarray::Zip::from(&mut dpre).and(&trace.pre).for_each(|d, &p| {
            if p <= 0.0 {
                *d = 0.0;
            }
        });
        grad.w1 += &dpre.t().dot(&x);
        grad.b1 += &dpre.sum_axis(Axis(0));
    }

    fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Every trainable tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub head_v: Head,
    pub head_t: Head,
    /// `K x L` class prototypes.
    pub prototypes: Array2<f64>,
}

impl Params {
    pub fn zeros_like(other: &Params) -> Self {
        Self {
            head_v: Head::zeros(other.head_v.input_dim(), other.head_v.hidden_dim(), other.head_v.output_dim()),
            head_t: Head::zeros(other.head_t.input_dim(), other.head_t.hidden_dim(), other.head_t.output_dim()),
            prototypes: Array2::zeros(other.prototypes.raw_dim()),
        }
    }

    /// Tensors in a fixed order: visual head, text head, prototypes.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.head_v.tensors().into_iter().collect();
        out.extend(self.head_t.tensors());
        out.push(self.prototypes.as_slice().expect("standard layout"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.head_v.tensors_mut().into_iter().collect();
        out.extend(self.head_t.tensors_mut());
        out.push(self.prototypes.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Model dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_v: usize,
    pub input_t: usize,
    pub hidden: usize,
    pub embed: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub params: Params,
    pub tau1: f64,
}

impl ModelState {
    /// Random heads and Gaussian prototypes with standard deviation `1/sqrt(L)`.
    pub fn init(arch: Architecture, tau1: f64, rng: &mut impl Rng) -> Result<Self> {
        if arch.embed == 0 || arch.hidden == 0 || arch.classes < 2 || arch.input_v == 0 || arch.input_t == 0 {
            return arg_err(format!("degenerate architecture {arch:?}"));
        }
        if !(tau1 > 0.0) {
            return arg_err(format!("tau1 must be positive, got {tau1}"));
        }
        let head_v = Head::random(arch.input_v, arch.hidden, arch.embed, rng);
        let head_t = Head::random(arch.input_t, arch.hidden, arch.embed, rng);
        let normal = Normal::new(0.0, 1.0 / (arch.embed as f64).sqrt()).expect("positive std");
        let prototypes = Array2::from_shape_fn((arch.classes, arch.embed), |_| normal.sample(rng));
        Ok(Self { params: Params { head_v, head_t, prototypes }, tau1 })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_v: self.params.head_v.input_dim(),
            input_t: self.params.head_t.input_dim(),
            hidden: self.params.head_v.hidden_dim(),
            embed: self.params.head_v.output_dim(),
            classes: self.params.prototypes.nrows(),
        }
    }

    pub fn head(&self, modality: Modality) -> &Head {
        match modality {
            Modality::Visual => &self.params.head_v,
            Modality::Text => &self.params.head_t,
        }
    }

    /// Embeds a batch of rows of one modality.
    pub fn embed(&self, x: ArrayView2<f64>, modality: Modality) -> Result<Array2<f64>> {
        self.head(modality).forward(x)
    }

    /// Class probabilities for a batch of embeddings.
    pub fn predict(&self, z: ArrayView2<f64>) -> Array2<f64> {
        let logits = z.dot(&self.params.prototypes.t()) / self.tau1;
        linalg::softmax_rows(logits.view())
    }
}

/// Embeds one feature vector.
pub fn encode(state: &ModelState, x: ArrayView1<f64>, modality: Modality) -> Result<Array1<f64>> {
    let batch = x.insert_axis(Axis(0));
    Ok(state.embed(batch, modality)?.row(0).to_owned())
}

/// Softmax over classes of `mu_k . z / tau1`.
pub fn class_probs(z: ArrayView1<f64>, prototypes: ArrayView2<f64>, tau1: f64) -> Result<Array1<f64>> {
    if !(tau1 > 0.0) {
        return arg_err(format!("tau1 must be positive, got {tau1}"));
    }
    if prototypes.ncols() != z.len() {
        return arg_err("prototype width does not match embedding");
    }
    let logits = prototypes.dot(&z) / tau1;
    Ok(linalg::softmax(logits.view()))
}

/// Cross-entropy of both modalities' predictions against the targets.
pub fn ce_loss(targets: ArrayView2<f64>, pred_v: ArrayView2<f64>, pred_t: ArrayView2<f64>) -> Result<f64> {
    crate::semantic::weighted_cross_entropy(targets, pred_v, pred_t)
}

/// Corrected-label loss plus the weighted alignment loss.
pub fn total_loss(plc: f64, bhg: f64, lambda: f64) -> f64 {
    plc + lambda * bhg
}

/// `-ln(max(p, 1e-12))`, exported for tests that hand-compute losses.
pub fn nll(p: f64) -> f64 {
    -clamped_ln(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state_with(head: Head, k: usize) -> ModelState {
        let l = head.output_dim();
        ModelState {
            params: Params { head_t: head.clone(), head_v: head, prototypes: Array2::zeros((k, l)) },
            tau1: 1.0,
        }
    }

    #[test]
    fn zero_weights_embed_to_zero() {
        let s = state_with(Head::zeros(3, 4, 2), 2);
        let z = encode(&s, array![1.0, -2.0, 3.0].view(), Modality::Visual).unwrap();
        assert_eq!(z, array![0.0, 0.0]);
    }

    #[test]
    fn identity_head_passes_positive_input() {
        let mut h = Head::zeros(3, 3, 3);
        h.w1 = Array2::eye(3);
        h.w2 = Array2::eye(3);
        let s = state_with(h, 2);
        let x = array![0.5, 1.0, 2.0];
        assert_eq!(encode(&s, x.view(), Modality::Text).unwrap(), x);
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let s = state_with(Head::zeros(3, 4, 2), 2);
        assert!(encode(&s, array![1.0, 2.0].view(), Modality::Visual).is_err());
    }

    #[test]
    fn class_prob_examples() {
        let mu = Array2::eye(2);
        let p = class_probs(array![1.0, 0.0].view(), mu.view(), 1.0).unwrap();
        let e = 1f64.exp();
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[0] - 0.731_059).abs() < 1e-6);
        assert!((p[1] - 0.268_941).abs() < 1e-6);
        let flat = class_probs(array![0.0, 0.0].view(), Array2::ones((3, 2)).view(), 1.0).unwrap();
        assert!(flat.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-12));
        assert!(class_probs(array![0.0, 0.0].view(), mu.view(), 0.0).is_err());
    }

    #[test]
    fn ce_examples() {
        let y = Array2::eye(3);
        assert_eq!(ce_loss(y.view(), y.view(), y.view()).unwrap(), 0.0);
        let k = 10;
        let uniform = Array2::from_elem((4, k), 1.0 / k as f64);
        let mut onehot = Array2::zeros((4, k));
        for i in 0..4 {
            onehot[[i, i]] = 1.0;
        }
        let l = ce_loss(onehot.view(), uniform.view(), uniform.view()).unwrap();
        assert!((l - 2.0 * 10f64.ln()).abs() < 1e-12);
        let half = array![[0.5, 0.5]];
        let l = ce_loss(half.view(), half.view(), half.view()).unwrap();
        assert!((l - 1.386_294).abs() < 1e-6);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.3, 9.0, 0.0), 1.3);
        assert!((total_loss(1.0, 2.0, 0.4) - 1.8).abs() < 1e-15);
        assert_eq!(total_loss(0.0, 0.0, 0.4), 0.0);
    }

    #[test]
    fn init_is_seeded() {
        let arch = Architecture { input_v: 5, input_t: 6, hidden: 7, embed: 4, classes: 3 };
        let a = ModelState::init(arch, 1.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = ModelState::init(arch, 1.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.architecture(), arch);
        assert!(a.params.prototypes.outer_iter().all(|r| r.iter().any(|&x| x != 0.0)));
    }
}
