#![allow(dead_code)]

use ndarray::Array2;
use otrcl::model::{forward_backward, Architecture, BatchObjective, ModelState, Params};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let x: f64 = StandardNormal.sample(rng);
        x
    })
}

pub fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>())
}

/// Rows drawn uniformly then normalized to sum to one.
pub fn stochastic(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut m = uniform(rows, cols, rng);
    m.mapv_inplace(|x| x + 1e-3);
    for mut r in m.outer_iter_mut() {
        let s = r.sum();
        r /= s;
    }
    m
}

pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compares analytic gradients against central differences on every scalar.
///
/// Relative error is `|a - fd| / max(|a| + |fd|, 1e-6)`, which stays
/// meaningful for near-zero components.
pub fn grad_check(state: &ModelState, x_v: &Array2<f64>, x_t: &Array2<f64>, obj: &BatchObjective, h: f64) -> GradCheck {
    let (_, analytic) = forward_backward(state, x_v.view(), x_t.view(), obj).unwrap();
    let flat: Vec<f64> = analytic.tensors().iter().flat_map(|t| t.iter().copied()).collect();
    let loss_at = |p: &Params| {
        let s = ModelState { params: p.clone(), tau1: state.tau1 };
        forward_backward(&s, x_v.view(), x_t.view(), obj).unwrap().0.total
    };
    let mut worst = 0.0f64;
    let mut idx = 0;
    let mut params = state.params.clone();
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    for (t, &len) in sizes.iter().enumerate() {
        for i in 0..len {
            let orig = params.tensors()[t][i];
            params.tensors_mut()[t][i] = orig + h;
            let up = loss_at(&params);
            params.tensors_mut()[t][i] = orig - h;
            let down = loss_at(&params);
            params.tensors_mut()[t][i] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = flat[idx];
            let err = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-6);
            worst = worst.max(err);
            idx += 1;
        }
    }
    GradCheck { max_rel_err: worst, checked: idx }
}

pub fn toy_state(b: usize, k: usize, l: usize, seed: u64) -> (ModelState, Array2<f64>, Array2<f64>) {
    let mut r = rng(seed);
    let arch = Architecture { input_v: 6, input_t: 5, hidden: 7, embed: l, classes: k };
    let state = ModelState::init(arch, 1.0, &mut r).unwrap();
    let x_v = gaussian(b, 6, &mut r);
    let x_t = gaussian(b, 5, &mut r);
    (state, x_v, x_t)
}
