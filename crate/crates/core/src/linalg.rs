//! Small dense helpers shared by the solvers and the model.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

/// Lower clamp applied to every probability before taking its log.
pub const LOG_CLAMP: f64 = 1e-12;

/// Numerically stable `ln(sum(exp(x)))`. Returns `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.into_iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Softmax of a slice, computed with the max-shift.
pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|x| (x - max).exp());
    let sum = out.sum();
    out /= sum;
    out
}

/// Row-wise softmax.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(logits.raw_dim());
    for (src, mut dst) in logits.outer_iter().zip(out.outer_iter_mut()) {
        dst.assign(&softmax(src));
    }
    out
}

pub fn clamped_ln(p: f64) -> f64 {
    p.max(LOG_CLAMP).ln()
}

pub fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Cosine similarity. Callers guarantee nonzero norms.
pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.dot(&b) / (norm(a) * norm(b))
}

/// Affine shift of a cosine similarity into `[0, 1]`.
pub fn shifted(cos: f64) -> f64 {
    0.5 * (1.0 + cos)
}

/// Returns a copy with every row scaled to unit L2 norm, or `None` if some row has zero norm.
pub fn normalize_rows(m: ArrayView2<f64>) -> Option<Array2<f64>> {
    let mut out = m.to_owned();
    for mut row in out.outer_iter_mut() {
        let n = norm(row.view());
        if n == 0.0 || !n.is_finite() {
            return None;
        }
        row /= n;
    }
    Some(out)
}

/// Index of the first maximal entry.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn row_sums(m: ArrayView2<f64>) -> Array1<f64> {
    m.sum_axis(Axis(1))
}

pub fn col_sums(m: ArrayView2<f64>) -> Array1<f64> {
    m.sum_axis(Axis(0))
}

/// Checks that each row is a probability vector within `tol`.
pub fn is_row_stochastic(m: ArrayView2<f64>, tol: f64) -> bool {
    m.outer_iter().all(|row| {
        row.iter().all(|&x| x >= 0.0 && x.is_finite()) && (row.sum() - 1.0).abs() <= tol
    })
}
