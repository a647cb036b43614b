//! Confident-pair selection and the cross-modal consistent cost used for
//! label correction.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;

use crate::error::{arg_err, Result};
use crate::linalg::{self, argmax, clamped_ln, shifted};

/// Lower clamp on the denominator of a modal-consistency ratio.
pub const CONSISTENCY_FLOOR: f64 = 1e-3;
/// Lower clamp on a blended score before its negative log is taken.
pub const SCORE_FLOOR: f64 = 1e-8;

/// Jensen-Shannon divergence in nats.
pub fn jsd(p: ArrayView1<f64>, q: ArrayView1<f64>) -> Result<f64> {
    if p.len() != q.len() {
        return arg_err(format!("jsd length mismatch: {} vs {}", p.len(), q.len()));
    }
    for v in [&p, &q] {
        if v.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) || (v.sum() - 1.0).abs() > 1e-6 {
            return arg_err("jsd arguments must be probability vectors");
        }
    }
    Ok(jsd_unchecked(p, q))
}

/// [`jsd`] without validation, for inputs that are distributions by construction.
pub fn jsd_unchecked(p: ArrayView1<f64>, q: ArrayView1<f64>) -> f64 {
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q.iter()) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            acc += a * (a / m).ln();
        }
        if b > 0.0 {
            acc += b * (b / m).ln();
        }
    }
    (0.5 * acc).max(0.0)
}

/// Class-balanced confident pairs: `per_class[k]` holds the indices chosen for class `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfidentSet {
    pub per_class: Vec<Vec<usize>>,
    pub size_per_class: usize,
}

impl ConfidentSet {
    /// All members in class order.
    pub fn members(&self) -> Vec<usize> {
        self.per_class.iter().flatten().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.per_class.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Picks `size_per_class` samples per class with the lowest cross-modal JSD.
///
/// A sample's class is the argmax of the two modalities' mean prediction.
/// Classes with too few members are padded with the lowest-JSD samples not
/// yet chosen. Ties break by ascending index.
pub fn select_confident(
    pred_v: ArrayView2<f64>,
    pred_t: ArrayView2<f64>,
    size_per_class: usize,
) -> Result<ConfidentSet> {
    if pred_v.dim() != pred_t.dim() {
        return arg_err("prediction matrices differ in shape");
    }
    let (n, k) = pred_v.dim();
    if size_per_class * k > n {
        return arg_err(format!("cannot pick {size_per_class} per class for {k} classes from {n} samples"));
    }
    let mut ranked: Vec<(f64, usize, usize)> = (0..n)
        .map(|i| {
            let d = jsd_unchecked(pred_v.row(i), pred_t.row(i));
            let mean = (&pred_v.row(i) + &pred_t.row(i)) * 0.5;
            (d, i, argmax(mean.view()))
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut per_class = vec![Vec::with_capacity(size_per_class); k];
    let mut taken = vec![false; n];
    for &(_, i, c) in &ranked {
        if per_class[c].len() < size_per_class {
            per_class[c].push(i);
            taken[i] = true;
        }
    }
    let mut spare = ranked.iter().filter(|&&(_, i, _)| !taken[i]).map(|&(_, i, _)| i);
    for list in per_class.iter_mut() {
        while list.len() < size_per_class {
            list.push(spare.next().expect("size_per_class * k <= n"));
        }
    }
    Ok(ConfidentSet { per_class, size_per_class })
}

/// Exact intra-modal nearest neighbors by cosine similarity.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborIndex {
    /// `indices[i]` lists the neighbors of `i`, most similar first.
    pub indices: Vec<Vec<usize>>,
    pub similarities: Vec<Vec<f64>>,
}

impl NeighborIndex {
    pub fn k(&self) -> usize {
        self.indices.first().map_or(0, Vec::len)
    }
}

/// `k` most cosine-similar rows for every row, self excluded, ties to the lower index.
pub fn knn(embeddings: ArrayView2<f64>, k: usize) -> Result<NeighborIndex> {
    let n = embeddings.nrows();
    if k >= n {
        return arg_err(format!("k = {k} must be smaller than the {n} samples"));
    }
    let unit = linalg::normalize_rows(embeddings)
        .ok_or_else(|| crate::Error::Argument("embedding row with zero or non-finite norm".into()))?;
    let gram = unit.dot(&unit.t());
    let rows: Vec<(Vec<usize>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut sims: Vec<(f64, usize)> =
                gram.row(i).iter().enumerate().filter(|&(j, _)| j != i).map(|(j, &s)| (s, j)).collect();
            let order = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
            if k > 0 {
                sims.select_nth_unstable_by(k - 1, order);
            }
            sims.truncate(k);
            sims.sort_by(order);
            sims.into_iter().map(|(s, j)| (j, s)).unzip()
        })
        .collect();
    let (indices, similarities) = rows.into_iter().unzip();
    Ok(NeighborIndex { indices, similarities })
}

/// Default neighborhood size: about 0.5% of the training set, at least 2.
pub fn default_neighbors(n: usize) -> usize {
    ((0.005 * n as f64).round() as usize).max(2)
}

fn nearest_member(query: ArrayView1<f64>, members: &[usize], unit: &Array2<f64>) -> usize {
    let mut best = members[0];
    let mut best_sim = f64::NEG_INFINITY;
    for &m in members {
        let s = query.dot(&unit.row(m));
        if s > best_sim {
            best_sim = s;
            best = m;
        }
    }
    best
}

/// Visual and textual consistency of sample `i` against its closest confident pair.
///
/// Both inputs must be row-normalized embeddings.
fn consistency_unit(i: usize, members: &[usize], unit_v: &Array2<f64>, unit_t: &Array2<f64>) -> (f64, f64) {
    let ratio = |q: &Array2<f64>, other: &Array2<f64>| {
        let anchor = nearest_member(q.row(i), members, q);
        let num = shifted(q.row(i).dot(&q.row(anchor)));
        let den = shifted(other.row(i).dot(&other.row(anchor))).max(CONSISTENCY_FLOOR);
        num / den
    };
    (ratio(unit_v, unit_t), ratio(unit_t, unit_v))
}

/// Modal consistency `(C_v, C_t)` of sample `i` with respect to the confident set.
pub fn modal_consistency(
    i: usize,
    conf: &ConfidentSet,
    z_v: ArrayView2<f64>,
    z_t: ArrayView2<f64>,
) -> Result<(f64, f64)> {
    if conf.is_empty() {
        return arg_err("confident set is empty");
    }
    if z_v.dim() != z_t.dim() || i >= z_v.nrows() {
        return arg_err("embedding shapes or sample index inconsistent");
    }
    let unit_v = unit_rows(z_v)?;
    let unit_t = unit_rows(z_t)?;
    Ok(consistency_unit(i, &conf.members(), &unit_v, &unit_t))
}

fn unit_rows(z: ArrayView2<f64>) -> Result<Array2<f64>> {
    linalg::normalize_rows(z)
        .ok_or_else(|| crate::Error::Argument("embedding row with zero or non-finite norm".into()))
}

/// Blended neighbor-vote cost for every sample and class.
///
/// Returns raw values `-ln(max(score, 1e-8))`; scores can exceed one, so
/// entries may be negative.
pub fn semantic_cost(
    conf: &ConfidentSet,
    nbrs_v: &NeighborIndex,
    nbrs_t: &NeighborIndex,
    targets: &TargetMatrix,
    z_v: ArrayView2<f64>,
    z_t: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let (n, k) = targets.values.dim();
    if z_v.dim() != z_t.dim() || z_v.nrows() != n || nbrs_v.indices.len() != n || nbrs_t.indices.len() != n {
        return arg_err("semantic cost inputs disagree on the number of samples");
    }
    if conf.is_empty() {
        return arg_err("confident set is empty");
    }
    let members = conf.members();
    let unit_v = unit_rows(z_v)?;
    let unit_t = unit_rows(z_t)?;
    let y = &targets.values;
    let rows: Vec<Array1<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (c_v, c_t) = consistency_unit(i, &members, &unit_v, &unit_t);
            let vote = |nbrs: &NeighborIndex| {
                let mut acc = Array1::<f64>::zeros(k);
                for (&j, &sim) in nbrs.indices[i].iter().zip(&nbrs.similarities[i]) {
                    acc.scaled_add(shifted(sim), &y.row(j));
                }
                acc / nbrs.indices[i].len().max(1) as f64
            };
            let score = vote(nbrs_v) * c_v + vote(nbrs_t) * c_t;
            score.mapv(|s| -s.max(SCORE_FLOOR).ln())
        })
        .collect();
    let mut out = Array2::zeros((n, k));
    for (i, row) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&row);
    }
    Ok(out)
}

/// Evolving soft targets; every row is a distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMatrix {
    pub values: Array2<f64>,
}

impl TargetMatrix {
    pub fn from_labels(labels: &[usize], k: usize) -> Result<Self> {
        let mut values = Array2::zeros((labels.len(), k));
        for (i, &c) in labels.iter().enumerate() {
            if c >= k {
                return arg_err(format!("label {c} out of range for {k} classes"));
            }
            values[[i, c]] = 1.0;
        }
        Ok(Self { values })
    }
}

/// Moves every target towards the one-hot of its nearest prototype.
pub fn update_targets(
    targets: &TargetMatrix,
    prototypes: ArrayView2<f64>,
    z_v: ArrayView2<f64>,
    z_t: ArrayView2<f64>,
    gamma: f64,
) -> Result<TargetMatrix> {
    if !(0.0..=1.0).contains(&gamma) {
        return arg_err(format!("gamma must lie in [0, 1], got {gamma}"));
    }
    let (n, k) = targets.values.dim();
    if prototypes.nrows() != k || z_v.dim() != z_t.dim() || z_v.nrows() != n || prototypes.ncols() != z_v.ncols() {
        return arg_err("update_targets shape mismatch");
    }
    let mut values = targets.values.mapv(|y| gamma * y);
    let joint = &z_v + &z_t;
    let scores = joint.dot(&prototypes.t());
    for (i, row) in scores.outer_iter().enumerate() {
        values[[i, argmax(row)]] += 1.0 - gamma;
    }
    Ok(TargetMatrix { values })
}

/// Cross-entropy of both modalities' predictions against the corrected labels.
pub fn plc_loss(soft_labels: ArrayView2<f64>, pred_v: ArrayView2<f64>, pred_t: ArrayView2<f64>) -> Result<f64> {
    weighted_cross_entropy(soft_labels, pred_v, pred_t)
}

/// `-(1/N) sum_i w_i . (log p_i^v + log p_i^t)` with the usual log clamp.
pub fn weighted_cross_entropy(
    weights: ArrayView2<f64>,
    pred_v: ArrayView2<f64>,
    pred_t: ArrayView2<f64>,
) -> Result<f64> {
    if weights.dim() != pred_v.dim() || weights.dim() != pred_t.dim() {
        return arg_err(format!(
            "label shape {:?} does not match predictions {:?} / {:?}",
            weights.dim(),
            pred_v.dim(),
            pred_t.dim()
        ));
    }
    let n = weights.nrows();
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ((w, pv), pt) in weights.iter().zip(pred_v.iter()).zip(pred_t.iter()) {
        if *w != 0.0 {
            total += w * (clamped_ln(*pv) + clamped_ln(*pt));
        }
    }
    Ok(-total / n as f64)
}
