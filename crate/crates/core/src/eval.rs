//! Retrieval and label-correction metrics.

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::linalg::{argmax, normalize_rows};
use crate::partial::SoftLabelMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub map_i2t: f64,
    pub map_t2i: f64,
    #[serde(skip)]
    pub ap_i2t: Vec<Option<f64>>,
    #[serde(skip)]
    pub ap_t2i: Vec<Option<f64>>,
}

impl RetrievalResult {
    pub fn mean(&self) -> f64 {
        0.5 * (self.map_i2t + self.map_t2i)
    }
}

fn unit(m: ArrayView2<f64>) -> Result<ndarray::Array2<f64>> {
    normalize_rows(m).ok_or_else(|| Error::Argument("zero-norm embedding in retrieval".into()))
}

/// Average precision of every query; `None` when a query has no relevant gallery item.
///
/// Gallery items are ranked by descending cosine similarity, ties by
/// ascending index.
pub fn average_precisions(
    query: ArrayView2<f64>,
    gallery: ArrayView2<f64>,
    query_labels: &[usize],
    gallery_labels: &[usize],
) -> Result<Vec<Option<f64>>> {
    if query.nrows() != query_labels.len() || gallery.nrows() != gallery_labels.len() {
        return arg_err("label counts do not match embeddings");
    }
    if query.ncols() != gallery.ncols() {
        return arg_err("query and gallery embeddings differ in width");
    }
    let q = unit(query)?;
    let g = unit(gallery)?;
    let sims = q.dot(&g.t());
    let mut order: Vec<usize> = Vec::with_capacity(g.nrows());
    let aps = sims
        .axis_iter(Axis(0))
        .zip(query_labels)
        .map(|(row, &label)| {
            order.clear();
            order.extend(0..row.len());
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            let mut hits = 0usize;
            let mut sum = 0.0;
            for (rank, &j) in order.iter().enumerate() {
                if gallery_labels[j] == label {
                    hits += 1;
                    sum += hits as f64 / (rank + 1) as f64;
                }
            }
            (hits > 0).then(|| sum / hits as f64)
        })
        .collect();
    Ok(aps)
}

fn mean_ap(aps: &[Option<f64>]) -> Result<f64> {
    let (sum, count) = aps.iter().flatten().fold((0.0, 0usize), |(s, c), ap| (s + ap, c + 1));
    if count == 0 {
        return Err(Error::Eval("no query has a relevant gallery item".into()));
    }
    Ok(sum / count as f64)
}

/// Mean average precision over queries with at least one relevant item.
pub fn map_score(
    query: ArrayView2<f64>,
    gallery: ArrayView2<f64>,
    query_labels: &[usize],
    gallery_labels: &[usize],
) -> Result<f64> {
    mean_ap(&average_precisions(query, gallery, query_labels, gallery_labels)?)
}

/// Image-to-text and text-to-image retrieval on one split.
pub fn evaluate_retrieval(z_v: ArrayView2<f64>, z_t: ArrayView2<f64>, labels: &[usize]) -> Result<RetrievalResult> {
    let ap_i2t = average_precisions(z_v, z_t, labels, labels)?;
    let ap_t2i = average_precisions(z_t, z_v, labels, labels)?;
    Ok(RetrievalResult { map_i2t: mean_ap(&ap_i2t)?, map_t2i: mean_ap(&ap_t2i)?, ap_i2t, ap_t2i })
}

/// Per-class precision of top-1 retrieval, averaged over the classes that were predicted at least once.
///
/// A query's predicted class is the class of its most similar gallery item;
/// `TP_k` and `FP_k` count correct and incorrect predictions of class `k`.
pub fn class_precision(
    query: ArrayView2<f64>,
    gallery: ArrayView2<f64>,
    query_labels: &[usize],
    gallery_labels: &[usize],
) -> Result<f64> {
    if query.nrows() != query_labels.len() || gallery.nrows() != gallery_labels.len() || gallery.nrows() == 0 {
        return arg_err("label counts do not match embeddings");
    }
    let sims = unit(query)?.dot(&unit(gallery)?.t());
    let classes = query_labels.iter().chain(gallery_labels).max().map_or(0, |m| m + 1);
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    for (row, &label) in sims.outer_iter().zip(query_labels) {
        let predicted = gallery_labels[argmax(row)];
        if predicted == label {
            tp[predicted] += 1;
        } else {
            fp[predicted] += 1;
        }
    }
    let precisions: Vec<f64> = tp
        .iter()
        .zip(&fp)
        .filter(|(t, f)| *t + *f > 0)
        .map(|(&t, &f)| t as f64 / (t + f) as f64)
        .collect();
    Ok(precisions.iter().sum::<f64>() / precisions.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionAccuracy {
    /// Accuracy over samples the transport assigned mass to; `None` if none were.
    pub assigned: Option<f64>,
    /// Accuracy over every sample, using `fallback` for unassigned rows.
    pub all: f64,
}

/// Agreement between corrected-label argmaxes and the truth.
pub fn correction_accuracy(
    soft_labels: &SoftLabelMatrix,
    fallback: ArrayView2<f64>,
    true_labels: &[usize],
) -> Result<CorrectionAccuracy> {
    let n = soft_labels.values.nrows();
    if true_labels.len() != n || fallback.dim() != soft_labels.values.dim() {
        return arg_err("correction accuracy inputs disagree in shape");
    }
    if n == 0 {
        return arg_err("no samples");
    }
    let (mut hit_assigned, mut assigned, mut hit_all) = (0usize, 0usize, 0usize);
    for (i, &truth) in true_labels.iter().enumerate() {
        if soft_labels.is_assigned(i) {
            assigned += 1;
            let ok = argmax(soft_labels.values.row(i)) == truth;
            hit_assigned += ok as usize;
            hit_all += ok as usize;
        } else {
            hit_all += (argmax(fallback.row(i)) == truth) as usize;
        }
    }
    Ok(CorrectionAccuracy {
        assigned: (assigned > 0).then(|| hit_assigned as f64 / assigned as f64),
        all: hit_all as f64 / n as f64,
    })
}
