//! On-disk formats.
//!
//! Matrices use a flat little-endian container: the magic `OTRF1`, `u32`
//! rows, `u32` cols, then `rows * cols` row-major `f64` values. Labels are
//! one class index per line. A TOML manifest ties a dataset's files together.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Dataset, Splits};
use crate::error::{Error, Result};

pub const MATRIX_MAGIC: &[u8; 5] = b"OTRF1";
pub const MANIFEST_FORMAT: &str = "otrcl-dataset/1";
const HEADER_LEN: usize = MATRIX_MAGIC.len() + 8;

pub fn encode_matrix(m: &Array2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.len());
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for x in m.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Parses a matrix container, rejecting truncation, trailing bytes and non-finite values.
pub fn decode_matrix(bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() < HEADER_LEN || &bytes[..MATRIX_MAGIC.len()] != MATRIX_MAGIC {
        return Err(Error::Format("missing OTRF1 header".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let rows = word(5);
    let cols = word(9);
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format(format!("matrix dimensions {rows}x{cols} overflow")))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{rows}x{cols} matrix needs {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let mut values = Vec::with_capacity(rows * cols);
    for chunk in bytes[HEADER_LEN..].chunks_exact(8) {
        let x = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        if !x.is_finite() {
            return Err(Error::Format(format!("non-finite entry at position {}", values.len())));
        }
        values.push(x);
    }
    Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    fs::write(path, encode_matrix(m))?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| load_err(path, e))?;
    decode_matrix(&bytes).map_err(|e| load_err(path, e))
}

pub fn format_labels(labels: &[usize]) -> String {
    let mut s = String::with_capacity(labels.len() * 3);
    for l in labels {
        s.push_str(&l.to_string());
        s.push('\n');
    }
    s
}

/// One nonnegative integer per line; blank lines are ignored.
pub fn parse_labels(text: &str) -> Result<Vec<usize>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("line {}: {:?} is not a class index", i + 1, l.trim())))
        })
        .collect()
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| load_err(path, e))?;
    parse_labels(&text).map_err(|e| load_err(path, e))
}

fn load_err(path: &Path, reason: impl ToString) -> Error {
    Error::Load { path: path.to_path_buf(), reason: reason.to_string() }
}

/// Reads externally computed features and labels as a training-only dataset.
///
/// `classes` defaults to one more than the largest label.
pub fn load_features(path_v: &Path, path_t: &Path, path_labels: &Path, classes: Option<usize>) -> Result<Dataset> {
    let features_v = read_matrix(path_v)?;
    let features_t = read_matrix(path_t)?;
    let labels = read_labels(path_labels)?;
    if features_v.nrows() != features_t.nrows() {
        return Err(load_err(
            path_t,
            format!(
                "visual features have {} rows but text features have {}",
                features_v.nrows(),
                features_t.nrows()
            ),
        ));
    }
    let k = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let splits = Splits { train: labels.len(), val: 0, test: 0 };
    Dataset::new(features_v, features_t, labels, None, k, splits).map_err(|e| load_err(path_labels, e))
}

/// Structured description of a dataset on disk. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub classes: usize,
    pub features_v: PathBuf,
    pub features_t: PathBuf,
    pub labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_labels: Option<PathBuf>,
    pub splits: Splits,
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Format(format!(
                "unsupported manifest format {:?}, expected {MANIFEST_FORMAT:?}",
                m.format
            )));
        }
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

pub const MANIFEST_FILE: &str = "dataset.toml";

/// Writes the dataset as two matrices, label files and a manifest into `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    write_matrix(&dir.join("features_v.otrf"), &dataset.features_v)?;
    write_matrix(&dir.join("features_t.otrf"), &dataset.features_t)?;
    fs::write(dir.join("labels.txt"), format_labels(&dataset.noisy_labels))?;
    let true_labels = match &dataset.true_labels {
        Some(t) => {
            fs::write(dir.join("true_labels.txt"), format_labels(t))?;
            Some(PathBuf::from("true_labels.txt"))
        }
        None => None,
    };
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.into(),
        classes: dataset.classes,
        features_v: "features_v.otrf".into(),
        features_t: "features_t.otrf".into(),
        labels: "labels.txt".into(),
        true_labels,
        splits: dataset.splits,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_toml())?;
    Ok(path)
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| load_err(manifest_path, e))?;
    let manifest = DatasetManifest::parse(&text).map_err(|e| load_err(manifest_path, e))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let features_v = read_matrix(&base.join(&manifest.features_v))?;
    let features_t = read_matrix(&base.join(&manifest.features_t))?;
    let labels = read_labels(&base.join(&manifest.labels))?;
    let truth = manifest.true_labels.as_ref().map(|p| read_labels(&base.join(p))).transpose()?;
    Dataset::new(features_v, features_t, labels, truth, manifest.classes, manifest.splits)
        .map_err(|e| load_err(manifest_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthConfig};
    use ndarray::array;

    #[test]
    fn matrix_bytes_round_trip() {
        let m = array![[1.0, -2.5], [f64::MIN_POSITIVE, 1e300]];
        assert_eq!(decode_matrix(&encode_matrix(&m)).unwrap(), m);
    }

    #[test]
    fn truncated_or_padded_matrix_rejected() {
        let bytes = encode_matrix(&array![[1.0, 2.0, 3.0]]);
        assert!(decode_matrix(&bytes[..bytes.len() - 1]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(decode_matrix(&longer).is_err());
        assert!(decode_matrix(b"OTRF").is_err());
        assert!(decode_matrix(b"XXXXX\0\0\0\0\0\0\0\0").is_err());
    }

    #[test]
    fn non_finite_matrix_rejected() {
        let bytes = encode_matrix(&array![[1.0, f64::NAN]]);
        assert!(decode_matrix(&bytes).is_err());
    }

    #[test]
    fn labels_parse_and_reject() {
        assert_eq!(parse_labels("1\n0\n\n3\n").unwrap(), vec![1, 0, 3]);
        assert!(parse_labels("1\n-2\n").is_err());
        assert!(parse_labels("x").is_err());
    }

    #[test]
    fn dataset_round_trip_through_manifest() {
        let cfg = SynthConfig { n: 30, n_val: 5, n_test: 5, k: 3, d_v: 4, d_t: 3, noise_ratio: 0.2, ..Default::default() };
        let d = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(&d, dir.path()).unwrap();
        assert_eq!(load_dataset(&manifest).unwrap(), d);
    }

    #[test]
    fn mismatched_modalities_name_both_counts() {
        let dir = tempfile::tempdir().unwrap();
        let (pv, pt, pl) = (dir.path().join("v"), dir.path().join("t"), dir.path().join("l"));
        write_matrix(&pv, &Array2::zeros((3, 2))).unwrap();
        write_matrix(&pt, &Array2::zeros((4, 2))).unwrap();
        fs::write(&pl, "0\n1\n0\n").unwrap();
        let msg = load_features(&pv, &pt, &pl, None).unwrap_err().to_string();
        assert!(msg.contains('3') && msg.contains('4'), "{msg}");
    }

    #[test]
    fn missing_and_truncated_files_fail() {
        let dir = tempfile::tempdir().unwrap();
        let (pv, pt, pl) = (dir.path().join("v"), dir.path().join("t"), dir.path().join("l"));
        assert!(load_features(&pv, &pt, &pl, None).is_err());
        let bytes = encode_matrix(&Array2::zeros((3, 2)));
        fs::write(&pv, &bytes).unwrap();
        fs::write(&pt, &bytes[..bytes.len() - 3]).unwrap();
        fs::write(&pl, "0\n1\n0\n").unwrap();
        assert!(matches!(load_features(&pv, &pt, &pl, None), Err(Error::Load { .. })));
    }

    #[test]
    fn manifest_rejects_unknown_format() {
        let text = "format = \"other\"\nclasses = 2\nfeatures_v = \"a\"\nfeatures_t = \"b\"\nlabels = \"c\"\n[splits]\ntrain = 1\nval = 0\ntest = 0\n";
        assert!(DatasetManifest::parse(text).is_err());
        assert!(DatasetManifest::parse(&text.replace("other", MANIFEST_FORMAT)).is_ok());
    }
}
