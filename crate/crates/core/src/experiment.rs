//! Reproducible experiment runs.
//!
//! An [`ExperimentConfig`] names one data source and a training
//! configuration. [`run`] trains and fills an output directory with
//! `config.toml` (the resolved configuration, enough to repeat the run),
//! `epochs.csv`, `metrics.json` and `model.ckpt`; synthetic runs also save
//! the generated data under `dataset/`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::io::{load_dataset, save_dataset};
use crate::data::{generate, Dataset, SynthConfig};
use crate::error::{arg_err, Error, Result};
use crate::linalg::argmax;
use crate::model::{split_retrieval, train_observed, Counters, EpochMetrics, Mode, TrainConfig};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.json";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const DATASET_DIR: &str = "dataset";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SynthConfig),
    /// Path to a dataset manifest, relative to the configuration file.
    Manifest(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds both data generation and training; overrides the nested seeds.
    #[serde(default)]
    pub seed: u64,
    pub data: DataSource,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { seed: 0, data: DataSource::Synthetic(SynthConfig::default()), train: TrainConfig::default(), out: None }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    /// Reads a configuration file; a relative manifest path is taken relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Load { path: path.into(), reason: e.to_string() })?;
        let mut config = Self::parse(&text).map_err(|e| Error::Load { path: path.into(), reason: e.to_string() })?;
        if let DataSource::Manifest(m) = &mut config.data {
            if m.is_relative() {
                *m = path.parent().unwrap_or(Path::new(".")).join(&*m);
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    /// Copies the top-level seed into the nested configurations.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        out.train.seed = self.seed;
        if let DataSource::Synthetic(s) = &mut out.data {
            s.seed = self.seed;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        self.train.validate()
    }

    pub fn load_data(&self) -> Result<Dataset> {
        match &self.data {
            DataSource::Synthetic(s) => generate(s),
            DataSource::Manifest(path) => load_dataset(path),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedEpoch {
    pub epoch: usize,
    pub map_i2t: f64,
    pub map_t2i: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionReport {
    /// Over samples that received corrected mass in the last solve.
    pub assigned: Option<f64>,
    /// Over all training samples, using each sample's current supervision.
    pub all: Option<f64>,
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: Mode,
    /// Test retrieval of the final model.
    pub map_i2t: Option<f64>,
    pub map_t2i: Option<f64>,
    pub val_map_i2t: Option<f64>,
    pub val_map_t2i: Option<f64>,
    /// Test retrieval at the best validation epoch.
    pub selected: Option<SelectedEpoch>,
    pub correction_accuracy: CorrectionReport,
    pub counters: Counters,
    pub epochs: Vec<EpochMetrics>,
}

impl MetricsReport {
    pub fn map_mean(&self) -> Option<f64> {
        Some(0.5 * (self.map_i2t? + self.map_t2i?))
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub metrics: MetricsReport,
    pub checkpoint: Checkpoint,
}

fn write_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Load { path: path.into(), reason: e.to_string() }
}

/// Trains per `config` and writes every artifact into `out_dir`.
///
/// The configuration is validated and the data loaded before anything is
/// written. On a training failure the epochs finished so far stay in
/// `epochs.csv`.
pub fn run(config: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    let mut config = config.resolved();
    config.validate()?;
    if let DataSource::Manifest(m) = &mut config.data {
        *m = std::path::absolute(&*m).map_err(|e| write_err(m, e))?;
    }
    let data = config.load_data()?;
    config.out = None;

    fs::create_dir_all(out_dir).map_err(|e| write_err(out_dir, e))?;
    let config_path = out_dir.join(CONFIG_FILE);
    fs::write(&config_path, config.to_toml()).map_err(|e| write_err(&config_path, e))?;
    if matches!(config.data, DataSource::Synthetic(_)) {
        save_dataset(&data, &out_dir.join(DATASET_DIR))?;
    }

    let epochs_path = out_dir.join(EPOCHS_FILE);
    let mut table = csv::Writer::from_path(&epochs_path).map_err(|e| write_err(&epochs_path, e))?;
    let outcome = train_observed(&data, &config.train, |m| {
        table.serialize(m).and_then(|_| Ok(table.flush()?)).map_err(|e| write_err(&epochs_path, e))
    })?;
    drop(table);

    let last = outcome.log.epochs.last();
    let correction = CorrectionReport {
        assigned: last.and_then(|m| m.correction_acc_assigned),
        all: last
            .and_then(|m| m.correction_acc_all)
            .or_else(|| label_accuracy(outcome.training_targets.view(), &data)),
    };
    let metrics = MetricsReport {
        mode: config.train.mode,
        map_i2t: outcome.log.final_test.as_ref().map(|r| r.map_i2t),
        map_t2i: outcome.log.final_test.as_ref().map(|r| r.map_t2i),
        val_map_i2t: last.and_then(|m| m.val_map_i2t),
        val_map_t2i: last.and_then(|m| m.val_map_t2i),
        selected: outcome.log.selected_epoch.zip(outcome.log.selected_test.as_ref()).map(|(epoch, r)| SelectedEpoch {
            epoch,
            map_i2t: r.map_i2t,
            map_t2i: r.map_t2i,
        }),
        correction_accuracy: correction,
        counters: outcome.counters,
        epochs: outcome.log.epochs.clone(),
    };
    let metrics_path = out_dir.join(METRICS_FILE);
    let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    fs::write(&metrics_path, json + "\n").map_err(|e| write_err(&metrics_path, e))?;

    let checkpoint = Checkpoint::from_outcome(&outcome);
    checkpoint.save(&out_dir.join(CHECKPOINT_FILE))?;
    Ok(RunSummary { out_dir: out_dir.to_path_buf(), metrics, checkpoint })
}

/// Fraction of training rows whose argmax matches the true label.
pub fn label_accuracy(targets: ndarray::ArrayView2<f64>, data: &Dataset) -> Option<f64> {
    let truth = &data.true_labels.as_ref()?[data.splits.train_range()];
    if truth.is_empty() || targets.nrows() != truth.len() {
        return None;
    }
    let hits = targets.outer_iter().zip(truth).filter(|(row, &t)| argmax(row.view()) == t).count();
    Some(hits as f64 / truth.len() as f64)
}

/// Evaluation of a checkpoint on a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_i2t: Option<f64>,
    pub map_t2i: Option<f64>,
    pub val_map_i2t: Option<f64>,
    pub val_map_t2i: Option<f64>,
    /// Agreement of the checkpoint's training supervision with the true labels.
    pub label_accuracy: Option<f64>,
}

pub fn check_compatible(checkpoint: &Checkpoint, data: &Dataset) -> Result<()> {
    let arch = checkpoint.architecture();
    let dims = (data.features_v.ncols(), data.features_t.ncols(), data.classes);
    if (arch.input_v, arch.input_t, arch.classes) != dims {
        return arg_err(format!(
            "checkpoint expects visual dim {}, text dim {}, {} classes; dataset has {}, {}, {}",
            arch.input_v, arch.input_t, arch.classes, dims.0, dims.1, dims.2
        ));
    }
    for t in [&checkpoint.targets, &checkpoint.training_targets].into_iter().flatten() {
        if t.nrows() != data.splits.train {
            return arg_err(format!(
                "checkpoint targets cover {} samples but the training split has {}",
                t.nrows(),
                data.splits.train
            ));
        }
    }
    Ok(())
}

pub fn evaluate_checkpoint(checkpoint: &Checkpoint, data: &Dataset) -> Result<EvalReport> {
    check_compatible(checkpoint, data)?;
    let state = &checkpoint.state;
    let test = split_retrieval(state, data, data.splits.test_range())?;
    let val = split_retrieval(state, data, data.splits.val_range())?;
    Ok(EvalReport {
        map_i2t: test.as_ref().map(|r| r.map_i2t),
        map_t2i: test.as_ref().map(|r| r.map_t2i),
        val_map_i2t: val.as_ref().map(|r| r.map_i2t),
        val_map_t2i: val.as_ref().map(|r| r.map_t2i),
        label_accuracy: checkpoint.training_targets.as_ref().and_then(|t| label_accuracy(t.view(), data)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = ExperimentConfig::parse("seed = 3\n[data.synthetic]\nnoise_ratio = 0.4\n").unwrap();
        assert_eq!(c.train, TrainConfig::default());
        let r = c.resolved();
        assert_eq!(r.train.seed, 3);
        match r.data {
            DataSource::Synthetic(s) => {
                assert_eq!(s.seed, 3);
                assert_eq!(s.noise_ratio, 0.4);
                assert_eq!(s.n, 2000);
            }
            _ => panic!("expected synthetic data"),
        }
    }

    #[test]
    fn toml_round_trip() {
        let mut c = ExperimentConfig::default();
        c.train.mode = Mode::AblateBhg;
        c.data = DataSource::Manifest("/tmp/d/dataset.toml".into());
        assert_eq!(ExperimentConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::parse("[data.synthetic]\nbogus = 1\n").is_err());
        assert!(ExperimentConfig::parse("[data.synthetic]\n[train]\nlamda = 1\n").is_err());
        assert!(ExperimentConfig::parse("[data]\nsynthetic = {}\nmanifest = \"x\"\n").is_err());
    }
}
