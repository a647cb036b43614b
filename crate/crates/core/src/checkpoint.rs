//! Binary checkpoints.
//!
//! Layout, all little-endian: magic `OTRCL1`, `u32` version, `u64`
//! architecture sizes (visual input, text input, hidden, embedding, classes),
//! `u64` epochs done, `f64` tau1, the Adam configuration and step, the RNG
//! seed/stream/word position, parameter tensors, both Adam moments in the same
//! order, then two optional target matrices each prefixed by a presence byte
//! and a `u64` row count.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::model::{Adam, AdamConfig, Architecture, Head, ModelState, Params, TrainOutcome};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"OTRCL1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub state: ModelState,
    pub optimizer: Adam,
    pub epochs_done: u64,
    pub rng: ChaCha8Rng,
    /// Evolving soft targets, N x K.
    pub targets: Option<Array2<f64>>,
    /// Supervision used in the last epoch, N x K.
    pub training_targets: Option<Array2<f64>>,
}

impl Checkpoint {
    pub fn from_outcome(outcome: &TrainOutcome) -> Self {
        Self {
            state: outcome.state.clone(),
            optimizer: outcome.optimizer.clone(),
            epochs_done: outcome.epochs_done as u64,
            rng: outcome.rng.clone(),
            targets: Some(outcome.targets.values.clone()),
            training_targets: Some(outcome.training_targets.clone()),
        }
    }

    pub fn architecture(&self) -> Architecture {
        self.state.architecture()
    }

    pub fn encode(&self) -> Vec<u8> {
        let arch = self.architecture();
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        for d in [arch.input_v, arch.input_t, arch.hidden, arch.embed, arch.classes] {
            w.u64(d as u64);
        }
        w.u64(self.epochs_done);
        w.f64(self.state.tau1);
        let AdamConfig { lr, beta1, beta2, eps } = self.optimizer.config;
        for x in [lr, beta1, beta2, eps] {
            w.f64(x);
        }
        w.u64(self.optimizer.step);
        w.bytes(&self.rng.get_seed());
        w.u64(self.rng.get_stream());
        w.bytes(&self.rng.get_word_pos().to_le_bytes());
        for params in [&self.state.params, &self.optimizer.first, &self.optimizer.second] {
            for t in params.tensors() {
                t.iter().for_each(|&x| w.f64(x));
            }
        }
        for m in [&self.targets, &self.training_targets] {
            match m {
                None => w.bytes(&[0]),
                Some(m) => {
                    w.bytes(&[1]);
                    w.u64(m.nrows() as u64);
                    m.iter().for_each(|&x| w.f64(x));
                }
            }
        }
        w.0
    }

    /// Parses a checkpoint; never panics on malformed input.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::Format("missing OTRCL1 header".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.size()?;
        }
        let [input_v, input_t, hidden, embed, classes] = dims;
        if dims.contains(&0) {
            return Err(Error::Format("zero-sized architecture".into()));
        }
        let arch = Architecture { input_v, input_t, hidden, embed, classes };
        let epochs_done = r.u64()?;
        let tau1 = r.f64()?;
        if !(tau1 > 0.0) {
            return Err(Error::Format(format!("tau1 must be positive, got {tau1}")));
        }
        let config = AdamConfig { lr: r.f64()?, beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? };
        let step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        if word_pos >> 68 != 0 {
            return Err(Error::Format(format!("RNG word position {word_pos} exceeds 68 bits")));
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        let params = r.params(arch)?;
        let first = r.params(arch)?;
        let second = r.params(arch)?;
        let targets = r.optional_matrix(classes)?;
        let training_targets = r.optional_matrix(classes)?;
        if r.at != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Self {
            state: ModelState { params, tau1 },
            optimizer: Adam { config, step, first, second },
            epochs_done,
            rng,
            targets,
            training_targets,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::Load { path: path.into(), reason: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Load { path: path.into(), reason: e.to_string() })?;
        Self::decode(&bytes).map_err(|e| Error::Load { path: path.into(), reason: e.to_string() })
    }
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u32(&mut self, x: u32) {
        self.bytes(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.bytes(&x.to_le_bytes());
    }
    fn f64(&mut self, x: f64) {
        self.bytes(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated checkpoint: need {n} bytes at offset {}", self.at))
        })?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn size(&mut self) -> Result<usize> {
        let x = self.u64()?;
        usize::try_from(x).map_err(|_| Error::Format(format!("size {x} does not fit in memory")))
    }

    fn f64(&mut self) -> Result<f64> {
        let x = f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        if x.is_finite() {
            Ok(x)
        } else {
            Err(Error::Format(format!("non-finite value before offset {}", self.at)))
        }
    }

    /// Reads `rows * cols` values after checking they are all present.
    fn values(&mut self, rows: usize, cols: usize) -> Result<Vec<f64>> {
        let count = rows
            .checked_mul(cols)
            .filter(|c| c.checked_mul(8).is_some_and(|b| b <= self.bytes.len() - self.at))
            .ok_or_else(|| Error::Format(format!("truncated checkpoint: {rows}x{cols} block missing")))?;
        (0..count).map(|_| self.f64()).collect()
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let v = self.values(rows, cols)?;
        Ok(Array2::from_shape_vec((rows, cols), v).expect("length checked"))
    }

    fn vector(&mut self, len: usize) -> Result<Array1<f64>> {
        Ok(Array1::from(self.values(len, 1)?))
    }

    fn head(&mut self, input: usize, hidden: usize, output: usize) -> Result<Head> {
        Ok(Head {
            w1: self.matrix(hidden, input)?,
            b1: self.vector(hidden)?,
            w2: self.matrix(output, hidden)?,
            b2: self.vector(output)?,
        })
    }

    fn params(&mut self, a: Architecture) -> Result<Params> {
        Ok(Params {
            head_v: self.head(a.input_v, a.hidden, a.embed)?,
            head_t: self.head(a.input_t, a.hidden, a.embed)?,
            prototypes: self.matrix(a.classes, a.embed)?,
        })
    }

    fn optional_matrix(&mut self, cols: usize) -> Result<Option<Array2<f64>>> {
        match self.take(1)?[0] {
            0 => Ok(None),
            1 => {
                let rows = self.size()?;
                Ok(Some(self.matrix(rows, cols)?))
            }
            b => Err(Error::Format(format!("invalid presence byte {b}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let arch = Architecture { input_v: 3, input_t: 2, hidden: 4, embed: 2, classes: 3 };
        let state = ModelState::init(arch, 0.5, &mut rng).unwrap();
        let mut optimizer = Adam::new(AdamConfig::default(), &state.params);
        optimizer.step = 7;
        optimizer.first.prototypes.fill(0.25);
        let _: u64 = rng.random();
        Checkpoint {
            state,
            optimizer,
            epochs_done: 4,
            rng,
            targets: Some(Array2::from_elem((5, 3), 1.0 / 3.0)),
            training_targets: None,
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let ck = sample();
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back.state.params, ck.state.params);
        assert_eq!(back.state.tau1, 0.5);
        assert_eq!(back.optimizer, ck.optimizer);
        assert_eq!(back.epochs_done, 4);
        assert_eq!(back.targets, ck.targets);
        assert_eq!(back.training_targets, None);
        let (mut a, mut b) = (ck.rng.clone(), back.rng.clone());
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = sample().encode();
        for len in 0..bytes.len() {
            assert!(Checkpoint::decode(&bytes[..len]).is_err(), "prefix {len}");
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Checkpoint::decode(&longer).is_err());
    }

    #[test]
    fn version_mismatch_is_descriptive() {
        let mut bytes = sample().encode();
        bytes[6] = 9;
        let msg = Checkpoint::decode(&bytes).unwrap_err().to_string();
        assert!(msg.contains("version 9"), "{msg}");
    }

    #[test]
    fn huge_dimensions_do_not_allocate() {
        let mut bytes = sample().encode();
        bytes[10..18].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(Checkpoint::decode(&bytes).is_err());
    }
}
