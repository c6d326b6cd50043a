//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "TRIFUSE1"
//! version    u32
//! meta       u64 length + UTF-8 JSON (model config, epoch, precision, ...)
//! tensors    u32 count, then per tensor:
//!              u32 name length + UTF-8 name
//!              u32 rank, u64 extent × rank
//!              f64 × numel
//! rng        32-byte seed, u64 stream, u128 word position
//! ```
//!
//! Tensor names carry a section prefix: `param/`, `adam.m/`, `adam.v/`,
//! `best/`, and `progress/`.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{AblationMode, Model};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TRIFUSE1";
pub const VERSION: u32 = 1;
const PRECISION: &str = "f64";

const PARAM: &str = "param/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const BEST: &str = "best/";
const PROGRESS_SCORES: &str = "progress/best_scores";

/// Adaptive-moment buffers, one pair per parameter in [`ParamSet`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Result<Self> {
        let zeros = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect::<Result<Vec<_>>>()?;
        Ok(OptimizerState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }
}

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Model-selection bookkeeping carried across a resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingProgress {
    pub best_params: ParamSet,
    pub best_f1: f64,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub stale_epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    /// Ablation mode the weights were trained under.
    pub mode: AblationMode,
    pub epoch: usize,
    pub params: ParamSet,
    pub optimizer: Option<OptimizerState>,
    pub rng: RngState,
    pub progress: Option<TrainingProgress>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    model: ModelConfig,
    #[serde(default)]
    mode: AblationMode,
    precision: String,
    epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer_step: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    best_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stale_epochs: Option<usize>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CheckpointFormat(format!("truncated at byte {}", self.pos)))?;
        let slice = &self.buf[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("take returns N bytes"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn len(&mut self, value: u64) -> Result<usize> {
        usize::try_from(value).map_err(|_| Error::CheckpointFormat("length overflows usize".into()))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::CheckpointFormat("invalid UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name_len = self.u32()? as usize;
        let name = self.string(name_len)?;
        let rank = self.u32()? as usize;
        if !(1..=crate::tensor::MAX_RANK).contains(&rank) {
            return Err(Error::CheckpointFormat(format!("tensor `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let e = self.u64()?;
            shape.push(self.len(e)?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::CheckpointFormat(format!("tensor `{name}` is too large")))?;
        let bytes = self.take(numel.checked_mul(8).ok_or_else(|| {
            Error::CheckpointFormat(format!("tensor `{name}` is too large"))
        })?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(&shape, data)
            .map_err(|e| Error::CheckpointFormat(format!("tensor `{name}`: {e}")))?;
        Ok((name, t))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            model: self.model_config.clone(),
            mode: self.mode,
            precision: PRECISION.to_owned(),
            epoch: self.epoch,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            best_epoch: self.progress.as_ref().map(|p| p.best_epoch),
            stale_epochs: self.progress.as_ref().map(|p| p.stale_epochs),
        };
        let meta = serde_json::to_vec(&meta)?;

        let mut records: Vec<(String, &Tensor)> = Vec::new();
        for (name, t) in self.params.iter() {
            records.push((format!("{PARAM}{name}"), t));
        }
        if let Some(opt) = &self.optimizer {
            for ((name, _), m) in self.params.iter().zip(&opt.m) {
                records.push((format!("{ADAM_M}{name}"), m));
            }
            for ((name, _), v) in self.params.iter().zip(&opt.v) {
                records.push((format!("{ADAM_V}{name}"), v));
            }
        }
        let scores;
        if let Some(progress) = &self.progress {
            for (name, t) in progress.best_params.iter() {
                records.push((format!("{BEST}{name}"), t));
            }
            scores = Tensor::vector(vec![progress.best_f1, progress.best_loss])?;
            records.push((PROGRESS_SCORES.to_owned(), &scores));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, t) in &records {
            put_tensor(&mut out, name, t);
        }
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::CheckpointFormat(
                "bad magic: not a trifuse checkpoint".into(),
            ));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let meta_len = r.u64()?;
        let meta_len = r.len(meta_len)?;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::CheckpointFormat(format!("metadata: {e}")))?;
        if meta.precision != PRECISION {
            return Err(Error::CheckpointFormat(format!(
                "unsupported precision \"{}\"",
                meta.precision
            )));
        }
        meta.model
            .validate()
            .map_err(|e| Error::CheckpointFormat(format!("stored model config: {e}")))?;

        let count = r.u32()?;
        let mut params = ParamSet::new();
        let mut adam_m = Vec::new();
        let mut adam_v = Vec::new();
        let mut best = ParamSet::new();
        let mut scores = None;
        for _ in 0..count {
            let (name, t) = r.tensor()?;
            if let Some(n) = name.strip_prefix(PARAM) {
                params.insert(n, t)?;
            } else if name.starts_with(ADAM_M) {
                adam_m.push(t);
            } else if name.starts_with(ADAM_V) {
                adam_v.push(t);
            } else if let Some(n) = name.strip_prefix(BEST) {
                best.insert(n, t)?;
            } else if name == PROGRESS_SCORES {
                scores = Some(t);
            } else {
                return Err(Error::CheckpointFormat(format!("unknown record `{name}`")));
            }
        }
        let seed = r.array::<32>()?;
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.array()?);
        if r.pos != buf.len() {
            return Err(Error::CheckpointFormat(format!(
                "{} trailing bytes",
                buf.len() - r.pos
            )));
        }

        let optimizer = match meta.optimizer_step {
            Some(step) => {
                if adam_m.len() != params.len() || adam_v.len() != params.len() {
                    return Err(Error::CheckpointFormat(
                        "optimizer buffers do not match parameters".into(),
                    ));
                }
                Some(OptimizerState {
                    step,
                    m: adam_m,
                    v: adam_v,
                })
            }
            None => None,
        };
        let progress = match (meta.best_epoch, meta.stale_epochs, scores) {
            (Some(best_epoch), Some(stale_epochs), Some(scores)) if scores.numel() == 2 => {
                Some(TrainingProgress {
                    best_params: best,
                    best_f1: scores.data()[0],
                    best_loss: scores.data()[1],
                    best_epoch,
                    stale_epochs,
                })
            }
            (None, None, None) => None,
            _ => {
                return Err(Error::CheckpointFormat(
                    "incomplete training-progress section".into(),
                ))
            }
        };
        Ok(Checkpoint {
            model_config: meta.model,
            mode: meta.mode,
            epoch: meta.epoch,
            params,
            optimizer,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            progress,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// The model stored in the `param/` section.
    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.model_config.clone(), self.params.clone())
    }

    /// The best-validation weights when the run recorded them, otherwise the
    /// current ones.
    pub fn selected_model(&self) -> Result<Model> {
        match &self.progress {
            Some(p) => Model::from_params(self.model_config.clone(), p.best_params.clone()),
            None => self.model(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn sample_checkpoint() -> Checkpoint {
        let model = Model::new(ModelConfig::default(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        rng.set_stream(1);
        for _ in 0..37 {
            rng.next_u32();
        }
        let mut optimizer = OptimizerState::new(model.params()).unwrap();
        optimizer.step = 3;
        optimizer.m[0].data_mut()[0] = 0.125;
        Checkpoint {
            model_config: model.config().clone(),
            mode: AblationMode::TextOnly,
            epoch: 2,
            params: model.params().clone(),
            optimizer: Some(optimizer),
            rng: RngState::capture(&rng),
            progress: Some(TrainingProgress {
                best_params: model.params().clone(),
                best_f1: 0.1 + 0.2,
                best_loss: 1.0 / 3.0,
                best_epoch: 1,
                stale_epochs: 1,
            }),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ckpt = sample_checkpoint();
        let bytes = ckpt.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let mut a = ckpt.rng.restore();
        let mut b = back.rng.restore();
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn rejects_tampering() {
        let mut bytes = sample_checkpoint().to_bytes().unwrap();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad_magic),
            Err(Error::CheckpointFormat(_))
        ));

        let mut bad_version = bytes.clone();
        bad_version[8..12].copy_from_slice(&7u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&bad_version).unwrap_err();
        assert!(matches!(err, Error::CheckpointVersion { found: 7, expected: 1 }));
        assert!(err.to_string().contains('7') && err.to_string().contains('1'));

        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
