use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::archive::{read_archive, write_archive, ArchiveRecord};
use super::{set_trainable, FreezeMask, ModelSpec, Params};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::{AdamState, TrainHistory};

/// Serializable position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: Vec<u8>,
    pub stream: u64,
    /// `u128` word position, kept as decimal text for JSON portability.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().to_vec(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng word position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Early-stopping bookkeeping carried by a resumable checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainProgress {
    pub best_params: Params<f32>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub bad_epochs: usize,
    pub stopped_early: bool,
    pub history: TrainHistory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: Params<f32>,
    pub freeze_depth: usize,
    pub optimizer: AdamState<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngState,
    pub progress: Option<TrainProgress>,
}

#[derive(Serialize, Deserialize)]
struct ProgressMeta {
    best_val_loss: f64,
    best_epoch: usize,
    bad_epochs: usize,
    stopped_early: bool,
    history: TrainHistory,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    spec: ModelSpec,
    freeze_depth: usize,
    epoch: usize,
    rng: RngState,
    optimizer_step: u64,
    progress: Option<ProgressMeta>,
}

const PARAM: &str = "param/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const BEST: &str = "best/";

impl Checkpoint {
    /// Fresh, untrained checkpoint with zeroed optimizer state.
    pub fn new(spec: ModelSpec, params: Params<f32>, freeze_depth: usize, rng: &ChaCha8Rng) -> Self {
        Self {
            optimizer: AdamState::new(&params),
            spec,
            params,
            freeze_depth,
            epoch: 0,
            rng: RngState::capture(rng),
            progress: None,
        }
    }

    pub fn freeze_mask(&self) -> Result<FreezeMask> {
        set_trainable(&self.spec, self.freeze_depth)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut records = Vec::new();
        let mut push = |prefix: &str, map: &IndexMap<String, Tensor<f32>>| {
            for (name, t) in map {
                records.push((format!("{prefix}{name}"), ArchiveRecord::F32(t.clone())));
            }
        };
        push(PARAM, &self.params);
        push(ADAM_M, &self.optimizer.m);
        push(ADAM_V, &self.optimizer.v);
        if let Some(p) = &self.progress {
            push(BEST, &p.best_params);
        }
        let meta = Metadata {
            spec: self.spec.clone(),
            freeze_depth: self.freeze_depth,
            epoch: self.epoch,
            rng: self.rng.clone(),
            optimizer_step: self.optimizer.step,
            progress: self.progress.as_ref().map(|p| ProgressMeta {
                best_val_loss: p.best_val_loss,
                best_epoch: p.best_epoch,
                bad_epochs: p.bad_epochs,
                stopped_early: p.stopped_early,
                history: p.history.clone(),
            }),
        };
        Ok(write_archive(&records, &serde_json::to_vec(&meta)?))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (records, meta) = read_archive(bytes)?;
        let meta: Metadata = serde_json::from_slice(&meta)
            .map_err(|e| Error::Checkpoint(format!("metadata block: {e}")))?;
        let mut params = Params::default();
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        let mut best = Params::default();
        for (name, rec) in records {
            let ArchiveRecord::F32(t) = rec else {
                return Err(Error::Checkpoint(format!("record `{name}` must be f32")));
            };
            if let Some(n) = name.strip_prefix(PARAM) {
                params.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(ADAM_M) {
                m.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(ADAM_V) {
                v.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(BEST) {
                best.insert(n.to_string(), t);
            } else {
                return Err(Error::Checkpoint(format!("unexpected record `{name}`")));
            }
        }
        meta.spec.validate()?;
        for (name, shape) in meta.spec.param_shapes() {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` missing or not shaped {shape:?}"
                    )))
                }
            }
        }
        Ok(Self {
            spec: meta.spec,
            params,
            freeze_depth: meta.freeze_depth,
            optimizer: AdamState {
                step: meta.optimizer_step,
                m,
                v,
            },
            epoch: meta.epoch,
            rng: meta.rng,
            progress: meta.progress.map(|p| TrainProgress {
                best_params: best,
                best_val_loss: p.best_val_loss,
                best_epoch: p.best_epoch,
                bad_epochs: p.bad_epochs,
                stopped_early: p.stopped_early,
                history: p.history,
            }),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read `{}`: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
