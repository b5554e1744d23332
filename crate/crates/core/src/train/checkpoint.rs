//! JSON checkpoints holding everything needed for a bit-exact resume: adapter
//! parameters, optimizer moments, the shuffle stream position and the
//! current epoch order.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Optimizer, TrainConfig, Trainer};
use crate::adapters::AdapterConfig;
use crate::error::{Error, Result};
use crate::host::FrozenHost;
use crate::linalg::Matrix;

pub const CHECKPOINT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    pub layer: usize,
    pub config: AdapterConfig,
    pub params: Vec<(String, Matrix)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal string; JSON numbers cannot carry a u128.
    pub word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |m: &str| Error::CheckpointMismatch(format!("rng state: {m}"));
        let bytes = hex::decode(&self.seed).map_err(|e| bad(&e.to_string()))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed must be 32 bytes"))?;
        let word_pos: u128 = self.word_pos.parse().map_err(|_| bad("word_pos is not an integer"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u64,
    pub frozen_checksum: String,
    pub layers: Vec<LayerState>,
    pub train_config: TrainConfig,
    pub optimizer: Optimizer,
    pub rng: RngState,
    pub order: Vec<usize>,
    pub cursor: usize,
    pub step: u64,
    pub window_loss: f64,
    pub window_steps: u64,
}

impl Trainer {
    pub fn checkpoint(&self, host: &FrozenHost) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            frozen_checksum: host.frozen_checksum(),
            layers: host
                .adapters()
                .map(|(layer, a)| LayerState {
                    layer,
                    config: a.config().clone(),
                    params: a.params().into_iter().map(|(n, m)| (n, m.clone())).collect(),
                })
                .collect(),
            train_config: self.config.clone(),
            optimizer: self.optimizer.clone(),
            rng: RngState::capture(&self.rng),
            order: self.order.clone(),
            cursor: self.cursor,
            step: self.step,
            window_loss: self.window_loss,
            window_steps: self.window_steps,
        }
    }

    /// Load adapter parameters into `host` and rebuild the trainer. `host`
    /// is left untouched unless every check passes.
    pub fn restore(ckpt: &Checkpoint, host: &mut FrozenHost) -> Result<Trainer> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion { found: ckpt.version, expected: CHECKPOINT_VERSION });
        }
        if ckpt.frozen_checksum != host.frozen_checksum() {
            return Err(Error::CheckpointMismatch("frozen host weights differ".into()));
        }
        ckpt.train_config.validate()?;
        let attached: Vec<(usize, AdapterConfig)> = host.adapters().map(|(l, a)| (l, a.config().clone())).collect();
        let saved: Vec<(usize, AdapterConfig)> = ckpt.layers.iter().map(|s| (s.layer, s.config.clone())).collect();
        if attached != saved {
            return Err(Error::CheckpointMismatch("adapter layout differs from the host".into()));
        }
        let mut staged = host.clone();
        for s in &ckpt.layers {
            staged.adapter_mut(s.layer).expect("layout checked").load_params(&s.params)?;
        }
        let opt = &ckpt.optimizer;
        if !opt.m.is_empty() {
            let shapes: Vec<_> = staged.trainable_params().iter().map(|(_, m)| m.shape()).collect();
            let ok = |buf: &[Matrix]| buf.len() == shapes.len() && buf.iter().zip(&shapes).all(|(b, s)| b.shape() == *s);
            if !ok(&opt.m) || !ok(&opt.v) {
                return Err(Error::CheckpointMismatch("optimizer moments do not match parameters".into()));
            }
        }
        if opt.kind != ckpt.train_config.optimizer {
            return Err(Error::CheckpointMismatch("optimizer kind differs from train config".into()));
        }
        if ckpt.cursor > ckpt.order.len() {
            return Err(Error::CheckpointMismatch("cursor past end of epoch order".into()));
        }
        let rng = ckpt.rng.restore()?;
        *host = staged;
        Ok(Trainer {
            config: ckpt.train_config.clone(),
            optimizer: opt.clone(),
            rng,
            order: ckpt.order.clone(),
            cursor: ckpt.cursor,
            step: ckpt.step,
            window_loss: ckpt.window_loss,
            window_steps: ckpt.window_steps,
        })
    }
}

/// Write atomically via a sibling temporary file.
pub fn save_checkpoint(path: &Path, trainer: &Trainer, host: &FrozenHost) -> Result<()> {
    let json = serde_json::to_vec(&trainer.checkpoint(host))?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, json)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, host: &mut FrozenHost) -> Result<Trainer> {
    let ckpt: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
    Trainer::restore(&ckpt, host)
}
