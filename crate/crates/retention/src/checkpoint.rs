//! Checkpoint files: configuration plus every parameter tensor.

use std::fs;
use std::path::Path;

use retention_core::model::{ModelConfig, ModelParams};
use retention_core::retention::{Gate, RetentionConfig, WriteMode};
use retention_core::task::{TaskConfig, VocabSplit};
use retention_core::Rng;

use crate::codec::{self, FormatError, Reader, Writer};
use crate::session::{atomic_write, StoreError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RETNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub retention: RetentionConfig,
    pub task: TaskConfig,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn fingerprint(&self) -> u64 {
        crate::session::model_fingerprint(&self.model, &self.retention)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        w.section(|s| write_model(s, &self.model));
        w.section(|s| write_retention(s, &self.retention));
        w.section(|s| {
            s.u64(self.task.num_pairs as u64);
            s.u64(self.task.split.keys as u64);
            s.u64(self.task.split.values as u64);
            s.u64(self.task.split.vocab as u64);
        });
        let named = self.params.named();
        w.u32(named.len() as u32);
        for (name, m) in named {
            w.str(&name);
            w.matrix(m);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = codec::open(bytes, CHECKPOINT_MAGIC, "checkpoint", CHECKPOINT_VERSION)?;
        let model = r.section(read_model)?;
        let retention = r.section(read_retention)?;
        let task = r.section(|s| {
            Ok(TaskConfig {
                num_pairs: s.usize()?,
                split: VocabSplit {
                    keys: s.usize()?,
                    values: s.usize()?,
                    vocab: s.usize()?,
                },
            })
        })?;
        let malformed = |e: retention_core::Error| FormatError::Malformed(e.to_string());
        model.validate().map_err(malformed)?;
        retention.validate().map_err(malformed)?;
        task.validate().map_err(malformed)?;

        // Shapes come from a throwaway initialization; values from the file.
        let mut params = ModelParams::init(&model, &mut Rng::new(0)).map_err(malformed)?;
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        let count = r.u32()? as usize;
        if count != names.len() {
            return Err(FormatError::Malformed(format!(
                "{count} tensors stored, model needs {}",
                names.len()
            )));
        }
        for (slot, want) in params.tensors_mut().into_iter().zip(&names) {
            let name = r.str()?;
            let m = r.matrix()?;
            if &name != want || m.shape() != slot.shape() {
                return Err(FormatError::Malformed(format!(
                    "tensor {name} {:?} where {want} {:?} was expected",
                    m.shape(),
                    slot.shape()
                )));
            }
            *slot = m;
        }
        r.expect_end()?;
        Ok(Checkpoint {
            model,
            retention,
            task,
            params,
        })
    }
}

fn write_model(w: &mut Writer, m: &ModelConfig) {
    for v in [m.vocab, m.d_model, m.d_k, m.heads, m.d_ff, m.layers, m.max_len] {
        w.u64(v as u64);
    }
    w.f64(m.dropout);
    w.u8(m.causal as u8);
    w.f64(m.ln_eps);
}

fn read_model(r: &mut Reader<'_>) -> Result<ModelConfig, FormatError> {
    Ok(ModelConfig {
        vocab: r.usize()?,
        d_model: r.usize()?,
        d_k: r.usize()?,
        heads: r.usize()?,
        d_ff: r.usize()?,
        layers: r.usize()?,
        max_len: r.usize()?,
        dropout: r.f64()?,
        causal: r.u8()? != 0,
        ln_eps: r.f64()?,
    })
}

fn write_retention(w: &mut Writer, c: &RetentionConfig) {
    w.u64(c.capacity as u64);
    w.u8(match c.write_mode {
        WriteMode::Append => 0,
        WriteMode::Blend => 1,
    });
    let (tag, tau) = match c.gate {
        Gate::Always => (0, 0.0),
        Gate::Never => (1, 0.0),
        Gate::Threshold(t) => (2, t),
    };
    w.u8(tag);
    w.f64(tau);
    w.f64(c.decay_rate);
    w.f64(c.compaction_floor);
    w.u64(c.read_heads as u64);
}

fn read_retention(r: &mut Reader<'_>) -> Result<RetentionConfig, FormatError> {
    let capacity = r.usize()?;
    let write_mode = match r.u8()? {
        0 => WriteMode::Append,
        1 => WriteMode::Blend,
        b => return Err(FormatError::Malformed(format!("write mode tag {b}"))),
    };
    let tag = r.u8()?;
    let tau = r.f64()?;
    let gate = match tag {
        0 => Gate::Always,
        1 => Gate::Never,
        2 => Gate::Threshold(tau),
        b => return Err(FormatError::Malformed(format!("gate tag {b}"))),
    };
    Ok(RetentionConfig {
        capacity,
        write_mode,
        gate,
        decay_rate: r.f64()?,
        compaction_floor: r.f64()?,
        read_heads: r.usize()?,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), StoreError> {
    atomic_write(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, StoreError> {
    let bytes = fs::read(path).map_err(|e| StoreError::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| StoreError::format(path, e))
}
