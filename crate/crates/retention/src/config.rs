//! Run configuration, optionally read from a TOML file.
//!
//! ```toml
//! [model]
//! d_model = 32
//! layers = 2
//!
//! [retention]
//! capacity = 16
//! write_mode = "blend"      # or "append"
//! gate = "threshold=0.5"    # "always", "never" or "threshold=<tau>"
//!
//! [task]
//! num_pairs = 1
//!
//! [train]
//! steps = 1000
//! batch_size = 8
//! ```
//!
//! Missing keys keep their defaults; unknown keys are rejected.

use std::path::Path;

use retention_core::model::ModelConfig;
use retention_core::retention::{Gate, RetentionConfig, WriteMode};
use retention_core::task::{TaskConfig, VocabSplit};
use retention_core::train::TrainConfig;
use serde::Deserialize;

use crate::session::StoreError;

pub fn parse_gate(s: &str) -> Result<Gate, String> {
    match s {
        "always" => Ok(Gate::Always),
        "never" => Ok(Gate::Never),
        _ => {
            let tau = s
                .strip_prefix("threshold=")
                .ok_or_else(|| format!("gate must be always, never or threshold=<tau>, got {s:?}"))?;
            let tau: f64 = tau.parse().map_err(|_| format!("bad threshold {tau:?}"))?;
            if !tau.is_finite() {
                return Err(format!("threshold {tau} is not finite"));
            }
            Ok(Gate::Threshold(tau))
        }
    }
}

pub fn gate_name(g: Gate) -> String {
    match g {
        Gate::Always => "always".into(),
        Gate::Never => "never".into(),
        Gate::Threshold(t) => format!("threshold={t}"),
    }
}

pub fn parse_write_mode(s: &str) -> Result<WriteMode, String> {
    match s {
        "append" => Ok(WriteMode::Append),
        "blend" => Ok(WriteMode::Blend),
        _ => Err(format!("write mode must be append or blend, got {s:?}")),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub retention: RetentionConfig,
    pub task: TaskConfig,
    pub train: TrainConfig,
    /// Held-out episodes scored after training.
    pub eval_episodes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            retention: RetentionConfig {
                gate: Gate::Threshold(0.5),
                ..RetentionConfig::default()
            },
            task: TaskConfig::default(),
            train: TrainConfig::default(),
            eval_episodes: 1000,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    model: ModelSection,
    #[serde(default)]
    retention: RetentionSection,
    #[serde(default)]
    task: TaskSection,
    #[serde(default)]
    train: TrainSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    vocab: Option<usize>,
    d_model: Option<usize>,
    d_k: Option<usize>,
    heads: Option<usize>,
    d_ff: Option<usize>,
    layers: Option<usize>,
    max_len: Option<usize>,
    dropout: Option<f64>,
    causal: Option<bool>,
    ln_eps: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RetentionSection {
    capacity: Option<usize>,
    write_mode: Option<String>,
    gate: Option<String>,
    decay_rate: Option<f64>,
    compaction_floor: Option<f64>,
    read_heads: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskSection {
    num_pairs: Option<usize>,
    keys: Option<usize>,
    values: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    steps: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    eps: Option<f64>,
    grad_clip: Option<f64>,
    log_every: Option<usize>,
    eval_episodes: Option<usize>,
}

fn set<T>(dst: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *dst = v;
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error(transparent)]
    Read(#[from] StoreError),
    #[error("{0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let file: FileConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        let mut c = RunConfig::default();
        let m = file.model;
        set(&mut c.model.vocab, m.vocab);
        set(&mut c.model.d_model, m.d_model);
        set(&mut c.model.d_k, m.d_k);
        set(&mut c.model.heads, m.heads);
        set(&mut c.model.d_ff, m.d_ff);
        set(&mut c.model.layers, m.layers);
        set(&mut c.model.max_len, m.max_len);
        set(&mut c.model.dropout, m.dropout);
        set(&mut c.model.causal, m.causal);
        set(&mut c.model.ln_eps, m.ln_eps);

        let r = file.retention;
        set(&mut c.retention.capacity, r.capacity);
        set(&mut c.retention.write_mode, r.write_mode.as_deref().map(parse_write_mode).transpose()?);
        set(&mut c.retention.gate, r.gate.as_deref().map(parse_gate).transpose()?);
        set(&mut c.retention.decay_rate, r.decay_rate);
        set(&mut c.retention.compaction_floor, r.compaction_floor);
        set(&mut c.retention.read_heads, r.read_heads);

        let t = file.task;
        set(&mut c.task.num_pairs, t.num_pairs);
        set(&mut c.task.split.keys, t.keys);
        set(&mut c.task.split.values, t.values);

        let t = file.train;
        set(&mut c.train.steps, t.steps);
        set(&mut c.train.batch_size, t.batch_size);
        set(&mut c.train.lr, t.lr);
        set(&mut c.train.beta1, t.beta1);
        set(&mut c.train.beta2, t.beta2);
        set(&mut c.train.eps, t.eps);
        if let Some(clip) = t.grad_clip {
            c.train.grad_clip = (clip > 0.0).then_some(clip);
        }
        set(&mut c.train.log_every, t.log_every);
        set(&mut c.eval_episodes, t.eval_episodes);
        c.sync_vocab();
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))
    }

    /// The task shares the model's vocabulary.
    pub fn sync_vocab(&mut self) {
        self.task.split = VocabSplit {
            vocab: self.model.vocab,
            ..self.task.split
        };
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        self.retention.validate().map_err(|e| e.to_string())?;
        self.task.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        if self.task.max_step_len() > self.model.max_len {
            return Err(format!(
                "num_pairs {} needs max_len >= {}",
                self.task.num_pairs,
                self.task.max_step_len()
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gates() {
        assert_eq!(parse_gate("always"), Ok(Gate::Always));
        assert_eq!(parse_gate("never"), Ok(Gate::Never));
        assert_eq!(parse_gate("threshold=0.25"), Ok(Gate::Threshold(0.25)));
        assert!(parse_gate("threshold=x").is_err());
        assert!(parse_gate("threshold=inf").is_err());
        assert!(parse_gate("sometimes").is_err());
        assert_eq!(parse_gate(&gate_name(Gate::Threshold(0.5))), Ok(Gate::Threshold(0.5)));
    }

    #[test]
    fn toml_overrides_defaults() {
        let c = RunConfig::from_toml(
            "[model]\nd_model = 8\nvocab = 40\n[retention]\nwrite_mode = \"append\"\ngate = \"never\"\n[train]\nsteps = 3\ngrad_clip = 0\n",
        )
        .unwrap();
        assert_eq!(c.model.d_model, 8);
        assert_eq!(c.task.split.vocab, 40);
        assert_eq!(c.retention.write_mode, WriteMode::Append);
        assert_eq!(c.retention.gate, Gate::Never);
        assert_eq!(c.train.steps, 3);
        assert_eq!(c.train.grad_clip, None);
        assert_eq!(c.model.layers, ModelConfig::default().layers);
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[model]\nwidth = 3\n").is_err());
        assert!(RunConfig::from_toml("[optim]\n").is_err());
        assert!(RunConfig::from_toml("[retention]\nwrite_mode = \"smear\"\n").is_err());
    }
}
