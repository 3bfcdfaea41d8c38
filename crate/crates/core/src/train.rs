//! Adam training on recall episodes, fully determined by the seed.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{evaluate_episode, loss_and_grads, MemoryBank, Mode, ModelConfig, ModelParams};
use crate::retention::RetentionConfig;
use crate::rng::Rng;
use crate::task::{gen_recall_episode, TaskConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Episodes averaged per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Steps per metrics record.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 8,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::InvalidConfig("batch_size and log_every must be >= 1".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("learning rate or Adam betas out of range".into()));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    /// Mean training loss over the interval.
    pub loss: f64,
    /// Fraction of query targets predicted correctly over the interval.
    pub recall_accuracy: f64,
}

impl fmt::Display for MetricRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} loss={:.6} recall_acc={:.4}",
            self.step, self.loss, self.recall_accuracy
        )
    }
}

impl MetricRecord {
    /// Parses a line written by the `Display` impl.
    pub fn parse(line: &str) -> core::result::Result<Self, String> {
        let mut step = None;
        let mut loss = None;
        let mut acc = None;
        for field in line.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(|| format!("malformed field {field:?}"))?;
            match k {
                "step" => step = Some(v.parse().map_err(|_| format!("bad step {v:?}"))?),
                "loss" => loss = Some(v.parse().map_err(|_| format!("bad loss {v:?}"))?),
                "recall_acc" => acc = Some(v.parse().map_err(|_| format!("bad recall_acc {v:?}"))?),
                _ => {}
            }
        }
        Ok(MetricRecord {
            step: step.ok_or("missing step")?,
            loss: loss.ok_or("missing loss")?,
            recall_accuracy: acc.ok_or("missing recall_acc")?,
        })
    }
}

/// Adam first and second moments, shaped like the parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    m: ModelParams,
    v: ModelParams,
    t: i32,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(cfg.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(cfg.beta2, self.t as f64);
        let grads = grads.named();
        let tensors = params.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, (_, g)), m), v) in tensors.into_iter().zip(grads).zip(ms).zip(vs) {
            let p = p.as_mut_slice();
            let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
            for (i, &gi) in g.as_slice().iter().enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= cfg.lr * m_hat / (libm::sqrt(v_hat) + cfg.eps);
            }
        }
    }
}

fn clip_global_norm(grads: &mut ModelParams, max_norm: f64) {
    let norm = libm::sqrt(grads.named().iter().map(|(_, g)| g.sum_squares()).sum::<f64>());
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.tensors_mut() {
            *g = g.scale(s);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub log: Vec<MetricRecord>,
    /// Memory of the first training lineage after the last step.
    pub final_bank: MemoryBank,
}

/// Independent streams derived from one seed.
struct Streams {
    init: Rng,
    data: Rng,
    dropout: Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let mut root = Rng::new(seed);
        Streams {
            init: root.split(),
            data: root.split(),
            dropout: root.split(),
        }
    }
}

/// Parameters exactly as [`train`] initializes them for `seed`.
pub fn init_params(model: &ModelConfig, seed: u64) -> Result<ModelParams> {
    ModelParams::init(model, &mut Streams::new(seed).init)
}

fn check_fit(task: &TaskConfig, model: &ModelConfig) -> Result<()> {
    task.validate()?;
    if task.split.vocab != model.vocab {
        return Err(Error::InvalidConfig(format!(
            "task vocabulary {} differs from model vocabulary {}",
            task.split.vocab, model.vocab
        )));
    }
    if task.max_step_len() > model.max_len {
        return Err(Error::InvalidConfig(format!(
            "task steps of {} tokens exceed max_len {}",
            task.max_step_len(),
            model.max_len
        )));
    }
    Ok(())
}

/// Trains on freshly sampled recall episodes. Each batch slot keeps its own
/// memory bank across steps; gradients never reach memory from an earlier
/// episode.
pub fn train(
    task: &TaskConfig,
    model: &ModelConfig,
    ret: &RetentionConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutput> {
    check_fit(task, model)?;
    ret.validate()?;
    cfg.validate()?;
    let mut streams = Streams::new(seed);
    let mut params = ModelParams::init(model, &mut streams.init)?;
    let mut adam = Adam::new(&params);
    // One memory lineage per batch slot, carried across episodes as
    // constant data.
    let mut banks = alloc::vec![MemoryBank::empty(model, ret); cfg.batch_size];
    let mut log = Vec::new();
    let (mut loss_acc, mut correct, mut total, mut episodes) = (0.0, 0usize, 0usize, 0usize);
    let inv_batch = 1.0 / cfg.batch_size as f64;

    for step in 1..=cfg.steps {
        let mut grads = params.zeros_like();
        let mut step_loss = 0.0;
        for bank in banks.iter_mut() {
            let episode = gen_recall_episode(&mut streams.data, task.num_pairs, &task.split)?;
            let res = loss_and_grads(&episode, bank, &params, model, ret, &mut streams.dropout)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Divergence { step, loss: f64::NAN },
                    other => other,
                })?;
            for (acc, (_, g)) in grads.tensors_mut().into_iter().zip(res.grads.named()) {
                acc.add_assign(&g.scale(inv_batch))?;
            }
            step_loss += res.loss * inv_batch;
            correct += res.correct;
            total += res.total;
            *bank = res.bank_next;
        }
        if !step_loss.is_finite() {
            return Err(Error::Divergence { step, loss: step_loss });
        }
        if let Some(max) = cfg.grad_clip {
            clip_global_norm(&mut grads, max);
        }
        adam.step(&mut params, &grads, cfg);
        loss_acc += step_loss;
        episodes += 1;

        if step % cfg.log_every == 0 || step == cfg.steps {
            log.push(MetricRecord {
                step,
                loss: loss_acc / episodes as f64,
                recall_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            });
            (loss_acc, correct, total, episodes) = (0.0, 0, 0, 0);
        }
    }
    if !params.is_finite() {
        return Err(Error::Divergence {
            step: cfg.steps,
            loss: f64::NAN,
        });
    }
    Ok(TrainOutput {
        params,
        log,
        final_bank: banks.swap_remove(0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallEval {
    pub loss: f64,
    pub accuracy: f64,
    pub episodes: usize,
}

/// Eval-mode recall accuracy on `episodes` fresh episodes drawn from `seed`,
/// run back to back on one memory bank that starts empty.
pub fn evaluate_recall(
    params: &ModelParams,
    task: &TaskConfig,
    model: &ModelConfig,
    ret: &RetentionConfig,
    episodes: usize,
    seed: u64,
) -> Result<RecallEval> {
    check_fit(task, model)?;
    let mut data = Rng::new(seed);
    let mut unused = Rng::new(0);
    let mut bank = MemoryBank::empty(model, ret);
    let (mut loss, mut correct, mut total) = (0.0, 0, 0);
    for _ in 0..episodes {
        let ep = gen_recall_episode(&mut data, task.num_pairs, &task.split)?;
        let res = evaluate_episode(&ep, &bank, params, model, ret, Mode::Eval, &mut unused)?;
        bank = res.bank_next;
        loss += res.loss;
        correct += res.correct;
        total += res.total;
    }
    Ok(RecallEval {
        loss: if episodes == 0 { 0.0 } else { loss / episodes as f64 },
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        episodes,
    })
}

/// Sum of squared differences between two parameter sets.
pub fn param_distance(a: &ModelParams, b: &ModelParams) -> f64 {
    a.named()
        .iter()
        .zip(b.named())
        .map(|((_, x), (_, y))| x.sub(y).map(|d: Matrix| d.sum_squares()).unwrap_or(f64::INFINITY))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retention::{Gate, WriteMode};
    use crate::task::VocabSplit;

    fn small() -> (TaskConfig, ModelConfig, RetentionConfig) {
        let split = VocabSplit {
            keys: 4,
            values: 4,
            vocab: 12,
        };
        (
            TaskConfig { num_pairs: 1, split },
            ModelConfig {
                vocab: 12,
                d_model: 8,
                d_k: 4,
                heads: 2,
                d_ff: 16,
                layers: 1,
                max_len: 6,
                ..ModelConfig::default()
            },
            RetentionConfig {
                capacity: 4,
                write_mode: WriteMode::Blend,
                gate: Gate::Threshold(0.5),
                ..RetentionConfig::default()
            },
        )
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let (task, model, ret) = small();
        let cfg = TrainConfig { steps: 0, ..Default::default() };
        let out = train(&task, &model, &ret, &cfg, 5).unwrap();
        assert_eq!(out.params, init_params(&model, 5).unwrap());
        assert!(out.log.is_empty());
    }

    #[test]
    fn same_seed_same_log() {
        let (task, model, ret) = small();
        let cfg = TrainConfig {
            steps: 20,
            batch_size: 2,
            log_every: 5,
            ..Default::default()
        };
        let a = train(&task, &model, &ret, &cfg, 77).unwrap();
        let b = train(&task, &model, &ret, &cfg, 77).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
        assert_eq!(a.log.len(), 4);
        let c = train(&task, &model, &ret, &cfg, 78).unwrap();
        assert_ne!(a.log, c.log);
    }

    #[test]
    fn training_reduces_loss() {
        let (task, model, ret) = small();
        let cfg = TrainConfig {
            steps: 300,
            batch_size: 4,
            log_every: 100,
            ..Default::default()
        };
        let out = train(&task, &model, &ret, &cfg, 1).unwrap();
        assert!(out.log.last().unwrap().loss < out.log[0].loss);
    }

    #[test]
    fn metric_line_round_trip() {
        let r = MetricRecord {
            step: 40,
            loss: 1.25,
            recall_accuracy: 0.5,
        };
        let line = alloc::format!("{r}");
        assert_eq!(line, "step=40 loss=1.250000 recall_acc=0.5000");
        assert_eq!(MetricRecord::parse(&line).unwrap(), r);
        assert!(MetricRecord::parse("step=1 loss=x recall_acc=0").is_err());
        assert!(MetricRecord::parse("loss=1 recall_acc=0").is_err());
    }

    #[test]
    fn mismatched_task_rejected() {
        let (task, model, ret) = small();
        let wide = ModelConfig { vocab: 13, ..model.clone() };
        assert!(train(&task, &wide, &ret, &TrainConfig::default(), 0).is_err());
        let short = ModelConfig { max_len: 2, ..model };
        assert!(train(&task, &short, &ret, &TrainConfig::default(), 0).is_err());
    }
}
