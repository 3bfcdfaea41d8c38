//! Retention blocks stacked into a small language model.
//!
//! Block recipe, per layer `l` with memory `M`:
//!
//! ```text
//! Z  = MHA(X)
//! X~ = LayerNorm(X + dropout(Z))
//! R  = read(X~, M)          -- then, if the gate opens, write mean(X~) into M
//! O  = FFN(X~ + R)
//! X' = LayerNorm(X~ + R + dropout(O))
//! ```
//!
//! Each block owns its own memory lineage; memory is never passed between
//! layers. Within an episode the memory slots are tape values, so a write
//! in step `t` receives gradient from the reads in step `t + 1`. Memory
//! entering an episode is a constant.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::attention::{tape_ffn, tape_multi_head, xavier_uniform, AttentionParams, FfnParams};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numeric::{dropout_mask, LN_EPS};
use crate::retention::{
    gate_write, tape_retention_read, tape_write, update_usage, MemoryState, RetentionConfig, RetentionParams,
    TrackedMemory, WriteSignal,
};
use crate::rng::Rng;
use crate::tape::{Tape, Var};

/// Output projection init is Glorot scaled by this, so untrained logits
/// are close to uniform.
pub const OUTPUT_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub max_len: usize,
    pub dropout: f64,
    /// Causal self-attention mask (memory reads are never masked causally).
    pub causal: bool,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 64,
            d_model: 32,
            d_k: 16,
            heads: 2,
            d_ff: 128,
            layers: 2,
            max_len: 32,
            dropout: 0.0,
            causal: true,
            ln_eps: LN_EPS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab", self.vocab),
            ("d_model", self.d_model),
            ("d_k", self.d_k),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("layers", self.layers),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return Err(Error::InvalidConfig("ln_eps must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T = Matrix> {
    pub gamma: T,
    pub beta: T,
}

impl LayerNormParams<Matrix> {
    pub fn new(d: usize) -> Self {
        LayerNormParams {
            gamma: Matrix::filled(1, d, 1.0),
            beta: Matrix::zeros(1, d),
        }
    }
}

/// One transformer block with retention.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T = Matrix> {
    pub attn: AttentionParams<T>,
    pub ret: RetentionParams<T>,
    pub ffn: FfnParams<T>,
    pub ln1: LayerNormParams<T>,
    pub ln2: LayerNormParams<T>,
}

impl BlockParams<Matrix> {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        BlockParams {
            attn: AttentionParams::init(cfg.d_model, cfg.d_k, cfg.heads, rng),
            ret: RetentionParams::init(cfg.d_model, cfg.d_k, rng),
            ffn: FfnParams::init(cfg.d_model, cfg.d_ff, rng),
            ln1: LayerNormParams::new(cfg.d_model),
            ln2: LayerNormParams::new(cfg.d_model),
        }
    }
}

impl<T> BlockParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> BlockParams<U> {
        BlockParams {
            attn: self.attn.map(f),
            ret: self.ret.map(f),
            ffn: self.ffn.map(f),
            ln1: LayerNormParams {
                gamma: f(&self.ln1.gamma),
                beta: f(&self.ln1.beta),
            },
            ln2: LayerNormParams {
                gamma: f(&self.ln2.gamma),
                beta: f(&self.ln2.beta),
            },
        }
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        self.attn.named(&format!("{prefix}.attn"), out);
        self.ret.named(&format!("{prefix}.ret"), out);
        self.ffn.named(&format!("{prefix}.ffn"), out);
        out.push((format!("{prefix}.ln1.gamma"), &self.ln1.gamma));
        out.push((format!("{prefix}.ln1.beta"), &self.ln1.beta));
        out.push((format!("{prefix}.ln2.gamma"), &self.ln2.gamma));
        out.push((format!("{prefix}.ln2.beta"), &self.ln2.beta));
    }

    pub fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        self.attn.tensors_mut(out);
        self.ret.tensors_mut(out);
        self.ffn.tensors_mut(out);
        out.push(&mut self.ln1.gamma);
        out.push(&mut self.ln1.beta);
        out.push(&mut self.ln2.gamma);
        out.push(&mut self.ln2.beta);
    }
}

/// All learnable weights of the stacked model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = Matrix> {
    /// `vocab x d_model`
    pub token_embedding: T,
    /// `max_len x d_model`
    pub position_embedding: T,
    pub blocks: Vec<BlockParams<T>>,
    /// `d_model x vocab`
    pub output_projection: T,
}

impl ModelParams<Matrix> {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let token_embedding = xavier_uniform(cfg.vocab, cfg.d_model, rng);
        let position_embedding = xavier_uniform(cfg.max_len, cfg.d_model, rng);
        let blocks = (0..cfg.layers).map(|_| BlockParams::init(cfg, rng)).collect();
        let output_projection = xavier_uniform(cfg.d_model, cfg.vocab, rng).scale(OUTPUT_INIT_SCALE);
        Ok(ModelParams {
            token_embedding,
            position_embedding,
            blocks,
            output_projection,
        })
    }

    pub fn zeros_like(&self) -> Self {
        self.map(&mut |m: &Matrix| Matrix::zeros(m.rows(), m.cols()))
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, m)| m.is_finite())
    }

    /// Shape-checks every tensor against `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expect = ModelParams::<Matrix>::shape_template(cfg);
        let (have, want) = (self.named(), expect.named());
        if have.len() != want.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameter tensors, found {}",
                want.len(),
                have.len()
            )));
        }
        for ((name, a), (_, b)) in have.iter().zip(&want) {
            if a.shape() != b.shape() {
                return Err(Error::InvalidConfig(format!(
                    "{name}: shape {}x{} does not match config {}x{}",
                    a.rows(),
                    a.cols(),
                    b.rows(),
                    b.cols()
                )));
            }
        }
        Ok(())
    }

    fn shape_template(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        ModelParams {
            token_embedding: Matrix::zeros(cfg.vocab, d),
            position_embedding: Matrix::zeros(cfg.max_len, d),
            blocks: (0..cfg.layers)
                .map(|_| BlockParams {
                    attn: AttentionParams::zeros(d, cfg.d_k, cfg.heads),
                    ret: RetentionParams {
                        wq: Matrix::zeros(d, cfg.d_k),
                        wk: Matrix::zeros(d, cfg.d_k),
                        wv: Matrix::zeros(d, d),
                        w_update: Matrix::zeros(d, d),
                    },
                    ffn: FfnParams::zeros(d, cfg.d_ff),
                    ln1: LayerNormParams::new(d),
                    ln2: LayerNormParams::new(d),
                })
                .collect(),
            output_projection: Matrix::zeros(d, cfg.vocab),
        }
    }
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            token_embedding: f(&self.token_embedding),
            position_embedding: f(&self.position_embedding),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            output_projection: f(&self.output_projection),
        }
    }

    /// Every tensor with a stable dotted name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        out.push(("token_embedding".into(), &self.token_embedding));
        out.push(("position_embedding".into(), &self.position_embedding));
        for (i, b) in self.blocks.iter().enumerate() {
            b.named(&format!("blocks[{i}]"), &mut out);
        }
        out.push(("output_projection".into(), &self.output_projection));
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        out.push(&mut self.token_embedding);
        out.push(&mut self.position_embedding);
        for b in self.blocks.iter_mut() {
            b.tensors_mut(&mut out);
        }
        out.push(&mut self.output_projection);
        out
    }
}

/// One memory lineage per block.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    layers: Vec<MemoryState>,
}

impl MemoryBank {
    pub fn empty(cfg: &ModelConfig, ret: &RetentionConfig) -> Self {
        MemoryBank {
            layers: (0..cfg.layers)
                .map(|_| MemoryState::empty(ret.capacity, cfg.d_model))
                .collect(),
        }
    }

    pub fn from_layers(layers: Vec<MemoryState>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("memory bank needs at least one layer".into()));
        }
        for l in &layers {
            l.check_invariants()?;
        }
        Ok(MemoryBank { layers })
    }

    pub fn layers(&self) -> &[MemoryState] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &MemoryState {
        &self.layers[i]
    }

    pub fn into_layers(self) -> Vec<MemoryState> {
        self.layers
    }

    pub fn cleared(&self) -> Self {
        MemoryBank {
            layers: self.layers.iter().map(MemoryState::cleared).collect(),
        }
    }

    pub fn occupied_counts(&self) -> Vec<usize> {
        self.layers.iter().map(MemoryState::occupied_count).collect()
    }

    fn check_against(&self, cfg: &ModelConfig, ret: &RetentionConfig) -> Result<()> {
        if self.layers.len() != cfg.layers {
            return Err(Error::InvalidConfig(format!(
                "memory bank has {} layers, model has {}",
                self.layers.len(),
                cfg.layers
            )));
        }
        for l in &self.layers {
            if l.d_model() != cfg.d_model || l.capacity() != ret.capacity {
                return Err(Error::Shape {
                    op: "memory bank",
                    lhs: (l.capacity(), l.d_model()),
                    rhs: (ret.capacity, cfg.d_model),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass inside an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub tokens: Vec<usize>,
    /// `(position, expected token)` pairs scored by the loss.
    pub targets: Vec<(usize, usize)>,
    pub signal: WriteSignal,
}

/// Ordered steps sharing one memory lineage; gradients stay inside it.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    steps: Vec<Step>,
}

impl Episode {
    pub fn new(steps: Vec<Step>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::EmptyInput { op: "Episode::new" });
        }
        for s in &steps {
            if s.tokens.is_empty() {
                return Err(Error::EmptyInput { op: "Episode step" });
            }
            if let Some(&(p, _)) = s.targets.iter().find(|(p, _)| *p >= s.tokens.len()) {
                return Err(Error::InvalidConfig(format!(
                    "target position {p} outside step of length {}",
                    s.tokens.len()
                )));
            }
        }
        Ok(Episode { steps })
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn target_count(&self) -> usize {
        self.steps.iter().map(|s| s.targets.len()).sum()
    }
}

fn tape_dropout(tape: &mut Tape, x: Var, p: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let (r, c) = tape.value(x).shape();
    let mask = dropout_mask(r, c, p, rng)?;
    tape.mul_const(x, mask)
}

/// Values produced by one block on the tape.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub x: Var,
    pub mem: TrackedMemory,
    /// `X~`, the input to the memory read and the write vector's source.
    pub normed: Var,
    pub read_weights: Var,
    pub wrote: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn tape_block(
    tape: &mut Tape,
    x: Var,
    mem: TrackedMemory,
    params: &BlockParams<Var>,
    cfg: &ModelConfig,
    ret: &RetentionConfig,
    signal: WriteSignal,
    mode: Mode,
    rng: &mut Rng,
) -> Result<BlockOutput> {
    let z = tape_multi_head(tape, x, &params.attn, cfg.causal)?;
    let z = tape_dropout(tape, z, cfg.dropout, mode, rng)?;
    let h = tape.add(x, z)?;
    let normed = tape.layer_norm(h, params.ln1.gamma, params.ln1.beta, cfg.ln_eps)?;

    let (r, read_weights) = tape_retention_read(tape, normed, &mem, &params.ret)?;
    let wrote = gate_write(signal, ret);
    let mut mem = if wrote {
        tape_write(tape, normed, mem, &params.ret, ret.write_mode)?
    } else {
        mem
    };
    mem.state = update_usage(&mem.state, tape.value(read_weights), ret.decay_rate)?;

    let s = tape.add(normed, r)?;
    let o = tape_ffn(tape, s, &params.ffn)?;
    let o = tape_dropout(tape, o, cfg.dropout, mode, rng)?;
    let y = tape.add(s, o)?;
    let x = tape.layer_norm(y, params.ln2.gamma, params.ln2.beta, cfg.ln_eps)?;
    Ok(BlockOutput {
        x,
        mem,
        normed,
        read_weights,
        wrote,
    })
}

/// One retention block on concrete values.
#[allow(clippy::too_many_arguments)]
pub fn retention_block_forward(
    x: &Matrix,
    mem: &MemoryState,
    params: &BlockParams,
    cfg: &ModelConfig,
    ret: &RetentionConfig,
    signal: WriteSignal,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Matrix, MemoryState)> {
    ret.validate()?;
    let mut tape = Tape::new();
    let pv = params.map(&mut |m| tape.leaf(m.clone()));
    let xv = tape.leaf(x.clone());
    let tracked = TrackedMemory::constant(&mut tape, mem.clone());
    let out = tape_block(&mut tape, xv, tracked, &pv, cfg, ret, signal, mode, rng)?;
    Ok((tape.value(out.x).clone(), out.mem.state))
}

fn check_tokens(tokens: &[usize], cfg: &ModelConfig) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput { op: "model_forward" });
    }
    if tokens.len() > cfg.max_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max_len: cfg.max_len,
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::TokenOutOfRange { token: t, vocab: cfg.vocab });
    }
    Ok(())
}

/// Output of [`tape_model_forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    pub memories: Vec<TrackedMemory>,
    pub blocks: Vec<BlockOutput>,
}

#[allow(clippy::too_many_arguments)]
pub fn tape_model_forward(
    tape: &mut Tape,
    tokens: &[usize],
    memories: Vec<TrackedMemory>,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
    ret: &RetentionConfig,
    signal: WriteSignal,
    mode: Mode,
    rng: &mut Rng,
) -> Result<ForwardOutput> {
    check_tokens(tokens, cfg)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let emb = tape.gather(params.token_embedding, tokens)?;
    let pos = tape.gather(params.position_embedding, &positions)?;
    let mut x = tape.add(emb, pos)?;
    let mut next = Vec::with_capacity(memories.len());
    let mut blocks = Vec::with_capacity(memories.len());
    for (mem, bp) in memories.into_iter().zip(&params.blocks) {
        let out = tape_block(tape, x, mem, bp, cfg, ret, signal, mode, rng)?;
        x = out.x;
        next.push(out.mem.clone());
        blocks.push(out);
    }
    let logits = tape.matmul(x, params.output_projection)?;
    Ok(ForwardOutput {
        logits,
        memories: next,
        blocks,
    })
}

fn leaves(tape: &mut Tape, params: &ModelParams) -> ModelParams<Var> {
    params.map(&mut |m| tape.leaf(m.clone()))
}

fn constant_bank(tape: &mut Tape, bank: &MemoryBank) -> Vec<TrackedMemory> {
    bank.layers
        .iter()
        .map(|s| TrackedMemory::constant(tape, s.clone()))
        .collect()
}

fn settle_bank(memories: &[TrackedMemory]) -> MemoryBank {
    MemoryBank {
        layers: memories.iter().map(|m| m.state.clone()).collect(),
    }
}

/// Token logits for one sequence, plus the updated memory bank.
#[allow(clippy::too_many_arguments)]
pub fn model_forward(
    tokens: &[usize],
    bank: &MemoryBank,
    params: &ModelParams,
    cfg: &ModelConfig,
    ret: &RetentionConfig,
    signal: WriteSignal,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Matrix, MemoryBank)> {
    ret.validate()?;
    bank.check_against(cfg, ret)?;
    let mut tape = Tape::new();
    let pv = leaves(&mut tape, params);
    let mems = constant_bank(&mut tape, bank);
    let out = tape_model_forward(&mut tape, tokens, mems, &pv, cfg, ret, signal, mode, rng)?;
    Ok((tape.value(out.logits).clone(), settle_bank(&out.memories)))
}

/// Mean-pooled `X~` of every block for `tokens`, read against `bank`
/// without writing. These are the per-layer queries used to rank slots.
pub fn retention_queries(
    tokens: &[usize],
    bank: &MemoryBank,
    params: &ModelParams,
    cfg: &ModelConfig,
    ret: &RetentionConfig,
) -> Result<Vec<Matrix>> {
    bank.check_against(cfg, ret)?;
    let quiet = RetentionConfig {
        gate: crate::retention::Gate::Never,
        ..ret.clone()
    };
    let mut tape = Tape::new();
    let pv = leaves(&mut tape, params);
    let mems = constant_bank(&mut tape, bank);
    let out = tape_model_forward(
        &mut tape,
        tokens,
        mems,
        &pv,
        cfg,
        &quiet,
        WriteSignal::SKIP,
        Mode::Eval,
        &mut Rng::new(0),
    )?;
    out.blocks
        .iter()
        .map(|b| crate::numeric::mean_rows(tape.value(b.normed)))
        .collect()
}

/// Loss, gradients and bookkeeping for one episode.
#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub loss: f64,
    pub grads: ModelParams,
    pub bank_next: MemoryBank,
    /// Argmax predictions at target positions that matched.
    pub correct: usize,
    pub total: usize,
}

#[allow(clippy::too_many_arguments)]
fn run_episode(
    episode: &Episode,
    bank: &MemoryBank,
    params: &ModelParams,
    cfg: &ModelConfig,
    ret: &RetentionConfig,
    mode: Mode,
    rng: &mut Rng,
    with_grads: bool,
) -> Result<EpisodeResult> {
    ret.validate()?;
    bank.check_against(cfg, ret)?;
    let mut tape = Tape::new();
    let pv = leaves(&mut tape, params);
    let mut mems = constant_bank(&mut tape, bank);
    let total = episode.target_count();
    let scale = if total == 0 { 0.0 } else { 1.0 / total as f64 };
    let mut loss: Option<Var> = None;
    let mut correct = 0;

    for step in &episode.steps {
        let out = tape_model_forward(&mut tape, &step.tokens, mems, &pv, cfg, ret, step.signal, mode, rng)?;
        mems = out.memories;
        if step.targets.is_empty() {
            continue;
        }
        let logits = tape.value(out.logits);
        for &(pos, want) in &step.targets {
            if argmax(logits.row(pos)) == want {
                correct += 1;
            }
        }
        let ce = tape.cross_entropy(out.logits, &step.targets, scale)?;
        loss = Some(match loss {
            Some(acc) => tape.add(acc, ce)?,
            None => ce,
        });
    }

    let bank_next = settle_bank(&mems);
    let (loss_value, grads) = match loss {
        None => (0.0, params.zeros_like()),
        Some(l) => {
            let value = tape.value(l).get(0, 0);
            let grads = if with_grads {
                let g = tape.backward(l)?;
                let grads = pv.map(&mut |v| g.get(*v));
                if !grads.is_finite() {
                    return Err(Error::NonFinite { what: "gradients" });
                }
                grads
            } else {
                params.zeros_like()
            };
            (value, grads)
        }
    };
    if !loss_value.is_finite() {
        return Err(Error::NonFinite { what: "episode loss" });
    }
    Ok(EpisodeResult {
        loss: loss_value,
        grads,
        bank_next,
        correct,
        total,
    })
}

/// Mean cross-entropy over all target positions of the episode and its
/// gradient with respect to every parameter, in training mode.
pub fn loss_and_grads(
    episode: &Episode,
    bank: &MemoryBank,
    params: &ModelParams,
    cfg: &ModelConfig,
    ret: &RetentionConfig,
    rng: &mut Rng,
) -> Result<EpisodeResult> {
    run_episode(episode, bank, params, cfg, ret, Mode::Train, rng, true)
}

/// Forward-only episode evaluation; gradients in the result are zero.
pub fn evaluate_episode(
    episode: &Episode,
    bank: &MemoryBank,
    params: &ModelParams,
    cfg: &ModelConfig,
    ret: &RetentionConfig,
    mode: Mode,
    rng: &mut Rng,
) -> Result<EpisodeResult> {
    run_episode(episode, bank, params, cfg, ret, mode, rng, false)
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
