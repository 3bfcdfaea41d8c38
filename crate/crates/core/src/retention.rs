//! Persistent slot memory: attention-style reads, append (FIFO) and blend
//! writes, write gating, usage bookkeeping and low-usage compaction.
//!
//! All operations take a [`MemoryState`] by reference and return a new one.
//! The differentiable variants used during training live at the bottom of
//! the module and share the same kernels, so both paths agree bit for bit.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{scaled_dot_attention_masked, tape_attention, xavier_uniform};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numeric::{self, Mask};
use crate::rng::Rng;
use crate::tape::{Tape, Var};

/// The memory matrix plus per-slot bookkeeping.
///
/// Invariants (checked by [`MemoryState::from_parts`]):
/// unoccupied slots are zero rows with `insert_seq == 0` and `usage == 0`;
/// occupied slots carry distinct `insert_seq` values below `next_seq`;
/// usage is non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState {
    slots: Matrix,
    occupied: Vec<bool>,
    insert_seq: Vec<u64>,
    usage: Vec<f64>,
    next_seq: u64,
}

impl MemoryState {
    /// An empty memory of `capacity` slots of width `d_model`.
    pub fn empty(capacity: usize, d_model: usize) -> Self {
        MemoryState {
            slots: Matrix::zeros(capacity, d_model),
            occupied: vec![false; capacity],
            insert_seq: vec![0; capacity],
            usage: vec![0.0; capacity],
            next_seq: 1,
        }
    }

    /// Rebuilds a state from its fields, rejecting anything that breaks the
    /// type's invariants.
    pub fn from_parts(
        slots: Matrix,
        occupied: Vec<bool>,
        insert_seq: Vec<u64>,
        usage: Vec<f64>,
        next_seq: u64,
    ) -> Result<Self> {
        let state = MemoryState {
            slots,
            occupied,
            insert_seq,
            usage,
            next_seq,
        };
        state.check_invariants()?;
        Ok(state)
    }

    pub fn check_invariants(&self) -> Result<()> {
        let m = self.slots.rows();
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.occupied.len() != m || self.insert_seq.len() != m || self.usage.len() != m {
            return bad(format!("memory bookkeeping lengths disagree with {m} slots"));
        }
        if !self.slots.is_finite() {
            return Err(Error::NonFinite { what: "memory slots" });
        }
        let mut seen: Vec<u64> = Vec::new();
        for i in 0..m {
            if !self.usage[i].is_finite() || self.usage[i] < 0.0 {
                return bad(format!("slot {i} has invalid usage {}", self.usage[i]));
            }
            if self.occupied[i] {
                let s = self.insert_seq[i];
                if s == 0 || s >= self.next_seq {
                    return bad(format!("slot {i} insert_seq {s} outside 1..{}", self.next_seq));
                }
                if seen.contains(&s) {
                    return bad(format!("duplicate insert_seq {s}"));
                }
                seen.push(s);
            } else if self.insert_seq[i] != 0
                || self.usage[i] != 0.0
                || self.slots.row(i).iter().any(|&v| v != 0.0)
            {
                return bad(format!("unoccupied slot {i} is not cleared"));
            }
        }
        Ok(())
    }

    pub fn capacity(&self) -> usize {
        self.slots.rows()
    }

    pub fn d_model(&self) -> usize {
        self.slots.cols()
    }

    pub fn slots(&self) -> &Matrix {
        &self.slots
    }

    pub fn occupied(&self) -> &[bool] {
        &self.occupied
    }

    pub fn insert_seq(&self) -> &[u64] {
        &self.insert_seq
    }

    pub fn usage(&self) -> &[f64] {
        &self.usage
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }

    /// Slot an append would write to: the lowest free index, otherwise the
    /// occupied slot with the smallest `insert_seq`.
    pub fn append_target(&self) -> usize {
        if let Some(free) = self.occupied.iter().position(|&o| !o) {
            return free;
        }
        (0..self.capacity())
            .min_by_key(|&i| self.insert_seq[i])
            .expect("capacity >= 1")
    }

    fn commit_append(&mut self, slot: usize, row: &[f64]) {
        self.slots.row_mut(slot).copy_from_slice(row);
        self.occupied[slot] = true;
        self.insert_seq[slot] = self.next_seq;
        self.usage[slot] = 0.0;
        self.next_seq += 1;
    }

    fn clear_slot(&mut self, slot: usize) {
        self.slots.row_mut(slot).fill(0.0);
        self.occupied[slot] = false;
        self.insert_seq[slot] = 0;
        self.usage[slot] = 0.0;
    }

    /// Every slot emptied; `next_seq` keeps counting so sequence numbers are
    /// never reused.
    pub fn cleared(&self) -> Self {
        let mut s = self.clone();
        for i in 0..s.capacity() {
            s.clear_slot(i);
        }
        s
    }
}

/// Read and write projections of the retention sub-layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RetentionParams<T = Matrix> {
    /// `d_model x d_k`
    pub wq: T,
    /// `d_model x d_k`
    pub wk: T,
    /// `d_model x d_model`
    pub wv: T,
    /// `d_model x d_model`, applied to the write vector in blend mode.
    pub w_update: T,
}

impl RetentionParams<Matrix> {
    pub fn init(d_model: usize, d_k: usize, rng: &mut Rng) -> Self {
        RetentionParams {
            wq: xavier_uniform(d_model, d_k, rng),
            wk: xavier_uniform(d_model, d_k, rng),
            wv: xavier_uniform(d_model, d_model, rng),
            w_update: xavier_uniform(d_model, d_model, rng),
        }
    }

    /// Identity projections (`d_k == d_model`).
    pub fn identity(d_model: usize) -> Self {
        RetentionParams {
            wq: Matrix::identity(d_model),
            wk: Matrix::identity(d_model),
            wv: Matrix::identity(d_model),
            w_update: Matrix::identity(d_model),
        }
    }
}

impl<T> RetentionParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> RetentionParams<U> {
        RetentionParams {
            wq: f(&self.wq),
            wk: f(&self.wk),
            wv: f(&self.wv),
            w_update: f(&self.w_update),
        }
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.wq"), &self.wq));
        out.push((format!("{prefix}.wk"), &self.wk));
        out.push((format!("{prefix}.wv"), &self.wv));
        out.push((format!("{prefix}.w_update"), &self.w_update));
    }

    pub fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.push(&mut self.wq);
        out.push(&mut self.wk);
        out.push(&mut self.wv);
        out.push(&mut self.w_update);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteMode {
    /// Store the write vector in a free slot, evicting the oldest when full.
    Append,
    /// Interpolate the projected write vector into every occupied slot.
    Blend,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gate {
    Always,
    Never,
    /// Write when the signal is at least the threshold.
    Threshold(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetentionConfig {
    pub capacity: usize,
    pub write_mode: WriteMode,
    pub gate: Gate,
    /// Usage decay λ in `[0, 1]`.
    pub decay_rate: f64,
    /// Slots with usage below this are candidates for merging.
    pub compaction_floor: f64,
    /// Only single-head reads are implemented.
    pub read_heads: usize,
}

impl Default for RetentionConfig {
    fn default() -> Self {
        RetentionConfig {
            capacity: 16,
            write_mode: WriteMode::Blend,
            gate: Gate::Always,
            decay_rate: 0.9,
            compaction_floor: 0.05,
            read_heads: 1,
        }
    }
}

impl RetentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(Error::InvalidConfig("memory capacity must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.decay_rate) {
            return Err(Error::InvalidConfig(format!(
                "decay rate {} outside [0, 1]",
                self.decay_rate
            )));
        }
        if !self.compaction_floor.is_finite() {
            return Err(Error::InvalidConfig("compaction floor must be finite".into()));
        }
        if let Gate::Threshold(t) = self.gate {
            if !t.is_finite() {
                return Err(Error::InvalidConfig("gate threshold must be finite".into()));
            }
        }
        if self.read_heads != 1 {
            return Err(Error::InvalidConfig(format!(
                "read_heads = {} unsupported; memory reads are single-head",
                self.read_heads
            )));
        }
        Ok(())
    }
}

/// Caller-supplied scalar (task performance, user feedback) that drives the
/// write gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WriteSignal(f64);

impl WriteSignal {
    pub const WRITE: WriteSignal = WriteSignal(1.0);
    pub const SKIP: WriteSignal = WriteSignal(0.0);

    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite { what: "write signal" });
        }
        Ok(WriteSignal(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn gate_write(signal: WriteSignal, config: &RetentionConfig) -> bool {
    match config.gate {
        Gate::Always => true,
        Gate::Never => false,
        Gate::Threshold(t) => signal.0 >= t,
    }
}

/// Result of [`retention_read`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReadOutput {
    /// `n x d_model` memory-derived representation.
    pub r: Matrix,
    /// `n x m` attention over slots; unoccupied columns are exactly zero.
    pub weights: Matrix,
}

fn check_memory_width(x: &Matrix, mem: &MemoryState, op: &'static str) -> Result<()> {
    if x.cols() != mem.d_model() {
        return Err(Error::Shape {
            op,
            lhs: x.shape(),
            rhs: mem.slots.shape(),
        });
    }
    Ok(())
}

/// Memory attention: queries from `x`, keys and values from occupied slots.
/// With no occupied slot both outputs are zero.
pub fn retention_read(x: &Matrix, mem: &MemoryState, params: &RetentionParams) -> Result<ReadOutput> {
    check_memory_width(x, mem, "retention_read")?;
    let q = x.matmul(&params.wq)?;
    let k = mem.slots.matmul(&params.wk)?;
    let v = mem.slots.matmul(&params.wv)?;
    let (r, weights) = scaled_dot_attention_masked(&q, &k, &v, &Mask::Columns(mem.occupied.clone()))?;
    Ok(ReadOutput { r, weights })
}

/// Mean-pooled summary of the token representations.
pub fn make_write_vector(x: &Matrix) -> Result<Matrix> {
    numeric::mean_rows(x)
}

fn check_write_vector(u: &Matrix, mem: &MemoryState, op: &'static str) -> Result<()> {
    if u.rows() != 1 || u.cols() != mem.d_model() {
        return Err(Error::Shape {
            op,
            lhs: mem.slots.shape(),
            rhs: u.shape(),
        });
    }
    Ok(())
}

/// FIFO write: lowest free slot, else overwrite the oldest.
pub fn write_append(mem: &MemoryState, u: &Matrix) -> Result<MemoryState> {
    check_write_vector(u, mem, "write_append")?;
    let mut next = mem.clone();
    next.commit_append(mem.append_target(), u.as_slice());
    Ok(next)
}

/// `slotᵢ ← (1 - wᵢ)·slotᵢ + wᵢ·update`; rows with `wᵢ == 0` are copied as is.
pub fn blend_rows(slots: &Matrix, weights: &Matrix, update: &Matrix) -> Result<Matrix> {
    if weights.shape() != (1, slots.rows()) || update.shape() != (1, slots.cols()) {
        return Err(Error::Shape {
            op: "blend_rows",
            lhs: slots.shape(),
            rhs: weights.shape(),
        });
    }
    let mut out = slots.clone();
    let u = update.as_slice();
    for (i, &w) in weights.as_slice().iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (o, &uc) in out.row_mut(i).iter_mut().zip(u) {
            // The clamp only absorbs rounding; the exact value is in range.
            *o = ((1.0 - w) * *o + w * uc).clamp(o.min(uc), o.max(uc));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlendStatus {
    Blended,
    /// Memory was empty; the projected vector was appended instead.
    AppendedFallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendOutcome {
    pub state: MemoryState,
    /// Write weight per slot; zero for unoccupied slots and on fallback.
    pub weights: Vec<f64>,
    pub status: BlendStatus,
}

/// Attention-weighted soft write of `u·W_update` into the occupied slots.
pub fn write_blend(mem: &MemoryState, u: &Matrix, params: &RetentionParams) -> Result<BlendOutcome> {
    check_write_vector(u, mem, "write_blend")?;
    let update = u.matmul(&params.w_update)?;
    if mem.occupied_count() == 0 {
        let mut next = mem.clone();
        next.commit_append(mem.append_target(), update.as_slice());
        return Ok(BlendOutcome {
            state: next,
            weights: vec![0.0; mem.capacity()],
            status: BlendStatus::AppendedFallback,
        });
    }
    let logits = update
        .matmul(&mem.slots.transpose())?
        .scale(1.0 / libm::sqrt(mem.d_model() as f64));
    let w = numeric::softmax_masked(&logits, &Mask::Columns(mem.occupied.clone()))?;
    let mut next = mem.clone();
    next.slots = blend_rows(&mem.slots, &w, &update)?;
    Ok(BlendOutcome {
        state: next,
        weights: w.into_vec(),
        status: BlendStatus::Blended,
    })
}

/// `usageᵢ ← λ·usageᵢ + mean_t weights[t, i]` on occupied slots.
pub fn update_usage(mem: &MemoryState, weights: &Matrix, decay: f64) -> Result<MemoryState> {
    if weights.cols() != mem.capacity() {
        return Err(Error::Shape {
            op: "update_usage",
            lhs: mem.slots.shape(),
            rhs: weights.shape(),
        });
    }
    let n = weights.rows();
    let mut next = mem.clone();
    for i in 0..mem.capacity() {
        if !mem.occupied[i] {
            continue;
        }
        let mass = if n == 0 {
            0.0
        } else {
            (0..n).map(|t| weights.get(t, i)).sum::<f64>() / n as f64
        };
        next.usage[i] = decay * mem.usage[i] + mass;
    }
    Ok(next)
}

/// Pairwise merging of low-usage slots.
///
/// While at least two occupied slots sit below `compaction_floor`, the two
/// lowest (ties: smaller `insert_seq`) are replaced by their usage-weighted
/// mean, stored in the newer slot's position with the newer `insert_seq`
/// and the summed usage. The older slot is vacated.
pub fn compact(mem: &MemoryState, config: &RetentionConfig) -> MemoryState {
    let mut next = mem.clone();
    loop {
        let mut low: Vec<usize> = (0..next.capacity())
            .filter(|&i| next.occupied[i] && next.usage[i] < config.compaction_floor)
            .collect();
        if low.len() < 2 {
            return next;
        }
        low.sort_by(|&a, &b| {
            next.usage[a]
                .total_cmp(&next.usage[b])
                .then(next.insert_seq[a].cmp(&next.insert_seq[b]))
        });
        let (a, b) = (low[0], low[1]);
        let (keep, drop) = if next.insert_seq[a] > next.insert_seq[b] { (a, b) } else { (b, a) };
        let (uk, ud) = (next.usage[keep], next.usage[drop]);
        let total = uk + ud;
        let merged: Vec<f64> = next
            .slots
            .row(keep)
            .iter()
            .zip(next.slots.row(drop))
            .map(|(&k, &d)| if total > 0.0 { (uk * k + ud * d) / total } else { (k + d) / 2.0 })
            .collect();
        next.slots.row_mut(keep).copy_from_slice(&merged);
        next.usage[keep] = total;
        next.clear_slot(drop);
    }
}

/// Top-`k` occupied slots by read attention for a single query row,
/// descending; ties go to the smaller slot index.
pub fn score_slots(
    query: &Matrix,
    mem: &MemoryState,
    params: &RetentionParams,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    if query.rows() != 1 {
        return Err(Error::Shape {
            op: "score_slots",
            lhs: query.shape(),
            rhs: (1, mem.d_model()),
        });
    }
    let read = retention_read(query, mem, params)?;
    let mut ranked: Vec<(usize, f64)> = (0..mem.capacity())
        .filter(|&i| mem.occupied[i])
        .map(|i| (i, read.weights.get(0, i)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}

/// A memory whose slot matrix lives on a tape, so reads and writes inside
/// an episode are differentiable.
#[derive(Debug, Clone)]
pub struct TrackedMemory {
    pub slots: Var,
    pub state: MemoryState,
}

impl TrackedMemory {
    /// Enters `state` as a constant: no gradient flows into it.
    pub fn constant(tape: &mut Tape, state: MemoryState) -> Self {
        TrackedMemory {
            slots: tape.leaf(state.slots.clone()),
            state,
        }
    }
}

/// Tape version of [`retention_read`]; returns `(r, weights)`.
pub fn tape_retention_read(
    tape: &mut Tape,
    x: Var,
    mem: &TrackedMemory,
    params: &RetentionParams<Var>,
) -> Result<(Var, Var)> {
    check_memory_width(tape.value(x), &mem.state, "retention_read")?;
    let q = tape.matmul(x, params.wq)?;
    let k = tape.matmul(mem.slots, params.wk)?;
    let v = tape.matmul(mem.slots, params.wv)?;
    tape_attention(tape, q, k, v, Mask::Columns(mem.state.occupied.clone()))
}

/// Tape version of the write step: mean-pools `x` and applies the
/// configured write mode. Slot choice in append mode is a discrete
/// selection; gradients flow through the stored values only.
pub fn tape_write(
    tape: &mut Tape,
    x: Var,
    mem: TrackedMemory,
    params: &RetentionParams<Var>,
    mode: WriteMode,
) -> Result<TrackedMemory> {
    let u = tape.mean_rows(x)?;
    let TrackedMemory { slots, mut state } = mem;
    check_write_vector(tape.value(u), &state, "tape_write")?;
    let (new_slots, appended) = match mode {
        WriteMode::Append => {
            let target = state.append_target();
            (tape.replace_row(slots, target, u)?, Some(target))
        }
        WriteMode::Blend => {
            let update = tape.matmul(u, params.w_update)?;
            if state.occupied_count() == 0 {
                let target = state.append_target();
                (tape.replace_row(slots, target, update)?, Some(target))
            } else {
                let st = tape.transpose(slots);
                let logits = tape.matmul(update, st)?;
                let logits = tape.scale(logits, 1.0 / libm::sqrt(state.d_model() as f64));
                let w = tape.softmax(logits, Mask::Columns(state.occupied.clone()))?;
                (tape.blend_rows(slots, w, update)?, None)
            }
        }
    };
    let value = tape.value(new_slots).clone();
    match appended {
        Some(target) => state.commit_append(target, value.row(target)),
        None => state.slots = value,
    }
    Ok(TrackedMemory {
        slots: new_slots,
        state,
    })
}
