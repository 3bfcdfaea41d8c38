//! The `retention` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use retention_core::model::{argmax, model_forward, retention_queries, MemoryBank, Mode};
use retention_core::retention::{compact, score_slots, WriteSignal};
use retention_core::train::{evaluate_recall, train, MetricRecord};
use retention_core::Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{gate_name, parse_gate, parse_write_mode, ConfigError, RunConfig};
use crate::session::{load_session, now_seconds, save_session, SessionLock, SessionStore, StoreError};

/// Offset between the training seed and the held-out evaluation seed.
pub const EVAL_SEED_OFFSET: u64 = 0x9e37_79b9;

#[derive(Debug, Parser)]
#[command(name = "retention", version, about = "Transformer with a persistent retention memory")]
pub struct Cli {
    /// Seed for every random draw of the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Session file holding the memory bank.
    #[arg(long, global = true, default_value = "retention.session")]
    pub session: PathBuf,
    /// Model checkpoint.
    #[arg(long, global = true, default_value = "retention.ckpt")]
    pub checkpoint: PathBuf,
    /// TOML run configuration (training only).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the associative recall task and write a checkpoint and session.
    Train(TrainArgs),
    /// Run one forward pass against the session and save the updated memory.
    Infer(InferArgs),
    /// Inspect or edit the session memory.
    Memory {
        #[command(subcommand)]
        action: MemoryCommand,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Key/value pairs per episode.
    #[arg(long)]
    pub pairs: Option<usize>,
    /// append or blend.
    #[arg(long, value_parser = parse_write_mode)]
    pub write_mode: Option<retention_core::retention::WriteMode>,
    /// always, never or threshold=<tau>.
    #[arg(long, value_parser = parse_gate)]
    pub gate: Option<retention_core::retention::Gate>,
    #[arg(long)]
    pub log_every: Option<usize>,
    #[arg(long)]
    pub eval_episodes: Option<usize>,
    /// Write the metrics log here.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Whitespace-separated tokens, e.g. "k3 v7" or "QUERY k3 ?".
    pub tokens: String,
    /// always, never or threshold=<tau>.
    #[arg(long, value_parser = parse_gate, default_value = "always")]
    pub gate: retention_core::retention::Gate,
    /// Write signal compared against a threshold gate.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub signal: f64,
}

#[derive(Debug, Subcommand)]
pub enum MemoryCommand {
    /// Per-layer occupancy and slot statistics.
    Inspect {
        /// Slots to rank for --query.
        #[arg(long, default_value_t = 5)]
        top: usize,
        /// Rank slots by read attention for these tokens.
        #[arg(long)]
        query: Option<String>,
        /// Print key=value records instead of prose.
        #[arg(long)]
        machine: bool,
    },
    /// Merge low-usage slots.
    Compact,
    /// Empty every layer.
    Clear,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<retention_core::Error> for CliError {
    fn from(e: retention_core::Error) -> Self {
        use retention_core::Error as E;
        match e {
            E::InvalidConfig(_) | E::TokenOutOfRange { .. } | E::SequenceTooLong { .. } | E::EmptyInput { .. } => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Reports go to `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = write!(err, "{e}");
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Train(a) => cmd_train(cli, a, out),
        Command::Infer(a) => cmd_infer(cli, a, out),
        Command::Memory { action } => cmd_memory(cli, action, out),
    }
}

fn run_config(cli: &Cli, a: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut c = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            ConfigError::Read(e) => CliError::from(e),
            ConfigError::Invalid(m) => CliError::Usage(m),
        })?,
        None => RunConfig::default(),
    };
    if let Some(v) = a.steps {
        c.train.steps = v;
    }
    if let Some(v) = a.batch_size {
        c.train.batch_size = v;
    }
    if let Some(v) = a.lr {
        c.train.lr = v;
    }
    if let Some(v) = a.pairs {
        c.task.num_pairs = v;
    }
    if let Some(v) = a.write_mode {
        c.retention.write_mode = v;
    }
    if let Some(v) = a.gate {
        c.retention.gate = v;
    }
    if let Some(v) = a.log_every {
        c.train.log_every = v;
    }
    if let Some(v) = a.eval_episodes {
        c.eval_episodes = v;
    }
    c.sync_vocab();
    c.validate().map_err(CliError::Usage)?;
    Ok(c)
}

fn cmd_train(cli: &Cli, a: &TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let c = run_config(cli, a)?;
    let result = train(&c.task, &c.model, &c.retention, &c.train, cli.seed)?;
    let eval = evaluate_recall(
        &result.params,
        &c.task,
        &c.model,
        &c.retention,
        c.eval_episodes,
        cli.seed.wrapping_add(EVAL_SEED_OFFSET),
    )?;

    let log: String = result.log.iter().map(|r| format!("{r}\n")).collect();
    out.write_all(log.as_bytes())?;
    if let Some(path) = &a.metrics {
        fs::write(path, &log).map_err(|e| StoreError::io(path, e))?;
    }

    let ckpt = Checkpoint {
        model: c.model.clone(),
        retention: c.retention.clone(),
        task: c.task,
        params: result.params,
    };
    save_checkpoint(&ckpt, &cli.checkpoint)?;
    let _lock = SessionLock::acquire(&cli.session)?;
    let store = SessionStore::new(result.final_bank, ckpt.fingerprint(), now_seconds());
    save_session(&store, &cli.session)?;

    let last = result.log.last();
    writeln!(
        out,
        "steps={} train_loss={} train_recall_acc={} eval_loss={:.6} eval_recall_acc={:.4} eval_episodes={} checkpoint={} session={}",
        c.train.steps,
        last.map_or("-".into(), |r: &MetricRecord| format!("{:.6}", r.loss)),
        last.map_or("-".into(), |r| format!("{:.4}", r.recall_accuracy)),
        eval.loss,
        eval.accuracy,
        eval.episodes,
        cli.checkpoint.display(),
        cli.session.display(),
    )?;
    Ok(())
}

/// Loads the session, or an empty bank when the file does not exist.
fn open_or_fresh(path: &Path, ckpt: &Checkpoint) -> Result<SessionStore, CliError> {
    if path.exists() {
        Ok(load_session(path, ckpt.fingerprint())?)
    } else {
        Ok(SessionStore::new(
            MemoryBank::empty(&ckpt.model, &ckpt.retention),
            ckpt.fingerprint(),
            now_seconds(),
        ))
    }
}

fn parse_tokens(ckpt: &Checkpoint, text: &str) -> Result<Vec<usize>, CliError> {
    let tokens = ckpt.task.split.parse_sequence(text).map_err(CliError::Usage)?;
    if tokens.is_empty() {
        return Err(CliError::Usage("no tokens given".into()));
    }
    Ok(tokens)
}

fn cmd_infer(cli: &Cli, a: &InferArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&cli.checkpoint)?;
    let tokens = parse_tokens(&ckpt, &a.tokens)?;
    let signal = WriteSignal::new(a.signal).map_err(|e| CliError::Usage(e.to_string()))?;
    let _lock = SessionLock::acquire(&cli.session)?;
    let mut store = open_or_fresh(&cli.session, &ckpt)?;
    let ret = retention_core::retention::RetentionConfig {
        gate: a.gate,
        ..ckpt.retention.clone()
    };
    let (logits, bank) = model_forward(
        &tokens,
        &store.bank,
        &ckpt.params,
        &ckpt.model,
        &ret,
        signal,
        Mode::Eval,
        &mut Rng::new(cli.seed),
    )?;
    let split = &ckpt.task.split;
    let mut predicted = Vec::new();
    for (pos, &t) in tokens.iter().enumerate() {
        if t == split.ask() {
            let p = argmax(logits.row(pos));
            writeln!(out, "prediction position={pos} token={}", split.name(p))?;
            predicted.push(split.name(p));
        }
    }
    let next = split.name(argmax(logits.row(tokens.len() - 1)));
    let wrote = retention_core::retention::gate_write(signal, &ret);
    store.bank = bank;
    store.updated = now_seconds();
    save_session(&store, &cli.session)?;
    let occupied: Vec<String> = store.bank.occupied_counts().iter().map(|n| n.to_string()).collect();
    writeln!(
        out,
        "predictions={} next={next} gate={} wrote={wrote} occupied={} session={}",
        if predicted.is_empty() { "-".into() } else { predicted.join(",") },
        gate_name(a.gate),
        occupied.join(","),
        cli.session.display()
    )?;
    Ok(())
}

fn cmd_memory(cli: &Cli, action: &MemoryCommand, out: &mut dyn Write) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&cli.checkpoint)?;
    match action {
        MemoryCommand::Inspect { top, query, machine } => {
            let store = load_session(&cli.session, ckpt.fingerprint())?;
            inspect(&store, &ckpt, *top, query.as_deref(), *machine, out)
        }
        MemoryCommand::Compact => {
            let _lock = SessionLock::acquire(&cli.session)?;
            let mut store = load_session(&cli.session, ckpt.fingerprint())?;
            let before = store.bank.occupied_counts();
            let layers = store
                .bank
                .layers()
                .iter()
                .map(|m| compact(m, &ckpt.retention))
                .collect();
            store.bank = MemoryBank::from_layers(layers)?;
            store.updated = now_seconds();
            save_session(&store, &cli.session)?;
            for (l, (b, a)) in before.iter().zip(store.bank.occupied_counts()).enumerate() {
                writeln!(out, "layer={l} occupied_before={b} occupied_after={a}")?;
            }
            Ok(())
        }
        MemoryCommand::Clear => {
            let _lock = SessionLock::acquire(&cli.session)?;
            let mut store = load_session(&cli.session, ckpt.fingerprint())?;
            store.bank = store.bank.cleared();
            store.updated = now_seconds();
            save_session(&store, &cli.session)?;
            for l in 0..store.bank.layers().len() {
                writeln!(out, "layer={l} occupied=0")?;
            }
            Ok(())
        }
    }
}

fn inspect(
    store: &SessionStore,
    ckpt: &Checkpoint,
    top: usize,
    query: Option<&str>,
    machine: bool,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    if !machine {
        writeln!(
            out,
            "fingerprint {:#018x}, created {}, updated {}",
            store.model_fingerprint, store.created, store.updated
        )?;
    }
    for (l, m) in store.bank.layers().iter().enumerate() {
        if machine {
            writeln!(
                out,
                "layer={l} occupied={} capacity={} next_seq={}",
                m.occupied_count(),
                m.capacity(),
                m.next_seq()
            )?;
        } else {
            writeln!(out, "layer {l}: {} occupied of {} slots", m.occupied_count(), m.capacity())?;
        }
        for i in (0..m.capacity()).filter(|&i| m.occupied()[i]) {
            if machine {
                writeln!(
                    out,
                    "slot layer={l} index={i} insert_seq={} usage={:.9}",
                    m.insert_seq()[i],
                    m.usage()[i]
                )?;
            } else {
                writeln!(out, "  slot {i:>3}  insert_seq {:>5}  usage {:.6}", m.insert_seq()[i], m.usage()[i])?;
            }
        }
    }
    if let Some(text) = query {
        let tokens = parse_tokens(ckpt, text)?;
        let queries = retention_queries(&tokens, &store.bank, &ckpt.params, &ckpt.model, &ckpt.retention)?;
        for (l, q) in queries.iter().enumerate() {
            let ranked = score_slots(q, store.bank.layer(l), &ckpt.params.blocks[l].ret, top)?;
            if !machine {
                writeln!(out, "layer {l}: top {} slots for {text:?}", ranked.len())?;
            }
            for (rank, (slot, w)) in ranked.iter().enumerate() {
                if machine {
                    writeln!(out, "score layer={l} rank={} slot={slot} weight={w:.9}", rank + 1)?;
                } else {
                    writeln!(out, "  #{} slot {slot} weight {w:.6}", rank + 1)?;
                }
            }
        }
    }
    Ok(())
}
