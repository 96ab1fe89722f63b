//! Command-line pipeline: suite generation, pretraining, extraction, head
//! training, evaluation, leave-one-task-out runs and cost reports.
//!
//! Exit codes: 0 success, 1 usage, 2 data or format, 3 training.

mod commands;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::pooling::PoolingChoice;
use crate::quant::{QuantMode, QuantOrder};
use crate::store::PoolingStage;
use crate::training::TrainConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;

/// Written to every output directory.
pub const MANIFEST: &str = "manifest.json";
pub const THREADS_ENV: &str = "AMORTENC_THREADS";

#[derive(Parser, Debug)]
#[command(name = "amortenc", version, about = "Shared frozen encoder for many classification tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a planted-motif task suite.
    GenTasks(GenTasksArgs),
    /// Multi-task pretraining of an encoder.
    PretrainMt(PretrainArgs),
    /// Encode a suite and write a feature store.
    Extract(ExtractArgs),
    /// Train one task head on frozen features.
    TrainHead(TrainHeadArgs),
    /// Dev accuracy of a trained head.
    Eval(EvalArgs),
    /// Leave-one-task-out protocol.
    Loto(LotoArgs),
    /// FLOPs curves, break-even task count and storage table.
    CostReport(CostArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GenTasksArgs {
    #[arg(long)]
    pub num: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training-set size per task, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 200)]
    pub dev_size: usize,
    #[arg(long, default_value_t = 64)]
    pub vocab: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct EncoderArgs {
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Feed-forward width (default 4 × dim).
    #[arg(long)]
    pub ffn: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub vocab: usize,
    #[arg(long, default_value_t = 64)]
    pub max_positions: usize,
}

impl EncoderArgs {
    pub fn config(&self, seed: u64) -> EncoderConfig {
        let mut c = EncoderConfig::new(self.layers, self.dim, self.heads)
            .with_vocab(self.vocab)
            .with_max_positions(self.max_positions)
            .with_seed(seed);
        if let Some(f) = self.ffn {
            c.ffn_dim = f;
        }
        c
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct StepArgs {
    #[arg(long, default_value_t = TrainConfig::pretraining().steps)]
    pub steps: usize,
    #[arg(long, default_value_t = TrainConfig::pretraining().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::pretraining().learning_rate)]
    pub lr: f64,
    #[arg(long, default_value_t = TrainConfig::pretraining().temperature)]
    pub temperature: f64,
}

impl StepArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            temperature: self.temperature,
            seed,
            ..TrainConfig::pretraining()
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct HeadStepArgs {
    #[arg(long, default_value_t = TrainConfig::default().steps)]
    pub head_steps: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub head_batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    pub head_lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().eval_every)]
    pub eval_every: usize,
}

impl HeadStepArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.head_steps,
            batch_size: self.head_batch_size,
            learning_rate: self.head_lr,
            eval_every: self.eval_every,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct PretrainArgs {
    #[arg(long)]
    pub suite: PathBuf,
    /// Task left out of pretraining; repeatable.
    #[arg(long = "hold-out")]
    pub hold_out: Vec<String>,
    #[arg(long, default_value = "layer-avg,mha")]
    #[serde(serialize_with = "as_string")]
    pub pooling: PoolingChoice,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[command(flatten)]
    pub train: StepArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageArg {
    Raw,
    Pooled,
}

impl From<StageArg> for PoolingStage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Raw => PoolingStage::RawLayers,
            StageArg::Pooled => PoolingStage::LayerPooled,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ExtractArgs {
    #[arg(long)]
    pub suite: PathBuf,
    #[arg(long)]
    pub encoder: PathBuf,
    /// Restrict to these tasks; repeatable.
    #[arg(long = "task")]
    pub tasks: Vec<String>,
    #[arg(long, value_enum, default_value_t = StageArg::Pooled)]
    pub stage: StageArg,
    /// Layer pooling applied before storage (pooled stage only).
    #[arg(long, default_value = "layer-avg,mha")]
    #[serde(serialize_with = "as_string")]
    pub pooling: PoolingChoice,
    #[arg(long, default_value = "f32")]
    #[serde(serialize_with = "as_string")]
    pub quant: QuantMode,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainHeadArgs {
    #[arg(long)]
    pub suite: PathBuf,
    #[arg(long)]
    pub task: String,
    #[arg(long, default_value = "layer-avg,mha")]
    #[serde(serialize_with = "as_string")]
    pub pooling: PoolingChoice,
    #[arg(long, default_value = "f32")]
    #[serde(serialize_with = "as_string")]
    pub quant: QuantMode,
    #[arg(long, default_value = "after")]
    #[serde(serialize_with = "as_string")]
    pub order: QuantOrder,
    /// Encoder checkpoint to extract features from.
    #[arg(long, conflicts_with = "from_store", required_unless_present = "from_store")]
    pub from_encoder: Option<PathBuf>,
    /// Feature store written by `extract`.
    #[arg(long)]
    pub from_store: Option<PathBuf>,
    /// Checks store fingerprints against this encoder.
    #[arg(long, requires = "from_store")]
    pub encoder: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub train: HeadStepArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub suite: PathBuf,
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub encoder: PathBuf,
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct LotoArgs {
    #[arg(long)]
    pub suite: PathBuf,
    #[arg(long, default_value = "layer-avg,mha")]
    #[serde(serialize_with = "as_string")]
    pub pooling: PoolingChoice,
    /// One or more schemes, comma separated; each gets its own head.
    #[arg(long, value_delimiter = ',', default_value = "f32")]
    #[serde(serialize_with = "all_as_string")]
    pub quant: Vec<QuantMode>,
    #[arg(long, default_value = "after")]
    #[serde(serialize_with = "as_string")]
    pub order: QuantOrder,
    /// Number of seeds, run as 0..N.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Hold out whole task families instead of single tasks.
    #[arg(long, conflicts_with = "all_tasks")]
    pub hold_out_family: bool,
    /// Pretrain on every task (no task is unseen).
    #[arg(long)]
    pub all_tasks: bool,
    /// Skip pretraining: frozen randomly initialized encoder.
    #[arg(long)]
    pub random_encoder: bool,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[command(flatten)]
    pub train: StepArgs,
    #[command(flatten)]
    pub head: HeadStepArgs,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_shape(s: &str) -> std::result::Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into()
        .map_err(|_| format!("expected L,d,h, got {s:?}"))
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct CostArgs {
    /// Full encoder as L,d,h.
    #[arg(long, value_parser = parse_shape)]
    pub full: [usize; 3],
    /// Distilled encoder as L,d,h.
    #[arg(long, value_parser = parse_shape)]
    pub distilled: [usize; 3],
    #[arg(long)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 0.005)]
    pub head_frac: f64,
    #[arg(long, default_value_t = 20)]
    pub max_k: usize,
    /// Document length for the storage table.
    #[arg(long, default_value_t = 50)]
    pub ref_tokens: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn as_string<T: std::fmt::Display, S: serde::Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&v.to_string())
}

fn all_as_string<T: std::fmt::Display, S: serde::Serializer>(
    v: &[T],
    s: S,
) -> Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|x| x.to_string()))
}

/// Provenance of one run; reproduces it when replayed.
#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub version: String,
}

pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

pub(crate) fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::Param(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST), text + "\n")?;
    Ok(())
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        Error::Training { .. } => EXIT_TRAINING,
        _ => EXIT_DATA,
    }
}

fn init_threads() {
    if let Some(n) = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        // Fails only if the pool already exists, e.g. a second call in-process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Runs one command; `argv` excludes the program name.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(std::iter::once("amortenc".to_string()).chain(argv.clone())) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_threads();
    match commands::dispatch(cli.command, &argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
