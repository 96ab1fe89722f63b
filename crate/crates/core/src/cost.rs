//! Analytical FLOPs and storage accounting for sharing one encoder across
//! many tasks.
//!
//! Per Transformer layer over `n` tokens of width `d`, counting a
//! multiply-add as two FLOPs and ignoring norms, softmax and biases:
//!
//! * Q, K, V and output projections: `4 · 2·n·d² = 8·n·d²`
//! * feed-forward with inner width `4d`: `2 · 2·n·d·4d = 16·n·d²`
//! * attention scores and mixing: `2 · 2·n²·d = 4·n²·d`
//!
//! so `flops = L · (24·n·d² + 4·n²·d)`.

use std::fmt::Write as _;
use std::io::Write;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::quant::QuantMode;
use crate::store::PoolingStage;

pub fn encoder_flops(config: &EncoderConfig, seq_len: usize) -> u64 {
    let (l, d, n) = (
        config.num_layers as u64,
        config.model_dim as u64,
        seq_len as u64,
    );
    l * (24 * n * d * d + 4 * n * n * d)
}

/// Stored bits per token, without Bit1 row padding. Raw layers exclude the
/// embedding output.
pub fn storage_per_token(stage: PoolingStage, config: &EncoderConfig, mode: QuantMode) -> u64 {
    let d = config.model_dim as u64;
    let bits = mode.bits_per_element() as u64;
    match stage {
        PoolingStage::RawLayers => config.num_layers as u64 * d * bits,
        PoolingStage::LayerPooled => d * bits,
    }
}

/// On-disk payload bytes for a document of `tokens` tokens, including the
/// byte alignment of each Bit1 row.
pub fn payload_bytes(
    stage: PoolingStage,
    config: &EncoderConfig,
    mode: QuantMode,
    tokens: usize,
) -> u64 {
    let d = config.model_dim as u64;
    let rows = match stage {
        PoolingStage::RawLayers => config.num_layers as u64 * tokens as u64,
        PoolingStage::LayerPooled => tokens as u64,
    };
    match mode {
        QuantMode::Bit1 => rows * d.div_ceil(8),
        _ => rows * d * mode.bits_per_element() as u64 / 8,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostScenario {
    pub full_config: EncoderConfig,
    pub distilled_config: EncoderConfig,
    /// Per-task pooling + head FLOPs as a fraction of the full encoder's.
    pub head_cost_fraction: f64,
    pub seq_len: usize,
    pub num_tasks: usize,
}

impl CostScenario {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.head_cost_fraction) {
            return Err(Error::Param(format!(
                "head cost fraction {} is outside [0, 1)",
                self.head_cost_fraction
            )));
        }
        if self.seq_len == 0 || self.num_tasks == 0 {
            return Err(Error::Param(
                "sequence length and task count must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn full_flops(&self) -> f64 {
        encoder_flops(&self.full_config, self.seq_len) as f64
    }

    pub fn distilled_flops(&self) -> f64 {
        encoder_flops(&self.distilled_config, self.seq_len) as f64
    }

    pub fn ratio(&self) -> f64 {
        self.full_flops() / self.distilled_flops()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    SingleTaskFull,
    SingleTaskDistilled,
    SharedFrozen,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [
        Strategy::SingleTaskFull,
        Strategy::SingleTaskDistilled,
        Strategy::SharedFrozen,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Strategy::SingleTaskFull => "single-full",
            Strategy::SingleTaskDistilled => "single-distilled",
            Strategy::SharedFrozen => "shared-frozen",
        }
    }
}

/// Cumulative inference FLOPs for `k` tasks on one text.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub k: usize,
    pub single_full: f64,
    pub single_distilled: f64,
    pub shared: f64,
}

impl CurvePoint {
    pub fn get(&self, s: Strategy) -> f64 {
        match s {
            Strategy::SingleTaskFull => self.single_full,
            Strategy::SingleTaskDistilled => self.single_distilled,
            Strategy::SharedFrozen => self.shared,
        }
    }
}

fn point(k: usize, full: f64, distilled: f64, head_frac: f64) -> CurvePoint {
    let kf = k as f64;
    CurvePoint {
        k,
        single_full: kf * full,
        single_distilled: kf * distilled,
        shared: full + kf * head_frac * full,
    }
}

pub fn cumulative_flops(scenario: &CostScenario) -> Result<Vec<CurvePoint>> {
    scenario.validate()?;
    let (full, dist) = (scenario.full_flops(), scenario.distilled_flops());
    Ok((1..=scenario.num_tasks)
        .map(|k| point(k, full, dist, scenario.head_cost_fraction))
        .collect())
}

/// Smallest `k ≤ max_k` where the shared encoder is strictly cheaper than
/// one distilled model per task.
pub fn break_even_from_flops(
    full: f64,
    distilled: f64,
    head_frac: f64,
    max_k: usize,
) -> Option<usize> {
    (1..=max_k).find(|&k| {
        let p = point(k, full, distilled, head_frac);
        p.shared < p.single_distilled
    })
}

pub fn break_even_tasks(scenario: &CostScenario) -> Result<Option<usize>> {
    scenario.validate()?;
    Ok(break_even_from_flops(
        scenario.full_flops(),
        scenario.distilled_flops(),
        scenario.head_cost_fraction,
        scenario.num_tasks,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StorageRow {
    pub pooling: &'static str,
    pub stage: PoolingStage,
    pub mode: QuantMode,
    pub bits_per_token: u64,
    pub doc_bytes: u64,
}

/// Storage for the full encoder's features over a `tokens`-token document.
pub fn storage_table(config: &EncoderConfig, tokens: usize) -> Vec<StorageRow> {
    let mut rows = Vec::new();
    for (pooling, stage) in [
        ("learned-comb (all layers)", PoolingStage::RawLayers),
        ("last / layer-avg", PoolingStage::LayerPooled),
    ] {
        for mode in [QuantMode::F32, QuantMode::F16, QuantMode::U8, QuantMode::Bit1] {
            rows.push(StorageRow {
                pooling,
                stage,
                mode,
                bits_per_token: storage_per_token(stage, config, mode),
                doc_bytes: payload_bytes(stage, config, mode, tokens),
            });
        }
    }
    rows
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub curve: Vec<CurvePoint>,
    pub break_even_k: Option<usize>,
    pub storage: Vec<StorageRow>,
    pub reference_tokens: usize,
}

impl CostReport {
    pub fn build(scenario: &CostScenario, reference_tokens: usize) -> Result<Self> {
        Ok(Self {
            curve: cumulative_flops(scenario)?,
            break_even_k: break_even_tasks(scenario)?,
            storage: storage_table(&scenario.full_config, reference_tokens),
            reference_tokens,
        })
    }

    /// `k,strategy,flops` rows; a final `break-even` row carries the
    /// break-even task count and the shared cost there.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "k,strategy,flops")?;
        for p in &self.curve {
            for s in Strategy::ALL {
                writeln!(out, "{},{},{:.0}", p.k, s.label(), p.get(s))?;
            }
        }
        match self.break_even_k {
            Some(k) => writeln!(out, "{k},break-even,{:.0}", self.curve[k - 1].shared)?,
            None => writeln!(out, "none,break-even,")?,
        }
        Ok(())
    }

    pub fn storage_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<28} {:<12} {:>5} {:>12} {:>14}",
            "pooling",
            "stage",
            "bits",
            "bits/token",
            format!("bytes@{}tok", self.reference_tokens)
        );
        for r in &self.storage {
            let stage = match r.stage {
                PoolingStage::RawLayers => "raw-layers",
                PoolingStage::LayerPooled => "layer-pooled",
            };
            let _ = writeln!(
                s,
                "{:<28} {:<12} {:>5} {:>12} {:>14}",
                r.pooling,
                stage,
                r.mode.bits_per_element(),
                r.bits_per_token,
                r.doc_bytes
            );
        }
        s
    }
}
