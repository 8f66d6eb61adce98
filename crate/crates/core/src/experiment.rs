//! Runs the method and its ablations on preprocessed two-domain data and
//! collects source/target test metrics.

use serde::{Deserialize, Serialize};

use crate::data::{preprocess, Dataset, RawDataset, ScalerStats, SynthData, SOURCE, TARGET};
use crate::error::Result;
use crate::metrics::MetricReport;
use crate::nn::TcnConfig;
use crate::pipeline::{evaluate, train, TrainConfig, TrainOutcome, Variant};

/// The six splits after preprocessing with source-train statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSplits {
    pub source_train: Dataset,
    pub source_val: Dataset,
    pub source_test: Dataset,
    pub target_train: Dataset,
    pub target_val: Dataset,
    pub target_test: Dataset,
    pub stats: ScalerStats,
}

impl DomainSplits {
    /// Fits the scaler on `source_train` only and applies it everywhere.
    pub fn from_raw(raw: [&RawDataset; 6], history: usize) -> Result<Self> {
        let (source_train, stats) = preprocess(raw[0], None, history, SOURCE)?;
        let with = |r: &RawDataset, d| preprocess(r, Some(&stats), history, d).map(|(x, _)| x);
        Ok(DomainSplits {
            source_val: with(raw[1], SOURCE)?,
            source_test: with(raw[2], SOURCE)?,
            target_train: with(raw[3], TARGET)?,
            target_val: with(raw[4], TARGET)?,
            target_test: with(raw[5], TARGET)?,
            source_train,
            stats,
        })
    }

    pub fn from_synth(data: &SynthData, history: usize) -> Result<Self> {
        let s = data.splits();
        Self::from_raw([s[0].1, s[1].1, s[2].1, s[3].1, s[4].1, s[5].1], history)
    }
}

/// Test metrics of one trained variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub seed: u64,
    pub best_step: u64,
    pub best_val_metric: f64,
    pub steps_run: u64,
    pub source_test: MetricReport,
    pub target_test: MetricReport,
}

/// Trains `variant` of `base` (with `seed`) and evaluates both test sets.
pub fn run_variant(
    splits: &DomainSplits,
    base: &TrainConfig,
    variant: Variant,
    seed: u64,
) -> Result<(RunSummary, TrainOutcome)> {
    let mut config = base.clone();
    variant.apply(&mut config);
    config.seed = seed;
    let outcome = train(
        &config,
        &splits.source_train,
        &splits.source_val,
        &splits.target_train,
        None,
    )?;
    let summary = RunSummary {
        variant,
        seed,
        best_step: outcome.best_step,
        best_val_metric: outcome.best_metric,
        steps_run: outcome.steps_run,
        source_test: evaluate(&outcome.model, &splits.source_test, config.task)?,
        target_test: evaluate(&outcome.model, &splits.target_test, config.task)?,
    };
    Ok((summary, outcome))
}

/// Small model and schedule used for the synthetic benchmark: five dilated
/// layers (receptive field 63) of narrow width, few hundred steps.
pub fn desk_config(in_channels: usize, history: usize) -> TrainConfig {
    TrainConfig {
        tcn: TcnConfig {
            in_channels,
            channels: 16,
            max_history: history,
            ..TcnConfig::default()
        },
        hidden_dim: 32,
        learning_rate: 1e-3,
        max_steps: 400,
        eval_interval: 50,
        patience: 4,
        ..TrainConfig::default()
    }
}

/// Mean test metrics of one variant over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantMean {
    pub variant: Variant,
    pub seeds: usize,
    pub source_test: f64,
    pub target_test: f64,
}

/// Every (seed, variant) run of a benchmark and the per-variant means of the
/// primary metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub runs: Vec<RunSummary>,
    pub means: Vec<VariantMean>,
}

impl BenchmarkReport {
    pub fn mean(&self, variant: Variant) -> Option<&VariantMean> {
        self.means.iter().find(|m| m.variant == variant)
    }

    /// `(seed, target metric)` of `variant`, in seed order of the runs.
    pub fn target_by_seed(&self, variant: Variant) -> Vec<(u64, f64)> {
        self.runs
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| (r.seed, r.target_test.primary()))
            .collect()
    }
}

/// Trains each variant once per seed on the same splits.
pub fn run_benchmark(
    splits: &DomainSplits,
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<BenchmarkReport> {
    let mut runs = Vec::with_capacity(variants.len() * seeds.len());
    for &seed in seeds {
        for &variant in variants {
            let (summary, _) = run_variant(splits, base, variant, seed)?;
            log::info!(
                "seed {seed} {}: source {:.4} target {:.4}",
                variant.as_str(),
                summary.source_test.primary(),
                summary.target_test.primary()
            );
            runs.push(summary);
        }
    }
    let means = variants
        .iter()
        .map(|&variant| {
            let mine: Vec<&RunSummary> = runs.iter().filter(|r| r.variant == variant).collect();
            let n = mine.len().max(1) as f64;
            VariantMean {
                variant,
                seeds: mine.len(),
                source_test: mine.iter().map(|r| r.source_test.primary()).sum::<f64>() / n,
                target_test: mine.iter().map(|r| r.target_test.primary()).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(BenchmarkReport { runs, means })
}
