//! Seed-suite experiments: baseline training, the loss-combination ablation
//! and the pruning-rate sweep.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{Dataset, Split};
use crate::error::Result;
use crate::losses::LossSet;
use crate::metrics::evaluate;
use crate::network::Network;
use crate::pruner::{prune_layers, prune_model, PruneConfig, PruneReport};
use crate::table::Table;
use crate::training::{train, EpochLog};

/// Generates (or loads) the data and trains the reference network for
/// `cfg.seed`.
pub fn train_baseline(cfg: &ExperimentConfig) -> Result<(Dataset, Network, Vec<EpochLog>)> {
    cfg.validate()?;
    let data = cfg.dataset(cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1417_0000);
    let mut net = Network::reference(data.image_shape(), data.classes, cfg.widths, &mut rng)?;
    let mut train_cfg = cfg.train;
    train_cfg.seed = cfg.seed;
    let log = train(&mut net, &data, &train_cfg)?;
    Ok((data, net, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub losses: LossSet,
    pub train_error: f64,
    pub test_error: f64,
}

/// Prunes `base` once per loss combination (masked, no fine-tuning) and
/// reports the resulting errors.
pub fn ablation_rows(base: &Network, data: &Dataset, cfg: &PruneConfig, sets: &[LossSet]) -> Result<Vec<AblationRow>> {
    sets.iter()
        .map(|&losses| {
            let c = PruneConfig {
                enabled_losses: losses,
                ..*cfg
            };
            let (masked, _) = prune_layers(base, &c, data)?;
            Ok(AblationRow {
                losses,
                train_error: evaluate(&masked, data, Split::Train)?,
                test_error: evaluate(&masked, data, Split::Test)?,
            })
        })
        .collect()
}

/// All seven loss combinations.
pub fn run_ablation(base: &Network, data: &Dataset, cfg: &PruneConfig) -> Result<Vec<AblationRow>> {
    ablation_rows(base, data, cfg, &LossSet::combinations())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedAblation {
    pub seed: u64,
    pub baseline_train_error: f64,
    pub baseline_test_error: f64,
    pub rows: Vec<AblationRow>,
}

pub fn ablation_for_seed(cfg: &ExperimentConfig, seed: u64, sets: &[LossSet]) -> Result<SeedAblation> {
    let cfg = cfg.with_seed(seed);
    let (data, base, _) = train_baseline(&cfg)?;
    Ok(SeedAblation {
        seed,
        baseline_train_error: evaluate(&base, &data, Split::Train)?,
        baseline_test_error: evaluate(&base, &data, Split::Test)?,
        rows: ablation_rows(&base, &data, &cfg.prune, sets)?,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// Mean error per loss combination over seeds.
pub fn ablation_table(results: &[SeedAblation]) -> Table {
    let mut t = Table::new(["losses", "train_err_pct", "test_err_pct", "seeds"]);
    let Some(first) = results.first() else { return t };
    for (i, row) in first.rows.iter().enumerate() {
        t.push([
            row.losses.label(),
            pct(mean(results.iter().map(|r| r.rows[i].train_error))),
            pct(mean(results.iter().map(|r| r.rows[i].test_error))),
            results.len().to_string(),
        ]);
    }
    t
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub rate: f64,
    pub masked_test_error: f64,
    pub test_error: f64,
    pub param_ratio: f64,
    pub flops_ratio: f64,
}

/// Runs the full pipeline (with fine-tuning) at each pruning rate.
pub fn rate_sweep(
    base: &Network,
    data: &Dataset,
    cfg: &PruneConfig,
    rates: &[f64],
) -> Result<Vec<(RatePoint, PruneReport)>> {
    rates
        .iter()
        .map(|&rate| {
            let c = PruneConfig { rate, ..*cfg };
            let (_, report) = prune_model(base, &c, data)?;
            let point = RatePoint {
                rate,
                masked_test_error: report.masked_test_error,
                test_error: report.pruned_test_error,
                param_ratio: report.compression.param_ratio,
                flops_ratio: report.compression.flops_ratio,
            };
            Ok((point, report))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSweep {
    pub seed: u64,
    pub baseline_test_error: f64,
    pub points: Vec<RatePoint>,
    pub reports: Vec<PruneReport>,
}

pub fn rate_sweep_for_seed(cfg: &ExperimentConfig, seed: u64, rates: &[f64]) -> Result<SeedSweep> {
    let cfg = cfg.with_seed(seed);
    let (data, base, _) = train_baseline(&cfg)?;
    let (points, reports) = rate_sweep(&base, &data, &cfg.prune, rates)?.into_iter().unzip();
    Ok(SeedSweep {
        seed,
        baseline_test_error: evaluate(&base, &data, Split::Test)?,
        points,
        reports,
    })
}

pub fn rate_table(results: &[SeedSweep]) -> Table {
    let mut t = Table::new([
        "rate_pct",
        "masked_test_err_pct",
        "test_err_pct",
        "param_ratio",
        "flops_ratio",
        "seeds",
    ]);
    let Some(first) = results.first() else { return t };
    for (i, p) in first.points.iter().enumerate() {
        t.push([
            format!("{:.0}", 100.0 * p.rate),
            pct(mean(results.iter().map(|r| r.points[i].masked_test_error))),
            pct(mean(results.iter().map(|r| r.points[i].test_error))),
            format!("{:.2}", mean(results.iter().map(|r| r.points[i].param_ratio))),
            format!("{:.2}", mean(results.iter().map(|r| r.points[i].flops_ratio))),
            results.len().to_string(),
        ]);
    }
    t
}
