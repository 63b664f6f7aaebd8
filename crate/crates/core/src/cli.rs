//! Command-line front end. The `chanprune` binary is a thin wrapper around
//! [`run`].

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::experiment::{self, ablation_table, rate_table};
use crate::format;
use crate::gradcheck;
use crate::losses::LossSet;
use crate::metrics::{count_flops, count_params, evaluate};
use crate::pruner::{prune_model, PruneReport};
use crate::table::Table;

#[derive(Debug, Parser)]
#[command(name = "chanprune", version, about = "Multi-loss-aware channel pruning for small CNNs")]
struct Cli {
    /// Flat key = value configuration file applied before flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Default)]
struct Common {
    /// `synth` or a CIFAR-10 binary directory.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    /// Comma list of enabled losses: r, s, c.
    #[arg(long)]
    losses: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Baseline training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    refit_epochs: Option<usize>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any other config key, as key=value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the reference network; writes baseline.prnk.
    Train(Common),
    /// Prune a trained model; writes pruned.prnk, report.json and loss curves.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Report error rates, parameters and FLOPs of a model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Seven-row loss-combination ablation (masked, no fine-tuning).
    Ablation {
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Test error across pruning rates.
    RateSweep {
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,0.7")]
        rates: Vec<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference gradient suite; exits nonzero on any failure.
    CheckGrad {
        #[arg(long, default_value_t = gradcheck::CASES)]
        seeds: usize,
    },
    /// Render a report.json as text tables.
    Report {
        #[arg(long)]
        report: PathBuf,
    },
}

impl Common {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k.to_string(), v));
            }
        };
        put("data", self.data.clone());
        put("rate", self.rate.map(|v| v.to_string()));
        put("alpha", self.alpha.map(|v| v.to_string()));
        put("beta", self.beta.map(|v| v.to_string()));
        put("eta", self.eta.map(|v| v.to_string()));
        put("losses", self.losses.clone());
        put("seed", self.seed.map(|v| v.to_string()));
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("refit_epochs", self.refit_epochs.map(|v| v.to_string()));
        put("finetune_epochs", self.finetune_epochs.map(|v| v.to_string()));
        put("out", self.out.as_ref().map(|p| p.display().to_string()));
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{s}'")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        // `data` resets dataset-specific keys, so it goes first.
        pairs.sort_by_key(|(k, _)| k != "data");
        for (k, v) in pairs {
            cfg.set(&k, &v)?;
        }
        Ok(())
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn config_for(cli_config: &Option<PathBuf>, common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match cli_config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    common.apply(&mut cfg)?;
    cfg = cfg.with_seed(cfg.seed);
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code. Diagnostics go to `stderr` as a single line.
pub fn run<I, S>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            let text = e.to_string();
            let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            let _ = writeln!(stderr, "{}", line.trim());
            return 2;
        }
    };
    match execute(cli, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    let w = |out: &mut dyn Write, s: String| {
        let _ = writeln!(out, "{s}");
    };
    match &cli.command {
        Command::Train(common) => {
            let cfg = config_for(&cli.config, common)?;
            ensure_dir(&cfg.out)?;
            let (data, net, log) = experiment::train_baseline(&cfg)?;
            let path = cfg.out.join("baseline.prnk");
            format::save(&net, &path)?;
            let mut t = Table::new(["epoch", "lr", "loss", "train_err", "test_err"]);
            for e in &log {
                t.push([
                    e.epoch.to_string(),
                    format!("{:.5}", e.lr),
                    format!("{:.6}", e.loss),
                    format!("{:.4}", e.train_error),
                    e.test_error.map(|v| format!("{v:.4}")).unwrap_or_default(),
                ]);
            }
            write_file(&cfg.out.join("train_log.csv"), &t.to_csv())?;
            w(out, t.render());
            w(
                out,
                format!(
                    "baseline test error {:.2}% -> {}",
                    100.0 * evaluate(&net, &data, Split::Test)?,
                    path.display()
                ),
            );
        }
        Command::Prune { model, common } => {
            let cfg = config_for(&cli.config, common)?;
            ensure_dir(&cfg.out)?;
            let base = format::load(model)?;
            let data = cfg.dataset(cfg.seed)?;
            let (pruned, report) = prune_model(&base, &cfg.prune, &data)?;
            format::save(&pruned, cfg.out.join("pruned.prnk"))?;
            report.write(&cfg.out)?;
            w(out, render_report(&report));
        }
        Command::Eval { model, common } => {
            let cfg = config_for(&cli.config, common)?;
            let net = format::load(model)?;
            let data = cfg.dataset(cfg.seed)?;
            w(out, format!("train error  {:.2}%", 100.0 * evaluate(&net, &data, Split::Train)?));
            w(out, format!("test error   {:.2}%", 100.0 * evaluate(&net, &data, Split::Test)?));
            w(out, format!("params       {}", count_params(&net)));
            w(out, format!("flops        {}", count_flops(&net, net.input_shape())?));
        }
        Command::Ablation { seeds, common } => {
            let cfg = config_for(&cli.config, common)?;
            ensure_dir(&cfg.out)?;
            let mut results = Vec::new();
            for seed in cfg.seed..cfg.seed + seeds {
                let r = experiment::ablation_for_seed(&cfg, seed, &LossSet::combinations())?;
                w(out, format!("seed {seed}: baseline test error {:.2}%", 100.0 * r.baseline_test_error));
                results.push(r);
            }
            let t = ablation_table(&results);
            write_file(&cfg.out.join("ablation.csv"), &t.to_csv())?;
            write_file(&cfg.out.join("ablation.txt"), &t.render())?;
            write_file(&cfg.out.join("ablation.json"), &serde_json::to_string_pretty(&results)?)?;
            w(out, t.render());
        }
        Command::RateSweep { seeds, rates, common } => {
            let cfg = config_for(&cli.config, common)?;
            ensure_dir(&cfg.out)?;
            let mut results = Vec::new();
            for seed in cfg.seed..cfg.seed + seeds {
                let r = experiment::rate_sweep_for_seed(&cfg, seed, rates)?;
                w(out, format!("seed {seed}: baseline test error {:.2}%", 100.0 * r.baseline_test_error));
                results.push(r);
            }
            let t = rate_table(&results);
            write_file(&cfg.out.join("rate_sweep.csv"), &t.to_csv())?;
            write_file(&cfg.out.join("rate_sweep.txt"), &t.render())?;
            w(out, t.render());
        }
        Command::CheckGrad { seeds } => {
            let checks = gradcheck::run_suite(*seeds)?;
            let mut t = Table::new(["op", "cases", "max_rel_err", "result"]);
            for c in &checks {
                t.push([
                    c.op.to_string(),
                    c.cases.to_string(),
                    format!("{:.3e}", c.max_rel_error),
                    if c.passed { "ok" } else { "FAIL" }.to_string(),
                ]);
            }
            w(out, t.render());
            if checks.iter().any(|c| !c.passed) {
                return Ok(3);
            }
        }
        Command::Report { report } => {
            let text = std::fs::read_to_string(report).map_err(|e| Error::io(report, e))?;
            w(out, render_report(&PruneReport::from_json(&text)?));
        }
    }
    Ok(0)
}

/// Human-readable summary of a pruning run.
pub fn render_report(r: &PruneReport) -> String {
    let mut layers = Table::new(["layer", "channels", "kept", "initial_loss", "final_loss"]);
    for l in &r.layers {
        let first = l.curve.first().map(|b| format!("{:.5}", b.total)).unwrap_or_else(|| "-".into());
        let last = l.curve.last().map(|b| format!("{:.5}", b.total)).unwrap_or_else(|| "-".into());
        layers.push([
            l.layer.to_string(),
            l.channels_before.to_string(),
            l.channels_after.to_string(),
            first,
            last,
        ]);
    }
    let c = &r.compression;
    let mut summary = Table::new(["metric", "before", "after", "ratio"]);
    summary.push([
        "#params".to_string(),
        c.params_before.to_string(),
        c.params_after.to_string(),
        format!("{:.2}x", c.param_ratio),
    ]);
    summary.push([
        "#FLOPs".to_string(),
        c.flops_before.to_string(),
        c.flops_after.to_string(),
        format!("{:.2}x", c.flops_ratio),
    ]);
    let mut errors = Table::new(["model", "train_err_pct", "test_err_pct"]);
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    errors.push(["baseline".into(), pct(r.baseline_train_error), pct(r.baseline_test_error)]);
    errors.push(["masked".into(), pct(r.masked_train_error), pct(r.masked_test_error)]);
    errors.push(["pruned+finetuned".to_string(), pct(r.pruned_train_error), pct(r.pruned_test_error)]);
    format!(
        "rate {} losses {} alpha {} beta {}\n\n{}\n{}\n{}",
        r.config.rate,
        r.config.enabled_losses.label(),
        r.config.weights.alpha,
        r.config.weights.beta,
        layers.render(),
        summary.render(),
        errors.render()
    )
}
