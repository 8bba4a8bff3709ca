//! Command-line entry points.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::backbone::MlpBackbone;
use crate::config::RunConfig;
use crate::data;
use crate::error::{Error, Result};
use crate::oracle;
use crate::projector::AlphaSchedule;
use crate::trainer::{self, RunReport};

#[derive(Debug, Parser)]
#[command(name = "orthocl", version, about = "Continual learning with projected HSIC training and an equiangular classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML configuration file (built-in defaults when omitted).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Master seed (overrides the configured one).
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        match &self.config {
            Some(path) => RunConfig::load(path, &overrides),
            None => RunConfig::from_toml_with_overrides("", &overrides),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train over the task sequence and write report, rank traces and checkpoint.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "out/run")]
        out: PathBuf,
        /// Repetitions with consecutive master seeds.
        #[arg(long, default_value_t = 1)]
        reps: u64,
    },
    /// Compare the plain fc, projected fc and equiangular heads.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "out/ablation")]
        out: PathBuf,
    },
    /// Generate a basis-vector set and write it to a file.
    EbvGen {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "out/basis.bin")]
        out: PathBuf,
    },
    /// Train and record projector ranks; optionally against a run without
    /// the HSIC objective.
    RankTrace {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "out/rank")]
        out: PathBuf,
        /// Also train with `train.mu = 0` and compare final ranks.
        #[arg(long)]
        baseline: bool,
    },
    /// Run oracle suites: hsic, projector, backbone, ebv or all.
    Oracle {
        #[arg(default_value = "all")]
        suite: String,
        /// Write results as JSON into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write `label, z_1..z_d` rows for a dataset split.
    ExportEmbeddings {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value = "out/embeddings.csv")]
        out: PathBuf,
    },
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize)]
struct RepetitionSummary {
    seeds: Vec<u64>,
    average_accuracies: Vec<f64>,
    mean: f64,
    std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn run_once(cfg: &RunConfig, out: &Path) -> Result<RunReport> {
    ensure_dir(out)?;
    let (report, outcome) = trainer::run_experiment(cfg)?;
    write_json(&out.join("report.json"), &report)?;
    trainer::save_rank_traces(&outcome.rank_traces, out)?;
    outcome.backbone.save_checkpoint(&out.join("model.cldn"))?;
    println!("average accuracy {:.4}, forgetting {:.4} -> {}", report.average_accuracy, report.forgetting, out.display());
    Ok(report)
}

pub fn cmd_run(args: &ConfigArgs, out: &Path, reps: u64) -> Result<()> {
    let base = args.resolve()?;
    if reps <= 1 {
        run_once(&base, out)?;
        return Ok(());
    }
    let mut seeds = Vec::new();
    let mut accs = Vec::new();
    for r in 0..reps {
        let cfg = RunConfig { seed: base.seed + r, ..base.clone() };
        let report = run_once(&cfg, &out.join(format!("seed{}", cfg.seed)))?;
        seeds.push(cfg.seed);
        accs.push(report.average_accuracy);
    }
    let (mean, std) = mean_std(&accs);
    println!("mean average accuracy {mean:.4} ± {std:.4} over {reps} seeds");
    write_json(&out.join("summary.json"), &RepetitionSummary { seeds, average_accuracies: accs, mean, std })
}

pub fn cmd_ablate(args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = args.resolve()?;
    ensure_dir(out)?;
    let report = trainer::run_ablation(&cfg)?;
    for v in &report.variants {
        println!("{:>13}: {:.4}", v.head.name(), v.average_accuracy);
    }
    println!("strictly ordered: {}", report.strictly_ordered);
    write_json(&out.join("ablation.json"), &report)
}

pub fn cmd_ebv_gen(args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = args.resolve()?;
    let set = trainer::load_basis(&cfg)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    set.save(out)?;
    let (cos, (i, j)) = set.max_abs_cosine();
    println!("d={} C={} gamma={} max |cos| {cos:.6} at ({i}, {j}) -> {}", set.dim(), set.capacity(), set.gamma(), out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct RankComparison {
    hsic_final_ranks: Vec<usize>,
    baseline_final_ranks: Vec<usize>,
    hsic_at_least_baseline: bool,
    non_increasing: Vec<bool>,
}

pub fn cmd_rank_trace(args: &ConfigArgs, out: &Path, baseline: bool) -> Result<()> {
    let cfg = args.resolve()?;
    ensure_dir(out)?;
    let (report, outcome) = trainer::run_experiment(&cfg)?;
    trainer::save_rank_traces(&outcome.rank_traces, out)?;
    write_json(&out.join("report.json"), &report)?;
    let non_increasing: Vec<bool> = outcome.rank_traces.iter().map(|t| t.is_non_increasing()).collect();
    println!("final ranks {:?}, non-increasing {:?}", report.final_ranks, non_increasing);
    if baseline {
        let mut base_cfg = cfg.clone();
        base_cfg.train.mu = 0.0;
        let dir = out.join("baseline");
        ensure_dir(&dir)?;
        let (base_report, base_outcome) = trainer::run_experiment(&base_cfg)?;
        trainer::save_rank_traces(&base_outcome.rank_traces, &dir)?;
        write_json(&dir.join("report.json"), &base_report)?;
        let cmp = RankComparison {
            hsic_at_least_baseline: report.final_ranks.iter().zip(&base_report.final_ranks).all(|(a, b)| a >= b),
            hsic_final_ranks: report.final_ranks,
            baseline_final_ranks: base_report.final_ranks,
            non_increasing,
        };
        println!("baseline final ranks {:?}, hsic >= baseline: {}", cmp.baseline_final_ranks, cmp.hsic_at_least_baseline);
        write_json(&out.join("rank_comparison.json"), &cmp)?;
    }
    Ok(())
}

/// Returns whether every oracle passed.
pub fn cmd_oracle(suite: &str, out: Option<&Path>) -> Result<bool> {
    let results = oracle::run_suite(suite)?;
    for r in &results {
        println!("{r}");
    }
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_json(&dir.join(format!("oracle_{suite}.json")), &results)?;
    }
    Ok(results.iter().all(|r| r.passed))
}

pub fn cmd_export_embeddings(args: &ConfigArgs, checkpoint: &Path, split: SplitArg, out: &Path) -> Result<()> {
    let cfg = args.resolve()?;
    let model = MlpBackbone::load_checkpoint(checkpoint, cfg.projector.alpha0, AlphaSchedule::Constant)?;
    let (train, test) = data::load_dataset_dir(&cfg.dataset.dir)?;
    let (train, test) = data::normalize(&train, &test, cfg.dataset.normalize);
    let set = match split {
        SplitArg::Train => train,
        SplitArg::Test => test,
    };
    if set.features() != model.input_dim() {
        return Err(Error::Consistency(format!(
            "checkpoint expects {} input features, dataset has {}",
            model.input_dim(),
            set.features()
        )));
    }
    let z = model.embed(set.images.view(), 1000)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    let file = std::fs::File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = std::io::BufWriter::new(file);
    let write = |w: &mut std::io::BufWriter<std::fs::File>| -> std::io::Result<()> {
        write!(w, "label")?;
        for k in 0..z.ncols() {
            write!(w, ",z{k}")?;
        }
        writeln!(w)?;
        for (row, label) in z.outer_iter().zip(&set.labels) {
            write!(w, "{label}")?;
            for v in row {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        w.flush()
    };
    write(&mut w).map_err(|e| Error::io(out, e))?;
    println!("{} rows x {} columns -> {}", z.nrows(), z.ncols() + 1, out.display());
    Ok(())
}

/// Dispatches a parsed command line and maps the outcome to an exit code:
/// 0 success, 2 usage or configuration, 3 numerical failure.
pub fn execute(cli: Cli) -> i32 {
    let outcome = match &cli.command {
        Command::Run { config, out, reps } => cmd_run(config, out, *reps).map(|_| true),
        Command::Ablate { config, out } => cmd_ablate(config, out).map(|_| true),
        Command::EbvGen { config, out } => cmd_ebv_gen(config, out).map(|_| true),
        Command::RankTrace { config, out, baseline } => cmd_rank_trace(config, out, *baseline).map(|_| true),
        Command::Oracle { suite, out } => cmd_oracle(suite, out.as_deref()),
        Command::ExportEmbeddings { config, checkpoint, split, out } => {
            cmd_export_embeddings(config, checkpoint, *split, out).map(|_| true)
        }
    };
    match outcome {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn main() -> i32 {
    execute(Cli::parse())
}
