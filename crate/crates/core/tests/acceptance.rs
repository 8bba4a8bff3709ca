//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs the shipped MNIST and FashionMNIST configs over five seeds, the head
//! ablation, the oracle suites, and the rank comparison. Exits non-zero when
//! any criterion fails.

use std::path::{Path, PathBuf};
use std::time::Instant;

use orthocl::config::{HeadKind, RunConfig};
use orthocl::oracle::{self, OracleResult};
use orthocl::projector::AlphaSchedule;
use orthocl::trainer::{run_experiment, RunReport};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const SEED_BUDGET_SECONDS: f64 = 30.0 * 60.0;

struct Verdict {
    id: &'static str,
    passed: bool,
    detail: String,
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().expect("workspace root")
}

fn shipped(name: &str, seed: u64) -> RunConfig {
    let root = root();
    let overrides = vec![
        format!("dataset.dir={:?}", root.join("data").join(name).display().to_string()),
        format!("ebv.cache_dir={:?}", root.join("target/ebv-cache").display().to_string()),
        format!("seed={seed}"),
    ];
    RunConfig::load(&root.join("configs").join(format!("{name}.toml")), &overrides).expect("shipped config")
}

fn run(cfg: &RunConfig) -> (RunReport, Vec<bool>) {
    let (report, outcome) = run_experiment(cfg).unwrap_or_else(|e| panic!("run failed: {e}"));
    let monotone = outcome.rank_traces.iter().map(|t| t.is_non_increasing()).collect();
    (report, monotone)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

fn constant_size(report: &RunReport) -> bool {
    report.parameter_counts.windows(2).all(|w| w[0] == w[1])
}

fn oracle_verdict(id: &'static str, results: &[OracleResult], budget: f64) -> Verdict {
    let seconds: f64 = results.iter().map(|r| r.seconds).sum();
    let passed = results.iter().all(|r| r.passed) && seconds <= budget;
    let detail = results.iter().map(|r| r.to_string()).collect::<Vec<_>>().join("; ");
    Verdict { id, passed, detail: format!("{detail}; {seconds:.1}s of {budget:.0}s") }
}

fn main() {
    let started = Instant::now();
    let mut verdicts = Vec::new();
    let mut sizes_constant = true;

    let mut reproduction = |name: &str, id: &'static str, floor: f64| {
        let mut accs = Vec::new();
        let mut reports = Vec::new();
        let mut slowest: f64 = 0.0;
        for &seed in &SEEDS {
            let (report, _) = run(&shipped(name, seed));
            eprintln!("{name} seed {seed}: average accuracy {:.4}", report.average_accuracy);
            accs.push(report.average_accuracy);
            slowest = slowest.max(report.timings.total_seconds);
            reports.push(report);
        }
        let (mean, std) = mean_std(&accs);
        verdicts.push(Verdict {
            id,
            passed: mean >= floor && slowest <= SEED_BUDGET_SECONDS,
            detail: format!(
                "split {name}: mean average accuracy {:.2}% ± {:.2} over {} seeds (need ≥ {:.1}%), slowest seed {slowest:.0}s",
                100.0 * mean,
                100.0 * std,
                SEEDS.len(),
                100.0 * floor
            ),
        });
        reports
    };
    let mnist = reproduction("mnist", "1", 0.93);
    let fmnist = reproduction("fmnist", "2", 0.90);

    let mut ablation_lines = Vec::new();
    let mut ordered = true;
    for (name, eae) in [("mnist", &mnist[0]), ("fmnist", &fmnist[0])] {
        let mut acc = |head: HeadKind| -> Result<f64, String> {
            let mut cfg = shipped(name, 0);
            cfg.head = head;
            let (report, _) = run_experiment(&cfg).map_err(|e| format!("{} aborted: {e}", head.name()))?;
            sizes_constant &= constant_size(&report);
            Ok(report.average_accuracy)
        };
        match (acc(HeadKind::FcPlain), acc(HeadKind::FcProjected)) {
            (Ok(plain), Ok(projected)) => {
                let ok = eae.average_accuracy > projected && projected > plain && plain <= 0.30;
                ordered &= ok;
                ablation_lines.push(format!(
                    "{name}: eae {:.2}% > fc_projected {:.2}% > fc_plain {:.2}% (≤ 30%) {}",
                    100.0 * eae.average_accuracy,
                    100.0 * projected,
                    100.0 * plain,
                    if ok { "holds" } else { "violated" }
                ));
            }
            (plain, projected) => {
                ordered = false;
                let errors: Vec<String> = [plain, projected].into_iter().filter_map(Result::err).collect();
                ablation_lines.push(format!("{name}: {}", errors.join("; ")));
            }
        }
    }
    verdicts.push(Verdict { id: "3", passed: ordered, detail: format!("ablation ordering, {}", ablation_lines.join("; ")) });

    let drops: Vec<f64> = mnist
        .iter()
        .map(|r| r.accuracy_matrix[0][0] - r.accuracy_matrix.last().expect("rows")[0])
        .collect();
    let worst = drops.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    verdicts.push(Verdict {
        id: "4",
        passed: worst <= 0.08,
        detail: format!(
            "stability: task-1 accuracy drop after five tasks, worst seed {:.2} points (need ≤ 8), per seed {:?}",
            100.0 * worst,
            drops.iter().map(|d| (1000.0 * d).round() / 10.0).collect::<Vec<_>>()
        ),
    });

    for r in mnist.iter().chain(fmnist.iter()) {
        sizes_constant &= constant_size(r);
    }
    verdicts.push(Verdict {
        id: "5",
        passed: sizes_constant,
        detail: format!(
            "model size: trainable parameter count identical at every task boundary in every run (eae: {})",
            mnist[0].parameter_count
        ),
    });

    let projector = oracle::run_suite("projector").expect("projector oracle");
    verdicts.push(oracle_verdict("6", &projector, 10.0));
    let hsic = oracle::run_suite("hsic").expect("hsic oracle");
    verdicts.push(oracle_verdict("7", &hsic, 60.0));
    let basis = oracle::ebv_paper_setting().expect("basis generation");
    verdicts.push(oracle_verdict("8", &[basis], 300.0));

    let mut constant = shipped("mnist", 0);
    constant.projector.schedule = AlphaSchedule::Constant;
    let (with_hsic, monotone) = run(&constant);
    let mut baseline_cfg = constant.clone();
    baseline_cfg.train.mu = 0.0;
    let (baseline, baseline_monotone) = run(&baseline_cfg);
    let all_monotone = monotone.iter().chain(baseline_monotone.iter()).all(|&m| m);
    let higher = with_hsic.final_ranks.iter().zip(&baseline.final_ranks).all(|(h, b)| h >= b);
    verdicts.push(Verdict {
        id: "9",
        passed: all_monotone && higher,
        detail: format!(
            "rank dynamics (constant α): traces non-increasing {all_monotone}; final ranks with HSIC {:?} vs cross-entropy baseline {:?}, HSIC ≥ baseline {higher}",
            with_hsic.final_ranks, baseline.final_ranks
        ),
    });

    println!();
    for v in &verdicts {
        println!("{} [{}] {}", if v.passed { "PASS" } else { "FAIL" }, v.id, v.detail);
    }
    println!(
        "DECLARED [10] not reproduced at desk scale: CIFAR-100/ResNet18, ImageNet-R/ViT, the CIFAR-10 CNN row and third-party baselines; covered by the property and oracle suites instead"
    );
    let failed = verdicts.iter().filter(|v| !v.passed).count();
    println!("acceptance: {} passed, {failed} failed, {:.0}s", verdicts.len() - failed, started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
