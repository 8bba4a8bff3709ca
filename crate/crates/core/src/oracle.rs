//! Independent reference computations checked against the library: dense
//! brute-force HSIC, direct matrix inverses, central finite differences and
//! pairwise-cosine scans.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::backbone::MlpBackbone;
use crate::config::{RunConfig, SoftmaxScope};
use crate::data::Batch;
use crate::ebv::{self, BasisVectorSet, ANGLE_TOLERANCE};
use crate::error::{Error, Result};
use crate::head::{Head, ScoreOptions};
use crate::hsic::{self, Bandwidth};
use crate::projector::{AlphaSchedule, ProjectorState};
use crate::trainer::compute_gradients;

pub const SUITES: &[&str] = &["hsic", "projector", "backbone", "ebv", "all"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleResult {
    pub name: String,
    pub passed: bool,
    pub max_residual: f64,
    pub tolerance: f64,
    pub cases: usize,
    pub seconds: f64,
}

impl std::fmt::Display for OracleResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: max residual {:.3e} (tolerance {:.1e}, {} cases, {:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_residual,
            self.tolerance,
            self.cases,
            self.seconds
        )
    }
}

fn result(name: &str, max_residual: f64, tolerance: f64, cases: usize, started: Instant) -> OracleResult {
    OracleResult {
        name: name.into(),
        passed: max_residual <= tolerance,
        max_residual,
        tolerance,
        cases,
        seconds: started.elapsed().as_secs_f64(),
    }
}

pub fn run_suite(name: &str) -> Result<Vec<OracleResult>> {
    Ok(match name {
        "hsic" => vec![hsic_estimator(100, 11)?, hsic_gradient(20, 12)?],
        "projector" => vec![projector_recursion(200, 13)?],
        "backbone" => vec![backbone_gradient(14)?],
        "ebv" => vec![ebv_feasibility(15)?, ebv_paper_setting()?],
        "all" => {
            let mut all = Vec::new();
            for s in &SUITES[..SUITES.len() - 1] {
                all.extend(run_suite(s)?);
            }
            all
        }
        other => {
            return Err(Error::Config(format!("unknown oracle suite `{other}` (expected one of {})", SUITES.join(", "))))
        }
    })
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

fn naive_product(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (n, k) = a.dim();
    let m = b.ncols();
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for r in 0..k {
                s += a[[i, r]] * b[[r, j]];
            }
            out[[i, j]] = s;
        }
    }
    out
}

fn naive_gram(x: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let n = x.nrows();
    Array2::from_shape_fn((n, n), |(i, j)| {
        let d2: f64 = x.row(i).iter().zip(x.row(j).iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        (-d2 / (2.0 * sigma * sigma)).exp()
    })
}

/// `tr(H K G K) / (n − 1)²` with an explicit centering matrix and naive
/// products.
pub fn brute_force_hsic(a: &Array2<f64>, b: &Array2<f64>, sigma_a: f64, sigma_b: f64) -> f64 {
    let n = a.nrows();
    let h = naive_gram(a, sigma_a);
    let g = naive_gram(b, sigma_b);
    let k = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64);
    let m = naive_product(&h, &naive_product(&k, &naive_product(&g, &k)));
    (0..n).map(|i| m[[i, i]]).sum::<f64>() / ((n - 1) as f64).powi(2)
}

/// Library estimator (median bandwidths) against the brute force.
pub fn hsic_estimator(instances: usize, seed: u64) -> Result<OracleResult> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = rng.gen_range(3..=40);
        let (da, db) = (rng.gen_range(1..=12), rng.gen_range(1..=12));
        let a = normal_matrix(&mut rng, n, da);
        let b = normal_matrix(&mut rng, n, db) * rng.gen_range(0.1..3.0);
        let (sa, sb) = (hsic::median_bandwidth(a.view())?, hsic::median_bandwidth(b.view())?);
        let fast = hsic::hsic(&hsic::gaussian_gram(a.view(), sa)?, &hsic::gaussian_gram(b.view(), sb)?)?;
        let slow = brute_force_hsic(&a, &b, sa, sb);
        worst = worst.max((fast - slow).abs() / slow.abs().max(1e-300));
    }
    Ok(result("hsic estimator vs dense tr(HKGK)", worst, 1e-10, instances, started))
}

/// Largest relative deviation over entries whose analytic magnitude exceeds
/// `floor`.
fn relative_gap(analytic: &Array2<f64>, numeric: &Array2<f64>, floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .filter(|(a, _)| a.abs() > floor)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
        .fold(0.0, f64::max)
}

/// Analytic HSIC gradient against central differences of the estimator.
pub fn hsic_gradient(instances: usize, seed: u64) -> Result<OracleResult> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = rng.gen_range(3..=20);
        let (da, db) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let a = normal_matrix(&mut rng, n, da);
        let b = normal_matrix(&mut rng, n, db);
        let sa = hsic::median_bandwidth(a.view())?;
        let gb = hsic::gaussian_gram(b.view(), hsic::median_bandwidth(b.view())?)?;
        let gbc = gb.centered();
        let analytic = hsic::hsic_grad_wrt_a(a.view(), gbc.view(), sa)?;
        let value = |m: &Array2<f64>| -> Result<f64> { hsic::hsic(&hsic::gaussian_gram(m.view(), sa)?, &gb) };
        let mut numeric = Array2::zeros(a.dim());
        for idx in ndarray::indices(a.dim()) {
            let mut p = a.clone();
            p[idx] += step;
            let mut m = a.clone();
            m[idx] -= step;
            numeric[idx] = (value(&p)? - value(&m)?) / (2.0 * step);
        }
        worst = worst.max(relative_gap(&analytic, &numeric, 1e-6));
    }
    Ok(result("hsic gradient vs central differences", worst, 1e-4, instances, started))
}

/// Recursive projector against `α(AᵀA + αI)⁻¹` from a dense eigendecomposition, over
/// full-rank and low-rank streams.
pub fn projector_recursion(steps: usize, seed: u64) -> Result<OracleResult> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for dim in [4usize, 16, 64] {
        for alpha in [1e-2, 1e-1, 1.0] {
            for span in [dim, dim.div_ceil(4)] {
                let basis = normal_matrix(&mut rng, span, dim);
                let coeffs = normal_matrix(&mut rng, steps, span);
                let stream = coeffs.dot(&basis);
                let mut p = ProjectorState::new(dim, alpha, AlphaSchedule::Constant)?;
                for z in stream.outer_iter() {
                    p.update(z)?;
                }
                let a = DMatrix::from_fn(steps, dim, |i, j| stream[[i, j]]);
                // α(AᵀA + αI)⁻¹ = V diag(α / (λ + α)) Vᵀ; better conditioned than LU
                // when the stream is rank deficient and α is small
                let eig = (a.transpose() * &a).symmetric_eigen();
                let scale = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| alpha / (l.max(0.0) + alpha)));
                let inv = &eig.eigenvectors * scale * eig.eigenvectors.transpose();
                let rec = p.matrix();
                let diff: f64 = (0..dim).flat_map(|i| (0..dim).map(move |j| (i, j))).map(|(i, j)| (rec[[i, j]] - inv[(i, j)]).powi(2)).sum();
                worst = worst.max(diff.sqrt() / inv.norm());
                cases += 1;
            }
        }
    }
    Ok(result("projector recursion vs direct inverse", worst, 1e-6, cases, started))
}

/// Scalar combined objective with fixed per-layer bandwidths.
fn combined_objective(
    cfg: &RunConfig,
    net: &MlpBackbone,
    head: &Head,
    batch: &Batch,
    classes: &[u32],
    sigmas: &[f64],
) -> Result<f64> {
    let t = &cfg.train;
    let trace = net.forward(batch.inputs.view())?;
    let opts = ScoreOptions { scope: t.softmax_scope, scale: t.logit_scale, cosine: t.cosine };
    let mut total = head.loss_and_grad(trace.embedding().view(), &batch.labels, classes, opts)?.loss;
    let x = hsic::gaussian_gram(batch.inputs.view(), sigmas[0])?;
    let y = hsic::gaussian_gram(hsic::one_hot(&batch.labels, classes)?.view(), t.label_bandwidth)?;
    for (z, &s) in trace.activations[1..].iter().zip(&sigmas[1..]) {
        let gz = hsic::gaussian_gram(z.view(), s)?;
        total += t.mu * (hsic::hsic(&gz, &x)? - t.beta * hsic::hsic(&gz, &y)?);
    }
    Ok(total)
}

/// Backbone gradients of the full objective against central differences
/// (step 1e-4) on 2- and 3-layer ReLU nets.
pub fn backbone_gradient(seed: u64) -> Result<OracleResult> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 1e-4;
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for (dims, scope, cosine) in [
        (vec![6, 10, 8], SoftmaxScope::Seen, false),
        (vec![5, 12, 9, 8], SoftmaxScope::Task, false),
        (vec![7, 32, 16, 8], SoftmaxScope::All, true),
    ] {
        let mut cfg = RunConfig::default();
        cfg.train.softmax_scope = scope;
        cfg.train.cosine = cosine;
        cfg.train.logit_scale = 2.0;
        let d = *dims.last().unwrap();
        let net = MlpBackbone::new(&dims, false, 0.01, AlphaSchedule::Constant, &mut rng)?.with_projection(false);
        let basis = BasisVectorSet::from_vectors(normal_matrix(&mut rng, d, 6), 0.5, 0)?;
        let mut head = Head::basis(Arc::new(basis));
        head.bind_classes(&[0, 1])?;
        head.bind_classes(&[2, 3])?;
        let classes = [2, 3];
        let n = 10;
        let batch = Batch {
            inputs: normal_matrix(&mut rng, n, dims[0]),
            labels: (0..n).map(|i| classes[i % 2]).collect(),
        };
        let (trace, _, grads) = compute_gradients(&cfg, &net, &head, &batch, &classes)?;
        let sigmas: Vec<f64> = trace
            .activations
            .iter()
            .map(|z| Bandwidth::Median.resolve(z.view()))
            .collect::<Result<_>>()?;
        for l in 0..net.depth() {
            let mut numeric = Array2::zeros(grads.raw[l].dim());
            for idx in ndarray::indices(numeric.dim()) {
                let shifted = |delta: f64| -> Result<f64> {
                    let mut probe = net.clone();
                    probe.layers_mut()[l].weights[idx] += delta;
                    combined_objective(&cfg, &probe, &head, &batch, &classes, &sigmas)
                };
                numeric[idx] = (shifted(step)? - shifted(-step)?) / (2.0 * step);
            }
            worst = worst.max(relative_gap(&grads.raw[l], &numeric, 1e-6));
            cases += 1;
        }
    }
    Ok(result("backbone gradient vs central differences", worst, 1e-4, cases, started))
}

fn brute_force_max_cosine(w: &Array2<f64>) -> f64 {
    let cols: Vec<Array1<f64>> = w.columns().into_iter().map(|c| c.to_owned()).collect();
    let mut worst: f64 = 0.0;
    for i in 0..cols.len() {
        for j in (i + 1)..cols.len() {
            let c = cols[i].dot(&cols[j]) / (cols[i].dot(&cols[i]).sqrt() * cols[j].dot(&cols[j]).sqrt());
            worst = worst.max(c.abs());
        }
    }
    worst
}

/// Feasible settings must converge within tolerance (checked by a pairwise
/// scan); an impossible packing must be reported infeasible.
pub fn ebv_feasibility(seed: u64) -> Result<OracleResult> {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    let feasible = [(3, 3, 0.0), (10, 20, 0.4), (32, 64, 0.25), (100, 150, 0.15)];
    for (k, &(d, c, gamma)) in feasible.iter().enumerate() {
        let set = ebv::generate_basis(d, c, gamma, seed + k as u64)?;
        worst = worst.max(brute_force_max_cosine(set.vectors()) - gamma);
    }
    // five directions in the plane cannot all be within 0.1 of orthogonal
    let infeasible = match ebv::generate_basis(2, 5, 0.1, seed) {
        Err(Error::Infeasible { .. }) => 0.0,
        _ => f64::INFINITY,
    };
    worst = worst.max(infeasible);
    Ok(result("basis feasibility scan (excess over gamma)", worst.max(0.0), ANGLE_TOLERANCE, feasible.len() + 1, started))
}

/// `d = C = 1000`, `γ = 0.04`: max pairwise |cos| ≤ 0.041.
pub fn ebv_paper_setting() -> Result<OracleResult> {
    let started = Instant::now();
    let set = ebv::generate_basis(1000, 1000, 0.04, 0)?;
    Ok(result("basis d=1000 C=1000 gamma=0.04 max |cos|", brute_force_max_cosine(set.vectors()), 0.041, 1, started))
}
