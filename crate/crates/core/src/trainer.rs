//! Sequential task training, class-incremental evaluation and run reports.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ForwardTrace, GradientSet, LossGradients, MlpBackbone};
use crate::config::{HeadKind, ProjectorFeed, RunConfig};
use crate::data::{self, Batch, TaskStream};
use crate::ebv::{self, BasisVectorSet};
use crate::error::{Error, Result};
use crate::head::{Head, HeadGradients, ScoreOptions};
use crate::hsic::{self, center, gaussian_gram, one_hot};
use crate::projector::{ProjectorState, RankRecord, RankTrace};

const EVAL_CHUNK: usize = 1000;

/// `R[t][j]`: accuracy on task `j` after training task `t`, for `j ≤ t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    tasks: usize,
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        AccuracyMatrix { tasks, rows: Vec::with_capacity(tasks) }
    }

    pub fn from_rows(tasks: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = AccuracyMatrix::new(tasks);
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.rows.len();
        if t >= self.tasks {
            return Err(Error::State(format!("matrix already holds {} rows", self.tasks)));
        }
        if row.len() != t + 1 {
            return Err(Error::State(format!("row {t} must have {} entries, got {}", t + 1, row.len())));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::State(format!("accuracy outside [0, 1] in row {t}")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, t: usize, j: usize) -> Option<f64> {
        self.rows.get(t).and_then(|r| r.get(j)).copied()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.tasks
    }

    fn final_row(&self) -> Result<&[f64]> {
        match self.rows.last() {
            Some(r) if self.is_complete() => Ok(r),
            _ => Err(Error::State(format!("accuracy matrix has {} of {} rows", self.rows.len(), self.tasks))),
        }
    }
}

/// Mean of the final row.
pub fn average_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    let row = m.final_row()?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// Mean over `j < T` of `max_{t < T} R[t][j] − R[T][j]`; 0 with a warning
/// when there is a single task.
pub fn forgetting_measure(m: &AccuracyMatrix) -> Result<f64> {
    let last = m.final_row()?;
    let t_final = m.tasks() - 1;
    if t_final == 0 {
        log::warn!("forgetting is undefined for a single task; reporting 0");
        return Ok(0.0);
    }
    let total: f64 = (0..t_final)
        .map(|j| {
            let best = (j..t_final).map(|t| m.rows()[t][j]).fold(f64::NEG_INFINITY, f64::max);
            best - last[j]
        })
        .sum();
    Ok(total / t_final as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_seconds: f64,
    pub setup_seconds: f64,
    pub per_task_seconds: Vec<f64>,
    pub eval_seconds: f64,
}

pub struct TrainOutcome {
    pub backbone: MlpBackbone,
    pub head: Head,
    pub matrix: AccuracyMatrix,
    /// One trace per backbone layer.
    pub rank_traces: Vec<RankTrace>,
    /// Trainable parameters counted at every task boundary.
    pub parameter_counts: Vec<usize>,
    /// Mean classification loss over the last epoch of each task; `None`
    /// when the task ran no epochs.
    pub final_losses: Vec<Option<f64>>,
    pub timings: Timings,
}

/// Builds the backbone and head for `cfg` with inputs of width `input_dim`.
pub fn build_model(cfg: &RunConfig, input_dim: usize) -> Result<(MlpBackbone, Head)> {
    let seeds = cfg.sub_seeds();
    let p = &cfg.projector;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.init);
    let mut backbone =
        MlpBackbone::new(&cfg.layer_dims(input_dim), cfg.model.augment_bias, p.alpha0, p.schedule, &mut rng)?
            .with_projection(cfg.head != HeadKind::FcPlain);
    for (l, layer) in backbone.layers_mut().iter_mut().enumerate() {
        layer.projector = ProjectorState::new(layer.projector.dim(), cfg.layer_alpha(l), p.schedule)?;
    }
    let classes = cfg.dataset.groups.iter().map(Vec::len).sum();
    let mut head_rng = ChaCha8Rng::seed_from_u64(seeds.head);
    let head = match cfg.head {
        HeadKind::Eae => Head::basis(Arc::new(load_basis(cfg)?)),
        HeadKind::FcPlain => Head::linear(cfg.ebv.dim, classes, None, &mut head_rng)?,
        HeadKind::FcProjected => Head::linear(cfg.ebv.dim, classes, Some((p.alpha0, p.schedule)), &mut head_rng)?,
    };
    Ok((backbone, head))
}

/// Generates (or loads from the configured cache) the basis-vector set.
pub fn load_basis(cfg: &RunConfig) -> Result<BasisVectorSet> {
    let e = &cfg.ebv;
    let seed = cfg.sub_seeds().ebv;
    if e.cache_dir.as_os_str().is_empty() {
        ebv::generate_basis_with(e.dim, e.capacity, e.gamma, seed, cfg.generation_options())
    } else {
        ebv::load_or_generate(&e.cache_dir, e.dim, e.capacity, e.gamma, seed, cfg.generation_options())
    }
}

/// Normalized train/test pair and the task stream described by `cfg`.
pub fn load_stream(cfg: &RunConfig) -> Result<TaskStream> {
    let (train, test) = data::load_dataset_dir(&cfg.dataset.dir)?;
    let (train, test) = data::normalize(&train, &test, cfg.dataset.normalize);
    data::make_stream(Arc::new(train), Arc::new(test), &cfg.split_spec(), cfg.train.batch_size, cfg.sub_seeds().data)
}

/// Per-task class-incremental accuracy on tasks `0..=upto`, predicting over
/// every bound class.
pub fn evaluate_class_il(backbone: &MlpBackbone, head: &Head, stream: &TaskStream, upto: usize) -> Result<Vec<f64>> {
    let registry = head.registry();
    (0..=upto)
        .map(|t| {
            let (inputs, labels) = stream.test_set(t);
            if let Some(c) = labels.iter().find(|c| registry.column_of(**c).is_none()) {
                return Err(Error::Config(format!("test class {c} of task {t} is not bound")));
            }
            let z = backbone.embed(inputs.view(), EVAL_CHUNK)?;
            let pred = head.predict(z.view())?;
            let hits = pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
            Ok(hits as f64 / labels.len() as f64)
        })
        .collect()
}

/// Gradients of `μ Σ_l [HSIC(Z_l, X) − β HSIC(Z_l, Y)]` at every layer.
fn hsic_injections(
    cfg: &RunConfig,
    batch: &Batch,
    task_classes: &[u32],
    activations: &[Array2<f64>],
) -> Result<Vec<Option<Array2<f64>>>> {
    let t = &cfg.train;
    let depth = activations.len() - 1;
    if t.mu == 0.0 {
        return Ok(vec![None; depth]);
    }
    let x_gram = gaussian_gram(batch.inputs.view(), t.bandwidth.resolve(batch.inputs.view())?)?;
    let y = one_hot(&batch.labels, task_classes)?;
    let y_gram = gaussian_gram(y.view(), t.label_bandwidth)?;
    let mut target = center(x_gram.entries().view());
    target.scaled_add(-t.beta, &center(y_gram.entries().view()));
    activations[1..]
        .iter()
        .enumerate()
        .map(|(l, z)| {
            let sigma = t.bandwidth.resolve(z.view())?;
            let (_, mut g) = hsic::hsic_value_and_grad(z.view(), target.view(), sigma)
                .map_err(|e| relayer(e, l + 1))?;
            g *= t.mu;
            Ok(Some(g))
        })
        .collect()
}

fn relayer(e: Error, layer: usize) -> Error {
    match e {
        Error::Numerical { message, .. } => Error::numerical(Some(layer), message),
        other => other,
    }
}

fn at_coordinates(e: Error, task: usize, batch: usize) -> Error {
    match e {
        Error::Numerical { layer, message } => {
            Error::Numerical { layer, message: format!("{message} (task {task}, batch {batch})") }
        }
        other => other,
    }
}

/// Forward pass plus gradients of the combined objective for one batch.
pub fn compute_gradients(
    cfg: &RunConfig,
    backbone: &MlpBackbone,
    head: &Head,
    batch: &Batch,
    task_classes: &[u32],
) -> Result<(ForwardTrace, HeadGradients, GradientSet)> {
    let t = &cfg.train;
    let trace = backbone.forward(batch.inputs.view())?;
    let opts = ScoreOptions { scope: t.softmax_scope, scale: t.logit_scale, cosine: t.cosine };
    let mut head_grads = head.loss_and_grad(trace.embedding().view(), &batch.labels, task_classes, opts)?;
    let hsic = hsic_injections(cfg, batch, task_classes, &trace.activations)?;
    let embedding = std::mem::take(&mut head_grads.embedding);
    let grads = backbone.backward(&trace, &LossGradients { head: Some(embedding), hsic }, cfg.model.routing)?;
    Ok((trace, head_grads, grads))
}

/// One optimization step; returns the classification loss.
fn train_step(
    cfg: &RunConfig,
    backbone: &mut MlpBackbone,
    head: &mut Head,
    batch: &Batch,
    task_classes: &[u32],
) -> Result<f64> {
    let t = &cfg.train;
    let (trace, head_grads, grads) = compute_gradients(cfg, backbone, head, batch, task_classes)?;
    backbone.apply_update(&grads, t.lr)?;
    head.apply_update(head_grads.weights.as_ref(), t.lr)?;
    if backbone.projection_enabled() {
        match cfg.projector.feed {
            ProjectorFeed::BatchMean => backbone.update_projectors(&trace)?,
            ProjectorFeed::PerSample => backbone.update_projectors_per_sample(&trace)?,
        }
    }
    if head.projector().is_some() {
        match cfg.projector.feed {
            ProjectorFeed::BatchMean => head.update_projector(trace.embedding().mean_axis(Axis(0)).unwrap().view())?,
            ProjectorFeed::PerSample => {
                for row in trace.embedding().outer_iter() {
                    head.update_projector(row)?;
                }
            }
        }
    }
    Ok(head_grads.loss)
}

fn record_ranks(cfg: &RunConfig, backbone: &MlpBackbone, traces: &mut [RankTrace], task: usize, batch: usize) -> Result<()> {
    let threshold = cfg.projector.rank_threshold;
    for (layer, trace) in backbone.layers().iter().zip(traces.iter_mut()) {
        let rank = layer.projector.numerical_rank(threshold)?;
        trace.push(RankRecord { task, batch, rank, threshold });
    }
    Ok(())
}

/// Trains `backbone` and `head` over every task of `stream` in order.
///
/// Past tasks' training data is sealed as each new task opens; the
/// trainable parameter count is checked at every task boundary.
pub fn train_sequence(
    cfg: &RunConfig,
    stream: &mut TaskStream,
    mut backbone: MlpBackbone,
    mut head: Head,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let mut matrix = AccuracyMatrix::new(stream.len());
    let mut rank_traces = vec![RankTrace::default(); backbone.depth()];
    let mut parameter_counts = Vec::with_capacity(stream.len());
    let mut final_losses = Vec::with_capacity(stream.len());
    let mut timings = Timings::default();
    let epochs = cfg.train.epochs;

    for t in 0..stream.len() {
        let task_started = Instant::now();
        stream.open_task(t)?;
        let classes = stream.task(t).classes.clone();
        head.bind_classes(&classes)?;
        backbone.begin_task();
        head.begin_task();
        let per_epoch = stream.batches_per_epoch(t);
        let total = (epochs * per_epoch).max(1);
        let mut step = 0;
        let mut last_loss = None;
        for epoch in 0..epochs {
            let mut loss_sum = 0.0;
            let chunks = stream.epoch_indices(t, epoch)?;
            for (b, idx) in chunks.iter().enumerate() {
                let fraction = step as f64 / total as f64;
                backbone.set_task_progress(fraction);
                head.set_task_progress(fraction);
                let batch = stream.batch(t, idx)?;
                loss_sum += train_step(cfg, &mut backbone, &mut head, &batch, &classes)
                    .map_err(|e| at_coordinates(e, t, epoch * per_epoch + b))?;
                step += 1;
                if cfg.projector.rank_every > 0 && step % cfg.projector.rank_every == 0 {
                    record_ranks(cfg, &backbone, &mut rank_traces, t, step)?;
                }
            }
            let loss = loss_sum / chunks.len() as f64;
            last_loss = Some(loss);
            log::debug!("task {t} epoch {epoch}: loss {loss:.4}");
            if cfg.train.verbose_eval {
                let row = evaluate_class_il(&backbone, &head, stream, t)?;
                log::info!("task {t} epoch {epoch}: loss {loss:.4} accuracy {row:?}");
            }
        }
        final_losses.push(last_loss);
        if cfg.projector.rank_every == 0 || step % cfg.projector.rank_every != 0 {
            record_ranks(cfg, &backbone, &mut rank_traces, t, step)?;
        }

        let count = backbone.parameter_count() + head.parameter_count();
        if let Some(&first) = parameter_counts.first() {
            if count != first {
                return Err(Error::Consistency(format!(
                    "trainable parameter count changed from {first} to {count} at task {t}"
                )));
            }
        }
        parameter_counts.push(count);

        let eval_started = Instant::now();
        let row = evaluate_class_il(&backbone, &head, stream, t)?;
        timings.eval_seconds += eval_started.elapsed().as_secs_f64();
        log::info!("after task {t}: {row:?}");
        matrix.push_row(row)?;
        timings.per_task_seconds.push(task_started.elapsed().as_secs_f64());
    }
    timings.total_seconds = started.elapsed().as_secs_f64();
    Ok(TrainOutcome { backbone, head, matrix, rank_traces, parameter_counts, final_losses, timings })
}

/// Everything a run emits except the model itself. `timings` is the only
/// field that varies between identical invocations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub head: HeadKind,
    pub accuracy_matrix: Vec<Vec<f64>>,
    pub average_accuracy: f64,
    pub forgetting: f64,
    pub parameter_count: usize,
    pub parameter_counts: Vec<usize>,
    pub final_losses: Vec<Option<f64>>,
    /// Last recorded projector rank of each backbone layer.
    pub final_ranks: Vec<usize>,
    pub timings: Timings,
}

impl RunReport {
    pub fn from_outcome(cfg: &RunConfig, outcome: &TrainOutcome) -> Result<Self> {
        Ok(RunReport {
            config: cfg.clone(),
            head: cfg.head,
            accuracy_matrix: outcome.matrix.rows().to_vec(),
            average_accuracy: average_accuracy(&outcome.matrix)?,
            forgetting: forgetting_measure(&outcome.matrix)?,
            parameter_count: *outcome.parameter_counts.last().unwrap_or(&0),
            parameter_counts: outcome.parameter_counts.clone(),
            final_losses: outcome.final_losses.clone(),
            final_ranks: outcome.rank_traces.iter().filter_map(RankTrace::last_rank).collect(),
            timings: outcome.timings.clone(),
        })
    }

    /// The report with timings cleared, for determinism comparisons.
    pub fn without_timings(&self) -> Self {
        RunReport { timings: Timings::default(), ..self.clone() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize")
    }
}

/// Loads data, builds the model and trains the full sequence.
pub fn run_experiment(cfg: &RunConfig) -> Result<(RunReport, TrainOutcome)> {
    cfg.validate()?;
    let setup = Instant::now();
    let mut stream = load_stream(cfg)?;
    run_on_stream(cfg, &mut stream, setup)
}

fn run_on_stream(cfg: &RunConfig, stream: &mut TaskStream, setup: Instant) -> Result<(RunReport, TrainOutcome)> {
    let (backbone, head) = build_model(cfg, stream.features())?;
    let setup_seconds = setup.elapsed().as_secs_f64();
    let mut outcome = train_sequence(cfg, stream, backbone, head)?;
    outcome.timings.setup_seconds = setup_seconds;
    let report = RunReport::from_outcome(cfg, &outcome)?;
    Ok((report, outcome))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// In order: plain fc head, projected fc head, equiangular head.
    pub variants: Vec<RunReport>,
    /// `eae > fc_projected > fc_plain` in average accuracy.
    pub strictly_ordered: bool,
}

impl AblationReport {
    pub fn accuracy(&self, head: HeadKind) -> Option<f64> {
        self.variants.iter().find(|r| r.head == head).map(|r| r.average_accuracy)
    }
}

/// Runs the three head variants with identical backbone init, data order
/// and seeds.
pub fn run_ablation(cfg: &RunConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let setup = Instant::now();
    let (train, test) = data::load_dataset_dir(&cfg.dataset.dir)?;
    let (train, test) = data::normalize(&train, &test, cfg.dataset.normalize);
    let (train, test) = (Arc::new(train), Arc::new(test));
    let mut variants = Vec::new();
    for head in [HeadKind::FcPlain, HeadKind::FcProjected, HeadKind::Eae] {
        let variant = RunConfig { head, ..cfg.clone() };
        let mut stream = data::make_stream(
            train.clone(),
            test.clone(),
            &variant.split_spec(),
            variant.train.batch_size,
            variant.sub_seeds().data,
        )?;
        let (report, _) = run_on_stream(&variant, &mut stream, setup)?;
        log::info!("{}: average accuracy {:.4}", head.name(), report.average_accuracy);
        variants.push(report);
    }
    let acc = |i: usize| variants[i].average_accuracy;
    let strictly_ordered = acc(2) > acc(1) && acc(1) > acc(0);
    Ok(AblationReport { variants, strictly_ordered })
}

/// Writes `rank_layer{l}.csv` for every layer into `dir`.
pub fn save_rank_traces(traces: &[RankTrace], dir: &Path) -> Result<()> {
    for (l, trace) in traces.iter().enumerate() {
        trace.save_csv(&dir.join(format!("rank_layer{}.csv", l + 1)))?;
    }
    Ok(())
}
