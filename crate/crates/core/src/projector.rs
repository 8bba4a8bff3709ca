//! Per-layer orthogonal projectors `P = α(AᵀA + αI)⁻¹`, maintained by the
//! recursive rank-1 (Woodbury) update so past activations never need to be
//! stored.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative singular-value threshold used for rank diagnostics.
pub const DEFAULT_RANK_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlphaSchedule {
    Constant,
    /// `α = α₀ · decay^f` where `f ∈ [0, 1]` is the fraction of the current
    /// task completed.
    Adaptive { decay: f64, reset_per_task: bool },
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        AlphaSchedule::Adaptive { decay: 1e-3, reset_per_task: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorState {
    matrix: Array2<f64>,
    alpha0: f64,
    alpha: f64,
    samples_seen: u64,
    schedule: AlphaSchedule,
    task_fraction: f64,
}

impl ProjectorState {
    /// Identity projector (no directions protected yet).
    pub fn new(dim: usize, alpha0: f64, schedule: AlphaSchedule) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Parameter("projector dimension must be at least 1".into()));
        }
        if !(alpha0 > 0.0 && alpha0.is_finite()) {
            return Err(Error::Parameter(format!("alpha must be positive, got {alpha0}")));
        }
        if let AlphaSchedule::Adaptive { decay, .. } = schedule {
            if !(decay > 0.0 && decay <= 1.0) {
                return Err(Error::Parameter(format!("alpha decay must be in (0, 1], got {decay}")));
            }
        }
        Ok(ProjectorState {
            matrix: Array2::eye(dim),
            alpha0,
            alpha: alpha0,
            samples_seen: 0,
            schedule,
            task_fraction: 0.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha0
    }

    pub fn samples_seen(&self) -> u64 {
        self.samples_seen
    }

    pub fn schedule(&self) -> AlphaSchedule {
        self.schedule
    }

    /// Replaces the matrix, e.g. when restoring a checkpoint.
    pub fn set_matrix(&mut self, matrix: Array2<f64>) -> Result<()> {
        if matrix.dim() != self.matrix.dim() {
            return Err(Error::Parameter(format!(
                "projector matrix is {:?}, expected {:?}",
                matrix.dim(),
                self.matrix.dim()
            )));
        }
        self.matrix = matrix;
        Ok(())
    }

    /// `P ← P − P z zᵀ P / (α + zᵀ P z)`, then symmetrize and advance α.
    ///
    /// On error the state is left unchanged.
    pub fn update(&mut self, z: ArrayView1<f64>) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::Parameter(format!("update vector has length {}, expected {}", z.len(), self.dim())));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("projector update vector is not finite".into()));
        }
        let pz: Array1<f64> = self.matrix.dot(&z);
        let denom = self.alpha + z.dot(&pz);
        if !(denom > 0.0 && denom.is_finite()) {
            return Err(Error::numerical(None, format!("projector update denominator {denom}")));
        }
        let n = self.dim();
        let m = &mut self.matrix;
        for i in 0..n {
            let s = pz[i] / denom;
            if s == 0.0 {
                continue;
            }
            for j in 0..n {
                m[[i, j]] -= s * pz[j];
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (m[[i, j]] + m[[j, i]]);
                m[[i, j]] = avg;
                m[[j, i]] = avg;
            }
        }
        self.samples_seen += 1;
        self.advance_alpha();
        Ok(())
    }

    /// `P · grad` for a gradient whose rows index this projector's inputs.
    pub fn apply(&self, grad: ArrayView2<f64>) -> Result<Array2<f64>> {
        if grad.nrows() != self.dim() {
            return Err(Error::Parameter(format!(
                "gradient has {} rows, projector dimension is {}",
                grad.nrows(),
                self.dim()
            )));
        }
        Ok(self.matrix.dot(&grad))
    }

    /// Records progress through the current task (clamped to `[0, 1]`).
    pub fn set_task_progress(&mut self, fraction: f64) {
        self.task_fraction = fraction.clamp(0.0, 1.0);
    }

    /// Marks a task boundary; the adaptive schedule restarts from α₀ when
    /// configured to reset.
    pub fn begin_task(&mut self) {
        if let AlphaSchedule::Adaptive { reset_per_task: true, .. } = self.schedule {
            self.task_fraction = 0.0;
            self.alpha = self.alpha0;
        }
    }

    /// Recomputes α from the schedule and the recorded task progress.
    pub fn advance_alpha(&mut self) -> f64 {
        self.alpha = match self.schedule {
            AlphaSchedule::Constant => self.alpha0,
            AlphaSchedule::Adaptive { decay, .. } => self.alpha0 * decay.powf(self.task_fraction),
        };
        self.alpha
    }

    /// Eigenvalues of the (symmetric) projector matrix, ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let n = self.dim();
        let m = DMatrix::from_fn(n, n, |i, j| self.matrix[[i, j]]);
        let mut ev: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }

    /// Number of eigenvalues above `threshold`, measured relative to the
    /// identity the projector starts from (whose eigenvalues are all 1).
    ///
    /// A fixed reference keeps the count non-increasing under a constant α;
    /// scaling by the current largest eigenvalue would let the rank grow
    /// back once every direction has shrunk.
    pub fn numerical_rank(&self, threshold: f64) -> Result<usize> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Parameter(format!("rank threshold must be in (0, 1), got {threshold}")));
        }
        Ok(self.eigenvalues().into_iter().filter(|&s| s.abs() > threshold).count())
    }
}

/// One numerical-rank observation of a layer's projector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub task: usize,
    pub batch: usize,
    pub rank: usize,
    pub threshold: f64,
}

/// Rank history of one layer's projector over a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankTrace {
    pub records: Vec<RankRecord>,
}

impl RankTrace {
    pub fn push(&mut self, record: RankRecord) {
        self.records.push(record);
    }

    pub fn last_rank(&self) -> Option<usize> {
        self.records.last().map(|r| r.rank)
    }

    /// True when ranks never increase between consecutive records that use
    /// the same threshold.
    pub fn is_non_increasing(&self) -> bool {
        self.records
            .windows(2)
            .all(|w| w[0].threshold != w[1].threshold || w[1].rank <= w[0].rank)
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "task,batch,rank,threshold")?;
        for r in &self.records {
            writeln!(out, "{},{},{},{}", r.task, r.batch, r.rank, r.threshold)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_csv(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }
}
