//! Equiangular basis vectors: a fixed `d × C` matrix of unit columns whose
//! pairwise cosines stay within `±γ`, used as a parameter-free classifier.
//! Classes are bound to free columns as tasks arrive.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"EBV1";

/// Slack allowed on the angle bound when checking a generated set.
pub const ANGLE_TOLERANCE: f64 = 1e-3;

/// Optimizer settings for [`generate_basis_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationOptions {
    pub step: f64,
    pub max_iterations: usize,
    /// At the iteration cap the set is still accepted when every pair
    /// satisfies `|cos| ≤ γ + tolerance`.
    pub tolerance: f64,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        GenerationOptions { step: 0.01, max_iterations: 10_000, tolerance: ANGLE_TOLERANCE }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisVectorSet {
    vectors: Array2<f64>,
    gamma: f64,
    seed: u64,
}

impl BasisVectorSet {
    /// Wraps an existing matrix, normalizing its columns.
    pub fn from_vectors(mut vectors: Array2<f64>, gamma: f64, seed: u64) -> Result<Self> {
        if vectors.ncols() < 1 || vectors.nrows() < 1 {
            return Err(Error::Parameter("basis matrix must be non-empty".into()));
        }
        normalize_columns(&mut vectors)?;
        Ok(BasisVectorSet { vectors, gamma, seed })
    }

    pub fn dim(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn capacity(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `d × C`, one unit vector per column.
    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    /// Largest `|cos|` over all distinct column pairs, and the pair.
    pub fn max_abs_cosine(&self) -> (f64, (usize, usize)) {
        let g = self.vectors.t().dot(&self.vectors);
        worst_pair(&g)
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        w.write_all(&(self.capacity() as u64).to_le_bytes())?;
        w.write_all(&self.gamma.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        for col in self.vectors.axis_iter(Axis(1)) {
            for v in col {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|message| Error::Format { path: path.to_owned(), message })
    }

    pub fn from_bytes(mut bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut magic = [0u8; 4];
        bytes.read_exact(&mut magic).map_err(|_| "truncated header".to_string())?;
        if &magic != MAGIC {
            return Err(format!("bad magic {magic:?}"));
        }
        let mut word = [0u8; 8];
        let mut next = |bytes: &mut &[u8]| -> std::result::Result<[u8; 8], String> {
            bytes.read_exact(&mut word).map_err(|_| "truncated header".to_string())?;
            Ok(word)
        };
        let d = u64::from_le_bytes(next(&mut bytes)?) as usize;
        let c = u64::from_le_bytes(next(&mut bytes)?) as usize;
        let gamma = f64::from_le_bytes(next(&mut bytes)?);
        let seed = u64::from_le_bytes(next(&mut bytes)?);
        let expected = d.checked_mul(c).and_then(|n| n.checked_mul(8)).ok_or("dimensions overflow")?;
        if bytes.len() != expected {
            return Err(format!("expected {expected} payload bytes, found {}", bytes.len()));
        }
        let values: Vec<f64> =
            bytes.chunks_exact(8).map(|ch| f64::from_le_bytes(ch.try_into().unwrap())).collect();
        let vectors = Array2::from_shape_vec((c, d), values).map_err(|e| e.to_string())?.reversed_axes();
        Ok(BasisVectorSet { vectors: vectors.as_standard_layout().to_owned(), gamma, seed })
    }
}

fn normalize_columns(w: &mut Array2<f64>) -> Result<()> {
    for mut col in w.axis_iter_mut(Axis(1)) {
        let norm = col.dot(&col).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::numerical(None, "basis column has zero or non-finite norm"));
        }
        col.mapv_inplace(|v| v / norm);
    }
    Ok(())
}

fn worst_pair(gram: &Array2<f64>) -> (f64, (usize, usize)) {
    let c = gram.nrows();
    let mut worst = (0.0, (0, 1.min(c.saturating_sub(1))));
    for i in 0..c {
        for j in (i + 1)..c {
            let v = gram[[i, j]].abs();
            if v > worst.0 {
                worst = (v, (i, j));
            }
        }
    }
    worst
}

/// Generates `capacity` unit vectors in `dim` dimensions with pairwise
/// `|cos| ≤ gamma`, using the default optimizer settings.
pub fn generate_basis(dim: usize, capacity: usize, gamma: f64, seed: u64) -> Result<BasisVectorSet> {
    generate_basis_with(dim, capacity, gamma, seed, GenerationOptions::default())
}

/// Gradient descent on `Σ_{i<j} max(|wᵢᵀwⱼ| − γ, 0)` with columns
/// re-normalized after every step. The step is halved whenever the loss
/// goes up.
pub fn generate_basis_with(
    dim: usize,
    capacity: usize,
    gamma: f64,
    seed: u64,
    options: GenerationOptions,
) -> Result<BasisVectorSet> {
    if dim < 2 || capacity < 2 {
        return Err(Error::Parameter(format!("need dim ≥ 2 and capacity ≥ 2, got d={dim}, C={capacity}")));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Parameter(format!("gamma must be in [0, 1), got {gamma}")));
    }
    if !(options.step > 0.0) || !(options.tolerance >= 0.0) {
        return Err(Error::Parameter("step must be positive and tolerance non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Array2::from_shape_simple_fn((dim, capacity), || StandardNormal.sample(&mut rng));
    normalize_columns(&mut w)?;

    let mut step = options.step;
    let mut previous = f64::INFINITY;
    let mut iterations = 0;
    loop {
        let gram = w.t().dot(&w);
        // masked sign matrix of the violating pairs; the hinge is inactive at |g| = γ
        let mut signs = Array2::<f64>::zeros((capacity, capacity));
        let mut residual = 0.0;
        let mut satisfied = true;
        for i in 0..capacity {
            for j in 0..capacity {
                let g = gram[[i, j]];
                if i != j && g.abs() > gamma {
                    signs[[i, j]] = g.signum();
                    if i < j {
                        residual += g.abs() - gamma;
                        satisfied &= g.abs() <= gamma + options.tolerance;
                    }
                }
            }
        }
        if residual == 0.0 {
            log::debug!("basis converged after {iterations} iterations");
            return Ok(BasisVectorSet { vectors: w, gamma, seed });
        }
        if iterations == options.max_iterations {
            if satisfied {
                log::debug!("basis within tolerance at the iteration cap, residual {residual:e}");
                return Ok(BasisVectorSet { vectors: w, gamma, seed });
            }
            let (worst_cos, worst_pair) = worst_pair(&gram);
            return Err(Error::Infeasible { iterations, worst_pair, worst_cos, residual });
        }
        // subgradient steps oscillate once near a kink; shrink on any increase
        if residual > previous {
            step *= 0.5;
        }
        previous = residual;
        let grad = w.dot(&signs);
        w.scaled_add(-step, &grad);
        normalize_columns(&mut w)?;
        iterations += 1;
    }
}

/// Cache file name for a given generation key.
pub fn cache_path(dir: &Path, dim: usize, capacity: usize, gamma: f64, seed: u64) -> PathBuf {
    dir.join(format!("ebv_d{dim}_c{capacity}_g{gamma}_s{seed}.bin"))
}

/// Loads a cached basis for the key, generating and caching it on a miss.
pub fn load_or_generate(
    dir: &Path,
    dim: usize,
    capacity: usize,
    gamma: f64,
    seed: u64,
    options: GenerationOptions,
) -> Result<BasisVectorSet> {
    let path = cache_path(dir, dim, capacity, gamma, seed);
    if path.exists() {
        let set = BasisVectorSet::load(&path)?;
        if set.dim() == dim && set.capacity() == capacity && set.gamma() == gamma && set.seed() == seed {
            return Ok(set);
        }
        log::warn!("basis cache {} does not match its key; regenerating", path.display());
    }
    let set = generate_basis_with(dim, capacity, gamma, seed, options)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    set.save(&path)?;
    Ok(set)
}

/// Binding of class labels to basis columns, in binding order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassRegistry {
    capacity: usize,
    order: Vec<u32>,
    bindings: BTreeMap<u32, usize>,
}

impl ClassRegistry {
    pub fn new(capacity: usize) -> Self {
        ClassRegistry { capacity, ..Default::default() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Lowest unbound column index.
    pub fn next_free(&self) -> usize {
        self.order.len()
    }

    /// Classes in binding order; position `k` is bound to column `k`.
    pub fn classes(&self) -> &[u32] {
        &self.order
    }

    pub fn column_of(&self, label: u32) -> Option<usize> {
        self.bindings.get(&label).copied()
    }

    /// Binds each label to the next free column, all or nothing.
    pub fn bind_classes(&mut self, labels: &[u32]) -> Result<()> {
        for (k, l) in labels.iter().enumerate() {
            if self.bindings.contains_key(l) || labels[..k].contains(l) {
                return Err(Error::AlreadyBound(*l));
            }
        }
        if self.order.len() + labels.len() > self.capacity {
            return Err(Error::Capacity { capacity: self.capacity, requested: labels.len() });
        }
        for &l in labels {
            self.bindings.insert(l, self.order.len());
            self.order.push(l);
        }
        Ok(())
    }
}

fn check_embedding(embeddings: &ArrayView2<f64>, set: &BasisVectorSet, registry: &ClassRegistry) -> Result<()> {
    if embeddings.ncols() != set.dim() {
        return Err(Error::Parameter(format!(
            "embedding dimension {} does not match basis dimension {}",
            embeddings.ncols(),
            set.dim()
        )));
    }
    if registry.is_empty() {
        return Err(Error::State("no classes are bound".into()));
    }
    if registry.len() > set.capacity() {
        return Err(Error::Parameter("registry binds more classes than the basis holds".into()));
    }
    Ok(())
}

/// Normalized basis vectors of the bound classes, `d × k` in binding order.
pub fn bound_vectors(set: &BasisVectorSet, registry: &ClassRegistry) -> Array2<f64> {
    let mut w = set.vectors.slice(ndarray::s![.., ..registry.len()]).to_owned();
    for mut col in w.axis_iter_mut(Axis(1)) {
        let norm = col.dot(&col).sqrt();
        col.mapv_inplace(|v| v / norm);
    }
    w
}

/// Inner products `z_i · w̃_c` against every bound class, `n × k`.
pub fn logits(embeddings: ArrayView2<f64>, set: &BasisVectorSet, registry: &ClassRegistry) -> Result<Array2<f64>> {
    check_embedding(&embeddings, set, registry)?;
    Ok(embeddings.dot(&bound_vectors(set, registry)))
}

/// Index of the first maximum of each row.
pub fn argmax_rows(scores: ArrayView2<f64>) -> Vec<usize> {
    scores
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Class whose basis vector has the largest inner product with each row;
/// ties go to the lower column.
pub fn predict(embeddings: ArrayView2<f64>, set: &BasisVectorSet, registry: &ClassRegistry) -> Result<Vec<u32>> {
    let scores = logits(embeddings, set, registry)?;
    Ok(argmax_rows(scores.view()).into_iter().map(|k| registry.classes()[k]).collect())
}
