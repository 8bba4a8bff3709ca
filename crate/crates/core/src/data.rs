//! IDX ingestion, pixel normalization and class-disjoint task streams.

use std::collections::{BTreeMap, HashSet};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;
const STD_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    /// One flattened image per row.
    pub images: Array2<f64>,
    pub labels: Vec<u32>,
    pub split: Split,
    pub image_shape: (usize, usize),
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.images.ncols()
    }

    /// Rows at `indices`, with their labels.
    pub fn gather(&self, indices: &[usize]) -> (Array2<f64>, Vec<u32>) {
        (self.images.select(Axis(0), indices), indices.iter().map(|&i| self.labels[i]).collect())
    }
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| truncated(path))
}

fn truncated(path: &Path) -> Error {
    Error::io(path, std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "truncated IDX file"))
}

fn format_error(path: &Path, message: String) -> Error {
    Error::Format { path: path.to_owned(), message }
}

/// Loads an IDX image/label file pair; pixels are scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<RawDataset> {
    let img = read_maybe_gzip(images_path)?;
    let magic = be_u32(&img, 0, images_path)?;
    if magic != IMAGES_MAGIC {
        return Err(format_error(images_path, format!("expected image magic 0x{IMAGES_MAGIC:08x}, found 0x{magic:08x}")));
    }
    let n = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let pixels = &img[16..];
    if pixels.len() < n * rows * cols {
        return Err(truncated(images_path));
    }

    let lab = read_maybe_gzip(labels_path)?;
    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != LABELS_MAGIC {
        return Err(format_error(labels_path, format!("expected label magic 0x{LABELS_MAGIC:08x}, found 0x{magic:08x}")));
    }
    let n_labels = be_u32(&lab, 4, labels_path)? as usize;
    if n_labels != n {
        return Err(Error::Consistency(format!(
            "{} holds {n} images but {} holds {n_labels} labels",
            images_path.display(),
            labels_path.display()
        )));
    }
    if lab.len() < 8 + n {
        return Err(truncated(labels_path));
    }

    let images = Array2::from_shape_fn((n, rows * cols), |(i, j)| pixels[i * rows * cols + j] as f64 / 255.0);
    let labels = lab[8..8 + n].iter().map(|&b| b as u32).collect();
    Ok(RawDataset { images, labels, split, image_shape: (rows, cols) })
}

/// Locates `stem` or `stem.gz` inside `dir`.
pub fn find_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    let plain = dir.join(stem);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(Error::io(plain, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found")))
}

/// Loads the standard train/test IDX quartet from a directory.
pub fn load_dataset_dir(dir: &Path) -> Result<(RawDataset, RawDataset)> {
    let train = load_idx(
        &find_file(dir, "train-images-idx3-ubyte")?,
        &find_file(dir, "train-labels-idx1-ubyte")?,
        Split::Train,
    )?;
    let test = load_idx(
        &find_file(dir, "t10k-images-idx3-ubyte")?,
        &find_file(dir, "t10k-labels-idx1-ubyte")?,
        Split::Test,
    )?;
    Ok((train, test))
}

/// Checks every `<sha256>  <relative path>` line of a manifest against files
/// under `root`. Returns the paths whose digest did not match.
pub fn verify_manifest(root: &Path, manifest: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut mismatched = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (digest, name) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| format_error(manifest, format!("malformed line: {line}")))?;
        let path = root.join(name.trim_start_matches([' ', '*']));
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if hex::encode(Sha256::digest(&bytes)) != digest.to_ascii_lowercase() {
            mismatched.push(path);
        }
    }
    Ok(mismatched)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizePolicy {
    PerPixelStandardize,
    None,
}

/// Per-pixel mean and floored standard deviation of a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl PixelStats {
    pub fn from_train(train: &RawDataset) -> Self {
        let mean = train.images.mean_axis(Axis(0)).expect("non-empty training set");
        let std = train.images.std_axis(Axis(0), 0.0).mapv(|s| s.max(STD_FLOOR));
        PixelStats { mean, std }
    }

    pub fn apply(&self, data: &RawDataset) -> RawDataset {
        let mut out = data.clone();
        for mut row in out.images.outer_iter_mut() {
            row -= &self.mean;
            row /= &self.std;
        }
        out
    }
}

/// Normalizes a train/test pair with statistics from the training split only.
pub fn normalize(train: &RawDataset, test: &RawDataset, policy: NormalizePolicy) -> (RawDataset, RawDataset) {
    match policy {
        NormalizePolicy::None => (train.clone(), test.clone()),
        NormalizePolicy::PerPixelStandardize => {
            let stats = PixelStats::from_train(train);
            (stats.apply(train), stats.apply(test))
        }
    }
}

/// Ordered class groups, one per task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub groups: Vec<Vec<u32>>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { groups: (0..5).map(|t| vec![2 * t, 2 * t + 1]).collect() }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::Spec("no task groups".into()));
        }
        let mut seen = HashSet::new();
        for (t, g) in self.groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::Spec(format!("task {t} has no classes")));
            }
            for c in g {
                if !seen.insert(*c) {
                    return Err(Error::Spec(format!("class {c} appears in more than one group")));
                }
            }
        }
        Ok(())
    }

    /// Class → position within its own group.
    pub fn remapping(&self) -> BTreeMap<u32, usize> {
        self.groups.iter().flat_map(|g| g.iter().enumerate().map(|(k, &c)| (c, k))).collect()
    }

    pub fn class_count(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    /// Same groups in a seeded random order.
    pub fn shuffled(&self, seed: u64) -> SplitSpec {
        let mut groups = self.groups.clone();
        groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        SplitSpec { groups }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub classes: Vec<u32>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Class-disjoint task sequence over a shared train/test pair.
///
/// Training data of a task becomes unreadable once a later task is opened.
#[derive(Debug, Clone)]
pub struct TaskStream {
    train: Arc<RawDataset>,
    test: Arc<RawDataset>,
    tasks: Vec<Task>,
    batch_size: usize,
    seed: u64,
    sealed_before: usize,
}

/// One mini-batch of training data.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub labels: Vec<u32>,
}

/// Builds the task stream: per group, training indices shuffled by `seed`,
/// test indices in file order.
pub fn make_stream(
    train: Arc<RawDataset>,
    test: Arc<RawDataset>,
    spec: &SplitSpec,
    batch_size: usize,
    seed: u64,
) -> Result<TaskStream> {
    spec.validate()?;
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be positive".into()));
    }
    if train.features() != test.features() {
        return Err(Error::Consistency("train and test feature dimensions differ".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::with_capacity(spec.groups.len());
    for (t, group) in spec.groups.iter().enumerate() {
        let select = |d: &RawDataset| -> Vec<usize> {
            d.labels.iter().enumerate().filter(|(_, l)| group.contains(l)).map(|(i, _)| i).collect()
        };
        let mut train_indices = select(&train);
        let test_indices = select(&test);
        if train_indices.is_empty() || test_indices.is_empty() {
            return Err(Error::Spec(format!("task {t} (classes {group:?}) has no samples")));
        }
        train_indices.shuffle(&mut rng);
        tasks.push(Task { classes: group.clone(), train_indices, test_indices });
    }
    Ok(TaskStream { train, test, tasks, batch_size, seed, sealed_before: 0 })
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn features(&self) -> usize {
        self.train.features()
    }

    pub fn task(&self, t: usize) -> &Task {
        &self.tasks[t]
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn train_data(&self) -> &RawDataset {
        &self.train
    }

    pub fn test_data(&self) -> &RawDataset {
        &self.test
    }

    /// Makes `t` the current task, sealing the training data of all earlier
    /// tasks for the rest of the stream's life.
    pub fn open_task(&mut self, t: usize) -> Result<()> {
        if t >= self.tasks.len() {
            return Err(Error::Parameter(format!("task {t} out of range")));
        }
        if t < self.sealed_before {
            return Err(Error::Sealed { task: t });
        }
        self.sealed_before = t;
        Ok(())
    }

    pub fn is_sealed(&self, t: usize) -> bool {
        t < self.sealed_before
    }

    /// Number of batches per epoch of task `t`.
    pub fn batches_per_epoch(&self, t: usize) -> usize {
        self.tasks[t].train_indices.len().div_ceil(self.batch_size)
    }

    /// Index chunks for one epoch of task `t`. Epoch 0 uses the stream's
    /// construction order; later epochs are reshuffled deterministically.
    pub fn epoch_indices(&self, t: usize, epoch: usize) -> Result<Vec<Vec<usize>>> {
        if self.is_sealed(t) {
            return Err(Error::Sealed { task: t });
        }
        let mut order = self.tasks[t].train_indices.clone();
        if epoch > 0 {
            let s = self.seed ^ ((t as u64) << 32) ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
        }
        Ok(order.chunks(self.batch_size).map(<[usize]>::to_vec).collect())
    }

    /// Materializes one training batch of task `t`.
    pub fn batch(&self, t: usize, indices: &[usize]) -> Result<Batch> {
        if self.is_sealed(t) {
            return Err(Error::Sealed { task: t });
        }
        let (inputs, labels) = self.train.gather(indices);
        Ok(Batch { inputs, labels })
    }

    /// Test inputs and labels of task `t` (never sealed).
    pub fn test_set(&self, t: usize) -> (Array2<f64>, Vec<u32>) {
        self.test.gather(&self.tasks[t].test_indices)
    }
}
