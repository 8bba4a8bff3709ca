//! Run configuration: TOML file, dotted-key overrides, validation and
//! sub-seed expansion.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::HsicRouting;
use crate::data::{NormalizePolicy, SplitSpec};
use crate::ebv::GenerationOptions;
use crate::error::{Error, Result};
use crate::hsic::Bandwidth;
use crate::projector::{AlphaSchedule, DEFAULT_RANK_THRESHOLD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Fixed equiangular basis vectors, no trainable parameters.
    Eae,
    /// Trainable linear head, plain SGD everywhere (backbone projectors off).
    FcPlain,
    /// Trainable linear head with its own projector; backbone projected.
    FcProjected,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Eae => "eae",
            HeadKind::FcPlain => "fc_plain",
            HeadKind::FcProjected => "fc_projected",
        }
    }
}

/// Which classes enter the softmax normalizer of the classification loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxScope {
    /// Classes of the current task only.
    Task,
    /// Every class bound so far.
    Seen,
    /// Every output of the head (all basis vectors for the EAE head).
    All,
}

/// What each layer's projector is fed after a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorFeed {
    BatchMean,
    PerSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Free-form identifier echoed into reports.
    pub name: String,
    /// Directory holding the four IDX files.
    pub dir: PathBuf,
    pub normalize: NormalizePolicy,
    pub groups: Vec<Vec<u32>>,
    /// Shuffle task order with the data sub-seed.
    pub shuffle_tasks: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub augment_bias: bool,
    pub routing: HsicRouting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the label-dependence term inside the HSIC objective.
    pub beta: f64,
    /// Weight of the HSIC objective relative to the classification loss.
    pub mu: f64,
    /// Kernel bandwidth policy for inputs and hidden representations.
    pub bandwidth: Bandwidth,
    /// Fixed bandwidth of the label kernel.
    pub label_bandwidth: f64,
    pub softmax_scope: SoftmaxScope,
    /// Logits are multiplied by this factor before the softmax.
    pub logit_scale: f64,
    /// Normalize embeddings before scoring (cosine logits).
    pub cosine: bool,
    /// Evaluate after every epoch (logged, not reported).
    pub verbose_eval: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorConfig {
    pub alpha0: f64,
    /// Per-layer initial α overriding `alpha0` (empty: `alpha0` everywhere).
    pub layer_alpha0: Vec<f64>,
    pub schedule: AlphaSchedule,
    pub feed: ProjectorFeed,
    pub rank_threshold: f64,
    /// Record ranks every this many batches (0: task ends only).
    pub rank_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EbvConfig {
    pub dim: usize,
    pub capacity: usize,
    pub gamma: f64,
    pub step: f64,
    pub max_iterations: usize,
    /// Directory for cached basis files; empty disables caching.
    pub cache_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub head: HeadKind,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub projector: ProjectorConfig,
    pub ebv: EbvConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            head: HeadKind::Eae,
            dataset: DatasetConfig {
                name: "mnist".into(),
                dir: PathBuf::from("data/mnist"),
                normalize: NormalizePolicy::PerPixelStandardize,
                groups: SplitSpec::default().groups,
                shuffle_tasks: false,
            },
            model: ModelConfig { hidden: vec![400, 400], augment_bias: false, routing: HsicRouting::EndToEnd },
            train: TrainConfig {
                epochs: 1,
                batch_size: 64,
                lr: 0.05,
                beta: 500.0,
                mu: 0.01,
                bandwidth: Bandwidth::Median,
                label_bandwidth: 1.0,
                softmax_scope: SoftmaxScope::Seen,
                logit_scale: 1.0,
                cosine: false,
                verbose_eval: false,
            },
            projector: ProjectorConfig {
                alpha0: 30.0,
                layer_alpha0: Vec::new(),
                schedule: AlphaSchedule::default(),
                feed: ProjectorFeed::BatchMean,
                rank_threshold: DEFAULT_RANK_THRESHOLD,
                rank_every: 0,
            },
            ebv: EbvConfig {
                dim: 1000,
                capacity: 1000,
                gamma: 0.04,
                step: GenerationOptions::default().step,
                max_iterations: GenerationOptions::default().max_iterations,
                cache_dir: PathBuf::new(),
            },
        }
    }
}

/// Independent seeds derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubSeeds {
    pub init: u64,
    pub data: u64,
    pub ebv: u64,
    pub head: u64,
}

/// First eight bytes of `SHA-256(master ‖ name)`.
pub fn derive_seed(master: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(name.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

impl RunConfig {
    pub fn sub_seeds(&self) -> SubSeeds {
        SubSeeds {
            init: derive_seed(self.seed, "init"),
            data: derive_seed(self.seed, "data"),
            ebv: derive_seed(self.seed, "ebv"),
            head: derive_seed(self.seed, "head"),
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        let spec = SplitSpec { groups: self.dataset.groups.clone() };
        if self.dataset.shuffle_tasks {
            spec.shuffled(self.sub_seeds().data)
        } else {
            spec
        }
    }

    /// Initial α of layer `l` (0-based).
    pub fn layer_alpha(&self, l: usize) -> f64 {
        self.projector.layer_alpha0.get(l).copied().unwrap_or(self.projector.alpha0)
    }

    pub fn generation_options(&self) -> GenerationOptions {
        GenerationOptions { step: self.ebv.step, max_iterations: self.ebv.max_iterations, ..Default::default() }
    }

    /// `[input, hidden.., ebv.dim]`.
    pub fn layer_dims(&self, input: usize) -> Vec<usize> {
        std::iter::once(input).chain(self.model.hidden.iter().copied()).chain([self.ebv.dim]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        SplitSpec { groups: self.dataset.groups.clone() }.validate().map_err(|e| Error::Config(e.to_string()))?;
        if i64::try_from(self.seed).is_err() {
            return bad(format!("seed must fit in a signed 64-bit integer, got {}", self.seed));
        }
        let t = &self.train;
        if t.batch_size < 2 {
            return bad(format!("train.batch_size must be at least 2, got {}", t.batch_size));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad(format!("train.lr must be positive, got {}", t.lr));
        }
        for (key, v) in [("train.beta", t.beta), ("train.mu", t.mu)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{key} must be non-negative, got {v}"));
            }
        }
        if !(t.label_bandwidth > 0.0 && t.label_bandwidth.is_finite()) {
            return bad(format!("train.label_bandwidth must be positive, got {}", t.label_bandwidth));
        }
        if let Bandwidth::Fixed(s) = t.bandwidth {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("train.bandwidth must be positive, got {s}"));
            }
        }
        if !(t.logit_scale > 0.0 && t.logit_scale.is_finite()) {
            return bad(format!("train.logit_scale must be positive, got {}", t.logit_scale));
        }
        if self.model.hidden.contains(&0) {
            return bad("model.hidden widths must be positive".into());
        }
        let p = &self.projector;
        if !(p.alpha0 > 0.0 && p.alpha0.is_finite()) {
            return bad(format!("projector.alpha0 must be positive, got {}", p.alpha0));
        }
        if let Some(a) = p.layer_alpha0.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return bad(format!("projector.layer_alpha0 entries must be positive, got {a}"));
        }
        if !p.layer_alpha0.is_empty() && p.layer_alpha0.len() != self.model.hidden.len() + 1 {
            return bad(format!(
                "projector.layer_alpha0 has {} entries for {} layers",
                p.layer_alpha0.len(),
                self.model.hidden.len() + 1
            ));
        }
        if let AlphaSchedule::Adaptive { decay, .. } = p.schedule {
            if !(decay > 0.0 && decay <= 1.0) {
                return bad(format!("projector.schedule.decay must be in (0, 1], got {decay}"));
            }
        }
        if !(p.rank_threshold > 0.0 && p.rank_threshold < 1.0) {
            return bad(format!("projector.rank_threshold must be in (0, 1), got {}", p.rank_threshold));
        }
        let e = &self.ebv;
        if e.dim == 0 || e.capacity == 0 {
            return bad("ebv.dim and ebv.capacity must be positive".into());
        }
        if !(0.0..1.0).contains(&e.gamma) {
            return bad(format!("ebv.gamma must be in [0, 1), got {}", e.gamma));
        }
        if !(e.step > 0.0 && e.step.is_finite()) {
            return bad(format!("ebv.step must be positive, got {}", e.step));
        }
        let classes: usize = self.dataset.groups.iter().map(Vec::len).sum();
        if self.head == HeadKind::Eae && classes > e.capacity {
            return bad(format!("{classes} classes exceed ebv.capacity {}", e.capacity));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses TOML on top of the defaults, then applies `key=value`
    /// overrides. Every key must already exist.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut tree = toml::Value::try_from(RunConfig::default()).expect("defaults serialize");
        let file: toml::Value = text.parse::<toml::Table>().map(toml::Value::Table).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut tree, file, "")?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: RunConfig = tree.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_overrides(&text, overrides)
    }
}

fn merge(base: &mut toml::Value, incoming: toml::Value, prefix: &str) -> Result<()> {
    match (base, incoming) {
        (toml::Value::Table(b), toml::Value::Table(i)) => {
            for (k, v) in i {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                // tagged enums (e.g. the alpha schedule) are replaced wholesale
                let replace_whole = b.get(&k).is_some_and(|old| old.get("kind").is_some());
                match b.get_mut(&k) {
                    Some(slot) if replace_whole => *slot = v,
                    Some(slot) => merge(slot, v, &key)?,
                    None => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Applies one `a.b.c=value` override. The value is read as a TOML literal,
/// falling back to a bare string.
pub fn apply_override(tree: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut slot = tree;
    for part in key.split('.') {
        slot = slot
            .get_mut(part)
            .ok_or_else(|| Error::Config(format!("unknown configuration key `{key}`")))?;
    }
    *slot = value;
    Ok(())
}
