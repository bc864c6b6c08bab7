//! Experiment configuration files.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use rlkd_core::datasets::QuadrantSpec;
use rlkd_core::models::OptimizerKind;
use rlkd_core::policy::GradientMode;
use rlkd_core::trainer::{Schedule, SelectorPretrainReward};

/// Hyperparameter search grids, kept as presets.
pub const ALPHA_GRID: [f64; 3] = [0.2, 0.5, 0.7];
pub const TEMPERATURE_GRID: [f64; 3] = [5.0, 10.0, 20.0];
pub const GAMMA_GRID: [f64; 4] = [0.3, 0.5, 0.7, 0.9];
pub const FINE_TUNING_LEARNING_RATES: [f64; 3] = [1e-5, 2e-5, 5e-5];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid value for `{field}`: {detail}")]
    Field { field: &'static str, detail: String },
}

fn field(field: &'static str, detail: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field,
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkConfig,
    #[serde(default)]
    pub teachers: TeacherPoolConfig,
    #[serde(default)]
    pub student: StudentArch,
    pub method: Method,
    #[serde(default)]
    pub hyper: Hyperparameters,
    /// Run seeds. When omitted, the `SEED` environment variable (or 0)
    /// supplies a single seed.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum BenchmarkConfig {
    /// Region benchmark regenerated for every run seed.
    Synthetic(SyntheticBenchmark),
    Files(FileBenchmark),
}

fn default_feature_dim() -> usize {
    8
}
fn default_cluster_std() -> f64 {
    0.4
}
fn default_class_offset() -> f64 {
    1.0
}
fn default_region_radius() -> f64 {
    4.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticBenchmark {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub num_classes: usize,
    pub num_regions: usize,
    pub label_noise: f64,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_cluster_std")]
    pub cluster_std: f64,
    #[serde(default = "default_class_offset")]
    pub class_offset: f64,
    #[serde(default = "default_region_radius")]
    pub region_radius: f64,
}

impl SyntheticBenchmark {
    pub fn spec(&self, seed: u64) -> QuadrantSpec {
        QuadrantSpec {
            seed,
            n_train: self.n_train,
            n_dev: self.n_dev,
            n_test: self.n_test,
            num_classes: self.num_classes,
            num_regions: self.num_regions,
            label_noise: self.label_noise,
            feature_dim: self.feature_dim,
            cluster_std: self.cluster_std,
            class_offset: self.class_offset,
            region_radius: self.region_radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileBenchmark {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
    /// Precomputed teacher rows; when absent a pool is trained.
    #[serde(default)]
    pub teacher_rows: Option<TeacherRowFiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherRowFiles {
    pub num_teachers: usize,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
}

fn default_teacher_hidden() -> Vec<Vec<usize>> {
    vec![vec![64, 64]; 4]
}
fn default_corrupt_regions() -> Vec<Option<u32>> {
    vec![Some(1), Some(2), Some(3), Some(4)]
}
fn default_teacher_epochs() -> usize {
    30
}
fn default_batch_size() -> usize {
    32
}
fn default_teacher_lr() -> f64 {
    1e-2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherPoolConfig {
    /// Hidden sizes per teacher; the pool size is the length.
    #[serde(default = "default_teacher_hidden")]
    pub hidden: Vec<Vec<usize>>,
    /// Region whose labels each teacher sees randomized (`null` = clean).
    #[serde(default = "default_corrupt_regions")]
    pub corrupt_regions: Vec<Option<u32>>,
    #[serde(default = "default_teacher_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_teacher_lr")]
    pub learning_rate: f64,
}

impl Default for TeacherPoolConfig {
    fn default() -> Self {
        TeacherPoolConfig {
            hidden: default_teacher_hidden(),
            corrupt_regions: default_corrupt_regions(),
            epochs: default_teacher_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_teacher_lr(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum StudentArch {
    /// One hidden layer of 8 units.
    #[default]
    Small,
    /// Two hidden layers of 32 units.
    Large,
    Custom(Vec<usize>),
}

impl StudentArch {
    pub fn hidden(&self) -> Vec<usize> {
        match self {
            StudentArch::Small => vec![8],
            StudentArch::Large => vec![32, 32],
            StudentArch::Custom(h) => h.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Ft,
    /// 1-based teacher index.
    VkdSingle(usize),
    VkdUniform,
    VkdWeighted,
    VkdRandSingle,
    VkdLrTrain,
    VkdLrDev,
    VkdBestSingle,
    Rlkd(RewardVariant),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardVariant {
    R1,
    R2,
    R3,
}

impl Method {
    pub fn is_rlkd(&self) -> bool {
        matches!(self, Method::Rlkd(_))
    }

    pub fn uses_teachers(&self) -> bool {
        *self != Method::Ft
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Ft => write!(f, "ft"),
            Method::VkdSingle(k) => write!(f, "vkd-single({k})"),
            Method::VkdUniform => write!(f, "vkd-uniform"),
            Method::VkdWeighted => write!(f, "vkd-weighted"),
            Method::VkdRandSingle => write!(f, "vkd-rand-single"),
            Method::VkdLrTrain => write!(f, "vkd-lr-train"),
            Method::VkdLrDev => write!(f, "vkd-lr-dev"),
            Method::VkdBestSingle => write!(f, "vkd-best-single"),
            Method::Rlkd(RewardVariant::R1) => write!(f, "rlkd-r1"),
            Method::Rlkd(RewardVariant::R2) => write!(f, "rlkd-r2"),
            Method::Rlkd(RewardVariant::R3) => write!(f, "rlkd-r3"),
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "ft" => Method::Ft,
            "vkd-uniform" => Method::VkdUniform,
            "vkd-weighted" => Method::VkdWeighted,
            "vkd-rand-single" => Method::VkdRandSingle,
            "vkd-lr-train" => Method::VkdLrTrain,
            "vkd-lr-dev" => Method::VkdLrDev,
            "vkd-best-single" => Method::VkdBestSingle,
            "rlkd-r1" => Method::Rlkd(RewardVariant::R1),
            "rlkd-r2" => Method::Rlkd(RewardVariant::R2),
            "rlkd-r3" => Method::Rlkd(RewardVariant::R3),
            other => {
                let k = other
                    .strip_prefix("vkd-single(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|k| k.parse::<usize>().ok())
                    .filter(|k| *k >= 1)
                    .ok_or_else(|| format!("unknown method `{other}`"))?;
                Method::VkdSingle(k)
            }
        })
    }
}

impl Serialize for Method {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn default_alpha() -> f64 {
    0.5
}
fn default_temperature() -> f64 {
    5.0
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    10
}
fn default_pretrain_epochs() -> usize {
    5
}
fn default_beta() -> f64 {
    1e-3
}
fn default_dev_subsample() -> usize {
    256
}
fn default_selector_epochs() -> usize {
    2
}
fn default_lr_iterations() -> usize {
    500
}
fn default_lr_step() -> f64 {
    0.1
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}
fn default_gradient_mode() -> GradientMode {
    GradientMode::LogGradient
}

/// Training hyperparameters. Every student method trains for
/// `pretrain_epochs + epochs` epochs in total; RL-KD spends the first
/// `pretrain_epochs` on uniform-ensemble distillation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparameters {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub scale_by_t_squared: bool,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_pretrain_epochs")]
    pub pretrain_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Policy learning rate.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Required by rlkd-r3; no default.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "default_dev_subsample")]
    pub dev_subsample: usize,
    #[serde(default)]
    pub reward_baseline: Option<f64>,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "default_gradient_mode")]
    pub gradient_mode: GradientMode,
    #[serde(default)]
    pub init_bias: f64,
    #[serde(default = "default_selector_epochs")]
    pub selector_pretrain_epochs: usize,
    #[serde(default = "default_beta")]
    pub selector_pretrain_beta: f64,
    #[serde(default)]
    pub selector_pretrain_reward: SelectorPretrainReward,
    /// Fixed weights for vkd-weighted; default is dev accuracy share.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    #[serde(default = "default_lr_iterations")]
    pub lr_ensemble_iterations: usize,
    #[serde(default = "default_lr_step")]
    pub lr_ensemble_step: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let config: ExperimentConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let h = &self.hyper;
        if !(0.0..=1.0).contains(&h.alpha) {
            return Err(field("alpha", format!("{} outside [0, 1]", h.alpha)));
        }
        if !(h.temperature > 0.0 && h.temperature.is_finite()) {
            return Err(field("temperature", "must be positive"));
        }
        if !(h.learning_rate > 0.0 && h.learning_rate.is_finite()) {
            return Err(field("learning_rate", "must be positive"));
        }
        if h.batch_size == 0 {
            return Err(field("batch_size", "must be positive"));
        }
        if h.epochs == 0 {
            return Err(field("epochs", "must be at least 1"));
        }
        if !(h.beta >= 0.0 && h.beta.is_finite()) {
            return Err(field("beta", "must be nonnegative"));
        }
        if !(h.selector_pretrain_beta >= 0.0 && h.selector_pretrain_beta.is_finite()) {
            return Err(field("selector_pretrain_beta", "must be nonnegative"));
        }
        if let Some(d) = h.reward_baseline {
            if !(0.0..1.0).contains(&d) {
                return Err(field("reward_baseline", format!("decay {d} outside [0, 1)")));
            }
        }
        match (self.method, h.gamma) {
            (Method::Rlkd(RewardVariant::R3), None) => {
                return Err(field("gamma", "rlkd-r3 requires gamma"));
            }
            (_, Some(g)) if !(0.0..=1.0).contains(&g) => {
                return Err(field("gamma", format!("{g} outside [0, 1]")));
            }
            _ => {}
        }
        if h.dev_subsample == 0 {
            return Err(field("dev_subsample", "must be positive"));
        }
        if let Some(seeds) = &self.seeds {
            if seeds.is_empty() {
                return Err(field("seeds", "list is empty"));
            }
        }
        let t = &self.teachers;
        if t.hidden.is_empty() {
            return Err(field("teachers.hidden", "at least one teacher required"));
        }
        if t.corrupt_regions.len() != t.hidden.len() {
            return Err(field("teachers.corrupt_regions", "one entry per teacher required"));
        }
        if !(t.learning_rate > 0.0) || t.batch_size == 0 {
            return Err(field("teachers", "learning rate and batch size must be positive"));
        }
        let k = self.num_teachers();
        if let Method::VkdSingle(i) = self.method {
            if i > k {
                return Err(field("method", format!("teacher {i} out of range for {k} teachers")));
            }
        }
        if let Some(w) = &h.weights {
            if w.len() != k {
                return Err(field("weights", format!("{} weights for {k} teachers", w.len())));
            }
        }
        if let StudentArch::Custom(hidden) = &self.student {
            if hidden.contains(&0) {
                return Err(field("student", "hidden widths must be positive"));
            }
        }
        Ok(())
    }

    pub fn num_teachers(&self) -> usize {
        match &self.benchmark {
            BenchmarkConfig::Files(FileBenchmark {
                teacher_rows: Some(rows),
                ..
            }) => rows.num_teachers,
            _ => self.teachers.hidden.len(),
        }
    }

    /// Seeds to run: the configured list, else `SEED` from the
    /// environment, else 0.
    pub fn resolve_seeds(&self, env_seed: Option<&str>) -> Result<Vec<u64>, ConfigError> {
        match (&self.seeds, env_seed) {
            (Some(s), _) => Ok(s.clone()),
            (None, Some(v)) => v
                .trim()
                .parse()
                .map(|s| vec![s])
                .map_err(|_| field("SEED", format!("`{v}` is not an unsigned integer"))),
            (None, None) => Ok(vec![0]),
        }
    }

    /// SHA-256 of the canonical (key-sorted, defaults-filled) JSON form.
    pub fn hash(&self) -> String {
        canonical_hash(self)
    }

    /// Hash of the benchmark and teacher settings only; reports are
    /// comparable when these agree.
    pub fn benchmark_hash(&self) -> String {
        canonical_hash(&(&self.benchmark, &self.teachers))
    }
}

pub fn canonical_hash<T: Serialize>(value: &T) -> String {
    // serde_json maps are ordered by key, so this text is canonical.
    let value = serde_json::to_value(value).expect("config serializes");
    let text = serde_json::to_string(&value).expect("value serializes");
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
