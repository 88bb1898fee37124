//! Run configuration: every hyperparameter of a continual training run,
//! with serde-backed JSON round-tripping and exhaustive validation.
//!
//! `method`, `seed`, and the three loss weights must be spelled out in a
//! config file; everything else has a desk-scale default and is materialized
//! back out when the resolved config is echoed next to a run's artifacts.

use serde::{Deserialize, Serialize};

use crate::datastream::AugmentSpec;
use crate::error::{CclError, Result};
use crate::evaluation::ProbeConfig;

/// Training regime: the full method or one of its baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Full continual contrastive learning: variance-sampled rehearsal,
    /// distillation, and the extra sample queue.
    Ccl,
    /// New tasks one by one, no countermeasures.
    Finetune,
    /// Random exemplar rehearsal only.
    SimpleRehearsal,
    /// Joint training on all tasks' data for the same total epoch budget.
    UpperBound,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ccl => "ccl",
            Method::Finetune => "finetune",
            Method::SimpleRehearsal => "simple_rehearsal",
            Method::UpperBound => "upper_bound",
        }
    }
}

/// Which batch rows the extra-sample-queue loss runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EsqRows {
    /// Full batch, old and new rows alike (the literal pseudo-code reading).
    #[default]
    All,
    /// Only rows of the current task.
    NewOnly,
}

/// How the exemplar memory grows across tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MemoryMode {
    /// Up to `n_per_cluster` per cluster per task, cumulative.
    #[default]
    PerClass,
    /// A fixed total budget shared equally by the `t_steps` tasks.
    FixedTotal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Cluster count; `null` means the true class count of each task.
    #[serde(default)]
    pub kmeans_k: Option<usize>,
    #[serde(default = "default_n_per_cluster")]
    pub n_per_cluster: usize,
    /// Augmented views per sample for the variance score.
    #[serde(default = "default_views")]
    pub views: usize,
    #[serde(default)]
    pub memory_mode: MemoryMode,
    #[serde(default = "default_kmeans_max_iter")]
    pub kmeans_max_iter: usize,
    #[serde(default = "default_kmeans_tol")]
    pub kmeans_tol: f64,
}

fn default_n_per_cluster() -> usize {
    20
}
fn default_views() -> usize {
    6
}
fn default_kmeans_max_iter() -> usize {
    100
}
fn default_kmeans_tol() -> f64 {
    1e-6
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kmeans_k: None,
            n_per_cluster: default_n_per_cluster(),
            views: default_views(),
            memory_mode: MemoryMode::default(),
            kmeans_max_iter: default_kmeans_max_iter(),
            kmeans_tol: default_kmeans_tol(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_embed_dim() -> usize {
    16
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { hidden: default_hidden(), embed_dim: default_embed_dim() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_sgd_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_lr() -> f64 {
    0.05
}
fn default_sgd_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            momentum: default_sgd_momentum(),
            weight_decay: default_weight_decay(),
        }
    }
}

/// Where samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic {
        #[serde(default = "default_num_classes")]
        num_classes: usize,
        #[serde(default = "default_per_class")]
        per_class: usize,
        #[serde(default = "default_input_dim")]
        input_dim: usize,
        #[serde(default = "default_class_spread")]
        class_spread: f64,
        #[serde(default = "default_within_spread")]
        within_spread: f64,
    },
    Csv {
        path: String,
    },
}

fn default_num_classes() -> usize {
    10
}
fn default_per_class() -> usize {
    200
}
fn default_input_dim() -> usize {
    32
}
fn default_class_spread() -> f64 {
    1.5
}
fn default_within_spread() -> f64 {
    1.0
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            num_classes: default_num_classes(),
            per_class: default_per_class(),
            input_dim: default_input_dim(),
            class_spread: default_class_spread(),
            within_spread: default_within_spread(),
        }
    }
}

/// Complete description of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    pub seed: u64,
    /// Weight of the memory-bank contrastive loss.
    pub lambda1: f64,
    /// Weight of the extra-sample-queue contrastive loss.
    pub lambda2: f64,
    /// Weight of the distillation loss.
    pub lambda3: f64,
    #[serde(default = "default_t_steps")]
    pub t_steps: usize,
    #[serde(default = "default_epochs_per_task")]
    pub epochs_per_task: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Contrastive temperature.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Distillation softmax temperature.
    #[serde(default = "default_tau_kd")]
    pub tau_kd: f64,
    /// Key-encoder EMA momentum.
    #[serde(default = "default_key_momentum")]
    pub key_momentum: f64,
    /// Teacher EMA momentum, applied once per epoch.
    #[serde(default = "default_teacher_momentum")]
    pub teacher_momentum: f64,
    #[serde(default = "default_queue_capacity")]
    pub queue_capacity: usize,
    #[serde(default = "default_esq_capacity")]
    pub esq_capacity: usize,
    #[serde(default)]
    pub esq_rows: EsqRows,
    /// Forced fraction of old rows per minibatch; `null` lets the shuffled
    /// pool decide.
    #[serde(default)]
    pub replay_ratio: Option<f64>,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub augment: AugmentSpec,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
}

fn default_t_steps() -> usize {
    5
}
fn default_epochs_per_task() -> usize {
    30
}
fn default_batch_size() -> usize {
    32
}
fn default_tau() -> f64 {
    0.2
}
fn default_tau_kd() -> f64 {
    0.1
}
fn default_key_momentum() -> f64 {
    0.99
}
fn default_teacher_momentum() -> f64 {
    0.996
}
fn default_queue_capacity() -> usize {
    256
}
fn default_esq_capacity() -> usize {
    128
}

impl RunConfig {
    /// A full default configuration for the given method and seed.
    pub fn defaults(method: Method, seed: u64) -> Self {
        Self {
            method,
            seed,
            lambda1: 0.9,
            lambda2: 0.1,
            lambda3: 0.1,
            t_steps: default_t_steps(),
            epochs_per_task: default_epochs_per_task(),
            batch_size: default_batch_size(),
            tau: default_tau(),
            tau_kd: default_tau_kd(),
            key_momentum: default_key_momentum(),
            teacher_momentum: default_teacher_momentum(),
            queue_capacity: default_queue_capacity(),
            esq_capacity: default_esq_capacity(),
            esq_rows: EsqRows::default(),
            replay_ratio: None,
            sampler: SamplerConfig::default(),
            encoder: EncoderConfig::default(),
            optimizer: OptimizerConfig::default(),
            augment: AugmentSpec::default(),
            dataset: DatasetConfig::default(),
            probe: ProbeConfig::default(),
        }
    }

    /// Baseline methods carry no distillation or extra-queue terms; this
    /// zeroes the unused weights so a method name alone is a valid setup.
    pub fn resolve(mut self) -> Result<Self> {
        if matches!(self.method, Method::Finetune | Method::SimpleRehearsal | Method::UpperBound) {
            self.lambda2 = 0.0;
            self.lambda3 = 0.0;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(name: &str, v: f64) -> Result<()> {
            if v <= 0.0 || !v.is_finite() {
                return Err(CclError::Config(format!("{name} must be positive")));
            }
            Ok(())
        }
        fn non_negative(name: &str, v: f64) -> Result<()> {
            if v < 0.0 || !v.is_finite() {
                return Err(CclError::Config(format!("{name} must be >= 0")));
            }
            Ok(())
        }
        fn unit_interval(name: &str, v: f64) -> Result<()> {
            if !(0.0..=1.0).contains(&v) {
                return Err(CclError::Config(format!("{name} must be in [0, 1]")));
            }
            Ok(())
        }

        non_negative("lambda1", self.lambda1)?;
        non_negative("lambda2", self.lambda2)?;
        non_negative("lambda3", self.lambda3)?;
        positive("tau", self.tau)?;
        positive("tau_kd", self.tau_kd)?;
        unit_interval("key_momentum", self.key_momentum)?;
        unit_interval("teacher_momentum", self.teacher_momentum)?;
        if self.t_steps == 0 {
            return Err(CclError::Config("t_steps must be at least 1".into()));
        }
        if self.epochs_per_task == 0 {
            return Err(CclError::Config("epochs_per_task must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(CclError::Config("batch_size must be at least 1".into()));
        }
        if self.queue_capacity == 0 {
            return Err(CclError::Config("queue_capacity must be at least 1".into()));
        }
        if self.esq_capacity == 0 {
            return Err(CclError::Config("esq_capacity must be at least 1".into()));
        }
        if let Some(r) = self.replay_ratio {
            if !(0.0..1.0).contains(&r) {
                return Err(CclError::Config("replay_ratio must be in [0, 1)".into()));
            }
        }
        if self.sampler.n_per_cluster == 0 {
            return Err(CclError::Config("sampler.n_per_cluster must be at least 1".into()));
        }
        if self.sampler.views < 2 {
            return Err(CclError::Config("sampler.views must be at least 2".into()));
        }
        if let Some(k) = self.sampler.kmeans_k {
            if k == 0 {
                return Err(CclError::Config("sampler.kmeans_k must be at least 1".into()));
            }
        }
        if self.encoder.embed_dim == 0 {
            return Err(CclError::Config("encoder.embed_dim must be at least 1".into()));
        }
        if self.encoder.hidden.contains(&0) {
            return Err(CclError::Config("encoder.hidden widths must be at least 1".into()));
        }
        positive("optimizer.learning_rate", self.optimizer.learning_rate)?;
        if !(0.0..1.0).contains(&self.optimizer.momentum) {
            return Err(CclError::Config("optimizer.momentum must be in [0, 1)".into()));
        }
        non_negative("optimizer.weight_decay", self.optimizer.weight_decay)?;
        self.augment.validate()?;
        match &self.dataset {
            DatasetConfig::Synthetic { num_classes, per_class, input_dim, class_spread, within_spread } => {
                if *num_classes == 0 || *per_class == 0 || *input_dim == 0 {
                    return Err(CclError::Config("dataset counts must be at least 1".into()));
                }
                positive("dataset.class_spread", *class_spread)?;
                positive("dataset.within_spread", *within_spread)?;
                if self.t_steps > *num_classes {
                    return Err(CclError::Config("t_steps must not exceed dataset.num_classes".into()));
                }
            }
            DatasetConfig::Csv { path } => {
                if path.is_empty() {
                    return Err(CclError::Config("dataset.path must not be empty".into()));
                }
            }
        }
        self.probe.validate()?;
        Ok(())
    }
}
