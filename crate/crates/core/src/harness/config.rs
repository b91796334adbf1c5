//! JSON experiment configuration.
//!
//! ```json
//! {
//!   "dataset": { "kind": "blobs", "n_train": 20000, "n_test": 4000, "dim": 64,
//!                "classes": 10, "cluster_std": 2.4, "label_flip_prob": 0.0, "seed": 0 },
//!   "model": "mlp3",
//!   "epochs": 30,
//!   "batch_size": 128,
//!   "optimizer": { "kind": "adam", "lr": 0.001, "weight_decay": 0.0001 },
//!   "lr_schedule": { "milestones": [10, 20], "gamma": 0.5 },
//!   "trim": { "enabled": true, "p_start": 1.0, "p_end": 0.2 },
//!   "seeds": [1, 2, 3, 4, 5],
//!   "output": "out"
//! }
//! ```
//!
//! Unknown keys are rejected. See the README for the full default table.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::optim::{AdamConfig, LrSchedule, SgdConfig};
use crate::trim::TrimSchedule;

pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
/// Baseline test error of mlp3 on the default blobs task lands near 10%.
pub const DEFAULT_CLUSTER_STD: f64 = 2.4;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        #[serde(default = "defaults::n_train")]
        n_train: usize,
        #[serde(default = "defaults::n_test")]
        n_test: usize,
        #[serde(default = "defaults::dim")]
        dim: usize,
        #[serde(default = "defaults::classes")]
        classes: usize,
        #[serde(default = "defaults::cluster_std")]
        cluster_std: f64,
        #[serde(default)]
        label_flip_prob: f64,
        #[serde(default)]
        seed: u64,
    },
    /// CIFAR-10 binary batch files.
    Cifar10 { train: Vec<PathBuf>, test: PathBuf },
    /// MNIST IDX files, uncompressed.
    Mnist {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

impl DatasetSpec {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetSpec::Blobs { .. } => "blobs",
            DatasetSpec::Cifar10 { .. } => "cifar10",
            DatasetSpec::Mnist { .. } => "mnist",
        }
    }

    /// Makes relative file paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DatasetSpec::Blobs { .. } => {}
            DatasetSpec::Cifar10 { train, test } => {
                train.iter_mut().for_each(fix);
                fix(test);
            }
            DatasetSpec::Mnist {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    fix(p);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelTag {
    Mlp3,
    Tinycnn,
}

impl From<ModelTag> for Architecture {
    fn from(t: ModelTag) -> Self {
        match t {
            ModelTag::Mlp3 => Architecture::Mlp3,
            ModelTag::Tinycnn => Architecture::TinyCnn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerSpec {
    Adam {
        #[serde(default = "defaults::lr")]
        lr: f64,
        #[serde(default = "defaults::weight_decay")]
        weight_decay: f64,
        #[serde(default = "defaults::beta1")]
        beta1: f64,
        #[serde(default = "defaults::beta2")]
        beta2: f64,
        #[serde(default = "defaults::eps")]
        eps: f64,
    },
    Sgd {
        #[serde(default = "defaults::lr")]
        lr: f64,
        #[serde(default = "defaults::momentum")]
        momentum: f64,
        #[serde(default = "defaults::weight_decay")]
        weight_decay: f64,
    },
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec::Adam {
            lr: defaults::lr(),
            weight_decay: defaults::weight_decay(),
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            eps: defaults::eps(),
        }
    }
}

impl OptimizerSpec {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerSpec::Adam { lr, .. } | OptimizerSpec::Sgd { lr, .. } => lr,
        }
    }

    pub fn adam_config(&self) -> Option<AdamConfig> {
        match *self {
            OptimizerSpec::Adam {
                weight_decay,
                beta1,
                beta2,
                eps,
                ..
            } => Some(AdamConfig {
                beta1,
                beta2,
                eps,
                weight_decay,
            }),
            OptimizerSpec::Sgd { .. } => None,
        }
    }

    pub fn sgd_config(&self) -> Option<SgdConfig> {
        match *self {
            OptimizerSpec::Sgd {
                momentum,
                weight_decay,
                ..
            } => Some(SgdConfig {
                momentum,
                weight_decay,
            }),
            OptimizerSpec::Adam { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrScheduleSpec {
    /// Defaults to one third and two thirds of the epoch budget.
    #[serde(default)]
    pub milestones: Option<Vec<usize>>,
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
}

impl Default for LrScheduleSpec {
    fn default() -> Self {
        LrScheduleSpec {
            milestones: None,
            gamma: defaults::gamma(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrimSpec {
    #[serde(default = "defaults::yes")]
    pub enabled: bool,
    #[serde(default = "defaults::p_start")]
    pub p_start: f64,
    #[serde(default = "defaults::p_end")]
    pub p_end: f64,
    /// Backward only through the selected samples (same gradients up to
    /// summation rounding, less work).
    #[serde(default)]
    pub subset_recompute: bool,
}

impl Default for TrimSpec {
    fn default() -> Self {
        TrimSpec {
            enabled: true,
            p_start: defaults::p_start(),
            p_end: defaults::p_end(),
            subset_recompute: false,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    dataset: DatasetSpec,
    model: ModelTag,
    epochs: usize,
    #[serde(default = "defaults::batch_size")]
    batch_size: usize,
    #[serde(default)]
    optimizer: OptimizerSpec,
    #[serde(default)]
    lr_schedule: LrScheduleSpec,
    #[serde(default)]
    trim: TrimSpec,
    seed: Option<u64>,
    seeds: Option<Vec<u64>>,
    #[serde(default = "defaults::yes")]
    standardize: bool,
    #[serde(default = "defaults::output")]
    output: PathBuf,
}

/// A validated experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dataset: DatasetSpec,
    pub model: Architecture,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    pub lr_schedule: LrSchedule,
    pub trim: TrimSpec,
    pub seeds: Vec<u64>,
    pub standardize: bool,
    pub output: PathBuf,
}

mod defaults {
    pub fn n_train() -> usize {
        20_000
    }
    pub fn n_test() -> usize {
        4_000
    }
    pub fn dim() -> usize {
        64
    }
    pub fn classes() -> usize {
        10
    }
    pub fn cluster_std() -> f64 {
        super::DEFAULT_CLUSTER_STD
    }
    pub fn lr() -> f64 {
        0.001
    }
    pub fn weight_decay() -> f64 {
        0.0001
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn eps() -> f64 {
        1e-8
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn gamma() -> f64 {
        0.5
    }
    pub fn p_start() -> f64 {
        1.0
    }
    pub fn p_end() -> f64 {
        0.2
    }
    pub fn batch_size() -> usize {
        128
    }
    pub fn yes() -> bool {
        true
    }
    pub fn output() -> std::path::PathBuf {
        "trimnet-out".into()
    }
}

/// Milestones at one third and two thirds of training, e.g. 50 and 100 for
/// 150 epochs. Milestones that would fall on epoch 1 or collide are dropped.
pub fn default_milestones(epochs: usize) -> Vec<usize> {
    let mut out: Vec<usize> = [epochs as f64 / 3.0, 2.0 * epochs as f64 / 3.0]
        .iter()
        .map(|m| m.round() as usize)
        .filter(|&m| m >= 2 && m <= epochs)
        .collect();
    out.dedup();
    out
}

fn serde_error(e: serde_json::Error) -> Error {
    use serde_json::error::Category;
    match e.classify() {
        Category::Data => {
            let msg = e.to_string();
            let field = ["unknown field `", "missing field `", "unknown variant `"]
                .iter()
                .find_map(|prefix| {
                    let start = msg.find(prefix)? + prefix.len();
                    let len = msg[start..].find('`')?;
                    Some(msg[start..start + len].to_string())
                })
                .unwrap_or_else(|| "config".to_string());
            Error::validation(field, msg)
        }
        Category::Syntax | Category::Eof | Category::Io => Error::Parse(e.to_string()),
    }
}

fn require(ok: bool, field: &str, message: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::validation(field, message))
    }
}

/// Parses and validates a JSON config.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let raw: RawConfig = serde_json::from_str(text).map_err(serde_error)?;

    require(raw.epochs >= 1, "epochs", "must be at least 1")?;
    require(raw.batch_size >= 1, "batch_size", "must be at least 1")?;

    let seeds = match (raw.seed, raw.seeds) {
        (Some(_), Some(_)) => {
            return Err(Error::validation(
                "seed",
                "give either `seed` or `seeds`, not both",
            ))
        }
        (Some(s), None) => vec![s],
        (None, Some(list)) => list,
        (None, None) => DEFAULT_SEEDS.to_vec(),
    };
    require(!seeds.is_empty(), "seeds", "must list at least one seed")?;

    let t = raw.trim;
    require(
        t.p_start > 0.0 && t.p_start <= 1.0,
        "trim.p_start",
        format!("{} is outside (0, 1]", t.p_start),
    )?;
    require(
        t.p_end > 0.0 && t.p_end <= t.p_start,
        "trim.p_end",
        format!(
            "need 0 < p_end <= p_start, got p_end={} p_start={}",
            t.p_end, t.p_start
        ),
    )?;
    TrimSchedule::new(t.p_start, t.p_end, raw.epochs)
        .map_err(|e| Error::validation("trim", e.to_string()))?;

    match &raw.optimizer {
        OptimizerSpec::Adam {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } => {
            require(*lr > 0.0, "optimizer.lr", "must be positive")?;
            require(*weight_decay >= 0.0, "optimizer.weight_decay", "must be >= 0")?;
            require((0.0..1.0).contains(beta1), "optimizer.beta1", "must be in [0, 1)")?;
            require((0.0..1.0).contains(beta2), "optimizer.beta2", "must be in [0, 1)")?;
            require(*eps > 0.0, "optimizer.eps", "must be positive")?;
        }
        OptimizerSpec::Sgd {
            lr,
            momentum,
            weight_decay,
        } => {
            require(*lr > 0.0, "optimizer.lr", "must be positive")?;
            require(
                (0.0..1.0).contains(momentum),
                "optimizer.momentum",
                "must be in [0, 1)",
            )?;
            require(*weight_decay >= 0.0, "optimizer.weight_decay", "must be >= 0")?;
        }
    }

    let milestones = raw
        .lr_schedule
        .milestones
        .clone()
        .unwrap_or_else(|| default_milestones(raw.epochs));
    require(
        milestones.windows(2).all(|w| w[0] < w[1]),
        "lr_schedule.milestones",
        "must be strictly ascending",
    )?;
    require(
        milestones.iter().all(|&m| (1..=raw.epochs).contains(&m)),
        "lr_schedule.milestones",
        format!("must lie within [1, {}]", raw.epochs),
    )?;
    require(
        raw.lr_schedule.gamma > 0.0,
        "lr_schedule.gamma",
        "must be positive",
    )?;
    let lr_schedule = LrSchedule::new(raw.optimizer.lr(), milestones, raw.lr_schedule.gamma)
        .map_err(|e| Error::validation("lr_schedule", e.to_string()))?;

    match &raw.dataset {
        DatasetSpec::Blobs {
            n_train,
            n_test,
            dim,
            classes,
            cluster_std,
            label_flip_prob,
            ..
        } => {
            require(*classes >= 2, "dataset.classes", "must be at least 2")?;
            require(
                *n_train >= *classes,
                "dataset.n_train",
                "must be at least the class count",
            )?;
            require(*n_test >= 1, "dataset.n_test", "must be at least 1")?;
            require(*dim >= 1, "dataset.dim", "must be at least 1")?;
            require(*cluster_std > 0.0, "dataset.cluster_std", "must be positive")?;
            require(
                (0.0..1.0).contains(label_flip_prob),
                "dataset.label_flip_prob",
                "must be in [0, 1)",
            )?;
            require(
                raw.model == ModelTag::Mlp3,
                "model",
                "blobs samples are flat vectors; use mlp3",
            )?;
        }
        DatasetSpec::Cifar10 { train, .. } => {
            require(
                !train.is_empty(),
                "dataset.train",
                "needs at least one batch file",
            )?;
        }
        DatasetSpec::Mnist { .. } => {}
    }

    Ok(TrainConfig {
        dataset: raw.dataset,
        model: raw.model.into(),
        epochs: raw.epochs,
        batch_size: raw.batch_size,
        optimizer: raw.optimizer,
        lr_schedule,
        trim: raw.trim,
        seeds,
        standardize: raw.standardize,
        output: raw.output,
    })
}
