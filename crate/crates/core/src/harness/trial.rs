use crate::autodiff::Tape;
use crate::data::{self, BatchPlan, Dataset, Split};
use crate::error::{Error, Result};
use crate::harness::config::{DatasetSpec, OptimizerSpec, TrainConfig};
use crate::kernels;
use crate::model::{self, Model};
use crate::optim::{AdamState, Optimizer, SgdState};
use crate::rng::Prng;
use crate::tensor::Tensor;
use crate::trim::{self, TrimSchedule};

/// Stream id for weight initialization. Epoch shuffles use streams `1..=E`.
pub const INIT_STREAM: u64 = 0;

/// Training and test splits, already standardized if requested.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
}

fn concat(parts: Vec<Dataset>, split: Split) -> Result<Dataset> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("no dataset parts to join".into()))?;
    let sample_shape = first.sample_shape().to_vec();
    let classes = parts.iter().map(|d| d.class_count).max().unwrap_or(0);
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for part in parts {
        if part.sample_shape() != sample_shape.as_slice() {
            return Err(Error::Consistency(format!(
                "sample shape {:?} differs from {:?}",
                part.sample_shape(),
                sample_shape
            )));
        }
        labels.extend_from_slice(&part.labels);
        values.extend(part.inputs.into_data());
    }
    let mut shape = vec![labels.len()];
    shape.extend_from_slice(&sample_shape);
    Dataset::new(Tensor::new(&shape, values)?, labels, classes, split)
}

fn read(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Builds or loads the splits named by the config.
pub fn prepare_data(cfg: &TrainConfig) -> Result<PreparedData> {
    let (train, test) = match &cfg.dataset {
        DatasetSpec::Blobs {
            n_train,
            n_test,
            dim,
            classes,
            cluster_std,
            label_flip_prob,
            seed,
        } => {
            // One draw so both splits share cluster centers.
            let mut prng = Prng::new(*seed);
            let all = data::synth_blobs(
                &mut prng,
                n_train + n_test,
                *dim,
                *classes,
                *cluster_std,
                *label_flip_prob,
                Split::Train,
            )?;
            let (train, mut test) = all.split_at(*n_train)?;
            test.split = Split::Test;
            (train, test)
        }
        DatasetSpec::Cifar10 { train, test } => {
            let parts = train
                .iter()
                .map(|p| data::load_cifar10_bin(&read(p)?, Split::Train))
                .collect::<Result<Vec<_>>>()?;
            (
                concat(parts, Split::Train)?,
                data::load_cifar10_bin(&read(test)?, Split::Test)?,
            )
        }
        DatasetSpec::Mnist {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let mut train = data::load_idx(&read(train_images)?, &read(train_labels)?, Split::Train)?;
            let mut test = data::load_idx(&read(test_images)?, &read(test_labels)?, Split::Test)?;
            let classes = train.class_count.max(test.class_count);
            train.class_count = classes;
            test.class_count = classes;
            (train, test)
        }
    };
    if train.sample_shape() != test.sample_shape() {
        return Err(Error::Consistency(format!(
            "train samples {:?} vs test samples {:?}",
            train.sample_shape(),
            test.sample_shape()
        )));
    }
    let (train, test) = if cfg.standardize {
        let (a, b, _) = data::standardize(train, test)?;
        (a, b)
    } else {
        (train, test)
    };
    Ok(PreparedData { train, test })
}

/// Per-epoch record of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub seed: u64,
    pub epoch: usize,
    pub p_fraction: f64,
    pub lr: f64,
    /// Mean over batches of the loss that was differentiated.
    pub train_loss_trimmed: f64,
    /// Mean over batches of the untrimmed batch-mean loss.
    pub train_loss_full: f64,
    pub test_error: f64,
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub seed: u64,
    pub trimming: bool,
    pub rows: Vec<MetricsRow>,
    pub model: Model,
}

impl TrialOutcome {
    pub fn final_test_error(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.test_error)
    }
}

fn build_optimizer(spec: &OptimizerSpec, model: &Model) -> Result<Optimizer> {
    Ok(match (spec.adam_config(), spec.sgd_config()) {
        (Some(cfg), _) => Optimizer::Adam {
            state: AdamState::new(model.params())?,
            cfg,
        },
        (None, Some(cfg)) => Optimizer::Sgd {
            state: SgdState::new(model.params())?,
            cfg,
        },
        (None, None) => return Err(Error::Contract("optimizer spec has no settings".into())),
    })
}

fn scalar(tape: &Tape, id: crate::autodiff::NodeId) -> Result<f64> {
    tape.value(id)
        .item()
        .ok_or_else(|| Error::Contract("loss node is not a scalar".into()))
}

/// Loss values and gradients for one batch.
struct BatchStep {
    trimmed: f64,
    full: f64,
    grads: Vec<Tensor>,
}

fn batch_step(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    p: Option<f64>,
    subset_recompute: bool,
) -> Result<BatchStep> {
    let mut tape = Tape::new();
    let losses = model::forward_per_sample_loss(&mut tape, model, x, labels)?;
    let full = kernels::sum_ascending(losses.values.data()) / labels.len() as f64;
    let Some(p) = p else {
        let root = tape.mean(losses.node)?;
        tape.backward(root)?;
        return Ok(BatchStep {
            trimmed: scalar(&tape, root)?,
            full,
            grads: model::collect_grads(&tape, &losses.params)?,
        });
    };
    let plan = trim::plan_for(&losses.values, p)?;
    if subset_recompute {
        let rows = plan.sorted_selection();
        let picked: Vec<f64> = rows.iter().map(|&i| losses.values.data()[i]).collect();
        Ok(BatchStep {
            trimmed: kernels::sum_ascending(&picked) / plan.k as f64,
            full,
            grads: trim::subset_recompute_gradients(model, x, labels, &plan)?,
        })
    } else {
        let root = trim::trimmed_mean(&mut tape, losses.node, &plan)?;
        tape.backward(root)?;
        Ok(BatchStep {
            trimmed: scalar(&tape, root)?,
            full,
            grads: model::collect_grads(&tape, &losses.params)?,
        })
    }
}

/// Trains one model from scratch. `trimming` selects between the trimmed
/// objective (with the config's schedule) and the plain batch mean.
pub fn run_trial(cfg: &TrainConfig, data: &PreparedData, seed: u64, trimming: bool) -> Result<TrialOutcome> {
    let train = &data.train;
    let mut model = Model::new(cfg.model, train.sample_shape(), train.class_count)?;
    model.init_params(&mut Prng::derive(seed, INIT_STREAM))?;
    let mut optimizer = build_optimizer(&cfg.optimizer, &model)?;
    let schedule = TrimSchedule::new(cfg.trim.p_start, cfg.trim.p_end, cfg.epochs)?;

    let mut rows = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let p = if trimming {
            Some(schedule.fraction_at_epoch(epoch)?)
        } else {
            None
        };
        let lr = cfg.lr_schedule.lr_at_epoch(epoch);
        let plan = BatchPlan::new(train.len(), cfg.batch_size, seed, epoch)?;
        let mut trimmed = Vec::new();
        let mut full = Vec::new();
        for idx in plan.batches() {
            let x = kernels::gather_rows(&train.inputs, idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let step = batch_step(&model, &x, &labels, p, cfg.trim.subset_recompute)?;
            optimizer.step(&mut model.params_mut(), &step.grads, lr)?;
            trimmed.push(step.trimmed);
            full.push(step.full);
        }
        let batches = trimmed.len() as f64;
        rows.push(MetricsRow {
            seed,
            epoch,
            p_fraction: p.unwrap_or(1.0),
            lr,
            train_loss_trimmed: kernels::sum_ascending(&trimmed) / batches,
            train_loss_full: kernels::sum_ascending(&full) / batches,
            test_error: model::top1_error(&model, &data.test)?,
        });
    }
    Ok(TrialOutcome {
        seed,
        trimming,
        rows,
        model,
    })
}
