//! Layer stacks, initialization, the per-sample loss head, and evaluation.

use std::fmt;

use crate::autodiff::{NodeId, Tape};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels;
use crate::rng::Prng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    /// dense(d→256) · relu · dense(256→128) · relu · dense(128→classes)
    Mlp3,
    /// conv(c→16) · relu · pool · conv(16→32) · relu · pool · flatten · dense(→classes)
    TinyCnn,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Mlp3 => "mlp3",
            Architecture::TinyCnn => "tinycnn",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `weight[in, out]`, `bias[out]`.
    Dense {
        weight: Tensor,
        bias: Tensor,
    },
    Relu,
    /// `weight[filters, channels, 3, 3]`, `bias[filters]`.
    Conv2d {
        weight: Tensor,
        bias: Tensor,
    },
    MaxPool2,
    Flatten,
}

impl Layer {
    pub fn dense(inputs: usize, outputs: usize) -> Result<Self> {
        Ok(Layer::Dense {
            weight: Tensor::zeros(&[inputs, outputs])?,
            bias: Tensor::zeros(&[outputs])?,
        })
    }

    pub fn conv2d(channels: usize, filters: usize) -> Result<Self> {
        Ok(Layer::Conv2d {
            weight: Tensor::zeros(&[filters, channels, 3, 3])?,
            bias: Tensor::zeros(&[filters])?,
        })
    }

    /// He-normal weights, zero biases. Weights are drawn row-major.
    pub fn init(&mut self, prng: &mut Prng) -> Result<()> {
        match self {
            Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias } => {
                let fan_in: usize = match weight.rank() {
                    2 => weight.shape()[0],
                    _ => weight.shape()[1..].iter().product(),
                };
                let std = (2.0 / fan_in as f64).sqrt();
                *weight = Tensor::randn(prng, weight.shape(), 0.0, std)?;
                *bias = Tensor::zeros(bias.shape())?;
            }
            Layer::Relu | Layer::MaxPool2 | Layer::Flatten => {}
        }
        Ok(())
    }

    /// Whether the layer mixes information across samples of a batch.
    /// None of the layers in this crate do.
    pub fn couples_batch(&self) -> bool {
        false
    }

    fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias } => vec![weight, bias],
            _ => vec![],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias } => vec![weight, bias],
            _ => vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub architecture: Architecture,
    pub layers: Vec<Layer>,
    sample_shape: Vec<usize>,
    classes: usize,
}

impl Model {
    /// Builds an uninitialized (all-zero) model for samples of `sample_shape`.
    ///
    /// `mlp3` takes `[d]`; `tinycnn` takes `[channels, h, w]` with `h` and `w`
    /// divisible by 4.
    pub fn new(architecture: Architecture, sample_shape: &[usize], classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Parameter(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        let layers = match (architecture, sample_shape) {
            (Architecture::Mlp3, &[d]) if d > 0 => vec![
                Layer::dense(d, 256)?,
                Layer::Relu,
                Layer::dense(256, 128)?,
                Layer::Relu,
                Layer::dense(128, classes)?,
            ],
            (Architecture::TinyCnn, &[c, h, w]) if c > 0 && h % 4 == 0 && w % 4 == 0 && h > 0 && w > 0 => {
                vec![
                    Layer::conv2d(c, 16)?,
                    Layer::Relu,
                    Layer::MaxPool2,
                    Layer::conv2d(16, 32)?,
                    Layer::Relu,
                    Layer::MaxPool2,
                    Layer::Flatten,
                    Layer::dense(32 * (h / 4) * (w / 4), classes)?,
                ]
            }
            _ => {
                return Err(Error::shape(format!(
                    "{architecture} cannot take samples of shape {sample_shape:?}"
                )))
            }
        };
        Ok(Model {
            architecture,
            layers,
            sample_shape: sample_shape.to_vec(),
            classes,
        })
    }

    /// Draws every parameter in layer order.
    pub fn init_params(&mut self, prng: &mut Prng) -> Result<()> {
        for layer in &mut self.layers {
            layer.init(prng)?;
        }
        Ok(())
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Parameters in layer order, weight before bias.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn is_batch_coupled(&self) -> bool {
        self.layers.iter().any(Layer::couples_batch)
    }

    fn check_batch(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != self.sample_shape.len() + 1 || x.shape()[1..] != self.sample_shape[..] {
            return Err(Error::shape(format!(
                "batch {:?} does not match sample shape {:?}",
                x.shape(),
                self.sample_shape
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`; returns the logits node and the
    /// parameter nodes in [`Model::params`] order.
    pub fn record(&self, tape: &mut Tape, x: &Tensor) -> Result<(NodeId, Vec<NodeId>)> {
        self.check_batch(x)?;
        let mut h = tape.input(x.clone(), false);
        let mut params = Vec::new();
        for layer in &self.layers {
            h = match layer {
                Layer::Dense { weight, bias } => {
                    let w = tape.input(weight.clone(), true);
                    let b = tape.input(bias.clone(), true);
                    params.extend([w, b]);
                    let z = tape.matmul(h, w)?;
                    tape.add_bias(z, b)?
                }
                Layer::Conv2d { weight, bias } => {
                    let w = tape.input(weight.clone(), true);
                    let b = tape.input(bias.clone(), true);
                    params.extend([w, b]);
                    tape.conv2d(h, w, b)?
                }
                Layer::Relu => tape.relu(h)?,
                Layer::MaxPool2 => tape.maxpool2(h)?,
                Layer::Flatten => {
                    let v = tape.value(h);
                    let shape = [v.rows(), v.row_len()];
                    tape.reshape(h, &shape)?
                }
            };
        }
        Ok((h, params))
    }

    /// Logits without recording a tape. Same kernels as [`Model::record`].
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_batch(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Dense { weight, bias } => kernels::add_bias(&kernels::matmul(&h, weight)?, bias)?,
                Layer::Conv2d { weight, bias } => kernels::conv2d_forward(&h, weight, bias)?,
                Layer::Relu => kernels::relu(&h),
                Layer::MaxPool2 => kernels::maxpool2_forward(&h)?.0,
                Layer::Flatten => {
                    let shape = [h.rows(), h.row_len()];
                    h.reshape(&shape)?
                }
            };
        }
        Ok(h)
    }
}

/// Per-sample cross-entropy losses of one batch, as recorded on a tape.
#[derive(Debug, Clone)]
pub struct PerSampleLoss {
    pub values: Tensor,
    pub node: NodeId,
    /// Parameter nodes in [`Model::params`] order.
    pub params: Vec<NodeId>,
}

/// Forward pass ending in one cross-entropy loss per sample. No batch
/// reduction happens here.
pub fn forward_per_sample_loss(
    tape: &mut Tape,
    model: &Model,
    x: &Tensor,
    labels: &[usize],
) -> Result<PerSampleLoss> {
    if let Some(&label) = labels.iter().find(|&&l| l >= model.classes) {
        return Err(Error::Label {
            label,
            classes: model.classes,
        });
    }
    let (logits, params) = model.record(tape, x)?;
    let node = tape.softmax_ce_per_sample(logits, labels)?;
    Ok(PerSampleLoss {
        values: tape.value(node).clone(),
        node,
        params,
    })
}

/// Gradients of the mean loss over `params`, read back after `backward`.
pub(crate) fn collect_grads(tape: &Tape, params: &[NodeId]) -> Result<Vec<Tensor>> {
    params
        .iter()
        .map(|&id| {
            tape.grad(id)
                .cloned()
                .ok_or_else(|| Error::contract("parameter node has no gradient"))
        })
        .collect()
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_CHUNK: usize = 256;

/// Fraction of samples whose highest logit is not the label.
pub fn top1_error(model: &Model, data: &Dataset) -> Result<f64> {
    let n = data.len();
    if n == 0 {
        return Err(Error::contract("top1_error on an empty split"));
    }
    let mut wrong = 0usize;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let x = kernels::gather_rows(&data.inputs, chunk)?;
        let logits = model.logits(&x)?;
        let c = logits.shape()[1];
        for (row, &i) in logits.data().chunks_exact(c).zip(chunk) {
            if argmax(row) != data.labels[i] {
                wrong += 1;
            }
        }
    }
    Ok(wrong as f64 / n as f64)
}
