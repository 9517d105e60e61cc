//! The detector network: `conv3x3+relu` blocks with an optional 2x2 max pool, a stack of
//! `dense+relu+dropout` layers, and two heads sharing the hidden layers: a softmax classifier and a
//! logistic location regressor producing `(w, l, h, d)` ratios in `(0, 1)`.

mod checkpoint;
mod forward;
mod loss;
mod optim;
mod train;

use serde::{Deserialize, Serialize};

use crate::dataset::LOC_DIM;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{DropoutMasks, Mode, Prediction, Trace};
pub use loss::{backward, loss, LossBreakdown, Targets};
pub use optim::{adam_update, Adam};
pub use train::{train, TrainReport};

/// Kernel edge length of every convolution.
pub const KERNEL: usize = 3;
/// Max-pool window (and stride).
pub const POOL: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InputShape {
    Flat {
        dim: usize,
    },
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl InputShape {
    pub fn dims(&self) -> Vec<usize> {
        match *self {
            InputShape::Flat { dim } => vec![dim],
            InputShape::Image {
                channels,
                height,
                width,
            } => vec![channels, height, width],
        }
    }

    /// Infers the input shape from one sample's feature shape.
    pub fn from_dims(dims: &[usize]) -> Result<Self> {
        match *dims {
            [dim] => Ok(InputShape::Flat { dim }),
            [channels, height, width] => Ok(InputShape::Image {
                channels,
                height,
                width,
            }),
            _ => Err(Error::Dimension(format!(
                "features of shape {dims:?} are neither flat nor C x H x W"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub input: InputShape,
    pub conv_layers: usize,
    pub conv_kernels: usize,
    /// Zero-based conv layer after which the 2x2 max pool runs; `None` disables pooling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_after: Option<usize>,
    pub fc_widths: Vec<usize>,
    pub dropout: f64,
    pub num_classes: usize,
    /// Weight of the masked location MSE relative to the cross-entropy.
    pub loc_weight: f64,
    pub weight_decay: f64,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
}

impl NetworkConfig {
    /// Full-size detector: 4 conv layers of 32 3x3 kernels, one pool, 3 dense layers of 256 units
    /// each followed by dropout 0.5, weight decay 1e-4.
    pub fn paper(input: InputShape, num_classes: usize) -> Self {
        let conv_layers = match input {
            InputShape::Flat { .. } => 0,
            InputShape::Image { .. } => 4,
        };
        Self {
            input,
            conv_layers,
            conv_kernels: 32,
            pool_after: conv_layers.checked_sub(1),
            fc_widths: vec![256, 256, 256],
            dropout: 0.5,
            num_classes,
            loc_weight: 1.0,
            weight_decay: 1e-4,
            adam: AdamConfig::default(),
            epochs: 30,
            batch_size: 64,
        }
    }

    /// Reduced instance with the same topology rules, sized for desk-scale pools.
    pub fn desk(input: InputShape, num_classes: usize) -> Self {
        let conv_layers = match input {
            InputShape::Flat { .. } => 0,
            InputShape::Image { .. } => 2,
        };
        Self {
            conv_layers,
            conv_kernels: 8,
            pool_after: conv_layers.checked_sub(1),
            fc_widths: vec![64, 64],
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            epochs: 40,
            batch_size: 32,
            ..Self::paper(input, num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input.dims().contains(&0) {
            return bad(format!("input shape {:?} has a zero dimension", self.input));
        }
        if matches!(self.input, InputShape::Flat { .. }) && self.conv_layers > 0 {
            return bad("convolution layers need an image input".into());
        }
        if self.conv_layers > 0 && self.conv_kernels == 0 {
            return bad("conv_kernels must be positive".into());
        }
        if let Some(p) = self.pool_after {
            if p >= self.conv_layers {
                return bad(format!(
                    "pool_after {p} but only {} conv layers",
                    self.conv_layers
                ));
            }
        }
        if self.fc_widths.contains(&0) {
            return bad("fully connected widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.num_classes < 1 {
            return bad("need at least one class".into());
        }
        if !(self.loc_weight >= 0.0 && self.loc_weight.is_finite()) {
            return bad(format!("loc_weight {} must be >= 0", self.loc_weight));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0)
        {
            return bad(format!("invalid Adam settings {a:?}"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        self.trunk_shape()?;
        Ok(())
    }

    /// Shape produced by the conv/pool trunk for one sample.
    pub fn trunk_shape(&self) -> Result<Vec<usize>> {
        let InputShape::Image {
            channels,
            height,
            width,
        } = self.input
        else {
            return Ok(self.input.dims());
        };
        if self.conv_layers == 0 {
            return Ok(vec![channels, height, width]);
        }
        let (mut h, mut w) = (height, width);
        for l in 0..self.conv_layers {
            if h < KERNEL || w < KERNEL {
                return Err(Error::Config(format!(
                    "input {height}x{width} too small for {} conv layers",
                    self.conv_layers
                )));
            }
            h -= KERNEL - 1;
            w -= KERNEL - 1;
            if self.pool_after == Some(l) {
                if h < POOL || w < POOL {
                    return Err(Error::Config(format!(
                        "feature map {h}x{w} too small to pool after conv layer {l}"
                    )));
                }
                h /= POOL;
                w /= POOL;
            }
        }
        Ok(vec![self.conv_kernels, h, w])
    }

    pub fn trunk_dim(&self) -> usize {
        self.trunk_shape()
            .map(|s| s.iter().product())
            .unwrap_or(0)
    }

    /// Width of the representation feeding both heads.
    pub fn head_input_dim(&self) -> usize {
        self.fc_widths
            .last()
            .copied()
            .unwrap_or_else(|| self.trunk_dim())
    }

    fn conv_in_channels(&self, layer: usize) -> usize {
        match (layer, self.input) {
            (0, InputShape::Image { channels, .. }) => channels,
            _ => self.conv_kernels,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `[out, in, 3, 3]`
    pub kernels: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `[in, out]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DenseLayer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

/// All trainable tensors. The same type doubles as the gradient and Adam moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub conv: Vec<ConvLayer>,
    pub hidden: Vec<DenseLayer>,
    pub class_head: DenseLayer,
    pub loc_head: DenseLayer,
}

impl NetworkParams {
    pub fn zeros(config: &NetworkConfig) -> Self {
        let conv = (0..config.conv_layers)
            .map(|l| ConvLayer {
                kernels: Tensor::zeros(&[
                    config.conv_kernels,
                    config.conv_in_channels(l),
                    KERNEL,
                    KERNEL,
                ]),
                bias: Tensor::zeros(&[config.conv_kernels]),
            })
            .collect();
        let mut fan_in = config.trunk_dim();
        let mut hidden = Vec::with_capacity(config.fc_widths.len());
        for &w in &config.fc_widths {
            hidden.push(DenseLayer::zeros(fan_in, w));
            fan_in = w;
        }
        Self {
            conv,
            hidden,
            class_head: DenseLayer::zeros(fan_in, config.num_classes),
            loc_head: DenseLayer::zeros(fan_in, LOC_DIM),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor| Tensor::zeros(t.shape());
        let zd = |d: &DenseLayer| DenseLayer {
            weight: z(&d.weight),
            bias: z(&d.bias),
        };
        Self {
            conv: self
                .conv
                .iter()
                .map(|c| ConvLayer {
                    kernels: z(&c.kernels),
                    bias: z(&c.bias),
                })
                .collect(),
            hidden: self.hidden.iter().map(zd).collect(),
            class_head: zd(&self.class_head),
            loc_head: zd(&self.loc_head),
        }
    }

    /// Parameter names in the canonical order shared by [`tensors`](Self::tensors) and
    /// [`tensors_mut`](Self::tensors_mut). Names ending in `.weight`/`.kernels` are decayed.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.conv.len() {
            names.push(format!("conv{l}.kernels"));
            names.push(format!("conv{l}.bias"));
        }
        for l in 0..self.hidden.len() {
            names.push(format!("fc{l}.weight"));
            names.push(format!("fc{l}.bias"));
        }
        names.extend(
            ["class_head.weight", "class_head.bias", "loc_head.weight", "loc_head.bias"]
                .map(String::from),
        );
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for c in &self.conv {
            out.push(&c.kernels);
            out.push(&c.bias);
        }
        for d in self.hidden.iter().chain([&self.class_head, &self.loc_head]) {
            out.push(&d.weight);
            out.push(&d.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in &mut self.conv {
            out.push(&mut c.kernels);
            out.push(&mut c.bias);
        }
        for d in self
            .hidden
            .iter_mut()
            .chain([&mut self.class_head, &mut self.loc_head])
        {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out
    }

    /// Flags matching [`tensors`](Self::tensors): `true` for weights subject to weight decay.
    pub fn decay_mask(&self) -> Vec<bool> {
        self.tensors()
            .iter()
            .enumerate()
            .map(|(i, _)| i % 2 == 0)
            .collect()
    }

    /// Squared L2 norm over decayed tensors.
    pub fn weight_norm_sq(&self) -> f64 {
        self.tensors()
            .into_iter()
            .zip(self.decay_mask())
            .filter(|(_, d)| *d)
            .map(|(t, _)| t.sum_sq())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// He-style initialization: weights `~ N(0, 2 / fan_in)`, biases zero. Draws are taken from
/// `stream` in parameter order.
pub fn init_params(config: &NetworkConfig, stream: &RngStream) -> Result<NetworkParams> {
    config.validate()?;
    let mut rng = stream.clone();
    let mut params = NetworkParams::zeros(config);
    for c in &mut params.conv {
        let fan_in = c.kernels.shape()[1] * KERNEL * KERNEL;
        let scale = (2.0 / fan_in as f64).sqrt();
        c.kernels.data_mut().iter_mut().for_each(|v| *v = scale * rng.normal());
    }
    for d in params
        .hidden
        .iter_mut()
        .chain([&mut params.class_head, &mut params.loc_head])
    {
        let scale = (2.0 / d.weight.shape()[0] as f64).sqrt();
        d.weight.data_mut().iter_mut().for_each(|v| *v = scale * rng.normal());
    }
    Ok(params)
}

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    params: NetworkParams,
}

impl Network {
    pub fn new(config: NetworkConfig, params: NetworkParams) -> Result<Self> {
        config.validate()?;
        let expected = NetworkParams::zeros(&config);
        let shapes_ok = expected
            .tensors()
            .iter()
            .zip(params.tensors())
            .all(|(a, b)| a.shape() == b.shape())
            && expected.tensors().len() == params.tensors().len();
        if !shapes_ok {
            return Err(Error::Dimension(
                "parameter shapes do not match the network configuration".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn init(config: NetworkConfig, stream: &RngStream) -> Result<Self> {
        let params = init_params(&config, stream)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NetworkParams {
        &mut self.params
    }
}
