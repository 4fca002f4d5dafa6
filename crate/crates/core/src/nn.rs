//! Convolution blocks and the residual block `H(x) = act(F(x) + shortcut(x))`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::None => x,
        }
    }
}

/// Square convolution with per-channel bias and optional activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub activation: Activation,
}

impl ConvBlock {
    /// Registers kernel and bias under `name.kernel` / `name.bias`, drawn
    /// uniformly from `±sqrt(1/fan_in)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel_size == 0 || stride == 0 {
            return Err(Error::invalid(format!(
                "conv block `{name}` needs positive channels, kernel size and stride"
            )));
        }
        let bound = (1.0 / (in_channels * kernel_size * kernel_size) as f64).sqrt();
        let kernel = Tensor::uniform(
            &[out_channels, in_channels, kernel_size, kernel_size],
            -bound,
            bound,
            rng,
        );
        let bias = Tensor::uniform(&[out_channels], -bound, bound, rng);
        Ok(ConvBlock {
            kernel: store.add(format!("{name}.kernel"), kernel),
            bias: store.add(format!("{name}.bias"), bias),
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding,
            activation,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let k = g.param(store, self.kernel);
        let b = g.param(store, self.bias);
        let y = g.conv2d(x, k, self.stride, self.padding)?;
        let y = g.add_channel_bias(y, b)?;
        Ok(self.activation.apply(g, y))
    }

    pub fn output_size(&self, input: usize) -> usize {
        (input + 2 * self.padding - self.kernel_size) / self.stride + 1
    }

    /// True when the block keeps spatial size for every input size.
    pub fn preserves_spatial(&self) -> bool {
        self.stride == 1 && 2 * self.padding + 1 == self.kernel_size
    }

    pub fn param_count(&self) -> usize {
        conv_param_count(self.in_channels, self.out_channels, self.kernel_size)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.kernel).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
    }
}

pub fn conv_param_count(in_channels: usize, out_channels: usize, kernel_size: usize) -> usize {
    out_channels * in_channels * kernel_size * kernel_size + out_channels
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shortcut {
    Identity,
    /// 1×1 convolution matching channel count and stride of the residual path.
    Projection(ConvBlock),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub f_path: Vec<ConvBlock>,
    pub shortcut: Shortcut,
    pub activation: Activation,
}

impl ResidualBlock {
    /// Validates that the shortcut is the identity exactly when the residual
    /// path keeps channel count and spatial size.
    pub fn new(f_path: Vec<ConvBlock>, shortcut: Shortcut, activation: Activation) -> Result<Self> {
        let (first, last) = match (f_path.first(), f_path.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(Error::invalid("residual path must contain a conv block")),
        };
        for pair in f_path.windows(2) {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(Error::shape(format!(
                    "residual path channels break: {} then {}",
                    pair[0].out_channels, pair[1].in_channels
                )));
            }
        }
        let preserves = first.in_channels == last.out_channels && f_path.iter().all(ConvBlock::preserves_spatial);
        match (&shortcut, preserves) {
            (Shortcut::Identity, true) => {}
            (Shortcut::Projection(p), false) => {
                let stride: usize = f_path.iter().map(|b| b.stride).product();
                if p.kernel_size != 1
                    || p.in_channels != first.in_channels
                    || p.out_channels != last.out_channels
                    || p.stride != stride
                {
                    return Err(Error::shape(
                        "projection shortcut must be 1×1 with the residual path's channels and stride",
                    ));
                }
            }
            (Shortcut::Identity, false) => {
                return Err(Error::shape(
                    "identity shortcut requires a shape-preserving residual path",
                ))
            }
            (Shortcut::Projection(_), true) => {
                return Err(Error::shape(
                    "shape-preserving residual path must use the identity shortcut",
                ))
            }
        }
        Ok(ResidualBlock {
            f_path,
            shortcut,
            activation,
        })
    }

    /// Basic block: two 3×3 convolutions (ReLU between), projection shortcut
    /// when channels or stride change, ReLU after the sum.
    pub fn basic<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let conv1 = ConvBlock::new(
            store,
            &format!("{name}.conv1"),
            in_channels,
            out_channels,
            3,
            stride,
            1,
            Activation::Relu,
            rng,
        )?;
        let conv2 = ConvBlock::new(
            store,
            &format!("{name}.conv2"),
            out_channels,
            out_channels,
            3,
            1,
            1,
            Activation::None,
            rng,
        )?;
        let shortcut = if in_channels == out_channels && stride == 1 {
            Shortcut::Identity
        } else {
            Shortcut::Projection(ConvBlock::new(
                store,
                &format!("{name}.proj"),
                in_channels,
                out_channels,
                1,
                stride,
                0,
                Activation::None,
                rng,
            )?)
        };
        Self::new(vec![conv1, conv2], shortcut, Activation::Relu)
    }

    pub fn in_channels(&self) -> usize {
        self.f_path[0].in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.f_path[self.f_path.len() - 1].out_channels
    }

    pub fn output_size(&self, input: usize) -> usize {
        self.f_path.iter().fold(input, |s, b| b.output_size(s))
    }

    pub fn param_count(&self) -> usize {
        let path: usize = self.f_path.iter().map(ConvBlock::param_count).sum();
        match &self.shortcut {
            Shortcut::Identity => path,
            Shortcut::Projection(p) => path + p.param_count(),
        }
    }

    /// Zeroes every weight and bias of the residual path.
    pub fn zero_residual_path(&self, store: &mut ParamStore) {
        self.f_path.iter().for_each(|b| b.zero(store));
    }
}

/// `activation(F(x) + shortcut(x))`.
pub fn residual_forward(block: &ResidualBlock, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
    let mut f = x;
    for conv in &block.f_path {
        f = conv.forward(g, store, f)?;
    }
    let skip = match &block.shortcut {
        Shortcut::Identity => x,
        Shortcut::Projection(p) => p.forward(g, store, x)?,
    };
    if g.value(f).shape() != g.value(skip).shape() {
        return Err(Error::shape(format!(
            "residual path gives {:?} but shortcut gives {:?}",
            g.value(f).shape(),
            g.value(skip).shape()
        )));
    }
    let h = g.add(f, skip)?;
    Ok(block.activation.apply(g, h))
}

/// A stage of basic blocks; the first carries the stride and channel change.
pub fn make_stage<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    num_blocks: usize,
    in_channels: usize,
    out_channels: usize,
    stride: usize,
    rng: &mut R,
) -> Result<Vec<ResidualBlock>> {
    if num_blocks == 0 || in_channels == 0 || out_channels == 0 || stride == 0 {
        return Err(Error::invalid(format!(
            "make_stage needs positive arguments, got blocks={num_blocks} in={in_channels} out={out_channels} stride={stride}"
        )));
    }
    (0..num_blocks)
        .map(|i| {
            let (cin, s) = if i == 0 {
                (in_channels, stride)
            } else {
                (out_channels, 1)
            };
            ResidualBlock::basic(store, &format!("{name}.block{i}"), cin, out_channels, s, rng)
        })
        .collect()
}

/// Closed-form parameter count of a [`make_stage`] stage with 3×3 blocks.
pub fn stage_param_count(num_blocks: usize, in_channels: usize, out_channels: usize, stride: usize) -> usize {
    let first = conv_param_count(in_channels, out_channels, 3)
        + conv_param_count(out_channels, out_channels, 3)
        + if in_channels != out_channels || stride != 1 {
            conv_param_count(in_channels, out_channels, 1)
        } else {
            0
        };
    let rest = 2 * conv_param_count(out_channels, out_channels, 3);
    first + (num_blocks - 1) * rest
}

pub fn stage_forward(stage: &[ResidualBlock], g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
    stage
        .iter()
        .try_fold(x, |h, block| residual_forward(block, g, store, h))
}
