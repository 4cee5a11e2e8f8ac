//! Parameterized building blocks: dense and convolution layers, LSTM,
//! residual bottleneck units and dropout, plus the parameter registry they
//! draw their weights from.

mod bottleneck;
mod dropout;
mod init;
mod lstm;
mod params;

use rand::Rng;

pub use bottleneck::{BottleneckBlock, BOTTLENECK_KERNELS};
pub use dropout::{dropout, dropout_apply, DropoutSpec, Mode};
pub use init::{glorot_bound, glorot_init};
pub use lstm::{LstmLayer, LstmOutput};
pub use params::{Bound, ParamId, ParamStore};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;

/// Fully connected layer `y = W x + b` on rank-1 inputs.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            glorot_init(inputs, outputs, &[outputs, inputs], rng)?,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]))?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matvec(bound.var(self.weight), x)?;
        tape.add(y, bound.var(self.bias))
    }
}

/// Convolution with optional zero padding and per-channel bias.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub kernel_size: Vec<usize>,
    pub stride: Vec<usize>,
    pub pad: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: &[usize],
        stride: &[usize],
        pad: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let area: usize = kernel_size.iter().product();
        let mut shape = vec![out_channels, in_channels];
        shape.extend_from_slice(kernel_size);
        let kernel = store.add(
            format!("{name}.weight"),
            glorot_init(in_channels * area, out_channels * area, &shape, rng)?,
        )?;
        let bias = if with_bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]))?)
        } else {
            None
        };
        Ok(Self {
            kernel,
            bias,
            kernel_size: kernel_size.to_vec(),
            stride: stride.to_vec(),
            pad,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let x = if self.pad > 0 {
            tape.pad_spatial(x, self.pad)?
        } else {
            x
        };
        let y = tape.conv(x, bound.var(self.kernel), &self.stride)?;
        match self.bias {
            Some(b) => tape.channel_bias(y, bound.var(b)),
            None => Ok(y),
        }
    }
}
