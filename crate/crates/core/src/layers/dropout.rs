use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout: survivors are rescaled at train time so that eval mode
/// is the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutSpec {
    rate: f64,
    pub mode: Mode,
}

impl DropoutSpec {
    pub fn new(rate: f64, mode: Mode) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::argument(
                "dropout",
                format!("rate must lie in [0, 1), got {rate}"),
            ));
        }
        Ok(Self { rate, mode })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    fn is_identity(&self) -> bool {
        self.mode == Mode::Eval || self.rate == 0.0
    }

    fn mask<R: Rng + ?Sized>(&self, shape: &[usize], rng: &mut R) -> Tensor {
        let keep = 1.0 / (1.0 - self.rate);
        let mut mask = Tensor::zeros(shape);
        for m in mask.data_mut() {
            if !rng.random_bool(self.rate) {
                *m = keep;
            }
        }
        mask
    }
}

/// Applies dropout to a plain tensor.
pub fn dropout_apply<R: Rng + ?Sized>(input: &Tensor, spec: DropoutSpec, rng: &mut R) -> Tensor {
    if spec.is_identity() {
        return input.clone();
    }
    let mask = spec.mask(input.shape(), rng);
    let data = input.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
    Tensor::from_parts(input.shape().to_vec(), data)
}

/// Applies dropout on the tape; the mask enters as a constant.
pub fn dropout<R: Rng + ?Sized>(tape: &mut Tape, x: Var, spec: DropoutSpec, rng: &mut R) -> Result<Var> {
    if spec.is_identity() {
        return Ok(x);
    }
    let mask = spec.mask(tape.value(x).shape(), rng);
    let m = tape.constant(mask)?;
    tape.mul(x, m)
}
