use rand::Rng;

use super::init::glorot_init;
use super::params::{Bound, ParamId, ParamStore};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// One LSTM layer. Gate rows of `w`, `u` and `bias` are stacked in the order
/// input, forget, candidate, output.
#[derive(Debug, Clone)]
pub struct LstmLayer {
    pub input_size: usize,
    pub hidden_size: usize,
    pub w: ParamId,
    pub u: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct LstmOutput {
    pub outputs: Vec<Var>,
    pub h: Var,
    pub c: Var,
}

impl LstmLayer {
    /// Glorot-initialized weights; biases zero except the forget gate (1.0).
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let gates = 4 * hidden_size;
        let w = store.add(
            format!("{name}.w"),
            glorot_init(input_size, gates, &[gates, input_size], rng)?,
        )?;
        let u = store.add(
            format!("{name}.u"),
            glorot_init(hidden_size, gates, &[gates, hidden_size], rng)?,
        )?;
        let mut b = Tensor::zeros(&[gates]);
        b.data_mut()[hidden_size..2 * hidden_size].fill(1.0);
        let bias = store.add(format!("{name}.bias"), b)?;
        Ok(Self {
            input_size,
            hidden_size,
            w,
            u,
            bias,
        })
    }

    pub fn zero_state(&self, tape: &mut Tape) -> Result<(Var, Var)> {
        let h = tape.constant(Tensor::zeros(&[self.hidden_size]))?;
        let c = tape.constant(Tensor::zeros(&[self.hidden_size]))?;
        Ok((h, c))
    }

    /// Runs the recurrence over `sequence` starting from `(h0, c0)`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, sequence: &[Var], h0: Var, c0: Var) -> Result<LstmOutput> {
        let hs = self.hidden_size;
        for (v, what) in [(h0, "h0"), (c0, "c0")] {
            if tape.value(v).shape() != [hs] {
                return Err(Error::shape(
                    "lstm",
                    format!("{what} has shape {:?}, expected [{hs}]", tape.value(v).shape()),
                ));
            }
        }
        let (w, u, b) = (bound.var(self.w), bound.var(self.u), bound.var(self.bias));
        let (mut h, mut c) = (h0, c0);
        let mut outputs = Vec::with_capacity(sequence.len());
        for &x in sequence {
            if tape.value(x).shape() != [self.input_size] {
                return Err(Error::Dimension {
                    op: "lstm",
                    lhs: tape.value(x).shape().to_vec(),
                    rhs: vec![self.input_size],
                });
            }
            let wx = tape.matvec(w, x)?;
            let uh = tape.matvec(u, h)?;
            let z = tape.add(wx, uh)?;
            let z = tape.add(z, b)?;
            let i_pre = tape.slice(z, 0, 0, hs)?;
            let f_pre = tape.slice(z, 0, hs, hs)?;
            let g_pre = tape.slice(z, 0, 2 * hs, hs)?;
            let o_pre = tape.slice(z, 0, 3 * hs, hs)?;
            let i = tape.sigmoid(i_pre)?;
            let f = tape.sigmoid(f_pre)?;
            let g = tape.tanh(g_pre)?;
            let o = tape.sigmoid(o_pre)?;
            let keep = tape.mul(f, c)?;
            let write = tape.mul(i, g)?;
            c = tape.add(keep, write)?;
            let squashed = tape.tanh(c)?;
            h = tape.mul(o, squashed)?;
            outputs.push(h);
        }
        Ok(LstmOutput { outputs, h, c })
    }
}
