//! The multimodal network: configuration and presets, assembly from layers,
//! the forward pass, batch losses, checkpoints and a finite-difference check
//! of the whole model.

mod checkpoint;
mod config;
mod network;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, restore, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::{
    Fusion, GroupSpec, HeadSpec, ModelConfig, PoolAxis, PoolSpec, Readout, RecurrentSpec, ShapeChain, SpeechStage, StageShape,
    StemSpec, VisualConfig,
};
pub use network::{build_model, Inputs, MultimodalModel, LAMBDA};

use crate::autodiff::{relative_error, ridders_difference, Tape, Var};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::joint_loss::joint_loss;
use crate::layers::{Bound, Mode};

/// Initial steps tried per scalar, each a tenth of the previous.
const STEP_TRIALS: usize = 5;

/// Tape nodes of one batch objective.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    /// Batch-mean negative log-likelihood per task.
    pub task_losses: Vec<Var>,
    /// Task weights (constant or softmax of the factors).
    pub weights: Var,
    /// Weighted combination of `task_losses`.
    pub joint: Var,
}

/// Records forward passes for every sample of `batch` and combines the
/// batch-mean task losses with the model's current task weights.
pub fn batch_loss<R: Rng + ?Sized>(
    model: &MultimodalModel,
    tape: &mut Tape,
    bound: &Bound,
    batch: &[&Sample],
    mode: Mode,
    rng: &mut R,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::argument("batch_loss", "empty batch"));
    }
    let k = model.head_count();
    let mut per_task: Vec<Vec<Var>> = vec![Vec::with_capacity(batch.len()); k];
    for s in batch {
        let outs = model.forward(tape, bound, *s, mode, rng)?;
        for (task, &logp) in outs.iter().enumerate() {
            per_task[task].push(tape.nll(logp, s.label(task))?);
        }
    }
    let task_losses = per_task
        .iter()
        .map(|losses| {
            let stacked = tape.stack(losses)?;
            tape.mean(stacked)
        })
        .collect::<Result<Vec<_>>>()?;
    let weights = model.weights_on_tape(tape, bound)?;
    let joint = joint_loss(tape, weights, &task_losses)?;
    Ok(BatchLoss {
        task_losses,
        weights,
        joint,
    })
}

/// One checked scalar of a model gradient check.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.relative_error).fold(0.0, f64::max)
    }

    /// Entries whose relative error exceeds `tolerance`.
    pub fn failures(&self, tolerance: f64) -> Vec<&GradCheckEntry> {
        self.entries.iter().filter(|e| e.relative_error >= tolerance).collect()
    }
}

/// Compares the reverse-mode gradient of the batch joint loss against
/// numeric derivatives for `picks` scalars drawn uniformly from the network
/// weights, plus every balancing factor in dynamic mode.
///
/// Each numeric derivative runs Ridders' extrapolation from several initial
/// steps (`step`, `step / 10`, ...) and keeps the estimate with the smallest
/// error bound: large steps suit parameters with tiny influence, where
/// rounding dominates, and small steps suit parameters near relu or max-pool
/// kinks.
///
/// The loss is evaluated in train mode; each evaluation reseeds dropout from
/// `dropout_seed` so every perturbed pass sees the same mask.
pub fn model_gradcheck<R: Rng + ?Sized>(
    model: &MultimodalModel,
    batch: &[&Sample],
    picks: usize,
    step: f64,
    dropout_seed: u64,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let store = model.params();
    let loss_at = |m: &MultimodalModel, want_grads: bool| -> Result<(f64, Vec<crate::autodiff::Tensor>)> {
        let mut tape = Tape::new();
        let bound = m.params().bind(&mut tape)?;
        let mut drop_rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let loss = batch_loss(m, &mut tape, &bound, batch, Mode::Train, &mut drop_rng)?;
        let value = tape.value(loss.joint).item()?;
        let grads = if want_grads {
            let g = tape.backward(loss.joint)?;
            m.params().collect_grads(&tape, &bound, &g)
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };
    let (_, grads) = loss_at(model, true)?;

    let mut flat: Vec<(usize, usize)> = Vec::new();
    for id in store.ids() {
        if Some(id) != model.lambda_id() {
            flat.extend((0..store.get(id).len()).map(|i| (id.index(), i)));
        }
    }
    let mut chosen: Vec<(usize, usize)> = sample_indices(rng, flat.len(), picks.min(flat.len()))
        .into_iter()
        .map(|j| flat[j])
        .collect();
    if let Some(l) = model.lambda_id() {
        chosen.extend((0..store.get(l).len()).map(|i| (l.index(), i)));
    }

    let ids: Vec<_> = store.ids().collect();
    let mut probe = model.clone();
    let mut entries = Vec::with_capacity(chosen.len());
    for (p, i) in chosen {
        let id = ids[p];
        let orig = store.get(id).data()[i];
        let mut numeric = 0.0;
        let mut best_err = f64::INFINITY;
        let mut h = step;
        for _ in 0..STEP_TRIALS {
            let (d, err) = ridders_difference(
                |x| {
                    probe.params_mut().get_mut(id).data_mut()[i] = x;
                    Ok(loss_at(&probe, false)?.0)
                },
                orig,
                h,
            )?;
            if err < best_err {
                best_err = err;
                numeric = d;
            }
            h /= 10.0;
        }
        probe.params_mut().get_mut(id).data_mut()[i] = orig;
        let analytic = grads[p].data()[i];
        entries.push(GradCheckEntry {
            name: store.name(id).to_string(),
            index: i,
            analytic,
            numeric,
            relative_error: relative_error(analytic, numeric),
        });
    }
    Ok(GradCheckReport { entries })
}

#[cfg(test)]
mod tests;
