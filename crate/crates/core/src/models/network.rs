use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, PoolAxis, Readout, ShapeChain, VisualConfig};
use crate::autodiff::{PoolMode, Tape, Tensor, Var};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::joint_loss::{task_weights, BalancingFactors, TaskWeights, WeightingMode};
use crate::layers::{dropout, BottleneckBlock, Bound, ConvLayer, Dense, DropoutSpec, LstmLayer, Mode, ParamId, ParamStore};

/// Name of the balancing-factor parameter in dynamic mode.
pub const LAMBDA: &str = "lambda";

#[derive(Debug, Clone)]
struct SpeechBranch {
    stages: Vec<(ConvLayer, usize, PoolAxis)>,
}

#[derive(Debug, Clone)]
struct VisualBranch {
    stem: ConvLayer,
    stem_pool: usize,
    blocks: Vec<BottleneckBlock>,
}

/// Modality tensors for one forward pass. Either may be absent when the
/// model's fusion mode does not need it.
#[derive(Debug, Clone, Copy)]
pub struct Inputs<'a> {
    pub audio: Option<&'a Tensor>,
    pub video: Option<&'a Tensor>,
}

impl<'a> From<&'a Sample> for Inputs<'a> {
    fn from(s: &'a Sample) -> Self {
        Inputs {
            audio: Some(&s.audio),
            video: Some(&s.video),
        }
    }
}

/// The assembled network plus its flat parameter registry.
#[derive(Debug, Clone)]
pub struct MultimodalModel {
    config: ModelConfig,
    chain: ShapeChain,
    weighting: WeightingMode,
    params: ParamStore,
    speech: Option<SpeechBranch>,
    visual: Option<VisualBranch>,
    lstm: Vec<LstmLayer>,
    heads: Vec<Dense>,
    lambda: Option<ParamId>,
}

fn build_visual<R: Rng + ?Sized>(store: &mut ParamStore, v: &VisualConfig, rng: &mut R) -> Result<VisualBranch> {
    let st = v.stem;
    let stem = ConvLayer::new(
        store,
        "visual.stem",
        v.channels,
        st.filters,
        &[st.kernel, st.kernel],
        &[st.stride, st.stride],
        0,
        true,
        rng,
    )?;
    let mut blocks = Vec::new();
    let mut channels = st.filters;
    for (g, group) in v.groups.iter().enumerate() {
        for b in 0..group.blocks {
            let stride = if b == 0 { group.stride } else { 1 };
            let name = format!("visual.group{g}.block{b}");
            blocks.push(BottleneckBlock::new(store, &name, channels, group.mid, group.out, stride, rng)?);
            channels = group.out;
        }
    }
    Ok(VisualBranch {
        stem,
        stem_pool: st.pool,
        blocks,
    })
}

/// Validates the configuration and draws every weight from `rng`. In dynamic
/// mode the balancing factors join the registry as the parameter `lambda`.
pub fn build_model<R: Rng + ?Sized>(config: &ModelConfig, weighting: WeightingMode, rng: &mut R) -> Result<MultimodalModel> {
    let chain = config.validate()?;
    if weighting.tasks() != config.heads.len() {
        return Err(Error::Config {
            stage: "weighting".into(),
            msg: format!("{} task weights for {} heads", weighting.tasks(), config.heads.len()),
        });
    }
    let mut store = ParamStore::new();

    let speech = match &config.speech {
        Some(stages) => {
            let mut built = Vec::new();
            let mut channels = 1;
            for (i, s) in stages.iter().enumerate() {
                let conv = ConvLayer::new(
                    &mut store,
                    &format!("speech.{i}.conv"),
                    channels,
                    s.filters,
                    &[s.kernel],
                    &[s.stride],
                    0,
                    true,
                    rng,
                )?;
                channels = match s.pool.axis {
                    PoolAxis::Time => s.filters,
                    PoolAxis::Channel => s.filters / s.pool.size,
                };
                built.push((conv, s.pool.size, s.pool.axis));
            }
            Some(SpeechBranch { stages: built })
        }
        None => None,
    };

    let visual = match &config.visual {
        Some(v) => Some(build_visual(&mut store, v, rng)?),
        None => None,
    };

    let mut lstm = Vec::new();
    let mut input = chain.lstm_input();
    for l in 0..config.recurrent.layers {
        lstm.push(LstmLayer::new(&mut store, &format!("lstm.{l}"), input, config.recurrent.cells, rng)?);
        input = config.recurrent.cells;
    }

    let mut heads = Vec::new();
    for h in &config.heads {
        heads.push(Dense::new(&mut store, &format!("head.{}", h.name), input, h.classes, rng)?);
    }

    let lambda = match &weighting {
        WeightingMode::Dynamic { initial, .. } => Some(store.add(LAMBDA, Tensor::vector(initial.as_slice().to_vec()))?),
        WeightingMode::Static { .. } => None,
    };

    Ok(MultimodalModel {
        config: config.clone(),
        chain,
        weighting,
        params: store,
        speech,
        visual,
        lstm,
        heads,
        lambda,
    })
}

impl MultimodalModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn shape_chain(&self) -> &ShapeChain {
        &self.chain
    }

    pub fn weighting(&self) -> &WeightingMode {
        &self.weighting
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    /// The balancing-factor parameter, present in dynamic mode only.
    pub fn lambda_id(&self) -> Option<ParamId> {
        self.lambda
    }

    pub fn balancing_factors(&self) -> Option<BalancingFactors> {
        self.lambda
            .and_then(|id| BalancingFactors::new(self.params.get(id).data().to_vec()).ok())
    }

    /// Current task weights: the fixed ones in static mode, the softmax of
    /// the factors in dynamic mode.
    pub fn task_weights(&self) -> Result<TaskWeights> {
        match (&self.weighting, self.lambda) {
            (WeightingMode::Static { weights }, _) => Ok(weights.clone()),
            (WeightingMode::Dynamic { .. }, Some(id)) => {
                task_weights(&BalancingFactors::new(self.params.get(id).data().to_vec())?)
            }
            (WeightingMode::Dynamic { .. }, None) => unreachable!("dynamic model without lambda"),
        }
    }

    /// Task weights as a tape node: a constant in static mode, the softmax of
    /// the bound `lambda` leaf in dynamic mode.
    pub fn weights_on_tape(&self, tape: &mut Tape, bound: &Bound) -> Result<Var> {
        match (&self.weighting, self.lambda) {
            (WeightingMode::Dynamic { .. }, Some(id)) => tape.softmax(bound.var(id)),
            _ => tape.constant(Tensor::vector(self.task_weights()?.as_slice().to_vec())),
        }
    }

    fn speech_features(&self, tape: &mut Tape, bound: &Bound, branch: &SpeechBranch, audio: &Tensor) -> Result<Vec<Var>> {
        let expected = [1, self.config.audio_len];
        if audio.shape() != expected {
            return Err(Error::shape(
                "forward",
                format!("audio has shape {:?}, expected {expected:?}", audio.shape()),
            ));
        }
        let mut x = tape.constant(audio.clone())?;
        for (conv, size, axis) in &branch.stages {
            x = conv.forward(tape, bound, x)?;
            x = tape.relu(x)?;
            let ax = match axis {
                PoolAxis::Time => 1,
                PoolAxis::Channel => 0,
            };
            x = tape.pool(x, *size, ax, PoolMode::Max)?;
        }
        let len = tape.value(x).shape()[1];
        let t = self.config.frames;
        let seg = tape.pool(x, len / t, 1, PoolMode::Avg)?;
        let channels = self.chain.audio_features;
        (0..t)
            .map(|i| {
                let col = tape.slice(seg, 1, i, 1)?;
                tape.reshape(col, &[channels])
            })
            .collect()
    }

    fn visual_features(&self, tape: &mut Tape, bound: &Bound, branch: &VisualBranch, video: &Tensor) -> Result<Vec<Var>> {
        let v = self.config.visual.as_ref().expect("visual branch without config");
        let expected = [self.config.frames, v.channels, v.height, v.width];
        if video.shape() != expected {
            return Err(Error::shape(
                "forward",
                format!("video has shape {:?}, expected {expected:?}", video.shape()),
            ));
        }
        let mut out = Vec::with_capacity(self.config.frames);
        for f in 0..self.config.frames {
            let frame = tape.constant(video.index_axis0(f)?)?;
            let mut x = branch.stem.forward(tape, bound, frame)?;
            x = tape.relu(x)?;
            x = tape.pool(x, branch.stem_pool, 1, PoolMode::Max)?;
            x = tape.pool(x, branch.stem_pool, 2, PoolMode::Max)?;
            for block in &branch.blocks {
                x = block.forward(tape, bound, x)?;
            }
            let shape = tape.value(x).shape().to_vec();
            x = tape.pool(x, shape[1], 1, PoolMode::Avg)?;
            x = tape.pool(x, shape[2], 2, PoolMode::Avg)?;
            out.push(tape.reshape(x, &[shape[0]])?);
        }
        Ok(out)
    }

    /// Records the forward pass on `tape` and returns one log-probability
    /// vector per head. Dropout before the heads is active in train mode only.
    pub fn forward<'a, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        inputs: impl Into<Inputs<'a>>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Vec<Var>> {
        let inputs = inputs.into();
        let audio = match &self.speech {
            Some(branch) => {
                let a = inputs
                    .audio
                    .ok_or_else(|| Error::Input("model needs audio but the sample has none".into()))?;
                Some(self.speech_features(tape, bound, branch, a)?)
            }
            None => None,
        };
        let video = match &self.visual {
            Some(branch) => {
                let v = inputs
                    .video
                    .ok_or_else(|| Error::Input("model needs video but the sample has none".into()))?;
                Some(self.visual_features(tape, bound, branch, v)?)
            }
            None => None,
        };
        let mut seq = Vec::with_capacity(self.config.frames);
        for t in 0..self.config.frames {
            let step = match (&audio, &video) {
                (Some(a), Some(v)) => tape.concat(a[t], v[t], 0)?,
                (Some(a), None) => a[t],
                (None, Some(v)) => v[t],
                (None, None) => unreachable!("validated config has a branch"),
            };
            seq.push(step);
        }
        let mut h = None;
        for layer in &self.lstm {
            let (h0, c0) = layer.zero_state(tape)?;
            let out = layer.forward(tape, bound, &seq, h0, c0)?;
            h = Some(out.h);
            seq = out.outputs;
        }
        let mut readout = match self.config.readout {
            Readout::Last => h.expect("at least one LSTM layer"),
            Readout::Mean => {
                let mut acc = seq[0];
                for &s in &seq[1..] {
                    acc = tape.add(acc, s)?;
                }
                tape.scale(acc, 1.0 / seq.len() as f64)?
            }
        };
        readout = dropout(tape, readout, DropoutSpec::new(self.config.dropout, mode)?, rng)?;
        self.heads
            .iter()
            .map(|head| {
                let logits = head.forward(tape, bound, readout)?;
                tape.log_softmax(logits)
            })
            .collect()
    }

    /// Eval-mode log-probabilities as plain vectors.
    pub fn predict<'a>(&self, inputs: impl Into<Inputs<'a>>) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape)?;
        // eval mode draws nothing from the generator
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, &bound, inputs, Mode::Eval, &mut rng)?;
        Ok(out.iter().map(|&v| tape.value(v).data().to_vec()).collect())
    }
}
