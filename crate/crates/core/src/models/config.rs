use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which branches feed the recurrent stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    Concat,
    AudioOnly,
    VideoOnly,
}

impl Fusion {
    pub fn uses_audio(self) -> bool {
        matches!(self, Fusion::Concat | Fusion::AudioOnly)
    }

    pub fn uses_video(self) -> bool {
        matches!(self, Fusion::Concat | Fusion::VideoOnly)
    }
}

/// Axis a speech-stage pool reduces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolAxis {
    Time,
    Channel,
}

/// Which LSTM output feeds the task heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    #[default]
    Last,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub size: usize,
    pub axis: PoolAxis,
}

/// A 1-D convolution (with bias and relu) followed by a max-pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeechStage {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool: PoolSpec,
}

/// Square convolution (with bias and relu) followed by a square max-pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool: usize,
}

/// A run of bottleneck blocks; only the first block applies `stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub blocks: usize,
    pub mid: usize,
    pub out: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisualConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stem: StemSpec,
    pub groups: Vec<GroupSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecurrentSpec {
    pub layers: usize,
    pub cells: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub name: String,
    pub classes: usize,
}

/// Declarative description of the multimodal network.
///
/// Audio enters as `[1 × audio_len]` and passes through the speech stages;
/// the result is average-pooled over time into `frames` equal segments, one
/// feature vector per step. Each of the `frames` video frames passes through
/// the stem, the bottleneck groups and a global average pool. Per-step
/// features are concatenated and fed to the LSTM stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub audio_len: usize,
    pub frames: usize,
    pub fusion: Fusion,
    #[serde(default)]
    pub speech: Option<Vec<SpeechStage>>,
    #[serde(default)]
    pub visual: Option<VisualConfig>,
    pub recurrent: RecurrentSpec,
    pub heads: Vec<HeadSpec>,
    pub dropout: f64,
    #[serde(default)]
    pub readout: Readout,
}

/// One named stage of the validated shape chain and its output shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageShape {
    pub stage: String,
    pub shape: Vec<usize>,
}

/// Output of [`ModelConfig::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeChain {
    pub stages: Vec<StageShape>,
    pub audio_features: usize,
    pub video_features: usize,
}

impl ShapeChain {
    pub fn lstm_input(&self) -> usize {
        self.audio_features + self.video_features
    }

    pub fn shape_of(&self, stage: &str) -> Option<&[usize]> {
        self.stages.iter().find(|s| s.stage == stage).map(|s| s.shape.as_slice())
    }
}

fn config_err(stage: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Config {
        stage: stage.into(),
        msg: msg.into(),
    }
}

fn conv_out(stage: &str, len: usize, kernel: usize, stride: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(config_err(stage, "kernel and stride must be positive"));
    }
    if kernel > len {
        return Err(config_err(stage, format!("kernel {kernel} exceeds input length {len}")));
    }
    Ok((len - kernel) / stride + 1)
}

fn pooled(stage: &str, len: usize, size: usize) -> Result<usize> {
    if size == 0 || !len.is_multiple_of(size) {
        return Err(config_err(stage, format!("pool size {size} does not divide length {len}")));
    }
    Ok(len / size)
}

impl ModelConfig {
    /// The full-scale architecture: 96000-sample audio, two speech stages
    /// (40 filters of width 80 with time pool 2, then 40 filters of width
    /// 4000 with channel pool 10), a 50-layer residual visual network on
    /// 96×96 frames, a 2×256 LSTM, dropout 0.5 and emotion/gender heads.
    pub fn paper_preset() -> Self {
        let group = |blocks, mid, out, stride| GroupSpec {
            blocks,
            mid,
            out,
            stride,
        };
        Self {
            audio_len: 96_000,
            frames: 12,
            fusion: Fusion::Concat,
            speech: Some(vec![
                SpeechStage {
                    filters: 40,
                    kernel: 80,
                    stride: 3,
                    pool: PoolSpec {
                        size: 2,
                        axis: PoolAxis::Time,
                    },
                },
                SpeechStage {
                    filters: 40,
                    kernel: 4000,
                    stride: 1,
                    pool: PoolSpec {
                        size: 10,
                        axis: PoolAxis::Channel,
                    },
                },
            ]),
            visual: Some(VisualConfig {
                channels: 3,
                height: 96,
                width: 96,
                stem: StemSpec {
                    filters: 64,
                    kernel: 7,
                    stride: 2,
                    pool: 3,
                },
                groups: vec![
                    group(3, 64, 256, 1),
                    group(4, 128, 512, 2),
                    group(6, 256, 1024, 2),
                    group(3, 512, 2048, 2),
                ],
            }),
            recurrent: RecurrentSpec { layers: 2, cells: 256 },
            heads: default_heads(),
            dropout: 0.5,
            readout: Readout::Last,
        }
    }

    /// The same topology shrunk to train in milliseconds per sample.
    pub fn toy_preset() -> Self {
        let group = |stride| GroupSpec {
            blocks: 1,
            mid: 2,
            out: 8,
            stride,
        };
        Self {
            audio_len: 256,
            frames: 4,
            fusion: Fusion::Concat,
            speech: Some(vec![
                SpeechStage {
                    filters: 8,
                    kernel: 9,
                    stride: 1,
                    pool: PoolSpec {
                        size: 2,
                        axis: PoolAxis::Time,
                    },
                },
                SpeechStage {
                    filters: 8,
                    kernel: 13,
                    stride: 1,
                    pool: PoolSpec {
                        size: 2,
                        axis: PoolAxis::Channel,
                    },
                },
            ]),
            visual: Some(VisualConfig {
                channels: 1,
                height: 12,
                width: 12,
                stem: StemSpec {
                    filters: 4,
                    kernel: 3,
                    stride: 1,
                    pool: 2,
                },
                groups: vec![group(1), group(2), group(2), group(2)],
            }),
            recurrent: RecurrentSpec { layers: 2, cells: 16 },
            heads: default_heads(),
            dropout: 0.5,
            readout: Readout::Last,
        }
    }

    /// Copy of this configuration restricted to the given fusion mode; the
    /// branch that the mode does not use is dropped.
    pub fn with_fusion(&self, fusion: Fusion) -> Self {
        let mut c = self.clone();
        c.fusion = fusion;
        if !fusion.uses_audio() {
            c.speech = None;
        }
        if !fusion.uses_video() {
            c.visual = None;
        }
        c
    }

    /// Number of stages in the topology: speech stages, visual stem, visual
    /// groups, recurrent layers and heads.
    pub fn stage_count(&self) -> usize {
        self.speech.as_ref().map_or(0, Vec::len)
            + self.visual.as_ref().map_or(0, |v| 1 + v.groups.len())
            + self.recurrent.layers
            + self.heads.len()
    }

    /// Checks every invariant and walks the shape chain stage by stage. The
    /// first break is reported as a configuration error naming the stage.
    pub fn validate(&self) -> Result<ShapeChain> {
        if self.frames == 0 {
            return Err(config_err("frames", "sequence length must be positive"));
        }
        match (self.fusion.uses_audio(), self.speech.is_some()) {
            (true, false) => return Err(config_err("fusion", "fusion uses audio but no speech branch is configured")),
            (false, true) => return Err(config_err("fusion", "speech branch configured but fusion ignores audio")),
            _ => {}
        }
        match (self.fusion.uses_video(), self.visual.is_some()) {
            (true, false) => return Err(config_err("fusion", "fusion uses video but no visual branch is configured")),
            (false, true) => return Err(config_err("fusion", "visual branch configured but fusion ignores video")),
            _ => {}
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err("dropout", format!("rate {} outside [0, 1)", self.dropout)));
        }

        let mut stages = Vec::new();
        let mut push = |stage: String, shape: Vec<usize>| stages.push(StageShape { stage, shape });

        let mut audio_features = 0;
        if let Some(speech) = &self.speech {
            if self.audio_len == 0 {
                return Err(config_err("speech.input", "audio length must be positive"));
            }
            if speech.is_empty() {
                return Err(config_err("speech", "speech branch needs at least one stage"));
            }
            let (mut channels, mut len) = (1usize, self.audio_len);
            push("speech.input".into(), vec![channels, len]);
            for (i, s) in speech.iter().enumerate() {
                let name = format!("speech.{i}.conv");
                if s.filters == 0 {
                    return Err(config_err(name, "filter count must be positive"));
                }
                len = conv_out(&name, len, s.kernel, s.stride)?;
                channels = s.filters;
                push(name, vec![channels, len]);
                let name = format!("speech.{i}.pool");
                match s.pool.axis {
                    PoolAxis::Time => len = pooled(&name, len, s.pool.size)?,
                    PoolAxis::Channel => channels = pooled(&name, channels, s.pool.size)?,
                }
                push(name, vec![channels, len]);
            }
            pooled("speech.segment", len, self.frames).map_err(|_| {
                config_err(
                    "speech.segment",
                    format!("{len} time steps do not split into {} equal segments", self.frames),
                )
            })?;
            push("speech.segment".into(), vec![channels, self.frames]);
            audio_features = channels;
        }

        let mut video_features = 0;
        if let Some(v) = &self.visual {
            if v.channels == 0 || v.height == 0 || v.width == 0 {
                return Err(config_err("visual.input", "frame dimensions must be positive"));
            }
            push("visual.input".into(), vec![v.channels, v.height, v.width]);
            let st = &v.stem;
            if st.filters == 0 {
                return Err(config_err("visual.stem.conv", "filter count must be positive"));
            }
            let h = conv_out("visual.stem.conv", v.height, st.kernel, st.stride)?;
            let w = conv_out("visual.stem.conv", v.width, st.kernel, st.stride)?;
            push("visual.stem.conv".into(), vec![st.filters, h, w]);
            let (mut h, mut w) = (pooled("visual.stem.pool", h, st.pool)?, pooled("visual.stem.pool", w, st.pool)?);
            let mut channels = st.filters;
            push("visual.stem.pool".into(), vec![channels, h, w]);
            for (g, group) in v.groups.iter().enumerate() {
                let name = format!("visual.group{g}");
                if group.blocks == 0 || group.mid == 0 || group.out == 0 || group.stride == 0 {
                    return Err(config_err(name, "block count, widths and stride must be positive"));
                }
                for b in 0..group.blocks {
                    let stride = if b == 0 { group.stride } else { 1 };
                    h = (h - 1) / stride + 1;
                    w = (w - 1) / stride + 1;
                    channels = group.out;
                    push(format!("{name}.block{b}"), vec![channels, h, w]);
                }
            }
            push("visual.avgpool".into(), vec![channels]);
            video_features = channels;
        }

        let rec = self.recurrent;
        if rec.layers == 0 || rec.cells == 0 {
            return Err(config_err("lstm", "need at least one layer with at least one cell"));
        }
        for l in 0..rec.layers {
            push(format!("lstm.{l}"), vec![self.frames, rec.cells]);
        }
        if self.heads.is_empty() {
            return Err(config_err("head", "at least one task head is required"));
        }
        for (i, h) in self.heads.iter().enumerate() {
            if h.classes < 2 {
                return Err(config_err(format!("head.{}", h.name), format!("{} classes; need at least 2", h.classes)));
            }
            if self.heads[..i].iter().any(|o| o.name == h.name) {
                return Err(config_err(format!("head.{}", h.name), "duplicate head name"));
            }
            push(format!("head.{}", h.name), vec![h.classes]);
        }
        Ok(ShapeChain {
            stages,
            audio_features,
            video_features,
        })
    }
}

fn default_heads() -> Vec<HeadSpec> {
    vec![
        HeadSpec {
            name: "emotion".into(),
            classes: 4,
        },
        HeadSpec {
            name: "gender".into(),
            classes: 2,
        },
    ]
}
