use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Dims, Sample};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Parameters of the synthetic emotion/gender corpus.
///
/// Audio is a two-harmonic sinusoid whose cycle count (per utterance) is set
/// by the emotion and whose amplitude is set by the gender, plus white noise.
/// Video frames show an emotion-specific spatial pattern shifted by a
/// gender-specific brightness, plus pixel noise. Gender is therefore a
/// threshold on signal energy in either modality, while emotion needs the
/// frequency or the spatial layout. With the default jitter, neighbouring
/// emotions share cycle counts, so audio alone leaves emotion partly
/// ambiguous and the video pattern resolves the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub samples: usize,
    pub dims: Dims,
    /// Base cycles per utterance for each emotion.
    pub emotion_cycles: [u32; 4],
    /// Cycle counts are jittered uniformly by up to this many cycles.
    pub cycle_jitter: u32,
    /// Relative amplitude of the second harmonic.
    pub harmonic: f64,
    /// Base amplitude for female and male speakers.
    pub gender_amplitude: [f64; 2],
    /// Amplitudes are jittered uniformly within this half-width.
    pub amplitude_jitter: f64,
    /// Standard deviation of the additive audio noise.
    pub noise: f64,
    /// Peak value of the emotion pattern in the video frames.
    pub pattern_contrast: f64,
    /// Brightness offset added to every pixel, per gender.
    pub gender_brightness: [f64; 2],
    /// Standard deviation of the additive pixel noise.
    pub video_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            samples: 400,
            dims: Dims {
                audio_len: 256,
                frames: 4,
                channels: 1,
                height: 12,
                width: 12,
            },
            emotion_cycles: [8, 10, 12, 14],
            cycle_jitter: 2,
            harmonic: 0.5,
            gender_amplitude: [0.5, 1.0],
            amplitude_jitter: 0.1,
            noise: 0.3,
            pattern_contrast: 0.5,
            gender_brightness: [-0.25, 0.25],
            video_noise: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let bad = |msg: String| Err(Error::argument("synth_spec", msg));
        if !(self.noise >= 0.0) || !(self.video_noise >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        if !(self.amplitude_jitter >= 0.0) {
            return bad("amplitude jitter must be non-negative".into());
        }
        let params = [self.harmonic, self.pattern_contrast]
            .into_iter()
            .chain(self.gender_amplitude)
            .chain(self.gender_brightness);
        for v in params {
            if !v.is_finite() {
                return bad("signal parameters must be finite".into());
            }
        }
        let lowest = self.emotion_cycles.iter().min().copied().unwrap_or(0);
        let highest = self.emotion_cycles.iter().max().copied().unwrap_or(0);
        if lowest <= self.cycle_jitter {
            return bad(format!(
                "every emotion needs more than {} base cycles",
                self.cycle_jitter
            ));
        }
        let top = 2 * (highest + self.cycle_jitter) as usize;
        if 2 * top >= self.dims.audio_len {
            return bad(format!(
                "second harmonic of {} cycles does not fit in {} samples",
                highest + self.cycle_jitter,
                self.dims.audio_len
            ));
        }
        Ok(())
    }

    /// Root-mean-square of the noiseless audio for a given amplitude.
    pub fn clean_rms(&self, amplitude: f64) -> f64 {
        amplitude * ((1.0 + self.harmonic * self.harmonic) / 2.0).sqrt()
    }
}

/// Emotion pattern value in `[-1, 1]` at pixel `(y, x)`.
fn pattern(emotion: u8, y: usize, x: usize, h: usize, w: usize) -> f64 {
    let band = |i: usize| if (i / 2).is_multiple_of(2) { 1.0 } else { -1.0 };
    match emotion {
        0 => band(y),
        1 => band(x),
        2 => band(y) * band(x),
        _ => {
            let cy = (h as f64 - 1.0) / 2.0;
            let cx = (w as f64 - 1.0) / 2.0;
            let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            let s = (h.min(w) as f64 / 4.0).max(0.5);
            2.0 * (-r2 / (2.0 * s * s)).exp() - 1.0
        }
    }
}

fn narrow(v: f64) -> f64 {
    v as f32 as f64
}

/// Draws `spec.samples` labelled samples. Labels are uniform; the stream is
/// fully determined by `spec.seed`. Stored values are `f32`-representable so
/// they survive the on-disk format unchanged.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let audio_noise = Normal::new(0.0, spec.noise).map_err(|e| Error::argument("synth_generate", e.to_string()))?;
    let pixel_noise =
        Normal::new(0.0, spec.video_noise).map_err(|e| Error::argument("synth_generate", e.to_string()))?;
    let d = spec.dims;
    let tau = std::f64::consts::TAU;
    let mut samples = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let emotion: u8 = rng.random_range(0..4);
        let gender: u8 = rng.random_range(0..2);

        let jitter = spec.cycle_jitter as i64;
        let cycles = (spec.emotion_cycles[emotion as usize] as i64 + rng.random_range(-jitter..=jitter)) as f64;
        let amp = spec.gender_amplitude[gender as usize]
            + spec.amplitude_jitter * rng.random_range(-1.0..=1.0);
        let phase1 = rng.random_range(0.0..tau);
        let phase2 = rng.random_range(0.0..tau);
        let l = d.audio_len as f64;
        let audio: Vec<f64> = (0..d.audio_len)
            .map(|t| {
                let x = tau * cycles * t as f64 / l;
                let clean = amp * ((x + phase1).sin() + spec.harmonic * (2.0 * x + phase2).sin());
                narrow(clean + audio_noise.sample(&mut rng))
            })
            .collect();

        let bright = spec.gender_brightness[gender as usize];
        let mut video = Vec::with_capacity(d.video_len());
        for _frame in 0..d.frames {
            for _c in 0..d.channels {
                for y in 0..d.height {
                    for x in 0..d.width {
                        let clean = spec.pattern_contrast * pattern(emotion, y, x, d.height, d.width) + bright;
                        video.push(narrow(clean + pixel_noise.sample(&mut rng)));
                    }
                }
            }
        }

        samples.push(Sample {
            audio: Tensor::new(d.audio_shape().to_vec(), audio)?,
            video: Tensor::new(d.video_shape().to_vec(), video)?,
            emotion,
            gender,
        });
    }
    Dataset::new(d, samples)
}
