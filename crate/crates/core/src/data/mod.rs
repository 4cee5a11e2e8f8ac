//! Multimodal samples, annotation aggregation, dataset splitting, the
//! synthetic generator and the `MMGD` binary file format.

mod format;
mod synth;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use format::{decode_dataset, encode_dataset, load_dataset, save_dataset, MAGIC, VERSION};
pub use synth::{synth_generate, SynthSpec};

pub const EMOTIONS: [&str; 4] = ["anger", "happiness", "neutral", "sadness"];
pub const GENDERS: [&str; 2] = ["female", "male"];

/// Fixed per-sample shapes: audio `[1 × audio_len]`, video `[frames × channels × height × width]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub audio_len: usize,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn audio_shape(&self) -> [usize; 2] {
        [1, self.audio_len]
    }

    pub fn video_shape(&self) -> [usize; 4] {
        [self.frames, self.channels, self.height, self.width]
    }

    pub fn video_len(&self) -> usize {
        self.video_shape().iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.audio_len == 0 || self.video_len() == 0 {
            return Err(Error::argument("dims", format!("all dimensions must be positive, got {self:?}")));
        }
        Ok(())
    }
}

/// One utterance: raw audio surrogate, frame sequence and both labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub audio: Tensor,
    pub video: Tensor,
    pub emotion: u8,
    pub gender: u8,
}

impl Sample {
    /// Label for task `k` (0 = emotion, 1 = gender).
    pub fn label(&self, task: usize) -> usize {
        match task {
            0 => self.emotion as usize,
            _ => self.gender as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dims: Dims,
    samples: Vec<Sample>,
}

impl Dataset {
    /// Builds a dataset after checking every sample against `dims`.
    pub fn new(dims: Dims, samples: Vec<Sample>) -> Result<Self> {
        dims.validate()?;
        for (i, s) in samples.iter().enumerate() {
            if s.audio.shape() != dims.audio_shape() || s.video.shape() != dims.video_shape() {
                return Err(Error::shape(
                    "dataset",
                    format!(
                        "sample {i} has audio {:?} and video {:?}, expected {:?} and {:?}",
                        s.audio.shape(),
                        s.video.shape(),
                        dims.audio_shape(),
                        dims.video_shape()
                    ),
                ));
            }
            if s.emotion as usize >= EMOTIONS.len() || s.gender as usize >= GENDERS.len() {
                return Err(Error::argument(
                    "dataset",
                    format!("sample {i} has labels ({}, {}) out of range", s.emotion, s.gender),
                ));
            }
        }
        Ok(Self { dims, samples })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Sample> {
        self.samples.get(i)
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            dims: self.dims,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Counts of each emotion and gender label.
    pub fn label_counts(&self) -> ([usize; 4], [usize; 2]) {
        let mut e = [0; 4];
        let mut g = [0; 2];
        for s in &self.samples {
            e[s.emotion as usize] += 1;
            g[s.gender as usize] += 1;
        }
        (e, g)
    }
}

/// Independent categorical votes for one item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationSet {
    votes: Vec<u8>,
}

impl AnnotationSet {
    pub fn new(votes: Vec<u8>) -> Result<Self> {
        if votes.is_empty() {
            return Err(Error::argument("annotation_set", "at least one vote is required"));
        }
        Ok(Self { votes })
    }

    pub fn votes(&self) -> &[u8] {
        &self.votes
    }
}

/// The most frequent vote. When several labels share the top count, one of
/// them is drawn uniformly from `rng`; a unique mode never touches `rng`.
pub fn majority_label<R: Rng + ?Sized>(votes: &AnnotationSet, rng: &mut R) -> u8 {
    let mut counts: Vec<(u8, usize)> = Vec::new();
    for &v in &votes.votes {
        match counts.iter_mut().find(|(label, _)| *label == v) {
            Some((_, c)) => *c += 1,
            None => counts.push((v, 1)),
        }
    }
    let top = counts.iter().map(|&(_, c)| c).max().unwrap_or(0);
    let tied: Vec<u8> = counts.iter().filter(|&&(_, c)| c == top).map(|&(l, _)| l).collect();
    if tied.len() == 1 {
        tied[0]
    } else {
        tied[rng.random_range(0..tied.len())]
    }
}

/// Partition sizes `(train, validation, test)` for `n` samples.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = n / 5;
    let test = n / 5;
    (n - val - test, val, test)
}

/// Seeded shuffle followed by a 6:2:2 partition (validation and test take
/// `floor(n / 5)` each, training the rest).
pub fn split_622(dataset: &Dataset, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let n = dataset.len();
    if n < 5 {
        return Err(Error::argument("split_622", format!("need at least 5 samples, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, val, _) = split_sizes(n);
    Ok((
        dataset.subset(&order[..train]),
        dataset.subset(&order[train..train + val]),
        dataset.subset(&order[train + val..]),
    ))
}
