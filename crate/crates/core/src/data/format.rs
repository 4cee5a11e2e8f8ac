use std::path::Path;

use super::{Dataset, Dims, Sample};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::io::atomic_write;

pub const MAGIC: &[u8; 4] = b"MMGD";
pub const VERSION: u32 = 1;

/// Serializes a dataset: magic, version, sample count, the five dims, then
/// per sample the audio and video payloads as little-endian `f32` followed by
/// the emotion and gender bytes.
///
/// Values are narrowed to `f32`; a dataset whose values are already
/// `f32`-representable (as the generator guarantees) round-trips exactly.
pub fn encode_dataset(dataset: &Dataset) -> Vec<u8> {
    let d = dataset.dims();
    let per_sample = 4 * (d.audio_len + d.video_len()) + 2;
    let mut out = Vec::with_capacity(4 + 4 + 8 + 20 + per_sample * dataset.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    for dim in [d.audio_len, d.frames, d.channels, d.height, d.width] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for s in dataset.samples() {
        for &v in s.audio.data().iter().chain(s.video.data()) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.push(s.emotion);
        out.push(s.gender);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(4 * n, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

/// Parses bytes produced by [`encode_dataset`]. Every failure reports the
/// byte offset at which parsing stopped.
pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        r.pos = 0;
        return Err(r.fail(format!("bad magic {magic:?}, expected \"MMGD\"")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let count = r.u64("sample count")?;
    let dims_at = r.pos;
    let mut dims = [0usize; 5];
    for (slot, what) in dims.iter_mut().zip(["audio length", "frames", "channels", "height", "width"]) {
        *slot = r.u32(what)? as usize;
    }
    let dims = Dims {
        audio_len: dims[0],
        frames: dims[1],
        channels: dims[2],
        height: dims[3],
        width: dims[4],
    };
    if dims.validate().is_err() {
        r.pos = dims_at;
        return Err(r.fail(format!("dimensions must be positive, got {dims:?}")));
    }
    let per_sample = (4 * (dims.audio_len + dims.video_len()) + 2) as u64;
    let remaining = (bytes.len() - r.pos) as u64;
    if count.checked_mul(per_sample).is_none_or(|need| need > remaining) {
        return Err(r.fail(format!(
            "{count} samples of {per_sample} bytes do not fit in the remaining {remaining} bytes"
        )));
    }
    let mut samples = Vec::with_capacity(count as usize);
    for i in 0..count {
        let audio = r.f32s(dims.audio_len, "audio")?;
        let video = r.f32s(dims.video_len(), "video")?;
        let label_at = r.pos;
        let labels = r.take(2, "labels")?;
        let (emotion, gender) = (labels[0], labels[1]);
        if emotion >= 4 || gender >= 2 {
            r.pos = label_at;
            return Err(r.fail(format!("sample {i} has labels ({emotion}, {gender}) out of range")));
        }
        samples.push(Sample {
            audio: Tensor::new(dims.audio_shape().to_vec(), audio)?,
            video: Tensor::new(dims.video_shape().to_vec(), video)?,
            emotion,
            gender,
        });
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Dataset::new(dims, samples)
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    atomic_write(path, &encode_dataset(dataset))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Input(format!("dataset file {} not found", path.display()))
        } else {
            e.into()
        }
    })?;
    decode_dataset(&bytes)
}
