//! Single-utterance feature files.
//!
//! Layout (little-endian): `"SAEF"` | version `u32 = 1` | `T u32` | `d u32` |
//! `T·d` `f32` values, row-major.

use std::path::Path;

use crate::codec::{self, put_f32s, put_u32, to_u32, Reader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"SAEF";
pub const FEATURE_VERSION: u32 = 1;

/// Frames of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub utt_id: String,
    pub spk_id: Option<String>,
    /// `[T × d_in]`.
    pub frames: Tensor,
}

impl FrameSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }
}

pub fn encode_features(frames: &Tensor) -> Result<Vec<u8>> {
    if frames.rank() != 2 {
        return Err(Error::invalid(
            "write_features",
            format!("expected a matrix, got shape {:?}", frames.shape()),
        ));
    }
    let (t, d) = frames.dims2();
    let mut out = Vec::with_capacity(16 + 4 * t * d);
    out.extend_from_slice(FEATURE_MAGIC);
    put_u32(&mut out, FEATURE_VERSION);
    put_u32(&mut out, to_u32(t, "frame count")?);
    put_u32(&mut out, to_u32(d, "feature dim")?);
    put_f32s(&mut out, frames.data());
    Ok(out)
}

/// Parses a feature file image; `path` only labels errors.
pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut r = Reader::new(bytes, path);
    r.magic(FEATURE_MAGIC)?;
    let at = r.pos();
    let version = r.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(r.error(at, format!("unsupported version {version}")));
    }
    let at = r.pos();
    let t = r.u32("frame count")? as usize;
    if t == 0 {
        return Err(r.error(at, "frame count is zero"));
    }
    let at = r.pos();
    let d = r.u32("feature dim")? as usize;
    if d == 0 {
        return Err(r.error(at, "feature dim is zero"));
    }
    let n = t
        .checked_mul(d)
        .ok_or_else(|| r.error(at, "frame count × dim overflows"))?;
    let data = r.f32s(n, "frame data")?;
    r.finish()?;
    Tensor::new([t, d], data)
}

pub fn write_features(path: &Path, frames: &Tensor) -> Result<()> {
    codec::write_file(path, &encode_features(frames)?)
}

/// Reads a feature file. The utterance id is the file stem.
pub fn read_features(path: &Path) -> Result<FrameSequence> {
    let bytes = codec::read_file(path)?;
    let frames = decode_features(&bytes, path)?;
    let utt_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(FrameSequence {
        utt_id,
        spk_id: None,
        frames,
    })
}
