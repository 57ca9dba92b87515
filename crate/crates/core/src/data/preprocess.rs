//! Frame-level normalization and silence removal.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Three seconds at a 10 ms frame shift.
pub const DEFAULT_CMN_WINDOW: usize = 300;
/// Energy threshold sits `k` standard deviations below the mean energy.
pub const DEFAULT_VAD_K: f64 = 0.5;

/// Frames `[t - left, t + right]` of a centered window of `window` frames.
fn window_bounds(window: usize) -> (usize, usize) {
    let left = window / 2;
    (left, window - 1 - left)
}

/// Subtracts from each frame the mean of a centered window of `window`
/// frames, truncated at the sequence edges.
pub fn sliding_cmn(x: &Tensor, window: usize) -> Result<Tensor> {
    if window == 0 {
        return Err(Error::invalid("sliding_cmn", "window must be at least 1"));
    }
    let (t, d) = x.dims2();
    let (left, right) = window_bounds(window);
    // prefix[i] holds the column sums of rows 0..i
    let mut prefix = vec![0.0; (t + 1) * d];
    for i in 0..t {
        for j in 0..d {
            prefix[(i + 1) * d + j] = prefix[i * d + j] + x.get2(i, j);
        }
    }
    let mut out = x.clone();
    let data = out.data_mut();
    for i in 0..t {
        let lo = i.saturating_sub(left);
        let hi = (i + right).min(t - 1) + 1;
        let n = (hi - lo) as f64;
        for j in 0..d {
            data[i * d + j] -= (prefix[hi * d + j] - prefix[lo * d + j]) / n;
        }
    }
    Ok(out)
}

/// Keeps frames whose energy (feature 0) is at least `mean - k·std` of the
/// utterance energies. At least one frame always survives: the most
/// energetic one if the threshold rejects everything.
pub fn energy_vad(x: &Tensor, k: f64) -> Result<Tensor> {
    select_rows(x, &voiced_frames(x, k))
}

/// Row indices [`energy_vad`] keeps.
pub fn voiced_frames(x: &Tensor, k: f64) -> Vec<usize> {
    let t = x.dims2().0;
    let energy: Vec<f64> = (0..t).map(|i| x.get2(i, 0)).collect();
    let keep = vad_mask(&energy, k);
    (0..t).filter(|&i| keep[i]).collect()
}

pub(crate) fn select_rows(x: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let d = x.dims2().1;
    let data: Vec<f64> = rows.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
    Tensor::new([rows.len(), d], data)
}

/// Front-end feature processing applied before the network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preprocess {
    /// Sliding CMN window in frames; `None` disables normalization.
    pub cmn_window: Option<usize>,
    /// VAD threshold factor; `None` keeps every frame.
    pub vad_k: Option<f64>,
}

impl Preprocess {
    pub const NONE: Preprocess = Preprocess {
        cmn_window: None,
        vad_k: None,
    };

    /// CMN on all frames, then drops the frames VAD marks silent. Energies
    /// come from the raw input.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let keep = self.vad_k.map(|k| voiced_frames(x, k));
        let y = match self.cmn_window {
            Some(w) => sliding_cmn(x, w)?,
            None => x.clone(),
        };
        match keep {
            Some(rows) => select_rows(&y, &rows),
            None => Ok(y),
        }
    }
}

fn vad_mask(energy: &[f64], k: f64) -> Vec<bool> {
    let n = energy.len() as f64;
    let mean = energy.iter().sum::<f64>() / n;
    let var = energy.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    let threshold = mean - k * var.sqrt();
    let first = energy[0];
    if energy.iter().all(|&e| e == first) {
        return vec![true; energy.len()];
    }
    let mut keep: Vec<bool> = energy.iter().map(|&e| e >= threshold).collect();
    if !keep.iter().any(|&b| b) {
        let best = energy
            .iter()
            .enumerate()
            .fold(0, |b, (i, &e)| if e > energy[b] { i } else { b });
        keep[best] = true;
    }
    keep
}
