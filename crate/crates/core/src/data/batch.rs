//! Fixed-length training crops and shuffled mini-batches.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::synth::shuffled;
use super::Corpus;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Chunks of equal length from several utterances, stacked row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B·chunk × d]`.
    pub frames: Tensor,
    /// `B` copies of the chunk length.
    pub lengths: Vec<usize>,
    /// Speaker index of each chunk.
    pub labels: Vec<usize>,
}

/// Row indices of a `chunk`-frame crop starting at `start`. Utterances
/// shorter than `chunk` are wrap-padded from their first frame.
pub fn crop_indices(frames: usize, chunk: usize, start: usize) -> Vec<usize> {
    if frames >= chunk {
        (start..start + chunk).collect()
    } else {
        (0..chunk).map(|i| i % frames).collect()
    }
}

/// Random crop start: uniform over all full-length windows, 0 when the
/// utterance is shorter than the chunk.
pub fn crop_start(frames: usize, chunk: usize, rng: &mut ChaCha8Rng) -> usize {
    if frames > chunk {
        rng.random_range(0..=frames - chunk)
    } else {
        0
    }
}

pub fn num_batches(utterances: usize, batch_size: usize) -> usize {
    utterances.div_ceil(batch_size)
}

/// One epoch of batches in an order shuffled by `rng`.
///
/// Every utterance contributes one random crop per epoch. The final batch
/// may be smaller than `batch_size`.
pub struct EpochBatches<'a> {
    corpus: &'a Corpus,
    order: Vec<usize>,
    next: usize,
    chunk: usize,
    batch_size: usize,
    rng: &'a mut ChaCha8Rng,
}

impl<'a> EpochBatches<'a> {
    pub fn new(corpus: &'a Corpus, chunk: usize, batch_size: usize, rng: &'a mut ChaCha8Rng) -> Result<Self> {
        if corpus.utterances.is_empty() {
            return Err(Error::invalid("chunk_and_batch", "empty corpus"));
        }
        if chunk == 0 || batch_size == 0 {
            return Err(Error::invalid(
                "chunk_and_batch",
                "chunk and batch size must be positive",
            ));
        }
        let order = shuffled(corpus.utterances.len(), rng);
        Ok(EpochBatches {
            corpus,
            order,
            next: 0,
            chunk,
            batch_size,
            rng,
        })
    }

    pub fn len(&self) -> usize {
        num_batches(self.order.len(), self.batch_size)
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

impl Iterator for EpochBatches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let picks = &self.order[self.next..end];
        self.next = end;
        let d = self.corpus.utterances[picks[0]].frames.dims2().1;
        let mut data = Vec::with_capacity(picks.len() * self.chunk * d);
        let mut labels = Vec::with_capacity(picks.len());
        for &u in picks {
            let utt = &self.corpus.utterances[u];
            let t = utt.frames.dims2().0;
            let start = crop_start(t, self.chunk, self.rng);
            for i in crop_indices(t, self.chunk, start) {
                data.extend_from_slice(utt.frames.row(i));
            }
            labels.push(utt.speaker);
        }
        Some(Batch {
            frames: Tensor::new([picks.len() * self.chunk, d], data).expect("nonempty batch"),
            lengths: vec![self.chunk; picks.len()],
            labels,
        })
    }
}
