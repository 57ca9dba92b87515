//! Training loop, embedding extraction and model files.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::{read_checkpoint, write_checkpoint};
use super::config::Config;
use super::model::Model;
use super::optim::{AdamW, AdamWConfig};
use crate::data::{Corpus, EpochBatches};
use crate::error::{Error, Result};
use crate::params::{apply_stat_updates, Forward};
use crate::tensor::Tensor;

const BATCH_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    /// Fraction of training chunks classified correctly in train mode.
    pub accuracy: f64,
    pub steps: usize,
    /// Batches with a single utterance, which batch norm cannot train on.
    pub skipped: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Loss of every optimizer step.
    pub losses: Vec<f64>,
    pub epochs: Vec<EpochSummary>,
}

fn check_corpus(model: &Model, corpus: &Corpus) -> Result<()> {
    let m = &model.config.model;
    if corpus.speakers.len() != m.num_speakers {
        return Err(Error::invalid(
            "train",
            format!(
                "corpus has {} speakers, config expects {}",
                corpus.speakers.len(),
                m.num_speakers
            ),
        ));
    }
    if let Some(d) = corpus.feature_dim() {
        if d != m.input_dim {
            return Err(Error::invalid(
                "train",
                format!("features have dim {d}, config expects {}", m.input_dim),
            ));
        }
    }
    Ok(())
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(0, |b, (i, &v)| if v > row[b] { i } else { b })
}

/// Trains `model` on `corpus` with the model's training settings. Batching
/// and dropout draw from RNG streams of `config.model.seed`, so a run is
/// reproducible bit for bit. `on_epoch` is called after every epoch.
pub fn train(model: &mut Model, corpus: &Corpus, mut on_epoch: impl FnMut(&EpochSummary)) -> Result<TrainReport> {
    check_corpus(model, corpus)?;
    let tc = model.config.train.clone();
    let seed = model.config.model.seed;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(seed);
    batch_rng.set_stream(BATCH_STREAM);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
    dropout_rng.set_stream(DROPOUT_STREAM);
    let mut opt = AdamW::new(
        AdamWConfig {
            beta1: tc.beta1,
            beta2: tc.beta2,
            eps: tc.adam_eps,
            weight_decay: tc.weight_decay,
        },
        &model.store,
    );
    let mut report = TrainReport::default();
    let mut lr = tc.lr;
    for epoch in 0..tc.epochs {
        let (mut loss_sum, mut correct, mut seen, mut steps, mut skipped) = (0.0, 0usize, 0usize, 0usize, 0usize);
        for batch in EpochBatches::new(corpus, tc.chunk_frames, tc.batch_size, &mut batch_rng)? {
            if batch.labels.len() < 2 {
                skipped += 1;
                continue;
            }
            let step = report.losses.len();
            let (loss, grads, stats, hits) = {
                let mut f = Forward::train(&model.store, &mut dropout_rng);
                let x = f.graph.constant(batch.frames);
                let out = model.forward(&mut f, x, &batch.lengths)?;
                let loss = f.graph.cross_entropy(out.logits, &batch.labels)?;
                let value = f.graph.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::Diverged { step, loss: value });
                }
                let logits = f.graph.value(out.logits);
                let hits = batch
                    .labels
                    .iter()
                    .enumerate()
                    .filter(|&(i, &l)| argmax(logits.row(i)) == l)
                    .count();
                f.graph.backward(loss)?;
                (value, f.param_grads(), f.take_stat_updates(), hits)
            };
            apply_stat_updates(&mut model.store, stats);
            opt.step(&mut model.store, &grads, lr);
            report.losses.push(loss);
            loss_sum += loss;
            correct += hits;
            seen += batch.labels.len();
            steps += 1;
        }
        let summary = EpochSummary {
            epoch,
            lr,
            mean_loss: if steps > 0 { loss_sum / steps as f64 } else { f64::NAN },
            accuracy: if seen > 0 { correct as f64 / seen as f64 } else { 0.0 },
            steps,
            skipped,
        };
        on_epoch(&summary);
        report.epochs.push(summary);
        lr *= tc.lr_decay;
    }
    Ok(report)
}

/// Eval-mode outputs for one whole utterance `[T × input_dim]`:
/// `(embedding, logits)`.
pub fn infer(model: &Model, frames: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    if frames.rank() != 2 {
        return Err(Error::invalid("extract_embedding", "expected a [T × d] matrix"));
    }
    let t = frames.dims2().0;
    let mut f = Forward::eval(&model.store);
    let x = f.graph.constant(frames.clone());
    let out = model.forward(&mut f, x, &[t])?;
    Ok((
        f.graph.value(out.embedding).data().to_vec(),
        f.graph.value(out.logits).data().to_vec(),
    ))
}

/// Speaker embedding of one whole utterance, computed in eval mode.
pub fn extract_embedding(model: &Model, frames: &Tensor) -> Result<Vec<f64>> {
    infer(model, frames).map(|(e, _)| e)
}

/// Embeddings of many utterances, computed in parallel.
pub fn extract_all(model: &Model, utterances: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
    utterances.par_iter().map(|x| extract_embedding(model, x)).collect()
}

/// Fraction of whole utterances whose eval-mode prediction matches the
/// speaker label.
pub fn classification_accuracy(model: &Model, corpus: &Corpus) -> Result<f64> {
    check_corpus(model, corpus)?;
    let hits: Vec<bool> = corpus
        .utterances
        .par_iter()
        .map(|u| infer(model, &u.frames).map(|(_, logits)| argmax(&logits) == u.speaker))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len().max(1) as f64)
}

/// `<model>.config`, the config that rebuilds a checkpoint's model.
pub fn config_path(model_path: &Path) -> PathBuf {
    let mut s = model_path.as_os_str().to_owned();
    s.push(".config");
    PathBuf::from(s)
}

/// `<model>.loss`, one training loss per line.
pub fn loss_path(model_path: &Path) -> PathBuf {
    let mut s = model_path.as_os_str().to_owned();
    s.push(".loss");
    PathBuf::from(s)
}

pub fn format_losses(losses: &[f64]) -> String {
    losses.iter().map(|l| format!("{l:?}\n")).collect()
}

/// Writes the checkpoint and its config sidecar.
pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    write_checkpoint(path, &model.store)?;
    let cfg = config_path(path);
    std::fs::write(&cfg, model.config.to_text()).map_err(|e| Error::io(&cfg, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let config = Config::load(&config_path(path))?;
    let mut model = Model::new(&config)?;
    model.store.load_from(&read_checkpoint(path)?)?;
    Ok(model)
}
