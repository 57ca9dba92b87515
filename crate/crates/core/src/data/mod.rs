//! Feature files, preprocessing, synthetic corpora, batching and text lists.

pub mod batch;
pub mod features;
pub mod lists;
pub mod preprocess;
pub mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use batch::{Batch, EpochBatches};
pub use features::{read_features, write_features, FrameSequence};
pub use lists::{ManifestEntry, ScoredTrial, Trial};
pub use preprocess::{energy_vad, sliding_cmn, Preprocess};
pub use synth::{synth_corpus, SynthConfig, SyntheticSpeakerModel};

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// Index into [`Corpus::speakers`].
    pub speaker: usize,
    /// `[T × d_in]`.
    pub frames: Tensor,
}

/// Labeled utterances held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub speakers: Vec<String>,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn feature_dim(&self) -> Option<usize> {
        self.utterances.first().map(|u| u.frames.dims2().1)
    }

    pub fn num_frames(&self) -> usize {
        self.utterances.iter().map(|u| u.frames.dims2().0).sum()
    }
}

fn resolve(base: &Path, rel: &Path) -> PathBuf {
    if rel.is_absolute() {
        rel.to_path_buf()
    } else {
        base.join(rel)
    }
}

/// Reads one manifest entry's features, relative to `base`, and applies
/// `pre`.
pub fn load_entry(base: &Path, e: &ManifestEntry, pre: &Preprocess) -> Result<FrameSequence> {
    let path = resolve(base, &e.path);
    let mut seq = read_features(&path)?;
    seq.frames = pre.apply(&seq.frames)?;
    seq.utt_id = e.utt.clone();
    seq.spk_id = Some(e.spk.clone());
    Ok(seq)
}

/// Loads every utterance of a manifest. Speaker labels are assigned in
/// sorted speaker-id order; feature paths are relative to the manifest.
pub fn load_corpus(manifest: &Path, pre: &Preprocess) -> Result<Corpus> {
    let entries = lists::read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut index: BTreeMap<&str, usize> = entries.iter().map(|e| (e.spk.as_str(), 0)).collect();
    for (i, v) in index.values_mut().enumerate() {
        *v = i;
    }
    let mut utterances = Vec::with_capacity(entries.len());
    let mut dim = None;
    for e in &entries {
        let seq = load_entry(base, e, pre)?;
        let d = seq.dim();
        if *dim.get_or_insert(d) != d {
            return Err(Error::invalid(
                "load_corpus",
                format!("{} has dim {d}, expected {}", e.utt, dim.unwrap_or(d)),
            ));
        }
        utterances.push(Utterance {
            id: e.utt.clone(),
            speaker: index[e.spk.as_str()],
            frames: seq.frames,
        });
    }
    Ok(Corpus {
        speakers: index.keys().map(|s| s.to_string()).collect(),
        utterances,
    })
}

/// Writes each utterance to `dir/<feats>/<id>.saef` and returns manifest
/// entries relative to `dir`.
pub fn write_corpus(dir: &Path, feats: &str, corpus: &Corpus) -> Result<Vec<ManifestEntry>> {
    let feat_dir = dir.join(feats);
    std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    corpus
        .utterances
        .iter()
        .map(|u| {
            let rel = Path::new(feats).join(format!("{}.saef", u.id));
            write_features(&dir.join(&rel), &u.frames)?;
            Ok(ManifestEntry {
                utt: u.id.clone(),
                spk: corpus.speakers[u.speaker].clone(),
                path: rel,
            })
        })
        .collect()
}
