//! Synthetic speaker corpus.
//!
//! Each speaker owns a low-rank basis, an offset and a noise level. An
//! utterance is a smoothed Gaussian latent walk mapped through the basis:
//! `x_t = B z_t + o + noise·η_t` with `z_t = a z_{t-1} + sqrt(1 - a²) ε_t`.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::lists::Trial;
use super::Corpus;
use super::Utterance;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

// Independent RNG streams under one seed.
const SPEAKER_STREAM: u64 = 1;
const TRIAL_STREAM: u64 = 2;
const UTTERANCE_STREAM: u64 = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_speakers: usize,
    pub utts_per_speaker: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub dim: usize,
    /// Latent rank of each speaker basis.
    pub rank: usize,
    /// AR(1) coefficient of the latent walk.
    pub smoothing: f64,
    pub noise: f64,
    pub offset_scale: f64,
    /// Minimum Frobenius distance between any two speakers' `[basis | offset]`.
    pub min_separation: f64,
    /// Target and nontarget trials generated per speaker.
    pub trials_per_speaker: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_speakers: 16,
            utts_per_speaker: 20,
            min_frames: 150,
            max_frames: 400,
            dim: 26,
            rank: 8,
            smoothing: 0.5,
            noise: 0.3,
            offset_scale: 1.0,
            min_separation: 2.0,
            trials_per_speaker: 20,
            seed: 7,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid("synth_corpus", msg.to_string()));
        if self.num_speakers < 2 {
            return bad("need at least two speakers");
        }
        if self.utts_per_speaker == 0 {
            return bad("need at least one utterance per speaker");
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad("frame range must satisfy 1 <= min <= max");
        }
        if self.dim == 0 || self.rank == 0 {
            return bad("dim and rank must be positive");
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return bad("smoothing must lie in [0, 1)");
        }
        if !(self.noise >= 0.0 && self.offset_scale >= 0.0 && self.min_separation >= 0.0) {
            return bad("scales must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpeakerModel {
    /// `[dim × rank]`.
    pub basis: Tensor,
    pub offset: Vec<f64>,
    pub smoothing: f64,
    pub noise: f64,
}

impl SyntheticSpeakerModel {
    fn draw(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let scale = (1.0 / cfg.rank as f64).sqrt();
        let basis: Vec<f64> = (0..cfg.dim * cfg.rank)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let offset = (0..cfg.dim)
            .map(|_| cfg.offset_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        SyntheticSpeakerModel {
            basis: Tensor::new([cfg.dim, cfg.rank], basis).expect("positive dims"),
            offset,
            smoothing: cfg.smoothing,
            noise: cfg.noise,
        }
    }

    fn distance(&self, other: &Self) -> f64 {
        let b: f64 = self
            .basis
            .data()
            .iter()
            .zip(other.basis.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let o: f64 = self
            .offset
            .iter()
            .zip(&other.offset)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (b + o).sqrt()
    }

    /// Draws `frames` frames `[frames × dim]`.
    pub fn sample(&self, frames: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let (dim, rank) = self.basis.dims2();
        let a = self.smoothing;
        let innov = (1.0 - a * a).sqrt();
        let mut z: Vec<f64> = (0..rank).map(|_| rng.sample(StandardNormal)).collect();
        let mut out = Vec::with_capacity(frames * dim);
        for _ in 0..frames {
            for zi in z.iter_mut() {
                *zi = a * *zi + innov * rng.sample::<f64, _>(StandardNormal);
            }
            for i in 0..dim {
                let row = self.basis.row(i);
                let proj: f64 = row.iter().zip(&z).map(|(b, z)| b * z).sum();
                out.push(proj + self.offset[i] + self.noise * rng.sample::<f64, _>(StandardNormal));
            }
        }
        Tensor::new([frames, dim], out).expect("positive dims")
    }
}

pub fn speaker_id(index: usize) -> String {
    format!("spk{index:03}")
}

/// Draws speaker models, redrawing any speaker closer than
/// `min_separation` to an earlier one.
pub fn synth_speakers(cfg: &SynthConfig) -> Result<Vec<SyntheticSpeakerModel>> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, SPEAKER_STREAM);
    let mut models: Vec<SyntheticSpeakerModel> = Vec::with_capacity(cfg.num_speakers);
    const MAX_DRAWS: usize = 1000;
    for s in 0..cfg.num_speakers {
        let mut draws = 0;
        loop {
            let m = SyntheticSpeakerModel::draw(cfg, &mut rng);
            if models.iter().all(|o| o.distance(&m) >= cfg.min_separation) {
                models.push(m);
                break;
            }
            draws += 1;
            if draws == MAX_DRAWS {
                return Err(Error::invalid(
                    "synth_corpus",
                    format!("could not place speaker {s} at separation {}", cfg.min_separation),
                ));
            }
        }
    }
    Ok(models)
}

/// Generates `per_speaker` utterances for every model. `split` names the
/// utterance ids (`spk003-<split>0007`) and selects an independent RNG
/// stream, so different splits of one seed never share draws.
pub fn synth_utterances(
    cfg: &SynthConfig,
    models: &[SyntheticSpeakerModel],
    per_speaker: usize,
    split: &str,
    split_index: u64,
) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, UTTERANCE_STREAM + split_index);
    let mut utterances = Vec::with_capacity(models.len() * per_speaker);
    for (s, m) in models.iter().enumerate() {
        for u in 0..per_speaker {
            let t = rng.random_range(cfg.min_frames..=cfg.max_frames);
            utterances.push(Utterance {
                id: format!("{}-{split}{u:04}", speaker_id(s)),
                speaker: s,
                frames: m.sample(t, &mut rng),
            });
        }
    }
    Ok(Corpus {
        speakers: (0..models.len()).map(speaker_id).collect(),
        utterances,
    })
}

/// Training corpus and a trial list over its utterances.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<(Corpus, Vec<Trial>)> {
    let models = synth_speakers(cfg)?;
    let corpus = synth_utterances(cfg, &models, cfg.utts_per_speaker, "utt", 0)?;
    let trials = make_trials(&corpus, cfg.trials_per_speaker, cfg.seed)?;
    Ok((corpus, trials))
}

/// For every speaker, `per_speaker` same-speaker pairs and as many pairs
/// against other speakers. Needs two utterances for every speaker.
pub fn make_trials(corpus: &Corpus, per_speaker: usize, seed: u64) -> Result<Vec<Trial>> {
    let mut by_speaker: Vec<Vec<usize>> = vec![Vec::new(); corpus.speakers.len()];
    for (i, u) in corpus.utterances.iter().enumerate() {
        by_speaker[u.speaker].push(i);
    }
    if by_speaker.len() < 2 || by_speaker.iter().any(|v| v.len() < 2) {
        return Err(Error::invalid(
            "make_trials",
            "need two speakers and two utterances per speaker",
        ));
    }
    let mut rng = stream(seed, TRIAL_STREAM);
    let id = |i: usize| corpus.utterances[i].id.clone();
    let mut trials = Vec::with_capacity(2 * per_speaker * by_speaker.len());
    for (s, own) in by_speaker.iter().enumerate() {
        for _ in 0..per_speaker.max(1) {
            let mut pair: Vec<usize> = own.choose_multiple(&mut rng, 2).copied().collect();
            pair.sort_unstable();
            trials.push(Trial {
                enroll: id(pair[0]),
                test: id(pair[1]),
                target: true,
            });
            let mut other = rng.random_range(0..by_speaker.len() - 1);
            if other >= s {
                other += 1;
            }
            let e = *own.choose(&mut rng).expect("nonempty");
            let t = *by_speaker[other].choose(&mut rng).expect("nonempty");
            trials.push(Trial {
                enroll: id(e),
                test: id(t),
                target: false,
            });
        }
    }
    Ok(trials)
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Fisher-Yates shuffle of `0..n` under `rng`.
pub(crate) fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}
