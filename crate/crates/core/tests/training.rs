//! End-to-end training on a tiny synthetic corpus.

use sasv_core::data::{synth_corpus, SynthConfig};
use sasv_core::harness::{
    self, classification_accuracy, extract_embedding, load_model, save_model, train, Architecture, Config, Model,
};

fn tiny() -> (Config, sasv_core::data::Corpus) {
    let synth = SynthConfig {
        num_speakers: 4,
        utts_per_speaker: 6,
        min_frames: 30,
        max_frames: 60,
        dim: 8,
        ..SynthConfig::default()
    };
    let (corpus, _) = synth_corpus(&synth).unwrap();
    let mut cfg = Config::desk();
    cfg.model.num_speakers = 4;
    cfg.model.input_dim = 8;
    cfg.model.model_dim = 16;
    cfg.model.key_dim = 8;
    cfg.model.ffn_dim = 32;
    cfg.model.embed_dim = 16;
    cfg.model.tdnn_channels = 16;
    cfg.model.pool_channels = 24;
    cfg.model.attention_hidden = 8;
    cfg.model.attention_keys = 8;
    cfg.model.classifier_dim = 16;
    cfg.train.epochs = 3;
    cfg.train.batch_size = 8;
    cfg.train.chunk_frames = 40;
    (cfg, corpus)
}

#[test]
fn every_architecture_trains_deterministically() {
    let (mut cfg, corpus) = tiny();
    for arch in Architecture::ALL {
        cfg.model.architecture = arch;
        let mut a = Model::new(&cfg).unwrap();
        let mut b = Model::new(&cfg).unwrap();
        let ra = train(&mut a, &corpus, |_| {}).unwrap();
        let rb = train(&mut b, &corpus, |_| {}).unwrap();
        assert_eq!(ra, rb, "{}", arch.name());
        assert_eq!(a.store, b.store);
        assert_eq!(ra.losses.len(), 9);
        assert!(ra.losses.iter().all(|l| l.is_finite()));
        // Untrained logits are near uniform over speakers.
        assert!(
            (ra.losses[0] - 4f64.ln()).abs() < 1.0,
            "{}: {}",
            arch.name(),
            ra.losses[0]
        );
        let acc = classification_accuracy(&a, &corpus).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn learning_rate_decays_each_epoch() {
    let (cfg, corpus) = tiny();
    let mut m = Model::new(&cfg).unwrap();
    let r = train(&mut m, &corpus, |_| {}).unwrap();
    let lrs: Vec<f64> = r.epochs.iter().map(|e| e.lr).collect();
    assert_eq!(lrs, vec![1e-3, 1e-3 * 0.8, 1e-3 * 0.8 * 0.8]);
}

#[test]
fn training_reduces_loss() {
    let (mut cfg, corpus) = tiny();
    cfg.train.epochs = 12;
    cfg.train.lr_decay = 0.9;
    cfg.train.lr = 3e-3;
    let mut m = Model::new(&cfg).unwrap();
    let r = train(&mut m, &corpus, |_| {}).unwrap();
    let first = r.epochs.first().unwrap().mean_loss;
    let last = r.epochs.last().unwrap().mean_loss;
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn checkpoint_round_trip_reproduces_embeddings() {
    let (cfg, corpus) = tiny();
    let mut m = Model::new(&cfg).unwrap();
    train(&mut m, &corpus, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.saem");
    save_model(&path, &m).unwrap();
    assert!(harness::train::config_path(&path).exists());
    let back = load_model(&path).unwrap();
    let x = &corpus.utterances[0].frames;
    let a = extract_embedding(&m, x).unwrap();
    let b = extract_embedding(&back, x).unwrap();
    // Weights are stored as f32.
    for (p, q) in a.iter().zip(&b) {
        assert!((p - q).abs() <= 1e-4 * p.abs().max(1.0), "{p} vs {q}");
    }
    assert_eq!(a.len(), cfg.model.embed_dim);
}

#[test]
fn mismatched_corpus_is_rejected() {
    let (mut cfg, corpus) = tiny();
    cfg.model.num_speakers = 5;
    let mut m = Model::new(&cfg).unwrap();
    assert!(train(&mut m, &corpus, |_| {}).is_err());
}
