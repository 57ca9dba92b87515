use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sasv_core::data::{self, lists, synth, SynthConfig};
use sasv_core::harness::{self, train, Architecture, Config, Model};
use sasv_core::serialized::SerializedDims;
use sasv_core::Tensor;

/// Speaker embeddings with serialized multi-layer attention pooling.
#[derive(Parser)]
#[command(name = "sasv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with train/eval manifests and trials.
    Synth(SynthArgs),
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Extract one embedding per manifest utterance.
    Extract(ExtractArgs),
    /// Cosine-score a trial list against extracted embeddings.
    Score(ScoreArgs),
    /// Compute EER and minDCF from scores and trial labels.
    Eval(EvalArgs),
    /// Print per-component parameter counts of a config.
    Params(ParamsArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    speakers: usize,
    /// Training utterances per speaker.
    #[arg(long, default_value_t = 20)]
    utts: usize,
    /// Held-out utterances per speaker.
    #[arg(long, default_value_t = 10)]
    eval_utts: usize,
    #[arg(long, default_value_t = 150)]
    min_frames: usize,
    #[arg(long, default_value_t = 400)]
    max_frames: usize,
    #[arg(long, default_value_t = 26)]
    dim: usize,
    #[arg(long, default_value_t = 20)]
    trials_per_speaker: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint path; `<out>.config` and `<out>.loss` are written beside it.
    #[arg(long)]
    out: PathBuf,
    /// Training manifest; overrides the config's `manifest` key.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Directory receiving `<utt>.saef` embedding files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    /// Directory of `<utt>.saef` embeddings.
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    trials: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    trials: PathBuf,
    /// Report raw detection costs instead of costs normalized by the best
    /// constant decision.
    #[arg(long)]
    unnormalized_dcf: bool,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long)]
    config: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Extract(a) => run_extract(a),
        Command::Score(a) => run_score(a),
        Command::Eval(a) => run_eval(a),
        Command::Params(a) => run_params(a),
    }
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        num_speakers: a.speakers,
        utts_per_speaker: a.utts,
        min_frames: a.min_frames,
        max_frames: a.max_frames,
        dim: a.dim,
        trials_per_speaker: a.trials_per_speaker,
        seed: a.seed,
        ..SynthConfig::default()
    };
    if a.eval_utts < 2 {
        bail!("--eval-utts must be at least 2 to form target trials");
    }
    let models = synth::synth_speakers(&cfg)?;
    let train_set = synth::synth_utterances(&cfg, &models, cfg.utts_per_speaker, "utt", 0)?;
    let eval_set = synth::synth_utterances(&cfg, &models, a.eval_utts, "eval", 1)?;
    let trials = synth::make_trials(&eval_set, cfg.trials_per_speaker, cfg.seed)?;

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let train_list = data::write_corpus(&a.out, "feats", &train_set)?;
    let eval_list = data::write_corpus(&a.out, "feats", &eval_set)?;
    lists::write_manifest(&a.out.join("train.list"), &train_list)?;
    lists::write_manifest(&a.out.join("eval.list"), &eval_list)?;
    lists::write_trials(&a.out.join("trials"), &trials)?;

    let mut config = Config::desk();
    config.model.num_speakers = cfg.num_speakers;
    config.model.input_dim = cfg.dim;
    config.train.manifest = Some(PathBuf::from("train.list"));
    std::fs::write(a.out.join("model.config"), config.to_text())?;
    println!(
        "wrote {} training and {} held-out utterances, {} trials to {}",
        train_list.len(),
        eval_list.len(),
        trials.len(),
        a.out.display()
    );
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut config = Config::load(&a.config)?;
    let manifest = match (a.manifest, &config.train.manifest) {
        (Some(m), _) => m,
        (None, Some(m)) => a.config.parent().unwrap_or(Path::new(".")).join(m),
        (None, None) => bail!("no training manifest: pass --manifest or set 'manifest' in the config"),
    };
    let corpus = data::load_corpus(&manifest, &config.preprocess())?;
    // The sidecar config must rebuild the model without the training corpus.
    config.train.manifest = None;
    let mut model = Model::new(&config)?;
    eprintln!(
        "{} model, {} trainable parameters, {} utterances of {} speakers",
        config.model.architecture.name(),
        model.num_params(),
        corpus.utterances.len(),
        corpus.speakers.len()
    );
    let report = train(&mut model, &corpus, |e| {
        eprintln!(
            "epoch {:>2}  lr {:.3e}  loss {:.4}  acc {:.4}  steps {}{}",
            e.epoch,
            e.lr,
            e.mean_loss,
            e.accuracy,
            e.steps,
            if e.skipped > 0 {
                format!("  skipped {}", e.skipped)
            } else {
                String::new()
            }
        )
    })?;
    harness::save_model(&a.out, &model)?;
    let loss = harness::train::loss_path(&a.out);
    std::fs::write(&loss, harness::train::format_losses(&report.losses))
        .with_context(|| format!("writing {}", loss.display()))?;
    Ok(())
}

fn run_extract(a: ExtractArgs) -> Result<()> {
    let model = harness::load_model(&a.model)?;
    let entries = lists::read_manifest(&a.manifest)?;
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let pre = model.config.preprocess();
    let seqs = entries
        .iter()
        .map(|e| data::load_entry(base, e, &pre))
        .collect::<sasv_core::Result<Vec<_>>>()?;
    let frames: Vec<&Tensor> = seqs.iter().map(|s| &s.frames).collect();
    let embeddings = harness::extract_all(&model, &frames)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (s, e) in seqs.iter().zip(embeddings) {
        let t = Tensor::new([1, e.len()], e)?;
        data::write_features(&a.out.join(format!("{}.saef", s.utt_id)), &t)?;
    }
    eprintln!("extracted {} embeddings to {}", seqs.len(), a.out.display());
    Ok(())
}

fn run_score(a: ScoreArgs) -> Result<()> {
    let trials = lists::read_trials(&a.trials)?;
    let mut embeddings: HashMap<String, Vec<f64>> = HashMap::new();
    for t in &trials {
        for id in [&t.enroll, &t.test] {
            if !embeddings.contains_key(id) {
                let seq = data::read_features(&a.embeddings.join(format!("{id}.saef")))?;
                embeddings.insert(id.clone(), seq.frames.into_data());
            }
        }
    }
    let scores = harness::score_trials(&embeddings, &trials)?;
    lists::write_scores(&a.out, &scores)?;
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let scores = lists::read_scores(&a.scores)?;
    let trials = lists::read_trials(&a.trials)?;
    let (s, l) = harness::join_scores(&scores, &trials)?;
    println!(
        "{}",
        harness::evaluate_with(&s, &l, !a.unnormalized_dcf)?.summary_line()
    );
    Ok(())
}

fn run_params(a: ParamsArgs) -> Result<()> {
    let config = Config::load(&a.config)?;
    let model = Model::new(&config)?;
    let breakdown = model.param_breakdown();
    let width = breakdown.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(12);
    for (name, n) in &breakdown {
        println!("{name:<width$} {n}");
    }
    if config.model.architecture == Architecture::Serialized {
        let dims: SerializedDims = config.serialized_dims();
        for l in 0..config.model.num_layers {
            let prefix = format!("stack.layer{l}.");
            let n: usize = breakdown
                .iter()
                .filter(|(name, _)| name.starts_with(&prefix))
                .map(|(_, n)| n)
                .sum();
            println!("{:<width$} {n}", format!("layer{l}_total"));
        }
        println!("{:<width$} {}", "layer_closed_form", dims.layer_params());
    }
    println!("{:<width$} {}", "total", model.num_params());
    Ok(())
}
