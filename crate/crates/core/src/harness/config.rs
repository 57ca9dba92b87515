//! Model and training configuration, and the `key = value` config file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::Preprocess;
use crate::error::{Error, Result};
use crate::serialized::SerializedDims;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// Mean and standard deviation pooling.
    StatPool,
    /// Pooling weighted by a one-hidden-layer frame scorer.
    AttentiveStat,
    /// Pooling weighted by a learned query against transformed keys.
    SelfAttentive,
    /// Serialized multi-layer attention.
    Serialized,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::StatPool,
        Architecture::AttentiveStat,
        Architecture::SelfAttentive,
        Architecture::Serialized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::StatPool => "stat_pool",
            Architecture::AttentiveStat => "attentive_stat",
            Architecture::SelfAttentive => "self_attentive",
            Architecture::Serialized => "serialized",
        }
    }
}

impl FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown architecture '{s}'"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Serialized layer count.
    pub num_layers: usize,
    pub model_dim: usize,
    pub key_dim: usize,
    pub ffn_dim: usize,
    pub embed_dim: usize,
    pub input_dim: usize,
    /// Width of the frame-level TDNN layers.
    pub tdnn_channels: usize,
    /// Width of the last baseline TDNN layer, which feeds pooling.
    pub pool_channels: usize,
    /// Hidden width of the attentive statistics scorer.
    pub attention_hidden: usize,
    /// Key width of self-attentive pooling.
    pub attention_keys: usize,
    /// Width of the classifier's hidden layer.
    pub classifier_dim: usize,
    pub num_speakers: usize,
    pub dropout: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Learning rate multiplier applied after every epoch.
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub chunk_frames: usize,
    /// Sliding CMN window in frames, 0 to disable.
    pub cmn_window: usize,
    /// Energy VAD threshold factor; `None` disables VAD.
    pub vad_k: Option<f64>,
    /// Training corpus manifest, relative to the config file.
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    /// Small dimensions that train in minutes on a laptop.
    pub fn desk() -> Self {
        Config {
            model: ModelConfig {
                architecture: Architecture::Serialized,
                num_layers: 2,
                model_dim: 64,
                key_dim: 32,
                ffn_dim: 128,
                embed_dim: 64,
                input_dim: 26,
                tdnn_channels: 64,
                pool_channels: 128,
                attention_hidden: 32,
                attention_keys: 32,
                classifier_dim: 64,
                num_speakers: 16,
                dropout: 0.1,
                seed: 1,
            },
            train: TrainConfig {
                lr: 1e-3,
                // A desk run is about 100 optimizer steps; 0.6 per epoch
                // leaves too little learning rate after the first few.
                lr_decay: 0.8,
                weight_decay: 0.01,
                beta1: 0.9,
                beta2: 0.999,
                adam_eps: 1e-8,
                epochs: 10,
                batch_size: 32,
                chunk_frames: 200,
                cmn_window: 300,
                vad_k: None,
                manifest: None,
            },
        }
    }

    /// Full-scale dimensions: 512-channel TDNN, d = 256, d_k = 128,
    /// d_ff = 512, six serialized layers, batch 512, nine epochs.
    pub fn full() -> Self {
        let desk = Config::desk();
        Config {
            model: ModelConfig {
                num_layers: 6,
                model_dim: 256,
                key_dim: 128,
                ffn_dim: 512,
                embed_dim: 256,
                tdnn_channels: 512,
                pool_channels: 1500,
                attention_hidden: 500,
                attention_keys: 500,
                classifier_dim: 256,
                num_speakers: 5994,
                ..desk.model
            },
            train: TrainConfig {
                lr_decay: 0.6,
                epochs: 9,
                batch_size: 512,
                ..desk.train
            },
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Config::desk()),
            "full" => Some(Config::full()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let t = &self.train;
        let bad = |msg: &str| Err(Error::invalid("config", msg.to_string()));
        let dims = [
            m.model_dim,
            m.key_dim,
            m.ffn_dim,
            m.embed_dim,
            m.input_dim,
            m.tdnn_channels,
            m.pool_channels,
            m.attention_hidden,
            m.attention_keys,
            m.classifier_dim,
        ];
        if dims.contains(&0) {
            return bad("all dimensions must be positive");
        }
        if m.architecture == Architecture::Serialized && m.num_layers == 0 {
            return bad("serialized architecture needs at least one layer");
        }
        if m.num_speakers < 2 {
            return bad("need at least two speakers");
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(t.lr_decay > 0.0 && t.weight_decay >= 0.0 && t.adam_eps > 0.0) {
            return bad("lr_decay and adam_eps must be positive, weight_decay nonnegative");
        }
        if !((0.0..1.0).contains(&t.beta1) && (0.0..1.0).contains(&t.beta2)) {
            return bad("betas must lie in [0, 1)");
        }
        if t.batch_size < 2 || t.chunk_frames == 0 {
            return bad("batch_size must be at least 2 and chunk_frames positive");
        }
        Ok(())
    }

    pub fn serialized_dims(&self) -> SerializedDims {
        SerializedDims {
            model_dim: self.model.model_dim,
            key_dim: self.model.key_dim,
            ffn_dim: self.model.ffn_dim,
            embed_dim: self.model.embed_dim,
        }
    }

    pub fn preprocess(&self) -> Preprocess {
        Preprocess {
            cmn_window: (self.train.cmn_window > 0).then_some(self.train.cmn_window),
            vad_k: self.train.vad_k,
        }
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("cannot parse '{v}'"))
        }
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "architecture" => m.architecture = value.parse()?,
            "layers" => m.num_layers = num(value)?,
            "model_dim" => m.model_dim = num(value)?,
            "key_dim" => m.key_dim = num(value)?,
            "ffn_dim" => m.ffn_dim = num(value)?,
            "embed_dim" => m.embed_dim = num(value)?,
            "input_dim" => m.input_dim = num(value)?,
            "tdnn_channels" => m.tdnn_channels = num(value)?,
            "pool_channels" => m.pool_channels = num(value)?,
            "attention_hidden" => m.attention_hidden = num(value)?,
            "attention_keys" => m.attention_keys = num(value)?,
            "classifier_dim" => m.classifier_dim = num(value)?,
            "num_speakers" => m.num_speakers = num(value)?,
            "dropout" => m.dropout = num(value)?,
            "seed" => m.seed = num(value)?,
            "lr" => t.lr = num(value)?,
            "lr_decay" => t.lr_decay = num(value)?,
            "weight_decay" => t.weight_decay = num(value)?,
            "beta1" => t.beta1 = num(value)?,
            "beta2" => t.beta2 = num(value)?,
            "adam_eps" => t.adam_eps = num(value)?,
            "epochs" => t.epochs = num(value)?,
            "batch_size" => t.batch_size = num(value)?,
            "chunk_frames" => t.chunk_frames = num(value)?,
            "cmn_window" => t.cmn_window = num(value)?,
            "vad_k" => {
                t.vad_k = match value {
                    "off" => None,
                    v => Some(num(v)?),
                }
            }
            "manifest" => t.manifest = Some(PathBuf::from(value)),
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Parses config text. A `preset` key (`desk` or `full`, default
    /// `desk`) selects the starting values; every other line overrides one
    /// field. `path` only labels errors.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Line {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(i + 1, format!("expected 'key = value', got '{line}'")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(err(i + 1, "empty key or value".into()));
            }
            if pairs.iter().any(|(_, pk, _)| *pk == k) {
                return Err(err(i + 1, format!("duplicate key '{k}'")));
            }
            pairs.push((i + 1, k, v));
        }
        let mut cfg = Config::desk();
        if let Some(&(line, _, v)) = pairs.iter().find(|(_, k, _)| *k == "preset") {
            cfg = Config::preset(v).ok_or_else(|| err(line, format!("unknown preset '{v}'")))?;
        }
        for &(line, k, v) in pairs.iter().filter(|(_, k, _)| *k != "preset") {
            cfg.set(k, v).map_err(|m| err(line, m))?;
        }
        cfg.validate().map_err(|e| err(0, e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Config::parse(&crate::codec::read_text(path)?, path)
    }

    /// Every field as config text that [`Config::parse`] reads back exactly.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("architecture", m.architecture.name().into());
        kv("layers", m.num_layers.to_string());
        kv("model_dim", m.model_dim.to_string());
        kv("key_dim", m.key_dim.to_string());
        kv("ffn_dim", m.ffn_dim.to_string());
        kv("embed_dim", m.embed_dim.to_string());
        kv("input_dim", m.input_dim.to_string());
        kv("tdnn_channels", m.tdnn_channels.to_string());
        kv("pool_channels", m.pool_channels.to_string());
        kv("attention_hidden", m.attention_hidden.to_string());
        kv("attention_keys", m.attention_keys.to_string());
        kv("classifier_dim", m.classifier_dim.to_string());
        kv("num_speakers", m.num_speakers.to_string());
        kv("dropout", format!("{:?}", m.dropout));
        kv("seed", m.seed.to_string());
        kv("lr", format!("{:?}", t.lr));
        kv("lr_decay", format!("{:?}", t.lr_decay));
        kv("weight_decay", format!("{:?}", t.weight_decay));
        kv("beta1", format!("{:?}", t.beta1));
        kv("beta2", format!("{:?}", t.beta2));
        kv("adam_eps", format!("{:?}", t.adam_eps));
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("chunk_frames", t.chunk_frames.to_string());
        kv("cmn_window", t.cmn_window.to_string());
        kv("vad_k", t.vad_k.map_or("off".into(), |k| format!("{k:?}")));
        if let Some(p) = &t.manifest {
            kv("manifest", p.display().to_string());
        }
        s
    }
}
