//! Model assembly: TDNN front-end, utterance-level aggregator and the
//! speaker classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Architecture, Config};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Dense, Tdnn};
use crate::params::{Forward, ParamStore};
use crate::pooling::{statistics_pool, AttentiveStatPool, SelfAttentivePool, StatsVar};
use crate::serialized::SerializedStack;
use crate::tensor::Var;

/// Frame contexts of the five baseline TDNN layers.
pub const TDNN_CONTEXTS: [&[isize]; 5] = [&[-2, -1, 0, 1, 2], &[-2, 0, 2], &[-3, 0, 3], &[0], &[0]];

/// How frame features become one vector per utterance.
#[derive(Clone, Debug)]
pub enum Aggregator {
    Stat {
        embed: Dense,
        embed_norm: BatchNorm,
    },
    Attentive {
        pool: AttentiveStatPool,
        embed: Dense,
        embed_norm: BatchNorm,
    },
    /// Keys come from the fourth TDNN layer, values from the fifth.
    SelfAttentive {
        pool: SelfAttentivePool,
        embed: Dense,
        embed_norm: BatchNorm,
    },
    Serialized {
        projection: Dense,
        stack: SerializedStack,
    },
}

/// `FC → ReLU → BatchNorm → softmax layer`.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub hidden: Dense,
    pub hidden_norm: BatchNorm,
    pub output: Dense,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: Config,
    pub store: ParamStore,
    pub frontend: Vec<Tdnn>,
    pub aggregator: Aggregator,
    pub classifier: Classifier,
}

/// Graph outputs for a batch of `B` utterances.
pub struct ModelOutput {
    /// `[B × d_emb]` speaker embeddings.
    pub embedding: Var,
    /// `[B × num_speakers]`.
    pub logits: Var,
}

/// RNG stream used for parameter initialization.
const INIT_STREAM: u64 = 0;

impl Model {
    /// Builds a freshly initialized model. Initialization is deterministic
    /// in `config.model.seed`.
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        let mut rng = ChaCha8Rng::seed_from_u64(m.seed);
        rng.set_stream(INIT_STREAM);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let c = m.tdnn_channels;
        let front_layers = match m.architecture {
            Architecture::Serialized => 3,
            _ => 5,
        };
        let mut frontend = Vec::with_capacity(front_layers);
        let mut in_dim = m.input_dim;
        for (i, ctx) in TDNN_CONTEXTS.iter().take(front_layers).enumerate() {
            let out = if i == 4 { m.pool_channels } else { c };
            frontend.push(Tdnn::new(
                &mut store,
                &format!("tdnn{}", i + 1),
                in_dim,
                out,
                ctx,
                true,
                rng,
            )?);
            in_dim = out;
        }
        let stats_dim = 2 * m.pool_channels;
        let aggregator = match m.architecture {
            Architecture::StatPool => Aggregator::Stat {
                embed: Dense::new(&mut store, "embed", stats_dim, m.embed_dim, true, rng)?,
                embed_norm: BatchNorm::new(&mut store, "embed_bn", m.embed_dim)?,
            },
            Architecture::AttentiveStat => Aggregator::Attentive {
                pool: AttentiveStatPool::new(&mut store, "pool", m.pool_channels, m.attention_hidden, rng)?,
                embed: Dense::new(&mut store, "embed", stats_dim, m.embed_dim, true, rng)?,
                embed_norm: BatchNorm::new(&mut store, "embed_bn", m.embed_dim)?,
            },
            Architecture::SelfAttentive => Aggregator::SelfAttentive {
                pool: SelfAttentivePool::new(&mut store, "pool", c, m.attention_keys, true, rng)?,
                embed: Dense::new(&mut store, "embed", stats_dim, m.embed_dim, true, rng)?,
                embed_norm: BatchNorm::new(&mut store, "embed_bn", m.embed_dim)?,
            },
            Architecture::Serialized => Aggregator::Serialized {
                projection: Dense::new(&mut store, "projection", c, m.model_dim, true, rng)?,
                stack: SerializedStack::new(
                    &mut store,
                    "stack",
                    config.serialized_dims(),
                    m.num_layers,
                    m.dropout,
                    rng,
                )?,
            },
        };
        let classifier = Classifier {
            hidden: Dense::new(
                &mut store,
                "classifier.hidden",
                m.embed_dim,
                m.classifier_dim,
                true,
                rng,
            )?,
            hidden_norm: BatchNorm::new(&mut store, "classifier.hidden_bn", m.classifier_dim)?,
            output: Dense::new(
                &mut store,
                "classifier.output",
                m.classifier_dim,
                m.num_speakers,
                true,
                rng,
            )?,
        };
        Ok(Model {
            config: config.clone(),
            store,
            frontend,
            aggregator,
            classifier,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_trainable()
    }

    /// Trainable counts grouped by component: every parameter name with its
    /// last segment (`weight`, `bias`, `gain`, ...) removed.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for (_, e) in self.store.iter().filter(|(_, e)| e.trainable) {
            let group = e.name.rsplit_once('.').map_or(e.name.as_str(), |(g, _)| g);
            match groups.iter_mut().find(|g| g.0 == group) {
                Some(g) => g.1 += e.value.numel(),
                None => groups.push((group.to_string(), e.value.numel())),
            }
        }
        groups
    }

    /// Forward pass over `[Σ lengths × input_dim]` frames.
    pub fn forward(&self, f: &mut Forward, x: Var, lengths: &[usize]) -> Result<ModelOutput> {
        let input_dim = self.config.model.input_dim;
        if f.graph.value(x).rank() != 2 || f.graph.value(x).dims2().1 != input_dim {
            return Err(Error::shape(
                "model",
                f.graph.shape(x),
                &[lengths.iter().sum(), input_dim],
            ));
        }
        if lengths.is_empty() || lengths.contains(&0) {
            return Err(Error::EmptySequence { op: "model" });
        }
        let mut h = x;
        let mut fourth = None;
        for (i, layer) in self.frontend.iter().enumerate() {
            h = layer.forward(f, h, lengths)?;
            if i == 3 {
                fourth = Some(h);
            }
        }
        let (embedding, activated) = match &self.aggregator {
            Aggregator::Serialized { projection, stack } => {
                let p = projection.forward(f, h)?;
                let out = stack.forward(f, p, lengths)?;
                (out.embedding, out.activated)
            }
            Aggregator::Stat { embed, embed_norm } => {
                let pooled = per_utterance(f, h, lengths, |f, hu, _| statistics_pool(&mut f.graph, hu))?;
                pooled_embedding(f, pooled, embed, embed_norm)?
            }
            Aggregator::Attentive {
                pool,
                embed,
                embed_norm,
            } => {
                let pooled = per_utterance(f, h, lengths, |f, hu, _| pool.forward(f, hu))?;
                pooled_embedding(f, pooled, embed, embed_norm)?
            }
            Aggregator::SelfAttentive {
                pool,
                embed,
                embed_norm,
            } => {
                let keys = fourth.expect("baseline front-end has five layers");
                let pooled = per_utterance(f, h, lengths, |f, hu, range| {
                    let ku = f.graph.slice_rows(keys, range.0, range.1)?;
                    pool.forward_with_keys(f, hu, ku)
                })?;
                pooled_embedding(f, pooled, embed, embed_norm)?
            }
        };
        let c = &self.classifier;
        let hid = c.hidden.forward(f, activated)?;
        let hid = f.graph.relu(hid);
        let hid = c.hidden_norm.forward(f, hid)?;
        let logits = c.output.forward(f, hid)?;
        Ok(ModelOutput { embedding, logits })
    }
}

/// Pools each utterance separately and stacks `[μ; σ]` rows into
/// `[B × 2·dim]`.
fn per_utterance<F>(f: &mut Forward, h: Var, lengths: &[usize], mut pool: F) -> Result<Var>
where
    F: FnMut(&mut Forward, Var, (usize, usize)) -> Result<StatsVar>,
{
    let mut rows = Vec::with_capacity(lengths.len());
    let mut start = 0;
    for &t in lengths {
        let hu = f.graph.slice_rows(h, start, t)?;
        let s = pool(f, hu, (start, t))?;
        rows.push(s.concat(&mut f.graph)?);
        start += t;
    }
    f.graph.concat(&rows, 0)
}

/// First post-pooling affine (the embedding) and its `BatchNorm(ReLU(·))`.
fn pooled_embedding(f: &mut Forward, pooled: Var, embed: &Dense, norm: &BatchNorm) -> Result<(Var, Var)> {
    let e = embed.forward(f, pooled)?;
    let r = f.graph.relu(e);
    let a = norm.forward(f, r)?;
    Ok((e, a))
}
