//! Serialized multi-layer attention.
//!
//! A stack of `N` identical layers. Each layer is a pre-normalized
//! self-attention module followed by a pre-normalized feed-forward module,
//! both wrapped in residual connections:
//!
//! ```text
//! x      = LayerNorm(h)
//! q      = W_q [μ(x); σ(x)]                  one query per utterance
//! α_t    = softmax_t(q · W_k x_t / sqrt(d_k))
//! μ̃, σ̃   = weighted statistics of x_t under α
//! h'     = h + Dropout(R μ̃ + r)              broadcast to every frame
//! head_n = H [μ̃; σ̃] + c                      the layer's utterance vector
//! h''    = h' + Dropout(FFW(LayerNorm(h')))
//! ```
//!
//! The heads of all layers are summed; the sum is the speaker embedding, and
//! `BatchNorm(ReLU(sum))` feeds the classifier.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{dropout, BatchNorm, Dense, LayerNorm};
use crate::params::{Forward, ParamStore};
use crate::pooling::{scaled_dot_weights, statistics_pool, weighted_stats, StatsVar};
use crate::tensor::Var;

/// Dimensions shared by every layer of a stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SerializedDims {
    /// Frame dimension `d`.
    pub model_dim: usize,
    /// Query/key dimension `d_k`.
    pub key_dim: usize,
    /// Inner feed-forward dimension `d_ff`.
    pub ffn_dim: usize,
    /// Head / embedding dimension.
    pub embed_dim: usize,
}

impl SerializedDims {
    pub const FULL: SerializedDims = SerializedDims {
        model_dim: 256,
        key_dim: 128,
        ffn_dim: 512,
        embed_dim: 256,
    };

    /// Closed-form trainable parameter count of one layer, by component.
    pub fn layer_breakdown(&self) -> Vec<(&'static str, usize)> {
        let (d, dk, dff, de) = (self.model_dim, self.key_dim, self.ffn_dim, self.embed_dim);
        vec![
            ("attn_norm", 2 * d),
            ("query", dk * 2 * d),
            ("key", dk * d),
            ("residual", d * d + d),
            ("head", de * 2 * d + de),
            ("ffw_norm", 2 * d),
            ("ffw1", dff * d + dff),
            ("ffw2", d * dff + d),
        ]
    }

    pub fn layer_params(&self) -> usize {
        self.layer_breakdown().iter().map(|(_, n)| n).sum()
    }
}

/// Trainable parameters of one serialized layer.
#[derive(Clone, Debug)]
pub struct SerializedLayer {
    pub attn_norm: LayerNorm,
    /// `W_q`: `[d_k × 2d]`, no bias.
    pub query: Dense,
    /// `W_k`: `[d_k × d]`, no bias.
    pub key: Dense,
    /// Maps μ̃ back to frame space for the residual.
    pub residual: Dense,
    /// Maps `[μ̃; σ̃]` to the layer's head.
    pub head: Dense,
    pub ffw_norm: LayerNorm,
    pub ffw1: Dense,
    pub ffw2: Dense,
    pub dropout: f64,
}

/// Output of one self-attention module over a batch.
pub struct AttentionOutput {
    /// `[Σ T × d]`, input plus the broadcast μ̃ residual.
    pub frames: Var,
    /// Per-utterance weighted statistics of the normalized input.
    pub stats: Vec<StatsVar>,
    /// Per-utterance attention weights, each `[T]`.
    pub weights: Vec<Var>,
}

impl SerializedLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: SerializedDims,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let SerializedDims {
            model_dim: d,
            key_dim: dk,
            ffn_dim: dff,
            embed_dim: de,
        } = dims;
        Ok(SerializedLayer {
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d)?,
            query: Dense::new(store, &format!("{name}.query"), 2 * d, dk, false, rng)?,
            key: Dense::new(store, &format!("{name}.key"), d, dk, false, rng)?,
            residual: Dense::new(store, &format!("{name}.residual"), d, d, true, rng)?,
            head: Dense::new(store, &format!("{name}.head"), 2 * d, de, true, rng)?,
            ffw_norm: LayerNorm::new(store, &format!("{name}.ffw_norm"), d)?,
            ffw1: Dense::new(store, &format!("{name}.ffw1"), d, dff, true, rng)?,
            ffw2: Dense::new(store, &format!("{name}.ffw2"), dff, d, true, rng)?,
            dropout,
        })
    }

    pub fn num_params(&self) -> usize {
        self.attn_norm.num_params()
            + self.query.num_params()
            + self.key.num_params()
            + self.residual.num_params()
            + self.head.num_params()
            + self.ffw_norm.num_params()
            + self.ffw1.num_params()
            + self.ffw2.num_params()
    }

    /// Pre-normalized self-attention with an input-aware query.
    pub fn self_attention(&self, f: &mut Forward, h: Var, lengths: &[usize]) -> Result<AttentionOutput> {
        check_lengths(f, h, lengths, "self_attention_module")?;
        let x = self.attn_norm.forward(f, h)?;
        let keys = self.key.forward(f, x)?;
        let mut stats = Vec::with_capacity(lengths.len());
        let mut weights = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &t in lengths {
            let xu = f.graph.slice_rows(x, start, t)?;
            let ku = f.graph.slice_rows(keys, start, t)?;
            let q = input_aware_query(f, xu, &self.query)?;
            let alpha = scaled_dot_weights(&mut f.graph, ku, q)?;
            stats.push(weighted_stats(&mut f.graph, xu, alpha)?);
            weights.push(alpha);
            start += t;
        }
        let means: Vec<Var> = stats.iter().map(|s| s.mu).collect();
        let means = f.graph.concat(&means, 0)?;
        let res = self.residual.forward(f, means)?;
        let res = dropout(f, res, self.dropout)?;
        let owner: Vec<usize> = lengths
            .iter()
            .enumerate()
            .flat_map(|(u, &t)| std::iter::repeat_n(u, t))
            .collect();
        let res = f.graph.gather_rows(res, owner)?;
        let frames = f.graph.add(h, res)?;
        Ok(AttentionOutput { frames, stats, weights })
    }

    /// `h + Dropout(W₂ ReLU(W₁ LayerNorm(h) + b₁) + b₂)`, per frame.
    pub fn feed_forward(&self, f: &mut Forward, h: Var) -> Result<Var> {
        let x = self.ffw_norm.forward(f, h)?;
        let y = self.ffw1.forward(f, x)?;
        let y = f.graph.relu(y);
        let y = self.ffw2.forward(f, y)?;
        let y = dropout(f, y, self.dropout)?;
        f.graph.add(h, y)
    }

    /// Runs both modules and returns `(frames_out, head [B × d_emb])`.
    pub fn forward(&self, f: &mut Forward, h: Var, lengths: &[usize]) -> Result<(Var, Var)> {
        let att = self.self_attention(f, h, lengths)?;
        let pooled: Vec<Var> = att
            .stats
            .iter()
            .map(|s| s.concat(&mut f.graph))
            .collect::<Result<_>>()?;
        let pooled = f.graph.concat(&pooled, 0)?;
        let head = self.head.forward(f, pooled)?;
        let frames = self.feed_forward(f, att.frames)?;
        Ok((frames, head))
    }
}

/// `q = W_q [μ; σ]` from plain statistics pooling of one utterance `x [T×d]`.
/// Returns a `[1 × d_k]` row.
pub fn input_aware_query(f: &mut Forward, x: Var, query: &Dense) -> Result<Var> {
    let s = statistics_pool(&mut f.graph, x)?;
    let g = s.concat(&mut f.graph)?;
    query.forward(f, g)
}

fn check_lengths(f: &Forward, h: Var, lengths: &[usize], op: &'static str) -> Result<()> {
    let rows = f.graph.value(h).dims2().0;
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(Error::EmptySequence { op });
    }
    if lengths.iter().sum::<usize>() != rows {
        return Err(Error::invalid(
            op,
            format!(
                "lengths sum to {} but input has {rows} rows",
                lengths.iter().sum::<usize>()
            ),
        ));
    }
    Ok(())
}

/// `N` serialized layers plus the post-sum batch norm.
#[derive(Clone, Debug)]
pub struct SerializedStack {
    pub dims: SerializedDims,
    pub layers: Vec<SerializedLayer>,
    pub out_norm: BatchNorm,
}

/// Stack outputs for a batch, each `[B × d_emb]`.
pub struct StackOutput {
    /// Sum of the serialized heads: the speaker embedding.
    pub embedding: Var,
    /// `BatchNorm(ReLU(embedding))`, the classifier input.
    pub activated: Var,
}

impl SerializedStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: SerializedDims,
        num_layers: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::invalid("SerializedStack::new", "need at least one layer"));
        }
        let layers = (0..num_layers)
            .map(|n| SerializedLayer::new(store, &format!("{name}.layer{n}"), dims, dropout, rng))
            .collect::<Result<_>>()?;
        let out_norm = BatchNorm::new(store, &format!("{name}.out_bn"), dims.embed_dim)?;
        Ok(SerializedStack { dims, layers, out_norm })
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(SerializedLayer::num_params).sum::<usize>() + self.out_norm.num_params()
    }

    pub fn forward(&self, f: &mut Forward, h: Var, lengths: &[usize]) -> Result<StackOutput> {
        check_lengths(f, h, lengths, "serialized_embed")?;
        let mut frames = h;
        let mut sum: Option<Var> = None;
        for layer in &self.layers {
            let (next, head) = layer.forward(f, frames, lengths)?;
            frames = next;
            sum = Some(match sum {
                Some(s) => f.graph.add(s, head)?,
                None => head,
            });
        }
        let embedding = sum.expect("at least one layer");
        let r = f.graph.relu(embedding);
        let activated = self.out_norm.forward(f, r)?;
        Ok(StackOutput { embedding, activated })
    }
}
