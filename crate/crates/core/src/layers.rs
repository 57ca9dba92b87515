//! Dense, time-delay, normalization and dropout layers.
//!
//! Frame-level layers operate on a batch laid out as one `[Σ T_u × dim]`
//! matrix plus the per-utterance lengths, so per-frame work is a single
//! matrix product while context splicing still respects utterance edges.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Forward, Mode, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-8;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// Affine map `x Wᵀ + b` along the trailing dimension.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.add_weight(format!("{name}.weight"), out_dim, in_dim, rng)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros([out_dim]), true)?)
        } else {
            None
        };
        Ok(Dense {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }

    /// `x` is `[rows × in]`.
    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let y = f.graph.matmul_nt(x, w)?;
        match self.bias {
            Some(b) => {
                let b = f.param(b);
                f.graph.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Per-position normalization over the feature dimension with gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full([dim], 1.0), true)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros([dim]), true)?,
            dim,
        })
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let n = f.graph.normalize_rows(x, LAYER_NORM_EPS)?;
        let g = f.param(self.gain);
        let b = f.param(self.bias);
        let y = f.graph.mul_row(n, g)?;
        f.graph.add_row(y, b)
    }
}

/// Per-feature normalization over the rows of a batch.
///
/// Train mode normalizes with the biased batch variance and blends the
/// batch mean and unbiased variance into the running statistics with
/// momentum [`BATCH_NORM_MOMENTUM`]. Eval mode uses the running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub dim: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(BatchNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full([dim], 1.0), true)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros([dim]), true)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros([dim]), false)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::full([dim], 1.0), false)?,
            dim,
        })
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let (rows, cols) = f.graph.value(x).dims2();
        if cols != self.dim {
            return Err(Error::shape("batch_norm", f.graph.shape(x), &[self.dim]));
        }
        let normalized = match f.mode() {
            Mode::Train => {
                if rows < 2 {
                    return Err(Error::invalid(
                        "batch_norm",
                        "train mode needs a batch of at least 2 rows",
                    ));
                }
                let (mean, var) = column_moments(f.graph.value(x));
                let store = f.store();
                let m = BATCH_NORM_MOMENTUM;
                let unbias = rows as f64 / (rows - 1) as f64;
                let rm: Vec<f64> = store
                    .get(self.running_mean)
                    .data()
                    .iter()
                    .zip(&mean)
                    .map(|(r, b)| (1.0 - m) * r + m * b)
                    .collect();
                let rv: Vec<f64> = store
                    .get(self.running_var)
                    .data()
                    .iter()
                    .zip(&var)
                    .map(|(r, b)| (1.0 - m) * r + m * b * unbias)
                    .collect();
                f.push_stat_update(self.running_mean, Tensor::vector(rm));
                f.push_stat_update(self.running_var, Tensor::vector(rv));

                let t = f.graph.transpose(x)?;
                let n = f.graph.normalize_rows(t, BATCH_NORM_EPS)?;
                f.graph.transpose(n)?
            }
            Mode::Eval => {
                let store = f.store();
                let neg_mean: Vec<f64> = store.get(self.running_mean).data().iter().map(|v| -v).collect();
                let inv_std: Vec<f64> = store
                    .get(self.running_var)
                    .data()
                    .iter()
                    .map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt())
                    .collect();
                let shift = f.graph.constant(Tensor::vector(neg_mean));
                let scale = f.graph.constant(Tensor::vector(inv_std));
                let c = f.graph.add_row(x, shift)?;
                f.graph.mul_row(c, scale)?
            }
        };
        let g = f.param(self.gain);
        let b = f.param(self.bias);
        let y = f.graph.mul_row(normalized, g)?;
        f.graph.add_row(y, b)
    }
}

/// Per-column mean and biased variance of a matrix.
pub fn column_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (rows, cols) = x.dims2();
    let mut mean = vec![0.0; cols];
    for row in x.data().chunks(cols) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0; cols];
    for row in x.data().chunks(cols) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= rows as f64);
    (mean, var)
}

/// Inverted dropout. Identity in eval mode or at rate 0.
pub fn dropout(f: &mut Forward, x: Var, rate: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid("dropout", format!("rate {rate} outside [0, 1)")));
    }
    if f.mode() == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let shape = f.graph.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - rate);
    let rng = f
        .rng()
        .ok_or_else(|| Error::invalid("dropout", "train mode without an RNG"))?;
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let m = f.graph.constant(Tensor::new(shape, mask)?);
    f.graph.mul(x, m)
}

/// Mean softmax cross-entropy over a batch of logits.
pub fn cross_entropy_softmax(f: &mut Forward, logits: Var, labels: &[usize]) -> Result<Var> {
    f.graph.cross_entropy(logits, labels)
}

/// Time-delay layer: splices frames at fixed offsets (edge frames
/// replicated), applies an affine map, then optionally ReLU and batch norm.
#[derive(Clone, Debug)]
pub struct Tdnn {
    pub offsets: Vec<isize>,
    pub affine: Dense,
    pub norm: Option<BatchNorm>,
    pub in_dim: usize,
}

impl Tdnn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        offsets: &[isize],
        activate: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if offsets.is_empty() || offsets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(
                "Tdnn::new",
                format!("offsets must be strictly increasing and non-empty: {offsets:?}"),
            ));
        }
        let affine = Dense::new(
            store,
            &format!("{name}.affine"),
            in_dim * offsets.len(),
            out_dim,
            true,
            rng,
        )?;
        let norm = if activate {
            Some(BatchNorm::new(store, &format!("{name}.bn"), out_dim)?)
        } else {
            None
        };
        Ok(Tdnn {
            offsets: offsets.to_vec(),
            affine,
            norm,
            in_dim,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.affine.out_dim
    }

    pub fn num_params(&self) -> usize {
        self.affine.num_params() + self.norm.as_ref().map_or(0, BatchNorm::num_params)
    }

    /// `x` is `[Σ lengths × in_dim]`; output keeps the same row count.
    pub fn forward(&self, f: &mut Forward, x: Var, lengths: &[usize]) -> Result<Var> {
        let (rows, cols) = f.graph.value(x).dims2();
        if cols != self.in_dim {
            return Err(Error::shape("tdnn", f.graph.shape(x), &[rows, self.in_dim]));
        }
        if lengths.iter().sum::<usize>() != rows || lengths.contains(&0) {
            return Err(Error::EmptySequence { op: "tdnn" });
        }
        let spliced = if self.offsets == [0] {
            x
        } else {
            let mut parts = Vec::with_capacity(self.offsets.len());
            for &off in &self.offsets {
                let idx = splice_indices(lengths, off);
                parts.push(f.graph.gather_rows(x, idx)?);
            }
            f.graph.concat(&parts, 1)?
        };
        let y = self.affine.forward(f, spliced)?;
        match &self.norm {
            Some(bn) => {
                let r = f.graph.relu(y);
                bn.forward(f, r)
            }
            None => Ok(y),
        }
    }
}

/// Source row for every output row when shifting each segment by `offset`,
/// clamped to the segment's own first and last frame.
pub fn splice_indices(lengths: &[usize], offset: isize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(lengths.iter().sum());
    let mut start = 0;
    for &t in lengths {
        for i in 0..t {
            let src = (i as isize + offset).clamp(0, t as isize - 1) as usize;
            idx.push(start + src);
        }
        start += t;
    }
    idx
}
