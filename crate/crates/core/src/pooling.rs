//! Temporal aggregation of a frame sequence `[T×d]` into first- and
//! second-order statistics.
//!
//! All poolers here work on a single utterance. Standard deviations are
//! `sqrt(E[h²] - μ² + ε)` with [`STD_EPS`], so a constant sequence gives
//! `σ = √ε` rather than a NaN gradient.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::Dense;
use crate::params::{Forward, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

pub const STD_EPS: f64 = 1e-8;

/// Tolerance on `Σα = 1` accepted by [`weighted_stats`].
pub const WEIGHT_SUM_TOL: f64 = 1e-6;

/// Mean and standard deviation of a sequence, as graph nodes of shape `[1×d]`.
#[derive(Clone, Copy, Debug)]
pub struct StatsVar {
    pub mu: Var,
    pub sigma: Var,
}

impl StatsVar {
    /// `[μ; σ]` as a `[1×2d]` row.
    pub fn concat(&self, g: &mut Graph) -> Result<Var> {
        g.concat(&[self.mu, self.sigma], 1)
    }

    pub fn values(&self, g: &Graph) -> PoolingStats {
        PoolingStats {
            mu: g.value(self.mu).data().to_vec(),
            sigma: g.value(self.sigma).data().to_vec(),
        }
    }
}

/// Plain-value pooling result.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolingStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl PoolingStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn concat(&self) -> Vec<f64> {
        [self.mu.as_slice(), self.sigma.as_slice()].concat()
    }
}

fn frames_dims(g: &Graph, op: &'static str, h: Var) -> Result<(usize, usize)> {
    match g.shape(h) {
        [t, d] if *t > 0 && *d > 0 => Ok((*t, *d)),
        [0, _] => Err(Error::EmptySequence { op }),
        s => Err(Error::invalid(op, format!("expected [T×d] frames, got {s:?}"))),
    }
}

/// Unweighted mean and standard deviation over time.
pub fn statistics_pool(g: &mut Graph, h: Var) -> Result<StatsVar> {
    let (_, d) = frames_dims(g, "statistics_pool", h)?;
    let mu = g.mean_axis(h, 0)?;
    let sq = g.mul(h, h)?;
    let ex2 = g.mean_axis(sq, 0)?;
    let mu2 = g.mul(mu, mu)?;
    let var = g.sub(ex2, mu2)?;
    let sigma = g.sqrt_eps(var, STD_EPS);
    Ok(StatsVar {
        mu: g.reshape(mu, &[1, d])?,
        sigma: g.reshape(sigma, &[1, d])?,
    })
}

/// Mean and standard deviation under frame weights `alpha` (length T,
/// nonnegative, summing to one).
pub fn weighted_stats(g: &mut Graph, h: Var, alpha: Var) -> Result<StatsVar> {
    let (t, _) = frames_dims(g, "weighted_stats", h)?;
    let a = g.value(alpha);
    if a.numel() != t {
        return Err(Error::shape("weighted_stats", g.shape(h), g.shape(alpha)));
    }
    let total: f64 = a.data().iter().sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOL || a.data().iter().any(|&w| w < 0.0) {
        return Err(Error::invalid(
            "weighted_stats",
            format!("weights must be nonnegative and sum to 1, sum is {total}"),
        ));
    }
    let row = g.reshape(alpha, &[1, t])?;
    let mu = g.matmul(row, h)?;
    let sq = g.mul(h, h)?;
    let ex2 = g.matmul(row, sq)?;
    let mu2 = g.mul(mu, mu)?;
    let var = g.sub(ex2, mu2)?;
    let sigma = g.sqrt_eps(var, STD_EPS);
    Ok(StatsVar { mu, sigma })
}

/// `softmax_t(k_t · q / sqrt(d_k))` for keys `[T×d_k]` and a query row
/// `[1×d_k]`. Returns weights of shape `[T]`.
pub fn scaled_dot_weights(g: &mut Graph, keys: Var, query: Var) -> Result<Var> {
    let (t, dk) = frames_dims(g, "scaled_dot_weights", keys)?;
    let scores = g.matmul_nt(keys, query)?;
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
    let scores = g.reshape(scores, &[t])?;
    g.softmax(scores)
}

/// Frame scores `e_t = vᵀ ReLU(W h_t + b) + k`, softmax-normalized over time.
#[derive(Clone, Debug)]
pub struct AttentiveStatPool {
    pub hidden: Dense,
    pub v: ParamId,
    pub k: ParamId,
}

impl AttentiveStatPool {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let hidden_layer = Dense::new(store, &format!("{name}.hidden"), dim, hidden, true, rng)?;
        let v = store.add_weight(format!("{name}.v"), 1, hidden, rng)?;
        let k = store.add(format!("{name}.k"), Tensor::zeros([1]), true)?;
        Ok(AttentiveStatPool {
            hidden: hidden_layer,
            v,
            k,
        })
    }

    pub fn num_params(&self) -> usize {
        self.hidden.num_params() + self.hidden.out_dim + 1
    }

    pub fn weights(&self, f: &mut Forward, h: Var) -> Result<Var> {
        let (t, _) = frames_dims(&f.graph, "attentive_stats_pool", h)?;
        let a = self.hidden.forward(f, h)?;
        let a = f.graph.relu(a);
        let v = f.param(self.v);
        let k = f.param(self.k);
        let e = f.graph.matmul_nt(a, v)?;
        let e = f.graph.add_row(e, k)?;
        let e = f.graph.reshape(e, &[t])?;
        f.graph.softmax(e)
    }

    pub fn forward(&self, f: &mut Forward, h: Var) -> Result<StatsVar> {
        let alpha = self.weights(f, h)?;
        weighted_stats(&mut f.graph, h, alpha)
    }
}

/// Weights from a trainable, time-invariant query against transformed keys.
#[derive(Clone, Debug)]
pub struct SelfAttentivePool {
    pub key: Dense,
    pub query: ParamId,
    /// Apply ReLU to the key transform output.
    pub key_relu: bool,
}

impl SelfAttentivePool {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        key_source_dim: usize,
        key_dim: usize,
        key_relu: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let key = Dense::new(store, &format!("{name}.key"), key_source_dim, key_dim, true, rng)?;
        let query = store.add_weight(format!("{name}.query"), 1, key_dim, rng)?;
        Ok(SelfAttentivePool { key, query, key_relu })
    }

    pub fn key_dim(&self) -> usize {
        self.key.out_dim
    }

    pub fn num_params(&self) -> usize {
        self.key.num_params() + self.key.out_dim
    }

    pub fn weights(&self, f: &mut Forward, key_source: Var) -> Result<Var> {
        let keys = self.key.forward(f, key_source)?;
        let keys = if self.key_relu { f.graph.relu(keys) } else { keys };
        let q = f.param(self.query);
        scaled_dot_weights(&mut f.graph, keys, q)
    }

    /// Keys and values from the same sequence.
    pub fn forward(&self, f: &mut Forward, h: Var) -> Result<StatsVar> {
        self.forward_with_keys(f, h, h)
    }

    /// Values `h` weighted by attention over keys derived from `key_source`,
    /// which must have the same number of frames.
    pub fn forward_with_keys(&self, f: &mut Forward, h: Var, key_source: Var) -> Result<StatsVar> {
        let (t, _) = frames_dims(&f.graph, "self_attentive_pool", h)?;
        let (tk, _) = frames_dims(&f.graph, "self_attentive_pool", key_source)?;
        if t != tk {
            return Err(Error::shape(
                "self_attentive_pool",
                f.graph.shape(h),
                f.graph.shape(key_source),
            ));
        }
        let alpha = self.weights(f, key_source)?;
        weighted_stats(&mut f.graph, h, alpha)
    }
}

/// Evaluates `statistics_pool` on a plain matrix.
pub fn statistics_pool_values(h: &Tensor) -> Result<PoolingStats> {
    let mut g = Graph::new();
    let v = g.constant(h.clone());
    Ok(statistics_pool(&mut g, v)?.values(&g))
}

/// Evaluates `weighted_stats` on plain values.
pub fn weighted_stats_values(h: &Tensor, alpha: &[f64]) -> Result<PoolingStats> {
    let mut g = Graph::new();
    let v = g.constant(h.clone());
    let a = g.constant(Tensor::vector(alpha.to_vec()));
    Ok(weighted_stats(&mut g, v, a)?.values(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Mode;
    use crate::tensor::gradcheck::check_param_gradients;
    use rand::{Rng, SeedableRng};

    fn rand_frames(r: &mut ChaCha8Rng, t: usize, d: usize) -> Tensor {
        Tensor::new([t, d], (0..t * d).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn statistics_pool_examples() {
        let c = Tensor::new([4, 2], [1.5, -0.5].repeat(4)).unwrap();
        let s = statistics_pool_values(&c).unwrap();
        assert_eq!(s.mu, vec![1.5, -0.5]);
        assert!(close(&s.sigma, &[STD_EPS.sqrt(); 2], 1e-12));

        let h = Tensor::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let s = statistics_pool_values(&h).unwrap();
        assert_eq!(s.mu, vec![2.0]);
        assert!((s.sigma[0] - (1.0 + STD_EPS).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn weighted_stats_examples() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let h = rand_frames(&mut r, 6, 3);
        let uni = weighted_stats_values(&h, &[1.0 / 6.0; 6]).unwrap();
        let plain = statistics_pool_values(&h).unwrap();
        assert!(close(&uni.mu, &plain.mu, 1e-6));
        assert!(close(&uni.sigma, &plain.sigma, 1e-6));

        let mut onehot = vec![0.0; 6];
        onehot[4] = 1.0;
        let s = weighted_stats_values(&h, &onehot).unwrap();
        assert_eq!(s.mu, h.row(4).to_vec());
        assert!(close(&s.sigma, &[STD_EPS.sqrt(); 3], 1e-7));

        let h = Tensor::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        let s = weighted_stats_values(&h, &[0.25, 0.75]).unwrap();
        assert!((s.mu[0] - 1.5).abs() < 1e-15);
        assert!((s.sigma[0] - 0.75f64.sqrt()).abs() < 1e-7);
        assert!((s.sigma[0] - 0.866).abs() < 1e-3);

        assert!(weighted_stats_values(&h, &[0.5, 0.6]).is_err());
        assert!(weighted_stats_values(&h, &[1.5, -0.5]).is_err());
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(statistics_pool(&mut g, v).is_err());
    }

    #[test]
    fn attentive_zero_v_and_identical_frames_give_uniform_weights() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let p = AttentiveStatPool::new(&mut store, "att", 3, 5, &mut r).unwrap();
        let h = rand_frames(&mut r, 7, 3);
        let plain = statistics_pool_values(&h).unwrap();

        let mut zeroed = store.clone();
        *zeroed.get_mut(p.v) = Tensor::zeros([1, 5]);
        let mut f = Forward::eval(&zeroed);
        let hv = f.graph.constant(h.clone());
        let s = p.forward(&mut f, hv).unwrap().values(&f.graph);
        assert!(close(&s.mu, &plain.mu, 1e-12));
        assert!(close(&s.sigma, &plain.sigma, 1e-9));

        let same = Tensor::new([5, 3], h.row(0).repeat(5)).unwrap();
        let mut f = Forward::eval(&store);
        let hv = f.graph.constant(same);
        let a = p.weights(&mut f, hv).unwrap();
        assert!(f.graph.value(a).data().iter().all(|&w| (w - 0.2).abs() < 1e-15));
    }

    #[test]
    fn self_attentive_zero_query_and_orthogonal_key_shift() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let p = SelfAttentivePool::new(&mut store, "sap", 3, 4, false, &mut r).unwrap();
        let h = rand_frames(&mut r, 5, 3);
        let plain = statistics_pool_values(&h).unwrap();

        let mut zeroed = store.clone();
        *zeroed.get_mut(p.query) = Tensor::zeros([1, 4]);
        let mut f = Forward::eval(&zeroed);
        let hv = f.graph.constant(h.clone());
        let s = p.forward(&mut f, hv).unwrap().values(&f.graph);
        assert!(close(&s.mu, &plain.mu, 1e-12));

        // Shifting every key by u ⟂ q leaves the weights unchanged; the key
        // bias is exactly such a per-frame-constant shift.
        let q = store.get(p.query).data().to_vec();
        let mut u = vec![1.0, -2.0, 0.5, 3.0];
        let proj = u.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / q.iter().map(|b| b * b).sum::<f64>();
        u.iter_mut().zip(&q).for_each(|(a, b)| *a -= proj * b);
        let mut shifted = store.clone();
        *shifted.get_mut(p.key.bias.unwrap()) = Tensor::vector(u.clone());
        let weights = |s: &ParamStore| {
            let mut f = Forward::eval(s);
            let hv = f.graph.constant(h.clone());
            let a = p.weights(&mut f, hv).unwrap();
            f.graph.value(a).data().to_vec()
        };
        let base = weights(&store);
        assert!(close(&base, &weights(&shifted), 1e-12));

        // Scaling the keys (via the key weights) by c ≠ 1 changes them.
        let mut scaled = store.clone();
        for w in scaled.get_mut(p.key.weight).data_mut() {
            *w *= 3.0;
        }
        assert!(!close(&base, &weights(&scaled), 1e-6));
    }

    #[test]
    fn pooled_dimension_is_2d_for_all_lengths() {
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let att = AttentiveStatPool::new(&mut store, "att", 4, 6, &mut r).unwrap();
        let sap = SelfAttentivePool::new(&mut store, "sap", 4, 3, true, &mut r).unwrap();
        for t in [1usize, 2, 50, 200, 1000] {
            let h = rand_frames(&mut r, t, 4);
            let mut f = Forward::eval(&store);
            let hv = f.graph.constant(h.clone());
            let outs = [
                statistics_pool(&mut f.graph, hv).unwrap(),
                att.forward(&mut f, hv).unwrap(),
                sap.forward(&mut f, hv).unwrap(),
            ];
            for s in outs {
                let v = s.values(&f.graph);
                assert_eq!(v.concat().len(), 8);
                assert!(v.sigma.iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn pooling_gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut r = ChaCha8Rng::seed_from_u64(200 + seed);
            let mut store = ParamStore::new();
            let att = AttentiveStatPool::new(&mut store, "att", 3, 4, &mut r).unwrap();
            let sap = SelfAttentivePool::new(&mut store, "sap", 3, 4, false, &mut r).unwrap();
            let h = rand_frames(&mut r, 5, 3);
            let ids = [
                att.hidden.weight,
                att.hidden.bias.unwrap(),
                att.v,
                sap.key.weight,
                sap.key.bias.unwrap(),
                sap.query,
            ];
            let rep = check_param_gradients(&store, &ids, &h, Mode::Eval, 1e-5, |f, x| {
                let a = statistics_pool(&mut f.graph, x)?.concat(&mut f.graph)?;
                let b = att.forward(f, x)?.concat(&mut f.graph)?;
                let c = sap.forward(f, x)?.concat(&mut f.graph)?;
                f.graph.concat(&[a, b, c], 1)
            })
            .unwrap();
            assert!(rep.max_rel_error < 1e-5, "seed {seed}: {rep:?}");
        }
    }
}
