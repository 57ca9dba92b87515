//! Module outputs against the plain-loop oracle on randomized parameters.

mod common;

use common::oracle::{self, Mat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sasv_core::pooling::{statistics_pool, weighted_stats};
use sasv_core::serialized::{SerializedDims, SerializedLayer, SerializedStack};
use sasv_core::{Forward, Graph, ParamStore, Tensor};

const DIMS: SerializedDims = SerializedDims {
    model_dim: 6,
    key_dim: 4,
    ffn_dim: 10,
    embed_dim: 5,
};

fn stacked(utts: &[Mat]) -> (Tensor, Vec<usize>) {
    let rows: Mat = utts.iter().flatten().cloned().collect();
    (oracle::from_mat(&rows), utts.iter().map(Vec::len).collect())
}

fn rows_of(t: &Tensor, start: usize, len: usize) -> Mat {
    oracle::to_mat(t)[start..start + len].to_vec()
}

#[test]
fn self_attention_module_matches_oracle() {
    for seed in 0..10 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layer = SerializedLayer::new(&mut store, "l", DIMS, 0.0, &mut r).unwrap();
        oracle::randomize(&mut store, &mut r);
        let utts = vec![oracle::rand_frames(&mut r, 7, 6), oracle::rand_frames(&mut r, 3, 6)];
        let (x, lengths) = stacked(&utts);

        let mut f = Forward::eval(&store);
        let h = f.graph.constant(x);
        let out = layer.self_attention(&mut f, h, &lengths).unwrap();
        let frames = f.graph.value(out.frames).clone();
        let mut start = 0;
        for (u, utt) in utts.iter().enumerate() {
            let want = oracle::attention_module(&store, "l", utt);
            let got = rows_of(&frames, start, utt.len());
            for (g, w) in got.iter().zip(&want.frames) {
                assert!(oracle::rel_err(g, w) < 1e-10, "seed {seed}");
            }
            let s = out.stats[u].values(&f.graph);
            assert!(oracle::rel_err(&s.mu, &want.mu) < 1e-10);
            assert!(oracle::rel_err(&s.sigma, &want.sigma) < 1e-7);
            let a = f.graph.value(out.weights[u]).data();
            assert!(oracle::rel_err(a, &want.alpha) < 1e-10);
            start += utt.len();
        }
    }
}

#[test]
fn feed_forward_module_matches_oracle() {
    for seed in 0..10 {
        let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut store = ParamStore::new();
        let layer = SerializedLayer::new(&mut store, "l", DIMS, 0.0, &mut r).unwrap();
        oracle::randomize(&mut store, &mut r);
        let h = oracle::rand_frames(&mut r, 9, 6);
        let mut f = Forward::eval(&store);
        let hv = f.graph.constant(oracle::from_mat(&h));
        let y = layer.feed_forward(&mut f, hv).unwrap();
        let got = oracle::to_mat(f.graph.value(y));
        for (g, w) in got.iter().zip(&oracle::ffw_module(&store, "l", &h)) {
            assert!(oracle::rel_err(g, w) < 1e-10);
        }
    }
}

#[test]
fn stack_embedding_matches_oracle() {
    for (seed, layers) in (0..8).zip([1usize, 2, 3, 4].iter().cycle()) {
        let mut r = ChaCha8Rng::seed_from_u64(200 + seed);
        let mut store = ParamStore::new();
        let stack = SerializedStack::new(&mut store, "s", DIMS, *layers, 0.0, &mut r).unwrap();
        oracle::randomize(&mut store, &mut r);
        let utts = vec![
            oracle::rand_frames(&mut r, 5, 6),
            oracle::rand_frames(&mut r, 1, 6),
            oracle::rand_frames(&mut r, 12, 6),
        ];
        let (x, lengths) = stacked(&utts);
        let mut f = Forward::eval(&store);
        let h = f.graph.constant(x);
        let out = stack.forward(&mut f, h, &lengths).unwrap();
        let emb = oracle::to_mat(f.graph.value(out.embedding));
        let act = oracle::to_mat(f.graph.value(out.activated));
        for (u, utt) in utts.iter().enumerate() {
            let (e, a) = oracle::serialized_embed(&store, "s", *layers, utt);
            assert!(oracle::rel_err(&emb[u], &e) < 1e-7, "seed {seed} utt {u}");
            assert!(oracle::rel_err(&act[u], &a) < 1e-7, "seed {seed} utt {u}");
        }
    }
}

#[test]
fn pooling_matches_two_pass_statistics() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for t in [1usize, 2, 17, 64] {
        let h = oracle::rand_frames(&mut r, t, 4);
        let raw: Vec<f64> = (0..t).map(|i| 1.0 + (i as f64 * 0.7).sin()).collect();
        let z: f64 = raw.iter().sum();
        let alpha: Vec<f64> = raw.iter().map(|v| v / z).collect();

        let mut g = Graph::new();
        let hv = g.constant(oracle::from_mat(&h));
        let av = g.constant(Tensor::vector(alpha.clone()));
        let plain = statistics_pool(&mut g, hv).unwrap().values(&g);
        let weighted = weighted_stats(&mut g, hv, av).unwrap().values(&g);

        let (m, s) = oracle::stats(&h);
        assert!(oracle::rel_err(&plain.mu, &m) < 1e-12);
        assert!(oracle::rel_err(&plain.sigma, &s) < 1e-7);
        let (m, s) = oracle::weighted_stats(&h, &alpha);
        assert!(oracle::rel_err(&weighted.mu, &m) < 1e-12);
        assert!(oracle::rel_err(&weighted.sigma, &s) < 1e-7);
    }
}
