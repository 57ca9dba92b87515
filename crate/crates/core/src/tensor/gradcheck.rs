//! Central finite-difference gradient checking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::params::{Forward, Mode, ParamId, ParamStore};

/// Worst disagreement found by [`check_gradients`].
#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Denominator floor for the relative error. Central differences at step
/// 1e-5 carry round-off near 1e-10, so gradients that are analytically zero
/// would otherwise report large relative errors.
pub const REL_FLOOR: f64 = 1e-4;

/// Compares analytic gradients of a scalar function with central finite
/// differences of step `step`.
///
/// `build` receives a fresh graph and one leaf per input and must return a
/// scalar. It is invoked `1 + 2 * total_elements` times.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, mut build: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let mut eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut report = GradCheckReport::default();
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for e in 0..inputs[k].numel() {
            let orig = inputs[k].data()[e];
            probe[k].data_mut()[e] = orig + step;
            let up = eval(&probe)?;
            probe[k].data_mut()[e] = orig - step;
            let down = eval(&probe)?;
            probe[k].data_mut()[e] = orig;

            let numeric = (up - down) / (2.0 * step);
            let a = grad.data()[e];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Reduces `out` to a scalar with fixed random-looking weights so that every
/// output element contributes a distinct, O(1) gradient.
pub fn weighted_sum(g: &mut Graph, out: Var, salt: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n)
        .map(|i| {
            let h = (i as u64 + 1)
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(salt.wrapping_mul(0xBF58_476D_1CE4_E5B9));
            ((h >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// Finite-difference check of a model fragment with respect to its input
/// `x` and the stored parameters `ids`.
///
/// Every evaluation rebuilds the fragment in `mode` with the dropout RNG
/// reseeded identically, so train-mode masks are the same on each probe.
/// The fragment output is reduced with [`weighted_sum`].
pub fn check_param_gradients<F>(
    store: &ParamStore,
    ids: &[ParamId],
    x: &Tensor,
    mode: Mode,
    step: f64,
    fragment: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Forward, Var) -> Result<Var>,
{
    let mut inputs = vec![x.clone()];
    inputs.extend(ids.iter().map(|&id| store.get(id).clone()));
    check_gradients(&inputs, step, |g, vars| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut f = match mode {
            Mode::Train => Forward::train(store, &mut rng),
            Mode::Eval => Forward::eval(store),
        };
        std::mem::swap(&mut f.graph, g);
        for (&id, &v) in ids.iter().zip(&vars[1..]) {
            f.bind(id, v);
        }
        let result = fragment(&mut f, vars[0]).and_then(|y| weighted_sum(&mut f.graph, y, 17));
        std::mem::swap(&mut f.graph, g);
        result
    })
}
