//! Central finite-difference checks of the analytic gradients, in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::layers::{self, LayerParams, Mode};
use crate::network::{init_layer, NetworkState, Tensor};
use crate::spec::{output_shape, LayerKind, LayerSpec, TensorShape};
use crate::Result;

/// Finite-difference step.
pub const STEP: f64 = 1e-4;

/// Norm-wise relative error `|a - n| / max(|a|, |n|)`; zero when both
/// vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub input: f64,
    pub weights: f64,
    pub biases: f64,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.input.max(self.weights).max(self.biases)
    }
}

/// Random input that keeps finite differences away from the kinks of ReLU
/// and max pooling: magnitudes at least 0.05 and distinct values.
fn kink_free_input(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..len)
        .map(|i| {
            let mag = 0.05 + rng.random::<f64>() + i as f64 * 1e-3;
            if rng.random_bool(0.5) { mag } else { -mag }
        })
        .collect();
    // shuffle so ties cannot line up with pooling windows
    for i in (1..len).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
    v
}

/// Checks one layer on a random input of `in_shape` against the scalar
/// objective `sum(r * y)` for a random `r`.
pub fn check_layer(kind: &LayerKind, in_shape: TensorShape, mode: Mode, seed: u64) -> Result<GradCheck> {
    let spec = LayerSpec::new("probe", *kind);
    let out_shape = output_shape(&spec, in_shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = kink_free_input(in_shape.len(), &mut rng);
    let mut params: LayerParams<f64> = init_layer(kind, in_shape, &mut rng);
    params.biases.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    let r: Vec<f64> = (0..out_shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mask_seed = rng.random::<u64>();

    let objective = |p: &LayerParams<f64>, x: &[f64]| -> f64 {
        let (y, _) = layers::forward(kind, p, x, in_shape, out_shape, mode, mask_seed);
        y.iter().zip(&r).map(|(a, b)| a * b).sum()
    };

    let (y, cache) = layers::forward(kind, &params, &x, in_shape, out_shape, mode, mask_seed);
    let mut grads = params.zeros_like();
    let dx = layers::backward(kind, &params, &x, &y, &cache, &r, in_shape, out_shape, mode, &mut grads);

    let numeric = |values: &[f64], eval: &dyn Fn(usize, f64) -> f64| -> Vec<f64> {
        (0..values.len())
            .map(|i| (eval(i, values[i] + STEP) - eval(i, values[i] - STEP)) / (2.0 * STEP))
            .collect()
    };
    let nx = numeric(&x, &|i, v| {
        let mut xx = x.clone();
        xx[i] = v;
        objective(&params, &xx)
    });
    let nw = numeric(&params.weights, &|i, v| {
        let mut pp = params.clone();
        pp.weights[i] = v;
        objective(&pp, &x)
    });
    let nb = numeric(&params.biases, &|i, v| {
        let mut pp = params.clone();
        pp.biases[i] = v;
        objective(&pp, &x)
    });
    Ok(GradCheck {
        input: relative_error(&dx, &nx),
        weights: relative_error(&grads.weights, &nw),
        biases: relative_error(&grads.biases, &nb),
    })
}

/// Checks a whole network against `loss_fn` applied to its logits for one
/// batch. Returns the relative error over all parameters.
pub fn check_network<F>(state: &NetworkState<f64>, batch: &[Tensor<f64>], seed: u64, loss_fn: F) -> Result<f64>
where
    F: Fn(&[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> + Copy,
{
    let (_, grads) = state.loss_and_gradients(batch, seed, loss_fn)?;
    let objective = |s: &NetworkState<f64>| -> Result<f64> { Ok(loss_fn(&s.logits(batch, seed)?)?.0) };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probe = state.clone();
    for (li, g) in grads.layers.iter().enumerate() {
        for (is_bias, values) in [(false, &g.weights), (true, &g.biases)] {
            for (i, &a) in values.iter().enumerate() {
                let orig = *param_mut(&mut probe, li, is_bias, i);
                *param_mut(&mut probe, li, is_bias, i) = orig + STEP;
                let up = objective(&probe)?;
                *param_mut(&mut probe, li, is_bias, i) = orig - STEP;
                let down = objective(&probe)?;
                *param_mut(&mut probe, li, is_bias, i) = orig;
                analytic.push(a);
                numeric.push((up - down) / (2.0 * STEP));
            }
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

fn param_mut(state: &mut NetworkState<f64>, layer: usize, bias: bool, i: usize) -> &mut f64 {
    let p = &mut state.params[layer];
    if bias {
        &mut p.biases[i]
    } else {
        &mut p.weights[i]
    }
}
