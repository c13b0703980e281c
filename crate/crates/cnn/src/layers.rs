//! Single-sample forward and backward kernels for every layer kind.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::spec::{DropoutMode, LayerKind, LrnParams, TensorShape};

/// Whether dropout samples masks or applies its expectation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

/// What a layer keeps from the forward pass for its backward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum Cache<S> {
    None,
    Cols(Vec<S>),
    Argmax(Vec<u32>),
    Mask(Vec<S>),
    /// LRN denominators `bias + alpha * sum a^2`.
    Denominator(Vec<S>),
}

/// Weights and biases of one layer; empty for parameter-free layers.
/// Convolution weights are `filters x (channels * k * k)`, fully-connected
/// weights `out x in`, both row-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerParams<S> {
    pub weights: Vec<S>,
    pub biases: Vec<S>,
}

impl<S: Scalar> LayerParams<S> {
    pub fn zeros_like(&self) -> Self {
        Self {
            weights: vec![S::zero(); self.weights.len()],
            biases: vec![S::zero(); self.biases.len()],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty() && self.biases.is_empty()
    }

    pub fn add_assign(&mut self, o: &Self) {
        self.weights.iter_mut().zip(&o.weights).for_each(|(a, b)| *a = *a + *b);
        self.biases.iter_mut().zip(&o.biases).for_each(|(a, b)| *a = *a + *b);
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().chain(&self.biases).all(|v| v.is_finite())
    }
}

/// Seed for the dropout mask of one layer of one sample.
pub fn mask_seed(seed: u64, sample: u64, layer: usize) -> u64 {
    let mut z = seed ^ sample.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (layer as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn im2col<S: Scalar>(x: &[S], s: TensorShape, k: usize, stride: usize, pad: usize, out: TensorShape) -> Vec<S> {
    let p = out.height * out.width;
    let mut cols = vec![S::zero(); s.channels * k * k * p];
    for c in 0..s.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..out.height {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= s.height as isize {
                        continue;
                    }
                    let src = &x[(c * s.height + iy as usize) * s.width..][..s.width];
                    for ox in 0..out.width {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < s.width as isize {
                            dst[oy * out.width + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<S: Scalar>(cols: &[S], s: TensorShape, k: usize, stride: usize, pad: usize, out: TensorShape) -> Vec<S> {
    let p = out.height * out.width;
    let mut dx = vec![S::zero(); s.len()];
    for c in 0..s.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..out.height {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= s.height as isize {
                        continue;
                    }
                    let base = (c * s.height + iy as usize) * s.width;
                    for ox in 0..out.width {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < s.width as isize {
                            let d = &mut dx[base + ix as usize];
                            *d = *d + src[oy * out.width + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn lrn_window(c: usize, channels: usize, size: usize) -> std::ops::Range<usize> {
    let lo = c.saturating_sub((size - 1) / 2);
    let hi = (c + size / 2 + 1).min(channels);
    lo..hi
}

fn lrn_denominators<S: Scalar>(x: &[S], s: TensorShape, p: &LrnParams) -> Vec<S> {
    let hw = s.height * s.width;
    let alpha = S::from_f64_lossy(p.alpha);
    let bias = S::from_f64_lossy(p.bias);
    let mut den = vec![S::zero(); x.len()];
    for c in 0..s.channels {
        for i in 0..hw {
            let sum: S = lrn_window(c, s.channels, p.size).map(|j| x[j * hw + i] * x[j * hw + i]).sum();
            den[c * hw + i] = bias + alpha * sum;
        }
    }
    den
}

/// Forward pass of one layer on one sample.
pub fn forward<S: Scalar>(
    kind: &LayerKind,
    params: &LayerParams<S>,
    x: &[S],
    in_shape: TensorShape,
    out_shape: TensorShape,
    mode: Mode,
    seed: u64,
) -> (Vec<S>, Cache<S>) {
    match *kind {
        LayerKind::Conv { filters, kernel, stride, pad } => {
            let cols = im2col(x, in_shape, kernel, stride, pad, out_shape);
            let p = out_shape.height * out_shape.width;
            let ckk = in_shape.channels * kernel * kernel;
            let mut y = vec![S::zero(); filters * p];
            for (f, row) in y.chunks_exact_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v = params.biases[f]);
            }
            S::gemm(filters, ckk, p, S::one(), &params.weights, (ckk as isize, 1), &cols, (p as isize, 1), S::one(), &mut y, (p as isize, 1));
            (y, Cache::Cols(cols))
        }
        LayerKind::FullyConnected { out_dim } => {
            let n_in = x.len();
            let mut y = params.biases.clone();
            S::gemm(out_dim, n_in, 1, S::one(), &params.weights, (n_in as isize, 1), x, (1, 1), S::one(), &mut y, (1, 1));
            (y, Cache::None)
        }
        LayerKind::Relu => (x.iter().map(|&v| v.max(S::zero())).collect(), Cache::None),
        LayerKind::Lrn(p) => {
            let den = lrn_denominators(x, in_shape, &p);
            let beta = S::from_f64_lossy(p.beta);
            let y = x.iter().zip(&den).map(|(&a, &d)| a * d.powf(-beta)).collect();
            (y, Cache::Denominator(den))
        }
        LayerKind::MaxPool { window, stride } => {
            let (oh, ow) = (out_shape.height, out_shape.width);
            let mut y = vec![S::zero(); out_shape.len()];
            let mut arg = vec![0u32; out_shape.len()];
            for c in 0..in_shape.channels {
                let plane = c * in_shape.height * in_shape.width;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = S::neg_infinity();
                        let mut best_i = 0usize;
                        for ky in 0..window {
                            for kx in 0..window {
                                let i = plane + (oy * stride + ky) * in_shape.width + ox * stride + kx;
                                // strict comparison: the first maximum in row-major order wins
                                if x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                        let o = (c * oh + oy) * ow + ox;
                        y[o] = best;
                        arg[o] = best_i as u32;
                    }
                }
            }
            (y, Cache::Argmax(arg))
        }
        LayerKind::Dropout { rate, mode: dmode } => match mode {
            Mode::Eval => {
                let scale = match dmode {
                    DropoutMode::Inverted => S::one(),
                    DropoutMode::Classic => S::from_f64_lossy(1.0 - rate),
                };
                (x.iter().map(|&v| v * scale).collect(), Cache::None)
            }
            Mode::Train => {
                let keep = match dmode {
                    DropoutMode::Inverted => S::from_f64_lossy(1.0 / (1.0 - rate)),
                    DropoutMode::Classic => S::one(),
                };
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mask: Vec<S> = (0..x.len())
                    .map(|_| if rng.random::<f64>() < rate { S::zero() } else { keep })
                    .collect();
                (x.iter().zip(&mask).map(|(&v, &m)| v * m).collect(), Cache::Mask(mask))
            }
        },
        LayerKind::Softmax => (softmax(x), Cache::None),
    }
}

pub fn softmax<S: Scalar>(x: &[S]) -> Vec<S> {
    let m = x.iter().copied().fold(S::neg_infinity(), S::max);
    let e: Vec<S> = x.iter().map(|&v| (v - m).exp()).collect();
    let z: S = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Backward pass of one layer on one sample. Parameter gradients are added
/// into `grads`; the input gradient is returned.
#[allow(clippy::too_many_arguments)]
pub fn backward<S: Scalar>(
    kind: &LayerKind,
    params: &LayerParams<S>,
    x: &[S],
    y: &[S],
    cache: &Cache<S>,
    dy: &[S],
    in_shape: TensorShape,
    out_shape: TensorShape,
    mode: Mode,
    grads: &mut LayerParams<S>,
) -> Vec<S> {
    match *kind {
        LayerKind::Conv { filters, kernel, stride, pad } => {
            let Cache::Cols(cols) = cache else { unreachable!("conv cache") };
            let p = out_shape.height * out_shape.width;
            let ckk = in_shape.channels * kernel * kernel;
            S::gemm(filters, p, ckk, S::one(), dy, (p as isize, 1), cols, (1, p as isize), S::one(), &mut grads.weights, (ckk as isize, 1));
            for (f, row) in dy.chunks_exact(p).enumerate() {
                grads.biases[f] = grads.biases[f] + row.iter().copied().sum::<S>();
            }
            let mut dcols = vec![S::zero(); ckk * p];
            S::gemm(ckk, filters, p, S::one(), &params.weights, (1, ckk as isize), dy, (p as isize, 1), S::zero(), &mut dcols, (p as isize, 1));
            col2im(&dcols, in_shape, kernel, stride, pad, out_shape)
        }
        LayerKind::FullyConnected { out_dim } => {
            let n_in = x.len();
            S::gemm(out_dim, 1, n_in, S::one(), dy, (1, 1), x, (1, 1), S::one(), &mut grads.weights, (n_in as isize, 1));
            grads.biases.iter_mut().zip(dy).for_each(|(g, &d)| *g = *g + d);
            let mut dx = vec![S::zero(); n_in];
            S::gemm(n_in, out_dim, 1, S::one(), &params.weights, (1, n_in as isize), dy, (1, 1), S::zero(), &mut dx, (1, 1));
            dx
        }
        LayerKind::Relu => x
            .iter()
            .zip(dy)
            .map(|(&v, &d)| if v > S::zero() { d } else { S::zero() })
            .collect(),
        LayerKind::Lrn(p) => {
            let Cache::Denominator(den) = cache else { unreachable!("lrn cache") };
            let hw = in_shape.height * in_shape.width;
            let beta = S::from_f64_lossy(p.beta);
            let coef = S::from_f64_lossy(2.0 * p.alpha * p.beta);
            let mut dx: Vec<S> = dy.iter().zip(den).map(|(&g, &d)| g * d.powf(-beta)).collect();
            for c in 0..in_shape.channels {
                for i in 0..hw {
                    let idx = c * hw + i;
                    let t = dy[idx] * x[idx] * den[idx].powf(-beta - S::one());
                    for j in lrn_window(c, in_shape.channels, p.size) {
                        let jdx = j * hw + i;
                        dx[jdx] = dx[jdx] - coef * x[jdx] * t;
                    }
                }
            }
            dx
        }
        LayerKind::MaxPool { .. } => {
            let Cache::Argmax(arg) = cache else { unreachable!("pool cache") };
            let mut dx = vec![S::zero(); in_shape.len()];
            for (&a, &g) in arg.iter().zip(dy) {
                dx[a as usize] = dx[a as usize] + g;
            }
            dx
        }
        LayerKind::Dropout { rate, mode: dmode } => match (mode, cache) {
            (Mode::Train, Cache::Mask(mask)) => dy.iter().zip(mask).map(|(&g, &m)| g * m).collect(),
            _ => {
                let scale = match dmode {
                    DropoutMode::Inverted => S::one(),
                    DropoutMode::Classic => S::from_f64_lossy(1.0 - rate),
                };
                dy.iter().map(|&g| g * scale).collect()
            }
        },
        LayerKind::Softmax => {
            let dot: S = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
            y.iter().zip(dy).map(|(&p, &g)| p * (g - dot)).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_example() {
        let (y, _) = forward::<f64>(&LayerKind::Relu, &LayerParams::default(), &[-1.0, 0.0, 2.0], TensorShape::flat(3), TensorShape::flat(3), Mode::Eval, 0);
        assert_eq!(y, vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn max_pool_ties_go_to_first_index() {
        let s = TensorShape::new(1, 2, 2);
        let kind = LayerKind::MaxPool { window: 2, stride: 2 };
        let x = [3.0f64, 3.0, 1.0, 3.0];
        let (y, cache) = forward(&kind, &LayerParams::default(), &x, s, TensorShape::new(1, 1, 1), Mode::Train, 0);
        assert_eq!(y, vec![3.0]);
        let dx = backward(&kind, &LayerParams::default(), &x, &y, &cache, &[1.0], s, TensorShape::new(1, 1, 1), Mode::Train, &mut LayerParams::default());
        assert_eq!(dx, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dropout_eval_modes() {
        let x = [1.0f64, 2.0];
        let s = TensorShape::flat(2);
        let inv = LayerKind::Dropout { rate: 0.5, mode: DropoutMode::Inverted };
        let cls = LayerKind::Dropout { rate: 0.5, mode: DropoutMode::Classic };
        let p = LayerParams::default();
        assert_eq!(forward(&inv, &p, &x, s, s, Mode::Eval, 0).0, vec![1.0, 2.0]);
        assert_eq!(forward(&cls, &p, &x, s, s, Mode::Eval, 0).0, vec![0.5, 1.0]);
        let dx = backward(&cls, &p, &x, &x, &Cache::None, &[1.0, 1.0], s, s, Mode::Eval, &mut LayerParams::default());
        assert_eq!(dx, vec![0.5, 0.5]);
    }

    #[test]
    fn inverted_dropout_keeps_expectation() {
        let x = vec![1.0f64; 20_000];
        let s = TensorShape::flat(x.len());
        let kind = LayerKind::Dropout { rate: 0.5, mode: DropoutMode::Inverted };
        let (y, _) = forward(&kind, &LayerParams::default(), &x, s, s, Mode::Train, 7);
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        assert!((mean - 1.0).abs() < 0.03);
        assert!(y.iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
