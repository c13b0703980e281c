use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::layers::{self, Cache, LayerParams, Mode};
use crate::scalar::Scalar;
use crate::spec::{ArchitectureSpec, LayerKind, TensorShape};
use crate::{Error, Result};

/// Standard deviation of the initial weights (variance 1e-2).
pub const INIT_STD: f64 = 0.1;

/// Samples handled by one parallel task; gradients are summed task by task
/// in index order, so results do not depend on the worker count.
const SAMPLES_PER_TASK: usize = 4;

/// One input sample in channel-major (`C x H x W`) layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    pub shape: TensorShape,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: TensorShape, data: Vec<S>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape {
                layer: "input".into(),
                message: format!("{} values for shape {shape}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: TensorShape) -> Self {
        Self {
            shape,
            data: vec![S::zero(); shape.len()],
        }
    }

    /// Converts an image with values in `[0, 1]` to a tensor, subtracting
    /// `mean` per channel.
    pub fn from_image(img: &dvk_core::RasterImage, mean: &[f64]) -> Result<Self> {
        let (w, h, c) = (img.width(), img.height(), img.channels());
        if mean.len() != c {
            return Err(Error::Shape {
                layer: "input".into(),
                message: format!("{} channel means for a {c}-channel image", mean.len()),
            });
        }
        let mut data = vec![S::zero(); c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data[(ch * h + y) * w + x] = S::from_f64_lossy(img.get(x, y, ch) - mean[ch]);
                }
            }
        }
        Ok(Self {
            shape: TensorShape::new(c, h, w),
            data,
        })
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| T::from_f64_lossy(v.as_f64())).collect(),
        }
    }
}

/// Parameter gradients, one entry per layer (empty for parameter-free
/// layers).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<S> {
    pub layers: Vec<LayerParams<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(params: &[LayerParams<S>]) -> Self {
        Self {
            layers: params.iter().map(LayerParams::zeros_like).collect(),
        }
    }

    fn add_assign(&mut self, o: &Self) {
        self.layers.iter_mut().zip(&o.layers).for_each(|(a, b)| a.add_assign(b));
    }

    pub fn scale(&mut self, s: S) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.biases.iter_mut()).for_each(|v| *v = *v * s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(LayerParams::all_finite)
    }
}

/// Learnable parameters, momentum buffers and execution mode of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState<S> {
    pub spec: ArchitectureSpec,
    /// Input shape of every layer followed by the output shape.
    pub shapes: Vec<TensorShape>,
    pub params: Vec<LayerParams<S>>,
    pub momentum: Vec<LayerParams<S>>,
    pub mode: Mode,
}

/// Activations of one sample: `acts[0]` is the input, `acts[i + 1]` the
/// output of layer `i`.
#[derive(Debug, Clone)]
pub struct Trace<S> {
    pub acts: Vec<Vec<S>>,
    caches: Vec<Cache<S>>,
    mode: Mode,
}

impl<S: Scalar> Trace<S> {
    pub fn output(&self) -> &[S] {
        self.acts.last().expect("trace has the input")
    }
}

fn param_sizes(kind: &LayerKind, input: TensorShape) -> (usize, usize) {
    match *kind {
        LayerKind::Conv { filters, kernel, .. } => (filters * input.channels * kernel * kernel, filters),
        LayerKind::FullyConnected { out_dim } => (out_dim * input.len(), out_dim),
        _ => (0, 0),
    }
}

/// Gaussian `N(0, INIT_STD^2)` weights and zero biases for one layer.
pub fn init_layer<S: Scalar>(kind: &LayerKind, input: TensorShape, rng: &mut ChaCha8Rng) -> LayerParams<S> {
    let (nw, nb) = param_sizes(kind, input);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    LayerParams {
        weights: (0..nw).map(|_| S::from_f64_lossy(normal.sample(rng))).collect(),
        biases: vec![S::zero(); nb],
    }
}

/// Fresh network with Gaussian weights, zero biases and zero momentum, in
/// training mode.
pub fn init_network<S: Scalar>(spec: &ArchitectureSpec, seed: u64) -> Result<NetworkState<S>> {
    let shapes = spec.shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<LayerParams<S>> = spec
        .layers
        .iter()
        .zip(&shapes)
        .map(|(l, &s)| init_layer(&l.kind, s, &mut rng))
        .collect();
    let momentum = params.iter().map(LayerParams::zeros_like).collect();
    Ok(NetworkState {
        spec: spec.clone(),
        shapes,
        params,
        momentum,
        mode: Mode::Train,
    })
}

impl<S: Scalar> NetworkState<S> {
    /// Builds a state from explicit parameters, checking their sizes.
    pub fn from_params(spec: &ArchitectureSpec, params: Vec<LayerParams<S>>) -> Result<Self> {
        let shapes = spec.shapes()?;
        if params.len() != spec.layers.len() {
            return Err(Error::Shape {
                layer: spec.name.clone(),
                message: format!("{} parameter blocks for {} layers", params.len(), spec.layers.len()),
            });
        }
        for ((l, s), p) in spec.layers.iter().zip(&shapes).zip(&params) {
            let (nw, nb) = param_sizes(&l.kind, *s);
            if p.weights.len() != nw || p.biases.len() != nb {
                return Err(Error::Shape {
                    layer: l.name.clone(),
                    message: format!(
                        "expected {nw} weights and {nb} biases, found {} and {}",
                        p.weights.len(),
                        p.biases.len()
                    ),
                });
            }
        }
        let momentum = params.iter().map(LayerParams::zeros_like).collect();
        Ok(Self {
            spec: spec.clone(),
            shapes,
            params,
            momentum,
            mode: Mode::Eval,
        })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn num_layers(&self) -> usize {
        self.spec.layers.len()
    }

    /// Number of layers run for training: everything up to the logits,
    /// excluding a trailing softmax.
    pub fn logits_end(&self) -> usize {
        match self.spec.layers.last() {
            Some(l) if l.kind == LayerKind::Softmax => self.num_layers() - 1,
            _ => self.num_layers(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.weights.len() + p.biases.len()).sum()
    }

    /// Runs layers `0..end` on one sample. `seed` and `sample` select the
    /// dropout masks.
    pub fn forward_sample(&self, input: &Tensor<S>, end: usize, seed: u64, sample: u64) -> Result<Trace<S>> {
        if input.shape != self.shapes[0] {
            return Err(Error::Shape {
                layer: self.spec.layers.first().map_or("input".into(), |l| l.name.clone()),
                message: format!("input {} does not match {}", input.shape, self.shapes[0]),
            });
        }
        let mut acts = Vec::with_capacity(end + 1);
        let mut caches = Vec::with_capacity(end);
        acts.push(input.data.clone());
        for i in 0..end {
            let l = &self.spec.layers[i];
            let (y, c) = layers::forward(
                &l.kind,
                &self.params[i],
                &acts[i],
                self.shapes[i],
                self.shapes[i + 1],
                self.mode,
                layers::mask_seed(seed, sample, i),
            );
            acts.push(y);
            caches.push(c);
        }
        Ok(Trace {
            acts,
            caches,
            mode: self.mode,
        })
    }

    /// Back-propagates `d_out` (gradient w.r.t. the trace output) and adds
    /// parameter gradients into `grads`. Returns the input gradient.
    pub fn backward_sample(&self, trace: &Trace<S>, d_out: &[S], grads: &mut Gradients<S>) -> Vec<S> {
        let end = trace.caches.len();
        let mut g = d_out.to_vec();
        for i in (0..end).rev() {
            let l = &self.spec.layers[i];
            g = layers::backward(
                &l.kind,
                &self.params[i],
                &trace.acts[i],
                &trace.acts[i + 1],
                &trace.caches[i],
                &g,
                self.shapes[i],
                self.shapes[i + 1],
                trace.mode,
                &mut grads.layers[i],
            );
        }
        g
    }

    /// Full forward pass (through the softmax if present) of a batch.
    pub fn forward_batch(&self, batch: &[Tensor<S>], seed: u64) -> Result<Vec<Vec<S>>> {
        let end = self.num_layers();
        batch
            .par_iter()
            .enumerate()
            .map(|(i, x)| Ok(self.forward_sample(x, end, seed, i as u64)?.acts.pop().expect("output")))
            .collect()
    }

    /// Logits for a batch (forward pass stopping before the softmax).
    pub fn logits(&self, batch: &[Tensor<S>], seed: u64) -> Result<Vec<Vec<S>>> {
        let end = self.logits_end();
        batch
            .par_iter()
            .enumerate()
            .map(|(i, x)| Ok(self.forward_sample(x, end, seed, i as u64)?.acts.pop().expect("output")))
            .collect()
    }

    /// Forward pass to the logits, loss via `loss_grad` on the whole batch,
    /// then backward. Returns the loss and the summed parameter gradients.
    pub fn loss_and_gradients<F>(&self, batch: &[Tensor<S>], seed: u64, loss_grad: F) -> Result<(f64, Gradients<S>)>
    where
        F: FnOnce(&[Vec<S>]) -> Result<(f64, Vec<Vec<S>>)>,
    {
        let end = self.logits_end();
        let traces: Vec<Trace<S>> = batch
            .par_iter()
            .enumerate()
            .map(|(i, x)| self.forward_sample(x, end, seed, i as u64))
            .collect::<Result<_>>()?;
        let outputs: Vec<Vec<S>> = traces.iter().map(|t| t.output().to_vec()).collect();
        let (loss, d_out) = loss_grad(&outputs)?;
        let partial: Vec<Gradients<S>> = traces
            .par_chunks(SAMPLES_PER_TASK)
            .zip(d_out.par_chunks(SAMPLES_PER_TASK))
            .map(|(ts, ds)| {
                let mut g = Gradients::zeros_like(&self.params);
                for (t, d) in ts.iter().zip(ds) {
                    self.backward_sample(t, d, &mut g);
                }
                g
            })
            .collect();
        let mut total = Gradients::zeros_like(&self.params);
        for p in &partial {
            total.add_assign(p);
        }
        Ok((loss, total))
    }
}
