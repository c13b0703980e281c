//! SGD with momentum, plateau-driven learning-rate schedules, training and
//! fine-tuning loops, and feature extraction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use dvk_core::FeatureVector;

use crate::layers::{mask_seed, LayerParams, Mode};
use crate::loss::{loss, LossKind};
use crate::network::{init_layer, Gradients, NetworkState, Tensor};
use crate::scalar::Scalar;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdHyper {
    /// Learning rate of the classifier (last fully-connected) layer.
    pub lr_last: f64,
    /// Learning rate of every other layer.
    pub lr_hidden: f64,
    pub momentum: f64,
    /// Applied to weights only, not biases.
    pub weight_decay: f64,
}

impl SgdHyper {
    pub fn uniform(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr_last: lr,
            lr_hidden: lr,
            momentum,
            weight_decay,
        }
    }
}

/// `v <- m v - lr (g + wd w); w <- w + v` for every parameter. Fails without
/// touching the state if any gradient is non-finite or mis-shaped.
pub fn sgd_step<S: Scalar>(state: &mut NetworkState<S>, grads: &Gradients<S>, hyper: &SgdHyper) -> Result<()> {
    if grads.layers.len() != state.params.len()
        || grads.layers.iter().zip(&state.params).any(|(g, p)| {
            g.weights.len() != p.weights.len() || g.biases.len() != p.biases.len()
        })
    {
        return Err(Error::Shape {
            layer: state.spec.name.clone(),
            message: "gradient shapes do not match parameters".into(),
        });
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    let last = state.spec.classifier_index();
    let m = S::from_f64_lossy(hyper.momentum);
    let wd = S::from_f64_lossy(hyper.weight_decay);
    for (i, ((p, v), g)) in state
        .params
        .iter_mut()
        .zip(state.momentum.iter_mut())
        .zip(&grads.layers)
        .enumerate()
    {
        let lr = S::from_f64_lossy(if Some(i) == last { hyper.lr_last } else { hyper.lr_hidden });
        for ((w, vw), &gw) in p.weights.iter_mut().zip(v.weights.iter_mut()).zip(&g.weights) {
            *vw = m * *vw - lr * (gw + wd * *w);
            *w = *w + *vw;
        }
        for ((b, vb), &gb) in p.biases.iter_mut().zip(v.biases.iter_mut()).zip(&g.biases) {
            *vb = m * *vb - lr * gb;
            *b = *b + *vb;
        }
    }
    Ok(())
}

/// Staged learning rates `(last, hidden)`; the stage advances when the
/// monitored error has not improved for `patience` consecutive
/// observations.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub stages: Vec<(f64, f64)>,
    pub patience: usize,
    stage: usize,
    best: f64,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleEvent {
    Continue,
    Advanced,
    Exhausted,
}

impl LrSchedule {
    pub fn new(stages: Vec<(f64, f64)>, patience: usize) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::InvalidConfig("schedule needs at least one stage".into()));
        }
        Ok(Self {
            stages,
            patience: patience.max(1),
            stage: 0,
            best: f64::INFINITY,
            stale: 0,
        })
    }

    /// One learning rate for all layers, divided by 10 at each of `drops`
    /// plateaus.
    pub fn plateau(initial: f64, drops: usize, patience: usize) -> Self {
        let stages = (0..=drops)
            .map(|i| {
                let lr = initial / 10f64.powi(i as i32);
                (lr, lr)
            })
            .collect();
        Self::new(stages, patience).expect("non-empty")
    }

    /// The fine-tuning schedule: last/hidden rates 1e-2/1e-4, 1e-3/1e-4,
    /// 1e-4/1e-4, 1e-5/1e-5.
    pub fn fine_tune(patience: usize) -> Self {
        Self::new(vec![(1e-2, 1e-4), (1e-3, 1e-4), (1e-4, 1e-4), (1e-5, 1e-5)], patience).expect("non-empty")
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn is_exhausted(&self) -> bool {
        self.stage >= self.stages.len()
    }

    /// Current `(last, hidden)` rates; the final stage's once exhausted.
    pub fn rates(&self) -> (f64, f64) {
        self.stages[self.stage.min(self.stages.len() - 1)]
    }

    pub fn observe(&mut self, error: f64) -> ScheduleEvent {
        if self.is_exhausted() {
            return ScheduleEvent::Exhausted;
        }
        if error < self.best {
            self.best = error;
            self.stale = 0;
            return ScheduleEvent::Continue;
        }
        self.stale += 1;
        if self.stale < self.patience {
            return ScheduleEvent::Continue;
        }
        self.stale = 0;
        self.stage += 1;
        if self.is_exhausted() {
            ScheduleEvent::Exhausted
        } else {
            ScheduleEvent::Advanced
        }
    }
}

/// Training data: labels plus on-demand (possibly augmented) samples.
pub trait SampleSource<S>: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn labels(&self, index: usize) -> &[usize];

    /// Sample `index`; `seed` changes every epoch so augmentation can vary.
    fn sample(&self, index: usize, seed: u64) -> Result<Tensor<S>>;
}

/// Fixed tensors, no augmentation.
#[derive(Debug, Clone)]
pub struct InMemorySource<S> {
    pub tensors: Vec<Tensor<S>>,
    pub labels: Vec<Vec<usize>>,
}

impl<S: Scalar> SampleSource<S> for InMemorySource<S> {
    fn len(&self) -> usize {
        self.tensors.len()
    }

    fn labels(&self, index: usize) -> &[usize] {
        &self.labels[index]
    }

    fn sample(&self, index: usize, _seed: u64) -> Result<Tensor<S>> {
        Ok(self.tensors[index].clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss: LossKind,
    pub seed: u64,
    pub schedule: LrSchedule,
    /// Evaluate train-set top-1 accuracy (eval mode) after every epoch.
    pub track_train_accuracy: bool,
    /// Evaluate the full train-set loss (eval mode) after every epoch.
    pub track_eval_loss: bool,
    /// Stop once the tracked train accuracy reaches this value.
    pub stop_at_train_accuracy: Option<f64>,
}

impl TrainConfig {
    pub fn new(loss: LossKind, schedule: LrSchedule, seed: u64) -> Self {
        Self {
            batch_size: 32,
            max_epochs: 30,
            momentum: 0.9,
            weight_decay: 5e-4,
            loss,
            seed,
            schedule,
            track_train_accuracy: false,
            track_eval_loss: false,
            stop_at_train_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-sample loss of the training mini-batches.
    pub batch_loss: f64,
    pub lr_last: f64,
    pub lr_hidden: f64,
    pub stage: usize,
    pub train_accuracy: Option<f64>,
    /// Full-dataset loss in eval mode, per sample.
    pub eval_loss: Option<f64>,
    pub val_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub stopped_by_schedule: bool,
}

fn fetch<S: Scalar>(src: &dyn SampleSource<S>, idx: &[usize], seed: u64) -> Result<(Vec<Tensor<S>>, Vec<Vec<usize>>)> {
    let xs = idx
        .par_iter()
        .map(|&i| src.sample(i, mask_seed(seed, i as u64, usize::MAX)))
        .collect::<Result<Vec<_>>>()?;
    let ls = idx.iter().map(|&i| src.labels(i).to_vec()).collect();
    Ok((xs, ls))
}

/// Top-1 predictions (argmax of the logits, ties to the lowest class) in
/// eval mode; the source's unaugmented view uses seed 0.
pub fn predict<S: Scalar>(state: &NetworkState<S>, src: &dyn SampleSource<S>, batch_size: usize) -> Result<Vec<usize>> {
    let mut eval = state.clone();
    eval.set_mode(Mode::Eval);
    let idx: Vec<usize> = (0..src.len()).collect();
    let mut out = Vec::with_capacity(src.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (xs, _) = fetch(src, chunk, 0)?;
        for row in eval.logits(&xs, 0)? {
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Fraction of samples whose first label equals the top-1 prediction.
pub fn accuracy<S: Scalar>(state: &NetworkState<S>, src: &dyn SampleSource<S>, batch_size: usize) -> Result<f64> {
    if src.is_empty() {
        return Err(Error::InvalidConfig("empty dataset".into()));
    }
    let pred = predict(state, src, batch_size)?;
    let hits = pred
        .iter()
        .enumerate()
        .filter(|(i, p)| src.labels(*i).first() == Some(p))
        .count();
    Ok(hits as f64 / src.len() as f64)
}

/// Mean per-sample loss over the whole source in eval mode, using fixed
/// consecutive batches of `batch_size`.
pub fn dataset_loss<S: Scalar>(
    state: &NetworkState<S>,
    src: &dyn SampleSource<S>,
    kind: LossKind,
    batch_size: usize,
) -> Result<f64> {
    let mut eval = state.clone();
    eval.set_mode(Mode::Eval);
    let idx: Vec<usize> = (0..src.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (xs, ls) = fetch(src, chunk, 0)?;
        total += loss(kind, &eval.logits(&xs, 0)?, &ls)?.0;
    }
    Ok(total / src.len().max(1) as f64)
}

/// Mini-batch SGD. After every epoch the schedule observes the validation
/// error (top-1 error, or the eval-mode loss for hinge losses) or, without a
/// validation source, the mean training batch loss. Training stops when the
/// schedule is exhausted, `max_epochs` is reached, or the train-accuracy
/// target is met.
pub fn train<S: Scalar>(
    state: &mut NetworkState<S>,
    src: &dyn SampleSource<S>,
    val: Option<&dyn SampleSource<S>>,
    cfg: &mut TrainConfig,
) -> Result<TrainReport> {
    if src.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..src.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for epoch in 0..cfg.max_epochs {
        if cfg.schedule.is_exhausted() {
            report.stopped_by_schedule = true;
            break;
        }
        let (lr_last, lr_hidden) = cfg.schedule.rates();
        let hyper = SgdHyper {
            lr_last,
            lr_hidden,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        };
        state.set_mode(Mode::Train);
        order.shuffle(&mut rng);
        let epoch_seed = mask_seed(cfg.seed, epoch as u64, 0);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch_seed = mask_seed(epoch_seed, b as u64, 1);
            let (xs, ls) = fetch(src, chunk, batch_seed)?;
            let kind = cfg.loss;
            let (l, mut grads) = state.loss_and_gradients(&xs, batch_seed, |out| loss(kind, out, &ls))?;
            grads.scale(S::from_f64_lossy(1.0 / chunk.len() as f64));
            sgd_step(state, &grads, &hyper)?;
            loss_sum += l;
        }
        let batch_loss = loss_sum / src.len() as f64;
        if !batch_loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
        }
        let train_accuracy = if cfg.track_train_accuracy {
            Some(accuracy(state, src, cfg.batch_size)?)
        } else {
            None
        };
        let eval_loss = if cfg.track_eval_loss {
            Some(dataset_loss(state, src, cfg.loss, cfg.batch_size)?)
        } else {
            None
        };
        let val_error = match val {
            Some(v) => Some(match cfg.loss {
                LossKind::SoftmaxCe => 1.0 - accuracy(state, v, cfg.batch_size)?,
                k => dataset_loss(state, v, k, cfg.batch_size)?,
            }),
            None => None,
        };
        log::info!(
            "epoch {epoch}: loss {batch_loss:.5} lr {lr_last:.1e}/{lr_hidden:.1e} acc {train_accuracy:?} val {val_error:?}"
        );
        report.epochs.push(EpochStats {
            epoch,
            batch_loss,
            lr_last,
            lr_hidden,
            stage: cfg.schedule.stage(),
            train_accuracy,
            eval_loss,
            val_error,
        });
        if let (Some(target), Some(acc)) = (cfg.stop_at_train_accuracy, train_accuracy) {
            if acc >= target {
                break;
            }
        }
        if cfg.schedule.observe(val_error.unwrap_or(batch_loss)) == ScheduleEvent::Exhausted {
            report.stopped_by_schedule = true;
            break;
        }
    }
    state.set_mode(Mode::Eval);
    Ok(report)
}

/// Replaces the classifier with a freshly initialised one of `num_classes`
/// outputs and clears all momentum.
pub fn prepare_fine_tune<S: Scalar>(state: &NetworkState<S>, num_classes: usize, seed: u64) -> Result<NetworkState<S>> {
    let spec = state.spec.with_classes(num_classes)?;
    let idx = spec.classifier_index().expect("checked by with_classes");
    let mut params = state.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = spec.shapes()?;
    params[idx] = init_layer(&spec.layers[idx].kind, shapes[idx], &mut rng);
    let mut out = NetworkState::from_params(&spec, params)?;
    out.set_mode(Mode::Train);
    Ok(out)
}

/// Fine-tunes on a new label set: new classifier, then [`train`] under
/// the configured (typically [`LrSchedule::fine_tune`]) schedule.
pub fn fine_tune<S: Scalar>(
    state: &NetworkState<S>,
    num_classes: usize,
    src: &dyn SampleSource<S>,
    val: Option<&dyn SampleSource<S>>,
    cfg: &mut TrainConfig,
) -> Result<(NetworkState<S>, TrainReport)> {
    let mut net = prepare_fine_tune(state, num_classes, cfg.seed)?;
    let report = train(&mut net, src, val, cfg)?;
    Ok((net, report))
}

/// full7 activations after ReLU, one vector per sample, optionally
/// l2-normalised (all-zero vectors are left as they are).
pub fn extract_features_with<S: Scalar>(
    state: &NetworkState<S>,
    samples: &[Tensor<S>],
    normalise: bool,
) -> Result<Vec<FeatureVector>> {
    if state.mode != Mode::Eval {
        return Err(Error::NotEvalMode);
    }
    let end = state
        .spec
        .feature_index()
        .ok_or_else(|| Error::InvalidSpec("network has no penultimate layer".into()))?
        + 1;
    let tag = format!("cnn:{}:full7", state.spec.name);
    samples
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let t = state.forward_sample(x, end, 0, i as u64)?;
            let v = FeatureVector::new(t.output().iter().map(|v| v.as_f64()).collect(), tag.clone());
            Ok(if normalise { v.l2_normalised() } else { v })
        })
        .collect()
}

pub fn extract_features<S: Scalar>(state: &NetworkState<S>, samples: &[Tensor<S>]) -> Result<Vec<FeatureVector>> {
    extract_features_with(state, samples, true)
}

/// Sum of squared parameters, for monitoring weight decay.
pub fn parameter_norm_sq<S: Scalar>(params: &[LayerParams<S>]) -> f64 {
    params
        .iter()
        .flat_map(|p| p.weights.iter().chain(&p.biases))
        .map(|v| v.as_f64() * v.as_f64())
        .sum()
}
