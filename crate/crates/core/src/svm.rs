//! One-vs-rest linear SVMs trained by dual coordinate descent.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::eval;
use crate::feature::FeatureVector;
use crate::{Error, Result};

/// Default regularisation grid for l2-normalised features.
pub const DEFAULT_C_GRID: [f64; 4] = [0.01, 0.1, 1.0, 10.0];

/// Per-class linear predictors `<w_c, x> + b_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub feature_dim: usize,
    pub c: f64,
    /// One weight vector per class.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    /// `false` for classes skipped for lack of positives; their weights are zero.
    pub trained: Vec<bool>,
}

impl LinearModel {
    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    pub fn score(&self, class: usize, x: &[f64]) -> f64 {
        crate::feature::dot(&self.weights[class], x) + self.biases[class]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmOptions {
    /// Relative duality-gap tolerance.
    pub tol: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for SvmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_epochs: 2000,
            seed: 0,
        }
    }
}

/// Training examples with multi-label targets. `ignore[i]` lists classes
/// whose problem example `i` is left out of (e.g. "difficult" flags).
#[derive(Debug, Clone, Copy)]
pub struct TrainingSet<'a> {
    pub features: &'a [FeatureVector],
    pub labels: &'a [Vec<usize>],
    pub ignore: Option<&'a [Vec<usize>]>,
}

impl<'a> TrainingSet<'a> {
    pub fn new(features: &'a [FeatureVector], labels: &'a [Vec<usize>]) -> Self {
        Self {
            features,
            labels,
            ignore: None,
        }
    }

    fn dim(&self) -> Result<usize> {
        let first = self.features.first().ok_or(Error::Empty("training features"))?;
        let d = first.dim();
        if self.labels.len() != self.features.len() {
            return Err(Error::DimensionMismatch {
                expected: self.features.len(),
                found: self.labels.len(),
            });
        }
        for f in self.features {
            if f.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: f.dim(),
                });
            }
        }
        Ok(d)
    }
}

/// Solver trace for one binary problem.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryReport {
    pub epochs: usize,
    pub converged: bool,
    /// Dual objective `1/2 |w|^2 - sum(alpha)` after each epoch (non-increasing).
    pub dual_objective: Vec<f64>,
    pub primal_objective: f64,
}

/// Solves `min 1/2 |w|^2 + C sum max(0, 1 - y_i (<w, x_i> + b))` with the
/// bias folded into `w` as a constant unit feature. Returns `(w, b, report)`.
pub fn train_binary(
    xs: &[&[f64]],
    ys: &[f64],
    c: f64,
    opts: &SvmOptions,
) -> (Vec<f64>, f64, BinaryReport) {
    let n = xs.len();
    let d = xs.first().map_or(0, |x| x.len());
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut alpha = vec![0.0; n];
    let qii: Vec<f64> = xs.iter().map(|x| crate::feature::dot(x, x) + 1.0).collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = BinaryReport {
        epochs: 0,
        converged: false,
        dual_objective: Vec::new(),
        primal_objective: f64::NAN,
    };

    for epoch in 0..opts.max_epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let x = xs[i];
            let y = ys[i];
            let g = y * (crate::feature::dot(&w, x) + b) - 1.0;
            let a_old = alpha[i];
            let a_new = (a_old - g / qii[i]).clamp(0.0, c);
            let delta = (a_new - a_old) * y;
            if delta != 0.0 {
                alpha[i] = a_new;
                w.iter_mut().zip(x.iter()).for_each(|(wj, xj)| *wj += delta * xj);
                b += delta;
            }
        }
        let half_norm = 0.5 * (crate::feature::dot(&w, &w) + b * b);
        let dual = half_norm - alpha.iter().sum::<f64>();
        let loss: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| (1.0 - y * (crate::feature::dot(&w, x) + b)).max(0.0))
            .sum();
        let primal = half_norm + c * loss;
        report.dual_objective.push(dual);
        report.primal_objective = primal;
        report.epochs = epoch + 1;
        if primal + dual <= opts.tol * primal.abs().max(1e-12) {
            report.converged = true;
            break;
        }
    }
    if !report.converged {
        log::warn!(
            "SVM did not reach gap tolerance {} in {} epochs",
            opts.tol,
            opts.max_epochs
        );
    }
    (w, b, report)
}

/// Trains one binary SVM per class in parallel.
pub fn train_ovr(
    data: &TrainingSet,
    num_classes: usize,
    c: f64,
    opts: &SvmOptions,
) -> Result<LinearModel> {
    Ok(train_ovr_with_reports(data, num_classes, c, opts)?.0)
}

pub fn train_ovr_with_reports(
    data: &TrainingSet,
    num_classes: usize,
    c: f64,
    opts: &SvmOptions,
) -> Result<(LinearModel, Vec<Option<BinaryReport>>)> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidArgument(format!("C must be positive, got {c}")));
    }
    let d = data.dim()?;
    if let Some(bad) = data.labels.iter().flatten().find(|&&l| l >= num_classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range")));
    }
    let results: Vec<(Vec<f64>, f64, Option<BinaryReport>)> = (0..num_classes)
        .into_par_iter()
        .map(|class| {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for (i, f) in data.features.iter().enumerate() {
                if data.ignore.is_some_and(|ig| ig[i].contains(&class)) {
                    continue;
                }
                xs.push(f.values.as_slice());
                ys.push(if data.labels[i].contains(&class) { 1.0 } else { -1.0 });
            }
            if !ys.contains(&1.0) {
                log::warn!("class {class} has no positive training examples; skipped");
                return (vec![0.0; d], 0.0, None);
            }
            let class_opts = SvmOptions {
                seed: opts.seed.wrapping_add(class as u64),
                ..opts.clone()
            };
            let (w, b, rep) = train_binary(&xs, &ys, c, &class_opts);
            (w, b, Some(rep))
        })
        .collect();

    let mut model = LinearModel {
        feature_dim: d,
        c,
        weights: Vec::with_capacity(num_classes),
        biases: Vec::with_capacity(num_classes),
        trained: Vec::with_capacity(num_classes),
    };
    let mut reports = Vec::with_capacity(num_classes);
    for (w, b, rep) in results {
        model.weights.push(w);
        model.biases.push(b);
        model.trained.push(rep.is_some());
        reports.push(rep);
    }
    Ok((model, reports))
}

/// Score matrix, one row per feature and one column per class.
pub fn scores(model: &LinearModel, features: &[FeatureVector]) -> Result<Vec<Vec<f64>>> {
    features
        .iter()
        .map(|f| {
            if f.dim() != model.feature_dim {
                return Err(Error::DimensionMismatch {
                    expected: model.feature_dim,
                    found: f.dim(),
                });
            }
            Ok((0..model.num_classes()).map(|c| model.score(c, &f.values)).collect())
        })
        .collect()
}

/// Per-image scores when several samples belong to one image: `groups[i]`
/// is the image index of sample `i`, and each image's score is the mean of
/// its sample scores.
pub fn grouped_scores(
    model: &LinearModel,
    features: &[FeatureVector],
    groups: &[usize],
) -> Result<Vec<Vec<f64>>> {
    if groups.len() != features.len() {
        return Err(Error::DimensionMismatch {
            expected: features.len(),
            found: groups.len(),
        });
    }
    let per_sample = scores(model, features)?;
    let m = groups.iter().max().map_or(0, |g| g + 1);
    let mut out = vec![vec![0.0; model.num_classes()]; m];
    let mut counts = vec![0usize; m];
    for (row, &g) in per_sample.iter().zip(groups) {
        out[g].iter_mut().zip(row).for_each(|(a, b)| *a += b);
        counts[g] += 1;
    }
    for (row, &n) in out.iter_mut().zip(&counts) {
        if n == 0 {
            return Err(Error::Empty("image without samples"));
        }
        row.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMetric {
    /// Mean AP over classes with at least one validation positive.
    MeanAp,
    /// Top-1 accuracy against the first label of each example.
    Accuracy,
}

/// Evaluates `metric` for a score matrix against multi-label targets.
pub fn metric_value(
    metric: SelectionMetric,
    score_rows: &[Vec<f64>],
    labels: &[Vec<usize>],
    num_classes: usize,
) -> Result<f64> {
    match metric {
        SelectionMetric::MeanAp => {
            let mut aps = Vec::new();
            for c in 0..num_classes {
                let s: Vec<f64> = score_rows.iter().map(|r| r[c]).collect();
                let p: Vec<bool> = labels.iter().map(|l| l.contains(&c)).collect();
                if p.contains(&true) {
                    aps.push(eval::average_precision(&s, &p)?);
                }
            }
            if aps.is_empty() {
                return Err(Error::NoPositives("validation set".into()));
            }
            Ok(aps.iter().sum::<f64>() / aps.len() as f64)
        }
        SelectionMetric::Accuracy => {
            let truth: Vec<usize> = labels
                .iter()
                .map(|l| l.first().copied().ok_or(Error::Empty("validation label")))
                .collect::<Result<_>>()?;
            Ok(1.0 - eval::top_k_error(score_rows, &truth, 1)?)
        }
    }
}

/// Trains at every C in `grid` and keeps the one scoring best on `val`;
/// ties go to the smaller C. Returns the chosen C, its model and the metric
/// value of every grid point (in ascending C order).
pub fn select_c(
    train: &TrainingSet,
    val: &TrainingSet,
    num_classes: usize,
    grid: &[f64],
    metric: SelectionMetric,
    opts: &SvmOptions,
) -> Result<(f64, LinearModel, Vec<(f64, f64)>)> {
    if grid.is_empty() {
        return Err(Error::Empty("C grid"));
    }
    if val.features.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut best: Option<(f64, LinearModel, f64)> = None;
    let mut table = Vec::with_capacity(sorted.len());
    for &c in &sorted {
        let model = train_ovr(train, num_classes, c, opts)?;
        let s = scores(&model, val.features)?;
        let v = metric_value(metric, &s, val.labels, num_classes)?;
        table.push((c, v));
        if best.as_ref().is_none_or(|b| v > b.2) {
            best = Some((c, model, v));
        }
    }
    let (c, model, _) = best.expect("grid is non-empty");
    Ok((c, model, table))
}
