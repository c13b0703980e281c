//! Average precision, top-k error and mean class accuracy.

use std::collections::BTreeMap;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApVariant {
    /// Precision summed at the rank of every positive.
    #[default]
    Integral,
    /// Eleven-point interpolated AP (recall 0, 0.1, ..., 1).
    ElevenPoint,
}

/// Indices sorted by descending score; ties keep input order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

fn check_ap_input(scores: &[f64], positives: &[bool]) -> Result<usize> {
    if scores.len() != positives.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            found: positives.len(),
        });
    }
    let np = positives.iter().filter(|&&p| p).count();
    if np == 0 {
        return Err(Error::NoPositives("average precision".into()));
    }
    Ok(np)
}

/// Integral average precision.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<f64> {
    average_precision_with(scores, positives, ApVariant::Integral)
}

pub fn average_precision_with(scores: &[f64], positives: &[bool], variant: ApVariant) -> Result<f64> {
    let np = check_ap_input(scores, positives)?;
    let order = ranking(scores);
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(np);
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            tp += 1;
            curve.push((tp as f64 / np as f64, tp as f64 / (rank + 1) as f64));
        }
    }
    Ok(match variant {
        ApVariant::Integral => curve.iter().map(|&(_, p)| p).sum::<f64>() / np as f64,
        ApVariant::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let r = t as f64 / 10.0;
                    curve
                        .iter()
                        .filter(|&&(rec, _)| rec >= r - 1e-12)
                        .map(|&(_, p)| p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    })
}

/// Fraction of rows whose true class is not among the `k` highest scores.
/// Ties are ranked by class index.
pub fn top_k_error(scores: &[Vec<f64>], truth: &[usize], k: usize) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            found: truth.len(),
        });
    }
    if scores.is_empty() {
        return Err(Error::Empty("scores"));
    }
    let mut wrong = 0usize;
    for (row, &t) in scores.iter().zip(truth) {
        if k == 0 || k > row.len() || t >= row.len() {
            return Err(Error::InvalidArgument(format!(
                "k = {k} and label {t} must fit {} classes",
                row.len()
            )));
        }
        if !ranking(row)[..k].contains(&t) {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / scores.len() as f64)
}

/// Unweighted mean over classes of per-class accuracy. Classes with no
/// samples in `truth` are left out with a warning.
pub fn mean_class_accuracy(predictions: &[usize], truth: &[usize], num_classes: usize) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            found: predictions.len(),
        });
    }
    let mut total = vec![0usize; num_classes];
    let mut right = vec![0usize; num_classes];
    for (&p, &t) in predictions.iter().zip(truth) {
        if t >= num_classes {
            return Err(Error::InvalidArgument(format!("label {t} out of range")));
        }
        total[t] += 1;
        right[t] += usize::from(p == t);
    }
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..num_classes {
        if total[c] == 0 {
            log::warn!("class {c} has no test samples; excluded from mean class accuracy");
            continue;
        }
        sum += right[c] as f64 / total[c] as f64;
        present += 1;
    }
    if present == 0 {
        return Err(Error::Empty("test samples"));
    }
    Ok(sum / present as f64)
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows(scores: &[Vec<f64>]) -> Vec<usize> {
    scores.iter().map(|r| ranking(r)[0]).collect()
}

/// Summary of one evaluation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalResult {
    pub per_class_ap: BTreeMap<String, f64>,
    pub map: Option<f64>,
    pub top_k_error: Option<(usize, f64)>,
    pub mean_class_accuracy: Option<f64>,
    pub num_samples: usize,
}

/// Evaluates a score matrix against multi-label targets: per-class AP for
/// every class with a positive, plus top-k error and mean class accuracy
/// against each sample's first label.
pub fn evaluate(
    scores: &[Vec<f64>],
    labels: &[Vec<usize>],
    class_names: &[String],
    k: usize,
    variant: ApVariant,
) -> Result<EvalResult> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            found: labels.len(),
        });
    }
    let mut out = EvalResult {
        num_samples: scores.len(),
        ..Default::default()
    };
    for (c, name) in class_names.iter().enumerate() {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let p: Vec<bool> = labels.iter().map(|l| l.contains(&c)).collect();
        if p.contains(&true) {
            out.per_class_ap.insert(name.clone(), average_precision_with(&s, &p, variant)?);
        } else {
            log::warn!("class {name} has no positives; AP undefined");
        }
    }
    if !out.per_class_ap.is_empty() {
        out.map = Some(out.per_class_ap.values().sum::<f64>() / out.per_class_ap.len() as f64);
    }
    if labels.iter().all(|l| !l.is_empty()) && !scores.is_empty() {
        let truth: Vec<usize> = labels.iter().map(|l| l[0]).collect();
        let kk = k.clamp(1, class_names.len());
        out.top_k_error = Some((kk, top_k_error(scores, &truth, kk)?));
        out.mean_class_accuracy =
            Some(mean_class_accuracy(&argmax_rows(scores), &truth, class_names.len())?);
    }
    Ok(out)
}
