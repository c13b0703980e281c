//! Batch losses on network scores, returned as raw sums with their
//! (sub)gradients w.r.t. every score.

use std::str::FromStr;

use crate::layers::softmax;
use crate::scalar::Scalar;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// Softmax cross-entropy against the first label of each sample.
    SoftmaxCe,
    /// Per class: positives pay `max(0, 1 - s)`, negatives `max(0, 1 + s)`.
    HingeCls,
    /// Per class: every (positive, negative) pair in the batch pays
    /// `max(0, 1 - s_pos + s_neg)`.
    HingeRank,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax_ce" | "softmax" => Ok(LossKind::SoftmaxCe),
            "hinge_cls" => Ok(LossKind::HingeCls),
            "hinge_rank" => Ok(LossKind::HingeRank),
            _ => Err(Error::InvalidConfig(format!("unknown loss {s:?}"))),
        }
    }
}

fn check<S>(scores: &[Vec<S>], labels: &[Vec<usize>]) -> Result<usize> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            layer: "loss".into(),
            message: format!("{} score rows for {} label sets", scores.len(), labels.len()),
        });
    }
    let c = scores.first().map_or(0, Vec::len);
    for (row, l) in scores.iter().zip(labels) {
        if row.len() != c {
            return Err(Error::Shape {
                layer: "loss".into(),
                message: "ragged score rows".into(),
            });
        }
        if let Some(bad) = l.iter().find(|&&v| v >= c) {
            return Err(Error::InvalidConfig(format!("label {bad} out of range for {c} classes")));
        }
    }
    Ok(c)
}

pub fn loss<S: Scalar>(kind: LossKind, scores: &[Vec<S>], labels: &[Vec<usize>]) -> Result<(f64, Vec<Vec<S>>)> {
    match kind {
        LossKind::SoftmaxCe => softmax_ce(scores, labels),
        LossKind::HingeCls => hinge_cls(scores, labels),
        LossKind::HingeRank => hinge_rank(scores, labels),
    }
}

pub fn softmax_ce<S: Scalar>(scores: &[Vec<S>], labels: &[Vec<usize>]) -> Result<(f64, Vec<Vec<S>>)> {
    check(scores, labels)?;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(scores.len());
    for (row, l) in scores.iter().zip(labels) {
        let t = *l.first().ok_or_else(|| Error::InvalidConfig("softmax loss needs a label per sample".into()))?;
        let p = softmax(row);
        total -= p[t].as_f64().max(f64::MIN_POSITIVE).ln();
        let mut g = p;
        g[t] = g[t] - S::one();
        grads.push(g);
    }
    Ok((total, grads))
}

pub fn hinge_cls<S: Scalar>(scores: &[Vec<S>], labels: &[Vec<usize>]) -> Result<(f64, Vec<Vec<S>>)> {
    let c = check(scores, labels)?;
    let mut total = 0.0;
    let mut grads = vec![vec![S::zero(); c]; scores.len()];
    for (i, (row, l)) in scores.iter().zip(labels).enumerate() {
        for k in 0..c {
            let s = row[k].as_f64();
            if l.contains(&k) {
                if s < 1.0 {
                    total += 1.0 - s;
                    grads[i][k] = -S::one();
                }
            } else if s > -1.0 {
                total += 1.0 + s;
                grads[i][k] = S::one();
            }
        }
    }
    Ok((total, grads))
}

pub fn hinge_rank<S: Scalar>(scores: &[Vec<S>], labels: &[Vec<usize>]) -> Result<(f64, Vec<Vec<S>>)> {
    let c = check(scores, labels)?;
    let mut total = 0.0;
    let mut grads = vec![vec![S::zero(); c]; scores.len()];
    for k in 0..c {
        let pos: Vec<usize> = (0..scores.len()).filter(|&i| labels[i].contains(&k)).collect();
        let neg: Vec<usize> = (0..scores.len()).filter(|&i| !labels[i].contains(&k)).collect();
        for &p in &pos {
            for &n in &neg {
                let m = 1.0 - scores[p][k].as_f64() + scores[n][k].as_f64();
                if m > 0.0 {
                    total += m;
                    grads[p][k] = grads[p][k] - S::one();
                    grads[n][k] = grads[n][k] + S::one();
                }
            }
        }
    }
    Ok((total, grads))
}
