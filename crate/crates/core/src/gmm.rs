//! Diagonal-covariance Gaussian mixtures fitted by EM.
//!
//! Initialisation is seeded k-means++ followed by one hard-assignment M-step.
//! The E-step runs over fixed-size chunks of the data in parallel and reduces
//! the partial statistics in chunk order, so a fit is bit-identical whatever
//! the size of the thread pool.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::descriptors::DescriptorSet;
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;
const CHUNK: usize = 512;
/// Relative variance floor, per dimension, in units of the data variance.
pub const VARIANCE_FLOOR_RATIO: f64 = 1e-6;
const MIN_WEIGHT: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub num_components: usize,
    pub dim: usize,
    /// `K x D`, row-major.
    pub means: Vec<f64>,
    /// Diagonal variances, `K x D`.
    pub variances: Vec<f64>,
    pub weights: Vec<f64>,
    /// Average log-likelihood per sample after each E-step.
    pub log_likelihood_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmOptions {
    pub num_components: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Relative log-likelihood improvement below which EM stops.
    pub tol: f64,
}

impl GmmOptions {
    pub fn new(num_components: usize, seed: u64) -> Self {
        Self {
            num_components,
            seed,
            max_iters: 100,
            tol: 1e-5,
        }
    }
}

impl GmmModel {
    /// Builds a model from explicit parameters, checking the invariants.
    pub fn from_parameters(
        dim: usize,
        means: Vec<f64>,
        variances: Vec<f64>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 || dim == 0 {
            return Err(Error::Empty("mixture parameters"));
        }
        for (name, v) in [("means", &means), ("variances", &variances)] {
            if v.len() != k * dim {
                return Err(Error::InvalidArgument(format!(
                    "{name}: expected {} values, found {}",
                    k * dim,
                    v.len()
                )));
            }
        }
        if variances.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("variances must be positive".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidArgument("weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidArgument(format!(
                "weights must sum to 1, sum is {total}"
            )));
        }
        Ok(Self {
            num_components: k,
            dim,
            means,
            variances,
            weights,
            log_likelihood_history: Vec::new(),
        })
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.dim..(k + 1) * self.dim]
    }

    pub fn variance(&self, k: usize) -> &[f64] {
        &self.variances[k * self.dim..(k + 1) * self.dim]
    }

    fn precompute(&self) -> Precomputed {
        let mut log_norm = Vec::with_capacity(self.num_components);
        let mut inv_var = Vec::with_capacity(self.variances.len());
        for k in 0..self.num_components {
            let var = self.variance(k);
            let log_det: f64 = var.iter().map(|v| v.ln()).sum();
            log_norm.push(self.weights[k].ln() - 0.5 * (self.dim as f64 * LN_2PI + log_det));
            inv_var.extend(var.iter().map(|v| 1.0 / v));
        }
        Precomputed { log_norm, inv_var }
    }

    /// Soft assignments of `x`. Writes into `out` (length `K`) and returns the
    /// log density `ln p(x)`.
    pub fn posteriors_into(&self, x: &[f64], out: &mut [f64]) -> f64 {
        self.precompute().posteriors(self, x, out)
    }

    pub fn posteriors(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        let mut q = vec![0.0; self.num_components];
        self.posteriors_into(x, &mut q);
        Ok(q)
    }

    /// Average log-likelihood of `data` under the model.
    pub fn log_likelihood(&self, data: &DescriptorSet) -> Result<f64> {
        if data.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: data.dim(),
            });
        }
        let pre = self.precompute();
        let partial: Vec<f64> = data
            .as_flat()
            .par_chunks(CHUNK * self.dim)
            .map(|chunk| {
                let mut q = vec![0.0; self.num_components];
                chunk
                    .chunks_exact(self.dim)
                    .map(|x| pre.posteriors(self, x, &mut q))
                    .sum::<f64>()
            })
            .collect();
        Ok(partial.iter().sum::<f64>() / data.len().max(1) as f64)
    }

    /// Handle for repeated posterior evaluation without recomputing the
    /// per-component normalisers.
    pub fn evaluator(&self) -> PosteriorEvaluator<'_> {
        PosteriorEvaluator {
            model: self,
            pre: self.precompute(),
        }
    }
}

pub struct PosteriorEvaluator<'a> {
    model: &'a GmmModel,
    pre: Precomputed,
}

impl PosteriorEvaluator<'_> {
    pub fn posteriors_into(&self, x: &[f64], out: &mut [f64]) -> f64 {
        self.pre.posteriors(self.model, x, out)
    }

    pub fn inv_var(&self, k: usize) -> &[f64] {
        let d = self.model.dim;
        &self.pre.inv_var[k * d..(k + 1) * d]
    }
}

struct Precomputed {
    log_norm: Vec<f64>,
    inv_var: Vec<f64>,
}

impl Precomputed {
    fn posteriors(&self, model: &GmmModel, x: &[f64], out: &mut [f64]) -> f64 {
        let d = model.dim;
        let mut max = f64::NEG_INFINITY;
        for (k, o) in out.iter_mut().enumerate() {
            let mu = &model.means[k * d..(k + 1) * d];
            let iv = &self.inv_var[k * d..(k + 1) * d];
            let mut maha = 0.0;
            for i in 0..d {
                let z = x[i] - mu[i];
                maha += z * z * iv[i];
            }
            *o = self.log_norm[k] - 0.5 * maha;
            max = max.max(*o);
        }
        let mut sum = 0.0;
        for o in out.iter_mut() {
            *o = (*o - max).exp();
            sum += *o;
        }
        out.iter_mut().for_each(|o| *o /= sum);
        max + sum.ln()
    }
}

/// Sufficient statistics of one E-step, second moments centred on the
/// current means.
struct Stats {
    ll: f64,
    s0: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl Stats {
    fn zeros(k: usize, d: usize) -> Self {
        Self {
            ll: 0.0,
            s0: vec![0.0; k],
            s1: vec![0.0; k * d],
            s2: vec![0.0; k * d],
        }
    }

    fn add(&mut self, o: &Stats) {
        self.ll += o.ll;
        add_into(&mut self.s0, &o.s0);
        add_into(&mut self.s1, &o.s1);
        add_into(&mut self.s2, &o.s2);
    }
}

fn add_into(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

fn e_step(model: &GmmModel, data: &DescriptorSet) -> Stats {
    let (k, d) = (model.num_components, model.dim);
    let pre = model.precompute();
    let partial: Vec<Stats> = data
        .as_flat()
        .par_chunks(CHUNK * d)
        .map(|chunk| {
            let mut st = Stats::zeros(k, d);
            let mut q = vec![0.0; k];
            for x in chunk.chunks_exact(d) {
                st.ll += pre.posteriors(model, x, &mut q);
                for (c, &qc) in q.iter().enumerate() {
                    if qc == 0.0 {
                        continue;
                    }
                    st.s0[c] += qc;
                    let mu = model.mean(c);
                    let s1 = &mut st.s1[c * d..(c + 1) * d];
                    let s2 = &mut st.s2[c * d..(c + 1) * d];
                    for i in 0..d {
                        let z = x[i] - mu[i];
                        s1[i] += qc * z;
                        s2[i] += qc * z * z;
                    }
                }
            }
            st
        })
        .collect();
    let mut total = Stats::zeros(k, d);
    for p in &partial {
        total.add(p);
    }
    total
}

fn m_step(model: &mut GmmModel, st: &Stats, n: usize, floor: &[f64]) {
    let d = model.dim;
    for c in 0..model.num_components {
        let s0 = st.s0[c];
        if s0 <= MIN_WEIGHT * n as f64 {
            // collapsed: keep mean and variance, weight shrinks to the minimum
            model.weights[c] = MIN_WEIGHT;
            continue;
        }
        model.weights[c] = s0 / n as f64;
        for i in 0..d {
            let shift = st.s1[c * d + i] / s0;
            let var = st.s2[c * d + i] / s0 - shift * shift;
            model.means[c * d + i] += shift;
            model.variances[c * d + i] = var.max(floor[i]);
        }
    }
    let total: f64 = model.weights.iter().sum();
    model.weights.iter_mut().for_each(|w| *w /= total);
}

fn data_moments(data: &DescriptorSet) -> (Vec<f64>, Vec<f64>) {
    let d = data.dim();
    let n = data.len() as f64;
    let mut mean = vec![0.0; d];
    for x in data.iter() {
        add_into(&mut mean, x);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for x in data.iter() {
        for i in 0..d {
            var[i] += (x[i] - mean[i]) * (x[i] - mean[i]);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp(data: &DescriptorSet, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = data.len();
    let mut centres = vec![rng.random_range(0..n)];
    let mut best: Vec<f64> = data
        .iter()
        .map(|x| sq_dist(x, data.descriptor(centres[0])))
        .collect();
    while centres.len() < k {
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &b) in best.iter().enumerate() {
                if r < b {
                    pick = i;
                    break;
                }
                r -= b;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centres.push(next);
        let c = data.descriptor(next);
        best.par_iter_mut()
            .zip(data.as_flat().par_chunks_exact(data.dim()))
            .for_each(|(b, x)| *b = b.min(sq_dist(x, c)));
    }
    centres
}

/// Fits a `K`-component diagonal GMM with EM.
pub fn fit_gmm(data: &DescriptorSet, opts: &GmmOptions) -> Result<GmmModel> {
    let (n, d, k) = (data.len(), data.dim(), opts.num_components);
    if k == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    if d == 0 {
        return Err(Error::Empty("descriptor dimension"));
    }
    if n < k {
        return Err(Error::InsufficientSamples { needed: k, got: n });
    }

    let (_, data_var) = data_moments(data);
    let floor: Vec<f64> = data_var
        .iter()
        .map(|v| (VARIANCE_FLOOR_RATIO * v).max(1e-12))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let centres = kmeans_pp(data, k, &mut rng);

    // hard-assignment M-step around the seeds
    let seeds: Vec<&[f64]> = centres.iter().map(|&i| data.descriptor(i)).collect();
    let assign: Vec<usize> = data
        .as_flat()
        .par_chunks_exact(d)
        .map(|x| {
            let mut best = (f64::INFINITY, 0);
            for (c, s) in seeds.iter().enumerate() {
                let dist = sq_dist(x, s);
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            best.1
        })
        .collect();
    let mut model = GmmModel {
        num_components: k,
        dim: d,
        means: seeds.concat(),
        variances: data_var.iter().zip(&floor).map(|(v, f)| v.max(*f)).cycle().take(k * d).collect(),
        weights: vec![1.0 / k as f64; k],
        log_likelihood_history: Vec::new(),
    };
    let mut hard = Stats::zeros(k, d);
    for (x, &c) in data.iter().zip(&assign) {
        hard.s0[c] += 1.0;
        let mu = model.mean(c);
        for i in 0..d {
            let z = x[i] - mu[i];
            hard.s1[c * d + i] += z;
            hard.s2[c * d + i] += z * z;
        }
    }
    m_step(&mut model, &hard, n, &floor);

    let mut history = Vec::new();
    let mut converged = false;
    for it in 0..opts.max_iters {
        let st = e_step(&model, data);
        let ll = st.ll / n as f64;
        history.push(ll);
        if it > 0 {
            let prev = history[it - 1];
            if ll - prev < opts.tol * prev.abs() {
                converged = true;
                break;
            }
        }
        m_step(&mut model, &st, n, &floor);
    }
    if !converged {
        history.push(model.log_likelihood(data)?);
    }
    model.log_likelihood_history = history;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[Vec<f64>]) -> DescriptorSet {
        DescriptorSet::from_rows(rows[0].len(), rows).unwrap()
    }

    #[test]
    fn single_component_closed_form() {
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|i| vec![(i as f64 * 0.37).sin(), (i * i % 17) as f64])
            .collect();
        let data = set(&rows);
        let g = fit_gmm(&data, &GmmOptions::new(1, 3)).unwrap();
        let (mean, var) = data_moments(&data);
        assert_eq!(g.weights, vec![1.0]);
        for i in 0..2 {
            assert!((g.means[i] - mean[i]).abs() < 1e-12);
            assert!((g.variances[i] - var[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn too_few_points() {
        let data = set(&[vec![0.0], vec![1.0]]);
        assert!(matches!(
            fit_gmm(&data, &GmmOptions::new(3, 0)),
            Err(Error::InsufficientSamples { needed: 3, got: 2 })
        ));
    }

    #[test]
    fn posterior_dominance() {
        let g = GmmModel::from_parameters(
            2,
            vec![0.0, 0.0, 100.0, 0.0],
            vec![1.0; 4],
            vec![0.5, 0.5],
        )
        .unwrap();
        let q = g.posteriors(&[0.0, 0.0]).unwrap();
        assert!(q[0] > 1.0 - 1e-10);
        let one = GmmModel::from_parameters(1, vec![3.0], vec![2.0], vec![1.0]).unwrap();
        assert_eq!(one.posteriors(&[-40.0]).unwrap(), vec![1.0]);
        assert!(g.posteriors(&[1.0]).is_err());
    }

    #[test]
    fn collapsed_data_is_floored() {
        // all points identical: every component collapses onto the same value
        let rows = vec![vec![2.0, 2.0]; 10];
        let g = fit_gmm(&set(&rows), &GmmOptions::new(2, 1)).unwrap();
        assert!(g.variances.iter().all(|&v| v > 0.0));
        assert!((g.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(g.weights.iter().all(|&w| w > 0.0));
    }

    #[test]
    fn deterministic_for_seed() {
        let rows: Vec<Vec<f64>> = (0..300)
            .map(|i| vec![((i * 7919) % 101) as f64 / 10.0, ((i * 104729) % 37) as f64])
            .collect();
        let data = set(&rows);
        let a = fit_gmm(&data, &GmmOptions::new(4, 11)).unwrap();
        let b = fit_gmm(&data, &GmmOptions::new(4, 11)).unwrap();
        assert_eq!(a, b);
    }
}
