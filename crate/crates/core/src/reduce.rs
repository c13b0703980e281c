//! PCA decorrelation and spatial extension of descriptors.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::descriptors::DescriptorSet;
use crate::{Error, Result};

/// Descriptor cap used when fitting PCA on large pools.
pub const DEFAULT_PCA_SAMPLE_CAP: usize = 256_000;

/// Linear projection onto the leading principal directions. No whitening:
/// projected coordinates keep their variances.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `target_dim x input_dim`, row-major, rows orthonormal.
    pub basis: Vec<f64>,
    /// Eigenvalues matching the basis rows, descending.
    pub eigenvalues: Vec<f64>,
    pub input_dim: usize,
    pub target_dim: usize,
}

impl PcaModel {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.basis[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn project(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self
                .row(i)
                .iter()
                .zip(x.iter().zip(&self.mean))
                .map(|(b, (v, m))| b * (v - m))
                .sum();
        }
    }

    /// Maps projected coordinates back to the (centred) input space.
    pub fn back_project(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.input_dim];
        for (i, &yi) in y.iter().enumerate() {
            for (o, b) in out.iter_mut().zip(self.row(i)) {
                *o += yi * b;
            }
        }
        out
    }
}

/// Fits PCA on all of `samples` via eigendecomposition of the sample
/// covariance.
pub fn fit_pca(samples: &DescriptorSet, target_dim: usize) -> Result<PcaModel> {
    let d = samples.dim();
    if target_dim == 0 || target_dim > d {
        return Err(Error::InvalidArgument(format!(
            "target_dim {target_dim} must be in 1..={d}"
        )));
    }
    let n = samples.len();
    if n < target_dim {
        return Err(Error::InsufficientSamples {
            needed: target_dim,
            got: n,
        });
    }

    let mut mean = vec![0.0; d];
    for x in samples.iter() {
        mean.iter_mut().zip(x).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centred = vec![0.0; d];
    for x in samples.iter() {
        centred
            .iter_mut()
            .zip(x.iter().zip(&mean))
            .for_each(|(c, (v, m))| *c = v - m);
        for i in 0..d {
            let ci = centred[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..d {
                cov[(i, j)] += ci * centred[j];
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut basis = Vec::with_capacity(target_dim * d);
    let mut eigenvalues = Vec::with_capacity(target_dim);
    for &idx in order.iter().take(target_dim) {
        let v = eig.eigenvectors.column(idx);
        // fix the sign so the largest-magnitude entry is positive
        let pivot = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        basis.extend(v.iter().map(|x| x * sign));
        eigenvalues.push(eig.eigenvalues[idx].max(0.0));
    }

    let top = eigenvalues.first().copied().unwrap_or(0.0);
    let rank = eigenvalues
        .iter()
        .filter(|&&l| l > top * 1e-12 && l > 0.0)
        .count();
    if rank < target_dim {
        log::warn!(
            "PCA: sample covariance has rank {rank} < target_dim {target_dim}; \
             trailing directions are an arbitrary orthonormal completion"
        );
    }

    Ok(PcaModel {
        mean,
        basis,
        eigenvalues,
        input_dim: d,
        target_dim,
    })
}

/// Fits PCA on a seeded uniform subsample of at most `cap` descriptors.
pub fn fit_pca_subsampled(
    samples: &DescriptorSet,
    target_dim: usize,
    cap: usize,
    seed: u64,
) -> Result<PcaModel> {
    if samples.len() <= cap {
        return fit_pca(samples, target_dim);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, samples.len(), cap).into_vec();
    idx.sort_unstable();
    fit_pca(&samples.select(&idx), target_dim)
}

/// Projects every descriptor; sites are carried over unchanged.
pub fn apply_pca(model: &PcaModel, descriptors: &DescriptorSet) -> Result<DescriptorSet> {
    if descriptors.dim() != model.input_dim {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim,
            found: descriptors.dim(),
        });
    }
    let mut data = vec![0.0; descriptors.len() * model.target_dim];
    if model.target_dim > 0 {
        for (x, out) in descriptors.iter().zip(data.chunks_exact_mut(model.target_dim)) {
            model.project(x, out);
        }
    }
    DescriptorSet::from_parts(model.target_dim, data, descriptors.sites().to_vec())
}

/// Appends `(x / W - 0.5, y / H - 0.5)` to each descriptor.
pub fn spatially_extend(
    descriptors: &DescriptorSet,
    image_w: usize,
    image_h: usize,
) -> Result<DescriptorSet> {
    if image_w == 0 || image_h == 0 {
        return Err(Error::InvalidArgument("image extent must be positive".into()));
    }
    let d = descriptors.dim();
    let mut data = Vec::with_capacity(descriptors.len() * (d + 2));
    for (x, s) in descriptors.iter().zip(descriptors.sites()) {
        data.extend_from_slice(x);
        data.push(s.x / image_w as f64 - 0.5);
        data.push(s.y / image_h as f64 - 0.5);
    }
    DescriptorSet::from_parts(d + 2, data, descriptors.sites().to_vec())
}
