//! Fisher vector encoding and its improved (normalised) variants.
//!
//! For a GMM with `K` components over `D`-dimensional descriptors the raw
//! encoding is the stack `[u_1, v_1, ..., u_K, v_K]` with
//!
//! ```text
//! u_k = 1 / (N sqrt(pi_k))   * sum_i q_ik (x_i - mu_k) / sigma_k
//! v_k = 1 / (N sqrt(2 pi_k)) * sum_i q_ik [((x_i - mu_k) / sigma_k)^2 - 1]
//! ```
//!
//! where `q_ik` are the posterior soft assignments. Posteriors below
//! [`FisherConfig::posterior_threshold`] are dropped (not renormalised).

use rayon::prelude::*;

use crate::descriptors::{DescriptorSet, Site};
use crate::feature::{l2_normalise, signed_sqrt, FeatureVector};
use crate::gmm::GmmModel;
use crate::reduce::spatially_extend;
use crate::{Error, Result};

const CHUNK: usize = 256;

/// Number of cells in the 1x1 + 3x1 + 2x2 pyramid.
pub const PYRAMID_CELLS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Normalisation {
    /// signed sqrt, l2, signed sqrt, l2
    ClassicDoubleSqrt,
    /// signed sqrt, l2 per `(u_k, v_k)` block, global l2
    IntraNormSingleSqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpatialScheme {
    None,
    /// 1x1, 3x1 (horizontal thirds) and 2x2 cells, stacked.
    Pyramid,
    /// Descriptors get `(x/W - 0.5, y/H - 0.5)` appended before quantisation.
    Extended,
}

/// Where the pyramid cells are normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PyramidNorm {
    /// Each cell is improved on its own, then the stack is l2-normalised.
    PerCell,
    /// Raw cells are stacked and the stack is improved as one vector.
    StackOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FisherConfig {
    pub normalisation: Normalisation,
    pub spatial: SpatialScheme,
    pub num_components: usize,
    /// Dimension of the descriptors handed to the encoder, before any spatial
    /// extension.
    pub descriptor_dim: usize,
    pub pyramid_norm: PyramidNorm,
    pub posterior_threshold: f64,
}

impl FisherConfig {
    pub fn new(
        normalisation: Normalisation,
        spatial: SpatialScheme,
        num_components: usize,
        descriptor_dim: usize,
    ) -> Self {
        Self {
            normalisation,
            spatial,
            num_components,
            descriptor_dim,
            pyramid_norm: PyramidNorm::PerCell,
            posterior_threshold: 1e-6,
        }
    }

    /// Dimension of the descriptors the GMM sees.
    pub fn gmm_dim(&self) -> usize {
        match self.spatial {
            SpatialScheme::Extended => self.descriptor_dim + 2,
            _ => self.descriptor_dim,
        }
    }

    fn check_model(&self, model: &GmmModel) -> Result<()> {
        if model.num_components != self.num_components {
            return Err(Error::InvalidArgument(format!(
                "config expects K={}, model has K={}",
                self.num_components, model.num_components
            )));
        }
        if model.dim != self.gmm_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.gmm_dim(),
                found: model.dim,
            });
        }
        Ok(())
    }
}

/// Exact output dimension of an encoder configuration. With `colour_stack`
/// an un-pooled colour encoding with the same `K` and descriptor dimension is
/// concatenated.
pub fn fv_dimension(config: &FisherConfig, colour_stack: bool) -> usize {
    let k = config.num_components;
    let mut dim = 2 * k * config.gmm_dim();
    if config.spatial == SpatialScheme::Pyramid {
        dim *= PYRAMID_CELLS;
    }
    if colour_stack {
        dim += 2 * k * config.descriptor_dim;
    }
    dim
}

/// Raw Fisher vector with the default posterior threshold.
pub fn encode_fv_raw(model: &GmmModel, descriptors: &DescriptorSet) -> Result<FeatureVector> {
    encode_fv_raw_with(model, descriptors, 1e-6)
}

pub fn encode_fv_raw_with(
    model: &GmmModel,
    descriptors: &DescriptorSet,
    posterior_threshold: f64,
) -> Result<FeatureVector> {
    let (k, d) = (model.num_components, model.dim);
    if descriptors.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: descriptors.dim(),
        });
    }
    let tag = format!("fv:k{k}:d{d}");
    let n = descriptors.len();
    if n == 0 {
        return Ok(FeatureVector::new(vec![0.0; 2 * k * d], tag));
    }

    let eval = model.evaluator();
    let inv_sd: Vec<f64> = (0..k)
        .flat_map(|c| eval.inv_var(c).iter().map(|v| v.sqrt()).collect::<Vec<_>>())
        .collect();
    let partial: Vec<Vec<f64>> = descriptors
        .as_flat()
        .par_chunks(CHUNK * d)
        .map(|chunk| {
            let mut acc = vec![0.0; 2 * k * d];
            let mut q = vec![0.0; k];
            for x in chunk.chunks_exact(d) {
                eval.posteriors_into(x, &mut q);
                for (c, &qc) in q.iter().enumerate() {
                    if qc < posterior_threshold {
                        continue;
                    }
                    let mu = model.mean(c);
                    let isd = &inv_sd[c * d..(c + 1) * d];
                    let (u, v) = acc[2 * c * d..2 * (c + 1) * d].split_at_mut(d);
                    for i in 0..d {
                        let z = (x[i] - mu[i]) * isd[i];
                        u[i] += qc * z;
                        v[i] += qc * (z * z - 1.0);
                    }
                }
            }
            acc
        })
        .collect();

    let mut values = vec![0.0; 2 * k * d];
    for p in &partial {
        values.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    for c in 0..k {
        let pi = model.weights[c];
        let su = 1.0 / (n as f64 * pi.sqrt());
        let sv = 1.0 / (n as f64 * (2.0 * pi).sqrt());
        let (u, v) = values[2 * c * d..2 * (c + 1) * d].split_at_mut(d);
        u.iter_mut().for_each(|x| *x *= su);
        v.iter_mut().for_each(|x| *x *= sv);
    }
    Ok(FeatureVector::new(values, tag))
}

/// Applies the configured normalisation to `values`, treating consecutive
/// runs of `block_len` entries as the `(u_k, v_k)` blocks.
pub fn improve_values(values: &mut [f64], normalisation: Normalisation, block_len: usize) {
    match normalisation {
        Normalisation::ClassicDoubleSqrt => {
            signed_sqrt(values);
            l2_normalise(values);
            signed_sqrt(values);
            l2_normalise(values);
        }
        Normalisation::IntraNormSingleSqrt => {
            signed_sqrt(values);
            for block in values.chunks_mut(block_len.max(1)) {
                l2_normalise(block);
            }
            l2_normalise(values);
        }
    }
}

fn improve_tag(normalisation: Normalisation) -> &'static str {
    match normalisation {
        Normalisation::ClassicDoubleSqrt => "ssqrt|l2|ssqrt|l2",
        Normalisation::IntraNormSingleSqrt => "ssqrt|l2-blocks|l2",
    }
}

/// Improves a single raw encoding of `config.num_components` blocks.
pub fn improve(fv: &FeatureVector, config: &FisherConfig) -> Result<FeatureVector> {
    let k = config.num_components;
    if k == 0 || !fv.dim().is_multiple_of(2 * k) {
        return Err(Error::InvalidArgument(format!(
            "vector of length {} does not split into {k} (u, v) blocks",
            fv.dim()
        )));
    }
    let mut values = fv.values.clone();
    improve_values(&mut values, config.normalisation, fv.dim() / k);
    Ok(FeatureVector {
        values,
        l2_normalised: true,
        provenance: format!("{}|{}", fv.provenance, improve_tag(config.normalisation)),
    })
}

/// Cells a site falls into: the whole image, one horizontal third, one
/// quadrant (row-major).
pub fn pyramid_cells(site: &Site, image_w: usize, image_h: usize) -> [usize; 3] {
    let fx = site.x / image_w as f64;
    let fy = site.y / image_h as f64;
    let third = ((fy * 3.0).floor().max(0.0) as usize).min(2);
    let qx = ((fx * 2.0).floor().max(0.0) as usize).min(1);
    let qy = ((fy * 2.0).floor().max(0.0) as usize).min(1);
    [0, 1 + third, 4 + qy * 2 + qx]
}

/// Encodes an image's descriptors under the configured spatial scheme and
/// normalisation. Returns an l2-normalised vector of
/// [`fv_dimension(config, false)`](fv_dimension) entries.
pub fn encode_spatial(
    model: &GmmModel,
    descriptors: &DescriptorSet,
    config: &FisherConfig,
    image_w: usize,
    image_h: usize,
) -> Result<FeatureVector> {
    config.check_model(model)?;
    if descriptors.dim() != config.descriptor_dim {
        return Err(Error::DimensionMismatch {
            expected: config.descriptor_dim,
            found: descriptors.dim(),
        });
    }
    match config.spatial {
        SpatialScheme::None => {
            let raw = encode_fv_raw_with(model, descriptors, config.posterior_threshold)?;
            improve(&raw, config)
        }
        SpatialScheme::Extended => {
            let ext = spatially_extend(descriptors, image_w, image_h)?;
            let raw = encode_fv_raw_with(model, &ext, config.posterior_threshold)?;
            improve(&raw, config).map(|f| f.with_step("xy"))
        }
        SpatialScheme::Pyramid => {
            if image_w == 0 || image_h == 0 {
                return Err(Error::InvalidArgument("image extent must be positive".into()));
            }
            let mut members: Vec<Vec<usize>> = vec![Vec::new(); PYRAMID_CELLS];
            for (i, s) in descriptors.sites().iter().enumerate() {
                for c in pyramid_cells(s, image_w, image_h) {
                    members[c].push(i);
                }
            }
            let block = 2 * config.gmm_dim();
            let mut stacked = Vec::with_capacity(fv_dimension(config, false));
            for idx in &members {
                let cell = descriptors.select(idx);
                let raw = encode_fv_raw_with(model, &cell, config.posterior_threshold)?;
                let mut values = raw.values;
                if config.pyramid_norm == PyramidNorm::PerCell {
                    improve_values(&mut values, config.normalisation, block);
                }
                stacked.extend(values);
            }
            let tag = match config.pyramid_norm {
                PyramidNorm::PerCell => {
                    l2_normalise(&mut stacked);
                    format!(
                        "fv:k{}:d{}|spm8|{}|l2",
                        config.num_components,
                        config.gmm_dim(),
                        improve_tag(config.normalisation)
                    )
                }
                PyramidNorm::StackOnly => {
                    improve_values(&mut stacked, config.normalisation, block);
                    format!(
                        "fv:k{}:d{}|spm8|{}",
                        config.num_components,
                        config.gmm_dim(),
                        improve_tag(config.normalisation)
                    )
                }
            };
            Ok(FeatureVector {
                values: stacked,
                l2_normalised: true,
                provenance: tag,
            })
        }
    }
}

/// Concatenates independently improved encodings (e.g. SIFT and colour) and
/// re-applies global l2 normalisation.
pub fn stack_encodings(parts: &[FeatureVector]) -> Result<FeatureVector> {
    if parts.is_empty() {
        return Err(Error::Empty("encodings to stack"));
    }
    let mut values = Vec::with_capacity(parts.iter().map(|p| p.dim()).sum());
    for p in parts {
        values.extend_from_slice(&p.values);
    }
    let provenance = parts
        .iter()
        .map(|p| p.provenance.as_str())
        .collect::<Vec<_>>()
        .join("+");
    Ok(FeatureVector::new(values, format!("[{provenance}]")).l2_normalised())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptors::Site;

    fn toy_model() -> GmmModel {
        GmmModel::from_parameters(
            2,
            vec![0.0, 0.0, 5.0, 5.0],
            vec![1.0, 2.0, 0.5, 1.5],
            vec![0.25, 0.75],
        )
        .unwrap()
    }

    #[test]
    fn dimensions() {
        let c = |k, d, s| FisherConfig::new(Normalisation::IntraNormSingleSqrt, s, k, d);
        assert_eq!(fv_dimension(&c(256, 80, SpatialScheme::None), false), 40_960);
        assert_eq!(fv_dimension(&c(256, 80, SpatialScheme::Extended), false), 41_984);
        assert_eq!(fv_dimension(&c(256, 80, SpatialScheme::Pyramid), false), 327_680);
        assert_eq!(fv_dimension(&c(512, 80, SpatialScheme::Extended), false), 83_968);
        assert_eq!(fv_dimension(&c(512, 80, SpatialScheme::None), false), 81_920);
        assert_eq!(fv_dimension(&c(512, 80, SpatialScheme::Extended), true), 165_888);
        assert_eq!(fv_dimension(&c(1, 1, SpatialScheme::None), false), 2);
    }

    #[test]
    fn descriptor_at_mean() {
        let g = GmmModel::from_parameters(2, vec![1.0, -1.0, 50.0, 50.0], vec![1.0; 4], vec![0.5, 0.5])
            .unwrap();
        let set = DescriptorSet::from_rows(2, &[vec![1.0, -1.0]]).unwrap();
        let fv = encode_fv_raw(&g, &set).unwrap();
        assert_eq!(fv.dim(), 8);
        let expect_v = -1.0 / (2.0 * 0.5f64).sqrt();
        assert_eq!(&fv.values[..2], &[0.0, 0.0]);
        assert!((fv.values[2] - expect_v).abs() < 1e-12);
        assert!((fv.values[3] - expect_v).abs() < 1e-12);
        // far component gets nothing
        assert!(fv.values[4..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_set_gives_zero_vector() {
        let g = toy_model();
        let fv = encode_fv_raw(&g, &DescriptorSet::empty(2)).unwrap();
        assert_eq!(fv.values, vec![0.0; 8]);
        let cfg = FisherConfig::new(Normalisation::ClassicDoubleSqrt, SpatialScheme::None, 2, 2);
        let imp = improve(&fv, &cfg).unwrap();
        assert_eq!(imp.values, vec![0.0; 8]);
    }

    #[test]
    fn intra_norm_blocks_are_unit_before_global() {
        let mut v: Vec<f64> = (0..12).map(|i| (i as f64 - 5.5) * 0.3).collect();
        signed_sqrt(&mut v);
        for b in v.chunks_mut(4) {
            l2_normalise(b);
            assert!((crate::feature::l2_norm(b) - 1.0).abs() < 1e-12);
        }
        let mut w: Vec<f64> = (0..12).map(|i| (i as f64 - 5.5) * 0.3).collect();
        improve_values(&mut w, Normalisation::IntraNormSingleSqrt, 4);
        // three unit blocks, globally rescaled by 1/sqrt(3)
        for (a, b) in v.iter().zip(&w) {
            assert!((a / 3f64.sqrt() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pyramid_layout() {
        let g = toy_model();
        let cfg = FisherConfig::new(Normalisation::IntraNormSingleSqrt, SpatialScheme::Pyramid, 2, 2);
        let mut set = DescriptorSet::empty(2);
        for (i, p) in [[0.3, 0.1], [4.0, 6.0], [1.0, 2.0]].iter().enumerate() {
            set.push(p, Site { x: 5.0 + i as f64, y: 3.0, scale: 4.0 }).unwrap();
        }
        let fv = encode_spatial(&g, &set, &cfg, 100, 90).unwrap();
        assert_eq!(fv.dim(), 8 * 8);
        let block = |c: usize| &fv.values[c * 8..(c + 1) * 8];
        // top-left quadrant only: thirds 2-3 and quadrants 2-4 are empty
        for c in [2, 3, 5, 6, 7] {
            assert!(block(c).iter().all(|&v| v == 0.0), "cell {c}");
        }
        assert!(block(0).iter().any(|&v| v != 0.0));
        assert_eq!(block(0), block(1));
        assert_eq!(block(0), block(4));
        assert!((fv.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pyramid_cell_assignment() {
        let s = |x, y| Site { x, y, scale: 1.0 };
        assert_eq!(pyramid_cells(&s(0.0, 0.0), 90, 90), [0, 1, 4]);
        assert_eq!(pyramid_cells(&s(89.0, 89.0), 90, 90), [0, 3, 7]);
        assert_eq!(pyramid_cells(&s(46.0, 31.0), 90, 90), [0, 2, 5]);
        assert_eq!(pyramid_cells(&s(10.0, 50.0), 90, 90), [0, 2, 6]);
    }

    #[test]
    fn model_config_mismatch() {
        let g = toy_model();
        let cfg = FisherConfig::new(Normalisation::IntraNormSingleSqrt, SpatialScheme::Extended, 2, 2);
        let set = DescriptorSet::from_rows(2, &[vec![0.0, 0.0]]).unwrap();
        assert!(encode_spatial(&g, &set, &cfg, 10, 10).is_err());
    }

    #[test]
    fn stacking_renormalises() {
        let a = FeatureVector::new(vec![1.0, 0.0], "a").l2_normalised();
        let b = FeatureVector::new(vec![0.0, 0.0, 2.0], "b").l2_normalised();
        let s = stack_encodings(&[a, b]).unwrap();
        assert_eq!(s.dim(), 5);
        assert!((s.norm() - 1.0).abs() < 1e-15);
        assert!((s.values[0] - s.values[4]).abs() < 1e-15);
    }
}
