//! Dense multi-scale local descriptors.
//!
//! Descriptors are sampled on a regular grid over an upscaled copy of the
//! image, at several patch sizes. Two descriptor families are provided:
//!
//! * RootSIFT: 4x4 spatial bins x 8 orientation bins of Gaussian-weighted,
//!   bilinearly binned gradient histograms, L1-normalised and square-rooted.
//! * LCS (local colour statistics): per-cell mean and variance of the three
//!   Lab channels over the same 4x4 grid, 96 values per patch.
//!
//! Site coordinates are always reported in the frame of the input image, not
//! the upscaled working copy.

use crate::image::{ColorSpace, RasterImage};
use crate::{Error, Result};

pub const SIFT_DIM: usize = 128;
pub const LCS_DIM: usize = 96;

const SPATIAL_BINS: usize = 4;
const ORIENTATION_BINS: usize = 8;
/// Bin size divided by the pre-smoothing sigma at each scale.
const SMOOTHING_MAGNIF: f64 = 6.0;
/// Window sigma in units of spatial bins (half the descriptor width).
const WINDOW_SIGMA_BINS: f64 = 2.0;

/// Location of a descriptor: patch centre and patch side, both in pixels of
/// the original (pre-upscale) image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Site {
    pub x: f64,
    pub y: f64,
    pub scale: f64,
}

/// A set of equal-length descriptors and the sites they were sampled at.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    dim: usize,
    data: Vec<f64>,
    sites: Vec<Site>,
}

impl DescriptorSet {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
            sites: Vec::new(),
        }
    }

    /// Builds a set from a flat row-major buffer of `sites.len() * dim` values.
    pub fn from_parts(dim: usize, data: Vec<f64>, sites: Vec<Site>) -> Result<Self> {
        if data.len() != sites.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: sites.len() * dim,
                found: data.len(),
            });
        }
        Ok(Self { dim, data, sites })
    }

    /// Descriptors without meaningful positions (all sites at the origin).
    pub fn from_rows(dim: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut set = Self::empty(dim);
        for r in rows {
            set.push(
                r,
                Site {
                    x: 0.0,
                    y: 0.0,
                    scale: 0.0,
                },
            )?;
        }
        Ok(set)
    }

    pub fn push(&mut self, descriptor: &[f64], site: Site) -> Result<()> {
        if descriptor.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: descriptor.len(),
            });
        }
        self.data.extend_from_slice(descriptor);
        self.sites.push(site);
        Ok(())
    }

    pub fn extend(&mut self, other: &DescriptorSet) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: other.dim,
            });
        }
        self.data.extend_from_slice(&other.data);
        self.sites.extend_from_slice(&other.sites);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn descriptor(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact panics on a zero chunk size
        self.data
            .chunks_exact(self.dim.max(1))
            .take(if self.dim == 0 { 0 } else { self.sites.len() })
    }

    /// Keeps the descriptors at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> DescriptorSet {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        let mut sites = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.descriptor(i));
            sites.push(self.sites[i]);
        }
        DescriptorSet {
            dim: self.dim,
            data,
            sites,
        }
    }
}

/// Dense grid sampling parameters. `stride` and `base_patch` are measured in
/// pixels of the upscaled image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenseSamplingParams {
    pub stride: usize,
    pub num_scales: usize,
    pub scale_step: f64,
    pub upscale_factor: usize,
    pub base_patch: usize,
}

impl Default for DenseSamplingParams {
    fn default() -> Self {
        Self {
            stride: 3,
            num_scales: 7,
            scale_step: std::f64::consts::SQRT_2,
            upscale_factor: 2,
            base_patch: 24,
        }
    }
}

impl DenseSamplingParams {
    pub fn validate(&self) -> Result<()> {
        if self.stride < 1 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        if self.num_scales < 1 {
            return Err(Error::InvalidArgument("num_scales must be >= 1".into()));
        }
        if !(self.scale_step > 1.0) {
            return Err(Error::InvalidArgument("scale_step must be > 1".into()));
        }
        if self.upscale_factor < 1 {
            return Err(Error::InvalidArgument("upscale_factor must be >= 1".into()));
        }
        if self.base_patch < SPATIAL_BINS {
            return Err(Error::InvalidArgument(format!(
                "base_patch must be >= {SPATIAL_BINS}"
            )));
        }
        Ok(())
    }

    /// Spatial bin size at scale `k`; the patch side is four bins.
    pub fn bin_size(&self, k: usize) -> usize {
        let patch = self.base_patch as f64 * self.scale_step.powi(k as i32);
        ((patch / SPATIAL_BINS as f64).round() as usize).max(1)
    }

    pub fn patch_size(&self, k: usize) -> usize {
        self.bin_size(k) * SPATIAL_BINS
    }

    /// Top-left corners of every patch at scale `k` on a `width x height`
    /// upscaled image, row-major.
    fn grid(&self, k: usize, width: usize, height: usize) -> Vec<(usize, usize)> {
        let patch = self.patch_size(k);
        if patch > width || patch > height {
            return Vec::new();
        }
        let mut out = Vec::new();
        for ty in (0..=height - patch).step_by(self.stride) {
            for tx in (0..=width - patch).step_by(self.stride) {
                out.push((tx, ty));
            }
        }
        out
    }

    /// Number of sites produced for an image of the given original size.
    pub fn site_count(&self, width: usize, height: usize) -> usize {
        let (w, h) = (width * self.upscale_factor, height * self.upscale_factor);
        (0..self.num_scales)
            .map(|k| {
                let p = self.patch_size(k);
                if p > w || p > h {
                    0
                } else {
                    ((w - p) / self.stride + 1) * ((h - p) / self.stride + 1)
                }
            })
            .sum()
    }

    fn site(&self, k: usize, tx: usize, ty: usize) -> Site {
        let p = self.patch_size(k) as f64;
        let u = self.upscale_factor as f64;
        Site {
            x: (tx as f64 + p / 2.0) / u,
            y: (ty as f64 + p / 2.0) / u,
            scale: p / u,
        }
    }
}

fn upscale(image: &RasterImage, factor: usize) -> Result<RasterImage> {
    if factor == 1 {
        Ok(image.clone())
    } else {
        image.resize(image.width() * factor, image.height() * factor)
    }
}

/// Dense RootSIFT over all scales. Input must be grayscale.
pub fn extract_dense_sift(image: &RasterImage, params: &DenseSamplingParams) -> Result<DescriptorSet> {
    params.validate()?;
    if image.space() != ColorSpace::Gray {
        return Err(Error::InvalidImage(
            "dense SIFT expects a grayscale image".into(),
        ));
    }
    let up = upscale(image, params.upscale_factor)?;
    let (w, h) = (up.width(), up.height());
    let plane = up.plane(0);
    let mut out = DescriptorSet::empty(SIFT_DIM);

    let mut window = [0.0; SPATIAL_BINS * SPATIAL_BINS];
    let centre = (SPATIAL_BINS as f64 - 1.0) / 2.0;
    for by in 0..SPATIAL_BINS {
        for bx in 0..SPATIAL_BINS {
            let (dx, dy) = (bx as f64 - centre, by as f64 - centre);
            window[by * SPATIAL_BINS + bx] =
                (-(dx * dx + dy * dy) / (2.0 * WINDOW_SIGMA_BINS * WINDOW_SIGMA_BINS)).exp();
        }
    }

    let mut desc = [0.0; SIFT_DIM];
    for k in 0..params.num_scales {
        let grid = params.grid(k, w, h);
        if grid.is_empty() {
            continue;
        }
        let bin = params.bin_size(k);
        let smoothed = gaussian_blur(&plane, w, h, bin as f64 / SMOOTHING_MAGNIF);
        let mut maps = orientation_maps(&smoothed, w, h);
        for m in maps.iter_mut() {
            triangle_filter_2d(m, w, h, bin);
        }
        for &(tx, ty) in &grid {
            for by in 0..SPATIAL_BINS {
                let cy = ty + by * bin + bin / 2;
                for bx in 0..SPATIAL_BINS {
                    let cx = tx + bx * bin + bin / 2;
                    let wgt = window[by * SPATIAL_BINS + bx];
                    let base = (by * SPATIAL_BINS + bx) * ORIENTATION_BINS;
                    for (o, m) in maps.iter().enumerate() {
                        desc[base + o] = m[cy * w + cx] * wgt;
                    }
                }
            }
            root_sift(&mut desc);
            out.push(&desc, params.site(k, tx, ty))?;
        }
    }
    Ok(out)
}

/// L1 normalisation followed by an element-wise square root. All-zero
/// histograms are left as zeros.
pub fn root_sift(desc: &mut [f64]) {
    let l1: f64 = desc.iter().map(|v| v.abs()).sum();
    if l1 > 0.0 {
        desc.iter_mut().for_each(|v| *v = (v.abs() / l1).sqrt());
    }
}

/// Local colour statistics on the same grid as the SIFT extractor. Input must
/// be in Lab.
pub fn extract_lcs(image: &RasterImage, params: &DenseSamplingParams) -> Result<DescriptorSet> {
    params.validate()?;
    if image.space() != ColorSpace::Lab {
        return Err(Error::InvalidImage("LCS expects a Lab image".into()));
    }
    let up = upscale(image, params.upscale_factor)?;
    let (w, h) = (up.width(), up.height());
    let planes: Vec<Vec<f64>> = (0..3).map(|c| up.plane(c)).collect();
    let mut out = DescriptorSet::empty(LCS_DIM);
    let mut desc = [0.0; LCS_DIM];
    for k in 0..params.num_scales {
        let bin = params.bin_size(k);
        let n = (bin * bin) as f64;
        for (tx, ty) in params.grid(k, w, h) {
            for cy in 0..SPATIAL_BINS {
                for cx in 0..SPATIAL_BINS {
                    let (x0, y0) = (tx + cx * bin, ty + cy * bin);
                    let base = (cy * SPATIAL_BINS + cx) * 6;
                    for (c, plane) in planes.iter().enumerate() {
                        let cell = || {
                            (y0..y0 + bin)
                                .flat_map(move |y| plane[y * w + x0..y * w + x0 + bin].iter())
                        };
                        let mean = cell().sum::<f64>() / n;
                        let var = cell().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        desc[base + c] = mean;
                        desc[base + 3 + c] = var;
                    }
                }
            }
            out.push(&desc, params.site(k, tx, ty))?;
        }
    }
    Ok(out)
}

fn gaussian_blur(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma < 1e-3 {
        return src.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= s);

    // clamp-to-edge borders keep constant images constant
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let xi = (x as isize + i as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += kv * row[xi];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for (i, kv) in kernel.iter().enumerate() {
            let yi = (y as isize + i as isize - radius).clamp(0, h as isize - 1) as usize;
            let src_row = &tmp[yi * w..(yi + 1) * w];
            let dst_row = &mut out[y * w..(y + 1) * w];
            for (d, s) in dst_row.iter_mut().zip(src_row) {
                *d += kv * s;
            }
        }
    }
    out
}

/// Gradient magnitude split over 8 orientation channels with linear
/// interpolation between neighbouring orientation bins.
fn orientation_maps(img: &[f64], w: usize, h: usize) -> Vec<Vec<f64>> {
    let mut maps = vec![vec![0.0; w * h]; ORIENTATION_BINS];
    let at = |x: usize, y: usize| img[y * w + x];
    let bin_width = 2.0 * std::f64::consts::PI / ORIENTATION_BINS as f64;
    for y in 0..h {
        for x in 0..w {
            let gx = match (x, w) {
                (_, 1) => 0.0,
                (0, _) => at(1, y) - at(0, y),
                (x, w) if x == w - 1 => at(x, y) - at(x - 1, y),
                (x, _) => 0.5 * (at(x + 1, y) - at(x - 1, y)),
            };
            let gy = match (y, h) {
                (_, 1) => 0.0,
                (0, _) => at(x, 1) - at(x, 0),
                (y, h) if y == h - 1 => at(x, y) - at(x, y - 1),
                (y, _) => 0.5 * (at(x, y + 1) - at(x, y - 1)),
            };
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let angle = gy.atan2(gx).rem_euclid(2.0 * std::f64::consts::PI);
            let pos = angle / bin_width;
            let b0 = (pos.floor() as usize) % ORIENTATION_BINS;
            let b1 = (b0 + 1) % ORIENTATION_BINS;
            let f = pos - pos.floor();
            maps[b0][y * w + x] += mag * (1.0 - f);
            maps[b1][y * w + x] += mag * f;
        }
    }
    maps
}

/// Separable bilinear-binning kernel `max(0, 1 - |d| / half_width)` along both
/// axes, zero padded.
fn triangle_filter_2d(map: &mut [f64], w: usize, h: usize, half_width: usize) {
    let mut line = Vec::new();
    let mut out = Vec::new();
    for y in 0..h {
        line.clear();
        line.extend_from_slice(&map[y * w..(y + 1) * w]);
        triangle_filter_1d(&line, half_width, &mut out);
        map[y * w..(y + 1) * w].copy_from_slice(&out);
    }
    for x in 0..w {
        line.clear();
        line.extend((0..h).map(|y| map[y * w + x]));
        triangle_filter_1d(&line, half_width, &mut out);
        for (y, v) in out.iter().enumerate() {
            map[y * w + x] = *v;
        }
    }
}

/// `out[i] = sum_t s[t] * max(0, b - |i - t|) / b`, computed as a trailing box
/// sum followed by a leading box sum.
fn triangle_filter_1d(s: &[f64], b: usize, out: &mut Vec<f64>) {
    let n = s.len();
    let ext = n + b - 1;
    let mut box1 = vec![0.0; ext];
    let mut acc = 0.0;
    for (j, slot) in box1.iter_mut().enumerate() {
        if j < n {
            acc += s[j];
        }
        if j >= b && j - b < n {
            acc -= s[j - b];
        }
        *slot = acc;
    }
    out.clear();
    out.resize(n, 0.0);
    let mut acc: f64 = box1[..b.min(ext)].iter().sum();
    let inv = 1.0 / b as f64;
    for i in 0..n {
        out[i] = acc * inv;
        if i + b < ext {
            acc += box1[i + b];
        }
        acc -= box1[i];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_scale(stride: usize, patch: usize, upscale: usize) -> DenseSamplingParams {
        DenseSamplingParams {
            stride,
            num_scales: 1,
            scale_step: 2.0,
            upscale_factor: upscale,
            base_patch: patch,
        }
    }

    #[test]
    fn triangle_filter_matches_direct_sum() {
        let s: Vec<f64> = (0..17).map(|i| ((i * 37) % 11) as f64 - 3.0).collect();
        for b in 1..6 {
            let mut out = Vec::new();
            triangle_filter_1d(&s, b, &mut out);
            for i in 0..s.len() {
                let direct: f64 = (0..s.len())
                    .map(|t| {
                        let d = (i as isize - t as isize).unsigned_abs();
                        s[t] * (b.saturating_sub(d)) as f64 / b as f64
                    })
                    .sum();
                assert!((out[i] - direct).abs() < 1e-12, "b={b} i={i}");
            }
        }
    }

    #[test]
    fn constant_image_gives_zero_descriptors() {
        let img = RasterImage::filled(40, 40, ColorSpace::Gray, 0.6).unwrap();
        let set = extract_dense_sift(&img, &DenseSamplingParams::default()).unwrap();
        assert!(!set.is_empty());
        assert!(set.as_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_small_image_gives_empty_set() {
        let img = RasterImage::filled(5, 5, ColorSpace::Gray, 0.1).unwrap();
        let set = extract_dense_sift(&img, &DenseSamplingParams::default()).unwrap();
        assert!(set.is_empty());
        assert_eq!(set.dim(), SIFT_DIM);
    }

    #[test]
    fn rejects_colour_input() {
        let img = RasterImage::filled(30, 30, ColorSpace::Rgb, 0.1).unwrap();
        assert!(extract_dense_sift(&img, &DenseSamplingParams::default()).is_err());
        assert!(extract_lcs(&img, &DenseSamplingParams::default()).is_err());
    }

    #[test]
    fn sites_in_original_frame() {
        let img = RasterImage::from_fn(30, 20, ColorSpace::Gray, |x, y, _| {
            ((x * 3 + y * 5) % 7) as f64 / 7.0
        })
        .unwrap();
        let p = DenseSamplingParams::default();
        let set = extract_dense_sift(&img, &p).unwrap();
        assert_eq!(set.len(), p.site_count(30, 20));
        for s in set.sites() {
            assert!(s.x >= 0.0 && s.x < 30.0 && s.y >= 0.0 && s.y < 20.0);
        }
        // first site: top-left 24px patch at 2x -> centre (6, 6) in the original
        assert_eq!(set.sites()[0], Site { x: 6.0, y: 6.0, scale: 12.0 });
    }

    #[test]
    fn patch_sizes_follow_sqrt2_progression() {
        let p = DenseSamplingParams::default();
        let sizes: Vec<_> = (0..7).map(|k| p.patch_size(k)).collect();
        assert_eq!(sizes, vec![24, 32, 48, 68, 96, 136, 192]);
    }

    #[test]
    fn lcs_constant_patch() {
        let img = RasterImage::filled(24, 24, ColorSpace::Lab, 0.3).unwrap();
        let set = extract_lcs(&img, &one_scale(3, 24, 1)).unwrap();
        assert_eq!(set.len(), 1);
        let d = set.descriptor(0);
        for cell in d.chunks(6) {
            assert!(cell[..3].iter().all(|&m| (m - 0.3).abs() < 1e-15));
            assert!(cell[3..].iter().all(|&v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let img = RasterImage::filled(24, 24, ColorSpace::Gray, 0.3).unwrap();
        let mut p = DenseSamplingParams::default();
        p.stride = 0;
        assert!(extract_dense_sift(&img, &p).is_err());
        p.stride = 1;
        p.scale_step = 1.0;
        assert!(extract_dense_sift(&img, &p).is_err());
    }
}
