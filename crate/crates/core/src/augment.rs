//! Crop/flip augmentation, colour jitter and fusion of per-sample features.

use nalgebra::{Matrix3, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::feature::FeatureVector;
use crate::image::{ColorSpace, RasterImage};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AugmentKind {
    /// Centre crop only.
    None,
    /// Centre crop and its mirror.
    Flip,
    /// Four corner crops and the centre crop, each with its mirror.
    CropFlip,
}

impl AugmentKind {
    pub fn sample_count(self) -> usize {
        match self {
            AugmentKind::None => 1,
            AugmentKind::Flip => 2,
            AugmentKind::CropFlip => 10,
        }
    }
}

/// How per-sample features of one image are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Fusion {
    /// Every sample is kept as an independent example.
    Samples,
    Sum,
    Max,
    Stack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AugmentStrategy {
    pub kind: AugmentKind,
    pub train_fusion: Fusion,
    pub test_fusion: Fusion,
}

impl AugmentStrategy {
    pub fn none() -> Self {
        Self {
            kind: AugmentKind::None,
            train_fusion: Fusion::Samples,
            test_fusion: Fusion::Samples,
        }
    }
}

/// Side the smaller image dimension is resized to before taking corner
/// crops: 256 for 224-pixel crops, scaled proportionally otherwise.
pub fn crop_flip_resize_side(target: usize) -> usize {
    ((target as f64 * 256.0 / 224.0).round() as usize).max(target)
}

/// One augmentation sample, as a region of the source image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
    pub mirrored: bool,
}

/// Crop geometry on an image already resized for the strategy, in sample
/// order (centre, TL, TR, BL, BR) x (original, mirrored).
fn resized_boxes(w: usize, h: usize, kind: AugmentKind, target: usize) -> Vec<CropBox> {
    let centre = CropBox {
        x: (w - target) / 2,
        y: (h - target) / 2,
        width: target,
        height: target,
        mirrored: false,
    };
    let positions = match kind {
        AugmentKind::None | AugmentKind::Flip => vec![centre],
        AugmentKind::CropFlip => {
            let (r, b) = (w - target, h - target);
            let at = |x, y| CropBox { x, y, ..centre };
            vec![centre, at(0, 0), at(r, 0), at(0, b), at(r, b)]
        }
    };
    let mut out = Vec::with_capacity(kind.sample_count());
    for p in positions {
        out.push(p);
        if kind != AugmentKind::None {
            out.push(CropBox { mirrored: true, ..p });
        }
    }
    out
}

fn resize_side(kind: AugmentKind, target: usize) -> usize {
    match kind {
        AugmentKind::CropFlip => crop_flip_resize_side(target),
        _ => target,
    }
}

/// Crop boxes for `kind` mapped to the original `width x height` frame.
pub fn crop_boxes(width: usize, height: usize, kind: AugmentKind, target: usize) -> Result<Vec<CropBox>> {
    check_source(width, height, target)?;
    let side = resize_side(kind, target);
    let (rw, rh) = crate::image::smallest_side_extent(width, height, side);
    let f = width.min(height) as f64 / side as f64;
    let map = |v: usize, extent: usize, size: usize| -> usize {
        ((v as f64 * f).round() as usize).min(extent - size)
    };
    let size_w = ((target as f64 * f).round() as usize).clamp(1, width);
    let size_h = ((target as f64 * f).round() as usize).clamp(1, height);
    Ok(resized_boxes(rw, rh, kind, target)
        .into_iter()
        .map(|b| CropBox {
            x: map(b.x, width, size_w),
            y: map(b.y, height, size_h),
            width: size_w,
            height: size_h,
            mirrored: b.mirrored,
        })
        .collect())
}

fn check_source(width: usize, height: usize, target: usize) -> Result<()> {
    if target == 0 {
        return Err(Error::InvalidArgument("crop target must be positive".into()));
    }
    if width.min(height) < 2 {
        return Err(Error::DegenerateImage {
            width,
            height,
            reason: "too small to resample",
        });
    }
    Ok(())
}

fn cut(img: &RasterImage, b: &CropBox) -> Result<RasterImage> {
    let c = img.crop(b.x, b.y, b.width, b.height)?;
    Ok(if b.mirrored { c.mirror() } else { c })
}

/// Produces the test-time samples of an image: 1, 2 or 10 of them.
///
/// With `for_cnn` the image is first resized (smallest side = `target`, or
/// the proportional 256 analogue for corner crops) and `target x target`
/// crops are cut. Otherwise the same crop geometry is cut from the image at
/// its original resolution.
pub fn generate_samples(
    image: &RasterImage,
    kind: AugmentKind,
    target: usize,
    for_cnn: bool,
) -> Result<Vec<RasterImage>> {
    check_source(image.width(), image.height(), target)?;
    if for_cnn {
        let resized = image.resize_smallest_side(resize_side(kind, target))?;
        resized_boxes(resized.width(), resized.height(), kind, target)
            .iter()
            .map(|b| cut(&resized, b))
            .collect()
    } else {
        crop_boxes(image.width(), image.height(), kind, target)?
            .iter()
            .map(|b| cut(image, b))
            .collect()
    }
}

/// Random training crop placement: top-left corner and mirror flag.
pub fn random_crop_box(width: usize, height: usize, target: usize, seed: u64) -> Result<CropBox> {
    if target == 0 || target > width || target > height {
        return Err(Error::DegenerateImage {
            width,
            height,
            reason: "smaller than the crop target",
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rng.random_range(0..=width - target);
    let y = rng.random_range(0..=height - target);
    let mirrored = rng.random_bool(0.5);
    Ok(CropBox {
        x,
        y,
        width: target,
        height: target,
        mirrored,
    })
}

/// A uniformly placed `target x target` crop, mirrored with probability 1/2.
/// The caller resizes the image beforehand (smallest side 256 at full scale).
pub fn random_train_crop(image: &RasterImage, target: usize, seed: u64) -> Result<RasterImage> {
    let b = random_crop_box(image.width(), image.height(), target, seed)?;
    cut(image, &b)
}

/// Principal components of RGB pixel values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RgbPca {
    /// Rows are unit eigenvectors.
    pub basis: [[f64; 3]; 3],
    pub eigenvalues: [f64; 3],
}

/// Fits [`RgbPca`] on a seeded subsample of at most `cap` pixels drawn
/// uniformly across `images`.
pub fn fit_rgb_pca(images: &[RasterImage], cap: usize, seed: u64) -> Result<RgbPca> {
    let total: usize = images.iter().map(|i| i.width() * i.height()).sum();
    if total == 0 {
        return Err(Error::Empty("images for colour statistics"));
    }
    if images.iter().any(|i| i.space() != ColorSpace::Rgb) {
        return Err(Error::InvalidImage("colour statistics need RGB images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let take = cap.min(total).max(1);
    let mut pixels = Vec::with_capacity(take);
    let offsets: Vec<usize> = images
        .iter()
        .scan(0, |acc, i| {
            let start = *acc;
            *acc += i.width() * i.height();
            Some(start)
        })
        .collect();
    for s in 0..take {
        let flat = if take == total { s } else { rng.random_range(0..total) };
        let img_idx = offsets.partition_point(|&o| o <= flat) - 1;
        let img = &images[img_idx];
        let p = flat - offsets[img_idx];
        let (x, y) = (p % img.width(), p / img.width());
        pixels.push([img.get(x, y, 0), img.get(x, y, 1), img.get(x, y, 2)]);
    }
    let n = pixels.len() as f64;
    let mut mean = [0.0; 3];
    for p in &pixels {
        (0..3).for_each(|c| mean[c] += p[c] / n);
    }
    let mut cov = Matrix3::<f64>::zeros();
    for p in &pixels {
        for i in 0..3 {
            for j in 0..3 {
                cov[(i, j)] += (p[i] - mean[i]) * (p[j] - mean[j]) / n;
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut basis = [[0.0; 3]; 3];
    let mut eigenvalues = [0.0; 3];
    for (r, &idx) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(idx);
        basis[r] = [col[0], col[1], col[2]];
        eigenvalues[r] = eig.eigenvalues[idx].max(0.0);
    }
    Ok(RgbPca { basis, eigenvalues })
}

/// Per-image colour offset `sum_j c_j p_j` with `c_j ~ N(0, strength^2 * lambda_j)`.
pub fn jitter_offset(pca: &RgbPca, strength: f64, seed: u64) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut offset = [0.0; 3];
    for j in 0..3 {
        let z: f64 = StandardNormal.sample(&mut rng);
        let c = z * strength * pca.eigenvalues[j].sqrt();
        for (o, p) in offset.iter_mut().zip(pca.basis[j]) {
            *o += c * p;
        }
    }
    offset
}

/// Adds one random combination of the RGB principal components to every
/// pixel, clamping to `[0, 1]`.
pub fn colour_jitter(image: &RasterImage, pca: &RgbPca, strength: f64, seed: u64) -> Result<RasterImage> {
    if image.space() != ColorSpace::Rgb {
        return Err(Error::InvalidImage("colour jitter needs an RGB image".into()));
    }
    let offset = jitter_offset(pca, strength, seed);
    if offset == [0.0; 3] {
        return Ok(image.clone());
    }
    let data = image
        .data()
        .chunks_exact(3)
        .flat_map(|p| (0..3).map(move |c| (p[c] + offset[c]).clamp(0.0, 1.0)))
        .collect();
    RasterImage::new(image.width(), image.height(), ColorSpace::Rgb, data)
}

/// Combines the per-sample features of one image.
pub fn fuse(features: &[FeatureVector], mode: Fusion) -> Result<Vec<FeatureVector>> {
    let first = features.first().ok_or(Error::Empty("features to fuse"))?;
    let d = first.dim();
    if let Some(bad) = features.iter().find(|f| f.dim() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: bad.dim(),
        });
    }
    let tag = &first.provenance;
    let fused = match mode {
        Fusion::Samples => return Ok(features.to_vec()),
        Fusion::Sum => {
            let mut v = vec![0.0; d];
            for f in features {
                v.iter_mut().zip(&f.values).for_each(|(a, b)| *a += b);
            }
            FeatureVector::new(v, format!("{tag}|sum{}", features.len()))
        }
        Fusion::Max => {
            let mut v = first.values.clone();
            for f in &features[1..] {
                v.iter_mut().zip(&f.values).for_each(|(a, b)| *a = a.max(*b));
            }
            FeatureVector::new(v, format!("{tag}|max{}", features.len()))
        }
        Fusion::Stack => {
            let mut v = Vec::with_capacity(d * features.len());
            for f in features {
                v.extend_from_slice(&f.values);
            }
            FeatureVector::new(v, format!("{tag}|stack{}", features.len()))
        }
    };
    Ok(vec![fused.l2_normalised()])
}
