//! Image-backed training data for the networks.

use dvk_cnn::train::SampleSource;
use dvk_cnn::Tensor;
use dvk_core::augment::{crop_flip_resize_side, generate_samples, random_train_crop, AugmentKind};
use dvk_core::RasterImage;
use rayon::prelude::*;

use crate::Result;

/// Per-channel mean pixel value over a set of RGB images.
pub fn channel_means(images: &[&RasterImage]) -> Vec<f64> {
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for img in images {
        for px in img.data().chunks_exact(3) {
            sum.iter_mut().zip(px).for_each(|(s, v)| *s += v);
        }
        n += img.width() * img.height();
    }
    sum.iter().map(|s| s / n.max(1) as f64).collect()
}

/// Training samples from images. With `augment`, each draw is a random
/// mirrored-or-not crop of the image resized to the crop/flip side;
/// otherwise the centre crop of the image resized to the input side.
pub struct ImageSource {
    images: Vec<RasterImage>,
    labels: Vec<Vec<usize>>,
    mean: Vec<f64>,
    side: usize,
    augment: bool,
    fixed: Vec<Tensor<f32>>,
}

impl ImageSource {
    pub fn new(images: &[&RasterImage], labels: Vec<Vec<usize>>, side: usize, mean: Vec<f64>, augment: bool) -> Result<Self> {
        let resize = if augment { crop_flip_resize_side(side) } else { side };
        let images: Vec<RasterImage> =
            images.par_iter().map(|i| i.resize_smallest_side(resize)).collect::<dvk_core::Result<_>>()?;
        let fixed = if augment {
            Vec::new()
        } else {
            images
                .par_iter()
                .map(|img| {
                    let centre = generate_samples(img, AugmentKind::None, side, true)?.remove(0);
                    Ok(Tensor::from_image(&centre, &mean)?)
                })
                .collect::<Result<_>>()?
        };
        Ok(Self {
            images,
            labels,
            mean,
            side,
            augment,
            fixed,
        })
    }
}

impl SampleSource<f32> for ImageSource {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn labels(&self, index: usize) -> &[usize] {
        &self.labels[index]
    }

    fn sample(&self, index: usize, seed: u64) -> dvk_cnn::Result<Tensor<f32>> {
        if !self.augment {
            return Ok(self.fixed[index].clone());
        }
        let crop = random_train_crop(&self.images[index], self.side, seed ^ (index as u64).wrapping_mul(0x9e37_79b9))?;
        Tensor::from_image(&crop, &self.mean)
    }
}
