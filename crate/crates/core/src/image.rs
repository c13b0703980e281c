//! In-memory raster images with intensities in `[0, 1]`.

use crate::{Error, Result};

/// Interpretation of the channels of a [`RasterImage`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ColorSpace {
    Gray,
    Rgb,
    /// CIE Lab (D65), stored as `L/100`, `(a+128)/255`, `(b+128)/255` so that
    /// every channel stays inside `[0, 1]`.
    Lab,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Gray => 1,
            ColorSpace::Rgb | ColorSpace::Lab => 3,
        }
    }
}

/// Row-major image with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    space: ColorSpace,
    data: Vec<f64>,
}

/// Rec.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

impl RasterImage {
    pub fn new(width: usize, height: usize, space: ColorSpace, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "extent must be positive, got {width}x{height}"
            )));
        }
        let expected = width * height * space.channels();
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            space,
            data,
        })
    }

    /// Builds an image by evaluating `f(x, y, channel)` for every sample.
    pub fn from_fn(
        width: usize,
        height: usize,
        space: ColorSpace,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let c = space.channels();
        let mut data = Vec::with_capacity(width * height * c);
        for y in 0..height {
            for x in 0..width {
                for ch in 0..c {
                    data.push(f(x, y, ch));
                }
            }
        }
        Self::new(width, height, space, data)
    }

    pub fn filled(width: usize, height: usize, space: ColorSpace, value: f64) -> Result<Self> {
        Self::new(
            width,
            height,
            space,
            vec![value; width * height * space.channels()],
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.space.channels()
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels() + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let ch = self.channels();
        self.data[(y * self.width + x) * ch + c] = v;
    }

    /// Copies one channel out as a dense `height x width` plane.
    pub fn plane(&self, c: usize) -> Vec<f64> {
        let ch = self.channels();
        self.data.iter().skip(c).step_by(ch).copied().collect()
    }

    /// Rec.601 luminance. Grayscale input is returned unchanged.
    pub fn to_grayscale(&self) -> Result<RasterImage> {
        match self.space {
            ColorSpace::Gray => Ok(self.clone()),
            ColorSpace::Lab => Err(Error::InvalidImage(
                "grayscale conversion expects RGB input, got Lab".into(),
            )),
            ColorSpace::Rgb => {
                let data = self
                    .data
                    .chunks_exact(3)
                    .map(|p| {
                        LUMA_WEIGHTS[0] * p[0] + LUMA_WEIGHTS[1] * p[1] + LUMA_WEIGHTS[2] * p[2]
                    })
                    .collect();
                RasterImage::new(self.width, self.height, ColorSpace::Gray, data)
            }
        }
    }

    /// sRGB to CIE Lab under the D65 white point.
    pub fn to_lab(&self) -> Result<RasterImage> {
        match self.space {
            ColorSpace::Lab => Ok(self.clone()),
            ColorSpace::Gray => Err(Error::InvalidImage(
                "Lab conversion expects RGB input, got grayscale".into(),
            )),
            ColorSpace::Rgb => {
                let mut data = Vec::with_capacity(self.data.len());
                for p in self.data.chunks_exact(3) {
                    let [l, a, b] = srgb_to_lab([p[0], p[1], p[2]]);
                    data.push(l / 100.0);
                    data.push((a + 128.0) / 255.0);
                    data.push((b + 128.0) / 255.0);
                }
                RasterImage::new(self.width, self.height, ColorSpace::Lab, data)
            }
        }
    }

    /// Bilinear resampling with pixel-centre alignment.
    pub fn resize(&self, new_width: usize, new_height: usize) -> Result<RasterImage> {
        if new_width == 0 || new_height == 0 {
            return Err(Error::InvalidArgument(format!(
                "resize target must be positive, got {new_width}x{new_height}"
            )));
        }
        if new_width == self.width && new_height == self.height {
            return Ok(self.clone());
        }
        let ch = self.channels();
        let sx = self.width as f64 / new_width as f64;
        let sy = self.height as f64 / new_height as f64;
        let taps = |dst: usize, scale: f64, extent: usize| -> (usize, usize, f64) {
            let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (extent - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(extent - 1);
            (i0, i1, src - i0 as f64)
        };
        let xs: Vec<_> = (0..new_width).map(|x| taps(x, sx, self.width)).collect();
        let mut data = Vec::with_capacity(new_width * new_height * ch);
        for y in 0..new_height {
            let (y0, y1, fy) = taps(y, sy, self.height);
            for &(x0, x1, fx) in &xs {
                for c in 0..ch {
                    let top = self.get(x0, y0, c) * (1.0 - fx) + self.get(x1, y0, c) * fx;
                    let bottom = self.get(x0, y1, c) * (1.0 - fx) + self.get(x1, y1, c) * fx;
                    data.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        RasterImage::new(new_width, new_height, self.space, data)
    }

    /// Rescales so that the smaller side equals `side`, keeping the aspect ratio.
    pub fn resize_smallest_side(&self, side: usize) -> Result<RasterImage> {
        let (w, h) = smallest_side_extent(self.width, self.height, side);
        self.resize(w, h)
    }

    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<RasterImage> {
        if width == 0 || height == 0 || x + width > self.width || y + height > self.height {
            return Err(Error::InvalidArgument(format!(
                "crop {width}x{height}+{x}+{y} outside {}x{}",
                self.width, self.height
            )));
        }
        let ch = self.channels();
        let mut data = Vec::with_capacity(width * height * ch);
        for row in y..y + height {
            let start = (row * self.width + x) * ch;
            data.extend_from_slice(&self.data[start..start + width * ch]);
        }
        RasterImage::new(width, height, self.space, data)
    }

    /// Mirror about the vertical axis.
    pub fn mirror(&self) -> RasterImage {
        let ch = self.channels();
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks_exact(self.width * ch) {
            for px in row.chunks_exact(ch).rev() {
                data.extend_from_slice(px);
            }
        }
        RasterImage {
            width: self.width,
            height: self.height,
            space: self.space,
            data,
        }
    }
}

/// Output extent of [`RasterImage::resize_smallest_side`].
pub fn smallest_side_extent(width: usize, height: usize, side: usize) -> (usize, usize) {
    if width <= height {
        let h = ((height as f64 * side as f64 / width as f64).round() as usize).max(side);
        (side, h)
    } else {
        let w = ((width as f64 * side as f64 / height as f64).round() as usize).max(side);
        (w, side)
    }
}

fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    fn linearise(c: f64) -> f64 {
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    }
    fn f(t: f64) -> f64 {
        const DELTA: f64 = 6.0 / 29.0;
        if t > DELTA * DELTA * DELTA {
            t.cbrt()
        } else {
            t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
        }
    }
    let [r, g, b] = rgb.map(|c| linearise(c.clamp(0.0, 1.0)));
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    // D65 reference white
    let (xn, yn, zn) = (0.950_47, 1.0, 1.088_83);
    let (fx, fy, fz) = (f(x / xn), f(y / yn), f(z / zn));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rgb(w: usize, h: usize, p: [f64; 3]) -> RasterImage {
        RasterImage::from_fn(w, h, ColorSpace::Rgb, |_, _, c| p[c]).unwrap()
    }

    #[test]
    fn grayscale_of_primaries() {
        let white = rgb(3, 2, [1.0, 1.0, 1.0]).to_grayscale().unwrap();
        assert!(white.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let black = rgb(3, 2, [0.0, 0.0, 0.0]).to_grayscale().unwrap();
        assert!(black.data().iter().all(|&v| v == 0.0));
        let red = rgb(1, 1, [1.0, 0.0, 0.0]).to_grayscale().unwrap();
        assert_eq!(red.data(), &[0.299]);
    }

    #[test]
    fn grayscale_is_identity_on_gray() {
        let g = RasterImage::from_fn(4, 3, ColorSpace::Gray, |x, y, _| (x + y) as f64 / 10.0)
            .unwrap();
        assert_eq!(g.to_grayscale().unwrap(), g);
    }

    #[test]
    fn lab_reference_values() {
        let white = rgb(1, 1, [1.0, 1.0, 1.0]).to_lab().unwrap();
        assert!((white.get(0, 0, 0) - 1.0).abs() < 1e-4);
        assert!((white.get(0, 0, 1) - 128.0 / 255.0).abs() < 1e-4);
        assert!((white.get(0, 0, 2) - 128.0 / 255.0).abs() < 1e-4);
        // sRGB red is roughly L=53.24, a=80.09, b=67.20
        let red = rgb(1, 1, [1.0, 0.0, 0.0]).to_lab().unwrap();
        assert!((red.get(0, 0, 0) * 100.0 - 53.24).abs() < 0.05);
        assert!((red.get(0, 0, 1) * 255.0 - 128.0 - 80.09).abs() < 0.05);
        assert!((red.get(0, 0, 2) * 255.0 - 128.0 - 67.20).abs() < 0.05);
    }

    #[test]
    fn mirror_is_involution() {
        let img = RasterImage::from_fn(5, 3, ColorSpace::Rgb, |x, y, c| {
            (x * 7 + y * 3 + c) as f64 / 50.0
        })
        .unwrap();
        let m = img.mirror();
        assert_eq!(m.get(0, 1, 2), img.get(4, 1, 2));
        assert_eq!(m.mirror(), img);
    }

    #[test]
    fn resize_preserves_constants_and_identity() {
        let c = rgb(7, 5, [0.25, 0.5, 0.75]).resize(13, 3).unwrap();
        assert!(c.data().chunks(3).all(|p| (p[0] - 0.25).abs() < 1e-15
            && (p[1] - 0.5).abs() < 1e-15
            && (p[2] - 0.75).abs() < 1e-15));
        let img = RasterImage::from_fn(4, 4, ColorSpace::Gray, |x, y, _| (x * y) as f64).unwrap();
        assert_eq!(img.resize(4, 4).unwrap(), img);
    }

    #[test]
    fn smallest_side_rescale() {
        assert_eq!(smallest_side_extent(512, 256, 128), (256, 128));
        assert_eq!(smallest_side_extent(300, 400, 224), (224, 299));
    }

    #[test]
    fn rejects_bad_extent() {
        assert!(RasterImage::new(0, 3, ColorSpace::Gray, vec![]).is_err());
        assert!(RasterImage::new(2, 2, ColorSpace::Rgb, vec![0.0; 4]).is_err());
        let img = rgb(4, 4, [0.0; 3]);
        assert!(img.crop(2, 2, 3, 1).is_err());
    }
}
