//! PNG reading and writing for [`RasterImage`].

use std::path::Path;

use dvk_core::{ColorSpace, RasterImage};

use crate::{Error, Result};

/// Loads any 8/16-bit PNG as RGB in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<RasterImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Ok(RasterImage::new(w as usize, h as usize, ColorSpace::Rgb, data)?)
}

/// Writes an RGB or gray image as 8-bit PNG.
pub fn save_png(img: &RasterImage, path: &Path) -> Result<()> {
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let (w, h) = (img.width() as u32, img.height() as u32);
    let err = |e: image::ImageError| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    match img.space() {
        ColorSpace::Gray => {
            let buf = image::GrayImage::from_raw(w, h, img.data().iter().map(|&v| q(v)).collect()).expect("sized");
            buf.save(path).map_err(err)
        }
        ColorSpace::Rgb => {
            let buf = image::RgbImage::from_raw(w, h, img.data().iter().map(|&v| q(v)).collect()).expect("sized");
            buf.save(path).map_err(err)
        }
        ColorSpace::Lab => Err(Error::Image {
            path: path.to_path_buf(),
            message: "Lab images cannot be written as PNG".into(),
        }),
    }
}
