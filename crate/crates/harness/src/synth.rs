//! Seeded synthetic datasets: a two-class texture set and a ten-class shape
//! set, both small RGB images.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dvk_core::{ColorSpace, RasterImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imageio::save_png;
use crate::manifest::{DatasetManifest, ManifestEntry, Split};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Oriented stripes against a checkerboard.
    Textures,
    /// Ten filled or outlined shapes.
    Shapes,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "textures" => Ok(SynthKind::Textures),
            "shapes" => Ok(SynthKind::Shapes),
            _ => Err(Error::Config(format!("unknown synthetic dataset {s:?}"))),
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthKind::Textures => "textures",
            SynthKind::Shapes => "shapes",
        })
    }
}

pub const TEXTURE_CLASSES: [&str; 2] = ["stripes", "checks"];
pub const SHAPE_CLASSES: [&str; 10] = [
    "disk", "square", "triangle", "inverted_triangle", "plus", "cross", "ring", "diamond", "bars", "frame",
];

impl SynthKind {
    pub fn classes(self) -> &'static [&'static str] {
        match self {
            SynthKind::Textures => &TEXTURE_CLASSES,
            SynthKind::Shapes => &SHAPE_CLASSES,
        }
    }
}

fn image_seed(seed: u64, split: Split, index: usize) -> u64 {
    seed ^ (split as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

fn colour(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

fn texture(class: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<RasterImage> {
    let a = colour(rng, 0.0, 0.4);
    let b = colour(rng, 0.6, 1.0);
    let period = rng.random_range(6.0..14.0);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let (s, c) = angle.sin_cos();
    let phase = rng.random_range(0.0..1.0);
    let noise = rng.random_range(0.02..0.08);
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 * c + y as f64 * s) / period + phase;
            let v = (-(x as f64) * s + y as f64 * c) / period + phase;
            let t = if class == 0 {
                0.5 + 0.5 * (2.0 * std::f64::consts::PI * u).sin()
            } else {
                ((u.floor() + v.floor()).rem_euclid(2.0) == 0.0) as u8 as f64
            };
            pixels.push((t, rng.random_range(-noise..noise)));
        }
    }
    let mut it = pixels.into_iter();
    let mut cur = (0.0, 0.0);
    RasterImage::from_fn(size, size, ColorSpace::Rgb, |_, _, ch| {
        if ch == 0 {
            cur = it.next().expect("one value per pixel");
        }
        (a[ch] + (b[ch] - a[ch]) * cur.0 + cur.1).clamp(0.0, 1.0)
    })
    .map_err(Into::into)
}

/// Whether the point `(u, v)`, in shape coordinates with the shape
/// spanning roughly `[-1, 1]^2`, is inside shape `class`.
fn inside(class: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match class {
        0 => r <= 1.0,
        1 => u.abs() <= 0.85 && v.abs() <= 0.85,
        2 => v <= 0.8 && v >= -0.9 + 2.0 * u.abs() * 0.95,
        3 => v >= -0.8 && v <= 0.9 - 2.0 * u.abs() * 0.95,
        4 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        5 => {
            let (p, q) = ((u + v) / 2f64.sqrt(), (u - v) / 2f64.sqrt());
            (p.abs() <= 0.25 && q.abs() <= 1.0) || (q.abs() <= 0.25 && p.abs() <= 1.0)
        }
        6 => (0.6..=1.0).contains(&r),
        7 => u.abs() + v.abs() <= 1.0,
        8 => u.abs() <= 1.0 && ((v + 0.55).abs() <= 0.22 || (v - 0.55).abs() <= 0.22),
        9 => u.abs().max(v.abs()) <= 0.95 && u.abs().max(v.abs()) >= 0.65,
        _ => false,
    }
}

fn segment_distance(px: f64, py: f64, [ax, ay, bx, by]: [f64; 4]) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let t = (((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    ((px - ax - t * dx).powi(2) + (py - ay - t * dy).powi(2)).sqrt()
}

fn shape(class: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<RasterImage> {
    let (mut bg, mut fg) = (colour(rng, 0.0, 0.4), colour(rng, 0.6, 1.0));
    if rng.random_bool(0.5) {
        std::mem::swap(&mut bg, &mut fg);
    }
    let s = size as f64;
    let radius = rng.random_range(0.14 * s..0.32 * s);
    let (sin, cos) = rng.random_range(-0.26f64..0.26).sin_cos();
    let cx = s / 2.0 + rng.random_range(-0.12 * s..0.12 * s);
    let cy = s / 2.0 + rng.random_range(-0.12 * s..0.12 * s);
    // clutter strokes share the edge and corner statistics of the shapes;
    // some are drawn over the shape
    let strokes: Vec<([f64; 4], [f64; 3], bool)> = (0..rng.random_range(4..9))
        .map(|_| {
            let (x, y) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
            let len = rng.random_range(0.1 * s..0.3 * s);
            let a = rng.random_range(0.0..std::f64::consts::PI);
            ([x, y, x + len * a.cos(), y + len * a.sin()], colour(rng, 0.0, 1.0), rng.random_bool(0.3))
        })
        .collect();
    let noise = 0.08;
    let mut noise_vals: Vec<f64> = (0..size * size * 3).map(|_| rng.random_range(-noise..noise)).collect();
    noise_vals.reverse();
    RasterImage::from_fn(size, size, ColorSpace::Rgb, |x, y, ch| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let stroke = |front: bool, mut v: f64| {
            for (seg, c, over) in &strokes {
                if *over == front {
                    let w = (1.5 - segment_distance(px, py, *seg)).clamp(0.0, 1.0);
                    v += (c[ch] - v) * w;
                }
            }
            v
        };
        let base = stroke(false, bg[ch]);
        // 2x2 supersampling softens the edges
        let mut cover = 0.0;
        for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
            let (dx, dy) = (x as f64 + ox - cx, y as f64 + oy - cy);
            let u = (cos * dx + sin * dy) / radius;
            let v = (-sin * dx + cos * dy) / radius;
            cover += inside(class, u, v) as u8 as f64 / 4.0;
        }
        let n = noise_vals.pop().expect("one value per sample");
        (stroke(true, base + (fg[ch] - base) * cover) + n).clamp(0.0, 1.0)
    })
    .map_err(Into::into)
}

/// Renders one image of `class`; the same arguments give the same image.
pub fn render(kind: SynthKind, class: usize, size: usize, seed: u64) -> Result<RasterImage> {
    if class >= kind.classes().len() {
        return Err(Error::Config(format!("class {class} out of range for {kind}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        SynthKind::Textures => texture(class, size, &mut rng),
        SynthKind::Shapes => shape(class, size, &mut rng),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthOptions {
    pub kind: SynthKind,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub size: usize,
    pub seed: u64,
}

impl SynthOptions {
    pub fn new(kind: SynthKind, train: usize, test: usize, seed: u64) -> Self {
        Self {
            kind,
            train,
            val: 0,
            test,
            size: 64,
            seed,
        }
    }
}

/// Writes the images and `manifest.tsv` under `dir`; classes cycle with the
/// image index so every split is balanced. Returns the manifest path.
pub fn generate(opts: &SynthOptions, dir: &Path) -> Result<PathBuf> {
    let classes = opts.kind.classes();
    let mut entries = Vec::new();
    for (split, n) in [(Split::Train, opts.train), (Split::Val, opts.val), (Split::Test, opts.test)] {
        let rendered: Vec<Result<ManifestEntry>> = {
            use rayon::prelude::*;
            (0..n)
                .into_par_iter()
                .map(|i| {
                    let class = i % classes.len();
                    let img = render(opts.kind, class, opts.size, image_seed(opts.seed, split, i))?;
                    let rel = format!("images/{split}_{i:05}.png");
                    save_png(&img, &dir.join(&rel))?;
                    Ok(ManifestEntry {
                        path: rel,
                        split,
                        labels: vec![class],
                        difficult: vec![false],
                        line: 0,
                    })
                })
                .collect()
        };
        for e in rendered {
            entries.push(e?);
        }
    }
    let manifest = DatasetManifest {
        classes: classes.iter().map(|c| c.to_string()).collect(),
        entries,
        root: dir.to_path_buf(),
    };
    let path = dir.join("manifest.tsv");
    std::fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic() {
        for kind in [SynthKind::Textures, SynthKind::Shapes] {
            for c in 0..kind.classes().len() {
                let a = render(kind, c, 32, 7).unwrap();
                assert_eq!(a, render(kind, c, 32, 7).unwrap());
                assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn shapes_differ_between_classes() {
        let imgs: Vec<_> = (0..10).map(|c| render(SynthKind::Shapes, c, 32, 3).unwrap()).collect();
        for i in 0..10 {
            for j in i + 1..10 {
                assert_ne!(imgs[i], imgs[j]);
            }
        }
    }
}
