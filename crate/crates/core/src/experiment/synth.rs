//! Deterministic procedural textures for end-to-end checks.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;

use crate::corpus::{seeded_rng, DatasetManifest, SeededRng};
use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Procedural texture families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Texture {
    /// Sinusoidal grating; `angle` in degrees, `period` in pixels.
    Grating { angle: f64, period: f64 },
    /// Axis-aligned checkerboard with square cells of `cell` pixels.
    Checker { cell: f64 },
    /// White noise band-passed by a difference of box blurs with radii `inner < outer`.
    BandNoise { inner: f64, outer: f64 },
}

/// The class roster, in label order. At most eight classes are supported.
pub const CLASSES: [(&str, Texture); 8] = [
    ("grating-000", Texture::Grating { angle: 0.0, period: 10.0 }),
    ("grating-060", Texture::Grating { angle: 60.0, period: 14.0 }),
    ("checker-08", Texture::Checker { cell: 8.0 }),
    ("noise-fine", Texture::BandNoise { inner: 1.0, outer: 3.0 }),
    ("grating-120", Texture::Grating { angle: 120.0, period: 7.0 }),
    ("checker-16", Texture::Checker { cell: 16.0 }),
    ("noise-coarse", Texture::BandNoise { inner: 4.0, outer: 10.0 }),
    ("grating-090", Texture::Grating { angle: 90.0, period: 20.0 }),
];

/// Per-sample rendering parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleParams {
    /// Multiplies every length of the texture.
    pub scale: f64,
    /// Phase of gratings, in radians.
    pub phase: f64,
    /// Translation in pixels.
    pub shift: (f64, f64),
    /// Amplitude of additive uniform pixel noise.
    pub noise: f64,
}

impl Default for SampleParams {
    fn default() -> Self {
        Self {
            scale: 1.0,
            phase: 0.0,
            shift: (0.0, 0.0),
            noise: 0.0,
        }
    }
}

/// Knobs for [`make_synthetic`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    pub class_count: usize,
    pub samples_per_class: usize,
    pub size: usize,
    pub seed: u64,
    /// Random phase, shift and ±20% scale per sample. Without it every sample
    /// of a class differs only by pixel noise.
    pub jitter: bool,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            class_count: 4,
            samples_per_class: 10,
            size: 128,
            seed: 0,
            jitter: true,
        }
    }
}

const PIXEL_NOISE: f64 = 0.03;
const SCALE_JITTER: f64 = 0.2;

/// An in-memory labelled image set.
#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub labels: Vec<String>,
    /// `(class index, image)` in class-major order.
    pub images: Vec<(usize, GrayImage)>,
}

impl SyntheticSet {
    /// Writes `class/NNN.png` files and a `manifest.jsonl` with relative paths.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        let mut items = Vec::with_capacity(self.images.len());
        let mut counters = vec![0usize; self.labels.len()];
        for (class, img) in &self.images {
            let label = &self.labels[*class];
            let rel = format!("{label}/{:03}.png", counters[*class]);
            counters[*class] += 1;
            img.save_png(&dir.join(&rel))?;
            items.push((dir.join(&rel), label.clone()));
        }
        let manifest = DatasetManifest::from_entries(items)?;
        manifest.save(dir.join("manifest.jsonl"), Some(dir))?;
        Ok(manifest)
    }
}

/// Renders one sample of `texture`. Noise draws come from `rng`.
pub fn render(texture: Texture, params: &SampleParams, size: usize, rng: &mut SeededRng) -> GrayImage {
    let (sx, sy) = params.shift;
    let s = params.scale;
    let mut img = match texture {
        Texture::Grating { angle, period } => {
            let (sin, cos) = angle.to_radians().sin_cos();
            let p = period * s;
            GrayImage::from_fn(size, size, |x, y| {
                let u = (x as f64 + sx) * cos + (y as f64 + sy) * sin;
                0.5 + 0.4 * (2.0 * PI * u / p + params.phase).sin()
            })
        }
        Texture::Checker { cell } => {
            let c = cell * s;
            GrayImage::from_fn(size, size, |x, y| {
                let i = ((x as f64 + sx) / c).floor() as i64;
                let j = ((y as f64 + sy) / c).floor() as i64;
                if (i + j).rem_euclid(2) == 0 {
                    0.2
                } else {
                    0.8
                }
            })
        }
        Texture::BandNoise { inner, outer } => band_noise(size, inner * s, outer * s, rng),
    };
    if params.noise > 0.0 {
        let pixels: Vec<f64> = img
            .pixels()
            .iter()
            .map(|&v| (v + params.noise * (2.0 * rng.random::<f64>() - 1.0)).clamp(0.0, 1.0))
            .collect();
        img = GrayImage::new(size, size, pixels).expect("same dimensions");
    }
    img
}

fn band_noise(size: usize, inner: f64, outer: f64, rng: &mut SeededRng) -> GrayImage {
    let margin = (2.0 * outer).ceil() as usize + 1;
    let n = size + 2 * margin;
    let white: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>() - 0.5).collect();
    let fine = box_blur2(&white, n, inner.round().max(1.0) as usize);
    let coarse = box_blur2(&white, n, outer.round().max(1.0) as usize);
    let band: Vec<f64> = fine.iter().zip(&coarse).map(|(a, b)| a - b).collect();
    let crop: Vec<f64> = (0..size)
        .flat_map(|y| {
            let row = (y + margin) * n + margin;
            band[row..row + size].to_vec()
        })
        .collect();
    let mean = crop.iter().sum::<f64>() / crop.len() as f64;
    let sd = (crop.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / crop.len() as f64).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    let pixels = crop.iter().map(|v| (0.5 + 0.15 * (v - mean) / sd).clamp(0.0, 1.0)).collect();
    GrayImage::new(size, size, pixels).expect("square crop")
}

/// Two passes of a clamped separable box blur of radius `r`.
fn box_blur2(data: &[f64], n: usize, r: usize) -> Vec<f64> {
    let mut cur = data.to_vec();
    for _ in 0..2 {
        cur = blur_axis(&cur, n, r, true);
        cur = blur_axis(&cur, n, r, false);
    }
    cur
}

fn blur_axis(data: &[f64], n: usize, r: usize, horizontal: bool) -> Vec<f64> {
    let idx = |a: usize, b: usize| if horizontal { b * n + a } else { a * n + b };
    let mut out = vec![0.0; data.len()];
    for b in 0..n {
        let mut prefix = vec![0.0; n + 1];
        for a in 0..n {
            prefix[a + 1] = prefix[a] + data[idx(a, b)];
        }
        for a in 0..n {
            let lo = a.saturating_sub(r);
            let hi = (a + r + 1).min(n);
            out[idx(a, b)] = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
        }
    }
    out
}

/// Generates `samples_per_class` images for each of the first `class_count`
/// textures. Identical options always produce identical pixels.
pub fn make_synthetic(opts: &SynthOptions) -> Result<SyntheticSet> {
    if !(2..=CLASSES.len()).contains(&opts.class_count) {
        return Err(Error::validation(format!(
            "class count must be in 2..={}, got {}",
            CLASSES.len(),
            opts.class_count
        )));
    }
    if opts.samples_per_class == 0 {
        return Err(Error::validation("need at least one sample per class"));
    }
    if opts.size < 16 {
        return Err(Error::validation("synthetic images must be at least 16 pixels"));
    }
    let mut rng = seeded_rng(opts.seed);
    let mut images = Vec::with_capacity(opts.class_count * opts.samples_per_class);
    for (class, &(_, texture)) in CLASSES.iter().take(opts.class_count).enumerate() {
        for _ in 0..opts.samples_per_class {
            let params = if opts.jitter {
                SampleParams {
                    scale: 1.0 + SCALE_JITTER * (2.0 * rng.random::<f64>() - 1.0),
                    phase: 2.0 * PI * rng.random::<f64>(),
                    shift: (
                        opts.size as f64 * rng.random::<f64>(),
                        opts.size as f64 * rng.random::<f64>(),
                    ),
                    noise: PIXEL_NOISE,
                }
            } else {
                SampleParams {
                    noise: PIXEL_NOISE,
                    ..SampleParams::default()
                }
            };
            images.push((class, render(texture, &params, opts.size, &mut rng)));
        }
    }
    Ok(SyntheticSet {
        labels: CLASSES.iter().take(opts.class_count).map(|(l, _)| l.to_string()).collect(),
        images,
    })
}
