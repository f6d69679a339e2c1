//! Dense, single-scale, upright SIFT-style descriptors.
//!
//! Gradients are centered differences with replicated borders. Each patch is
//! split into `spatial_bins`x`spatial_bins` cells; every pixel votes its
//! gradient magnitude into the neighbouring cells and orientation bins with
//! trilinear weights. The histogram is normalized, clamped at 0.2 and
//! renormalized. Flat patches give the zero vector.

use std::f64::consts::TAU;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, Kind, Reader, Writer};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::image::GrayImage;

/// Clamp applied to normalized histogram entries before renormalization.
pub const CLAMP: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    pub step: usize,
    pub patch_size: usize,
    pub spatial_bins: usize,
    pub orientation_bins: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            step: 8,
            patch_size: 16,
            spatial_bins: 4,
            orientation_bins: 8,
        }
    }
}

impl GridSpec {
    pub fn dim(&self) -> usize {
        self.spatial_bins * self.spatial_bins * self.orientation_bins
    }

    pub fn validate(&self) -> Result<()> {
        if self.step == 0 {
            return Err(Error::validation("grid step must be at least 1"));
        }
        if self.spatial_bins == 0 || self.orientation_bins == 0 {
            return Err(Error::validation("descriptor bin counts must be positive"));
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(self.spatial_bins) {
            return Err(Error::validation(format!(
                "patch size {} not divisible by {} spatial bins",
                self.patch_size, self.spatial_bins
            )));
        }
        Ok(())
    }
}

/// Patch centers on the dense grid, row-major. Centers start at
/// `patch_size / 2` and advance by `step`; only fully contained patches count.
pub fn dense_grid(dims: (usize, usize), spec: &GridSpec) -> Result<Vec<(usize, usize)>> {
    spec.validate()?;
    let (w, h) = dims;
    if w < spec.patch_size || h < spec.patch_size {
        return Err(Error::EmptyGrid {
            width: w,
            height: h,
            patch: spec.patch_size,
        });
    }
    let half = spec.patch_size / 2;
    let nx = (w - spec.patch_size) / spec.step + 1;
    let ny = (h - spec.patch_size) / spec.step + 1;
    let mut centers = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            centers.push((half + i * spec.step, half + j * spec.step));
        }
    }
    Ok(centers)
}

/// Gradient magnitude and orientation (in bin units) at one pixel.
#[inline]
fn gradient_at(img: &GrayImage, x: usize, y: usize, orientation_bins: usize) -> (f64, f64) {
    let (w, h) = img.dims();
    let gx = 0.5 * (img.get((x + 1).min(w - 1), y) - img.get(x.saturating_sub(1), y));
    let gy = 0.5 * (img.get(x, (y + 1).min(h - 1)) - img.get(x, y.saturating_sub(1)));
    let mag = gx.hypot(gy);
    let mut theta = gy.atan2(gx);
    if theta < 0.0 {
        theta += TAU;
    }
    let mut o = theta * orientation_bins as f64 / TAU;
    if o >= orientation_bins as f64 {
        o -= orientation_bins as f64;
    }
    (mag, o)
}

struct GradientField {
    width: usize,
    mag: Vec<f64>,
    ori: Vec<f64>,
}

impl GradientField {
    fn new(img: &GrayImage, orientation_bins: usize) -> Self {
        let (w, h) = img.dims();
        let mut mag = Vec::with_capacity(w * h);
        let mut ori = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (m, o) = gradient_at(img, x, y, orientation_bins);
                mag.push(m);
                ori.push(o);
            }
        }
        Self { width: w, mag, ori }
    }

    #[inline]
    fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.mag[i], self.ori[i])
    }
}

/// Builds the normalized histogram for the patch with top-left corner `origin`.
fn histogram(
    origin: (usize, usize),
    spec: &GridSpec,
    grad: impl Fn(usize, usize) -> (f64, f64),
) -> Vec<f64> {
    let sb = spec.spatial_bins;
    let ob = spec.orientation_bins;
    let cell = (spec.patch_size / sb) as f64;
    let mut hist = vec![0.0; spec.dim()];
    for py in 0..spec.patch_size {
        let v = (py as f64 + 0.5) / cell - 0.5;
        let vy0 = v.floor();
        let wy1 = v - vy0;
        for px in 0..spec.patch_size {
            let (mag, o) = grad(origin.0 + px, origin.1 + py);
            if mag == 0.0 {
                continue;
            }
            let u = (px as f64 + 0.5) / cell - 0.5;
            let ux0 = u.floor();
            let wx1 = u - ux0;
            let o0f = o.floor();
            let wo1 = o - o0f;
            let o0 = (o0f as usize) % ob;
            let o1 = (o0 + 1) % ob;
            for (dy, wy) in [(0isize, 1.0 - wy1), (1, wy1)] {
                let cy = vy0 as isize + dy;
                if cy < 0 || cy >= sb as isize || wy == 0.0 {
                    continue;
                }
                for (dx, wx) in [(0isize, 1.0 - wx1), (1, wx1)] {
                    let cx = ux0 as isize + dx;
                    if cx < 0 || cx >= sb as isize || wx == 0.0 {
                        continue;
                    }
                    let base = (cy as usize * sb + cx as usize) * ob;
                    let w = mag * wy * wx;
                    hist[base + o0] += w * (1.0 - wo1);
                    hist[base + o1] += w * wo1;
                }
            }
        }
    }
    normalize_clamped(&mut hist);
    hist
}

fn normalize_clamped(hist: &mut [f64]) {
    let norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return;
    }
    for v in hist.iter_mut() {
        *v = (*v / norm).min(CLAMP);
    }
    let norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in hist.iter_mut() {
        *v /= norm;
    }
}

fn patch_origin(
    dims: (usize, usize),
    center: (usize, usize),
    spec: &GridSpec,
) -> Result<(usize, usize)> {
    let half = spec.patch_size / 2;
    let (w, h) = dims;
    if center.0 < half
        || center.1 < half
        || center.0 - half + spec.patch_size > w
        || center.1 - half + spec.patch_size > h
    {
        return Err(Error::validation(format!(
            "patch at {:?} of size {} leaves the {}x{} image",
            center, spec.patch_size, w, h
        )));
    }
    Ok((center.0 - half, center.1 - half))
}

/// Descriptor of the patch centered at `center`.
pub fn extract_descriptor(
    img: &GrayImage,
    center: (usize, usize),
    spec: &GridSpec,
) -> Result<Vec<f64>> {
    spec.validate()?;
    let origin = patch_origin(img.dims(), center, spec)?;
    Ok(histogram(origin, spec, |x, y| {
        gradient_at(img, x, y, spec.orientation_bins)
    }))
}

/// Located descriptors of one image, stored as `f32` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseDescriptorSet {
    width: usize,
    height: usize,
    dim: usize,
    locations: Vec<(usize, usize)>,
    data: Vec<f32>,
}

impl DenseDescriptorSet {
    pub fn new(
        dims: (usize, usize),
        dim: usize,
        locations: Vec<(usize, usize)>,
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != locations.len() * dim {
            return Err(Error::validation(format!(
                "{} values for {} descriptors of dimension {dim}",
                data.len(),
                locations.len()
            )));
        }
        if let Some(l) = locations.iter().find(|l| l.0 >= dims.0 || l.1 >= dims.1) {
            return Err(Error::validation(format!(
                "location {l:?} outside {}x{} image",
                dims.0, dims.1
            )));
        }
        Ok(Self {
            width: dims.0,
            height: dims.1,
            dim,
            locations,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn locations(&self) -> &[(usize, usize)] {
        &self.locations
    }

    pub fn descriptor(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(Kind::Descriptors);
        w.u64(self.len() as u64)
            .u64(self.dim as u64)
            .u64(self.width as u64)
            .u64(self.height as u64);
        let locs: Vec<u32> = self
            .locations
            .iter()
            .flat_map(|&(x, y)| [x as u32, y as u32])
            .collect();
        w.u32s(&locs).f32s(&self.data);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, Kind::Descriptors)?;
        let n = r.len()?;
        let dim = r.len()?;
        let width = r.len()?;
        let height = r.len()?;
        let locs = r.u32s(n * 2)?;
        let data = r.f32s(n * dim)?;
        r.finish()?;
        let locations = locs
            .chunks_exact(2)
            .map(|c| (c[0] as usize, c[1] as usize))
            .collect();
        Self::new((width, height), dim, locations, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::read_file(path)?)
    }
}

/// Extracts descriptors at every dense grid position, in grid order.
pub fn extract_all(img: &GrayImage, spec: &GridSpec) -> Result<DenseDescriptorSet> {
    extract_all_with(img, spec, Exec::default())
}

pub fn extract_all_with(img: &GrayImage, spec: &GridSpec, exec: Exec) -> Result<DenseDescriptorSet> {
    let centers = dense_grid(img.dims(), spec)?;
    let field = GradientField::new(img, spec.orientation_bins);
    let half = spec.patch_size / 2;
    let rows = exec.map(centers.len(), |i| {
        let (cx, cy) = centers[i];
        histogram((cx - half, cy - half), spec, |x, y| field.at(x, y))
    });
    let data = rows.into_iter().flatten().map(|v| v as f32).collect();
    DenseDescriptorSet::new(img.dims(), spec.dim(), centers, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn noise(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        GrayImage::from_fn(w, h, |_, _| rng.random::<f64>())
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn grid_counts() {
        let spec = GridSpec::default();
        assert_eq!(spec.dim(), 128);
        let g = dense_grid((128, 128), &spec).unwrap();
        assert_eq!(g.len(), 225);
        assert_eq!(g[0], (8, 8));
        assert_eq!(g[224], (120, 120));
        assert_eq!(dense_grid((16, 16), &spec).unwrap(), vec![(8, 8)]);
        assert!(matches!(
            dense_grid((15, 15), &spec),
            Err(Error::EmptyGrid { .. })
        ));
    }

    #[test]
    fn grid_spec_validation() {
        let bad = GridSpec {
            patch_size: 18,
            ..GridSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = GridSpec {
            step: 0,
            ..GridSpec::default()
        };
        assert!(dense_grid((64, 64), &bad).is_err());
    }

    #[test]
    fn constant_patch_is_zero() {
        let img = GrayImage::from_fn(32, 32, |_, _| 0.4);
        let d = extract_descriptor(&img, (16, 16), &GridSpec::default()).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
        let set = extract_all(&img, &GridSpec::default()).unwrap();
        assert!(set.iter().all(|d| d.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn textured_patch_has_unit_norm() {
        let img = noise(48, 48, 3);
        let spec = GridSpec::default();
        for c in dense_grid(img.dims(), &spec).unwrap() {
            let d = extract_descriptor(&img, c, &spec).unwrap();
            assert!((norm(&d) - 1.0).abs() < 1e-6);
            assert!(d.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn clamping_caps_dominant_bins_before_renormalization() {
        let mut h = vec![1.0; 40];
        h[0] = 100.0;
        normalize_clamped(&mut h);
        let first = 1.0 / (100.0f64 * 100.0 + 39.0).sqrt();
        // dominant bin was clamped to 0.2, the rest kept their normalized value
        assert!((h[0] / h[1] - CLAMP / first).abs() < 1e-9);
        assert!((norm(&h) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_bounds_patch_rejected() {
        let img = noise(32, 32, 1);
        assert!(extract_descriptor(&img, (4, 16), &GridSpec::default()).is_err());
        assert!(extract_descriptor(&img, (16, 25), &GridSpec::default()).is_err());
    }

    /// Rotating the image by 90 degrees permutes spatial cells and shifts
    /// orientation bins by a quarter turn.
    #[test]
    fn quarter_turn_permutes_bins() {
        let spec = GridSpec::default();
        let n = 16;
        let step_edge = GrayImage::from_fn(n, n, |x, _| if x < 8 { 0.1 } else { 0.9 });
        let textured = noise(n, n, 7);
        for img in [step_edge, textured] {
            // rotated(x, y) = img(y, n - 1 - x)
            let rotated = GrayImage::from_fn(n, n, |x, y| img.get(y, n - 1 - x));
            let a = extract_descriptor(&img, (8, 8), &spec).unwrap();
            let b = extract_descriptor(&rotated, (8, 8), &spec).unwrap();
            let (sb, ob) = (spec.spatial_bins, spec.orientation_bins);
            for iy in 0..sb {
                for ix in 0..sb {
                    for o in 0..ob {
                        let rb = b[(iy * sb + ix) * ob + (o + ob / 4) % ob];
                        let ra = a[((sb - 1 - ix) * sb + iy) * ob + o];
                        assert!((ra - rb).abs() < 1e-9, "cell ({ix},{iy}) bin {o}: {ra} vs {rb}");
                    }
                }
            }
        }
    }

    #[test]
    fn step_shift_moves_descriptors_to_neighbours() {
        let spec = GridSpec::default();
        let img = noise(96, 96, 11);
        let shifted = GrayImage::from_fn(96, 96, |x, y| img.get(x.saturating_sub(spec.step), y));
        let a = extract_all(&img, &spec).unwrap();
        let b = extract_all(&shifted, &spec).unwrap();
        let nx = (96 - spec.patch_size) / spec.step + 1;
        for j in 0..nx {
            for i in 2..nx - 1 {
                let da = a.descriptor(j * nx + i - 1);
                let db = b.descriptor(j * nx + i);
                for (x, y) in da.iter().zip(db) {
                    assert!((x - y).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn extract_all_matches_single_extraction() {
        let spec = GridSpec::default();
        let img = noise(64, 40, 5);
        let set = extract_all(&img, &spec).unwrap();
        assert_eq!(set.len(), dense_grid(img.dims(), &spec).unwrap().len());
        for (i, &c) in set.locations().iter().enumerate() {
            let d = extract_descriptor(&img, c, &spec).unwrap();
            for (x, y) in d.iter().zip(set.descriptor(i)) {
                assert_eq!(*x as f32, *y);
            }
        }
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let spec = GridSpec::default();
        let img = noise(128, 128, 2);
        assert_eq!(
            extract_all_with(&img, &spec, Exec::Sequential).unwrap(),
            extract_all_with(&img, &spec, Exec::Parallel).unwrap()
        );
    }

    #[test]
    fn default_extraction_on_128() {
        let img = noise(128, 128, 9);
        let set = extract_all(&img, &GridSpec::default()).unwrap();
        assert_eq!(set.len(), 225);
        assert_eq!(set.locations().len(), 225);
        assert_eq!(set.dim(), 128);
    }

    #[test]
    fn container_round_trip() {
        let img = noise(40, 40, 4);
        let set = extract_all(&img, &GridSpec::default()).unwrap();
        let back = DenseDescriptorSet::from_bytes(&set.to_bytes()).unwrap();
        assert_eq!(back, set);
        let bytes = set.to_bytes();
        assert!(DenseDescriptorSet::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn affine_intensity_invariance(seed: u64, a in 0.05f64..1.0, b in 0.0f64..1.0) {
                let img = noise(32, 32, seed);
                let b = b * (1.0 - a);
                let mapped = GrayImage::from_fn(32, 32, |x, y| a * img.get(x, y) + b);
                let spec = GridSpec::default();
                let d0 = extract_descriptor(&img, (16, 16), &spec).unwrap();
                let d1 = extract_descriptor(&mapped, (16, 16), &spec).unwrap();
                for (x, y) in d0.iter().zip(&d1) {
                    prop_assert!((x - y).abs() < 1e-5);
                }
            }

            #[test]
            fn entries_nonnegative_with_unit_norm(seed: u64) {
                let img = noise(32, 32, seed);
                let d = extract_descriptor(&img, (16, 16), &GridSpec::default()).unwrap();
                prop_assert!(d.iter().all(|&v| (0.0..=1.0).contains(&v)));
                prop_assert!((norm(&d) - 1.0).abs() < 1e-9);
            }
        }
    }
}
