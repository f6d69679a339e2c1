//! Multi-level grid partitions with overlapping shift patterns, max pooling,
//! and the orderless image descriptor.
//!
//! A level with grid size `g` and offset `(dx, dy)` (fractions of a cell)
//! contributes the `g`x`g` grid shifted by `(dx·w/g, dy·h/g)` pixels. Shifted
//! cells are clipped at the image border and kept. Membership is half-open on
//! the right and bottom edges, closed on the image boundary.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::container::{self, Kind, Reader, Writer};
use crate::descriptor::{dense_grid, GridSpec};
use crate::error::{Error, Result};
use crate::sparse::CodeMatrix;

/// The four shift patterns, in order: none, half a cell right, half a cell
/// down, both.
pub const DEFAULT_OFFSETS: [[f64; 2]; 4] = [[0.0, 0.0], [0.5, 0.0], [0.0, 0.5], [0.5, 0.5]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub grid: usize,
    pub offsets: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidConfig {
    pub levels: Vec<LevelSpec>,
}

impl PyramidConfig {
    /// Every grid size gets the first `patterns` entries of [`DEFAULT_OFFSETS`].
    pub fn uniform(grids: &[usize], patterns: usize) -> Result<Self> {
        if patterns == 0 || patterns > DEFAULT_OFFSETS.len() {
            return Err(Error::validation(format!(
                "pattern count must be in 1..={}, got {patterns}",
                DEFAULT_OFFSETS.len()
            )));
        }
        let cfg = Self {
            levels: grids
                .iter()
                .map(|&grid| LevelSpec {
                    grid,
                    offsets: DEFAULT_OFFSETS[..patterns].to_vec(),
                })
                .collect(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn brodatz() -> Self {
        Self::uniform(&[2, 3, 4, 5], 4).expect("preset is valid")
    }

    pub fn kth_tips() -> Self {
        Self::uniform(&[6, 7, 8], 4).expect("preset is valid")
    }

    pub fn umd() -> Self {
        Self::uniform(&[3, 4, 5, 6], 4).expect("preset is valid")
    }

    /// Parses a comma-separated grid list such as `"3,4,5"`.
    pub fn parse_levels(s: &str, patterns: usize) -> Result<Self> {
        let grids = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::validation(format!("bad grid size '{t}' in levels '{s}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::uniform(&grids, patterns)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::validation("pyramid needs at least one level"));
        }
        for (l, level) in self.levels.iter().enumerate() {
            if level.grid == 0 {
                return Err(Error::validation(format!("level {l} has grid size 0")));
            }
            if level.offsets.is_empty() {
                return Err(Error::validation(format!("level {l} has no offsets")));
            }
            for o in &level.offsets {
                if !o.iter().all(|v| (0.0..1.0).contains(v)) {
                    return Err(Error::validation(format!(
                        "level {l} offset {o:?} outside [0, 1)"
                    )));
                }
            }
        }
        Ok(())
    }

    /// `Σ_l g_l² · |patterns_l|`.
    pub fn region_count(&self) -> usize {
        self.levels
            .iter()
            .map(|l| l.grid * l.grid * l.offsets.len())
            .sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One pooling rectangle `[x0, x1) x [y0, y1)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub level: usize,
    pub pattern: usize,
    pub cell: (usize, usize),
    pub rect: [f64; 4],
}

impl Region {
    fn contains(&self, x: f64, y: f64, dims: (usize, usize)) -> bool {
        let [x0, y0, x1, y1] = self.rect;
        let in_x = x >= x0 && (x < x1 || (x1 >= dims.0 as f64 && x <= x1));
        let in_y = y >= y0 && (y < y1 || (y1 >= dims.1 as f64 && y <= y1));
        in_x && in_y
    }
}

/// Regions of a pyramid bound to one image size.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLayout {
    config: PyramidConfig,
    dims: (usize, usize),
    regions: Vec<Region>,
}

impl PyramidLayout {
    pub fn config(&self) -> &PyramidConfig {
        &self.config
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    /// Total region count `M`.
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn level_count(&self) -> usize {
        self.config.levels.len()
    }

    /// Level tag of every region.
    pub fn level_tags(&self) -> Vec<usize> {
        self.regions.iter().map(|r| r.level).collect()
    }
}

/// Generates the regions for `dims` without checking grid coverage.
pub fn layout_regions(dims: (usize, usize), config: &PyramidConfig) -> Result<PyramidLayout> {
    config.validate()?;
    let (w, h) = (dims.0 as f64, dims.1 as f64);
    if dims.0 == 0 || dims.1 == 0 {
        return Err(Error::validation("layout needs a nonempty image"));
    }
    let mut regions = Vec::with_capacity(config.region_count());
    for (level, spec) in config.levels.iter().enumerate() {
        let g = spec.grid as f64;
        let (cw, ch) = (w / g, h / g);
        for (pattern, &[dx, dy]) in spec.offsets.iter().enumerate() {
            for j in 0..spec.grid {
                for i in 0..spec.grid {
                    let x0 = ((i as f64 + dx) * cw).min(w);
                    let y0 = ((j as f64 + dy) * ch).min(h);
                    let x1 = ((i as f64 + 1.0 + dx) * cw).min(w);
                    let y1 = ((j as f64 + 1.0 + dy) * ch).min(h);
                    if x1 <= x0 || y1 <= y0 {
                        continue;
                    }
                    regions.push(Region {
                        level,
                        pattern,
                        cell: (i, j),
                        rect: [x0, y0, x1, y1],
                    });
                }
            }
        }
    }
    Ok(PyramidLayout {
        config: config.clone(),
        dims,
        regions,
    })
}

/// Builds the layout and checks every region holds at least one grid location.
pub fn build_layout(dims: (usize, usize), config: &PyramidConfig, grid: &GridSpec) -> Result<PyramidLayout> {
    let layout = layout_regions(dims, config)?;
    let locations = dense_grid(dims, grid)?;
    let members = assign_locations(&layout, &locations);
    if let Some((m, _)) = members.iter().enumerate().find(|(_, s)| s.is_empty()) {
        let r = layout.regions[m];
        return Err(Error::EmptyRegion {
            region: m,
            level: r.level,
            rect: r.rect,
        });
    }
    Ok(layout)
}

/// Index sets `N_m`: location `i` belongs to region `m` when its center lies
/// inside the region rectangle. A location may belong to many regions.
pub fn assign_locations(layout: &PyramidLayout, locations: &[(usize, usize)]) -> Vec<Vec<usize>> {
    layout
        .regions
        .iter()
        .map(|r| {
            locations
                .iter()
                .enumerate()
                .filter(|(_, &(x, y))| r.contains(x as f64, y as f64, layout.dims))
                .map(|(i, _)| i)
                .collect()
        })
        .collect()
}

/// Row-wise maximum of the selected code columns; zero for an empty set.
pub fn max_pool(codes: &CodeMatrix, members: &[usize]) -> Result<DVector<f64>> {
    let a = codes.matrix();
    if let Some(&bad) = members.iter().find(|&&i| i >= a.ncols()) {
        return Err(Error::validation(format!(
            "location index {bad} out of range for {} codes",
            a.ncols()
        )));
    }
    let mut out = DVector::zeros(a.nrows());
    let Some((&first, rest)) = members.split_first() else {
        return Ok(out);
    };
    out.copy_from(&a.column(first));
    for &i in rest {
        for (o, &v) in out.iter_mut().zip(a.column(i).iter()) {
            if v > *o {
                *o = v;
            }
        }
    }
    Ok(out)
}

/// Pooled region codes of one image, stored without spatial order beyond
/// the level tag of each column.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDescriptor {
    pooled: DMatrix<f64>,
    levels: Vec<usize>,
    pub image_id: String,
}

impl ImageDescriptor {
    pub fn new(pooled: DMatrix<f64>, levels: Vec<usize>, image_id: impl Into<String>) -> Result<Self> {
        if pooled.ncols() != levels.len() {
            return Err(Error::validation(format!(
                "{} pooled columns but {} level tags",
                pooled.ncols(),
                levels.len()
            )));
        }
        Ok(Self {
            pooled,
            levels,
            image_id: image_id.into(),
        })
    }

    pub fn pooled(&self) -> &DMatrix<f64> {
        &self.pooled
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    /// Dictionary size `D`.
    pub fn code_size(&self) -> usize {
        self.pooled.nrows()
    }

    /// Region count `M`.
    pub fn len(&self) -> usize {
        self.pooled.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.pooled.ncols() == 0
    }

    /// Columns tagged with `level`, in stored order.
    pub fn level_columns(&self, level: usize) -> Vec<DVector<f64>> {
        self.levels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == level)
            .map(|(m, _)| self.pooled.column(m).clone_owned())
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(Kind::ImageDescriptor);
        let levels: Vec<u32> = self.levels.iter().map(|&l| l as u32).collect();
        w.u64(self.code_size() as u64)
            .u64(self.len() as u64)
            .u32s(&levels)
            .f64s(self.pooled.as_slice());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], image_id: impl Into<String>) -> Result<Self> {
        let mut r = Reader::new(bytes, Kind::ImageDescriptor)?;
        let d = r.len()?;
        let m = r.len()?;
        let levels = r.u32s(m)?.into_iter().map(|l| l as usize).collect();
        let data = r.f64s(d * m)?;
        r.finish()?;
        Self::new(DMatrix::from_vec(d, m, data), levels, image_id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path, image_id: impl Into<String>) -> Result<Self> {
        Self::from_bytes(&container::read_file(path)?, image_id)
    }
}

/// Max-pools `codes` over every region of `layout`.
pub fn describe_image(
    codes: &CodeMatrix,
    locations: &[(usize, usize)],
    layout: &PyramidLayout,
    image_id: impl Into<String>,
) -> Result<ImageDescriptor> {
    if codes.len() != locations.len() {
        return Err(Error::validation(format!(
            "{} codes for {} locations",
            codes.len(),
            locations.len()
        )));
    }
    let members = assign_locations(layout, locations);
    let mut pooled = DMatrix::zeros(codes.size(), layout.len());
    for (m, set) in members.iter().enumerate() {
        pooled.set_column(m, &max_pool(codes, set)?);
    }
    ImageDescriptor::new(pooled, layout.level_tags(), image_id)
}
