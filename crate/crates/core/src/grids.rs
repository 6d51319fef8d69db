//! Bird's-eye-view and range-view grids: point→cell index maps, scatter
//! (point→grid) and bilinear gather (grid→point).
//!
//! Gather weights use cell-centre coordinates, so a point at the centre of a
//! cell gathers only from that cell. Neighbours beyond the grid edge are
//! clamped to the border cell (range-view columns wrap around instead), which
//! keeps the four weights of every in-bounds point summing to one.

use std::f64::consts::{PI, TAU};

use rayon::prelude::*;
use serde::Deserialize;

use crate::fusion::FeatureMatrix;
use crate::pointcloud::PointCloud;
use crate::{Error, Result};

/// Cartesian top-down grid. Cells along X are columns, cells along Y rows.
#[derive(Debug, Clone, PartialEq)]
pub struct BevSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub cells_x: usize,
    pub cells_y: usize,
}

impl BevSpec {
    /// ±51.2 m in X/Y, −5..3 m in Z, 512×512 cells.
    pub fn nuscenes() -> Self {
        Self {
            x_range: (-51.2, 51.2),
            y_range: (-51.2, 51.2),
            z_range: (-5.0, 3.0),
            cells_x: 512,
            cells_y: 512,
        }
    }

    /// ±75.2 m in X/Y, −4..2 m in Z, 512×512 cells.
    pub fn semantic_kitti() -> Self {
        Self {
            x_range: (-75.2, 75.2),
            y_range: (-75.2, 75.2),
            z_range: (-4.0, 2.0),
            cells_x: 512,
            cells_y: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (axis, (lo, hi)) in [("x", self.x_range), ("y", self.y_range), ("z", self.z_range)] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidInput(format!("bad {axis} range [{lo}, {hi}]")));
            }
        }
        if self.cells_x == 0 || self.cells_y == 0 {
            return Err(Error::InvalidInput("BEV grid needs at least one cell per axis".into()));
        }
        Ok(())
    }

    pub fn cell_x(&self) -> f64 {
        (self.x_range.1 - self.x_range.0) / self.cells_x as f64
    }

    pub fn cell_y(&self) -> f64 {
        (self.y_range.1 - self.y_range.0) / self.cells_y as f64
    }

    pub fn rows(&self) -> usize {
        self.cells_y
    }

    pub fn cols(&self) -> usize {
        self.cells_x
    }
}

impl Default for BevSpec {
    fn default() -> Self {
        Self::nuscenes()
    }
}

/// Spherical range-view grid: azimuth over the full circle along columns,
/// elevation along rows with the highest elevation in row 0.
#[derive(Debug, Clone, PartialEq)]
pub struct RvSpec {
    pub rows: usize,
    pub cols: usize,
    /// Radians, `(lo, hi)`.
    pub elevation_range: (f64, f64),
}

impl Default for RvSpec {
    /// 64×2048 over −30°..+10°.
    fn default() -> Self {
        Self {
            rows: 64,
            cols: 2048,
            elevation_range: ((-30f64).to_radians(), 10f64.to_radians()),
        }
    }
}

impl RvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidInput("range view needs at least one row and column".into()));
        }
        let (lo, hi) = self.elevation_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidInput(format!("bad elevation range [{lo}, {hi}]")));
        }
        Ok(())
    }
}

/// Where one point lands in a grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridEntry {
    pub row: usize,
    pub col: usize,
    pub in_bounds: bool,
    /// Linear cell indices (`row * cols + col`) of the four gather neighbours.
    pub taps: [usize; 4],
    pub weights: [f64; 4],
}

impl GridEntry {
    const OUT: GridEntry = GridEntry {
        row: 0,
        col: 0,
        in_bounds: false,
        taps: [0; 4],
        weights: [0.0; 4],
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridIndexMap {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<GridEntry>,
}

impl GridIndexMap {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn in_bounds_count(&self) -> usize {
        self.entries.iter().filter(|e| e.in_bounds).count()
    }
}

/// Bilinear taps around continuous cell coordinates `(cr, cc)` measured from
/// cell centres. Rows are clamped; columns clamp or wrap.
fn taps(cr: f64, cc: f64, rows: usize, cols: usize, wrap_cols: bool) -> ([usize; 4], [f64; 4]) {
    let r0 = cr.floor();
    let c0 = cc.floor();
    let fr = cr - r0;
    let fc = cc - c0;
    let clamp = |v: f64, n: usize| v.max(0.0).min((n - 1) as f64) as usize;
    let col = |v: f64| {
        if wrap_cols {
            (v as i64).rem_euclid(cols as i64) as usize
        } else {
            clamp(v, cols)
        }
    };
    let (ra, rb) = (clamp(r0, rows), clamp(r0 + 1.0, rows));
    let (ca, cb) = (col(c0), col(c0 + 1.0));
    (
        [ra * cols + ca, ra * cols + cb, rb * cols + ca, rb * cols + cb],
        [
            (1.0 - fr) * (1.0 - fc),
            (1.0 - fr) * fc,
            fr * (1.0 - fc),
            fr * fc,
        ],
    )
}

/// Maps each point to its BEV cell: `col = ⌊(x − x_lo)/cell_x⌋`,
/// `row = ⌊(y − y_lo)/cell_y⌋`. Points outside any of the X/Y/Z ranges are
/// flagged out of bounds.
pub fn bev_index(cloud: &PointCloud, spec: &BevSpec) -> Result<GridIndexMap> {
    spec.validate()?;
    let (cx, cy) = (spec.cell_x(), spec.cell_y());
    let (rows, cols) = (spec.rows(), spec.cols());
    let entries = cloud
        .xyz()
        .par_iter()
        .with_min_len(4096)
        .map(|p| {
            let [x, y, z] = p.map(f64::from);
            let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo && v < hi;
            if !(inside(x, spec.x_range) && inside(y, spec.y_range) && inside(z, spec.z_range)) {
                return GridEntry::OUT;
            }
            let gx = (x - spec.x_range.0) / cx;
            let gy = (y - spec.y_range.0) / cy;
            let col = (gx.floor() as usize).min(cols - 1);
            let row = (gy.floor() as usize).min(rows - 1);
            let (taps, weights) = taps(gy - 0.5, gx - 0.5, rows, cols, false);
            GridEntry {
                row,
                col,
                in_bounds: true,
                taps,
                weights,
            }
        })
        .collect();
    Ok(GridIndexMap {
        rows,
        cols,
        entries,
    })
}

/// Maps each point to its range-view cell from azimuth `atan2(y, x)` and
/// elevation `atan2(z, √(x² + y²))`.
pub fn rv_index(cloud: &PointCloud, spec: &RvSpec) -> Result<GridIndexMap> {
    spec.validate()?;
    let (lo, hi) = spec.elevation_range;
    let (rows, cols) = (spec.rows, spec.cols);
    let entries = cloud
        .xyz()
        .par_iter()
        .with_min_len(4096)
        .map(|p| {
            let [x, y, z] = p.map(f64::from);
            if x == 0.0 && y == 0.0 {
                return GridEntry::OUT;
            }
            let elevation = z.atan2(x.hypot(y));
            if !(lo..=hi).contains(&elevation) {
                return GridEntry::OUT;
            }
            let gc = (y.atan2(x) + PI) / TAU * cols as f64;
            let gr = (hi - elevation) / (hi - lo) * rows as f64;
            let col = (gc.floor() as i64).rem_euclid(cols as i64) as usize;
            let row = (gr.floor() as usize).min(rows - 1);
            let (taps, weights) = taps(gr - 0.5, gc - 0.5, rows, cols, true);
            GridEntry {
                row,
                col,
                in_bounds: true,
                taps,
                weights,
            }
        })
        .collect();
    Ok(GridIndexMap {
        rows,
        cols,
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduce {
    #[default]
    Max,
    Mean,
}

/// Dense `C × rows × cols` grid with an occupancy mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTensor {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
    pub occupied: Vec<bool>,
}

impl GridTensor {
    pub fn zeros(channels: usize, rows: usize, cols: usize) -> Self {
        Self {
            channels,
            rows,
            cols,
            data: vec![0.0; channels * rows * cols],
            occupied: vec![false; rows * cols],
        }
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data[(c * self.rows + row) * self.cols + col]
    }
}

/// Reduces in-bounds point features into their cells.
///
/// Each channel plane is filled by a single pass over the points in index
/// order, so the result does not depend on the number of worker threads.
pub fn scatter(features: &FeatureMatrix, map: &GridIndexMap, reduce: Reduce) -> Result<GridTensor> {
    if features.rows() != map.len() {
        return Err(Error::Shape(format!(
            "{} feature rows for an index map of {} points",
            features.rows(),
            map.len()
        )));
    }
    let (rows, cols, channels) = (map.rows, map.cols, features.cols());
    let plane = rows * cols;
    let mut grid = GridTensor::zeros(channels, rows, cols);
    let mut counts = vec![0u32; plane];
    for e in map.entries.iter().filter(|e| e.in_bounds) {
        counts[e.row * cols + e.col] += 1;
    }
    for (occ, &n) in grid.occupied.iter_mut().zip(&counts) {
        *occ = n > 0;
    }
    if plane == 0 || channels == 0 {
        return Ok(grid);
    }
    grid.data
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(c, out)| match reduce {
            Reduce::Max => {
                let mut seen = vec![false; plane];
                for (i, e) in map.entries.iter().enumerate().filter(|(_, e)| e.in_bounds) {
                    let cell = e.row * cols + e.col;
                    let v = features.get(i, c);
                    if !seen[cell] || v > out[cell] {
                        out[cell] = v;
                        seen[cell] = true;
                    }
                }
            }
            Reduce::Mean => {
                let mut sums = vec![0.0f64; plane];
                for (i, e) in map.entries.iter().enumerate().filter(|(_, e)| e.in_bounds) {
                    sums[e.row * cols + e.col] += f64::from(features.get(i, c));
                }
                for ((o, s), &n) in out.iter_mut().zip(&sums).zip(&counts) {
                    if n > 0 {
                        *o = (s / f64::from(n)) as f32;
                    }
                }
            }
        });
    Ok(grid)
}

/// Bilinear grid→point transfer using the stored gather weights.
pub fn gather(grid: &GridTensor, map: &GridIndexMap) -> Result<FeatureMatrix> {
    if grid.rows != map.rows || grid.cols != map.cols {
        return Err(Error::Shape(format!(
            "grid is {}×{} but the index map expects {}×{}",
            grid.rows, grid.cols, map.rows, map.cols
        )));
    }
    let channels = grid.channels;
    let plane = grid.rows * grid.cols;
    let mut out = FeatureMatrix::zeros(map.len(), channels);
    if channels == 0 {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(channels)
        .with_min_len(2048)
        .zip(map.entries.par_iter())
        .for_each(|(row, e)| {
            if !e.in_bounds {
                return;
            }
            for (c, slot) in row.iter_mut().enumerate() {
                let base = c * plane;
                let v: f64 = e
                    .taps
                    .iter()
                    .zip(&e.weights)
                    .map(|(&t, &w)| w * f64::from(grid.data[base + t]))
                    .sum();
                *slot = v as f32;
            }
        });
    Ok(out)
}

#[derive(Deserialize)]
struct GridFile {
    bev: Option<BevEntry>,
    rv: Option<RvEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BevEntry {
    x_range: [f64; 2],
    y_range: [f64; 2],
    z_range: [f64; 2],
    cells_x: usize,
    cells_y: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RvEntry {
    rows: usize,
    cols: usize,
    elevation_deg: [f64; 2],
}

/// Reads optional `[bev]` and `[rv]` tables from a rig/config file; missing
/// tables fall back to the defaults.
pub fn grid_specs_from_toml(text: &str) -> Result<(BevSpec, RvSpec)> {
    let file: GridFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let bev = match file.bev {
        Some(b) => BevSpec {
            x_range: (b.x_range[0], b.x_range[1]),
            y_range: (b.y_range[0], b.y_range[1]),
            z_range: (b.z_range[0], b.z_range[1]),
            cells_x: b.cells_x,
            cells_y: b.cells_y,
        },
        None => BevSpec::default(),
    };
    let rv = match file.rv {
        Some(r) => RvSpec {
            rows: r.rows,
            cols: r.cols,
            elevation_range: (r.elevation_deg[0].to_radians(), r.elevation_deg[1].to_radians()),
        },
        None => RvSpec::default(),
    };
    bev.validate().map_err(|e| Error::Config(e.to_string()))?;
    rv.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok((bev, rv))
}
