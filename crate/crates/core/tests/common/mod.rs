//! Random generators and scalar reference implementations shared by the
//! oracle suites and the acceptance runner.
#![allow(dead_code)]

use std::collections::HashMap;

use fuselab::calib::{CameraIntrinsics, DisturbanceSpec, Extrinsics};
use fuselab::fusion::{FeatureMap, FeatureMatrix};
use fuselab::grids::{BevSpec, Reduce, RvSpec};
use fuselab::losses::ProbDist;
use fuselab::pointcloud::{LabelArray, PointCloud};
use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    let q = Quaternion::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    *UnitQuaternion::from_quaternion(q).to_rotation_matrix().matrix()
}

pub fn random_extrinsics(rng: &mut impl Rng) -> Extrinsics {
    let t = Vector3::new(
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
    );
    Extrinsics::from_parts(random_rotation(rng), t).unwrap()
}

pub fn random_intrinsics(rng: &mut impl Rng, width: u32, height: u32) -> CameraIntrinsics {
    CameraIntrinsics::pinhole(
        rng.random_range(200.0..1500.0),
        rng.random_range(200.0..1500.0),
        f64::from(width) * rng.random_range(0.4..0.6),
        f64::from(height) * rng.random_range(0.4..0.6),
    )
    .unwrap()
}

pub fn random_cloud(rng: &mut impl Rng, n: usize, extent: f32) -> PointCloud {
    let xyz = (0..n)
        .map(|_| {
            [
                rng.random_range(-extent..extent),
                rng.random_range(-extent..extent),
                rng.random_range(-extent..extent),
            ]
        })
        .collect();
    let intensity = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    PointCloud::new(xyz, intensity).unwrap()
}

pub fn random_spec(rng: &mut impl Rng, max_deg: f64) -> DisturbanceSpec {
    DisturbanceSpec::new(
        rng.random_range(-max_deg..=max_deg),
        rng.random_range(-max_deg..=max_deg),
        rng.random_range(-max_deg..=max_deg),
    )
    .unwrap()
}

/// Row-major 3×3 product.
pub fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

/// `Rx(rx) · Ry(ry) · Rz(rz)` from the textbook per-axis matrices (degrees).
pub fn disturbance_oracle(rx: f64, ry: f64, rz: f64) -> [[f64; 3]; 3] {
    let (a, b, c) = (rx.to_radians(), ry.to_radians(), rz.to_radians());
    let x = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
    let y = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
    let z = [[c.cos(), -c.sin(), 0.0], [c.sin(), c.cos(), 0.0], [0.0, 0.0, 1.0]];
    mat3_mul(&mat3_mul(&x, &y), &z)
}

/// Scalar projection: camera point `T·x`, then `I·(T·x)`, then divide.
/// Returns `None` when the point is behind the camera or off-image.
pub fn project_oracle(
    point: [f64; 3],
    intr: &CameraIntrinsics,
    extr: &Extrinsics,
    width: u32,
    height: u32,
) -> Option<(f64, f64, f64)> {
    let t = extr.matrix();
    let i = intr.matrix();
    let hom = [point[0], point[1], point[2], 1.0];
    let mut cam = [0.0; 4];
    for r in 0..4 {
        for c in 0..4 {
            cam[r] += t[(r, c)] * hom[c];
        }
    }
    let mut img = [0.0; 3];
    for r in 0..3 {
        for c in 0..4 {
            img[r] += i[(r, c)] * cam[c];
        }
    }
    let depth = img[2];
    if depth <= 1e-6 {
        return None;
    }
    let (u, v) = (img[0] / depth, img[1] / depth);
    (u >= 0.0 && u < f64::from(width) && v >= 0.0 && v < f64::from(height)).then_some((u, v, depth))
}

/// Four-term bilinear interpolation with zero padding.
pub fn bilinear_oracle(map: &FeatureMap, c: usize, u: f64, v: f64) -> f64 {
    let at = |col: f64, row: f64| -> f64 {
        if col < 0.0 || row < 0.0 || col >= map.width() as f64 || row >= map.height() as f64 {
            0.0
        } else {
            f64::from(map.get(c, row as usize, col as usize))
        }
    };
    let (x0, y0) = (u.floor(), v.floor());
    let (a, b) = (u - x0, v - y0);
    at(x0, y0) * (1.0 - a) * (1.0 - b)
        + at(x0 + 1.0, y0) * a * (1.0 - b)
        + at(x0, y0 + 1.0) * (1.0 - a) * b
        + at(x0 + 1.0, y0 + 1.0) * a * b
}

pub fn random_map(rng: &mut impl Rng, camera_id: u16, channels: usize, h: usize, w: usize, stride: u16) -> FeatureMap {
    let data: Vec<f32> = (0..channels * h * w).map(|_| rng.random_range(-3.0f32..3.0)).collect();
    FeatureMap::from_chw(camera_id, channels, h, w, stride, &data).unwrap()
}

/// Cell of one point under the BEV convention, or `None` when out of range.
pub fn bev_cell(p: [f64; 3], spec: &BevSpec) -> Option<(usize, usize)> {
    let inside = |v: f64, r: (f64, f64)| v >= r.0 && v < r.1;
    if !(inside(p[0], spec.x_range) && inside(p[1], spec.y_range) && inside(p[2], spec.z_range)) {
        return None;
    }
    let cx = (spec.x_range.1 - spec.x_range.0) / spec.cells_x as f64;
    let cy = (spec.y_range.1 - spec.y_range.0) / spec.cells_y as f64;
    let col = (((p[0] - spec.x_range.0) / cx).floor() as usize).min(spec.cells_x - 1);
    let row = (((p[1] - spec.y_range.0) / cy).floor() as usize).min(spec.cells_y - 1);
    Some((row, col))
}

/// Per-cell reduction through a hash map of cell → feature rows.
pub fn scatter_oracle(
    features: &FeatureMatrix,
    cells: &[Option<(usize, usize)>],
    reduce: Reduce,
) -> HashMap<(usize, usize), Vec<f32>> {
    let mut members: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (i, cell) in cells.iter().enumerate() {
        if let Some(cell) = cell {
            members.entry(*cell).or_default().push(i);
        }
    }
    members
        .into_iter()
        .map(|(cell, idx)| {
            let values = (0..features.cols())
                .map(|c| match reduce {
                    Reduce::Max => idx.iter().map(|&i| features.get(i, c)).fold(f32::NEG_INFINITY, f32::max),
                    Reduce::Mean => {
                        let mut sum = 0.0f64;
                        for &i in &idx {
                            sum += f64::from(features.get(i, c));
                        }
                        (sum / idx.len() as f64) as f32
                    }
                })
                .collect();
            (cell, values)
        })
        .collect()
}

/// Bilinear read of a `C × rows × cols` plane stack at continuous cell
/// coordinates measured from cell centres: rows clamp, columns clamp or wrap.
pub fn grid_bilinear_oracle(
    data: &[f32],
    rows: usize,
    cols: usize,
    c: usize,
    gr: f64,
    gc: f64,
    wrap: bool,
) -> f32 {
    let (r0, c0) = (gr.floor(), gc.floor());
    let (fr, fc) = (gr - r0, gc - c0);
    let row = |r: f64| r.max(0.0).min((rows - 1) as f64) as usize;
    let col = |x: f64| {
        if wrap {
            (x as i64).rem_euclid(cols as i64) as usize
        } else {
            x.max(0.0).min((cols - 1) as f64) as usize
        }
    };
    let at = |r: usize, k: usize| f64::from(data[(c * rows + r) * cols + k]);
    let mut v = 0.0;
    v += (1.0 - fr) * (1.0 - fc) * at(row(r0), col(c0));
    v += (1.0 - fr) * fc * at(row(r0), col(c0 + 1.0));
    v += fr * (1.0 - fc) * at(row(r0 + 1.0), col(c0));
    v += fr * fc * at(row(r0 + 1.0), col(c0 + 1.0));
    v as f32
}

/// Continuous BEV cell coordinates (row, col) of a point, relative to cell
/// centres.
pub fn bev_continuous(p: [f64; 3], spec: &BevSpec) -> (f64, f64) {
    let cx = (spec.x_range.1 - spec.x_range.0) / spec.cells_x as f64;
    let cy = (spec.y_range.1 - spec.y_range.0) / spec.cells_y as f64;
    ((p[1] - spec.y_range.0) / cy - 0.5, (p[0] - spec.x_range.0) / cx - 0.5)
}

/// Range-view cell of a point: azimuth in `[−π, π)` across columns,
/// elevation from `hi` (row 0) down to `lo`.
pub fn rv_cell(p: [f64; 3], spec: &RvSpec) -> Option<((usize, usize), (f64, f64))> {
    let [x, y, z] = p;
    if x == 0.0 && y == 0.0 {
        return None;
    }
    let (lo, hi) = spec.elevation_range;
    let elevation = z.atan2((x * x + y * y).sqrt());
    if elevation < lo || elevation > hi {
        return None;
    }
    let gc = (y.atan2(x) + std::f64::consts::PI) / (2.0 * std::f64::consts::PI) * spec.cols as f64;
    let gr = (hi - elevation) / (hi - lo) * spec.rows as f64;
    let col = (gc.floor() as i64).rem_euclid(spec.cols as i64) as usize;
    let row = (gr.floor() as usize).min(spec.rows - 1);
    Some(((row, col), (gr - 0.5, gc - 0.5)))
}

pub fn random_probs(rng: &mut impl Rng, n: usize, k: usize, floor: f64) -> ProbDist {
    let mut p = Vec::with_capacity(n * k);
    for _ in 0..n {
        let row: Vec<f64> = (0..k).map(|_| rng.random_range(floor..1.0)).collect();
        let s: f64 = row.iter().sum();
        p.extend(row.iter().map(|v| v / s));
    }
    ProbDist::new(n, k, p).unwrap()
}

pub fn random_labels(rng: &mut impl Rng, n: usize, k: usize) -> LabelArray {
    LabelArray::new((0..n).map(|_| rng.random_range(0..k as u16)).collect(), k).unwrap()
}

/// Central-difference gradient of `f` at `p` (off-simplex probing).
pub fn finite_difference(p: &ProbDist, h: f64, f: impl Fn(&ProbDist) -> f64) -> Vec<f64> {
    let base = p.as_slice().to_vec();
    (0..base.len())
        .map(|j| {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[j] += h;
            minus[j] -= h;
            let fp = f(&ProbDist::from_raw(p.n(), p.n_cls(), plus).unwrap());
            let fm = f(&ProbDist::from_raw(p.n(), p.n_cls(), minus).unwrap());
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|)`, or the absolute difference when both are tiny.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let scale = x.abs().max(y.abs());
            if scale < 1e-7 {
                (x - y).abs()
            } else {
                (x - y).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

/// Lovász-Softmax by direct evaluation of the Lovász extension: for every
/// class present, errors sorted descending (ties by index), each weighted by
/// the change in Jaccard loss of the growing prefix of mispredicted points.
pub fn lovasz_oracle(p: &ProbDist, labels: &LabelArray) -> f64 {
    let (n, k) = (p.n(), p.n_cls());
    let mut class_losses = Vec::new();
    for c in 0..k {
        let fg: Vec<bool> = labels.iter().map(|y| y == c).collect();
        let gts = fg.iter().filter(|&&f| f).count();
        if gts == 0 {
            continue;
        }
        let err: Vec<f64> = (0..n)
            .map(|i| if fg[i] { 1.0 - p.row(i)[c] } else { p.row(i)[c] })
            .collect();
        // Insertion sort: descending error, ascending index on ties.
        let mut order: Vec<usize> = Vec::new();
        for i in 0..n {
            let pos = order.iter().position(|&j| err[i] > err[j]).unwrap_or(order.len());
            order.insert(pos, i);
        }
        let jaccard_loss = |prefix: &[usize]| -> f64 {
            if prefix.is_empty() {
                return 0.0;
            }
            let fg_in = prefix.iter().filter(|&&i| fg[i]).count();
            let kept = (gts - fg_in) as f64;
            let union = (gts + prefix.len() - fg_in) as f64;
            1.0 - kept / union
        };
        let mut loss = 0.0;
        for m in 1..=n {
            loss += err[order[m - 1]] * (jaccard_loss(&order[..m]) - jaccard_loss(&order[..m - 1]));
        }
        class_losses.push(loss);
    }
    let total: f64 = class_losses.iter().sum();
    total * (1.0 / class_losses.len() as f64)
}
