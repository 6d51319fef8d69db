//! Desk-scale surrogate of fusion training under weak calibration.
//!
//! A LiDAR at 1.8 m height ray-casts a ground plane, boxes and poles inside
//! the fields of view of a front and a rear camera. Each camera's feature map
//! is rendered by projecting the scanned points with the true rig and
//! splatting a class-coded "colour" per point. Two box classes share the same
//! geometry and reflectivity, so only camera features separate them.
//!
//! The classifier is affine over fused per-point features followed by a
//! softmax, trained by full-batch gradient descent with momentum on
//! [`total_loss`].

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::calib::{CalibrationRig, CameraCalib, CameraIntrinsics, Extrinsics, PerturbationLevel};
use crate::eval::{
    miou, weak_calib_benchmark, BenchmarkRun, ConfusionMatrix, DisturbanceMode, Frame, Predictor,
};
use crate::fusion::{fuse, sample_rig, FeatureMap, FeatureMatrix, FusedPointFeatures};
use crate::grids::{bev_index, gather, scatter, BevSpec, Reduce};
use crate::io_util::{f32s_from_le, read_file, write_file, ByteReader};
use crate::losses::{total_loss, LossConfig, ProbDist};
use crate::pointcloud::{LabelArray, PointCloud};
use crate::{Error, Result};

pub const N_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; N_CLASSES] = ["ground", "vehicle", "barrier", "pole"];
const GROUND: u16 = 0;
const VEHICLE: u16 = 1;
const BARRIER: u16 = 2;
const POLE: u16 = 3;

/// LiDAR-derived per-point feature count.
pub const POINT_DIMS: usize = 4;
/// Camera feature channels (one "colour" per class).
pub const CAMERA_CHANNELS: usize = N_CLASSES;
pub const CAMERAS: usize = 2;

pub const IMAGE_WIDTH: u32 = 640;
pub const IMAGE_HEIGHT: u32 = 320;
pub const FOCAL: f64 = 640.0;
pub const STRIDE: u16 = 4;

const LIDAR_HEIGHT: f64 = 1.8;
const GROUND_Z: f64 = -LIDAR_HEIGHT;
const MAX_RANGE: f64 = 60.0;
const BEAM_ROWS: usize = 48;
const ELEVATION_DEG: (f64, f64) = (-16.0, 4.0);
/// Fraction of ground returns kept, to temper class imbalance.
const GROUND_KEEP: f64 = 0.25;
const AZIMUTH_STEP_DEG: f64 = 0.3;
const SECTOR_HALF_DEG: f64 = 30.0;
const PLACEMENT_HALF_DEG: f64 = 22.0;
const RANGE_NOISE: f64 = 0.01;
const SPLAT_RADIUS: f64 = 1.0;
const SPLAT_DEPTH_SLACK: f64 = 0.5;
const FEATURE_AMPLITUDE: f64 = 3.0;
const FEATURE_NOISE: f64 = 0.3;

/// Scene acceptance thresholds for nearest-centroid classification.
pub const MIN_FUSED_NC_MIOU: f64 = 0.9;
pub const MAX_LIDAR_NC_MIOU: f64 = 0.75;
const MAX_SCENE_ATTEMPTS: u64 = 256;

#[derive(Debug, Clone, Copy)]
enum Shape {
    Box { min: [f64; 3], max: [f64; 3] },
    Pole { x: f64, y: f64, radius: f64, top: f64 },
}

#[derive(Debug, Clone, Copy)]
struct Object {
    shape: Shape,
    class: u16,
}

impl Object {
    fn footprint(&self) -> (f64, f64, f64) {
        match self.shape {
            Shape::Box { min, max } => (
                0.5 * (min[0] + max[0]),
                0.5 * (min[1] + max[1]),
                0.5 * (max[0] - min[0]).hypot(max[1] - min[1]),
            ),
            Shape::Pole { x, y, radius, .. } => (x, y, radius),
        }
    }

    /// Ray parameter of the first hit with `t > 0`.
    fn intersect(&self, o: &Point3<f64>, d: &Vector3<f64>) -> Option<f64> {
        match self.shape {
            Shape::Box { min, max } => {
                let mut t0 = 0.0f64;
                let mut t1 = f64::INFINITY;
                for a in 0..3 {
                    if d[a].abs() < 1e-12 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / d[a];
                    let (mut ta, mut tb) = ((min[a] - o[a]) * inv, (max[a] - o[a]) * inv);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    t0 = t0.max(ta);
                    t1 = t1.min(tb);
                    if t0 > t1 {
                        return None;
                    }
                }
                (t0 > 1e-9).then_some(t0)
            }
            Shape::Pole { x, y, radius, top } => {
                let (ox, oy) = (o[0] - x, o[1] - y);
                let a = d[0] * d[0] + d[1] * d[1];
                if a < 1e-12 {
                    return None;
                }
                let b = 2.0 * (ox * d[0] + oy * d[1]);
                let c = ox * ox + oy * oy - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / (2.0 * a);
                let z = o[2] + t * d[2];
                (t > 1e-9 && z >= GROUND_Z && z <= top).then_some(t)
            }
        }
    }
}

struct World {
    objects: Vec<Object>,
}

impl World {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut objects: Vec<Object> = Vec::new();
        let place = |rng: &mut ChaCha8Rng, class: u16, objects: &mut Vec<Object>| {
            for _ in 0..100 {
                let rear = rng.random_bool(0.5);
                let az = rng.random_range(-PLACEMENT_HALF_DEG..PLACEMENT_HALF_DEG).to_radians() + if rear { PI } else { 0.0 };
                let dist = rng.random_range(10.0..40.0);
                let (cx, cy) = (dist * az.cos(), dist * az.sin());
                let shape = if class == POLE {
                    Shape::Pole {
                        x: cx,
                        y: cy,
                        radius: rng.random_range(0.15..0.25),
                        top: GROUND_Z + rng.random_range(3.0..5.0),
                    }
                } else {
                    let length = rng.random_range(2.0..3.0);
                    let width = rng.random_range(1.0..1.5);
                    let height = rng.random_range(1.0..1.4);
                    let (hx, hy) = if rng.random_bool(0.5) {
                        (0.5 * length, 0.5 * width)
                    } else {
                        (0.5 * width, 0.5 * length)
                    };
                    Shape::Box {
                        min: [cx - hx, cy - hy, GROUND_Z],
                        max: [cx + hx, cy + hy, GROUND_Z + height],
                    }
                };
                let candidate = Object { shape, class };
                let (x, y, r) = candidate.footprint();
                let clear = objects.iter().all(|o| {
                    let (ox, oy, or) = o.footprint();
                    (x - ox).hypot(y - oy) > r + or + 1.0
                });
                if clear {
                    objects.push(candidate);
                    return;
                }
            }
        };
        let counts = [
            (VEHICLE, rng.random_range(4..=6)),
            (BARRIER, rng.random_range(4..=6)),
            (POLE, rng.random_range(5..=8)),
        ];
        for (class, n) in counts {
            for _ in 0..n {
                place(rng, class, &mut objects);
            }
        }
        Self { objects }
    }

    /// First hit along the ray: (distance parameter, class).
    fn cast(&self, o: &Point3<f64>, d: &Vector3<f64>) -> Option<(f64, u16)> {
        let mut best: Option<(f64, u16)> = None;
        if d[2] < -1e-12 {
            let t = (GROUND_Z - o[2]) / d[2];
            if t > 0.0 {
                best = Some((t, GROUND));
            }
        }
        for obj in &self.objects {
            if let Some(t) = obj.intersect(o, d) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, obj.class));
                }
            }
        }
        best
    }
}

/// The fixed two-camera rig used by synthetic scenes: a forward and a
/// rearward pinhole camera near the LiDAR origin.
pub fn synthetic_rig() -> CalibrationRig {
    let intr = CameraIntrinsics::pinhole(
        FOCAL,
        FOCAL,
        f64::from(IMAGE_WIDTH) / 2.0,
        f64::from(IMAGE_HEIGHT) / 2.0,
    )
    .expect("valid pinhole");
    // LiDAR frame: x forward, y left, z up. Camera frame: x right, y down, z forward.
    #[rustfmt::skip]
    let front = Matrix3::new(
        0.0, -1.0, 0.0,
        0.0, 0.0, -1.0,
        1.0, 0.0, 0.0,
    );
    #[rustfmt::skip]
    let rear = Matrix3::new(
        0.0, 1.0, 0.0,
        0.0, 0.0, -1.0,
        -1.0, 0.0, 0.0,
    );
    let cameras = [(front, Vector3::new(0.2, 0.0, -0.1)), (rear, Vector3::new(-0.2, 0.0, -0.1))]
        .into_iter()
        .map(|(r, centre)| CameraCalib {
            intrinsics: intr,
            extrinsics: Extrinsics::from_parts(r, -(r * centre)).expect("rigid"),
            width: IMAGE_WIDTH,
            height: IMAGE_HEIGHT,
        })
        .collect();
    CalibrationRig::new(cameras).expect("non-empty rig")
}

/// A labelled synthetic frame with its camera feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    /// Attempt index that satisfied the nearest-centroid checks.
    pub sub_seed: u64,
    pub cloud: PointCloud,
    pub labels: LabelArray,
    pub rig: CalibrationRig,
    pub maps: Vec<FeatureMap>,
}

impl SyntheticScene {
    pub fn to_frame(&self, id: u64) -> Frame {
        Frame {
            id,
            cloud: self.cloud.clone(),
            labels: self.labels.clone(),
            rig: self.rig.clone(),
            maps: self.maps.clone(),
        }
    }
}

fn scan(world: &World, rng: &mut ChaCha8Rng) -> Result<(PointCloud, LabelArray)> {
    let noise = Normal::new(0.0, RANGE_NOISE).expect("valid sigma");
    let intensity_model = |class: u16| match class {
        GROUND => (0.35, 0.12),
        VEHICLE | BARRIER => (0.5, 0.12),
        _ => (0.6, 0.12),
    };
    let origin = Point3::origin();
    let mut xyz = Vec::new();
    let mut intensity = Vec::new();
    let mut labels = Vec::new();
    let cols = (2.0 * SECTOR_HALF_DEG / AZIMUTH_STEP_DEG) as usize;
    for r in 0..BEAM_ROWS {
        let el = (ELEVATION_DEG.0
            + r as f64 * (ELEVATION_DEG.1 - ELEVATION_DEG.0) / (BEAM_ROWS - 1) as f64)
            .to_radians();
        for sector in [0.0, 180.0] {
            for c in 0..cols {
                let az = (sector - SECTOR_HALF_DEG + (c as f64 + 0.5) * AZIMUTH_STEP_DEG).to_radians();
                let d = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
                let Some((t, class)) = world.cast(&origin, &d) else {
                    continue;
                };
                if t > MAX_RANGE || (class == GROUND && !rng.random_bool(GROUND_KEEP)) {
                    continue;
                }
                let p = d * (t + noise.sample(rng));
                xyz.push([p[0] as f32, p[1] as f32, p[2] as f32]);
                let (mu, sigma) = intensity_model(class);
                let i: f64 = Normal::new(mu, sigma).expect("valid sigma").sample(rng);
                intensity.push(i.clamp(0.0, 1.0) as f32);
                labels.push(class);
            }
        }
    }
    Ok((PointCloud::new(xyz, intensity)?, LabelArray::new(labels, N_CLASSES)?))
}

/// Splats the class code of every projected point into the camera's feature
/// map. Each cell takes the code of the closest (in the image) point within
/// `SPLAT_RADIUS` cells whose depth is within `SPLAT_DEPTH_SLACK` of the
/// nearest surface covering that cell; uncovered cells stay background.
fn render(
    cloud: &PointCloud,
    labels: &LabelArray,
    cam: &CameraCalib,
    camera_id: u16,
    rng: &mut ChaCha8Rng,
) -> Result<FeatureMap> {
    let s = f64::from(STRIDE);
    let (w, h) = ((f64::from(cam.width) / s) as usize, (f64::from(cam.height) / s) as usize);
    let proj = cam.project(cloud);
    let splats = |visit: &mut dyn FnMut(usize, f64, f64, usize)| {
        for (px, class) in proj.iter().zip(labels.iter()) {
            if !px.valid {
                continue;
            }
            let (mc, mr) = (px.u / s, px.v / s);
            let c0 = (mc - SPLAT_RADIUS).ceil().max(0.0) as usize;
            let c1 = ((mc + SPLAT_RADIUS).floor() as usize).min(w - 1);
            let r0 = (mr - SPLAT_RADIUS).ceil().max(0.0) as usize;
            let r1 = ((mr + SPLAT_RADIUS).floor() as usize).min(h - 1);
            for row in r0..=r1 {
                for col in c0..=c1 {
                    let d2 = (col as f64 - mc).powi(2) + (row as f64 - mr).powi(2);
                    if d2 <= SPLAT_RADIUS * SPLAT_RADIUS {
                        visit(row * w + col, d2, px.depth, class);
                    }
                }
            }
        }
    };
    let mut nearest = vec![f64::INFINITY; w * h];
    splats(&mut |cell, _, depth, _| nearest[cell] = nearest[cell].min(depth));
    let mut owner: Vec<Option<(f64, usize)>> = vec![None; w * h];
    splats(&mut |cell, d2, depth, class| {
        if depth <= nearest[cell] + SPLAT_DEPTH_SLACK && owner[cell].is_none_or(|(best, _)| d2 < best) {
            owner[cell] = Some((d2, class));
        }
    });
    let noise = Normal::new(0.0, FEATURE_NOISE).expect("valid sigma");
    let mut map = FeatureMap::zeros(camera_id, CAMERA_CHANNELS, h, w, STRIDE)?;
    for row in 0..h {
        for col in 0..w {
            let class = owner[row * w + col].map(|(_, c)| c);
            for (c, slot) in map.pixel_mut(row, col).iter_mut().enumerate() {
                let code = if class == Some(c) { FEATURE_AMPLITUDE } else { 0.0 };
                *slot = (code + noise.sample(rng)) as f32;
            }
        }
    }
    Ok(map)
}

/// LiDAR-only per-point features: height above ground, intensity, range and
/// the highest point in the surrounding BEV neighbourhood.
pub fn lidar_features(cloud: &PointCloud) -> Result<FeatureMatrix> {
    let n = cloud.len();
    let bev = BevSpec {
        cells_x: 256,
        cells_y: 256,
        ..BevSpec::nuscenes()
    };
    let heights = FeatureMatrix::from_vec(
        n,
        1,
        cloud.xyz().iter().map(|p| ((f64::from(p[2]) - GROUND_Z) / 2.0) as f32).collect(),
    )?;
    let index = bev_index(cloud, &bev)?;
    let local_max = gather(&scatter(&heights, &index, Reduce::Max)?, &index)?;
    let mut data = Vec::with_capacity(n * POINT_DIMS);
    for i in 0..n {
        let [x, y, _] = cloud.point(i);
        data.extend_from_slice(&[
            heights.get(i, 0),
            cloud.intensity()[i],
            (x.hypot(y) / 50.0) as f32,
            local_max.get(i, 0),
        ]);
    }
    FeatureMatrix::from_vec(n, POINT_DIMS, data)
}

/// `[lidar features | camera features sampled with rig]`.
pub fn fused_features(
    cloud: &PointCloud,
    rig: &CalibrationRig,
    maps: &[FeatureMap],
) -> Result<FusedPointFeatures> {
    fuse(&lidar_features(cloud)?, &sample_rig(cloud, rig, maps)?)
}

fn nearest_centroid_miou(x: &FeatureMatrix, labels: &LabelArray) -> Result<f64> {
    let (n, d, k) = (x.rows(), x.cols(), labels.n_cls());
    let mut sums = vec![0.0f64; k * d];
    let mut counts = vec![0usize; k];
    for (i, y) in labels.iter().enumerate() {
        counts[y] += 1;
        for (j, &v) in x.row(i).iter().enumerate() {
            sums[y * d + j] += f64::from(v);
        }
    }
    let present: Vec<usize> = (0..k).filter(|&c| counts[c] > 0).collect();
    for &c in &present {
        for v in &mut sums[c * d..(c + 1) * d] {
            *v /= counts[c] as f64;
        }
    }
    let pred: Vec<usize> = (0..n)
        .map(|i| {
            let row = x.row(i);
            *present
                .iter()
                .min_by(|&&a, &&b| {
                    let dist = |c: usize| -> f64 {
                        row.iter()
                            .zip(&sums[c * d..(c + 1) * d])
                            .map(|(&v, m)| (f64::from(v) - m).powi(2))
                            .sum()
                    };
                    dist(a).total_cmp(&dist(b))
                })
                .expect("at least one class")
        })
        .collect();
    let mut cm = ConfusionMatrix::new(k);
    cm.accumulate(labels, &LabelArray::from_indices(&pred, k)?)?;
    Ok(miou(&cm).miou.unwrap_or(0.0))
}

/// Nearest-centroid mIoU on (fused, LiDAR-only) features of a scene, with
/// centroids fitted on the scene itself.
pub fn scene_separability(scene: &SyntheticScene) -> Result<(f64, f64)> {
    let fused = fused_features(&scene.cloud, &scene.rig, &scene.maps)?;
    let lidar = fused.features.columns(0, fused.point_dims);
    Ok((
        nearest_centroid_miou(&fused.features, &scene.labels)?,
        nearest_centroid_miou(&lidar, &scene.labels)?,
    ))
}

/// One candidate scene, without the separability checks of [`gen_scene`].
pub fn build_scene(seed: u64, sub_seed: u64) -> Result<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sub_seed);
    let world = World::random(&mut rng);
    let (cloud, labels) = scan(&world, &mut rng)?;
    let rig = synthetic_rig();
    let maps = rig
        .cameras()
        .iter()
        .enumerate()
        .map(|(i, cam)| render(&cloud, &labels, cam, i as u16, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticScene {
        seed,
        sub_seed,
        cloud,
        labels,
        rig,
        maps,
    })
}

/// Deterministic scene for `seed`. Candidates are drawn with increasing
/// sub-seeds until one passes the nearest-centroid checks
/// (fused ≥ [`MIN_FUSED_NC_MIOU`], LiDAR-only ≤ [`MAX_LIDAR_NC_MIOU`]).
pub fn gen_scene(seed: u64) -> Result<SyntheticScene> {
    for sub_seed in 0..MAX_SCENE_ATTEMPTS {
        let scene = build_scene(seed, sub_seed)?;
        let present = {
            let mut seen = [false; N_CLASSES];
            scene.labels.iter().for_each(|l| seen[l] = true);
            seen.iter().all(|&s| s)
        };
        if !present {
            continue;
        }
        let (fused, lidar) = scene_separability(&scene)?;
        if fused >= MIN_FUSED_NC_MIOU && lidar <= MAX_LIDAR_NC_MIOU {
            return Ok(scene);
        }
    }
    Err(Error::InvalidInput(format!(
        "no scene for seed {seed} passed the separability checks in {MAX_SCENE_ATTEMPTS} attempts"
    )))
}

/// Affine per-point classifier with softmax output.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub point_dims: usize,
    pub cameras: usize,
    pub camera_channels: usize,
    pub n_cls: usize,
    /// When false the camera block is ignored (LiDAR-only model).
    pub use_camera: bool,
    /// `(point_dims + cameras·camera_channels + 1) × n_cls`, row-major; the
    /// last row is the bias.
    pub weights: Vec<f64>,
}

pub const MODEL_MAGIC: &[u8; 4] = b"FLMD";
pub const MODEL_VERSION: u16 = 1;
const MODEL_FLAG_LIDAR_ONLY: u16 = 1;

impl ToyModel {
    pub fn zeros(point_dims: usize, cameras: usize, camera_channels: usize, n_cls: usize, use_camera: bool) -> Self {
        let rows = point_dims + cameras * camera_channels + 1;
        Self {
            point_dims,
            cameras,
            camera_channels,
            n_cls,
            use_camera,
            weights: vec![0.0; rows * n_cls],
        }
    }

    pub fn input_dims(&self) -> usize {
        self.point_dims + self.cameras * self.camera_channels
    }

    /// Class probabilities for every row of `x`.
    pub fn forward(&self, x: &FeatureMatrix) -> Result<ProbDist> {
        if x.cols() != self.input_dims() {
            return Err(Error::Shape(format!(
                "model expects {} input features, got {}",
                self.input_dims(),
                x.cols()
            )));
        }
        let k = self.n_cls;
        let used = if self.use_camera { x.cols() } else { self.point_dims };
        let bias = &self.weights[self.input_dims() * k..];
        let mut p = vec![0.0; x.rows() * k];
        for (i, out) in p.chunks_exact_mut(k).enumerate() {
            out.copy_from_slice(bias);
            for (j, &v) in x.row(i)[..used].iter().enumerate() {
                let v = f64::from(v);
                for (o, w) in out.iter_mut().zip(&self.weights[j * k..(j + 1) * k]) {
                    *o += v * w;
                }
            }
            let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::Diverged(format!("non-finite class scores for point {i}")));
            }
            let mut sum = 0.0;
            for o in out.iter_mut() {
                *o = (*o - max).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        ProbDist::from_raw(x.rows(), k, p)
    }

    /// Accumulates `∂loss/∂W` given `∂loss/∂p` through the softmax.
    fn backward(&self, x: &FeatureMatrix, p: &ProbDist, grad_p: &[f64], out: &mut [f64]) {
        let k = self.n_cls;
        let used = if self.use_camera { x.cols() } else { self.point_dims };
        let bias_row = self.input_dims() * k;
        let mut ds = vec![0.0; k];
        for i in 0..x.rows() {
            let pi = p.row(i);
            let gi = &grad_p[i * k..(i + 1) * k];
            let dot: f64 = pi.iter().zip(gi).map(|(a, b)| a * b).sum();
            for ((d, &pk), &gk) in ds.iter_mut().zip(pi).zip(gi) {
                *d = pk * (gk - dot);
            }
            for (j, &v) in x.row(i)[..used].iter().enumerate() {
                let v = f64::from(v);
                for (o, d) in out[j * k..(j + 1) * k].iter_mut().zip(&ds) {
                    *o += v * d;
                }
            }
            for (o, d) in out[bias_row..bias_row + k].iter_mut().zip(&ds) {
                *o += d;
            }
        }
    }

    pub fn predict_features(&self, x: &FeatureMatrix) -> Result<LabelArray> {
        LabelArray::from_indices(&self.forward(x)?.argmax(), self.n_cls)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let dims = [self.point_dims, self.cameras, self.camera_channels, self.n_cls]
            .iter()
            .map(|&d| u16::try_from(d).map_err(|_| Error::InvalidInput("model dimension exceeds u16".into())))
            .collect::<Result<Vec<_>>>()?;
        let mut buf = Vec::with_capacity(16 + 4 * self.weights.len());
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        let flags = if self.use_camera { 0 } else { MODEL_FLAG_LIDAR_ONLY };
        buf.extend_from_slice(&flags.to_le_bytes());
        for d in dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &w in &self.weights {
            buf.extend_from_slice(&(w as f32).to_le_bytes());
        }
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(MODEL_MAGIC)?;
        let version = r.header_u16()?;
        if version != MODEL_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let flags = r.header_u16()?;
        if flags & !MODEL_FLAG_LIDAR_ONLY != 0 {
            return Err(Error::MalformedHeader(format!("unknown model flags {flags:#06x}")));
        }
        let point_dims = usize::from(r.header_u16()?);
        let cameras = usize::from(r.header_u16()?);
        let camera_channels = usize::from(r.header_u16()?);
        let n_cls = usize::from(r.header_u16()?);
        if n_cls == 0 {
            return Err(Error::MalformedHeader("model has zero classes".into()));
        }
        let mut model = Self::zeros(point_dims, cameras, camera_channels, n_cls, flags & MODEL_FLAG_LIDAR_ONLY == 0);
        let payload = r.payload(4 * model.weights.len())?;
        for (w, v) in model.weights.iter_mut().zip(f32s_from_le(payload)) {
            *w = f64::from(v);
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}

impl Predictor for ToyModel {
    fn predict(&self, frame: &Frame, rig: &CalibrationRig) -> Result<LabelArray> {
        let x = if self.use_camera {
            fused_features(&frame.cloud, rig, &frame.maps)?.features
        } else {
            let lidar = lidar_features(&frame.cloud)?;
            fuse(&lidar, &FeatureMatrix::zeros(lidar.rows(), self.cameras * self.camera_channels))?.features
        };
        self.predict_features(&x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Well-calibrated features only.
    Baseline,
    /// Features sampled with freshly perturbed extrinsics every epoch.
    DataAugmentation,
    /// Perturbed student pass distilled from a same-weights teacher pass on
    /// well-calibrated features.
    Distillation,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "da" => Ok(Self::DataAugmentation),
            "kd" => Ok(Self::Distillation),
            other => Err(Error::InvalidInput(format!("unknown strategy {other:?}"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Baseline => "baseline",
            Self::DataAugmentation => "da",
            Self::Distillation => "kd",
        })
    }
}

/// Where distillation applies the segmentation loss. The distillation term
/// always runs on the perturbed pass against a detached teacher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SegmentationPass {
    /// On the teacher pass, so the shared weights keep learning from
    /// well-calibrated samples.
    #[default]
    WellCalibrated,
    /// On the perturbed student pass, alongside the distillation term.
    Perturbed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub train_level: PerturbationLevel,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Uses λ (temperature), λ1 and λ2; class weights are recomputed from the
    /// training labels when `balance_classes` is set.
    pub loss: LossConfig,
    pub balance_classes: bool,
    /// False trains a LiDAR-only model that ignores camera features.
    pub use_camera: bool,
    /// Pass that carries the segmentation term under distillation.
    pub kd_segmentation: SegmentationPass,
}

impl TrainConfig {
    pub fn new(strategy: Strategy, seed: u64) -> Self {
        Self {
            strategy,
            train_level: PerturbationLevel::L3,
            epochs: 300,
            learning_rate: 2.0,
            momentum: 0.9,
            seed,
            loss: LossConfig::uniform(N_CLASSES),
            balance_classes: true,
            use_camera: true,
            kd_segmentation: SegmentationPass::WellCalibrated,
        }
    }

    pub fn lidar_only(seed: u64) -> Self {
        Self {
            use_camera: false,
            ..Self::new(Strategy::Baseline, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidInput("epochs must be ≥ 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidInput("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidInput("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Inverse square-root class frequency, normalized to mean 1.
fn balanced_weights(scenes: &[SyntheticScene], n_cls: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_cls];
    for s in scenes {
        s.labels.iter().for_each(|l| counts[l] += 1);
    }
    let raw: Vec<f64> = counts.iter().map(|&c| 1.0 / (c.max(1) as f64).sqrt()).collect();
    let mean = raw.iter().sum::<f64>() / n_cls as f64;
    raw.iter().map(|w| w / mean).collect()
}

/// Loss and weight gradient of one training step on one scene. `clean` holds
/// well-calibrated fused features, `student` the features the strategy
/// trains on (identical to `clean` for the baseline).
pub fn step_gradient(
    model: &ToyModel,
    clean: &FeatureMatrix,
    student: &FeatureMatrix,
    labels: &LabelArray,
    strategy: Strategy,
    kd_segmentation: SegmentationPass,
    loss: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; model.weights.len()];
    let p = model.forward(student)?;
    let value = match (strategy, kd_segmentation) {
        (Strategy::Baseline | Strategy::DataAugmentation, _) => {
            let out = total_loss(&p, None, labels, &LossConfig { lambda2: 0.0, ..loss.clone() })?;
            model.backward(student, &p, &out.grad, &mut grad);
            out.loss
        }
        (Strategy::Distillation, SegmentationPass::Perturbed) => {
            let teacher = model.forward(clean)?;
            let out = total_loss(&p, Some(&teacher), labels, loss)?;
            model.backward(student, &p, &out.grad, &mut grad);
            out.loss
        }
        (Strategy::Distillation, SegmentationPass::WellCalibrated) => {
            let teacher = model.forward(clean)?;
            let seg = total_loss(&teacher, None, labels, &LossConfig { lambda2: 0.0, ..loss.clone() })?;
            model.backward(clean, &teacher, &seg.grad, &mut grad);
            let kd = total_loss(&p, Some(&teacher), labels, &LossConfig { lambda1: 0.0, ..loss.clone() })?;
            model.backward(student, &p, &kd.grad, &mut grad);
            seg.loss + kd.loss
        }
    };
    Ok((value, grad))
}

struct Prepared {
    lidar: FeatureMatrix,
    clean: FeatureMatrix,
}

/// Trains a [`ToyModel`] on `scenes`. Deterministic given the config.
pub fn train(scenes: &[SyntheticScene], cfg: &TrainConfig) -> Result<ToyModel> {
    cfg.validate()?;
    let first = scenes
        .first()
        .ok_or_else(|| Error::InvalidInput("training needs at least one scene".into()))?;
    let n_cls = first.labels.n_cls();
    let cameras = first.rig.len();
    let channels = first.maps.first().map_or(0, |m| m.channels());
    let mut loss_cfg = cfg.loss.clone();
    if cfg.balance_classes {
        loss_cfg.class_weights = balanced_weights(scenes, n_cls);
    }
    if cfg.strategy != Strategy::Distillation {
        loss_cfg.lambda2 = 0.0;
    }
    loss_cfg.validate(n_cls)?;

    let prepared = scenes
        .iter()
        .map(|s| {
            let lidar = lidar_features(&s.cloud)?;
            let clean = fuse(&lidar, &sample_rig(&s.cloud, &s.rig, &s.maps)?)?.features;
            Ok(Prepared { lidar, clean })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut model = ToyModel::zeros(prepared[0].lidar.cols(), cameras, channels, n_cls, cfg.use_camera);
    let mut velocity = vec![0.0; model.weights.len()];
    let mut grad = vec![0.0; model.weights.len()];
    let perturbs = cfg.use_camera && cfg.strategy != Strategy::Baseline;

    for epoch in 0..cfg.epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut epoch_loss = 0.0;
        for (si, (scene, prep)) in scenes.iter().zip(&prepared).enumerate() {
            let perturbed;
            let student_x = if perturbs {
                let frame_key = (epoch * scenes.len() + si) as u64;
                let rig = scene.rig.perturbed_at_level(cfg.train_level, cfg.seed, frame_key)?;
                perturbed = fuse(&prep.lidar, &sample_rig(&scene.cloud, &rig, &scene.maps)?)?.features;
                &perturbed
            } else {
                &prep.clean
            };
            let (loss, step) =
                step_gradient(&model, &prep.clean, student_x, &scene.labels, cfg.strategy, cfg.kd_segmentation, &loss_cfg)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("epoch {epoch}, scene {si}: loss {loss}")));
            }
            epoch_loss += loss;
            grad.iter_mut().zip(&step).for_each(|(g, s)| *g += s);
        }
        let scale = 1.0 / scenes.len() as f64;
        for ((w, v), g) in model.weights.iter_mut().zip(&mut velocity).zip(&grad) {
            *v = cfg.momentum * *v - cfg.learning_rate * g * scale;
            *w += *v;
        }
        if model.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Diverged(format!(
                "epoch {epoch}: non-finite weights (mean loss {})",
                epoch_loss * scale
            )));
        }
    }
    Ok(model)
}

/// Trained models compared by [`evaluate_ordering`].
pub struct ModelSet {
    pub baseline: ToyModel,
    pub da: ToyModel,
    pub kd: ToyModel,
    pub lidar_only: ToyModel,
}

impl ModelSet {
    /// Trains all four models on the same scenes with `base` settings.
    pub fn train_all(scenes: &[SyntheticScene], seed: u64) -> Result<Self> {
        Ok(Self {
            baseline: train(scenes, &TrainConfig::new(Strategy::Baseline, seed))?,
            da: train(scenes, &TrainConfig::new(Strategy::DataAugmentation, seed))?,
            kd: train(scenes, &TrainConfig::new(Strategy::Distillation, seed))?,
            lidar_only: train(scenes, &TrainConfig::lidar_only(seed))?,
        })
    }
}

/// mIoU per model at levels 0..=3.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MiouTable {
    pub baseline: [f64; 4],
    pub da: [f64; 4],
    pub kd: [f64; 4],
    pub lidar_only: [f64; 4],
}

impl MiouTable {
    pub fn mean(tables: &[MiouTable]) -> MiouTable {
        let mut out = MiouTable::default();
        let n = tables.len().max(1) as f64;
        for t in tables {
            for l in 0..4 {
                out.baseline[l] += t.baseline[l] / n;
                out.da[l] += t.da[l] / n;
                out.kd[l] += t.kd[l] / n;
                out.lidar_only[l] += t.lidar_only[l] / n;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderingCheck {
    pub name: &'static str,
    pub description: &'static str,
    pub lhs: f64,
    pub rhs: f64,
    pub passed: bool,
}

/// The pairwise orderings expected of the four models.
pub fn ordering_checks(t: &MiouTable) -> Vec<OrderingCheck> {
    let check = |name, description, lhs: f64, rhs: f64, passed: bool| OrderingCheck {
        name,
        description,
        lhs,
        rhs,
        passed,
    };
    vec![
        check("a", "baseline L0 ≥ lidar-only + 0.05", t.baseline[0], t.lidar_only[0], t.baseline[0] >= t.lidar_only[0] + 0.05),
        check("b", "baseline L3 < lidar-only", t.baseline[3], t.lidar_only[3], t.baseline[3] < t.lidar_only[3]),
        check("c", "da L3 ≥ baseline L3 + 0.03", t.da[3], t.baseline[3], t.da[3] >= t.baseline[3] + 0.03),
        check("d", "da L0 < baseline L0", t.da[0], t.baseline[0], t.da[0] < t.baseline[0]),
        check("e1", "kd L0 ≥ da L0", t.kd[0], t.da[0], t.kd[0] >= t.da[0]),
        check("e2", "kd L3 ≥ baseline L3 + 0.03", t.kd[3], t.baseline[3], t.kd[3] >= t.baseline[3] + 0.03),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderingReport {
    pub table: MiouTable,
    pub checks: Vec<OrderingCheck>,
    pub runs: Vec<(&'static str, BenchmarkRun)>,
}

/// Benchmarks every model over levels 0..=3 on `frames`.
pub fn evaluate_ordering(models: &ModelSet, frames: &[Frame], seed: u64) -> Result<OrderingReport> {
    let mut table = MiouTable::default();
    let mut runs = Vec::new();
    for (name, model, slot) in [
        ("baseline", &models.baseline, &mut table.baseline),
        ("da", &models.da, &mut table.da),
        ("kd", &models.kd, &mut table.kd),
        ("lidar_only", &models.lidar_only, &mut table.lidar_only),
    ] {
        let run = weak_calib_benchmark(model, frames, &PerturbationLevel::ALL, seed, DisturbanceMode::PerFrameCamera)?;
        for level in PerturbationLevel::ALL {
            slot[usize::from(level.index())] = run.miou_at(level).unwrap_or(0.0);
        }
        runs.push((name, run));
    }
    Ok(OrderingReport {
        checks: ordering_checks(&table),
        table,
        runs,
    })
}

pub const ORDERING_TRAIN_SCENES: u64 = 3;
pub const ORDERING_EVAL_SCENES: u64 = 3;

/// `gen_scene` for each seed, generated in parallel.
pub fn gen_scenes(seeds: &[u64]) -> Result<Vec<SyntheticScene>> {
    seeds.par_iter().map(|&s| gen_scene(s)).collect()
}

/// Full ordering experiment for one seed: trains the four models on fresh
/// scenes and benchmarks them on held-out ones.
pub fn ordering_experiment(seed: u64) -> Result<OrderingReport> {
    let base = seed.wrapping_mul(100);
    let train_ids: Vec<u64> = (0..ORDERING_TRAIN_SCENES).map(|i| base + i).collect();
    let eval_ids: Vec<u64> = (0..ORDERING_EVAL_SCENES).map(|i| base + 50 + i).collect();
    let train_scenes = gen_scenes(&train_ids)?;
    let frames: Vec<Frame> = gen_scenes(&eval_ids)?
        .iter()
        .enumerate()
        .map(|(i, s)| s.to_frame(i as u64))
        .collect();
    let models = ModelSet::train_all(&train_scenes, seed)?;
    evaluate_ordering(&models, &frames, seed)
}
