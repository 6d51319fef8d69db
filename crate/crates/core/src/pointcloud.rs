//! Point clouds, per-point labels, the `FLPC` file format and training-time
//! augmentation.
//!
//! `FLPC` layout, all little-endian:
//!
//! | field   | type  | notes                                   |
//! |---------|-------|-----------------------------------------|
//! | magic   | 4 B   | `FLPC`                                  |
//! | version | u16   | 1                                       |
//! | count   | u64   | number of points                        |
//! | flags   | u16   | bit0 labels present, bit1 intensity     |
//! | records | f32   | x, y, z\[, intensity\] per point        |
//! | labels  | u16   | one per point, only when bit0 is set    |

use std::path::Path;

use nalgebra::{Matrix4, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::io_util::{f32s_from_le, read_file, write_file, ByteReader};
use crate::{Error, Result};

pub const CLOUD_MAGIC: &[u8; 4] = b"FLPC";
pub const CLOUD_VERSION: u16 = 1;
const FLAG_LABELS: u16 = 1;
const FLAG_INTENSITY: u16 = 1 << 1;

/// N points with XYZ coordinates (metres) and reflection intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    xyz: Vec<[f32; 3]>,
    intensity: Vec<f32>,
}

impl PointCloud {
    pub fn new(xyz: Vec<[f32; 3]>, intensity: Vec<f32>) -> Result<Self> {
        if xyz.is_empty() {
            return Err(Error::InvalidInput("point cloud is empty".into()));
        }
        if xyz.len() != intensity.len() {
            return Err(Error::Shape(format!(
                "{} points but {} intensities",
                xyz.len(),
                intensity.len()
            )));
        }
        if let Some(i) = xyz.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidInput(format!("point {i} has a non-finite coordinate")));
        }
        if let Some(i) = intensity.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("point {i} has a non-finite intensity")));
        }
        Ok(Self { xyz, intensity })
    }

    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }

    pub fn xyz(&self) -> &[[f32; 3]] {
        &self.xyz
    }

    pub fn intensity(&self) -> &[f32] {
        &self.intensity
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        self.xyz[i].map(f64::from)
    }

    /// Applies an affine 4×4 transform to every point.
    pub fn transformed(&self, m: &Matrix4<f64>) -> Self {
        let xyz = self
            .xyz
            .iter()
            .map(|p| {
                let q = m * Vector4::new(f64::from(p[0]), f64::from(p[1]), f64::from(p[2]), 1.0);
                [q[0] as f32, q[1] as f32, q[2] as f32]
            })
            .collect();
        Self {
            xyz,
            intensity: self.intensity.clone(),
        }
    }
}

/// Per-point class labels in `[0, n_cls)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelArray {
    labels: Vec<u16>,
    n_cls: usize,
}

impl LabelArray {
    pub fn new(labels: Vec<u16>, n_cls: usize) -> Result<Self> {
        if n_cls == 0 || n_cls > usize::from(u16::MAX) + 1 {
            return Err(Error::InvalidInput(format!("class count {n_cls} out of range")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| usize::from(l) >= n_cls) {
            return Err(Error::LabelOutOfRange {
                label: usize::from(bad),
                n_cls,
            });
        }
        Ok(Self { labels, n_cls })
    }

    pub fn from_indices(labels: &[usize], n_cls: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_cls) {
            return Err(Error::LabelOutOfRange { label: bad, n_cls });
        }
        Self::new(labels.iter().map(|&l| l as u16).collect(), n_cls)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_cls(&self) -> usize {
        self.n_cls
    }

    pub fn as_slice(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, i: usize) -> usize {
        usize::from(self.labels[i])
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = usize> + '_ {
        self.labels.iter().map(|&l| usize::from(l))
    }
}

/// Geometric augmentation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationConfig {
    pub flip_x: bool,
    pub flip_y: bool,
    pub scale_range: (f64, f64),
    pub rotate_z: bool,
    /// Standard deviation of per-coordinate Gaussian noise, metres.
    pub jitter_sigma: f64,
}

impl Default for AugmentationConfig {
    /// XY flips, scale in \[0.95, 1.05\], free Z rotation, σ = 0.02 m.
    fn default() -> Self {
        Self {
            flip_x: true,
            flip_y: true,
            scale_range: (0.95, 1.05),
            rotate_z: true,
            jitter_sigma: 0.02,
        }
    }
}

impl AugmentationConfig {
    pub fn disabled() -> Self {
        Self {
            flip_x: false,
            flip_y: false,
            scale_range: (1.0, 1.0),
            rotate_z: false,
            jitter_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidInput(format!("bad scale range [{lo}, {hi}]")));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::InvalidInput(format!("bad jitter sigma {}", self.jitter_sigma)));
        }
        Ok(())
    }
}

/// Flip, scale, rotate about Z, then jitter, in that order.
///
/// Returns the augmented cloud and the affine transform of the noise-free
/// part; invert it to recover the original frame (e.g. for projection with
/// the unaugmented calibration). The generator is ChaCha8 seeded with
/// `rng_seed`.
pub fn augment(
    cloud: &PointCloud,
    cfg: &AugmentationConfig,
    rng_seed: u64,
) -> Result<(PointCloud, Matrix4<f64>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    let mut flip = Matrix4::identity();
    if cfg.flip_x && rng.random_bool(0.5) {
        flip[(0, 0)] = -1.0;
    }
    if cfg.flip_y && rng.random_bool(0.5) {
        flip[(1, 1)] = -1.0;
    }
    let (lo, hi) = cfg.scale_range;
    let s = if lo == hi { lo } else { rng.random_range(lo..hi) };
    let scale = Matrix4::new_scaling(s);
    let rotate = if cfg.rotate_z {
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        nalgebra::Rotation3::from_axis_angle(&nalgebra::Vector3::z_axis(), theta).to_homogeneous()
    } else {
        Matrix4::identity()
    };
    let transform = rotate * scale * flip;

    let mut out = cloud.transformed(&transform);
    if cfg.jitter_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.jitter_sigma)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        for p in &mut out.xyz {
            for c in p.iter_mut() {
                *c = (f64::from(*c) + normal.sample(&mut rng)) as f32;
            }
        }
    }
    Ok((out, transform))
}

pub fn encode_cloud(cloud: &PointCloud, labels: Option<&LabelArray>) -> Result<Vec<u8>> {
    if let Some(l) = labels {
        if l.len() != cloud.len() {
            return Err(Error::CountMismatch(format!(
                "{} labels for {} points",
                l.len(),
                cloud.len()
            )));
        }
    }
    let n = cloud.len();
    let label_bytes = if labels.is_some() { 2 * n } else { 0 };
    let mut buf = Vec::with_capacity(16 + 16 * n + label_bytes);
    buf.extend_from_slice(CLOUD_MAGIC);
    buf.extend_from_slice(&CLOUD_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    let flags = FLAG_INTENSITY | if labels.is_some() { FLAG_LABELS } else { 0 };
    buf.extend_from_slice(&flags.to_le_bytes());
    for (p, i) in cloud.xyz.iter().zip(&cloud.intensity) {
        for v in p.iter().chain(std::iter::once(i)) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(l) = labels {
        for v in l.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

/// Decodes an `FLPC` buffer; labels are validated against `n_cls`.
pub fn decode_cloud(bytes: &[u8], n_cls: usize) -> Result<(PointCloud, Option<LabelArray>)> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(CLOUD_MAGIC)?;
    let version = r.header_u16()?;
    if version != CLOUD_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.header_u64()?;
    let flags = r.header_u16()?;
    if flags & !(FLAG_LABELS | FLAG_INTENSITY) != 0 {
        return Err(Error::MalformedHeader(format!("unknown flag bits {flags:#06x}")));
    }
    if count == 0 {
        return Err(Error::MalformedHeader("point count is zero".into()));
    }
    let n = usize::try_from(count)
        .ok()
        .filter(|&n| n <= bytes.len())
        .ok_or(Error::Truncated {
            expected: usize::MAX,
            found: bytes.len(),
        })?;
    let has_labels = flags & FLAG_LABELS != 0;
    let has_intensity = flags & FLAG_INTENSITY != 0;
    let stride = if has_intensity { 4 } else { 3 };
    let record_bytes = 4 * stride * n;
    let payload_len = record_bytes + if has_labels { 2 * n } else { 0 };
    let payload = r.payload(payload_len)?;

    let mut xyz = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    let values: Vec<f32> = f32s_from_le(&payload[..record_bytes]).collect();
    for rec in values.chunks_exact(stride) {
        xyz.push([rec[0], rec[1], rec[2]]);
        intensity.push(if has_intensity { rec[3] } else { 0.0 });
    }
    let cloud = PointCloud::new(xyz, intensity)?;
    let labels = if has_labels {
        let raw = payload[record_bytes..]
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        Some(LabelArray::new(raw, n_cls)?)
    } else {
        None
    };
    Ok((cloud, labels))
}

pub fn save_cloud(cloud: &PointCloud, labels: Option<&LabelArray>, path: &Path) -> Result<()> {
    write_file(path, &encode_cloud(cloud, labels)?)
}

pub fn load_cloud(path: &Path, n_cls: usize) -> Result<(PointCloud, Option<LabelArray>)> {
    decode_cloud(&read_file(path)?, n_cls)
}
