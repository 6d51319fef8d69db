//! Calibration model, projection and the weak-calibration disturbance model.
//!
//! Conventions: column vectors, right-handed frames, angles in degrees at the
//! API boundary. Extrinsics map LiDAR coordinates into a camera frame whose Z
//! axis is the optical axis. A disturbance `E = Ex · Ey · Ez` is applied by
//! right multiplication, `T' = T · E`, so it rotates points in the LiDAR frame
//! before the original extrinsics act on them. Translation is never perturbed.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;

use crate::io_util::{read_file, write_file};
use crate::pointcloud::PointCloud;
use crate::{Error, Result};

/// Points closer than this to the image plane (camera-frame Z, metres) are
/// flagged invalid.
pub const MIN_DEPTH: f64 = 1e-6;

/// Entrywise tolerance for `RᵀR = I` and `det R = 1`.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

/// Largest disturbance angle accepted, in degrees.
pub const MAX_DISTURBANCE_DEG: f64 = 45.0;

/// Projective camera matrix, 3×4, pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    matrix: Matrix3x4<f64>,
}

impl CameraIntrinsics {
    pub fn new(matrix: Matrix3x4<f64>) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("intrinsics contain non-finite entries".into()));
        }
        if !(matrix[(0, 0)] > 0.0 && matrix[(1, 1)] > 0.0) {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive, got fx={} fy={}",
                matrix[(0, 0)],
                matrix[(1, 1)]
            )));
        }
        let bottom = [matrix[(2, 0)], matrix[(2, 1)], matrix[(2, 2)], matrix[(2, 3)]];
        if bottom != [0.0, 0.0, 1.0, 0.0] {
            return Err(Error::InvalidInput(format!(
                "intrinsics bottom row must be (0, 0, 1, 0), got {bottom:?}"
            )));
        }
        Ok(Self { matrix })
    }

    /// Pinhole intrinsics with zero skew and a zero fourth column.
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        #[rustfmt::skip]
        let m = Matrix3x4::new(
            fx, 0.0, cx, 0.0,
            0.0, fy, cy, 0.0,
            0.0, 0.0, 1.0, 0.0,
        );
        Self::new(m)
    }

    pub fn matrix(&self) -> &Matrix3x4<f64> {
        &self.matrix
    }

    pub fn fx(&self) -> f64 {
        self.matrix[(0, 0)]
    }

    pub fn fy(&self) -> f64 {
        self.matrix[(1, 1)]
    }

    pub fn cx(&self) -> f64 {
        self.matrix[(0, 2)]
    }

    pub fn cy(&self) -> f64 {
        self.matrix[(1, 2)]
    }
}

/// Rigid LiDAR-to-camera transform stored as a 4×4 homogeneous matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    matrix: Matrix4<f64>,
}

impl Extrinsics {
    pub fn new(matrix: Matrix4<f64>) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("extrinsics contain non-finite entries".into()));
        }
        let bottom = [matrix[(3, 0)], matrix[(3, 1)], matrix[(3, 2)], matrix[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidInput(format!(
                "extrinsics bottom row must be (0, 0, 0, 1), got {bottom:?}"
            )));
        }
        let rotation: Matrix3<f64> = matrix.fixed_view::<3, 3>(0, 0).into_owned();
        check_rotation(&rotation)?;
        Ok(Self { matrix })
    }

    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self::new(m)
    }

    pub fn identity() -> Self {
        Self {
            matrix: Matrix4::identity(),
        }
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }
}

/// Fails unless `r` is orthonormal with unit determinant within [`ORTHONORMAL_TOL`].
pub fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    let gram = r.transpose() * r - Matrix3::identity();
    let worst = gram.amax();
    if worst > ORTHONORMAL_TOL {
        return Err(Error::InvalidInput(format!(
            "rotation is not orthonormal (max |RᵀR - I| = {worst:e})"
        )));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > ORTHONORMAL_TOL {
        return Err(Error::InvalidInput(format!("rotation determinant is {det}, expected 1")));
    }
    Ok(())
}

/// One camera of a rig.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraCalib {
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: Extrinsics,
    pub width: u32,
    pub height: u32,
}

impl CameraCalib {
    pub fn project(&self, cloud: &PointCloud) -> Vec<PixelProjection> {
        project_points(cloud, &self.intrinsics, &self.extrinsics, self.width, self.height)
    }
}

/// Ordered set of calibrated cameras sharing one LiDAR.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRig {
    cameras: Vec<CameraCalib>,
}

impl CalibrationRig {
    pub fn new(cameras: Vec<CameraCalib>) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::InvalidInput("a rig needs at least one camera".into()));
        }
        if let Some(i) = cameras.iter().position(|c| c.width == 0 || c.height == 0) {
            return Err(Error::InvalidInput(format!("camera {i} has an empty image")));
        }
        Ok(Self { cameras })
    }

    pub fn cameras(&self) -> &[CameraCalib] {
        &self.cameras
    }

    pub fn camera(&self, idx: usize) -> Result<&CameraCalib> {
        self.cameras.get(idx).ok_or_else(|| {
            Error::InvalidInput(format!(
                "camera index {idx} out of range for a rig with {} cameras",
                self.cameras.len()
            ))
        })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// Replaces every camera's extrinsics by `T · E(spec_i)`.
    pub fn perturbed(&self, specs: &[DisturbanceSpec]) -> Result<Self> {
        if specs.len() != self.cameras.len() {
            return Err(Error::Shape(format!(
                "{} disturbances for {} cameras",
                specs.len(),
                self.cameras.len()
            )));
        }
        let cameras = self
            .cameras
            .iter()
            .zip(specs)
            .map(|(cam, spec)| {
                Ok(CameraCalib {
                    extrinsics: perturb_extrinsics(&cam.extrinsics, spec)?,
                    ..cam.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cameras })
    }

    /// Perturbs each camera with its own draw from `sample_disturbance`.
    pub fn perturbed_at_level(
        &self,
        level: PerturbationLevel,
        seed: u64,
        frame_id: u64,
    ) -> Result<Self> {
        let specs: Vec<_> = (0..self.cameras.len())
            .map(|cam| sample_disturbance(level, seed, frame_id, cam as u64))
            .collect();
        self.perturbed(&specs)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: RigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let cameras = file
            .camera
            .into_iter()
            .enumerate()
            .map(|(i, entry)| entry.into_camera().map_err(|e| Error::Config(format!("camera {i}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(cameras).map_err(|e| Error::Config(e.to_string()))
    }

    /// Serializes every matrix entry with 17 significant digits, which
    /// round-trips `f64` exactly.
    pub fn to_toml_string(&self) -> String {
        let mut out = String::from("# fuselab calibration rig\n");
        for cam in &self.cameras {
            out.push_str("\n[[camera]]\n");
            let _ = writeln!(out, "width = {}", cam.width);
            let _ = writeln!(out, "height = {}", cam.height);
            // nalgebra storage is column-major, so the transpose's storage is row-major.
            let intr = cam.intrinsics.matrix().transpose();
            let extr = cam.extrinsics.matrix().transpose();
            let _ = writeln!(out, "intrinsics = {}", format_array(intr.as_slice()));
            let _ = writeln!(out, "extrinsics = {}", format_array(extr.as_slice()));
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_toml_string().as_bytes())
    }
}

fn format_array(values: &[f64]) -> String {
    let items: Vec<String> = values.iter().map(|v| format!("{v:.16e}")).collect();
    format!("[{}]", items.join(", "))
}

#[derive(Deserialize)]
struct RigFile {
    #[serde(default)]
    camera: Vec<CameraEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraEntry {
    width: u32,
    height: u32,
    intrinsics: Vec<f64>,
    extrinsics: Vec<f64>,
}

impl CameraEntry {
    fn into_camera(self) -> Result<CameraCalib> {
        if self.intrinsics.len() != 12 {
            return Err(Error::Config(format!(
                "intrinsics need 12 numbers, got {}",
                self.intrinsics.len()
            )));
        }
        if self.extrinsics.len() != 16 {
            return Err(Error::Config(format!(
                "extrinsics need 16 numbers, got {}",
                self.extrinsics.len()
            )));
        }
        Ok(CameraCalib {
            intrinsics: CameraIntrinsics::new(Matrix3x4::from_row_slice(&self.intrinsics))?,
            extrinsics: Extrinsics::new(Matrix4::from_row_slice(&self.extrinsics))?,
            width: self.width,
            height: self.height,
        })
    }
}

/// Rotation angles in degrees about the X, Y and Z axes.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DisturbanceSpec {
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
}

impl DisturbanceSpec {
    pub fn new(rx: f64, ry: f64, rz: f64) -> Result<Self> {
        let spec = Self { rx, ry, rz };
        spec.validate()?;
        Ok(spec)
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        for (axis, angle) in [("x", self.rx), ("y", self.ry), ("z", self.rz)] {
            if !angle.is_finite() {
                return Err(Error::InvalidInput(format!("angle about {axis} is not finite")));
            }
            if angle.abs() > MAX_DISTURBANCE_DEG {
                return Err(Error::InvalidInput(format!(
                    "angle about {axis} is {angle}°, beyond ±{MAX_DISTURBANCE_DEG}°"
                )));
            }
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.rx.abs().max(self.ry.abs()).max(self.rz.abs())
    }
}

/// Weak-calibration severity. Level 0 is the unperturbed calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PerturbationLevel {
    L0,
    L1,
    L2,
    L3,
}

impl PerturbationLevel {
    pub const ALL: [PerturbationLevel; 4] = [Self::L0, Self::L1, Self::L2, Self::L3];

    pub fn new(level: u8) -> Result<Self> {
        match level {
            0 => Ok(Self::L0),
            1 => Ok(Self::L1),
            2 => Ok(Self::L2),
            3 => Ok(Self::L3),
            other => Err(Error::InvalidInput(format!("perturbation level {other} not in 0..=3"))),
        }
    }

    pub fn index(self) -> u8 {
        self as u8
    }

    /// Symmetric bound on each angle, in degrees.
    pub fn range_deg(self) -> f64 {
        match self {
            Self::L0 => 0.0,
            Self::L1 => 1.0,
            Self::L2 => 2.0,
            Self::L3 => 4.0,
        }
    }
}

impl std::fmt::Display for PerturbationLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.index())
    }
}

impl std::str::FromStr for PerturbationLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let n: u8 = s
            .trim()
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad perturbation level {s:?}")))?;
        Self::new(n)
    }
}

/// A projected point. `u` is the column and `v` the row coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelProjection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

impl PixelProjection {
    pub const INVALID: PixelProjection = PixelProjection {
        u: f64::NAN,
        v: f64::NAN,
        depth: f64::NAN,
        valid: false,
    };
}

fn rot_x(rad: f64) -> Matrix3<f64> {
    let (s, c) = rad.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(rad: f64) -> Matrix3<f64> {
    let (s, c) = rad.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(rad: f64) -> Matrix3<f64> {
    let (s, c) = rad.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Builds `E = Ex(rx) · Ey(ry) · Ez(rz)` as a homogeneous matrix with zero
/// translation. Any finite angle is accepted here; the ±45° bound applies to
/// specs built with [`DisturbanceSpec::new`].
pub fn compose_disturbance(spec: &DisturbanceSpec) -> Result<Matrix4<f64>> {
    for angle in [spec.rx, spec.ry, spec.rz] {
        if !angle.is_finite() {
            return Err(Error::InvalidInput(format!("disturbance angle {angle} is not finite")));
        }
    }
    let r = rot_x(spec.rx.to_radians()) * rot_y(spec.ry.to_radians()) * rot_z(spec.rz.to_radians());
    Ok(r.to_homogeneous())
}

/// Returns `T · E`.
pub fn perturb_extrinsics(t: &Extrinsics, spec: &DisturbanceSpec) -> Result<Extrinsics> {
    let e = compose_disturbance(spec)?;
    Extrinsics::new(t.matrix() * e)
}

/// Draws the three angles uniformly from `[-range, range]` of `level`.
///
/// The generator is ChaCha8 seeded with `seed`, stream `frame_id`, and a
/// word offset derived from `camera_id`. The same unit draws are scaled by
/// each level's range, so samples for one (seed, frame, camera) are nested
/// across levels.
pub fn sample_disturbance(
    level: PerturbationLevel,
    seed: u64,
    frame_id: u64,
    camera_id: u64,
) -> DisturbanceSpec {
    let range = level.range_deg();
    if range == 0.0 {
        return DisturbanceSpec::zero();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame_id);
    rng.set_word_pos(u128::from(camera_id) << 32);
    let mut draw = || rng.random_range(-1.0..=1.0) * range;
    let rx = draw();
    let ry = draw();
    let rz = draw();
    DisturbanceSpec { rx, ry, rz }
}

/// Projects every point with `λ [u v 1]ᵀ = I · T · [x y z 1]ᵀ`.
///
/// The output is index-aligned with the cloud; points behind the camera or
/// outside `[0, width) × [0, height)` are flagged invalid.
pub fn project_points(
    cloud: &PointCloud,
    intr: &CameraIntrinsics,
    extr: &Extrinsics,
    width: u32,
    height: u32,
) -> Vec<PixelProjection> {
    let mut out = vec![PixelProjection::INVALID; cloud.len()];
    project_points_into(cloud, intr, extr, width, height, &mut out);
    out
}

/// Same as [`project_points`], writing into a caller-provided buffer.
pub fn project_points_into(
    cloud: &PointCloud,
    intr: &CameraIntrinsics,
    extr: &Extrinsics,
    width: u32,
    height: u32,
    out: &mut [PixelProjection],
) {
    assert_eq!(out.len(), cloud.len(), "projection buffer length");
    let p: Matrix3x4<f64> = intr.matrix() * extr.matrix();
    let (w, h) = (f64::from(width), f64::from(height));
    let project = |xyz: &[f32; 3]| {
        let x = Vector4::new(f64::from(xyz[0]), f64::from(xyz[1]), f64::from(xyz[2]), 1.0);
        let hp = p * x;
        let depth = hp[2];
        if depth <= MIN_DEPTH {
            return PixelProjection {
                u: f64::NAN,
                v: f64::NAN,
                depth,
                valid: false,
            };
        }
        let u = hp[0] / depth;
        let v = hp[1] / depth;
        let valid = (0.0..w).contains(&u) && (0.0..h).contains(&v);
        PixelProjection { u, v, depth, valid }
    };
    out.par_iter_mut()
        .with_min_len(4096)
        .zip(cloud.xyz().par_iter())
        .for_each(|(slot, xyz)| *slot = project(xyz));
}
