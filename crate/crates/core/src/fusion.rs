//! Camera feature sampling at projected LiDAR points and feature concatenation.
//!
//! Feature maps are indexed in map coordinates: a projection at pixel
//! `(u, v)` samples the map at `(u / stride, v / stride)`, with `u` running
//! along columns and `v` along rows. Neighbours outside the map contribute
//! zero.

use std::path::Path;

use rayon::prelude::*;

use crate::calib::{CalibrationRig, CameraCalib, PixelProjection};
use crate::io_util::{f32s_from_le, read_file, write_file, ByteReader};
use crate::pointcloud::PointCloud;
use crate::{Error, Result};

pub const MAP_MAGIC: &[u8; 4] = b"FLFM";
pub const MAP_VERSION: u16 = 1;

/// Dense per-camera feature tensor of logical shape C×H×W.
///
/// Values are stored channel-last so the channels of one location are
/// contiguous; [`FeatureMap::from_chw`] and [`FeatureMap::to_chw`] convert
/// from and to the channel-major order used on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    camera_id: u16,
    channels: usize,
    height: usize,
    width: usize,
    stride: u16,
    hwc: Vec<f32>,
}

impl FeatureMap {
    pub fn from_chw(
        camera_id: u16,
        channels: usize,
        height: usize,
        width: usize,
        stride: u16,
        chw: &[f32],
    ) -> Result<Self> {
        let mut map = Self::zeros(camera_id, channels, height, width, stride)?;
        if chw.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}×{height}×{width} map",
                chw.len()
            )));
        }
        if chw.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("feature map has non-finite values".into()));
        }
        let plane = height * width;
        for c in 0..channels {
            for (pix, &v) in chw[c * plane..(c + 1) * plane].iter().enumerate() {
                map.hwc[pix * channels + c] = v;
            }
        }
        Ok(map)
    }

    pub fn zeros(
        camera_id: u16,
        channels: usize,
        height: usize,
        width: usize,
        stride: u16,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "feature map shape {channels}×{height}×{width} has an empty axis"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidInput("feature map stride must be ≥ 1".into()));
        }
        Ok(Self {
            camera_id,
            channels,
            height,
            width,
            stride,
            hwc: vec![0.0; channels * height * width],
        })
    }

    pub fn camera_id(&self) -> u16 {
        self.camera_id
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn stride(&self) -> u16 {
        self.stride
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f32 {
        self.hwc[(row * self.width + col) * self.channels + c]
    }

    /// Channel vector at one location.
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.channels;
        &self.hwc[start..start + self.channels]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let start = (row * self.width + col) * self.channels;
        &mut self.hwc[start..start + self.channels]
    }

    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; self.channels * plane];
        for (pix, values) in self.hwc.chunks_exact(self.channels).enumerate() {
            for (c, &v) in values.iter().enumerate() {
                out[c * plane + pix] = v;
            }
        }
        out
    }

    /// Fails unless the map tiles the camera image exactly at its stride.
    pub fn check_camera(&self, cam: &CameraCalib) -> Result<()> {
        let s = usize::from(self.stride);
        if self.width * s != cam.width as usize || self.height * s != cam.height as usize {
            return Err(Error::Shape(format!(
                "map {}×{} at stride {s} does not cover a {}×{} image",
                self.width, self.height, cam.width, cam.height
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let channels = u16::try_from(self.channels)
            .map_err(|_| Error::InvalidInput("too many channels for FLFM".into()))?;
        let height = u32::try_from(self.height)
            .map_err(|_| Error::InvalidInput("map too tall for FLFM".into()))?;
        let width = u32::try_from(self.width)
            .map_err(|_| Error::InvalidInput("map too wide for FLFM".into()))?;
        let mut buf = Vec::with_capacity(20 + 4 * self.hwc.len());
        buf.extend_from_slice(MAP_MAGIC);
        buf.extend_from_slice(&MAP_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.camera_id.to_le_bytes());
        buf.extend_from_slice(&channels.to_le_bytes());
        buf.extend_from_slice(&height.to_le_bytes());
        buf.extend_from_slice(&width.to_le_bytes());
        buf.extend_from_slice(&self.stride.to_le_bytes());
        for v in self.to_chw() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(MAP_MAGIC)?;
        let version = r.header_u16()?;
        if version != MAP_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let camera_id = r.header_u16()?;
        let channels = usize::from(r.header_u16()?);
        let height = r.header_u32()? as usize;
        let width = r.header_u32()? as usize;
        let stride = r.header_u16()?;
        let len = channels
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::MalformedHeader("map dimensions overflow".into()))?;
        let payload = r.payload(len)?;
        let chw: Vec<f32> = f32s_from_le(payload).collect();
        Self::from_chw(camera_id, channels, height, width, stride, &chw)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}

/// Row-major `rows × cols` matrix of per-point features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}×{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    /// Copies columns `[start, end)`.
    pub fn columns(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.cols);
        let mut out = Self::zeros(self.rows, end - start);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..end]);
        }
        out
    }
}

/// Image-augmented point features, `N × (C1 + M·C2)`, LiDAR columns first.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedPointFeatures {
    pub point_dims: usize,
    pub features: FeatureMatrix,
}

impl FusedPointFeatures {
    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn dims(&self) -> usize {
        self.features.cols()
    }
}

/// Neighbour offsets (into the HWC buffer) and weights of one bilinear query.
/// Out-of-map neighbours get weight 0 and offset 0.
#[inline]
fn bilinear_taps(map: &FeatureMap, u: f64, v: f64) -> ([usize; 4], [f64; 4]) {
    let x0 = u.floor();
    let y0 = v.floor();
    let fu = u - x0;
    let fv = v - y0;
    let weights = [
        (1.0 - fu) * (1.0 - fv),
        fu * (1.0 - fv),
        (1.0 - fu) * fv,
        fu * fv,
    ];
    let (w, h) = (map.width as f64, map.height as f64);
    let mut offsets = [0usize; 4];
    let mut out_w = [0.0; 4];
    for (k, (dx, dy)) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)].into_iter().enumerate() {
        let col = x0 + dx;
        let row = y0 + dy;
        if col >= 0.0 && col < w && row >= 0.0 && row < h {
            offsets[k] = (row as usize * map.width + col as usize) * map.channels;
            out_w[k] = weights[k];
        }
    }
    (offsets, out_w)
}

#[inline]
fn sample_with<F: FnMut(usize, f64)>(map: &FeatureMap, u: f64, v: f64, mut emit: F) {
    let (o, w) = bilinear_taps(map, u, v);
    let d = &map.hwc;
    for c in 0..map.channels {
        let value = w[0] * f64::from(d[o[0] + c])
            + w[1] * f64::from(d[o[1] + c])
            + w[2] * f64::from(d[o[2] + c])
            + w[3] * f64::from(d[o[3] + c]);
        emit(c, value);
    }
}

/// Bilinear interpolation of all channels at map coordinates `(u, v)`.
pub fn bilinear_sample(map: &FeatureMap, u: f64, v: f64) -> Result<Vec<f64>> {
    if !u.is_finite() || !v.is_finite() {
        return Err(Error::InvalidInput(format!("sample location ({u}, {v}) is not finite")));
    }
    let mut out = vec![0.0; map.channels];
    sample_with(map, u, v, |c, x| out[c] = x);
    Ok(out)
}

/// Samples every camera at its projections and concatenates the per-camera
/// blocks in camera order. Invalid projections give zero blocks.
pub fn sample_all_cameras(
    maps: &[FeatureMap],
    projections: &[Vec<PixelProjection>],
) -> Result<FeatureMatrix> {
    let (n, c2) = check_sampling_shapes(maps, projections)?;
    let mut out = FeatureMatrix::zeros(n, maps.len() * c2);
    fill_camera_features(maps, projections, &mut out);
    Ok(out)
}

/// Same as [`sample_all_cameras`] but reuses `out`, which is resized as needed.
pub fn sample_all_cameras_into(
    maps: &[FeatureMap],
    projections: &[Vec<PixelProjection>],
    out: &mut FeatureMatrix,
) -> Result<()> {
    let (n, c2) = check_sampling_shapes(maps, projections)?;
    out.rows = n;
    out.cols = maps.len() * c2;
    out.data.resize(n * out.cols, 0.0);
    fill_camera_features(maps, projections, out);
    Ok(())
}

fn check_sampling_shapes(
    maps: &[FeatureMap],
    projections: &[Vec<PixelProjection>],
) -> Result<(usize, usize)> {
    if maps.is_empty() {
        return Err(Error::Shape("no feature maps".into()));
    }
    if maps.len() != projections.len() {
        return Err(Error::Shape(format!(
            "{} feature maps but {} projection lists",
            maps.len(),
            projections.len()
        )));
    }
    let c2 = maps[0].channels;
    if let Some(m) = maps.iter().find(|m| m.channels != c2) {
        return Err(Error::Shape(format!(
            "camera {} has {} channels, expected {c2}",
            m.camera_id, m.channels
        )));
    }
    let n = projections[0].len();
    if let Some(i) = projections.iter().position(|p| p.len() != n) {
        return Err(Error::Shape(format!(
            "camera {i} has {} projections, expected {n}",
            projections[i].len()
        )));
    }
    Ok((n, c2))
}

fn fill_camera_features(
    maps: &[FeatureMap],
    projections: &[Vec<PixelProjection>],
    out: &mut FeatureMatrix,
) {
    let c2 = maps[0].channels;
    let cols = out.cols;
    if cols == 0 {
        return;
    }
    out.data
        .par_chunks_mut(cols)
        .with_min_len(2048)
        .enumerate()
        .for_each(|(i, row)| {
            for (cam, (map, proj)) in maps.iter().zip(projections).enumerate() {
                let block = &mut row[cam * c2..(cam + 1) * c2];
                let p = proj[i];
                if !p.valid {
                    block.fill(0.0);
                    continue;
                }
                let s = f64::from(map.stride);
                sample_with(map, p.u / s, p.v / s, |c, x| block[c] = x as f32);
            }
        });
}

/// Projects the cloud into every camera of `rig` and samples the matching map.
pub fn sample_rig(
    cloud: &PointCloud,
    rig: &CalibrationRig,
    maps: &[FeatureMap],
) -> Result<FeatureMatrix> {
    if maps.len() != rig.len() {
        return Err(Error::Shape(format!(
            "{} feature maps for {} cameras",
            maps.len(),
            rig.len()
        )));
    }
    for (map, cam) in maps.iter().zip(rig.cameras()) {
        map.check_camera(cam)?;
    }
    let projections: Vec<_> = rig.cameras().iter().map(|cam| cam.project(cloud)).collect();
    sample_all_cameras(maps, &projections)
}

/// Row-wise concatenation `[point_features | camera_features]`.
pub fn fuse(
    point_features: &FeatureMatrix,
    camera_features: &FeatureMatrix,
) -> Result<FusedPointFeatures> {
    if point_features.rows != camera_features.rows {
        return Err(Error::Shape(format!(
            "{} point-feature rows but {} camera-feature rows",
            point_features.rows, camera_features.rows
        )));
    }
    let c1 = point_features.cols;
    let dims = c1 + camera_features.cols;
    let mut out = FeatureMatrix::zeros(point_features.rows, dims);
    for i in 0..point_features.rows {
        let row = out.row_mut(i);
        row[..c1].copy_from_slice(point_features.row(i));
        row[c1..].copy_from_slice(camera_features.row(i));
    }
    Ok(FusedPointFeatures {
        point_dims: c1,
        features: out,
    })
}
