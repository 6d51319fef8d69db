//! Projection overlays written as binary PPM images.

use std::io::Write;

use fuselab::calib::{CameraCalib, PixelProjection};
use fuselab::fusion::FeatureMap;
use fuselab::pointcloud::{LabelArray, PointCloud};

/// Dot colour for points without labels.
pub const UNLABELLED: [u8; 3] = [255, 255, 255];

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

const CHECKER_SIZE: usize = 16;
const CHECKER_SHADES: [u8; 2] = [48, 80];

pub fn class_color(class: usize) -> [u8; 3] {
    PALETTE[class % PALETTE.len()]
}

/// An RGB raster, rows top to bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    pub fn checkerboard(width: usize, height: usize) -> Self {
        let mut rgb = Vec::with_capacity(width * height * 3);
        for row in 0..height {
            for col in 0..width {
                let shade = CHECKER_SHADES[(row / CHECKER_SIZE + col / CHECKER_SIZE) % 2];
                rgb.extend_from_slice(&[shade; 3]);
            }
        }
        Self { width, height, rgb }
    }

    /// Grey-scale of channel 0, min-max normalized and upsampled by nearest
    /// cell (pixel `(u, v)` reads cell `(round(v / stride), round(u / stride))`).
    pub fn from_feature_map(map: &FeatureMap, width: usize, height: usize) -> Self {
        let plane: Vec<f32> = (0..map.height())
            .flat_map(|r| (0..map.width()).map(move |c| (r, c)))
            .map(|(r, c)| map.get(0, r, c))
            .collect();
        let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let stride = f64::from(map.stride());
        let mut rgb = Vec::with_capacity(width * height * 3);
        for v in 0..height {
            let row = ((v as f64 / stride).round() as usize).min(map.height() - 1);
            for u in 0..width {
                let col = ((u as f64 / stride).round() as usize).min(map.width() - 1);
                let shade = ((map.get(0, row, col) - lo) / span * 255.0).round() as u8;
                rgb.extend_from_slice(&[shade; 3]);
            }
        }
        Self { width, height, rgb }
    }

    pub fn pixel(&self, col: usize, row: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    fn put(&mut self, col: usize, row: usize, color: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.rgb[i..i + 3].copy_from_slice(&color);
    }

    pub fn write_ppm(&self, out: &mut impl Write) -> std::io::Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.rgb)
    }
}

/// Pixel holding a valid projection: `(round(u), round(v))`, clamped into
/// the image.
pub fn dot_pixel(p: &PixelProjection, width: usize, height: usize) -> Option<(usize, usize)> {
    p.valid.then(|| {
        let col = (p.u.round() as usize).min(width - 1);
        let row = (p.v.round() as usize).min(height - 1);
        (col, row)
    })
}

/// Draws one square dot of half-width `radius` per valid projection,
/// farthest first so nearer points stay on top.
pub fn draw_points(
    image: &mut Image,
    projections: &[PixelProjection],
    labels: Option<&LabelArray>,
    radius: usize,
) {
    let mut order: Vec<usize> = (0..projections.len()).filter(|&i| projections[i].valid).collect();
    order.sort_by(|&a, &b| projections[b].depth.total_cmp(&projections[a].depth));
    for i in order {
        let Some((col, row)) = dot_pixel(&projections[i], image.width, image.height) else {
            continue;
        };
        let color = labels.map_or(UNLABELLED, |l| class_color(l.get(i)));
        let rows = row.saturating_sub(radius)..=(row + radius).min(image.height - 1);
        for r in rows {
            for c in col.saturating_sub(radius)..=(col + radius).min(image.width - 1) {
                image.put(c, r, color);
            }
        }
    }
}

pub fn render(
    cloud: &PointCloud,
    labels: Option<&LabelArray>,
    camera: &CameraCalib,
    background: Option<&FeatureMap>,
    radius: usize,
) -> Image {
    let (width, height) = (camera.width as usize, camera.height as usize);
    let mut image = match background {
        Some(map) => Image::from_feature_map(map, width, height),
        None => Image::checkerboard(width, height),
    };
    draw_points(&mut image, &camera.project(cloud), labels, radius);
    image
}
