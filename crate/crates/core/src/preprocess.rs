//! Raw frame to network input: ground removal, binary voxelization, image
//! crop/resize/normalisation and training-time augmentation.

use image::RgbImage;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::FeatureMap;

pub type Point = [f64; 3];

/// Height above the estimated ground plane below which points are dropped.
pub const GROUND_OFFSET: f64 = 0.2;
/// Percentile of point heights used as the ground estimate.
pub const GROUND_PERCENTILE: f64 = 0.05;

/// Axis-aligned box in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            min: [-36.0, -36.0, -4.0],
            max: [36.0, 36.0, 20.0],
        }
    }
}

impl Bounds {
    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            ensure!(
                self.min[a].is_finite() && self.max[a].is_finite() && self.min[a] < self.max[a],
                Validation,
                "degenerate voxel bounds on axis {a}: [{}, {}]",
                self.min[a],
                self.max[a]
            );
        }
        Ok(())
    }

    pub fn center(&self) -> Point {
        [0, 1, 2].map(|a| 0.5 * (self.min[a] + self.max[a]))
    }

    pub fn contains(&self, p: &Point) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

/// Binary occupancy grid, `x`-major with `z` contiguous.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    resolution: [usize; 3],
    bounds: Bounds,
    occupancy: Vec<u8>,
}

impl VoxelGrid {
    pub fn empty(bounds: Bounds, resolution: [usize; 3]) -> Self {
        Self {
            resolution,
            bounds,
            occupancy: vec![0; resolution.iter().product()],
        }
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn bounds(&self) -> Bounds {
        self.bounds
    }

    pub fn occupancy(&self) -> &[u8] {
        &self.occupancy
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        let [_, ry, rz] = self.resolution;
        self.occupancy[(i * ry + j) * rz + k] != 0
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&v| v != 0).count()
    }

    /// Elementwise OR of two grids with identical geometry.
    pub fn union(&self, other: &VoxelGrid) -> Result<VoxelGrid> {
        ensure!(
            self.resolution == other.resolution && self.bounds == other.bounds,
            Shape,
            "cannot union grids with different geometry"
        );
        let occupancy = self.occupancy.iter().zip(&other.occupancy).map(|(a, b)| a | b).collect();
        Ok(VoxelGrid {
            occupancy,
            ..self.clone()
        })
    }

    /// One-channel network input.
    pub fn to_feature_map(&self) -> FeatureMap {
        let data = self.occupancy.iter().map(|&v| v as f64).collect();
        FeatureMap::from_vec(1, self.resolution, data).expect("grid length matches resolution")
    }
}

/// Height of the ground plane: the 5th-percentile point height.
pub fn estimate_ground(points: &[Point]) -> Option<f64> {
    if points.is_empty() {
        return None;
    }
    let mut z: Vec<f64> = points.iter().map(|p| p[2]).collect();
    z.sort_by(f64::total_cmp);
    let idx = ((z.len() - 1) as f64 * GROUND_PERCENTILE).round() as usize;
    Some(z[idx])
}

/// Keep points strictly above `z_threshold`, preserving order.
pub fn remove_ground(points: &[Point], z_threshold: f64) -> Vec<Point> {
    points.iter().copied().filter(|p| p[2] > z_threshold).collect()
}

/// Ground removal relative to the estimated ground plane.
pub fn remove_estimated_ground(points: &[Point]) -> Vec<Point> {
    match estimate_ground(points) {
        Some(g) => remove_ground(points, g + GROUND_OFFSET),
        None => Vec::new(),
    }
}

/// Cell index of `p`, or `None` when outside the bounds. Points exactly on
/// the max face land in the last cell.
pub fn voxel_index(p: &Point, bounds: &Bounds, resolution: [usize; 3]) -> Option<[usize; 3]> {
    if !bounds.contains(p) {
        return None;
    }
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let cell = (bounds.max[a] - bounds.min[a]) / resolution[a] as f64;
        let i = ((p[a] - bounds.min[a]) / cell).floor() as usize;
        idx[a] = i.min(resolution[a] - 1);
    }
    Some(idx)
}

pub fn voxelize(points: &[Point], bounds: &Bounds, resolution: [usize; 3]) -> Result<VoxelGrid> {
    bounds.validate()?;
    ensure!(
        resolution.iter().all(|&r| r > 0),
        Validation,
        "voxel resolution must be positive, got {resolution:?}"
    );
    let mut grid = VoxelGrid::empty(*bounds, resolution);
    let [_, ry, rz] = resolution;
    for p in points {
        if let Some([i, j, k]) = voxel_index(p, bounds, resolution) {
            grid.occupancy[(i * ry + j) * rz + k] = 1;
        }
    }
    Ok(grid)
}

/// Pixel rectangle `[x, x + width) × [y, y + height)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crop {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl Crop {
    pub fn full(image: &RgbImage) -> Self {
        Self {
            x: 0,
            y: 0,
            width: image.width(),
            height: image.height(),
        }
    }
}

/// `3×H×W` image with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl NormalizedImage {
    pub fn from_vec(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        ensure!(
            pixels.len() == 3 * height * width,
            Shape,
            "normalized image {height}x{width} needs {} values, got {}",
            3 * height * width,
            pixels.len()
        );
        ensure!(
            pixels.iter().all(|v| (-1.0..=1.0).contains(v)),
            Validation,
            "normalized image values must lie in [-1, 1]"
        );
        Ok(Self { height, width, pixels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn to_feature_map(&self) -> FeatureMap {
        FeatureMap::from_vec(3, [self.height, self.width, 1], self.pixels.clone())
            .expect("image length matches shape")
    }
}

/// 8-bit value to `[-1, 1]`.
pub fn normalize_value(v: f64) -> f64 {
    v / 127.5 - 1.0
}

pub fn prepare_image(raw: &RgbImage, crop: Crop, out_size: (usize, usize)) -> Result<NormalizedImage> {
    let (out_h, out_w) = out_size;
    ensure!(out_h > 0 && out_w > 0, Validation, "output size must be positive");
    ensure!(
        crop.width > 0
            && crop.height > 0
            && crop.x as u64 + crop.width as u64 <= raw.width() as u64
            && crop.y as u64 + crop.height as u64 <= raw.height() as u64,
        Validation,
        "crop {crop:?} outside {}x{} image",
        raw.width(),
        raw.height()
    );
    let (cw, ch) = (crop.width as usize, crop.height as usize);
    let sample = |c: usize, x: usize, y: usize| -> f64 {
        raw.get_pixel(crop.x + x as u32, crop.y + y as u32)[c] as f64
    };
    // Half-pixel-centred source coordinate and the two taps around it.
    let taps = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let lerp = |a: f64, b: f64, t: f64| if a == b { a } else { a + t * (b - a) };
    let mut pixels = vec![0.0; 3 * out_h * out_w];
    for r in 0..out_h {
        let (y0, y1, ty) = taps(r, out_h, ch);
        for q in 0..out_w {
            let (x0, x1, tx) = taps(q, out_w, cw);
            for c in 0..3 {
                let top = lerp(sample(c, x0, y0), sample(c, x1, y0), tx);
                let bottom = lerp(sample(c, x0, y1), sample(c, x1, y1), tx);
                pixels[(c * out_h + r) * out_w + q] = normalize_value(lerp(top, bottom, ty)).clamp(-1.0, 1.0);
            }
        }
    }
    Ok(NormalizedImage {
        height: out_h,
        width: out_w,
        pixels,
    })
}

/// Photometric multipliers applied by [`augment`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Photometric {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Photometric {
    pub const IDENTITY: Photometric = Photometric {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Factors are drawn from `[1 - photometric, 1 + photometric]`.
    pub photometric: f64,
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            photometric: 0.2,
            jitter_sigma: 0.05,
            jitter_clip: 0.1,
        }
    }
}

/// Brightness, contrast then saturation in `[0, 1]` intensity space,
/// clamped back into `[-1, 1]`.
pub fn apply_photometric(image: &NormalizedImage, f: Photometric) -> NormalizedImage {
    let n = image.height * image.width;
    let mut u: Vec<f64> = image.pixels.iter().map(|v| (v + 1.0) * 0.5 * f.brightness).collect();
    let gray = |u: &[f64], i: usize| 0.299 * u[i] + 0.587 * u[n + i] + 0.114 * u[2 * n + i];
    let mean_gray = (0..n).map(|i| gray(&u, i)).sum::<f64>() / n.max(1) as f64;
    u.iter_mut().for_each(|v| *v = mean_gray + f.contrast * (*v - mean_gray));
    for i in 0..n {
        let g = gray(&u, i);
        for c in 0..3 {
            let v = &mut u[c * n + i];
            *v = g + f.saturation * (*v - g);
        }
    }
    let pixels = u.iter().map(|v| (2.0 * v - 1.0).clamp(-1.0, 1.0)).collect();
    NormalizedImage {
        height: image.height,
        width: image.width,
        pixels,
    }
}

/// Per-coordinate Gaussian jitter clipped to `±clip`.
pub fn jitter_points<R: Rng + ?Sized>(points: &[Point], sigma: f64, clip: f64, rng: &mut R) -> Vec<Point> {
    if sigma <= 0.0 {
        return points.to_vec();
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    points
        .iter()
        .map(|p| p.map(|v| v + normal.sample(rng).clamp(-clip, clip)))
        .collect()
}

pub fn draw_photometric<R: Rng + ?Sized>(config: &AugmentConfig, rng: &mut R) -> Photometric {
    let s = config.photometric.abs();
    let mut draw = || if s > 0.0 { rng.random_range(1.0 - s..=1.0 + s) } else { 1.0 };
    Photometric {
        brightness: draw(),
        contrast: draw(),
        saturation: draw(),
    }
}

/// Random photometric change of the image and jitter of the points. Run
/// before voxelization.
pub fn augment<R: Rng + ?Sized>(
    image: &NormalizedImage,
    points: &[Point],
    config: &AugmentConfig,
    rng: &mut R,
) -> (NormalizedImage, Vec<Point>) {
    let f = draw_photometric(config, rng);
    let image = apply_photometric(image, f);
    let points = jitter_points(points, config.jitter_sigma, config.jitter_clip, rng);
    (image, points)
}

/// Everything needed to turn a raw (image, cloud) pair into network inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InputConfig {
    /// Crop rectangle; `None` keeps the full frame.
    pub crop: Option<Crop>,
    /// Output `(height, width)` of the image branch input.
    pub image_size: (usize, usize),
    pub bounds: Bounds,
    pub resolution: [usize; 3],
    pub remove_ground: bool,
}

impl Default for InputConfig {
    fn default() -> Self {
        Self {
            crop: None,
            image_size: (300, 400),
            bounds: Bounds::default(),
            resolution: [72, 72, 48],
            remove_ground: true,
        }
    }
}

/// Network-ready inputs of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedInput {
    pub image: FeatureMap,
    pub voxels: FeatureMap,
}

impl InputConfig {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        ensure!(
            self.image_size.0 > 0 && self.image_size.1 > 0 && self.resolution.iter().all(|&r| r > 0),
            Validation,
            "image size and voxel resolution must be positive"
        );
        Ok(())
    }

    /// Crop, resize and normalise the image; remove ground, optionally
    /// augment, then voxelize the cloud.
    pub fn prepare<R: Rng + ?Sized>(
        &self,
        raw: &RgbImage,
        cloud: &[Point],
        augmentation: Option<(&AugmentConfig, &mut R)>,
    ) -> Result<PreparedInput> {
        let crop = self.crop.unwrap_or_else(|| Crop::full(raw));
        let mut image = prepare_image(raw, crop, self.image_size)?;
        let mut points = if self.remove_ground {
            remove_estimated_ground(cloud)
        } else {
            cloud.to_vec()
        };
        if let Some((config, rng)) = augmentation {
            (image, points) = augment(&image, &points, config, rng);
        }
        let grid = voxelize(&points, &self.bounds, self.resolution)?;
        Ok(PreparedInput {
            image: image.to_feature_map(),
            voxels: grid.to_feature_map(),
        })
    }

    /// Inference-mode preparation, no augmentation.
    pub fn prepare_plain(&self, raw: &RgbImage, cloud: &[Point]) -> Result<PreparedInput> {
        self.prepare::<rand_chacha::ChaCha8Rng>(raw, cloud, None)
    }
}
