//! Desk-scale synthetic datasets with controllable per-place modality
//! quality.
//!
//! Places sit on a square grid 70 m apart. Visit `r` of every place forms
//! sequence `seqRR`; each visit is displaced by at most 2.5 m from the place
//! centre. A rich image carries a place-specific pattern of rectangles and a
//! sinusoidal texture; a poor one is dark, low-contrast and noisy. A rich
//! cloud holds place-specific box structures; a poor one is the same
//! two-wall corridor everywhere plus per-visit random clutter.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{timestamp_name, write_cloud, write_image, write_poses, Frame, MemorySource, Pose};
use crate::error::{ensure, Error, Result};
use crate::preprocess::Point;

pub const PLACE_SPACING: f64 = 70.0;
pub const REVISIT_RADIUS: f64 = 2.5;
/// Height of the simulated sensor above the ground plane.
const SENSOR_HEIGHT: f64 = 1.5;
/// Horizontal half-extent of generated structure around the sensor.
const EXTENT: f64 = 14.0;
const FRAME_PERIOD: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    VisualRich,
    LidarRich,
    BothRich,
    BothPoor,
}

impl Profile {
    pub const ALL: [Profile; 4] = [Profile::VisualRich, Profile::LidarRich, Profile::BothRich, Profile::BothPoor];

    pub fn visual_rich(self) -> bool {
        matches!(self, Profile::VisualRich | Profile::BothRich)
    }

    pub fn lidar_rich(self) -> bool {
        matches!(self, Profile::LidarRich | Profile::BothRich)
    }
}

/// How profiles are assigned to places.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileMix {
    /// Place `p` gets `Profile::ALL[p % 4]`.
    Mixed,
    Uniform(Profile),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualMode {
    Structured,
    /// Every image is independent uniform noise.
    PureNoise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_places: usize,
    pub n_revisits: usize,
    pub profiles: ProfileMix,
    pub visual: VisualMode,
    /// Raw image height and width in pixels.
    pub image_size: (u32, u32),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_places: 100,
            n_revisits: 3,
            profiles: ProfileMix::Mixed,
            visual: VisualMode::Structured,
            image_size: (48, 64),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn profile_of(&self, place: usize) -> Profile {
        match self.profiles {
            ProfileMix::Mixed => Profile::ALL[place % 4],
            ProfileMix::Uniform(p) => p,
        }
    }

    pub fn sequence_count(&self) -> usize {
        self.n_revisits + 1
    }

    pub fn sequence_id(visit: usize) -> String {
        format!("seq{visit:02}")
    }

    /// Number of true-match pairs the construction implies.
    pub fn expected_positive_pairs(&self) -> usize {
        let v = self.sequence_count();
        self.n_places * v * (v - 1) / 2
    }
}

#[derive(Clone, Debug)]
struct Rect {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
    color: [f64; 3],
}

#[derive(Clone, Debug)]
struct PlaceLook {
    base: [f64; 3],
    rects: Vec<Rect>,
    wave: (f64, f64, f64),
}

#[derive(Clone, Copy, Debug)]
struct Block {
    cx: f64,
    cy: f64,
    hx: f64,
    hy: f64,
    height: f64,
}

#[derive(Clone, Debug)]
struct Place {
    center: [f64; 3],
    profile: Profile,
    look: PlaceLook,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub frames: Vec<Frame>,
    pub images: Vec<RgbImage>,
    pub clouds: Vec<Vec<Point>>,
    /// Place index of each frame.
    pub places: Vec<usize>,
}

pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    ensure!(spec.n_places >= 2, Validation, "synthetic dataset needs at least 2 places, got {}", spec.n_places);
    ensure!(
        spec.image_size.0 >= 8 && spec.image_size.1 >= 8,
        Validation,
        "synthetic images must be at least 8x8"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cols = (spec.n_places as f64).sqrt().ceil() as usize;
    let places: Vec<Place> = (0..spec.n_places)
        .map(|p| Place {
            center: [PLACE_SPACING * (p % cols) as f64, PLACE_SPACING * (p / cols) as f64, 0.0],
            profile: spec.profile_of(p),
            look: random_look(spec.image_size, &mut rng),
            blocks: random_blocks(&mut rng, 4..8),
        })
        .collect();

    let n = spec.n_places * spec.sequence_count();
    let mut out = SyntheticDataset {
        spec: spec.clone(),
        frames: Vec::with_capacity(n),
        images: Vec::with_capacity(n),
        clouds: Vec::with_capacity(n),
        places: Vec::with_capacity(n),
    };
    for visit in 0..spec.sequence_count() {
        let seq = SyntheticSpec::sequence_id(visit);
        for (p, place) in places.iter().enumerate() {
            let r = REVISIT_RADIUS * rng.random::<f64>().sqrt();
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let offset = [r * theta.cos(), r * theta.sin()];
            let t = FRAME_PERIOD * p as f64;
            let image = match spec.visual {
                VisualMode::PureNoise => noise_image(spec.image_size, &mut rng),
                VisualMode::Structured => render_image(place, offset, spec.image_size, &mut rng),
            };
            let cloud = render_cloud(place, offset, &mut rng);
            out.frames.push(Frame {
                frame_id: (visit * spec.n_places + p) as u64,
                timestamp: t,
                image_ref: format!("{seq}/images/{}", timestamp_name(t, "png")),
                cloud_ref: format!("{seq}/clouds/{}", timestamp_name(t, "xyz")),
                position: [place.center[0] + offset[0], place.center[1] + offset[1], 0.0],
                sequence_id: seq.clone(),
            });
            out.images.push(image);
            out.clouds.push(cloud);
            out.places.push(p);
        }
    }
    Ok(out)
}

impl SyntheticDataset {
    pub fn source(&self) -> MemorySource {
        let mut src = MemorySource::default();
        for ((f, img), cloud) in self.frames.iter().zip(&self.images).zip(&self.clouds) {
            src.images.insert(f.image_ref.clone(), img.clone());
            src.clouds.insert(f.cloud_ref.clone(), cloud.clone());
        }
        src
    }

    /// Write the dataset in the on-disk layout read by
    /// [`load_sequence`](super::load_sequence).
    pub fn write_to(&self, root: &Path) -> Result<()> {
        for visit in 0..self.spec.sequence_count() {
            let seq = SyntheticSpec::sequence_id(visit);
            for sub in ["images", "clouds"] {
                let dir = root.join(&seq).join(sub);
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            let mut poses = Vec::new();
            for (k, f) in self.frames.iter().enumerate().filter(|(_, f)| f.sequence_id == seq) {
                write_image(&root.join(&f.image_ref), &self.images[k])?;
                write_cloud(&root.join(&f.cloud_ref), &self.clouds[k])?;
                poses.push(Pose {
                    timestamp: f.timestamp,
                    x: f.position[0],
                    y: f.position[1],
                    z: f.position[2],
                });
            }
            write_poses(&root.join(&seq).join("poses.csv"), &poses)?;
        }
        Ok(())
    }
}

fn random_look((h, w): (u32, u32), rng: &mut ChaCha8Rng) -> PlaceLook {
    let color = |rng: &mut ChaCha8Rng| [0; 3].map(|_| rng.random_range(0.0..255.0));
    let rects = (0..rng.random_range(4..8))
        .map(|_| {
            let (x0, y0) = (rng.random_range(0..w - 4), rng.random_range(0..h - 4));
            Rect {
                x0,
                y0,
                x1: (x0 + rng.random_range(4..=w / 2)).min(w),
                y1: (y0 + rng.random_range(4..=h / 2)).min(h),
                color: color(rng),
            }
        })
        .collect();
    PlaceLook {
        base: color(rng),
        rects,
        wave: (
            rng.random_range(0.1..0.6),
            rng.random_range(0.1..0.6),
            rng.random_range(0.0..std::f64::consts::TAU),
        ),
    }
}

/// Clean RGB value of a place's look at pixel `(x, y)`.
fn look_at(look: &PlaceLook, x: i64, y: i64) -> [f64; 3] {
    let mut v = look.base;
    for r in &look.rects {
        if x >= r.x0 as i64 && x < r.x1 as i64 && y >= r.y0 as i64 && y < r.y1 as i64 {
            v = r.color;
        }
    }
    let (fx, fy, phase) = look.wave;
    let s = 40.0 * (fx * x as f64 + fy * y as f64 + phase).sin();
    v.map(|c| c + s)
}

fn render_image(place: &Place, offset: [f64; 2], (h, w): (u32, u32), rng: &mut ChaCha8Rng) -> RgbImage {
    let rich = place.profile.visual_rich();
    // Viewpoint change shifts the picture by up to two pixels.
    let (sx, sy) = ((offset[0] * 0.8).round() as i64, (offset[1] * 0.8).round() as i64);
    let gain = rng.random_range(0.85..1.15);
    let noise = Normal::new(0.0, if rich { 6.0 } else { 28.0 }).expect("valid sigma");
    RgbImage::from_fn(w, h, |x, y| {
        let clean = look_at(&place.look, x as i64 + sx, y as i64 + sy);
        let px = clean.map(|c| {
            let v = if rich { gain * c } else { 30.0 + 0.05 * gain * (c - 128.0) };
            (v + noise.sample(rng)).round().clamp(0.0, 255.0) as u8
        });
        Rgb(px)
    })
}

fn noise_image((h, w): (u32, u32), rng: &mut ChaCha8Rng) -> RgbImage {
    RgbImage::from_fn(w, h, |_, _| Rgb([0; 3].map(|_| rng.random::<u8>())))
}

fn random_blocks(rng: &mut ChaCha8Rng, count: std::ops::Range<usize>) -> Vec<Block> {
    (0..rng.random_range(count))
        .map(|_| Block {
            cx: rng.random_range(-EXTENT..EXTENT),
            cy: rng.random_range(-EXTENT..EXTENT),
            hx: rng.random_range(0.8..3.0),
            hy: rng.random_range(0.8..3.0),
            height: rng.random_range(1.0..5.0),
        })
        .collect()
}

/// Points on the vertical faces and roof of a block, in world-aligned
/// sensor coordinates before the visit offset.
fn sample_block(b: &Block, count: usize, rng: &mut ChaCha8Rng, out: &mut Vec<Point>) {
    for _ in 0..count {
        let z = rng.random_range(0.0..b.height) - SENSOR_HEIGHT;
        let u = rng.random_range(-1.0..1.0);
        let p = match rng.random_range(0..5) {
            0 => [b.cx - b.hx, b.cy + u * b.hy, z],
            1 => [b.cx + b.hx, b.cy + u * b.hy, z],
            2 => [b.cx + u * b.hx, b.cy - b.hy, z],
            3 => [b.cx + u * b.hx, b.cy + b.hy, z],
            _ => [
                b.cx + u * b.hx,
                b.cy + rng.random_range(-1.0..1.0) * b.hy,
                b.height - SENSOR_HEIGHT,
            ],
        };
        out.push(p);
    }
}

fn render_cloud(place: &Place, offset: [f64; 2], rng: &mut ChaCha8Rng) -> Vec<Point> {
    let mut pts = Vec::new();
    let ground = Normal::new(-SENSOR_HEIGHT, 0.03).expect("valid sigma");
    for _ in 0..300 {
        pts.push([
            rng.random_range(-EXTENT - 2.0..EXTENT + 2.0),
            rng.random_range(-EXTENT - 2.0..EXTENT + 2.0),
            ground.sample(rng),
        ]);
    }
    let mut structure = Vec::new();
    if place.profile.lidar_rich() {
        for b in &place.blocks {
            sample_block(b, 80, rng, &mut structure);
        }
    } else {
        for side in [-1.0, 1.0] {
            let wall = Block {
                cx: 0.0,
                cy: side * 5.0,
                hx: EXTENT,
                hy: 0.1,
                height: 2.5,
            };
            sample_block(&wall, 200, rng, &mut structure);
        }
        for b in random_blocks(rng, 3..6) {
            sample_block(&b, 60, rng, &mut structure);
        }
    }
    let jitter = Normal::new(0.0, 0.05).expect("valid sigma");
    for p in structure {
        if rng.random::<f64>() < 0.15 {
            continue;
        }
        pts.push([
            p[0] - offset[0] + jitter.sample(rng),
            p[1] - offset[1] + jitter.sample(rng),
            p[2] + jitter.sample(rng),
        ]);
    }
    pts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::mine_pairs;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_places: 2,
            n_revisits: 1,
            seed: 7,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn deterministic_for_a_seed() {
        let a = generate_synthetic_dataset(&small()).unwrap();
        let b = generate_synthetic_dataset(&small()).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.images, b.images);
        assert_eq!(a.clouds, b.clouds);
    }

    #[test]
    fn too_few_places() {
        let spec = SyntheticSpec {
            n_places: 1,
            ..small()
        };
        assert!(generate_synthetic_dataset(&spec).is_err());
    }

    #[test]
    fn positive_count_matches_construction() {
        let spec = SyntheticSpec {
            n_places: 100,
            n_revisits: 3,
            seed: 1,
            image_size: (8, 8),
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic_dataset(&spec).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let pairs = mine_pairs(&ds.frames, 10.0, 50.0, Some(0), &mut r).unwrap();
        assert_eq!(pairs.len(), 100 * 6);
        assert_eq!(spec.expected_positive_pairs(), 600);
    }
}
