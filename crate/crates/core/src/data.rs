//! Frames, timestamp association, distance-based frame selection, region
//! splits, pair mining and dataset I/O.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::preprocess::Point;
use crate::training::loss::PairKind;

pub mod synthetic;

/// One synchronised (image, point cloud) observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub frame_id: u64,
    pub timestamp: f64,
    pub image_ref: String,
    pub cloud_ref: String,
    pub position: [f64; 3],
    pub sequence_id: String,
}

impl Frame {
    pub fn distance(&self, other: &Frame) -> f64 {
        euclidean(&self.position, &other.position)
    }
}

pub fn euclidean(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// An image matched to a point cloud, before poses are attached.
#[derive(Clone, Debug, PartialEq)]
pub struct Association {
    pub timestamp: f64,
    pub image_ref: String,
    pub cloud_ref: String,
    pub dt: f64,
}

fn ensure_sorted(index: &[(f64, String)], what: &str) -> Result<()> {
    for (i, w) in index.windows(2).enumerate() {
        ensure!(
            w[0].0 <= w[1].0,
            Validation,
            "{what} index is not sorted by timestamp at position {}: {} > {}",
            i + 1,
            w[0].0,
            w[1].0
        );
    }
    ensure!(
        index.iter().all(|(t, _)| t.is_finite()),
        Validation,
        "{what} index contains a non-finite timestamp"
    );
    Ok(())
}

/// Match images to clouds within `max_dt` seconds.
///
/// Candidate pairs are accepted globally in order of increasing `|Δt|`;
/// equal gaps go to the earlier cloud, then the earlier image. Every image
/// and every cloud is used at most once and unmatched entries are dropped.
/// The result is sorted by image timestamp.
pub fn associate_frames(images: &[(f64, String)], clouds: &[(f64, String)], max_dt: f64) -> Result<Vec<Association>> {
    ensure!(max_dt > 0.0, Validation, "max_dt must be positive, got {max_dt}");
    ensure_sorted(images, "image")?;
    ensure_sorted(clouds, "cloud")?;
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    let mut lo = 0;
    for (i, &(t, _)) in images.iter().enumerate() {
        while lo < clouds.len() && clouds[lo].0 < t - max_dt {
            lo += 1;
        }
        for (c, &(tc, _)) in clouds.iter().enumerate().skip(lo) {
            if tc > t + max_dt {
                break;
            }
            let dt = (tc - t).abs();
            if dt <= max_dt {
                candidates.push((dt, c, i));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut image_used = vec![false; images.len()];
    let mut cloud_used = vec![false; clouds.len()];
    let mut matched = Vec::new();
    for (dt, c, i) in candidates {
        if image_used[i] || cloud_used[c] {
            continue;
        }
        image_used[i] = true;
        cloud_used[c] = true;
        matched.push((i, c, dt));
    }
    matched.sort_by_key(|&(i, _, _)| i);
    Ok(matched
        .into_iter()
        .map(|(i, c, dt)| Association {
            timestamp: images[i].0,
            image_ref: images[i].1.clone(),
            cloud_ref: clouds[c].1.clone(),
            dt,
        })
        .collect())
}

/// Keep the first frame, then every frame whose path length since the last
/// kept frame reaches `spacing`.
pub fn select_frames_by_distance(frames: &[Frame], spacing: f64) -> Result<Vec<Frame>> {
    ensure!(spacing > 0.0, Validation, "spacing must be positive, got {spacing}");
    let Some(first) = frames.first() else {
        return Ok(Vec::new());
    };
    let mut kept = vec![first.clone()];
    let mut travelled = 0.0;
    for w in frames.windows(2) {
        travelled += w[0].distance(&w[1]);
        if travelled >= spacing {
            kept.push(w[1].clone());
            travelled = 0.0;
        }
    }
    Ok(kept)
}

/// Axis-aligned square in the horizontal plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionBox {
    pub center: [f64; 2],
    pub side: f64,
}

impl RegionBox {
    /// Closed containment: points on the boundary are inside.
    pub fn contains(&self, p: &[f64; 3]) -> bool {
        let h = self.side / 2.0;
        (p[0] - self.center[0]).abs() <= h && (p[1] - self.center[1]).abs() <= h
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_frames: Vec<Frame>,
    pub test_frames: Vec<Frame>,
    pub test_boxes: Vec<RegionBox>,
}

pub fn split_regions(frames: &[Frame], test_boxes: &[RegionBox]) -> Result<DatasetSplit> {
    for b in test_boxes {
        ensure!(
            b.side > 0.0 && b.side.is_finite() && b.center.iter().all(|c| c.is_finite()),
            Validation,
            "degenerate test box {b:?}"
        );
    }
    let (test_frames, train_frames) = frames
        .iter()
        .cloned()
        .partition(|f| test_boxes.iter().any(|b| b.contains(&f.position)));
    Ok(DatasetSplit {
        train_frames,
        test_frames,
        test_boxes: test_boxes.to_vec(),
    })
}

/// Move whole `cell`-sized regions of the training frames into a validation
/// set. At least one region is held out whenever there are two or more.
pub fn holdout_regions<R: Rng + ?Sized>(frames: &[Frame], fraction: f64, cell: f64, rng: &mut R) -> Result<(Vec<Frame>, Vec<Frame>)> {
    ensure!(
        (0.0..1.0).contains(&fraction) && cell > 0.0,
        Validation,
        "holdout needs fraction in [0, 1) and positive cell size"
    );
    let key = |f: &Frame| ((f.position[0] / cell).floor() as i64, (f.position[1] / cell).floor() as i64);
    let mut cells: Vec<(i64, i64)> = frames.iter().map(key).collect();
    cells.sort_unstable();
    cells.dedup();
    let n_hold = if cells.len() < 2 || fraction == 0.0 {
        0
    } else {
        ((fraction * cells.len() as f64).ceil() as usize).clamp(1, cells.len() - 1)
    };
    let held: Vec<(i64, i64)> = index::sample(rng, cells.len(), n_hold).into_iter().map(|i| cells[i]).collect();
    Ok(frames.iter().cloned().partition(|f| !held.contains(&key(f))))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairLabel {
    pub frame_a: u64,
    pub frame_b: u64,
    pub kind: PairKind,
}

/// Distance-thresholded pair candidates over one frame set.
///
/// Positives are the unordered pairs within `d_pos`; negatives for query
/// `i` are all other frames at least `d_neg` away.
#[derive(Clone, Debug)]
pub struct PairMiner {
    frame_ids: Vec<u64>,
    positives: Vec<(usize, usize)>,
    negatives: Vec<Vec<usize>>,
}

impl PairMiner {
    pub fn new(frames: &[Frame], d_pos: f64, d_neg: f64) -> Result<Self> {
        ensure!(
            d_pos >= 0.0 && d_pos < d_neg,
            Validation,
            "pair mining needs 0 <= d_pos < d_neg, got d_pos={d_pos}, d_neg={d_neg}"
        );
        let n = frames.len();
        let mut positives = Vec::new();
        let mut negatives = vec![Vec::new(); n];
        for i in 0..n {
            for j in i + 1..n {
                let d = frames[i].distance(&frames[j]);
                if d <= d_pos {
                    positives.push((i, j));
                } else if d >= d_neg {
                    negatives[i].push(j);
                    negatives[j].push(i);
                }
            }
        }
        Ok(Self {
            frame_ids: frames.iter().map(|f| f.frame_id).collect(),
            positives,
            negatives,
        })
    }

    /// Unordered positive pairs as frame indices.
    pub fn positive_indices(&self) -> &[(usize, usize)] {
        &self.positives
    }

    /// Negative candidates of query `i` as frame indices.
    pub fn negative_candidates(&self, i: usize) -> &[usize] {
        &self.negatives[i]
    }

    pub fn negative_count(&self) -> usize {
        self.negatives.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Every unordered negative pair once, `a < b`.
    pub fn all_negative_indices(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, js) in self.negatives.iter().enumerate() {
            out.extend(js.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        out
    }

    /// Up to `cap` negatives per query drawn uniformly without replacement.
    pub fn sample_negative_indices<R: Rng + ?Sized>(&self, cap: usize, rng: &mut R) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, js) in self.negatives.iter().enumerate() {
            let k = cap.min(js.len());
            out.extend(index::sample(rng, js.len(), k).into_iter().map(|s| (i, js[s])));
        }
        out
    }

    fn label(&self, (a, b): (usize, usize), kind: PairKind) -> PairLabel {
        PairLabel {
            frame_a: self.frame_ids[a],
            frame_b: self.frame_ids[b],
            kind,
        }
    }
}

/// All positive pairs plus negatives: every one when `neg_cap` is `None`,
/// otherwise up to `neg_cap` sampled per query frame.
pub fn mine_pairs<R: Rng + ?Sized>(
    frames: &[Frame],
    d_pos: f64,
    d_neg: f64,
    neg_cap: Option<usize>,
    rng: &mut R,
) -> Result<Vec<PairLabel>> {
    let miner = PairMiner::new(frames, d_pos, d_neg)?;
    let negatives = match neg_cap {
        None => miner.all_negative_indices(),
        Some(cap) => miner.sample_negative_indices(cap, rng),
    };
    let mut out: Vec<PairLabel> = miner
        .positives
        .iter()
        .map(|&p| miner.label(p, PairKind::Positive))
        .collect();
    out.extend(negatives.into_iter().map(|p| miner.label(p, PairKind::Negative)));
    Ok(out)
}

/// Raw sensor data behind a frame.
pub trait FrameSource {
    fn image(&self, frame: &Frame) -> Result<RgbImage>;
    fn cloud(&self, frame: &Frame) -> Result<Vec<Point>>;
}

/// Frames stored under a dataset root; refs are relative to it.
#[derive(Clone, Debug)]
pub struct DiskSource {
    root: PathBuf,
}

impl DiskSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
}

impl FrameSource for DiskSource {
    fn image(&self, frame: &Frame) -> Result<RgbImage> {
        read_image(&self.root.join(&frame.image_ref))
    }

    fn cloud(&self, frame: &Frame) -> Result<Vec<Point>> {
        read_cloud(&self.root.join(&frame.cloud_ref))
    }
}

/// In-memory frames keyed by their refs.
#[derive(Clone, Debug, Default)]
pub struct MemorySource {
    pub images: HashMap<String, RgbImage>,
    pub clouds: HashMap<String, Vec<Point>>,
}

impl FrameSource for MemorySource {
    fn image(&self, frame: &Frame) -> Result<RgbImage> {
        self.images
            .get(&frame.image_ref)
            .cloned()
            .ok_or_else(|| Error::Validation(format!("unknown image ref {}", frame.image_ref)))
    }

    fn cloud(&self, frame: &Frame) -> Result<Vec<Point>> {
        self.clouds
            .get(&frame.cloud_ref)
            .cloned()
            .ok_or_else(|| Error::Validation(format!("unknown cloud ref {}", frame.cloud_ref)))
    }
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    Ok(img.to_rgb8())
}

pub fn write_image(path: &Path, image: &RgbImage) -> Result<()> {
    image.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })
}

/// Whitespace-separated `x y z` per line; blank lines are skipped.
pub fn read_cloud(path: &Path) -> Result<Vec<Point>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let parsed: Vec<f64> = fields.iter().filter_map(|f| f.parse().ok()).collect();
        ensure!(
            fields.len() == 3 && parsed.len() == 3 && parsed.iter().all(|v| v.is_finite()),
            Format,
            "{}:{}: expected three finite coordinates",
            path.display(),
            n + 1
        );
        points.push([parsed[0], parsed[1], parsed[2]]);
    }
    Ok(points)
}

pub fn write_cloud(path: &Path, points: &[Point]) -> Result<()> {
    let mut text = String::with_capacity(points.len() * 24);
    for p in points {
        text.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub timestamp: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

pub fn read_poses(path: &Path) -> Result<Vec<Pose>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut poses = Vec::new();
    for row in reader.deserialize() {
        poses.push(row.map_err(|e| csv_error(path, e))?);
    }
    Ok(poses)
}

pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for p in poses {
        writer.serialize(p).map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Format(format!("{}: {e}", path.display()))
    }
}

/// Position at time `t` by linear interpolation; `None` outside the pose span.
pub fn interpolate_pose(poses: &[Pose], t: f64) -> Option<[f64; 3]> {
    let k = poses.partition_point(|p| p.timestamp < t);
    if k < poses.len() && poses[k].timestamp == t {
        let p = poses[k];
        return Some([p.x, p.y, p.z]);
    }
    if k == 0 || k == poses.len() {
        return None;
    }
    let (a, b) = (poses[k - 1], poses[k]);
    let w = (t - a.timestamp) / (b.timestamp - a.timestamp);
    Some([a.x + w * (b.x - a.x), a.y + w * (b.y - a.y), a.z + w * (b.z - a.z)])
}

/// Timestamp-named files with `extension` in `dir`, sorted by time.
fn timestamp_index(dir: &Path, base: &str, extension: &str) -> Result<Vec<(f64, String)>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(extension) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let Ok(t) = stem.parse::<f64>() else {
            log::warn!("skipping {}: file name is not a timestamp", path.display());
            continue;
        };
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        out.push((t, format!("{base}/{name}")));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

/// File name used for a timestamp in the dataset layout.
pub fn timestamp_name(t: f64, extension: &str) -> String {
    format!("{t:.6}.{extension}")
}

/// Load `<root>/<sequence>/{images,clouds,poses.csv}` into frames with ids
/// starting at `first_id`. Frames outside the pose span are dropped.
pub fn load_sequence(root: &Path, sequence: &str, max_dt: f64, first_id: u64) -> Result<Vec<Frame>> {
    let seq_dir = root.join(sequence);
    ensure_dir(&seq_dir)?;
    let images = timestamp_index(&seq_dir.join("images"), &format!("{sequence}/images"), "png")?;
    let clouds = timestamp_index(&seq_dir.join("clouds"), &format!("{sequence}/clouds"), "xyz")?;
    if images.is_empty() || clouds.is_empty() {
        log::warn!("sequence {sequence} has no image/cloud pairs");
        return Ok(Vec::new());
    }
    let poses = read_poses(&seq_dir.join("poses.csv"))?;
    ensure!(
        poses.windows(2).all(|w| w[0].timestamp < w[1].timestamp),
        Format,
        "{}: pose timestamps must be strictly increasing",
        seq_dir.join("poses.csv").display()
    );
    let mut frames = Vec::new();
    let mut dropped = 0;
    for a in associate_frames(&images, &clouds, max_dt)? {
        match interpolate_pose(&poses, a.timestamp) {
            Some(position) => frames.push(Frame {
                frame_id: first_id + frames.len() as u64,
                timestamp: a.timestamp,
                image_ref: a.image_ref,
                cloud_ref: a.cloud_ref,
                position,
                sequence_id: sequence.to_string(),
            }),
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!("sequence {sequence}: dropped {dropped} frames outside the pose span");
    }
    Ok(frames)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "sequence directory not found"),
        ))
    }
}

/// Sequence directory names under `root`, sorted.
pub fn list_sequences(root: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            if let Some(name) = entry.file_name().to_str() {
                out.push(name.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct IndexRow {
    frame_id: u64,
    sequence_id: String,
    timestamp: f64,
    x: f64,
    y: f64,
    z: f64,
    image_ref: String,
    cloud_ref: String,
    split: SplitTag,
}

/// Frames tagged with their split, as written by `prepare`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameIndex {
    pub frames: Vec<(Frame, SplitTag)>,
}

impl FrameIndex {
    pub fn with_tag(&self, tag: SplitTag) -> Vec<Frame> {
        self.frames.iter().filter(|(_, t)| *t == tag).map(|(f, _)| f.clone()).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for (f, split) in &self.frames {
            let row = IndexRow {
                frame_id: f.frame_id,
                sequence_id: f.sequence_id.clone(),
                timestamp: f.timestamp,
                x: f.position[0],
                y: f.position[1],
                z: f.position[2],
                image_ref: f.image_ref.clone(),
                cloud_ref: f.cloud_ref.clone(),
                split: *split,
            };
            w.serialize(row).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut frames = Vec::new();
        for row in r.deserialize() {
            let row: IndexRow = row.map_err(|e| csv_error(path, e))?;
            frames.push((
                Frame {
                    frame_id: row.frame_id,
                    timestamp: row.timestamp,
                    image_ref: row.image_ref,
                    cloud_ref: row.cloud_ref,
                    position: [row.x, row.y, row.z],
                    sequence_id: row.sequence_id,
                },
                row.split,
            ));
        }
        Ok(Self { frames })
    }
}

#[derive(Serialize, Deserialize)]
struct PairRow {
    frame_a: u64,
    frame_b: u64,
    y: i32,
}

pub fn write_pairs(path: &Path, pairs: &[PairLabel]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for p in pairs {
        w.serialize(PairRow {
            frame_a: p.frame_a,
            frame_b: p.frame_b,
            y: p.kind.label(),
        })
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairLabel>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: PairRow = row.map_err(|e| csv_error(path, e))?;
        out.push(PairLabel {
            frame_a: row.frame_a,
            frame_b: row.frame_b,
            kind: PairKind::from_label(row.y)?,
        });
    }
    Ok(out)
}

/// Frames grouped by sequence id, each group in input order.
pub fn group_by_sequence(frames: &[Frame]) -> BTreeMap<String, Vec<Frame>> {
    let mut out: BTreeMap<String, Vec<Frame>> = BTreeMap::new();
    for f in frames {
        out.entry(f.sequence_id.clone()).or_default().push(f.clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn idx(ts: &[f64], tag: &str) -> Vec<(f64, String)> {
        ts.iter().enumerate().map(|(i, &t)| (t, format!("{tag}{i}"))).collect()
    }

    fn frame_at(id: u64, x: f64, y: f64) -> Frame {
        Frame {
            frame_id: id,
            timestamp: id as f64,
            image_ref: String::new(),
            cloud_ref: String::new(),
            position: [x, y, 0.0],
            sequence_id: "s".into(),
        }
    }

    #[test]
    fn association_threshold() {
        let out = associate_frames(&idx(&[0.0, 1.0], "i"), &idx(&[0.05, 1.2], "c"), 0.1).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].image_ref.as_str(), out[0].cloud_ref.as_str()), ("i0", "c0"));
    }

    #[test]
    fn identical_timestamps_match_one_to_one() {
        let ts = [0.0, 0.5, 1.0, 1.5];
        let out = associate_frames(&idx(&ts, "i"), &idx(&ts, "c"), 0.01).unwrap();
        assert_eq!(out.len(), 4);
        assert!(out.iter().enumerate().all(|(k, a)| a.cloud_ref == format!("c{k}")));
    }

    #[test]
    fn equidistant_clouds_prefer_earlier() {
        let out = associate_frames(&idx(&[1.0], "i"), &idx(&[0.9, 1.1], "c"), 0.2).unwrap();
        assert_eq!(out[0].cloud_ref, "c0");
    }

    #[test]
    fn unsorted_and_empty_inputs() {
        assert!(associate_frames(&idx(&[1.0, 0.0], "i"), &idx(&[0.0], "c"), 0.1).is_err());
        assert!(associate_frames(&[], &idx(&[0.0], "c"), 0.1).unwrap().is_empty());
    }

    #[test]
    fn distance_selection_on_a_line() {
        let frames: Vec<Frame> = (0..6).map(|i| frame_at(i, 3.0 * i as f64, 0.0)).collect();
        let kept = select_frames_by_distance(&frames, 10.0).unwrap();
        assert_eq!(kept.iter().map(|f| f.position[0]).collect::<Vec<_>>(), vec![0.0, 12.0]);
        let still: Vec<Frame> = (0..5).map(|i| frame_at(i, 1.0, 1.0)).collect();
        assert_eq!(select_frames_by_distance(&still, 10.0).unwrap().len(), 1);
    }

    #[test]
    fn region_boundary() {
        let b = RegionBox {
            center: [0.0, 0.0],
            side: 100.0,
        };
        let split = split_regions(&[frame_at(0, 5.0, 5.0), frame_at(1, 51.0, 0.0)], &[b]).unwrap();
        assert_eq!(split.test_frames[0].frame_id, 0);
        assert_eq!(split.train_frames[0].frame_id, 1);
    }

    #[test]
    fn mining_thresholds() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let near = [frame_at(0, 0.0, 0.0), frame_at(1, 5.0, 0.0)];
        let p = mine_pairs(&near, 10.0, 50.0, None, &mut r).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].kind, PairKind::Positive);
        let mid = [frame_at(0, 0.0, 0.0), frame_at(1, 30.0, 0.0)];
        assert!(mine_pairs(&mid, 10.0, 50.0, None, &mut r).unwrap().is_empty());
        assert!(mine_pairs(&mid, 50.0, 50.0, None, &mut r).is_err());
    }

    #[test]
    fn negative_cap_per_query() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let frames: Vec<Frame> = (0..30).map(|i| frame_at(i, 100.0 * i as f64, 0.0)).collect();
        let miner = PairMiner::new(&frames, 10.0, 50.0).unwrap();
        assert_eq!(miner.negative_count(), 30 * 29 / 2);
        let s = miner.sample_negative_indices(4, &mut r);
        assert_eq!(s.len(), 30 * 4);
        for i in 0..30 {
            let mut js: Vec<usize> = s.iter().filter(|p| p.0 == i).map(|p| p.1).collect();
            js.dedup();
            assert_eq!(js.len(), 4);
        }
    }

    #[test]
    fn pose_interpolation() {
        let poses = [
            Pose { timestamp: 0.0, x: 0.0, y: 0.0, z: 0.0 },
            Pose { timestamp: 2.0, x: 4.0, y: 2.0, z: 0.0 },
        ];
        assert_eq!(interpolate_pose(&poses, 1.0), Some([2.0, 1.0, 0.0]));
        assert_eq!(interpolate_pose(&poses, 2.0), Some([4.0, 2.0, 0.0]));
        assert_eq!(interpolate_pose(&poses, 2.5), None);
    }
}
