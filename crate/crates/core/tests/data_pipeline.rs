mod common;

use std::collections::BTreeSet;
use std::fs;

use adafusion::config::RunConfig;
use adafusion::data::synthetic::{generate_synthetic_dataset, SyntheticSpec};
use adafusion::data::{
    associate_frames, list_sequences, load_sequence, select_frames_by_distance, split_regions, Frame, FrameIndex,
    PairMiner, RegionBox, SplitTag,
};
use adafusion::pipeline;
use common::{oracles, rng};
use proptest::prelude::*;
use rand::Rng;

fn stamps(r: &mut impl Rng, n: usize, step: f64, prefix: &str) -> Vec<(f64, String)> {
    let mut t = 0.0;
    (0..n)
        .map(|i| {
            // coarse grid so equal gaps occur
            t += step * r.random_range(1..4) as f64;
            (t, format!("{prefix}{i}"))
        })
        .collect()
}

#[test]
fn association_matches_quadratic_greedy() {
    let mut r = rng(1);
    for trial in 0..40 {
        let images = stamps(&mut r, 30 + trial, 0.05, "i");
        let clouds = stamps(&mut r, 25 + trial, 0.05, "c");
        for max_dt in [0.02, 0.05, 0.11] {
            let got = associate_frames(&images, &clouds, max_dt).unwrap();
            assert_eq!(got, oracles::associate(&images, &clouds, max_dt), "trial {trial} max_dt {max_dt}");
        }
    }
}

fn walk(r: &mut impl Rng, n: usize) -> Vec<Frame> {
    let mut p = [0.0, 0.0, 0.0];
    (0..n)
        .map(|i| {
            p[0] += r.random_range(-3.0..6.0);
            p[1] += r.random_range(-3.0..3.0);
            Frame {
                frame_id: i as u64,
                timestamp: i as f64,
                image_ref: String::new(),
                cloud_ref: String::new(),
                position: p,
                sequence_id: "s".into(),
            }
        })
        .collect()
}

#[test]
fn distance_selection_matches_rewalk() {
    let mut r = rng(2);
    for _ in 0..30 {
        let frames = walk(&mut r, 200);
        for spacing in [1.0, 5.0, 10.0, 33.0] {
            let got: Vec<u64> = select_frames_by_distance(&frames, spacing).unwrap().iter().map(|f| f.frame_id).collect();
            assert_eq!(got, oracles::select_by_distance(&frames, spacing));
        }
    }
}

#[test]
fn region_split_is_closed_containment() {
    let mut r = rng(3);
    let mut frames = walk(&mut r, 300);
    let boxes = [RegionBox { center: [50.0, 0.0], side: 20.0 }, RegionBox { center: [200.0, 5.0], side: 40.0 }];
    // exactly on the boundary and just outside it
    frames[0].position = [60.0, 10.0, 0.0];
    frames[1].position = [60.0 + 1e-9, 0.0, 0.0];
    let split = split_regions(&frames, &boxes).unwrap();
    for f in &frames {
        let inside = boxes.iter().any(|b| {
            f.position[0] >= b.center[0] - b.side / 2.0
                && f.position[0] <= b.center[0] + b.side / 2.0
                && f.position[1] >= b.center[1] - b.side / 2.0
                && f.position[1] <= b.center[1] + b.side / 2.0
        });
        assert_eq!(split.test_frames.contains(f), inside);
        assert_eq!(split.train_frames.contains(f), !inside);
    }
    assert!(split.test_frames.iter().any(|f| f.frame_id == 0));
    assert!(split.train_frames.iter().any(|f| f.frame_id == 1));
}

#[test]
fn mining_matches_distance_matrix() {
    let mut r = rng(4);
    let frames = walk(&mut r, 150);
    let (d_pos, d_neg) = (10.0, 50.0);
    let miner = PairMiner::new(&frames, d_pos, d_neg).unwrap();
    let n = frames.len();
    let dist = |i: usize, j: usize| {
        let (a, b) = (frames[i].position, frames[j].position);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    };
    let expected: BTreeSet<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|&(i, j)| dist(i, j) <= d_pos)
        .collect();
    let got: BTreeSet<(usize, usize)> = miner.positive_indices().iter().copied().collect();
    assert_eq!(got, expected);
    for i in 0..n {
        let negs: BTreeSet<usize> = miner.negative_candidates(i).iter().copied().collect();
        let exp: BTreeSet<usize> = (0..n).filter(|&j| j != i && dist(i, j) >= d_neg).collect();
        assert_eq!(negs, exp);
    }
    let sampled = miner.sample_negative_indices(5, &mut r);
    for &(i, j) in &sampled {
        assert!(dist(i, j) >= d_neg && i != j);
    }
    for i in 0..n {
        let k = sampled.iter().filter(|p| p.0 == i).count();
        assert_eq!(k, 5.min(miner.negative_candidates(i).len()));
    }
}

fn small_spec(n_places: usize) -> SyntheticSpec {
    SyntheticSpec { n_places, n_revisits: 2, image_size: (16, 20), seed: 5, ..Default::default() }
}

#[test]
fn synthetic_dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic_dataset(&small_spec(9)).unwrap();
    ds.write_to(dir.path()).unwrap();
    assert_eq!(list_sequences(dir.path()).unwrap(), vec!["seq00", "seq01", "seq02"]);
    let mut loaded = Vec::new();
    for seq in list_sequences(dir.path()).unwrap() {
        loaded.extend(load_sequence(dir.path(), &seq, 0.05, loaded.len() as u64).unwrap());
    }
    assert_eq!(loaded.len(), ds.frames.len());
    let src = adafusion::data::DiskSource::new(dir.path());
    use adafusion::data::FrameSource;
    for (a, b) in loaded.iter().zip(&ds.frames) {
        assert_eq!((a.frame_id, &a.image_ref, &a.cloud_ref, &a.sequence_id), (b.frame_id, &b.image_ref, &b.cloud_ref, &b.sequence_id));
        assert!(oracles::max_rel_diff(&a.position, &b.position) < 1e-9);
        let k = b.frame_id as usize;
        assert_eq!(src.image(a).unwrap(), ds.images[k]);
        let cloud = src.cloud(a).unwrap();
        assert_eq!(cloud.len(), ds.clouds[k].len());
        for (p, q) in cloud.iter().zip(&ds.clouds[k]) {
            assert!(oracles::max_rel_diff(p, q) < 1e-9);
        }
    }
}

fn prepare_config(root: &std::path::Path, out: &std::path::Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.dataset.root = root.to_path_buf();
    c.dataset.holdout_fraction = 0.0;
    c.output.dir = out.to_path_buf();
    c
}

#[test]
fn prepare_counts_match_construction_and_rerun_is_identical() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let spec = small_spec(12);
    generate_synthetic_dataset(&spec).unwrap().write_to(data.path()).unwrap();
    let config = prepare_config(data.path(), out.path());
    let report = pipeline::prepare(&config).unwrap();
    assert_eq!(report.sequences, spec.sequence_count());
    assert_eq!(report.train_frames, spec.n_places * spec.sequence_count());
    assert_eq!(report.positives, spec.expected_positive_pairs());
    // every frame sees all other places' frames as negatives; the cap binds
    let per_query = ((spec.n_places - 1) * spec.sequence_count()).min(config.train.neg_cap);
    assert_eq!(report.negatives, report.train_frames * per_query);

    let index = fs::read(&report.index_path).unwrap();
    let pairs = fs::read(&report.pairs_path).unwrap();
    pipeline::prepare(&config).unwrap();
    assert_eq!(fs::read(&report.index_path).unwrap(), index);
    assert_eq!(fs::read(&report.pairs_path).unwrap(), pairs);
    let parsed = FrameIndex::read(&report.index_path).unwrap();
    assert!(parsed.frames.iter().all(|(_, t)| *t == SplitTag::Train));
}

#[test]
fn prepare_on_empty_sequence_gives_empty_index() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    fs::create_dir_all(data.path().join("seq00")).unwrap();
    let report = pipeline::prepare(&prepare_config(data.path(), out.path())).unwrap();
    assert_eq!((report.train_frames, report.positives, report.negatives), (0, 0, 0));
    assert!(FrameIndex::read(&report.index_path).unwrap().frames.is_empty());
}

#[test]
fn prepare_reports_missing_root() {
    let out = tempfile::tempdir().unwrap();
    let err = pipeline::prepare(&prepare_config(&out.path().join("absent"), out.path())).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("absent"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn association_is_one_to_one_within_threshold(seed in 0u64..10_000, max_dt in 0.01f64..0.2) {
        let mut r = rng(seed);
        let images = stamps(&mut r, 20, 0.03, "i");
        let clouds = stamps(&mut r, 20, 0.03, "c");
        let got = associate_frames(&images, &clouds, max_dt).unwrap();
        let imgs: BTreeSet<&str> = got.iter().map(|a| a.image_ref.as_str()).collect();
        let cls: BTreeSet<&str> = got.iter().map(|a| a.cloud_ref.as_str()).collect();
        prop_assert_eq!(imgs.len(), got.len());
        prop_assert_eq!(cls.len(), got.len());
        prop_assert!(got.iter().all(|a| a.dt <= max_dt));
        prop_assert!(got.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    }
}
