//! Library-versus-oracle comparisons shared by the test targets. Each check
//! returns the worst observed discrepancy (a count for exact checks).

use adafusion::attention::{channel_attention, channel_attention_matrix, spatial_attention, spatial_attention_matrix};
use adafusion::fusion::FcHead;
use adafusion::model::FusionMode;
use adafusion::nn::pool::global_average_pool;
use adafusion::nn::ParamStore;
use adafusion::preprocess::{voxelize, Bounds, Point};
use adafusion::retrieval::{knn_query, recall_at_n, DbEntry, DescriptorDb, Metric};
use adafusion::training::loss::pairwise_margin_loss;
use rand::Rng;

use super::oracles::{self, max_rel_diff};
use super::{active_margins, finite_difference_check, pair_batch, random_map, random_small_net, rng, GradCheckRow};

pub fn random_points(seed: u64, n: usize, bounds: &Bounds, spill: f64) -> Vec<Point> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            [0, 1, 2].map(|a| {
                let span = bounds.max[a] - bounds.min[a];
                r.random_range(bounds.min[a] - spill * span..bounds.max[a] + spill * span)
            })
        })
        .collect()
}

/// Cells that differ from the per-cell scan over 5000 points plus faces.
pub fn voxelization_mismatches() -> usize {
    let bounds = Bounds { min: [-10.0, -8.0, -2.0], max: [10.0, 8.0, 6.0] };
    let res = [16, 12, 8];
    let mut pts = random_points(1, 5000, &bounds, 0.1);
    pts.push(bounds.max);
    pts.push(bounds.min);
    pts.push([bounds.max[0], 0.0, bounds.min[2]]);
    let grid = voxelize(&pts, &bounds, res).unwrap();
    let expected = oracles::voxelize(&pts, &bounds, res);
    grid.occupancy().iter().zip(&expected).filter(|(a, b)| a != b).count()
}

pub fn gap_error() -> f64 {
    let mut r = rng(3);
    [[5, 7, 1], [3, 4, 5]]
        .iter()
        .map(|&dims| {
            let m = random_map(&mut r, 6, dims, -2.0, 2.0);
            max_rel_diff(&global_average_pool(&m), &oracles::global_average_pool(&m))
        })
        .fold(0.0, f64::max)
}

/// Worst relative error over both attention matrices and outputs with
/// C2 = 4 channels and N = 6 positions.
pub fn attention_error() -> f64 {
    let mut r = rng(4);
    let mut worst = 0.0f64;
    for dims in [[2, 3, 1], [1, 2, 3]] {
        let q = random_map(&mut r, 4, dims, -1.0, 1.0);
        let k = random_map(&mut r, 4, dims, -1.0, 1.0);
        let v = random_map(&mut r, 4, dims, -1.0, 1.0);
        let (s_ref, o_ref) = oracles::spatial_attention(&q, &k, &v);
        let (c_ref, co_ref) = oracles::channel_attention(&q, &k, &v);
        for e in [
            max_rel_diff(&spatial_attention_matrix(&q, &k), &s_ref.concat()),
            max_rel_diff(spatial_attention(&q, &k, &v).unwrap().data(), &o_ref),
            max_rel_diff(&channel_attention_matrix(&q, &k), &c_ref.concat()),
            max_rel_diff(channel_attention(&q, &k, &v).unwrap().data(), &co_ref),
        ] {
            worst = worst.max(e);
        }
    }
    worst
}

/// FC head `[16, 64, 32, 2]` with every weight randomised.
pub fn random_head(seed: u64) -> (FcHead, ParamStore) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let head = FcHead::new("head", &[16, 64, 32, 2], &mut store, &mut r);
    store.values_mut().iter_mut().for_each(|v| *v = r.random_range(-0.3..0.3));
    (head, store)
}

pub fn fc_head_error() -> f64 {
    let (head, store) = random_head(5);
    let layers: Vec<(Vec<Vec<f64>>, Vec<f64>)> = head
        .layer_params()
        .map(|(w, b)| {
            let bias = store.get(b).to_vec();
            let n_in = store.get(w).len() / bias.len();
            (store.get(w).chunks(n_in).map(<[f64]>::to_vec).collect(), bias)
        })
        .collect();
    let mut r = rng(55);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let a_i: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..2.0)).collect();
        let a_p: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..2.0)).collect();
        let (w, _) = head.forward(&store, &a_i, &a_p).unwrap();
        let input: Vec<f64> = a_i.iter().chain(&a_p).copied().collect();
        worst = worst.max(max_rel_diff(&[w.alpha_i, w.alpha_p], &oracles::fc_head(&layers, &input)));
    }
    worst
}

pub fn loss_error() -> f64 {
    let mut r = rng(6);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let d = r.random_range(1..20);
        let f1: Vec<f64> = (0..d).map(|_| r.random_range(-0.2..0.2)).collect();
        let f2: Vec<f64> = (0..d).map(|_| r.random_range(-0.2..0.2)).collect();
        let m = r.random_range(0.5..2.0);
        let a = r.random_range(0.05..0.45) * m;
        for y in [1, -1] {
            let got = pairwise_margin_loss(&f1, &f2, y, m, a).unwrap();
            worst = worst.max(max_rel_diff(&[got], &[oracles::margin_loss(&f1, &f2, y, m, a)]));
        }
    }
    worst
}

pub fn random_db(seed: u64, rows: usize, dim: usize, seqs: usize, quantize: bool) -> DescriptorDb {
    let mut r = rng(seed);
    let entries = (0..rows)
        .map(|i| DbEntry {
            frame_id: i as u64,
            sequence_id: format!("s{}", i % seqs),
            position: [r.random_range(0.0..200.0), r.random_range(0.0..200.0), 0.0],
            descriptor: (0..dim)
                .map(|_| {
                    let v: f64 = r.random_range(0.0..1.0);
                    if quantize {
                        (v * 4.0).round() / 4.0
                    } else {
                        v
                    }
                })
                .collect(),
            alpha: [r.random(), r.random()],
        })
        .collect();
    DescriptorDb::from_entries(entries, "test").unwrap()
}

/// Queries whose 25 neighbours differ from exhaustive selection over 500
/// rows, with and without distance ties.
pub fn knn_mismatches() -> usize {
    let mut bad = 0;
    for quantize in [false, true] {
        let db = random_db(7, 500, 4, 1, quantize);
        let rows: Vec<Vec<f64>> = (0..db.len()).map(|r| db.descriptor(r).to_vec()).collect();
        let mut r = rng(8);
        for _ in 0..20 {
            let q: Vec<f64> = (0..4).map(|_| r.random_range(0.0..1.0)).collect();
            let got: Vec<u64> = knn_query(&db, &q, 25, Metric::L1).unwrap().iter().map(|n| n.frame_id).collect();
            bad += (got != oracles::knn(&rows, db.frame_ids(), &q, 25)) as usize;
        }
    }
    bad
}

/// Worst recall@N difference against distance-matrix adjudication of 100
/// queries over a 300-row database.
pub fn recall_error() -> f64 {
    let queries = random_db(9, 100, 6, 1, true);
    let db = random_db(10, 300, 6, 1, true);
    let qs: Vec<(Vec<f64>, [f64; 3])> = (0..queries.len()).map(|r| (queries.descriptor(r).to_vec(), queries.position(r))).collect();
    let ds: Vec<(Vec<f64>, [f64; 3], u64)> = (0..db.len()).map(|r| (db.descriptor(r).to_vec(), db.position(r), db.frame_id(r))).collect();
    let ns = [1, 2, 3, 5, 10, 25];
    let got = recall_at_n(&queries, &db, &ns, 20.0, Metric::L1).unwrap();
    ns.iter()
        .map(|&n| (got.recall_at[&n] - oracles::recall_at(&qs, &ds, n, 20.0)).abs())
        .fold(0.0, f64::max)
}

pub const GRAD_TOLERANCE: f64 = 1e-3;
pub const GRAD_MIN_CHECKED: usize = 3;

/// End-to-end finite-difference check of a randomised width-8 network on
/// one positive and one negative pair (images 3×40×56, voxels 16×16×8).
pub fn gradient_rows(fusion: FusionMode, seed: u64) -> (Vec<GradCheckRow>, Vec<usize>) {
    let mut net = random_small_net(seed, fusion);
    let batch = pair_batch(seed + 1, [40, 56, 1], [16, 16, 8]);
    let loss = active_margins(&net, &batch);
    let rows = finite_difference_check(&mut net, &batch, &loss, 1e-4, 6, seed + 2);
    let lens = rows
        .iter()
        .map(|row| net.params().entries().iter().find(|e| e.name == row.entry).unwrap().len)
        .collect();
    (rows, lens)
}

/// Entries failing the tolerance or lacking kink-free coordinates.
pub fn gradient_failures(rows: &[GradCheckRow], lens: &[usize]) -> Vec<String> {
    rows.iter()
        .zip(lens)
        .filter(|(row, &len)| row.rel_error >= GRAD_TOLERANCE || row.checked < GRAD_MIN_CHECKED.min(len))
        .map(|(row, _)| format!("{} (n={}, rel={:.2e})", row.entry, row.checked, row.rel_error))
        .collect()
}

/// The two fixtures used for the gradient suite.
pub const GRADIENT_FIXTURES: [(FusionMode, u64); 2] = [(FusionMode::Adaptive, 31), (FusionMode::Concat, 41)];
