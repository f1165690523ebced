//! Naive reference implementations. Each one is written from the definition
//! with plain loops and shares no code with the library.

#![allow(clippy::needless_range_loop)]

use adafusion::data::{Association, Frame};
use adafusion::nn::FeatureMap;
use adafusion::preprocess::{Bounds, Point};

/// Largest `|a − b| / max(1, |b|)` over two equal-length slices.
pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Occupancy by scanning every cell and asking whether any point lies in it.
/// Cells are half-open except the last one on each axis, which also owns the
/// max face.
pub fn voxelize(points: &[Point], bounds: &Bounds, res: [usize; 3]) -> Vec<u8> {
    let size: Vec<f64> = (0..3).map(|a| (bounds.max[a] - bounds.min[a]) / res[a] as f64).collect();
    let inside = |p: &Point, a: usize, i: usize| {
        let lo = bounds.min[a] + i as f64 * size[a];
        let hi = bounds.min[a] + (i + 1) as f64 * size[a];
        if i + 1 == res[a] {
            p[a] >= lo && p[a] <= bounds.max[a]
        } else {
            p[a] >= lo && p[a] < hi
        }
    };
    let mut out = Vec::with_capacity(res.iter().product());
    for i in 0..res[0] {
        for j in 0..res[1] {
            for k in 0..res[2] {
                let hit = points.iter().any(|p| {
                    p.iter().all(|v| v.is_finite())
                        && p[0] >= bounds.min[0]
                        && p[1] >= bounds.min[1]
                        && p[2] >= bounds.min[2]
                        && inside(p, 0, i)
                        && inside(p, 1, j)
                        && inside(p, 2, k)
                });
                out.push(hit as u8);
            }
        }
    }
    out
}

pub fn global_average_pool(map: &FeatureMap) -> Vec<f64> {
    let [dx, dy, dz] = map.dims();
    let mut out = Vec::new();
    for c in 0..map.channels() {
        let mut sum = 0.0;
        for x in 0..dx {
            for y in 0..dy {
                for z in 0..dz {
                    sum += map.get(c, x, y, z);
                }
            }
        }
        out.push(sum / (dx * dy * dz) as f64);
    }
    out
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = row.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `A[c][n]` view of a feature map.
fn rows(m: &FeatureMap) -> Vec<Vec<f64>> {
    (0..m.channels()).map(|c| m.channel(c).to_vec()).collect()
}

/// `S[i][j] = softmax_j(Σ_c K[c][i] Q[c][j])`, `out[c][i] = Σ_j V[c][j] S[i][j]`.
pub fn spatial_attention(q: &FeatureMap, k: &FeatureMap, v: &FeatureMap) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (q, k, v) = (rows(q), rows(k), rows(v));
    let (c, n) = (q.len(), q[0].len());
    let mut s = Vec::new();
    for i in 0..n {
        let mut logits = vec![0.0; n];
        for j in 0..n {
            for ch in 0..c {
                logits[j] += k[ch][i] * q[ch][j];
            }
        }
        s.push(softmax(&logits));
    }
    let mut out = vec![0.0; c * n];
    for ch in 0..c {
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += v[ch][j] * s[i][j];
            }
            out[ch * n + i] = acc;
        }
    }
    (s, out)
}

/// `S[a][b] = softmax_b(Σ_n Q[a][n] K[b][n])`, `out[a][n] = Σ_b S[a][b] V[b][n]`.
pub fn channel_attention(q: &FeatureMap, k: &FeatureMap, v: &FeatureMap) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (q, k, v) = (rows(q), rows(k), rows(v));
    let (c, n) = (q.len(), q[0].len());
    let mut s = Vec::new();
    for a in 0..c {
        let mut logits = vec![0.0; c];
        for b in 0..c {
            for t in 0..n {
                logits[b] += q[a][t] * k[b][t];
            }
        }
        s.push(softmax(&logits));
    }
    let mut out = vec![0.0; c * n];
    for a in 0..c {
        for t in 0..n {
            let mut acc = 0.0;
            for b in 0..c {
                acc += s[a][b] * v[b][t];
            }
            out[a * n + t] = acc;
        }
    }
    (s, out)
}

/// Dense ReLU layers with a sigmoid output; `layers` holds `(W[out][in], b)`.
pub fn fc_head(layers: &[(Vec<Vec<f64>>, Vec<f64>)], input: &[f64]) -> Vec<f64> {
    let mut x = input.to_vec();
    for (l, (w, b)) in layers.iter().enumerate() {
        let mut y = Vec::new();
        for (row, bias) in w.iter().zip(b) {
            let mut acc = *bias;
            for (wi, xi) in row.iter().zip(&x) {
                acc += wi * xi;
            }
            y.push(if l + 1 == layers.len() {
                1.0 / (1.0 + (-acc).exp())
            } else if acc > 0.0 {
                acc
            } else {
                0.0
            });
        }
        x = y;
    }
    x
}

/// Pair loss from the scalar definition.
pub fn margin_loss(f1: &[f64], f2: &[f64], y: i32, m: f64, a: f64) -> f64 {
    let mut d = 0.0;
    for i in 0..f1.len() {
        d += (f1[i] - f2[i]).abs();
    }
    if y == 1 {
        if d > m - a {
            d - (m - a)
        } else {
            0.0
        }
    } else if m + a - d > 0.0 {
        m + a - d
    } else {
        0.0
    }
}

/// `k` nearest rows by repeated minimum selection, ties to the smaller id.
pub fn knn(rows: &[Vec<f64>], ids: &[u64], query: &[f64], k: usize) -> Vec<u64> {
    let dist: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().zip(query).map(|(a, b)| (a - b).abs()).sum())
        .collect();
    let mut taken = vec![false; rows.len()];
    let mut out = Vec::new();
    for _ in 0..k.min(rows.len()) {
        let mut best: Option<usize> = None;
        for r in 0..rows.len() {
            if taken[r] {
                continue;
            }
            best = match best {
                None => Some(r),
                Some(b) if dist[r] < dist[b] || (dist[r] == dist[b] && ids[r] < ids[b]) => Some(r),
                keep => keep,
            };
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(ids[b]);
    }
    out
}

/// Recall@N from the full L1 distance matrix: a query counts as recalled
/// when fewer than `N` rows precede its best-ranked true positive. Queries
/// with no true positive in range are left out of the denominator.
pub fn recall_at(
    queries: &[(Vec<f64>, [f64; 3])],
    db: &[(Vec<f64>, [f64; 3], u64)],
    n: usize,
    d_tp: f64,
) -> f64 {
    let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
    let geo = |a: &[f64; 3], b: &[f64; 3]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    let dist: Vec<Vec<f64>> = queries.iter().map(|(q, _)| db.iter().map(|(d, _, _)| l1(q, d)).collect()).collect();
    let (mut eligible, mut hits) = (0usize, 0usize);
    for (qi, (_, qp)) in queries.iter().enumerate() {
        let tps: Vec<usize> = (0..db.len()).filter(|&r| geo(qp, &db[r].1) <= d_tp).collect();
        if tps.is_empty() {
            continue;
        }
        eligible += 1;
        let before = |r: usize, s: usize| dist[qi][s] < dist[qi][r] || (dist[qi][s] == dist[qi][r] && db[s].2 < db[r].2);
        let best_rank = tps
            .iter()
            .map(|&r| (0..db.len()).filter(|&s| s != r && before(r, s)).count())
            .min()
            .unwrap();
        if best_rank < n {
            hits += 1;
        }
    }
    if eligible == 0 {
        0.0
    } else {
        hits as f64 / eligible as f64
    }
}

/// Greedy association by repeatedly scanning every unused image/cloud pair
/// for the smallest gap (ties: earlier cloud, then earlier image).
pub fn associate(images: &[(f64, String)], clouds: &[(f64, String)], max_dt: f64) -> Vec<Association> {
    let mut iu = vec![false; images.len()];
    let mut cu = vec![false; clouds.len()];
    let mut out: Vec<(usize, usize, f64)> = Vec::new();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for c in 0..clouds.len() {
            for i in 0..images.len() {
                if iu[i] || cu[c] {
                    continue;
                }
                let dt = (clouds[c].0 - images[i].0).abs();
                if dt > max_dt {
                    continue;
                }
                if best.is_none_or(|(bd, _, _)| dt < bd) {
                    best = Some((dt, c, i));
                }
            }
        }
        let Some((dt, c, i)) = best else { break };
        iu[i] = true;
        cu[c] = true;
        out.push((i, c, dt));
    }
    out.sort_by_key(|&(i, _, _)| i);
    out.into_iter()
        .map(|(i, c, dt)| Association {
            timestamp: images[i].0,
            image_ref: images[i].1.clone(),
            cloud_ref: clouds[c].1.clone(),
            dt,
        })
        .collect()
}

/// Frame selection by re-walking the trajectory: each kept frame is the
/// first whose path length from the previous kept frame reaches `spacing`.
pub fn select_by_distance(frames: &[Frame], spacing: f64) -> Vec<u64> {
    let mut out = Vec::new();
    if frames.is_empty() {
        return out;
    }
    out.push(frames[0].frame_id);
    let mut anchor = 0;
    for i in 1..frames.len() {
        let path: f64 = (anchor..i).map(|k| frames[k].distance(&frames[k + 1])).sum();
        if path >= spacing {
            out.push(frames[i].frame_id);
            anchor = i;
        }
    }
    out
}
