//! Descriptor databases, exact KNN retrieval, recall@N over sequence
//! combinations and the relative weight-ratio report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive;
use crate::data::{csv_error, euclidean, Frame, FrameSource};
use crate::error::{ensure, Error, Result};
use crate::model::AdaFusionNet;
use crate::preprocess::InputConfig;

pub const DB_MAGIC: &[u8; 8] = b"ADAFDESC";
pub const DB_VERSION: u32 = 1;
/// Ground-truth radius of a true positive at test time, meters.
pub const D_TP: f64 = 20.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    L1,
    L2,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            Metric::L2 => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
        }
    }
}

/// One database row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DbEntry {
    pub frame_id: u64,
    pub sequence_id: String,
    pub position: [f64; 3],
    pub descriptor: Vec<f64>,
    pub alpha: [f64; 2],
}

/// Immutable table of descriptors with frame metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptorDb {
    dim: usize,
    descriptors: Vec<f64>,
    alphas: Vec<[f64; 2]>,
    positions: Vec<[f64; 3]>,
    frame_ids: Vec<u64>,
    sequence_ids: Vec<String>,
    built_from: String,
}

impl DescriptorDb {
    pub fn from_entries(entries: Vec<DbEntry>, built_from: impl Into<String>) -> Result<Self> {
        let dim = entries.first().map_or(0, |e| e.descriptor.len());
        let mut db = DescriptorDb {
            dim,
            descriptors: Vec::with_capacity(dim * entries.len()),
            alphas: Vec::with_capacity(entries.len()),
            positions: Vec::with_capacity(entries.len()),
            frame_ids: Vec::with_capacity(entries.len()),
            sequence_ids: Vec::with_capacity(entries.len()),
            built_from: built_from.into(),
        };
        for e in entries {
            ensure!(
                e.descriptor.len() == dim,
                Shape,
                "descriptor of frame {} has length {}, expected {dim}",
                e.frame_id,
                e.descriptor.len()
            );
            db.descriptors.extend(e.descriptor);
            db.alphas.push(e.alpha);
            db.positions.push(e.position);
            db.frame_ids.push(e.frame_id);
            db.sequence_ids.push(e.sequence_id);
        }
        Ok(db)
    }

    pub fn len(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn built_from(&self) -> &str {
        &self.built_from
    }

    pub fn descriptor(&self, row: usize) -> &[f64] {
        &self.descriptors[row * self.dim..(row + 1) * self.dim]
    }

    pub fn alpha(&self, row: usize) -> [f64; 2] {
        self.alphas[row]
    }

    pub fn alphas(&self) -> &[[f64; 2]] {
        &self.alphas
    }

    pub fn position(&self, row: usize) -> [f64; 3] {
        self.positions[row]
    }

    pub fn frame_id(&self, row: usize) -> u64 {
        self.frame_ids[row]
    }

    pub fn frame_ids(&self) -> &[u64] {
        &self.frame_ids
    }

    pub fn sequence_id(&self, row: usize) -> &str {
        &self.sequence_ids[row]
    }

    pub fn entry(&self, row: usize) -> DbEntry {
        DbEntry {
            frame_id: self.frame_ids[row],
            sequence_id: self.sequence_ids[row].clone(),
            position: self.positions[row],
            descriptor: self.descriptor(row).to_vec(),
            alpha: self.alphas[row],
        }
    }

    /// Distinct sequence ids, sorted.
    pub fn sequences(&self) -> Vec<String> {
        self.sequence_ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Rows belonging to one sequence, in order.
    pub fn subset(&self, sequence: &str) -> DescriptorDb {
        let rows = (0..self.len()).filter(|&r| self.sequence_ids[r] == sequence);
        Self::from_entries(rows.map(|r| self.entry(r)).collect(), self.built_from.clone())
            .expect("rows share one dimension")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        archive::encode(DB_MAGIC, DB_VERSION, self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let db: DescriptorDb = archive::decode(DB_MAGIC, DB_VERSION, bytes)?;
        let n = db.frame_ids.len();
        ensure!(
            db.descriptors.len() == n * db.dim
                && db.alphas.len() == n
                && db.positions.len() == n
                && db.sequence_ids.len() == n,
            Format,
            "descriptor database has inconsistent row counts"
        );
        Ok(db)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        archive::write(path, DB_MAGIC, DB_VERSION, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Inference-mode descriptor of every frame. Frames whose data cannot be
/// loaded or prepared are skipped with a warning.
pub fn build_database(
    net: &AdaFusionNet,
    frames: &[Frame],
    source: &dyn FrameSource,
    input: &InputConfig,
    built_from: &str,
) -> Result<DescriptorDb> {
    let mut entries = Vec::with_capacity(frames.len());
    for f in frames {
        let prepared = source
            .image(f)
            .and_then(|img| source.cloud(f).and_then(|cloud| input.prepare_plain(&img, &cloud)));
        let prepared = match prepared {
            Ok(p) => p,
            Err(e) => {
                log::warn!("skipping frame {} ({}): {e}", f.frame_id, f.image_ref);
                continue;
            }
        };
        let d = net.describe(&prepared.image, &prepared.voxels, f.frame_id)?;
        entries.push(DbEntry {
            frame_id: f.frame_id,
            sequence_id: f.sequence_id.clone(),
            position: f.position,
            alpha: [d.weights.alpha_i, d.weights.alpha_p],
            descriptor: d.f_prime,
        });
    }
    DescriptorDb::from_entries(entries, built_from)
}

/// Retrieved row with its distance to the query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub row: usize,
    pub frame_id: u64,
    pub distance: f64,
}

/// All rows ordered by ascending distance, ties by frame id.
pub fn rank_all(db: &DescriptorDb, query: &[f64], metric: Metric) -> Result<Vec<Neighbor>> {
    ensure!(!db.is_empty(), Validation, "cannot query an empty descriptor database");
    ensure!(
        query.len() == db.dim,
        Shape,
        "query has length {}, database rows have {}",
        query.len(),
        db.dim
    );
    let mut out: Vec<Neighbor> = (0..db.len())
        .map(|row| Neighbor {
            row,
            frame_id: db.frame_ids[row],
            distance: metric.distance(query, db.descriptor(row)),
        })
        .collect();
    out.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.frame_id.cmp(&b.frame_id)));
    Ok(out)
}

/// The `n` nearest rows; `n` larger than the database returns every row.
pub fn knn_query(db: &DescriptorDb, query: &[f64], n: usize, metric: Metric) -> Result<Vec<Neighbor>> {
    let mut ranked = rank_all(db, query, metric)?;
    ranked.truncate(n);
    Ok(ranked)
}

/// Top-N count giving AR@1%: `max(1, ⌈0.01·|db|⌉)`.
pub fn one_percent_n(db_len: usize) -> usize {
    (db_len as f64 * 0.01).ceil().max(1.0) as usize
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecallResult {
    pub query_seq: String,
    pub db_seq: String,
    /// Recall for each requested N.
    pub recall_at: BTreeMap<usize, f64>,
    pub ar1: f64,
    pub ar1pct: f64,
    pub one_percent_n: usize,
    /// Queries with at least one true positive in the database.
    pub n_queries: usize,
    /// Queries with none, left out of the denominator.
    pub n_excluded: usize,
}

/// Recall@N of `queries` against `db`: a query succeeds at N when one of
/// its top-N retrievals lies within `d_tp` meters. Queries with no frame
/// within `d_tp` anywhere in the database are excluded. With no eligible
/// query every recall is 0.
pub fn recall_at_n(queries: &DescriptorDb, db: &DescriptorDb, ns: &[usize], d_tp: f64, metric: Metric) -> Result<RecallResult> {
    let n1pct = one_percent_n(db.len());
    let mut all_ns: BTreeSet<usize> = ns.iter().copied().filter(|&n| n > 0).collect();
    all_ns.insert(1);
    all_ns.insert(n1pct);
    // Rank (0-based) of the first true positive of each eligible query.
    let mut first_hit = Vec::new();
    let mut excluded = 0;
    for q in 0..queries.len() {
        let qp = queries.position(q);
        if !(0..db.len()).any(|r| euclidean(&qp, &db.position(r)) <= d_tp) {
            excluded += 1;
            continue;
        }
        let ranked = rank_all(db, queries.descriptor(q), metric)?;
        let hit = ranked
            .iter()
            .position(|nb| euclidean(&qp, &db.position(nb.row)) <= d_tp)
            .expect("eligible query has a true positive");
        first_hit.push(hit);
    }
    let recall = |n: usize| {
        if first_hit.is_empty() {
            0.0
        } else {
            first_hit.iter().filter(|&&h| h < n).count() as f64 / first_hit.len() as f64
        }
    };
    let recall_at: BTreeMap<usize, f64> = all_ns.iter().map(|&n| (n, recall(n))).collect();
    let seq_name = |d: &DescriptorDb| d.sequences().join("+");
    Ok(RecallResult {
        query_seq: seq_name(queries),
        db_seq: seq_name(db),
        ar1: recall_at[&1],
        ar1pct: recall_at[&n1pct],
        one_percent_n: n1pct,
        recall_at,
        n_queries: first_hit.len(),
        n_excluded: excluded,
    })
}

/// Both role assignments of one unordered sequence pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Combination {
    pub first: String,
    pub second: String,
    pub forward: RecallResult,
    pub backward: RecallResult,
}

impl Combination {
    fn roles(&self) -> impl Iterator<Item = &RecallResult> {
        [&self.forward, &self.backward].into_iter().filter(|r| r.n_queries > 0)
    }

    /// Mean over role assignments that had eligible queries.
    fn mean(&self, f: impl Fn(&RecallResult) -> f64) -> Option<f64> {
        let v: Vec<f64> = self.roles().map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn ar1(&self) -> Option<f64> {
        self.mean(|r| r.ar1)
    }

    pub fn ar1pct(&self) -> Option<f64> {
        self.mean(|r| r.ar1pct)
    }

    pub fn recall_at(&self, n: usize) -> Option<f64> {
        self.mean(|r| r.recall_at.get(&n).copied().unwrap_or(0.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteSummary {
    pub combinations: Vec<Combination>,
    /// Means over combinations with at least one eligible query.
    pub ar1: f64,
    pub ar1pct: f64,
    pub recall_at: BTreeMap<usize, f64>,
    pub n_scored: usize,
}

/// Every unordered pair of sequences in `db`, each evaluated in both
/// query/database roles and averaged.
pub fn average_recall_suite(db: &DescriptorDb, ns: &[usize], d_tp: f64, metric: Metric) -> Result<SuiteSummary> {
    let seqs = db.sequences();
    ensure!(
        seqs.len() >= 2,
        Validation,
        "recall suite needs at least two sequences, found {}",
        seqs.len()
    );
    let parts: Vec<DescriptorDb> = seqs.iter().map(|s| db.subset(s)).collect();
    let mut combinations = Vec::new();
    for i in 0..seqs.len() {
        for j in i + 1..seqs.len() {
            combinations.push(Combination {
                first: seqs[i].clone(),
                second: seqs[j].clone(),
                forward: recall_at_n(&parts[i], &parts[j], ns, d_tp, metric)?,
                backward: recall_at_n(&parts[j], &parts[i], ns, d_tp, metric)?,
            });
        }
    }
    let mean = |f: &dyn Fn(&Combination) -> Option<f64>| {
        let v: Vec<f64> = combinations.iter().filter_map(f).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let recall_at = ns.iter().map(|&n| (n, mean(&|c| c.recall_at(n)))).collect();
    Ok(SuiteSummary {
        ar1: mean(&|c| c.ar1()),
        ar1pct: mean(&|c| c.ar1pct()),
        recall_at,
        n_scored: combinations.iter().filter(|c| c.ar1().is_some()).count(),
        combinations,
    })
}

#[derive(Serialize)]
struct SuiteRow<'a> {
    combination: usize,
    query_seq: &'a str,
    db_seq: &'a str,
    #[serde(rename = "N")]
    n: usize,
    recall: f64,
}

impl SuiteSummary {
    /// Per-combination breakdown: one row per role assignment and N.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for (k, c) in self.combinations.iter().enumerate() {
            for r in [&c.forward, &c.backward] {
                for (&n, &recall) in &r.recall_at {
                    w.serialize(SuiteRow {
                        combination: k,
                        query_seq: &r.query_seq,
                        db_seq: &r.db_seq,
                        n,
                        recall,
                    })
                    .map_err(|e| csv_error(path, e))?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "combinations: {} ({} scored)", self.combinations.len(), self.n_scored);
        let _ = writeln!(s, "AR@1:  {:.2}%", 100.0 * self.ar1);
        let _ = writeln!(s, "AR@1%: {:.2}%", 100.0 * self.ar1pct);
        for (n, r) in &self.recall_at {
            let _ = writeln!(s, "recall@{n}: {:.2}%", 100.0 * r);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeightRatioRow {
    pub frame_id: u64,
    pub sequence_id: String,
    pub alpha_i: f64,
    pub alpha_p: f64,
    /// `100·α_I/ᾱ_I`, or raw `α_I` when `ᾱ_I = 0`.
    pub ratio_i: f64,
    pub ratio_p: f64,
    pub raw_i: bool,
    pub raw_p: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeightRatioReport {
    pub mean_alpha_i: f64,
    pub mean_alpha_p: f64,
    pub rows: Vec<WeightRatioRow>,
}

/// Each frame's weights relative to the database means, in percent.
pub fn weight_ratio_report(db: &DescriptorDb) -> Result<WeightRatioReport> {
    ensure!(!db.is_empty(), Validation, "weight report needs a non-empty database");
    let n = db.len() as f64;
    let mean_i = db.alphas.iter().map(|a| a[0]).sum::<f64>() / n;
    let mean_p = db.alphas.iter().map(|a| a[1]).sum::<f64>() / n;
    let ratio = |a: f64, mean: f64| if mean == 0.0 { a } else { 100.0 * a / mean };
    let rows = (0..db.len())
        .map(|r| {
            let [ai, ap] = db.alphas[r];
            WeightRatioRow {
                frame_id: db.frame_ids[r],
                sequence_id: db.sequence_ids[r].clone(),
                alpha_i: ai,
                alpha_p: ap,
                ratio_i: ratio(ai, mean_i),
                ratio_p: ratio(ap, mean_p),
                raw_i: mean_i == 0.0,
                raw_p: mean_p == 0.0,
            }
        })
        .collect();
    Ok(WeightRatioReport {
        mean_alpha_i: mean_i,
        mean_alpha_p: mean_p,
        rows,
    })
}

impl WeightRatioReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Line plot of both ratio series against frame order.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (800.0, 300.0, 40.0);
        let n = self.rows.len().max(2) as f64;
        let max_y = self
            .rows
            .iter()
            .flat_map(|r| [r.ratio_i, r.ratio_p])
            .fold(200.0f64, f64::max);
        let x = |k: usize| pad + (w - 2.0 * pad) * k as f64 / (n - 1.0);
        let y = |v: f64| h - pad - (h - 2.0 * pad) * v / max_y;
        let line = |f: &dyn Fn(&WeightRatioRow) -> f64| {
            self.rows
                .iter()
                .enumerate()
                .map(|(k, r)| format!("{:.1},{:.1}", x(k), y(f(r))))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r##"<line x1="{pad}" y1="{y0:.1}" x2="{x1}" y2="{y0:.1}" stroke="#999" stroke-dasharray="4"/>"##,
            y0 = y(100.0),
            x1 = w - pad
        );
        let _ = writeln!(s, r##"<polyline fill="none" stroke="#1f77b4" points="{}"/>"##, line(&|r| r.ratio_i));
        let _ = writeln!(s, r##"<polyline fill="none" stroke="#d62728" points="{}"/>"##, line(&|r| r.ratio_p));
        let _ = writeln!(
            s,
            r##"<text x="{pad}" y="20" font-size="12">visual (blue) mean {:.3}, lidar (red) mean {:.3}; dashed = 100%</text>"##,
            self.mean_alpha_i, self.mean_alpha_p
        );
        s.push_str("</svg>\n");
        s
    }

    pub fn write_svg(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_svg()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: u64, seq: &str, x: f64, d: Vec<f64>, alpha: [f64; 2]) -> DbEntry {
        DbEntry {
            frame_id: id,
            sequence_id: seq.into(),
            position: [x, 0.0, 0.0],
            descriptor: d,
            alpha,
        }
    }

    #[test]
    fn self_match_ranks_first() {
        let db = DescriptorDb::from_entries(
            vec![
                entry(3, "a", 0.0, vec![1.0, 2.0], [0.5; 2]),
                entry(1, "a", 0.0, vec![0.0, 0.0], [0.5; 2]),
                entry(2, "a", 0.0, vec![0.0, 0.0], [0.5; 2]),
            ],
            "",
        )
        .unwrap();
        let r = knn_query(&db, &[1.0, 2.0], 1, Metric::L1).unwrap();
        assert_eq!((r[0].frame_id, r[0].distance), (3, 0.0));
        let all = knn_query(&db, &[0.0, 0.0], 10, Metric::L2).unwrap();
        assert_eq!(all.iter().map(|n| n.frame_id).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn empty_database_is_rejected() {
        let db = DescriptorDb::from_entries(vec![], "").unwrap();
        assert!(knn_query(&db, &[], 1, Metric::L1).is_err());
    }

    #[test]
    fn vacuous_queries_are_excluded() {
        let q = DescriptorDb::from_entries(
            vec![entry(0, "q", 0.0, vec![0.0], [0.5; 2]), entry(1, "q", 500.0, vec![0.0], [0.5; 2])],
            "",
        )
        .unwrap();
        let db = DescriptorDb::from_entries(
            vec![entry(2, "d", 100.0, vec![0.1], [0.5; 2]), entry(3, "d", 5.0, vec![0.2], [0.5; 2])],
            "",
        )
        .unwrap();
        let r = recall_at_n(&q, &db, &[1, 2], D_TP, Metric::L1).unwrap();
        assert_eq!((r.n_queries, r.n_excluded), (1, 1));
        assert_eq!(r.recall_at[&1], 0.0);
        assert_eq!(r.recall_at[&2], 1.0);
    }

    #[test]
    fn identical_sequences_recall_perfectly() {
        let rows = |seq: &str, base: u64| {
            (0..5)
                .map(|k| entry(base + k, seq, 100.0 * k as f64, vec![k as f64, 1.0], [0.5; 2]))
                .collect::<Vec<_>>()
        };
        let mut all = rows("a", 0);
        all.extend(rows("b", 10));
        let db = DescriptorDb::from_entries(all, "").unwrap();
        let s = average_recall_suite(&db, &[1], D_TP, Metric::L1).unwrap();
        assert_eq!(s.combinations.len(), 1);
        assert_eq!(s.ar1, 1.0);
    }

    #[test]
    fn ratios_of_constant_weights() {
        let rows = (0..4).map(|k| entry(k, "a", 0.0, vec![0.0], [0.3, 0.7])).collect();
        let report = weight_ratio_report(&DescriptorDb::from_entries(rows, "").unwrap()).unwrap();
        assert!(report.rows.iter().all(|r| (r.ratio_i - 100.0).abs() < 1e-12 && (r.ratio_p - 100.0).abs() < 1e-12));
        let rows = vec![entry(0, "a", 0.0, vec![0.0], [0.2, 0.0]), entry(1, "a", 0.0, vec![0.0], [0.6, 0.0])];
        let report = weight_ratio_report(&DescriptorDb::from_entries(rows, "").unwrap()).unwrap();
        assert!((report.rows[0].ratio_i - 50.0).abs() < 1e-12);
        assert!((report.rows[1].ratio_i - 150.0).abs() < 1e-12);
        assert!(report.rows[0].raw_p && report.rows[0].ratio_p == 0.0);
    }

    #[test]
    fn archive_round_trip() {
        let db = DescriptorDb::from_entries(vec![entry(7, "s", 1.0, vec![0.25, -1.0], [0.1, 0.9])], "abc").unwrap();
        let back = DescriptorDb::from_bytes(&db.to_bytes().unwrap()).unwrap();
        assert_eq!(back, db);
    }
}
