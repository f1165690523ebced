//! Command orchestration over the library: every function reads and writes
//! files under the configured output directory.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::synthetic::generate_synthetic_dataset;
use crate::data::{
    holdout_regions, list_sequences, load_sequence, mine_pairs, read_pairs, select_frames_by_distance, split_regions,
    write_pairs, DiskSource, Frame, FrameIndex, SplitTag,
};
use crate::error::{ensure, Error, Result};
use crate::retrieval::{average_recall_suite, build_database, weight_ratio_report, DescriptorDb, SuiteSummary};
use crate::training::loss::PairKind;
use crate::training::{train, TrainData, TrainOutcome};

pub const INDEX_FILE: &str = "index.csv";
pub const PAIRS_FILE: &str = "pairs.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.csv";
pub const DB_FILE: &str = "descriptors.bin";
pub const RESULTS_FILE: &str = "recall.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const WEIGHTS_CSV: &str = "weights.csv";
pub const WEIGHTS_SVG: &str = "weights.svg";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrepareReport {
    pub sequences: usize,
    pub train_frames: usize,
    pub val_frames: usize,
    pub test_frames: usize,
    pub positives: usize,
    pub negatives: usize,
    pub index_path: PathBuf,
    pub pairs_path: PathBuf,
}

fn output_dir(config: &RunConfig) -> Result<PathBuf> {
    let dir = config.output.dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let resolved = dir.join(RESOLVED_CONFIG);
    fs::write(&resolved, config.to_toml()).map_err(|e| Error::io(&resolved, e))?;
    Ok(dir)
}

fn require_path(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} not found")),
        ))
    }
}

/// Association, distance selection, region split, validation hold-out and
/// pair mining over the configured sequences.
pub fn prepare(config: &RunConfig) -> Result<PrepareReport> {
    let ds = &config.dataset;
    require_path(&ds.root, "dataset root")?;
    let sequences = if ds.sequences.is_empty() {
        list_sequences(&ds.root)?
    } else {
        ds.sequences.clone()
    };
    let mut frames: Vec<Frame> = Vec::new();
    for seq in &sequences {
        let loaded = load_sequence(&ds.root, seq, ds.max_dt, frames.len() as u64)?;
        let kept = select_frames_by_distance(&loaded, ds.frame_spacing)?;
        frames.extend(kept);
    }
    if frames.is_empty() {
        log::warn!("no frames found under {}", ds.root.display());
    }
    let split = split_regions(&frames, &ds.test_boxes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let (train, val) = holdout_regions(&split.train_frames, ds.holdout_fraction, ds.holdout_cell, &mut rng)?;
    let t = &config.train;
    let pairs = mine_pairs(&train, t.d_pos, t.d_neg, Some(t.neg_cap), &mut rng)?;

    let mut index = FrameIndex::default();
    for (set, tag) in [(&train, SplitTag::Train), (&val, SplitTag::Val), (&split.test_frames, SplitTag::Test)] {
        index.frames.extend(set.iter().map(|f| (f.clone(), tag)));
    }
    index.frames.sort_by_key(|(f, _)| f.frame_id);

    let dir = output_dir(config)?;
    let index_path = dir.join(INDEX_FILE);
    let pairs_path = dir.join(PAIRS_FILE);
    index.write(&index_path)?;
    write_pairs(&pairs_path, &pairs)?;
    let positives = pairs.iter().filter(|p| p.kind == PairKind::Positive).count();
    Ok(PrepareReport {
        sequences: sequences.len(),
        train_frames: train.len(),
        val_frames: val.len(),
        test_frames: split.test_frames.len(),
        positives,
        negatives: pairs.len() - positives,
        index_path,
        pairs_path,
    })
}

fn read_index(config: &RunConfig) -> Result<FrameIndex> {
    let path = config.output.dir.join(INDEX_FILE);
    require_path(&path, "frame index (run `prepare` first)")?;
    FrameIndex::read(&path)
}

/// Train on the prepared index; writes the best checkpoint and the log.
pub fn run_train(config: &RunConfig) -> Result<(PathBuf, TrainOutcome)> {
    let index = read_index(config)?;
    let pairs = config.output.dir.join(PAIRS_FILE);
    if pairs.exists() {
        let n = read_pairs(&pairs)?.len();
        log::info!("{n} mined pairs on disk; training resamples negatives per epoch");
    }
    let source = DiskSource::new(&config.dataset.root);
    let data = TrainData {
        train: index.with_tag(SplitTag::Train),
        val: index.with_tag(SplitTag::Val),
        source: &source,
    };
    let dir = output_dir(config)?;
    let model = config.model.build()?;
    let mut train_config = config.train.clone();
    train_config.d_tp = config.eval.d_tp;
    train_config.metric = config.eval.metric;
    let outcome = train(
        &model,
        &config.input,
        &train_config,
        &data,
        &config.hash(),
        Some(&dir.join(LOG_FILE)),
    )?;
    let path = dir.join(CHECKPOINT_FILE);
    outcome.best.save(&path)?;
    Ok((path, outcome))
}

/// Frames selected by sequence name, or the test split when `sequences` is
/// empty (every frame when there is no test split).
pub fn select_frames(index: &FrameIndex, sequences: &[String]) -> Vec<Frame> {
    if !sequences.is_empty() {
        return index
            .frames
            .iter()
            .filter(|(f, _)| sequences.contains(&f.sequence_id))
            .map(|(f, _)| f.clone())
            .collect();
    }
    let test = index.with_tag(SplitTag::Test);
    if test.is_empty() {
        index.frames.iter().map(|(f, _)| f.clone()).collect()
    } else {
        test
    }
}

/// Embed frames with a checkpoint into a descriptor database.
pub fn run_embed(config: &RunConfig, checkpoint: Option<&Path>, sequences: &[String]) -> Result<(PathBuf, DescriptorDb)> {
    let ckpt_path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| config.output.dir.join(CHECKPOINT_FILE));
    require_path(&ckpt_path, "checkpoint")?;
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let net = ckpt.to_model()?;
    let index = read_index(config)?;
    let frames = select_frames(&index, sequences);
    ensure!(!frames.is_empty(), Validation, "no frames selected for embedding");
    let source = DiskSource::new(&config.dataset.root);
    let db = build_database(&net, &frames, &source, &config.input, &ckpt.content_hash()?)?;
    let dir = output_dir(config)?;
    let path = dir.join(DB_FILE);
    db.save(&path)?;
    Ok((path, db))
}

/// Recall suite over a database; writes the CSV breakdown and summary.
pub fn run_eval(config: &RunConfig, db_path: Option<&Path>) -> Result<SuiteSummary> {
    let path = db_path.map(Path::to_path_buf).unwrap_or_else(|| config.output.dir.join(DB_FILE));
    require_path(&path, "descriptor database")?;
    let db = DescriptorDb::load(&path)?;
    let e = &config.eval;
    let summary = average_recall_suite(&db, &e.ns, e.d_tp, e.metric)?;
    let dir = output_dir(config)?;
    summary.write_csv(&dir.join(RESULTS_FILE))?;
    let text = format!(
        "config {}\ndatabase {} (built from {})\n{}",
        config.hash(),
        path.display(),
        db.built_from(),
        summary.summary_text()
    );
    let summary_path = dir.join(SUMMARY_FILE);
    fs::write(&summary_path, text).map_err(|e| Error::io(&summary_path, e))?;
    Ok(summary)
}

/// Weight-ratio CSV and SVG plot for a database.
pub fn run_weights_report(config: &RunConfig, db_path: Option<&Path>) -> Result<(PathBuf, PathBuf)> {
    let path = db_path.map(Path::to_path_buf).unwrap_or_else(|| config.output.dir.join(DB_FILE));
    require_path(&path, "descriptor database")?;
    let report = weight_ratio_report(&DescriptorDb::load(&path)?)?;
    let dir = output_dir(config)?;
    let (csv, svg) = (dir.join(WEIGHTS_CSV), dir.join(WEIGHTS_SVG));
    report.write_csv(&csv)?;
    report.write_svg(&svg)?;
    Ok((csv, svg))
}

/// Write the configured synthetic dataset under `dataset.root`.
pub fn run_synth(config: &RunConfig) -> Result<usize> {
    let ds = generate_synthetic_dataset(&config.synth)?;
    ds.write_to(&config.dataset.root)?;
    Ok(ds.frames.len())
}
