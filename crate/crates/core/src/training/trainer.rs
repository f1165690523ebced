use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{MarginLoss, PairKind};
use super::optim::{Adam, PlateauSchedule};
use crate::checkpoint::Checkpoint;
use crate::data::{Frame, FrameSource, PairMiner};
use crate::error::{ensure, Error, Result};
use crate::model::{AdaFusionNet, ModelConfig, NetOutput};
use crate::nn::FeatureMap;
use crate::preprocess::{AugmentConfig, InputConfig, Point, PreparedInput};
use crate::retrieval::{average_recall_suite, DbEntry, DescriptorDb, Metric};

pub const LOG_HEADER: &str = "step,loss,ar1,lr,alpha_i_mean,alpha_p_mean";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Pairs per step, half positive and half negative.
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_decay: f64,
    /// Evaluations without improvement before the learning rate decays.
    pub patience: usize,
    pub eval_every: u64,
    pub margin: f64,
    pub slack: f64,
    pub d_pos: f64,
    pub d_neg: f64,
    /// Negatives drawn per query frame each epoch.
    pub neg_cap: usize,
    pub seed: u64,
    /// Stop after this many steps regardless of `epochs`.
    pub max_steps: Option<u64>,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    /// Keep both convolutional backbones at their initial values.
    pub freeze_backbones: bool,
    /// True-positive radius of the validation recall.
    pub d_tp: f64,
    pub metric: Metric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            lr_init: 8e-4,
            lr_decay: 0.9,
            patience: 20,
            eval_every: 2000,
            margin: 1.0,
            slack: 0.5,
            d_pos: 10.0,
            d_neg: 50.0,
            neg_cap: 20,
            seed: 0,
            max_steps: None,
            augment: true,
            augmentation: AugmentConfig::default(),
            freeze_backbones: false,
            d_tp: 20.0,
            metric: Metric::L1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        MarginLoss::new(self.margin, self.slack)?;
        ensure!(
            self.lr_decay > 0.0 && self.lr_decay < 1.0,
            Validation,
            "lr_decay must lie in (0, 1), got {}",
            self.lr_decay
        );
        ensure!(
            self.lr_init > 0.0 && self.lr_init.is_finite(),
            Validation,
            "lr_init must be positive"
        );
        ensure!(
            self.epochs > 0 && self.patience > 0 && self.eval_every > 0 && self.neg_cap > 0,
            Validation,
            "epochs, patience, eval_every and neg_cap must be positive"
        );
        ensure!(
            self.batch_size >= 2 && self.batch_size.is_multiple_of(2),
            Validation,
            "batch_size must be a positive even number, got {}",
            self.batch_size
        );
        ensure!(
            self.d_pos < self.d_neg,
            Validation,
            "d_pos must be below d_neg"
        );
        Ok(())
    }
}

/// Training and validation frames plus where to read them from.
pub struct TrainData<'a> {
    pub train: Vec<Frame>,
    pub val: Vec<Frame>,
    pub source: &'a dyn FrameSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    /// Mean batch loss since the previous log row.
    pub loss: f64,
    pub ar1: Option<f64>,
    pub lr: f64,
    pub alpha_i_mean: f64,
    pub alpha_p_mean: f64,
}

impl LogRow {
    pub fn to_csv_line(&self) -> String {
        let ar1 = self.ar1.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.step, self.loss, ar1, self.lr, self.alpha_i_mean, self.alpha_p_mean
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Snapshot with the best validation AR@1 (the final state when no
    /// validation frames were given).
    pub best: Checkpoint,
    pub last: Checkpoint,
    /// Mean pair loss of every step.
    pub step_losses: Vec<f64>,
    pub log: Vec<LogRow>,
}

impl TrainOutcome {
    pub fn log_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for row in &self.log {
            s.push_str(&row.to_csv_line());
            s.push('\n');
        }
        s
    }
}

/// Train a freshly initialised model (seeded by `config.seed`).
pub fn train(
    model: &ModelConfig,
    input: &InputConfig,
    config: &TrainConfig,
    data: &TrainData<'_>,
    config_hash: &str,
    log_path: Option<&Path>,
) -> Result<TrainOutcome> {
    let net = AdaFusionNet::new(model.clone(), config.seed)?;
    train_from(net, input, config, data, config_hash, log_path)
}

struct RawFrame {
    image: image::RgbImage,
    cloud: Vec<Point>,
}

fn load_raw(frames: &[Frame], source: &dyn FrameSource) -> Result<Vec<RawFrame>> {
    frames
        .iter()
        .map(|f| {
            Ok(RawFrame {
                image: source.image(f)?,
                cloud: source.cloud(f)?,
            })
        })
        .collect()
}

fn trainable_mask(net: &AdaFusionNet, freeze_backbones: bool) -> Option<Vec<bool>> {
    if !freeze_backbones {
        return None;
    }
    let mut mask = vec![true; net.params().len()];
    for e in net.params().entries() {
        if e.name.starts_with("image.") || e.name.starts_with("voxel.") {
            mask[e.offset..e.offset + e.len].iter_mut().for_each(|m| *m = false);
        }
    }
    Some(mask)
}

/// Inference-mode descriptors of prepared frames.
fn embed(net: &AdaFusionNet, frames: &[Frame], inputs: &[PreparedInput]) -> Result<DescriptorDb> {
    let mut entries = Vec::with_capacity(frames.len());
    for (f, x) in frames.iter().zip(inputs) {
        let d = net.describe(&x.image, &x.voxels, f.frame_id)?;
        entries.push(DbEntry {
            frame_id: f.frame_id,
            sequence_id: f.sequence_id.clone(),
            position: f.position,
            alpha: [d.weights.alpha_i, d.weights.alpha_p],
            descriptor: d.f_prime,
        });
    }
    DescriptorDb::from_entries(entries, "")
}

fn alpha_means(alphas: impl Iterator<Item = [f64; 2]>) -> (f64, f64) {
    let (mut si, mut sp, mut n) = (0.0, 0.0, 0usize);
    for [i, p] in alphas {
        si += i;
        sp += p;
        n += 1;
    }
    if n == 0 {
        (0.0, 0.0)
    } else {
        (si / n as f64, sp / n as f64)
    }
}

/// Train `net` in place of a fresh model. See [`train`].
pub fn train_from(
    mut net: AdaFusionNet,
    input: &InputConfig,
    config: &TrainConfig,
    data: &TrainData<'_>,
    config_hash: &str,
    log_path: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    input.validate()?;
    let loss_fn = MarginLoss::new(config.margin, config.slack)?;
    let miner = PairMiner::new(&data.train, config.d_pos, config.d_neg)?;
    ensure!(
        !miner.positive_indices().is_empty() && miner.negative_count() > 0,
        Validation,
        "training set yields {} positive and {} negative pairs; both must be non-empty",
        miner.positive_indices().len(),
        miner.negative_count()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let raw = load_raw(&data.train, data.source)?;
    let cached: Option<Vec<PreparedInput>> = if config.augment {
        None
    } else {
        Some(raw.iter().map(|r| input.prepare_plain(&r.image, &r.cloud)).collect::<Result<_>>()?)
    };
    let val_inputs: Vec<PreparedInput> = load_raw(&data.val, data.source)?
        .iter()
        .map(|r| input.prepare_plain(&r.image, &r.cloud))
        .collect::<Result<_>>()?;
    let val_sequences = {
        let mut s: Vec<&str> = data.val.iter().map(|f| f.sequence_id.as_str()).collect();
        s.sort_unstable();
        s.dedup();
        s.len()
    };

    let half = config.batch_size / 2;
    let steps_per_epoch = miner.positive_indices().len().div_ceil(half) as u64;
    let mut total_steps = steps_per_epoch * config.epochs as u64;
    if let Some(max) = config.max_steps {
        total_steps = total_steps.min(max);
    }

    let mask = trainable_mask(&net, config.freeze_backbones);
    let mut adam = Adam::new(net.params().len());
    let mut schedule = PlateauSchedule::new(config.lr_init, config.lr_decay, config.patience);
    let mut log_file = match log_path {
        Some(p) => {
            let mut f = fs::File::create(p).map_err(|e| Error::io(p, e))?;
            writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(p, e))?;
            Some((f, p.to_path_buf()))
        }
        None => None,
    };

    let mut step_losses = Vec::with_capacity(total_steps as usize);
    let mut log = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut window_alphas: Vec<[f64; 2]> = Vec::new();
    let mut window_start = 0usize;
    let mut step = 0u64;

    'epochs: loop {
        let mut positives: Vec<(usize, usize)> = miner.positive_indices().to_vec();
        positives.shuffle(&mut rng);
        let mut negatives = miner.sample_negative_indices(config.neg_cap, &mut rng);
        negatives.shuffle(&mut rng);
        for b in 0..steps_per_epoch as usize {
            if step >= total_steps {
                break 'epochs;
            }
            let mut pairs: Vec<(usize, usize, PairKind)> = Vec::with_capacity(config.batch_size);
            for k in 0..half {
                let p = positives[(b * half + k) % positives.len()];
                pairs.push((p.0, p.1, PairKind::Positive));
                let n = negatives[(b * half + k) % negatives.len()];
                pairs.push((n.0, n.1, PairKind::Negative));
            }

            // Unique frames of the batch, in first-use order.
            let mut slot: HashMap<usize, usize> = HashMap::new();
            let mut order = Vec::new();
            for &(a, c, _) in &pairs {
                for f in [a, c] {
                    slot.entry(f).or_insert_with(|| {
                        order.push(f);
                        order.len() - 1
                    });
                }
            }
            let mut images: Vec<FeatureMap> = Vec::with_capacity(order.len());
            let mut voxels: Vec<FeatureMap> = Vec::with_capacity(order.len());
            for &f in &order {
                let x = match &cached {
                    Some(c) => c[f].clone(),
                    None => input.prepare(&raw[f].image, &raw[f].cloud, Some((&config.augmentation, &mut rng)))?,
                };
                images.push(x.image);
                voxels.push(x.voxels);
            }

            let (outputs, cache) = net.forward(&images, &voxels, true)?;
            let cache = cache.expect("training forward returns a cache");
            let (loss, d) = batch_loss_grad(&outputs, &pairs, &slot, &loss_fn)?;
            if !loss.is_finite() {
                let ids: Vec<u64> = order.iter().map(|&f| data.train[f].frame_id).collect();
                return Err(numeric_failure(&net, step, loss, &ids, &outputs));
            }
            let grads = net.backward(&cache, &d);
            adam.step(net.params_mut().values_mut(), &grads, schedule.lr, mask.as_deref());
            net.update_running_stats(&cache);
            ensure!(
                net.params().values().iter().all(|v| v.is_finite()),
                Numeric,
                "parameters became non-finite at step {step}"
            );

            step += 1;
            step_losses.push(loss);
            window_alphas.extend(outputs.iter().map(|o| [o.weights.alpha_i, o.weights.alpha_p]));

            if step.is_multiple_of(config.eval_every) || step == total_steps {
                let window = &step_losses[window_start..];
                let mean_loss = window.iter().sum::<f64>() / window.len() as f64;
                window_start = step_losses.len();
                let (ar1, alphas) = if data.val.is_empty() {
                    (None, alpha_means(window_alphas.drain(..)))
                } else {
                    let db = embed(&net, &data.val, &val_inputs)?;
                    let ar1 = if val_sequences >= 2 {
                        Some(average_recall_suite(&db, &[1], config.d_tp, config.metric)?.ar1)
                    } else {
                        None
                    };
                    window_alphas.clear();
                    (ar1, alpha_means(db.alphas().iter().copied()))
                };
                let row = LogRow {
                    step,
                    loss: mean_loss,
                    ar1,
                    lr: schedule.lr,
                    alpha_i_mean: alphas.0,
                    alpha_p_mean: alphas.1,
                };
                log::info!("{}", row.to_csv_line());
                if let Some((f, p)) = &mut log_file {
                    writeln!(f, "{}", row.to_csv_line()).map_err(|e| Error::io(&*p, e))?;
                }
                log.push(row);
                if let Some(score) = ar1 {
                    if schedule.observe(score) {
                        best = Some(Checkpoint::from_model(&net, config_hash, step, Some(score)));
                    }
                }
            }
        }
    }

    let last = Checkpoint::from_model(&net, config_hash, step, schedule.best());
    Ok(TrainOutcome {
        best: best.unwrap_or_else(|| last.clone()),
        last,
        step_losses,
        log,
    })
}

/// Mean pair loss and its gradient with respect to every frame descriptor.
fn batch_loss_grad(
    outputs: &[NetOutput],
    pairs: &[(usize, usize, PairKind)],
    slot: &HashMap<usize, usize>,
    loss_fn: &MarginLoss,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = pairs.len() as f64;
    let mut d: Vec<Vec<f64>> = outputs.iter().map(|o| vec![0.0; o.descriptor.len()]).collect();
    let mut total = 0.0;
    for &(a, b, kind) in pairs {
        let (sa, sb) = (slot[&a], slot[&b]);
        let (l, g) = loss_fn.loss_and_grad(&outputs[sa].descriptor, &outputs[sb].descriptor, kind);
        total += l;
        for (k, v) in g.iter().enumerate() {
            d[sa][k] += v / n;
            d[sb][k] -= v / n;
        }
    }
    Ok((total / n, d))
}

fn numeric_failure(net: &AdaFusionNet, step: u64, loss: f64, frame_ids: &[u64], outputs: &[NetOutput]) -> Error {
    let non_finite_params: Vec<&str> = net
        .params()
        .entries()
        .iter()
        .filter(|e| !net.params().values()[e.offset..e.offset + e.len].iter().all(|v| v.is_finite()))
        .map(|e| e.name.as_str())
        .collect();
    let bad_outputs: Vec<u64> = outputs
        .iter()
        .zip(frame_ids)
        .filter(|(o, _)| !o.descriptor.iter().all(|v| v.is_finite()))
        .map(|(_, id)| *id)
        .collect();
    Error::Numeric(format!(
        "non-finite loss {loss} at step {step}; batch frames {frame_ids:?}; \
         frames with non-finite descriptors {bad_outputs:?}; non-finite parameter tensors {non_finite_params:?}"
    ))
}
