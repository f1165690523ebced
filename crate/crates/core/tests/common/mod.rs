//! Shared test fixtures and independent oracles.
#![allow(dead_code)]

pub mod checks;
pub mod oracles;

use adafusion::model::{AdaFusionNet, FusionMode, ModelConfig};
use adafusion::nn::FeatureMap;
use adafusion::training::loss::{MarginLoss, PairKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_map(rng: &mut ChaCha8Rng, channels: usize, dims: [usize; 3], lo: f64, hi: f64) -> FeatureMap {
    let n = channels * dims.iter().product::<usize>();
    FeatureMap::from_vec(channels, dims, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn random_voxels(rng: &mut ChaCha8Rng, dims: [usize; 3], density: f64) -> FeatureMap {
    let n = dims.iter().product::<usize>();
    FeatureMap::from_vec(1, dims, (0..n).map(|_| (rng.random::<f64>() < density) as u8 as f64).collect()).unwrap()
}

/// Width-8 network with every parameter (including biases, batch-norm
/// affine terms and the zero-initialised output layer) randomised so that
/// no unit sits exactly on a ReLU kink.
pub fn random_small_net(seed: u64, fusion: FusionMode) -> AdaFusionNet {
    let config = ModelConfig { fusion, ..ModelConfig::uniform_width(8) };
    let mut net = AdaFusionNet::new(config, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let entries = net.params().entries().to_vec();
    let values = net.params_mut().values_mut();
    for e in &entries {
        let slot = &mut values[e.offset..e.offset + e.len];
        if e.name.ends_with(".gamma") {
            slot.iter_mut().for_each(|v| *v = r.random_range(0.5..1.5));
        } else if e.name.ends_with(".bias") || e.name.ends_with(".beta") {
            slot.iter_mut().for_each(|v| *v = r.random_range(-0.2..0.2));
        } else if e.name.starts_with("head.fc2") {
            slot.iter_mut().for_each(|v| *v = r.random_range(-0.3..0.3));
        }
    }
    net
}

/// Four frames forming one positive pair (0,1) and one negative pair (2,3).
pub struct PairBatch {
    pub images: Vec<FeatureMap>,
    pub voxels: Vec<FeatureMap>,
    pub pairs: Vec<(usize, usize, PairKind)>,
}

pub fn pair_batch(seed: u64, image_dims: [usize; 3], voxel_dims: [usize; 3]) -> PairBatch {
    let mut r = rng(seed);
    PairBatch {
        images: (0..4).map(|_| random_map(&mut r, 3, image_dims, -1.0, 1.0)).collect(),
        voxels: (0..4).map(|_| random_voxels(&mut r, voxel_dims, 0.3)).collect(),
        pairs: vec![(0, 1, PairKind::Positive), (2, 3, PairKind::Negative)],
    }
}

/// Mean pair loss of a training-mode forward.
pub fn batch_loss(net: &AdaFusionNet, batch: &PairBatch, loss: &MarginLoss) -> f64 {
    batch_loss_with_pattern(net, batch, loss).0
}

/// Mean pair loss plus every branch decision taken on the way: network
/// activation pattern, the sign of each descriptor difference inside the
/// L1 distance, and which hinges are active.
pub fn batch_loss_with_pattern(net: &AdaFusionNet, batch: &PairBatch, loss: &MarginLoss) -> (f64, Vec<u32>) {
    let (out, cache) = net.forward(&batch.images, &batch.voxels, true).unwrap();
    let mut pattern = cache.unwrap().activation_pattern();
    let mut total = 0.0;
    for &(a, b, k) in &batch.pairs {
        let l = loss.loss(&out[a].descriptor, &out[b].descriptor, k).unwrap();
        let diff = out[a].descriptor.iter().zip(&out[b].descriptor);
        pattern.extend(diff.map(|(x, y)| (x > y) as u32 + 2 * (x < y) as u32));
        pattern.push((l > 0.0) as u32);
        total += l;
    }
    (total / batch.pairs.len() as f64, pattern)
}

/// Margin and slack that keep both pairs strictly inside their hinge.
pub fn active_margins(net: &AdaFusionNet, batch: &PairBatch) -> MarginLoss {
    let (out, _) = net.forward(&batch.images, &batch.voxels, true).unwrap();
    let l1 = |a: usize, b: usize| -> f64 {
        out[a].descriptor.iter().zip(&out[b].descriptor).map(|(x, y)| (x - y).abs()).sum()
    };
    let d_pos = l1(0, 1);
    let d_neg = l1(2, 3);
    let lo = 0.5 * d_pos;
    let hi = 2.0 * d_neg;
    MarginLoss::new((lo + hi) / 2.0, (hi - lo) / 2.0).unwrap()
}

/// Analytic gradient of [`batch_loss`] via the network's backward pass.
pub fn analytic_grad(net: &AdaFusionNet, batch: &PairBatch, loss: &MarginLoss) -> Vec<f64> {
    let (out, cache) = net.forward(&batch.images, &batch.voxels, true).unwrap();
    let n_pairs = batch.pairs.len() as f64;
    let mut d: Vec<Vec<f64>> = out.iter().map(|o| vec![0.0; o.descriptor.len()]).collect();
    for &(a, b, k) in &batch.pairs {
        let (_, g) = loss.loss_and_grad(&out[a].descriptor, &out[b].descriptor, k);
        for (i, v) in g.iter().enumerate() {
            d[a][i] += v / n_pairs;
            d[b][i] -= v / n_pairs;
        }
    }
    net.backward(&cache.unwrap(), &d)
}

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)`, or 0 when both are negligible.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-10 {
        0.0
    } else {
        diff / scale
    }
}

/// Group name used for reporting, e.g. `image_attention0` or `voxel.stage1`.
pub fn param_group(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts[0] {
        "image" | "voxel" => format!("{}.{}", parts[0], parts[1]),
        other => other.to_string(),
    }
}

pub struct GradCheckRow {
    pub entry: String,
    pub group: String,
    pub checked: usize,
    /// Sampled coordinates rejected because the step crossed a kink.
    pub skipped: usize,
    pub rel_error: f64,
}



/// Central finite differences on up to `per_entry` coordinates of every
/// parameter tensor, compared against the backward pass.
///
/// The loss is piecewise smooth: ReLU, max-pool, `|·|` and hinge kinks
/// split parameter space into pieces on which backprop gives the exact
/// derivative. A central difference whose endpoints fall on different
/// pieces measures a blend of two slopes, so such coordinates are detected
/// from the branch pattern at `x - h`, `x` and `x + h` and replaced by
/// fresh samples (up to `4 * per_entry` candidates per tensor).
pub fn finite_difference_check(
    net: &mut AdaFusionNet,
    batch: &PairBatch,
    loss: &MarginLoss,
    step: f64,
    per_entry: usize,
    seed: u64,
) -> Vec<GradCheckRow> {
    let analytic = analytic_grad(net, batch, loss);
    let (_, base) = batch_loss_with_pattern(net, batch, loss);
    let mut r = rng(seed);
    let entries = net.params().entries().to_vec();
    let mut rows = Vec::new();
    for e in entries {
        let order = rand::seq::index::sample(&mut r, e.len, e.len.min(4 * per_entry)).into_vec();
        let mut a = Vec::with_capacity(per_entry);
        let mut n = Vec::with_capacity(per_entry);
        let mut skipped = 0;
        for i in order {
            if a.len() == per_entry {
                break;
            }
            let k = e.offset + i;
            let orig = net.params().values()[k];
            // Shrink the step until neither side crosses a branch boundary.
            let mut estimate = None;
            for h in [step, step / 10.0, step / 100.0] {
                net.params_mut().values_mut()[k] = orig + h;
                let (plus, p_plus) = batch_loss_with_pattern(net, batch, loss);
                net.params_mut().values_mut()[k] = orig - h;
                let (minus, p_minus) = batch_loss_with_pattern(net, batch, loss);
                net.params_mut().values_mut()[k] = orig;
                if p_plus == base && p_minus == base {
                    estimate = Some((plus - minus) / (2.0 * h));
                    break;
                }
            }
            let Some(fd) = estimate else {
                skipped += 1;
                continue;
            };
            n.push(fd);
            a.push(analytic[k]);
        }
        rows.push(GradCheckRow {
            group: param_group(&e.name),
            entry: e.name.clone(),
            checked: a.len(),
            skipped,
            rel_error: relative_error(&a, &n),
        });
    }
    rows
}
