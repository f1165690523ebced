//! Batch normalisation over a batch of feature maps.

use super::tensor::FeatureMap;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Saved state of a training-mode batch-norm forward.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    pub normalized: Vec<FeatureMap>,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance, used for the running estimate.
    pub batch_var_unbiased: Vec<f64>,
}

/// Normalises with batch statistics (biased variance) over batch and space.
pub fn batch_norm_train(inputs: &[FeatureMap], gamma: &[f64], beta: &[f64]) -> (Vec<FeatureMap>, BatchNormCache) {
    let channels = gamma.len();
    let count = (inputs.len() * inputs[0].spatial_len()) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let s: f64 = inputs.iter().map(|m| m.channel(c).iter().sum::<f64>()).sum();
        mean[c] = s / count;
        let ss: f64 = inputs
            .iter()
            .map(|m| m.channel(c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>())
            .sum();
        var[c] = ss / count;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut normalized = Vec::with_capacity(inputs.len());
    let mut outputs = Vec::with_capacity(inputs.len());
    for m in inputs {
        let mut xhat = m.clone();
        let mut y = m.clone();
        for c in 0..channels {
            for (h, v) in xhat.channel_mut(c).iter_mut().zip(m.channel(c)) {
                *h = (v - mean[c]) * inv_std[c];
            }
            for (o, h) in y.channel_mut(c).iter_mut().zip(xhat.channel(c)) {
                *o = gamma[c] * h + beta[c];
            }
        }
        normalized.push(xhat);
        outputs.push(y);
    }
    let unbiased = if count > 1.0 {
        var.iter().map(|v| v * count / (count - 1.0)).collect()
    } else {
        var.clone()
    };
    (
        outputs,
        BatchNormCache {
            normalized,
            inv_std,
            batch_mean: mean,
            batch_var_unbiased: unbiased,
        },
    )
}

/// Normalises with fixed (running) statistics.
pub fn batch_norm_eval(input: &FeatureMap, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) -> FeatureMap {
    let mut y = input.clone();
    for c in 0..gamma.len() {
        let scale = gamma[c] / (var[c] + BN_EPS).sqrt();
        let shift = beta[c] - mean[c] * scale;
        y.channel_mut(c).iter_mut().for_each(|v| *v = *v * scale + shift);
    }
    y
}

/// Returns input gradients; accumulates into `d_gamma` / `d_beta`.
pub fn batch_norm_backward(
    cache: &BatchNormCache,
    gamma: &[f64],
    d_out: &[FeatureMap],
    d_gamma: &mut [f64],
    d_beta: &mut [f64],
) -> Vec<FeatureMap> {
    let channels = gamma.len();
    let count = (d_out.len() * d_out[0].spatial_len()) as f64;
    let mut sum_dy = vec![0.0; channels];
    let mut sum_dy_xhat = vec![0.0; channels];
    for (g, xh) in d_out.iter().zip(&cache.normalized) {
        for c in 0..channels {
            for (a, b) in g.channel(c).iter().zip(xh.channel(c)) {
                sum_dy[c] += a;
                sum_dy_xhat[c] += a * b;
            }
        }
    }
    for c in 0..channels {
        d_gamma[c] += sum_dy_xhat[c];
        d_beta[c] += sum_dy[c];
    }
    d_out
        .iter()
        .zip(&cache.normalized)
        .map(|(g, xh)| {
            let mut dx = g.clone();
            for c in 0..channels {
                let k = gamma[c] * cache.inv_std[c] / count;
                for ((d, dy), h) in dx.channel_mut(c).iter_mut().zip(g.channel(c)).zip(xh.channel(c)) {
                    *d = k * (count * dy - sum_dy[c] - h * sum_dy_xhat[c]);
                }
            }
            dx
        })
        .collect()
}

/// Exponential running-statistics update (PyTorch convention).
pub fn update_running(running_mean: &mut [f64], running_var: &mut [f64], cache: &BatchNormCache) {
    for c in 0..running_mean.len() {
        running_mean[c] = (1.0 - BN_MOMENTUM) * running_mean[c] + BN_MOMENTUM * cache.batch_mean[c];
        running_var[c] = (1.0 - BN_MOMENTUM) * running_var[c] + BN_MOMENTUM * cache.batch_var_unbiased[c];
    }
}
