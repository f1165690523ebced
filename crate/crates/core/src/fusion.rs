//! Two-stage fusion of multi-scale attention into adaptive modality weights,
//! and assembly of the weighted global descriptor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::conv::{conv_backward, conv_forward};
use crate::nn::dense::{dense_backward, dense_forward, sigmoid};
use crate::nn::params::{grad_pair, Init};
use crate::nn::pool::{global_average_pool, global_average_pool_backward};
use crate::nn::{ConvShape, FeatureMap, ParamId, ParamStore};

/// Per-modality scalar weights, each in `[0, 1]`; they need not sum to one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveWeights {
    pub alpha_i: f64,
    pub alpha_p: f64,
}

impl AdaptiveWeights {
    pub const UNIT: AdaptiveWeights = AdaptiveWeights { alpha_i: 1.0, alpha_p: 1.0 };
}

/// Global descriptor `[α_I f_I, α_P f_P]` with the weights that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedDescriptor {
    pub f_prime: Vec<f64>,
    pub weights: AdaptiveWeights,
    pub frame_id: u64,
}

impl WeightedDescriptor {
    /// Length of each modality half.
    pub fn half_len(&self) -> usize {
        self.f_prime.len() / 2
    }

    pub fn visual_half(&self) -> &[f64] {
        &self.f_prime[..self.half_len()]
    }

    pub fn lidar_half(&self) -> &[f64] {
        &self.f_prime[self.half_len()..]
    }
}

/// Scales and concatenates the two global features.
pub fn weighted_descriptor(f_i: &[f64], f_p: &[f64], weights: AdaptiveWeights, frame_id: u64) -> Result<WeightedDescriptor> {
    ensure!(
        f_i.len() == f_p.len(),
        Shape,
        "visual and LiDAR features differ in length ({} vs {})",
        f_i.len(),
        f_p.len()
    );
    let f_prime = f_i
        .iter()
        .map(|v| weights.alpha_i * v)
        .chain(f_p.iter().map(|v| weights.alpha_p * v))
        .collect();
    Ok(WeightedDescriptor { f_prime, weights, frame_id })
}

/// Gradients of [`weighted_descriptor`]: `(d f_I, d f_P, d α_I, d α_P)`.
pub fn weighted_descriptor_backward(
    f_i: &[f64],
    f_p: &[f64],
    weights: AdaptiveWeights,
    d_desc: &[f64],
) -> (Vec<f64>, Vec<f64>, f64, f64) {
    let (d_first, d_second) = d_desc.split_at(f_i.len());
    let d_fi = d_first.iter().map(|g| weights.alpha_i * g).collect();
    let d_fp = d_second.iter().map(|g| weights.alpha_p * g).collect();
    let d_ai = f_i.iter().zip(d_first).map(|(f, g)| f * g).sum();
    let d_ap = f_p.iter().zip(d_second).map(|(f, g)| f * g).sum();
    (d_fi, d_fp, d_ai, d_ap)
}

/// Kernel-1 convolution merging the concatenated multi-scale attention of
/// one modality into `C3` channels.
#[derive(Clone, Debug)]
pub struct IntraModalityFusion {
    shape: ConvShape,
    weight: ParamId,
    bias: ParamId,
}

impl IntraModalityFusion {
    pub fn new<R: Rng + ?Sized>(prefix: &str, in_channels: usize, out_channels: usize, params: &mut ParamStore, rng: &mut R) -> Self {
        let weight = params.register(
            format!("{prefix}.weight"),
            &[out_channels, in_channels, 1, 1, 1],
            Init::HeUniform { fan_in: in_channels },
            rng,
        );
        let bias = params.register(format!("{prefix}.bias"), &[out_channels], Init::Zeros, rng);
        Self {
            shape: ConvShape { in_channels, out_channels, kernel: [1, 1, 1] },
            weight,
            bias,
        }
    }

    /// Returns the fused map and the concatenated input (kept for backward).
    pub fn forward(&self, params: &ParamStore, attention: &[FeatureMap]) -> Result<(FeatureMap, FeatureMap)> {
        let refs: Vec<&FeatureMap> = attention.iter().collect();
        let concat = intra_concat(&refs, self.shape.in_channels)?;
        let fused = conv_forward(&concat, &self.shape, params.get(self.weight), params.get(self.bias));
        Ok((fused, concat))
    }

    /// Returns the gradient of each attention input.
    pub fn backward(&self, params: &ParamStore, concat: &FeatureMap, d_out: &FeatureMap, sizes: &[usize], grads: &mut [f64]) -> Vec<FeatureMap> {
        let (dw, db) = grad_pair(params, grads, self.weight, self.bias);
        let d_concat = conv_backward(concat, &self.shape, params.get(self.weight), d_out, dw, db);
        d_concat.split_channels(sizes)
    }
}

fn intra_concat(attention: &[&FeatureMap], expected_channels: usize) -> Result<FeatureMap> {
    let concat = FeatureMap::concat_channels(attention)?;
    ensure!(
        concat.channels() == expected_channels,
        Shape,
        "intra-modality fusion expects {expected_channels} channels, got {}",
        concat.channels()
    );
    Ok(concat)
}

/// Stateless form of intra-modality fusion for explicit weights.
pub fn intra_modality_fuse(attention: &[&FeatureMap], weight: &[f64], bias: &[f64]) -> Result<FeatureMap> {
    let in_channels: usize = attention.iter().map(|m| m.channels()).sum();
    let out_channels = bias.len();
    ensure!(weight.len() == in_channels * out_channels, Shape, "fusion weight size mismatch");
    let concat = intra_concat(attention, in_channels)?;
    Ok(conv_forward(&concat, &ConvShape { in_channels, out_channels, kernel: [1, 1, 1] }, weight, bias))
}

/// Global average pooling of both fused attention maps.
pub fn pool_attention(a_i: &FeatureMap, a_p: &FeatureMap) -> (Vec<f64>, Vec<f64>) {
    (global_average_pool(a_i), global_average_pool(a_p))
}

pub fn pool_attention_backward(a_i: &FeatureMap, a_p: &FeatureMap, d_i: &[f64], d_p: &[f64]) -> (FeatureMap, FeatureMap) {
    (
        global_average_pool_backward(a_i.channels(), a_i.dims(), d_i),
        global_average_pool_backward(a_p.channels(), a_p.dims(), d_p),
    )
}

/// Fully connected head mapping `[a_I, a_P]` to `(α_I, α_P)`: ReLU on hidden
/// layers, sigmoid on the two outputs.
#[derive(Clone, Debug)]
pub struct FcHead {
    layers: Vec<(ParamId, ParamId, usize, usize)>,
}

/// Inputs and outputs of each head layer, saved for backward.
#[derive(Clone, Debug)]
pub struct FcCache {
    inputs: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl FcCache {
    /// Activity of every hidden ReLU unit.
    pub fn activation_pattern(&self, out: &mut Vec<u32>) {
        out.extend(self.inputs.iter().skip(1).flatten().map(|&v| (v > 0.0) as u32));
    }
}

impl FcHead {
    /// `sizes` lists node counts from input to output, e.g. `[256, 64, 32, 2]`.
    /// Hidden layers are He-uniform with zero bias. The output layer starts
    /// at zero so the initial weights are exactly `(0.5, 0.5)`.
    pub fn new<R: Rng + ?Sized>(prefix: &str, sizes: &[usize], params: &mut ParamStore, rng: &mut R) -> Self {
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let init = if i == last { Init::Zeros } else { Init::HeUniform { fan_in: w[0] } };
                let wt = params.register(format!("{prefix}.fc{i}.weight"), &[w[1], w[0]], init, rng);
                let b = params.register(format!("{prefix}.fc{i}.bias"), &[w[1]], Init::Zeros, rng);
                (wt, b, w[0], w[1])
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, params: &ParamStore, a_i: &[f64], a_p: &[f64]) -> Result<(AdaptiveWeights, FcCache)> {
        let n_in = self.layers[0].2;
        ensure!(
            a_i.len() + a_p.len() == n_in,
            Shape,
            "FC head expects {n_in} inputs, got {}+{}",
            a_i.len(),
            a_p.len()
        );
        let mut x: Vec<f64> = a_i.iter().chain(a_p).copied().collect();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, (w, b, _, _)) in self.layers.iter().enumerate() {
            let mut y = dense_forward(params.get(*w), params.get(*b), &x);
            if i == last {
                y.iter_mut().for_each(|v| *v = sigmoid(*v));
            } else {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            inputs.push(std::mem::replace(&mut x, y));
        }
        let weights = AdaptiveWeights { alpha_i: x[0], alpha_p: x[1] };
        Ok((weights, FcCache { inputs, output: x }))
    }

    /// Returns `(d a_I, d a_P)`.
    pub fn backward(&self, params: &ParamStore, cache: &FcCache, d_alpha: [f64; 2], grads: &mut [f64]) -> (Vec<f64>, Vec<f64>) {
        let mut g: Vec<f64> = cache.output.iter().zip(d_alpha).map(|(a, d)| d * a * (1.0 - a)).collect();
        for (i, (w, b, _, _)) in self.layers.iter().enumerate().rev() {
            let x = &cache.inputs[i];
            let (dw, db) = grad_pair(params, grads, *w, *b);
            let mut dx = dense_backward(params.get(*w), x, &g, dw, db);
            if i > 0 {
                // x is the ReLU output of the previous layer
                dx.iter_mut().zip(x).for_each(|(d, v)| {
                    if *v <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            g = dx;
        }
        let half = g.len() / 2;
        let d_p = g.split_off(half);
        (g, d_p)
    }

    /// Parameter handles `(weight, bias)` per layer, input side first.
    pub fn layer_params(&self) -> impl Iterator<Item = (ParamId, ParamId)> + '_ {
        self.layers.iter().map(|(w, b, _, _)| (*w, *b))
    }
}
