//! Convolutional feature-extraction backbones for images and voxel grids.
//!
//! A backbone is three stages of basic blocks (two `conv k3 → ReLU` pairs),
//! optional batch normalisation and kernel=stride=2 pooling. The output of
//! every stage is exposed as a tap for the attention branch; the last tap is
//! the local feature map that global average pooling turns into a global
//! feature vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::conv::{conv_backward, conv_backward_params, conv_forward};
use crate::nn::norm::{batch_norm_backward, batch_norm_eval, batch_norm_train, BatchNormCache};
use crate::nn::params::{grad_pair, Init};
use crate::nn::pool::{
    avg_pool_backward, avg_pool_forward, max_pool_backward, max_pool_forward, pooled_dims, relu_backward, relu_inplace,
};
use crate::nn::{ConvShape, FeatureMap, ParamId, ParamStore};

pub use crate::nn::pool::global_average_pool;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

/// One element of a stage: a basic block with the given output width,
/// batch normalisation, or a pooling step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOp {
    Block(usize),
    BatchNorm,
    Pool,
}

/// Layer composition of a three-stage backbone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStackSpec {
    pub in_channels: usize,
    /// 2 for images, 3 for voxel grids.
    pub spatial_rank: usize,
    pub pool: PoolKind,
    pub stages: Vec<Vec<StageOp>>,
}

impl ConvStackSpec {
    /// `C64 P C64 P | C64 C128 P | C128 C128 BN P` with max pooling.
    pub fn image_default() -> Self {
        use StageOp::*;
        Self {
            in_channels: 3,
            spatial_rank: 2,
            pool: PoolKind::Max,
            stages: vec![
                vec![Block(64), Pool, Block(64), Pool],
                vec![Block(64), Block(128), Pool],
                vec![Block(128), Block(128), BatchNorm, Pool],
            ],
        }
    }

    /// `C32 P | C64 C64 P | C128 BN P` with average pooling.
    pub fn voxel_default() -> Self {
        use StageOp::*;
        Self {
            in_channels: 1,
            spatial_rank: 3,
            pool: PoolKind::Avg,
            stages: vec![
                vec![Block(32), Pool],
                vec![Block(64), Block(64), Pool],
                vec![Block(128), BatchNorm, Pool],
            ],
        }
    }

    /// Same composition with every block width replaced by `width`.
    pub fn with_uniform_width(mut self, width: usize) -> Self {
        for op in self.stages.iter_mut().flatten() {
            if let StageOp::Block(w) = op {
                *w = width;
            }
        }
        self
    }

    /// Sets the width of the final block, i.e. the global feature length.
    pub fn with_output_width(mut self, width: usize) -> Self {
        if let Some(StageOp::Block(w)) = self
            .stages
            .iter_mut()
            .flatten()
            .rev()
            .find(|op| matches!(op, StageOp::Block(_)))
        {
            *w = width;
        }
        self
    }

    pub fn output_channels(&self) -> usize {
        self.tap_channels().last().copied().unwrap_or(self.in_channels)
    }

    /// Channel count at the end of each stage.
    pub fn tap_channels(&self) -> Vec<usize> {
        let mut c = self.in_channels;
        self.stages
            .iter()
            .map(|stage| {
                for op in stage {
                    if let StageOp::Block(w) = op {
                        c = *w;
                    }
                }
                c
            })
            .collect()
    }

    pub fn kernel(&self) -> [usize; 3] {
        if self.spatial_rank == 2 {
            [3, 3, 1]
        } else {
            [3, 3, 3]
        }
    }

    pub fn pool_factor(&self) -> [usize; 3] {
        if self.spatial_rank == 2 {
            [2, 2, 1]
        } else {
            [2, 2, 2]
        }
    }

    fn pool_count(&self) -> usize {
        self.stages.iter().flatten().filter(|op| **op == StageOp::Pool).count()
    }

    /// Spatial size at the end of each stage for the given input size.
    pub fn tap_dims(&self, input: [usize; 3]) -> Result<Vec<[usize; 3]>> {
        self.check_input_dims(input)?;
        let f = self.pool_factor();
        let mut d = input;
        Ok(self
            .stages
            .iter()
            .map(|stage| {
                for op in stage {
                    if *op == StageOp::Pool {
                        d = pooled_dims(d, f);
                    }
                }
                d
            })
            .collect())
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        Ok(*self.tap_dims(input)?.last().expect("three stages"))
    }

    fn check_input_dims(&self, d: [usize; 3]) -> Result<()> {
        let total = 1usize << self.pool_count();
        if self.spatial_rank == 2 {
            ensure!(d[2] == 1, Shape, "image backbone expects a 2D input, got {d:?}");
            ensure!(
                d[0] >= total && d[1] >= total,
                Validation,
                "input {}x{} smaller than total pooling factor {total}",
                d[0],
                d[1]
            );
        } else {
            ensure!(
                d.iter().all(|&v| v >= total),
                Validation,
                "input {d:?} smaller than total pooling factor {total}"
            );
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.spatial_rank == 2 || self.spatial_rank == 3, Validation, "spatial rank must be 2 or 3");
        ensure!(self.stages.len() == 3, Validation, "backbone needs exactly three stages");
        ensure!(self.in_channels > 0, Validation, "input channels must be positive");
        for op in self.stages.iter().flatten() {
            if let StageOp::Block(w) = op {
                ensure!(*w > 0, Validation, "block width must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Conv { shape: ConvShape, weight: ParamId, bias: ParamId },
    Relu,
    Pool,
    BatchNorm { gamma: ParamId, beta: ParamId, mean: ParamId, var: ParamId },
}

/// Per-layer state saved by a training-mode forward pass.
#[derive(Clone, Debug)]
enum LayerCache {
    Conv(Vec<FeatureMap>),
    Relu(Vec<FeatureMap>),
    MaxPool { argmax: Vec<Vec<u32>>, channels: usize, dims: [usize; 3] },
    AvgPool { channels: usize, dims: [usize; 3] },
    BatchNorm(BatchNormCache),
}

/// Saved activations of a batch forward, consumed by [`Backbone::backward`].
#[derive(Clone, Debug)]
pub struct BackboneCache {
    layers: Vec<LayerCache>,
}

impl BackboneCache {
    /// Batch statistics of every batch-norm layer, in layer order.
    pub fn batch_norm_caches(&self) -> impl Iterator<Item = &BatchNormCache> {
        self.layers.iter().filter_map(|l| match l {
            LayerCache::BatchNorm(c) => Some(c),
            _ => None,
        })
    }

    /// Appends every branch decision of the piecewise-linear layers: one
    /// entry per ReLU unit (active or not) and the winner of every max-pool
    /// window. Two forwards with equal patterns lie on the same smooth piece.
    pub fn activation_pattern(&self, out: &mut Vec<u32>) {
        for layer in &self.layers {
            match layer {
                LayerCache::Relu(maps) => {
                    out.extend(maps.iter().flat_map(|m| m.data().iter().map(|&v| (v > 0.0) as u32)));
                }
                LayerCache::MaxPool { argmax, .. } => out.extend(argmax.iter().flatten()),
                _ => {}
            }
        }
    }
}

/// Stage outputs for a batch: `taps[stage][sample]`. The last stage is the
/// local feature map.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    pub taps: Vec<Vec<FeatureMap>>,
}

impl BackboneOutput {
    pub fn local_maps(&self) -> &[FeatureMap] {
        self.taps.last().expect("three stages")
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    spec: ConvStackSpec,
    layers: Vec<Layer>,
    /// Index of the last layer of each stage.
    stage_ends: Vec<usize>,
}

impl Backbone {
    /// Registers all parameters and running-stat buffers under `prefix`.
    pub fn new<R: Rng + ?Sized>(
        spec: ConvStackSpec,
        prefix: &str,
        params: &mut ParamStore,
        buffers: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let kernel = spec.kernel();
        let mut layers = Vec::new();
        let mut stage_ends = Vec::new();
        let mut c = spec.in_channels;
        let mut conv_i = 0;
        let mut bn_i = 0;
        for (s, stage) in spec.stages.iter().enumerate() {
            for op in stage {
                match *op {
                    StageOp::Block(w) => {
                        for cin in [c, w] {
                            let shape = ConvShape { in_channels: cin, out_channels: w, kernel };
                            let fan_in = cin * shape.taps();
                            let weight = params.register(
                                format!("{prefix}.stage{s}.conv{conv_i}.weight"),
                                &[w, cin, kernel[0], kernel[1], kernel[2]],
                                Init::HeUniform { fan_in },
                                rng,
                            );
                            let bias = params.register(format!("{prefix}.stage{s}.conv{conv_i}.bias"), &[w], Init::Zeros, rng);
                            layers.push(Layer::Conv { shape, weight, bias });
                            layers.push(Layer::Relu);
                            conv_i += 1;
                        }
                        c = w;
                    }
                    StageOp::BatchNorm => {
                        let name = format!("{prefix}.stage{s}.bn{bn_i}");
                        let gamma = params.register(format!("{name}.gamma"), &[c], Init::Ones, rng);
                        let beta = params.register(format!("{name}.beta"), &[c], Init::Zeros, rng);
                        let mean = buffers.register(format!("{name}.running_mean"), &[c], Init::Zeros, rng);
                        let var = buffers.register(format!("{name}.running_var"), &[c], Init::Ones, rng);
                        layers.push(Layer::BatchNorm { gamma, beta, mean, var });
                        bn_i += 1;
                    }
                    StageOp::Pool => layers.push(Layer::Pool),
                }
            }
            stage_ends.push(layers.len() - 1);
        }
        Ok(Self { spec, layers, stage_ends })
    }

    pub fn spec(&self) -> &ConvStackSpec {
        &self.spec
    }

    fn check_inputs(&self, inputs: &[FeatureMap]) -> Result<()> {
        ensure!(!inputs.is_empty(), Validation, "empty batch");
        let dims = inputs[0].dims();
        for m in inputs {
            ensure!(
                m.channels() == self.spec.in_channels && m.dims() == dims,
                Shape,
                "backbone input {}x{:?} does not match expected {} channels / batch shape {:?}",
                m.channels(),
                m.dims(),
                self.spec.in_channels,
                dims
            );
        }
        self.spec.check_input_dims(dims)
    }

    /// Runs the batch forward. With `train = true` batch norm uses batch
    /// statistics and a cache for the backward pass is returned; otherwise
    /// running statistics are used and no activations are retained.
    pub fn forward(
        &self,
        params: &ParamStore,
        buffers: &ParamStore,
        inputs: &[FeatureMap],
        train: bool,
    ) -> Result<(BackboneOutput, Option<BackboneCache>)> {
        self.check_inputs(inputs)?;
        let factor = self.spec.pool_factor();
        let mut x: Vec<FeatureMap> = inputs.to_vec();
        let mut caches = Vec::with_capacity(if train { self.layers.len() } else { 0 });
        let mut taps = Vec::with_capacity(3);
        let mut stage = 0;
        for (li, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv { shape, weight, bias } => {
                    let (w, b) = (params.get(*weight), params.get(*bias));
                    let y: Vec<FeatureMap> = x.iter().map(|m| conv_forward(m, shape, w, b)).collect();
                    if train {
                        caches.push(LayerCache::Conv(std::mem::replace(&mut x, y)));
                    } else {
                        x = y;
                    }
                }
                Layer::Relu => {
                    x.iter_mut().for_each(relu_inplace);
                    if train {
                        caches.push(LayerCache::Relu(x.clone()));
                    }
                }
                Layer::Pool => {
                    let channels = x[0].channels();
                    let dims = x[0].dims();
                    match self.spec.pool {
                        PoolKind::Max => {
                            let (y, argmax): (Vec<_>, Vec<_>) = x.iter().map(|m| max_pool_forward(m, factor)).unzip();
                            x = y;
                            if train {
                                caches.push(LayerCache::MaxPool { argmax, channels, dims });
                            }
                        }
                        PoolKind::Avg => {
                            x = x.iter().map(|m| avg_pool_forward(m, factor)).collect();
                            if train {
                                caches.push(LayerCache::AvgPool { channels, dims });
                            }
                        }
                    }
                }
                Layer::BatchNorm { gamma, beta, mean, var } => {
                    let (g, b) = (params.get(*gamma), params.get(*beta));
                    if train {
                        let (y, cache) = batch_norm_train(&x, g, b);
                        x = y;
                        caches.push(LayerCache::BatchNorm(cache));
                    } else {
                        let (m, v) = (buffers.get(*mean), buffers.get(*var));
                        x = x.iter().map(|t| batch_norm_eval(t, g, b, m, v)).collect();
                    }
                }
            }
            if self.stage_ends.get(stage) == Some(&li) {
                taps.push(x.clone());
                stage += 1;
            }
        }
        let cache = train.then_some(BackboneCache { layers: caches });
        Ok((BackboneOutput { taps }, cache))
    }

    /// Back-propagates tap gradients (`d_taps[stage][sample]`, `None` for
    /// stages that receive no gradient) into `grads`.
    pub fn backward(
        &self,
        params: &ParamStore,
        cache: &BackboneCache,
        mut d_taps: Vec<Option<Vec<FeatureMap>>>,
        grads: &mut [f64],
    ) {
        let mut g: Option<Vec<FeatureMap>> = None;
        let mut stage = self.stage_ends.len();
        for (li, (layer, lc)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            if stage > 0 && self.stage_ends[stage - 1] == li {
                stage -= 1;
                if let Some(d) = d_taps[stage].take() {
                    g = Some(match g {
                        None => d,
                        Some(mut acc) => {
                            acc.iter_mut().zip(&d).for_each(|(a, b)| a.add_assign(b));
                            acc
                        }
                    });
                }
            }
            let Some(cur) = g.as_mut() else { continue };
            match (layer, lc) {
                (Layer::Conv { shape, weight, bias }, LayerCache::Conv(inputs)) => {
                    let (dw, db) = grad_pair(params, grads, *weight, *bias);
                    if li == 0 {
                        for (inp, d) in inputs.iter().zip(cur.iter()) {
                            conv_backward_params(inp, shape, d, dw, db);
                        }
                        g = None;
                    } else {
                        let w = params.get(*weight);
                        *cur = inputs
                            .iter()
                            .zip(cur.iter())
                            .map(|(inp, d)| conv_backward(inp, shape, w, d, dw, db))
                            .collect();
                    }
                }
                (Layer::Relu, LayerCache::Relu(outputs)) => {
                    cur.iter_mut().zip(outputs).for_each(|(d, y)| relu_backward(y, d));
                }
                (Layer::Pool, LayerCache::MaxPool { argmax, channels, dims }) => {
                    *cur = cur
                        .iter()
                        .zip(argmax)
                        .map(|(d, a)| max_pool_backward(*channels, *dims, a, d))
                        .collect();
                }
                (Layer::Pool, LayerCache::AvgPool { channels, dims }) => {
                    let f = self.spec.pool_factor();
                    *cur = cur.iter().map(|d| avg_pool_backward(*channels, *dims, f, d)).collect();
                }
                (Layer::BatchNorm { gamma, beta, .. }, LayerCache::BatchNorm(bn)) => {
                    let gm = params.get(*gamma);
                    let (dg, dbeta) = grad_pair(params, grads, *gamma, *beta);
                    *cur = batch_norm_backward(bn, gm, cur, dg, dbeta);
                }
                _ => unreachable!("cache does not match layer"),
            }
        }
    }

    /// Folds the batch statistics of a training forward into the running
    /// estimates.
    pub fn update_running_stats(&self, buffers: &mut ParamStore, cache: &BackboneCache) {
        let mut bn_caches = cache.batch_norm_caches();
        for layer in &self.layers {
            if let Layer::BatchNorm { mean, var, .. } = layer {
                let c = bn_caches.next().expect("one cache per batch-norm layer");
                let mut m = buffers.get(*mean).to_vec();
                let mut v = buffers.get(*var).to_vec();
                crate::nn::norm::update_running(&mut m, &mut v, c);
                buffers.get_mut(*mean).copy_from_slice(&m);
                buffers.get_mut(*var).copy_from_slice(&v);
            }
        }
    }
}

/// A single basic block (`conv → ReLU → conv → ReLU`) on one map, using
/// weights `(w1, b1, w2, b2)`. Spatial size is preserved.
pub fn basic_block_forward(
    x: &FeatureMap,
    out_channels: usize,
    kernel: [usize; 3],
    w1: &[f64],
    b1: &[f64],
    w2: &[f64],
    b2: &[f64],
) -> Result<FeatureMap> {
    let s1 = ConvShape { in_channels: x.channels(), out_channels, kernel };
    let s2 = ConvShape { in_channels: out_channels, out_channels, kernel };
    ensure!(
        w1.len() == s1.weight_len() && b1.len() == out_channels && w2.len() == s2.weight_len() && b2.len() == out_channels,
        Shape,
        "basic block weights do not match {} -> {} channels",
        x.channels(),
        out_channels
    );
    let mut h = conv_forward(x, &s1, w1, b1);
    relu_inplace(&mut h);
    let mut y = conv_forward(&h, &s2, w2, b2);
    relu_inplace(&mut y);
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_shape_trace() {
        let img = ConvStackSpec::image_default();
        assert_eq!(img.output_dims([300, 400, 1]).unwrap(), [18, 25, 1]);
        assert_eq!(img.tap_dims([300, 400, 1]).unwrap(), vec![[75, 100, 1], [37, 50, 1], [18, 25, 1]]);
        assert_eq!(img.output_channels(), 128);
        let vox = ConvStackSpec::voxel_default();
        assert_eq!(vox.output_dims([72, 72, 48]).unwrap(), [9, 9, 6]);
        assert_eq!(vox.tap_channels(), vec![32, 64, 128]);
        assert_eq!(vox.with_output_width(96).output_channels(), 96);
    }

    #[test]
    fn doubling_input_doubles_output_up_to_floor() {
        let img = ConvStackSpec::image_default();
        let a = img.output_dims([40, 56, 1]).unwrap();
        let b = img.output_dims([80, 112, 1]).unwrap();
        assert_eq!(a, [2, 3, 1]);
        assert_eq!(b, [5, 7, 1]);
        assert!(b[0] >= 2 * a[0] && b[1] >= 2 * a[1]);
    }

    #[test]
    fn too_small_input_rejected() {
        let img = ConvStackSpec::image_default();
        assert!(img.output_dims([15, 400, 1]).is_err());
        let vox = ConvStackSpec::voxel_default();
        assert!(vox.output_dims([8, 8, 7]).is_err());
    }

    #[test]
    fn basic_block_zero_and_identity() {
        let x = FeatureMap::from_vec(1, [3, 3, 1], (0..9).map(|v| v as f64).collect()).unwrap();
        let z9 = vec![0.0; 9];
        let y = basic_block_forward(&x, 1, [3, 3, 1], &z9, &[0.0], &z9, &[0.0]).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
        let mut id = vec![0.0; 9];
        id[4] = 1.0;
        let y = basic_block_forward(&x, 1, [3, 3, 1], &id, &[0.0], &id, &[0.0]).unwrap();
        assert_eq!(y, x);
        assert!(basic_block_forward(&x, 2, [3, 3, 1], &id, &[0.0], &id, &[0.0]).is_err());
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamStore::new();
        let mut b = ParamStore::new();
        let spec = ConvStackSpec::voxel_default().with_uniform_width(4);
        let bb = Backbone::new(spec, "vox", &mut p, &mut b, &mut rng).unwrap();
        let x = FeatureMap::from_vec(1, [8, 8, 8], (0..512).map(|i| (i % 3 == 0) as u8 as f64).collect()).unwrap();
        let (o1, c1) = bb.forward(&p, &b, std::slice::from_ref(&x), false).unwrap();
        let (o2, _) = bb.forward(&p, &b, std::slice::from_ref(&x), false).unwrap();
        assert!(c1.is_none());
        assert_eq!(o1.local_maps(), o2.local_maps());
        assert_eq!(o1.local_maps()[0].dims(), [1, 1, 1]);
        assert_eq!(o1.taps.len(), 3);
    }
}
