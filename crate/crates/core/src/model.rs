//! The full two-branch network: image and voxel backbones, multi-scale
//! attention, intra/inter-modality fusion and the weighted descriptor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBlock, AttentionCache};
use crate::backbone::{global_average_pool, Backbone, BackboneCache, ConvStackSpec};
use crate::error::{ensure, Result};
use crate::fusion::{
    pool_attention, pool_attention_backward, weighted_descriptor, weighted_descriptor_backward, AdaptiveWeights, FcCache,
    FcHead, IntraModalityFusion, WeightedDescriptor,
};
use crate::nn::pool::global_average_pool_backward;
use crate::nn::{FeatureMap, ParamStore};

/// How the two global features are combined into a descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// `[α_I f_I, α_P f_P]` with learned weights.
    Adaptive,
    /// Plain `[f_I, f_P]`; the weight branch is not evaluated.
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image: ConvStackSpec,
    pub voxel: ConvStackSpec,
    /// Output channels of every attention block (`C_a`).
    pub attention_channels: usize,
    /// Channels after intra-modality fusion (`C3`).
    pub fusion_channels: usize,
    /// Hidden node counts of the FC head.
    pub fc_hidden: Vec<usize>,
    pub fusion: FusionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image: ConvStackSpec::image_default(),
            voxel: ConvStackSpec::voxel_default(),
            attention_channels: 64,
            fusion_channels: 128,
            fc_hidden: vec![64, 32],
            fusion: FusionMode::Adaptive,
        }
    }
}

impl ModelConfig {
    /// Every convolution, attention and fusion width set to `width`.
    pub fn uniform_width(width: usize) -> Self {
        Self {
            image: ConvStackSpec::image_default().with_uniform_width(width),
            voxel: ConvStackSpec::voxel_default().with_uniform_width(width),
            attention_channels: width,
            fusion_channels: width,
            ..Self::default()
        }
    }

    /// Sets the descriptor length; each modality contributes `dim / 2`.
    pub fn with_descriptor_dim(mut self, dim: usize) -> Result<Self> {
        ensure!(dim > 0 && dim.is_multiple_of(2), Validation, "descriptor dimension must be a positive even number, got {dim}");
        self.image = self.image.with_output_width(dim / 2);
        self.voxel = self.voxel.with_output_width(dim / 2);
        Ok(self)
    }

    pub fn descriptor_dim(&self) -> usize {
        self.image.output_channels() + self.voxel.output_channels()
    }

    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.voxel.validate()?;
        ensure!(self.image.spatial_rank == 2 && self.voxel.spatial_rank == 3, Validation, "image backbone must be 2D and voxel backbone 3D");
        ensure!(
            self.image.output_channels() == self.voxel.output_channels(),
            Validation,
            "both backbones must end with the same width, got {} and {}",
            self.image.output_channels(),
            self.voxel.output_channels()
        );
        ensure!(self.attention_channels > 0 && self.fusion_channels > 0, Validation, "attention and fusion widths must be positive");
        ensure!(self.fc_hidden.iter().all(|&h| h > 0), Validation, "FC hidden sizes must be positive");
        Ok(())
    }
}

/// Forward result for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct NetOutput {
    pub f_i: Vec<f64>,
    pub f_p: Vec<f64>,
    pub weights: AdaptiveWeights,
    pub descriptor: Vec<f64>,
}

impl NetOutput {
    pub fn into_descriptor(self, frame_id: u64) -> WeightedDescriptor {
        WeightedDescriptor { f_prime: self.descriptor, weights: self.weights, frame_id }
    }
}

#[derive(Clone, Debug)]
struct BranchCache {
    attention: Vec<AttentionCache>,
    concat: FeatureMap,
    fused: FeatureMap,
}

#[derive(Clone, Debug)]
struct SampleCache {
    image: BranchCache,
    voxel: BranchCache,
    fc: FcCache,
}

/// Everything a training-mode forward saves for the backward pass.
#[derive(Clone, Debug)]
pub struct NetCache {
    image: BackboneCache,
    voxel: BackboneCache,
    image_local: Vec<FeatureMap>,
    voxel_local: Vec<FeatureMap>,
    samples: Option<Vec<SampleCache>>,
    outputs: Vec<NetOutput>,
}

impl NetCache {
    /// Branch decisions of every ReLU, max-pool and head unit in the batch.
    pub fn activation_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        self.image.activation_pattern(&mut out);
        self.voxel.activation_pattern(&mut out);
        for s in self.samples.iter().flatten() {
            s.fc.activation_pattern(&mut out);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct AdaFusionNet {
    config: ModelConfig,
    params: ParamStore,
    buffers: ParamStore,
    image: Backbone,
    voxel: Backbone,
    image_attention: Vec<AttentionBlock>,
    voxel_attention: Vec<AttentionBlock>,
    image_fusion: IntraModalityFusion,
    voxel_fusion: IntraModalityFusion,
    head: FcHead,
}

impl AdaFusionNet {
    /// Builds and initialises a network deterministically from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let image = Backbone::new(config.image.clone(), "image", &mut params, &mut buffers, &mut rng)?;
        let voxel = Backbone::new(config.voxel.clone(), "voxel", &mut params, &mut buffers, &mut rng)?;
        let ca = config.attention_channels;
        let image_attention = config
            .image
            .tap_channels()
            .iter()
            .enumerate()
            .map(|(i, &c)| AttentionBlock::new(&format!("image_attention{i}"), c, ca, &mut params, &mut rng))
            .collect();
        let voxel_attention = config
            .voxel
            .tap_channels()
            .iter()
            .enumerate()
            .map(|(i, &c)| AttentionBlock::new(&format!("voxel_attention{i}"), c, ca, &mut params, &mut rng))
            .collect();
        let c3 = config.fusion_channels;
        let image_fusion = IntraModalityFusion::new("image_fusion", 3 * ca, c3, &mut params, &mut rng);
        let voxel_fusion = IntraModalityFusion::new("voxel_fusion", 3 * ca, c3, &mut params, &mut rng);
        let mut sizes = vec![2 * c3];
        sizes.extend(&config.fc_hidden);
        sizes.push(2);
        let head = FcHead::new("head", &sizes, &mut params, &mut rng);
        Ok(Self {
            config,
            params,
            buffers,
            image,
            voxel,
            image_attention,
            voxel_attention,
            image_fusion,
            voxel_fusion,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut ParamStore {
        &mut self.buffers
    }

    pub fn fc_head(&self) -> &FcHead {
        &self.head
    }

    pub fn image_attention(&self) -> &[AttentionBlock] {
        &self.image_attention
    }

    pub fn voxel_attention(&self) -> &[AttentionBlock] {
        &self.voxel_attention
    }

    pub fn image_backbone(&self) -> &Backbone {
        &self.image
    }

    pub fn voxel_backbone(&self) -> &Backbone {
        &self.voxel
    }

    /// Batch forward. Training mode (`train = true`) uses batch statistics in
    /// batch norm and returns a cache for [`AdaFusionNet::backward`].
    pub fn forward(&self, images: &[FeatureMap], voxels: &[FeatureMap], train: bool) -> Result<(Vec<NetOutput>, Option<NetCache>)> {
        ensure!(
            images.len() == voxels.len(),
            Validation,
            "batch has {} images but {} voxel grids",
            images.len(),
            voxels.len()
        );
        let (img_out, img_cache) = self.image.forward(&self.params, &self.buffers, images, train)?;
        let (vox_out, vox_cache) = self.voxel.forward(&self.params, &self.buffers, voxels, train)?;
        let adaptive = self.config.fusion == FusionMode::Adaptive;
        let mut outputs = Vec::with_capacity(images.len());
        let mut samples = Vec::with_capacity(if adaptive && train { images.len() } else { 0 });
        for s in 0..images.len() {
            let m_i = &img_out.local_maps()[s];
            let m_p = &vox_out.local_maps()[s];
            let f_i = global_average_pool(m_i);
            let f_p = global_average_pool(m_p);
            let weights = if adaptive {
                let image = self.branch_forward(&self.image_attention, &self.image_fusion, &img_out.taps, s)?;
                let voxel = self.branch_forward(&self.voxel_attention, &self.voxel_fusion, &vox_out.taps, s)?;
                let (a_i, a_p) = pool_attention(&image.fused, &voxel.fused);
                let (w, fc) = self.head.forward(&self.params, &a_i, &a_p)?;
                if train {
                    samples.push(SampleCache { image, voxel, fc });
                }
                w
            } else {
                AdaptiveWeights::UNIT
            };
            let descriptor = weighted_descriptor(&f_i, &f_p, weights, 0)?.f_prime;
            outputs.push(NetOutput { f_i, f_p, weights, descriptor });
        }
        let cache = match (img_cache, vox_cache) {
            (Some(image), Some(voxel)) => Some(NetCache {
                image,
                voxel,
                image_local: img_out.local_maps().to_vec(),
                voxel_local: vox_out.local_maps().to_vec(),
                samples: adaptive.then_some(samples),
                outputs: outputs.clone(),
            }),
            _ => None,
        };
        Ok((outputs, cache))
    }

    fn branch_forward(
        &self,
        blocks: &[AttentionBlock],
        fusion: &IntraModalityFusion,
        taps: &[Vec<FeatureMap>],
        s: usize,
    ) -> Result<BranchCache> {
        let target = taps.last().expect("three taps")[s].dims();
        let mut maps = Vec::with_capacity(blocks.len());
        let mut attention = Vec::with_capacity(blocks.len());
        for (blk, tap) in blocks.iter().zip(taps) {
            let (a, c) = blk.forward(&self.params, &tap[s], target)?;
            maps.push(a);
            attention.push(c);
        }
        let (fused, concat) = fusion.forward(&self.params, &maps)?;
        Ok(BranchCache { attention, concat, fused })
    }

    fn branch_backward(
        &self,
        blocks: &[AttentionBlock],
        fusion: &IntraModalityFusion,
        cache: &BranchCache,
        d_fused: &FeatureMap,
        grads: &mut [f64],
    ) -> Vec<FeatureMap> {
        let sizes: Vec<usize> = blocks.iter().map(|b| b.out_channels()).collect();
        let d_att = fusion.backward(&self.params, &cache.concat, d_fused, &sizes, grads);
        blocks
            .iter()
            .zip(&cache.attention)
            .zip(&d_att)
            .map(|((blk, c), d)| blk.backward(&self.params, c, d, grads))
            .collect()
    }

    /// Gradient of a loss with respect to all parameters, given the loss
    /// gradient of each sample's descriptor.
    pub fn backward(&self, cache: &NetCache, d_descriptors: &[Vec<f64>]) -> Vec<f64> {
        let n = cache.outputs.len();
        assert_eq!(d_descriptors.len(), n, "one descriptor gradient per sample");
        let mut grads = self.params.zeros_like();
        let mut d_img: Vec<Vec<Option<FeatureMap>>> = vec![vec![None; n]; 3];
        let mut d_vox: Vec<Vec<Option<FeatureMap>>> = vec![vec![None; n]; 3];
        let add = |slot: &mut Option<FeatureMap>, g: FeatureMap| match slot {
            Some(acc) => acc.add_assign(&g),
            None => *slot = Some(g),
        };
        for s in 0..n {
            let out = &cache.outputs[s];
            let (d_fi, d_fp, d_ai, d_ap) = weighted_descriptor_backward(&out.f_i, &out.f_p, out.weights, &d_descriptors[s]);
            let m_i = &cache.image_local[s];
            let m_p = &cache.voxel_local[s];
            add(&mut d_img[2][s], global_average_pool_backward(m_i.channels(), m_i.dims(), &d_fi));
            add(&mut d_vox[2][s], global_average_pool_backward(m_p.channels(), m_p.dims(), &d_fp));
            if let Some(samples) = &cache.samples {
                let sc = &samples[s];
                let (da_i, da_p) = self.head.backward(&self.params, &sc.fc, [d_ai, d_ap], &mut grads);
                let (dfi, dfp) = pool_attention_backward(&sc.image.fused, &sc.voxel.fused, &da_i, &da_p);
                let ti = self.branch_backward(&self.image_attention, &self.image_fusion, &sc.image, &dfi, &mut grads);
                let tv = self.branch_backward(&self.voxel_attention, &self.voxel_fusion, &sc.voxel, &dfp, &mut grads);
                for (stage, g) in ti.into_iter().enumerate() {
                    add(&mut d_img[stage][s], g);
                }
                for (stage, g) in tv.into_iter().enumerate() {
                    add(&mut d_vox[stage][s], g);
                }
            }
        }
        // Every sample reaches the same set of taps, so a stage is either
        // fully populated or untouched.
        let collect = |d: Vec<Vec<Option<FeatureMap>>>| -> Vec<Option<Vec<FeatureMap>>> {
            d.into_iter()
                .map(|per_sample| per_sample.into_iter().collect::<Option<Vec<_>>>())
                .collect()
        };
        let d_img = collect(d_img);
        let d_vox = collect(d_vox);
        self.image.backward(&self.params, &cache.image, d_img, &mut grads);
        self.voxel.backward(&self.params, &cache.voxel, d_vox, &mut grads);
        grads
    }

    /// Applies the batch statistics of a training forward to the running
    /// batch-norm estimates.
    pub fn update_running_stats(&mut self, cache: &NetCache) {
        self.image.update_running_stats(&mut self.buffers, &cache.image);
        self.voxel.update_running_stats(&mut self.buffers, &cache.voxel);
    }

    /// Inference-mode descriptor of a single frame.
    pub fn describe(&self, image: &FeatureMap, voxels: &FeatureMap, frame_id: u64) -> Result<WeightedDescriptor> {
        let (mut out, _) = self.forward(std::slice::from_ref(image), std::slice::from_ref(voxels), false)?;
        Ok(out.pop().expect("one output").into_descriptor(frame_id))
    }

    /// Replaces parameters and buffers from flat value vectors.
    pub fn load_state(&mut self, params: &[f64], buffers: &[f64]) -> Result<()> {
        ensure!(
            self.params.load_values(params) && self.buffers.load_values(buffers),
            Format,
            "parameter vector length does not match the model layout"
        );
        Ok(())
    }
}
