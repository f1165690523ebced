//! Spatial and channel self-attention on 2D or 3D feature maps.
//!
//! With `Q, K, V` reshaped to `C×N` (N = number of spatial positions):
//!
//! * spatial: `S_s = softmax_rows(Kᵀ Q)` (N×N), output `V S_sᵀ`;
//! * channel: `S_c = softmax_rows(Q Kᵀ)` (C×C), output `S_c V`.
//!
//! The spatial map is never materialised in full: rows are processed in
//! blocks and recomputed during the backward pass, so memory stays
//! `O(block·N)` even for large taps.
//!
//! An [`AttentionBlock`] projects a tap to `Q, K, V` with kernel-1
//! convolutions, concatenates both attention outputs, mixes them down to
//! `C_a` channels with another kernel-1 convolution and resamples the result
//! to a common spatial size with nearest interpolation.

use rand::Rng;

use crate::error::{ensure, Result};
use crate::nn::conv::{conv_backward, conv_forward};
use crate::nn::gemm::{gemm, Strides};
use crate::nn::params::{grad_pair, Init};
use crate::nn::pool::{nearest_resample, nearest_resample_backward};
use crate::nn::{ConvShape, FeatureMap, ParamId, ParamStore};

const BLOCK_ELEMS: usize = 1 << 20;

/// In-place numerically stable softmax of each row of a `rows × cols` matrix.
pub fn softmax_rows(m: &mut [f64], cols: usize) {
    for row in m.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// `dL = S ⊙ (dS − rowsum(S ⊙ dS))`, written into `d_s`.
fn softmax_rows_backward(s: &[f64], d_s: &mut [f64], cols: usize) {
    for (sr, dr) in s.chunks(cols).zip(d_s.chunks_mut(cols)) {
        let dot: f64 = sr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
        for (d, p) in dr.iter_mut().zip(sr) {
            *d = p * (*d - dot);
        }
    }
}

fn check_qkv(q: &FeatureMap, k: &FeatureMap, v: &FeatureMap) -> Result<()> {
    ensure!(
        q.same_shape(k) && q.same_shape(v),
        Shape,
        "Q, K, V must share one shape, got {}x{:?}, {}x{:?}, {}x{:?}",
        q.channels(),
        q.dims(),
        k.channels(),
        k.dims(),
        v.channels(),
        v.dims()
    );
    Ok(())
}

fn row_block(n: usize) -> usize {
    (BLOCK_ELEMS / n.max(1)).clamp(1, n.max(1))
}

/// Rows `i0..i0+b` of `softmax_rows(Kᵀ Q)` as a `b × N` matrix.
fn spatial_rows(q: &FeatureMap, k: &FeatureMap, i0: usize, b: usize, out: &mut [f64]) {
    let c = q.channels();
    let n = q.spatial_len();
    gemm(
        b,
        c,
        n,
        1.0,
        &k.data()[i0..],
        Strides { row: 1, col: n },
        q.data(),
        Strides::rows(n),
        0.0,
        out,
        Strides::rows(n),
    );
    softmax_rows(out, n);
}

/// Full spatial attention matrix `S_s` (N×N). Intended for inspection and
/// tests; the forward pass streams it instead.
pub fn spatial_attention_matrix(q: &FeatureMap, k: &FeatureMap) -> Vec<f64> {
    let n = q.spatial_len();
    let mut s = vec![0.0; n * n];
    spatial_rows(q, k, 0, n, &mut s);
    s
}

/// Channel attention matrix `S_c` (C×C).
pub fn channel_attention_matrix(q: &FeatureMap, k: &FeatureMap) -> Vec<f64> {
    let c = q.channels();
    let n = q.spatial_len();
    let mut s = vec![0.0; c * c];
    gemm(c, n, c, 1.0, q.data(), Strides::rows(n), k.data(), Strides::transposed(n), 0.0, &mut s, Strides::rows(c));
    softmax_rows(&mut s, c);
    s
}

/// Output `V S_sᵀ` reshaped back to the input shape.
pub fn spatial_attention(q: &FeatureMap, k: &FeatureMap, v: &FeatureMap) -> Result<FeatureMap> {
    check_qkv(q, k, v)?;
    let c = q.channels();
    let n = q.spatial_len();
    let mut out = FeatureMap::zeros(c, q.dims());
    let bs = row_block(n);
    let mut s = vec![0.0; bs * n];
    let mut i0 = 0;
    while i0 < n {
        let b = bs.min(n - i0);
        let s = &mut s[..b * n];
        spatial_rows(q, k, i0, b, s);
        gemm(c, n, b, 1.0, v.data(), Strides::rows(n), s, Strides::transposed(n), 0.0, &mut out.data_mut()[i0..], Strides::rows(n));
        i0 += b;
    }
    Ok(out)
}

/// Gradients of [`spatial_attention`] with respect to `Q, K, V`.
pub fn spatial_attention_backward(
    q: &FeatureMap,
    k: &FeatureMap,
    v: &FeatureMap,
    d_out: &FeatureMap,
) -> (FeatureMap, FeatureMap, FeatureMap) {
    let c = q.channels();
    let n = q.spatial_len();
    let dims = q.dims();
    let mut dq = FeatureMap::zeros(c, dims);
    let mut dk = FeatureMap::zeros(c, dims);
    let mut dv = FeatureMap::zeros(c, dims);
    let bs = row_block(n);
    let mut s = vec![0.0; bs * n];
    let mut ds = vec![0.0; bs * n];
    let mut i0 = 0;
    while i0 < n {
        let b = bs.min(n - i0);
        let s = &mut s[..b * n];
        let ds = &mut ds[..b * n];
        spatial_rows(q, k, i0, b, s);
        let g = &d_out.data()[i0..];
        // dS = Gᵀ V
        gemm(b, c, n, 1.0, g, Strides { row: 1, col: n }, v.data(), Strides::rows(n), 0.0, ds, Strides::rows(n));
        // dV += G S
        gemm(c, b, n, 1.0, g, Strides::rows(n), s, Strides::rows(n), 1.0, dv.data_mut(), Strides::rows(n));
        softmax_rows_backward(s, ds, n);
        // dK[:, block] = Q dLᵀ
        gemm(c, n, b, 1.0, q.data(), Strides::rows(n), ds, Strides::transposed(n), 0.0, &mut dk.data_mut()[i0..], Strides::rows(n));
        // dQ += K[:, block] dL
        gemm(c, b, n, 1.0, &k.data()[i0..], Strides::rows(n), ds, Strides::rows(n), 1.0, dq.data_mut(), Strides::rows(n));
        i0 += b;
    }
    (dq, dk, dv)
}

/// Output `S_c V` reshaped back to the input shape.
pub fn channel_attention(q: &FeatureMap, k: &FeatureMap, v: &FeatureMap) -> Result<FeatureMap> {
    check_qkv(q, k, v)?;
    let s = channel_attention_matrix(q, k);
    Ok(apply_channel_attention(&s, v))
}

fn apply_channel_attention(s: &[f64], v: &FeatureMap) -> FeatureMap {
    let c = v.channels();
    let n = v.spatial_len();
    let mut out = FeatureMap::zeros(c, v.dims());
    gemm(c, c, n, 1.0, s, Strides::rows(c), v.data(), Strides::rows(n), 0.0, out.data_mut(), Strides::rows(n));
    out
}

/// Gradients of [`channel_attention`] given the cached matrix `S_c`.
pub fn channel_attention_backward(
    s: &[f64],
    q: &FeatureMap,
    k: &FeatureMap,
    v: &FeatureMap,
    d_out: &FeatureMap,
) -> (FeatureMap, FeatureMap, FeatureMap) {
    let c = q.channels();
    let n = q.spatial_len();
    let dims = q.dims();
    let mut ds = vec![0.0; c * c];
    gemm(c, n, c, 1.0, d_out.data(), Strides::rows(n), v.data(), Strides::transposed(n), 0.0, &mut ds, Strides::rows(c));
    let mut dv = FeatureMap::zeros(c, dims);
    gemm(c, c, n, 1.0, s, Strides::transposed(c), d_out.data(), Strides::rows(n), 0.0, dv.data_mut(), Strides::rows(n));
    softmax_rows_backward(s, &mut ds, c);
    let mut dq = FeatureMap::zeros(c, dims);
    gemm(c, c, n, 1.0, &ds, Strides::rows(c), k.data(), Strides::rows(n), 0.0, dq.data_mut(), Strides::rows(n));
    let mut dk = FeatureMap::zeros(c, dims);
    gemm(c, c, n, 1.0, &ds, Strides::transposed(c), q.data(), Strides::rows(n), 0.0, dk.data_mut(), Strides::rows(n));
    (dq, dk, dv)
}

/// Kernel-1 projection weights `(weight, bias)` for one of Q, K, V.
#[derive(Clone, Copy, Debug)]
pub struct Projection<'a> {
    pub weight: &'a [f64],
    pub bias: &'a [f64],
}

/// Applies the three kernel-1 projections to a tap.
pub fn project_qkv(tap: &FeatureMap, q: Projection, k: Projection, v: Projection) -> Result<(FeatureMap, FeatureMap, FeatureMap)> {
    let c = tap.channels();
    let shape = ConvShape { in_channels: c, out_channels: c, kernel: [1, 1, 1] };
    for p in [q, k, v] {
        ensure!(
            p.weight.len() == c * c && p.bias.len() == c,
            Shape,
            "projection for {c} channels needs {}+{c} weights",
            c * c
        );
    }
    Ok((
        conv_forward(tap, &shape, q.weight, q.bias),
        conv_forward(tap, &shape, k.weight, k.bias),
        conv_forward(tap, &shape, v.weight, v.bias),
    ))
}

/// Parameters of one attention block.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    channels: usize,
    out_channels: usize,
    qkv: [(ParamId, ParamId); 3],
    fuse: (ParamId, ParamId),
}

/// Activations saved for [`AttentionBlock::backward`].
#[derive(Clone, Debug)]
pub struct AttentionCache {
    tap: FeatureMap,
    q: FeatureMap,
    k: FeatureMap,
    v: FeatureMap,
    channel_matrix: Vec<f64>,
    concat: FeatureMap,
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(prefix: &str, channels: usize, out_channels: usize, params: &mut ParamStore, rng: &mut R) -> Self {
        let mut proj = |name: &str, cin: usize, cout: usize| {
            let w = params.register(format!("{prefix}.{name}.weight"), &[cout, cin, 1, 1, 1], Init::HeUniform { fan_in: cin }, rng);
            let b = params.register(format!("{prefix}.{name}.bias"), &[cout], Init::Zeros, rng);
            (w, b)
        };
        let qkv = [proj("query", channels, channels), proj("key", channels, channels), proj("value", channels, channels)];
        let fuse = proj("fuse", 2 * channels, out_channels);
        Self { channels, out_channels, qkv, fuse }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn pointwise(&self, cin: usize, cout: usize) -> ConvShape {
        ConvShape { in_channels: cin, out_channels: cout, kernel: [1, 1, 1] }
    }

    /// Attention output of one tap, resampled to `target` (which must not
    /// exceed the tap size on any axis).
    pub fn forward(&self, params: &ParamStore, tap: &FeatureMap, target: [usize; 3]) -> Result<(FeatureMap, AttentionCache)> {
        ensure!(tap.channels() == self.channels, Shape, "attention block expects {} channels, got {}", self.channels, tap.channels());
        let dims = tap.dims();
        ensure!(
            (0..3).all(|a| target[a] >= 1 && target[a] <= dims[a]),
            Validation,
            "target size {target:?} exceeds tap size {dims:?}"
        );
        let p = |(w, b): (ParamId, ParamId)| Projection { weight: params.get(w), bias: params.get(b) };
        let (q, k, v) = project_qkv(tap, p(self.qkv[0]), p(self.qkv[1]), p(self.qkv[2]))?;
        let spatial = spatial_attention(&q, &k, &v)?;
        let channel_matrix = channel_attention_matrix(&q, &k);
        let channel = apply_channel_attention(&channel_matrix, &v);
        let concat = FeatureMap::concat_channels(&[&spatial, &channel])?;
        let fused = conv_forward(
            &concat,
            &self.pointwise(2 * self.channels, self.out_channels),
            params.get(self.fuse.0),
            params.get(self.fuse.1),
        );
        let out = nearest_resample(&fused, target);
        Ok((out, AttentionCache { tap: tap.clone(), q, k, v, channel_matrix, concat }))
    }

    /// Accumulates parameter gradients and returns the tap gradient.
    pub fn backward(&self, params: &ParamStore, cache: &AttentionCache, d_out: &FeatureMap, grads: &mut [f64]) -> FeatureMap {
        let dims = cache.tap.dims();
        let d_fused = nearest_resample_backward(dims, d_out);
        let (dw, db) = grad_pair(params, grads, self.fuse.0, self.fuse.1);
        let d_concat = conv_backward(
            &cache.concat,
            &self.pointwise(2 * self.channels, self.out_channels),
            params.get(self.fuse.0),
            &d_fused,
            dw,
            db,
        );
        let parts = d_concat.split_channels(&[self.channels, self.channels]);
        let (mut dq, mut dk, mut dv) = spatial_attention_backward(&cache.q, &cache.k, &cache.v, &parts[0]);
        let (cq, ck, cv) = channel_attention_backward(&cache.channel_matrix, &cache.q, &cache.k, &cache.v, &parts[1]);
        dq.add_assign(&cq);
        dk.add_assign(&ck);
        dv.add_assign(&cv);
        let shape = self.pointwise(self.channels, self.channels);
        let mut d_tap = FeatureMap::zeros(self.channels, dims);
        for ((w, b), d) in self.qkv.iter().zip([&dq, &dk, &dv]) {
            let (gw, gb) = grad_pair(params, grads, *w, *b);
            d_tap.add_assign(&conv_backward(&cache.tap, &shape, params.get(*w), d, gw, gb));
        }
        d_tap
    }

    /// Both attention matrices for a tap (spatial N×N, channel C×C).
    pub fn attention_matrices(&self, params: &ParamStore, tap: &FeatureMap) -> Result<(Vec<f64>, Vec<f64>)> {
        let p = |(w, b): (ParamId, ParamId)| Projection { weight: params.get(w), bias: params.get(b) };
        let (q, k, _) = project_qkv(tap, p(self.qkv[0]), p(self.qkv[1]), p(self.qkv[2]))?;
        Ok((spatial_attention_matrix(&q, &k), channel_attention_matrix(&q, &k)))
    }
}
