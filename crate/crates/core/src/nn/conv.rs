//! Stride-1 "same" convolution over 2D or 3D feature maps.
//!
//! Weights are laid out `[out][in][kx][ky][kz]`; padding is `kernel / 2`
//! zeros on every axis so spatial size is preserved for odd kernels. The
//! product is computed as im2col + GEMM over tiles of whole x-planes so the
//! column buffer stays bounded for large inputs.

use super::gemm::{gemm, Strides};
use super::tensor::FeatureMap;

const TILE_ELEMS: usize = 1 << 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
}

impl ConvShape {
    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.taps()
    }

    fn rows(&self) -> usize {
        self.in_channels * self.taps()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1]
    }

    fn padding(&self) -> [isize; 3] {
        self.kernel.map(|k| (k / 2) as isize)
    }
}

fn planes_per_tile(rows: usize, dims: [usize; 3]) -> usize {
    let plane = (dims[1] * dims[2]).max(1);
    (TILE_ELEMS / (rows * plane).max(1)).clamp(1, dims[0].max(1))
}

/// Fills `col` (rows × T) for output planes `x0..x1`.
fn im2col(input: &FeatureMap, shape: &ConvShape, x0: usize, x1: usize, col: &mut [f64]) {
    let [dx, dy, dz] = input.dims();
    let [kx, ky, kz] = shape.kernel;
    let [px, py, pz] = shape.padding();
    let t = (x1 - x0) * dy * dz;
    let mut row = 0;
    for ci in 0..shape.in_channels {
        let chan = input.channel(ci);
        for ox in 0..kx {
            for oy in 0..ky {
                for oz in 0..kz {
                    let dst = &mut col[row * t..(row + 1) * t];
                    let shift_z = oz as isize - pz;
                    let z_lo = (-shift_z).max(0) as usize;
                    let z_hi = ((dz as isize - shift_z).min(dz as isize)).max(0) as usize;
                    let mut idx = 0;
                    for x in x0..x1 {
                        let ix = x as isize + ox as isize - px;
                        for y in 0..dy {
                            let iy = y as isize + oy as isize - py;
                            let out = &mut dst[idx..idx + dz];
                            idx += dz;
                            if ix < 0 || ix >= dx as isize || iy < 0 || iy >= dy as isize || z_lo >= z_hi {
                                out.fill(0.0);
                                continue;
                            }
                            let base = (ix as usize * dy + iy as usize) * dz;
                            out[..z_lo].fill(0.0);
                            out[z_hi..].fill(0.0);
                            let src_lo = (base as isize + z_lo as isize + shift_z) as usize;
                            out[z_lo..z_hi].copy_from_slice(&chan[src_lo..src_lo + (z_hi - z_lo)]);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds `col` (rows × T) back into `grad` for output planes `x0..x1`.
fn col2im(grad: &mut FeatureMap, shape: &ConvShape, x0: usize, x1: usize, col: &[f64]) {
    let [dx, dy, dz] = grad.dims();
    let [kx, ky, kz] = shape.kernel;
    let [px, py, pz] = shape.padding();
    let t = (x1 - x0) * dy * dz;
    let mut row = 0;
    for ci in 0..shape.in_channels {
        let chan = grad.channel_mut(ci);
        for ox in 0..kx {
            for oy in 0..ky {
                for oz in 0..kz {
                    let src = &col[row * t..(row + 1) * t];
                    let shift_z = oz as isize - pz;
                    let z_lo = (-shift_z).max(0) as usize;
                    let z_hi = ((dz as isize - shift_z).min(dz as isize)).max(0) as usize;
                    let mut idx = 0;
                    for x in x0..x1 {
                        let ix = x as isize + ox as isize - px;
                        for y in 0..dy {
                            let iy = y as isize + oy as isize - py;
                            let s = &src[idx..idx + dz];
                            idx += dz;
                            if ix < 0 || ix >= dx as isize || iy < 0 || iy >= dy as isize || z_lo >= z_hi {
                                continue;
                            }
                            let base = (ix as usize * dy + iy as usize) * dz;
                            let dst_lo = (base as isize + z_lo as isize + shift_z) as usize;
                            for (d, v) in chan[dst_lo..dst_lo + (z_hi - z_lo)].iter_mut().zip(&s[z_lo..z_hi]) {
                                *d += v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub fn conv_forward(input: &FeatureMap, shape: &ConvShape, weight: &[f64], bias: &[f64]) -> FeatureMap {
    debug_assert_eq!(input.channels(), shape.in_channels);
    debug_assert_eq!(weight.len(), shape.weight_len());
    debug_assert_eq!(bias.len(), shape.out_channels);
    let dims = input.dims();
    let p = input.spatial_len();
    let mut out = FeatureMap::zeros(shape.out_channels, dims);
    for (co, b) in bias.iter().enumerate() {
        out.channel_mut(co).fill(*b);
    }
    let rows = shape.rows();
    if shape.is_pointwise() {
        gemm(
            shape.out_channels,
            rows,
            p,
            1.0,
            weight,
            Strides::rows(rows),
            input.data(),
            Strides::rows(p),
            1.0,
            out.data_mut(),
            Strides::rows(p),
        );
        return out;
    }
    let plane = dims[1] * dims[2];
    let step = planes_per_tile(rows, dims);
    let mut col = vec![0.0; rows * step * plane];
    let mut x0 = 0;
    while x0 < dims[0] {
        let x1 = (x0 + step).min(dims[0]);
        let t = (x1 - x0) * plane;
        im2col(input, shape, x0, x1, &mut col[..rows * t]);
        gemm(
            shape.out_channels,
            rows,
            t,
            1.0,
            weight,
            Strides::rows(rows),
            &col[..rows * t],
            Strides::rows(t),
            1.0,
            &mut out.data_mut()[x0 * plane..],
            Strides::rows(p),
        );
        x0 = x1;
    }
    out
}

/// Accumulates weight and bias gradients and returns the input gradient.
pub fn conv_backward(
    input: &FeatureMap,
    shape: &ConvShape,
    weight: &[f64],
    d_out: &FeatureMap,
    d_weight: &mut [f64],
    d_bias: &mut [f64],
) -> FeatureMap {
    conv_backward_impl(input, shape, weight, d_out, d_weight, d_bias, true).expect("input gradient requested")
}

/// Parameter gradients only; skips the input-gradient product.
pub fn conv_backward_params(
    input: &FeatureMap,
    shape: &ConvShape,
    d_out: &FeatureMap,
    d_weight: &mut [f64],
    d_bias: &mut [f64],
) {
    conv_backward_impl(input, shape, &[], d_out, d_weight, d_bias, false);
}

fn conv_backward_impl(
    input: &FeatureMap,
    shape: &ConvShape,
    weight: &[f64],
    d_out: &FeatureMap,
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    want_input: bool,
) -> Option<FeatureMap> {
    let dims = input.dims();
    let p = input.spatial_len();
    let rows = shape.rows();
    let cout = shape.out_channels;
    for (co, db) in d_bias.iter_mut().enumerate() {
        *db += d_out.channel(co).iter().sum::<f64>();
    }
    if shape.is_pointwise() {
        gemm(cout, p, rows, 1.0, d_out.data(), Strides::rows(p), input.data(), Strides::transposed(p), 1.0, d_weight, Strides::rows(rows));
        if !want_input {
            return None;
        }
        let mut d_in = FeatureMap::zeros(shape.in_channels, dims);
        gemm(rows, cout, p, 1.0, weight, Strides::transposed(rows), d_out.data(), Strides::rows(p), 0.0, d_in.data_mut(), Strides::rows(p));
        return Some(d_in);
    }
    let mut d_in = FeatureMap::zeros(shape.in_channels, if want_input { dims } else { [0, 0, 0] });
    let plane = dims[1] * dims[2];
    let step = planes_per_tile(rows, dims);
    let mut col = vec![0.0; rows * step * plane];
    let mut d_col = if want_input { vec![0.0; rows * step * plane] } else { vec![0.0; 0] };
    let mut x0 = 0;
    while x0 < dims[0] {
        let x1 = (x0 + step).min(dims[0]);
        let t = (x1 - x0) * plane;
        let col = &mut col[..rows * t];
        let d_col = &mut d_col[..if want_input { rows * t } else { 0 }];
        im2col(input, shape, x0, x1, col);
        let g = &d_out.data()[x0 * plane..];
        gemm(cout, t, rows, 1.0, g, Strides::rows(p), col, Strides::transposed(t), 1.0, d_weight, Strides::rows(rows));
        if want_input {
            gemm(rows, cout, t, 1.0, weight, Strides::transposed(rows), g, Strides::rows(p), 0.0, d_col, Strides::rows(t));
            col2im(&mut d_in, shape, x0, x1, d_col);
        }
        x0 = x1;
    }
    want_input.then_some(d_in)
}
