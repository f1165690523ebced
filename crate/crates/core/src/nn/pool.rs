//! Pooling, global average pooling and nearest-neighbour resampling.

use super::tensor::FeatureMap;

/// Output extent of a kernel=stride pooling: floor division per axis.
pub fn pooled_dims(dims: [usize; 3], factor: [usize; 3]) -> [usize; 3] {
    [dims[0] / factor[0], dims[1] / factor[1], dims[2] / factor[2]]
}

/// Max pooling; also returns the flat input index of each selected element.
pub fn max_pool_forward(input: &FeatureMap, factor: [usize; 3]) -> (FeatureMap, Vec<u32>) {
    let od = pooled_dims(input.dims(), factor);
    let mut out = FeatureMap::zeros(input.channels(), od);
    let mut argmax = vec![0u32; out.data().len()];
    let mut o = 0;
    for c in 0..input.channels() {
        for x in 0..od[0] {
            for y in 0..od[1] {
                for z in 0..od[2] {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for a in 0..factor[0] {
                        for b in 0..factor[1] {
                            for d in 0..factor[2] {
                                let i = input.index(c, x * factor[0] + a, y * factor[1] + b, z * factor[2] + d);
                                let v = input.data()[i];
                                // first maximum wins on ties
                                if v > best {
                                    best = v;
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.data_mut()[o] = best;
                    argmax[o] = best_i as u32;
                    o += 1;
                }
            }
        }
    }
    (out, argmax)
}

pub fn max_pool_backward(in_channels: usize, in_dims: [usize; 3], argmax: &[u32], d_out: &FeatureMap) -> FeatureMap {
    let mut d_in = FeatureMap::zeros(in_channels, in_dims);
    let g = d_in.data_mut();
    for (&i, &d) in argmax.iter().zip(d_out.data()) {
        g[i as usize] += d;
    }
    d_in
}

pub fn avg_pool_forward(input: &FeatureMap, factor: [usize; 3]) -> FeatureMap {
    let od = pooled_dims(input.dims(), factor);
    let scale = 1.0 / factor.iter().product::<usize>() as f64;
    let mut out = FeatureMap::zeros(input.channels(), od);
    let mut o = 0;
    for c in 0..input.channels() {
        for x in 0..od[0] {
            for y in 0..od[1] {
                for z in 0..od[2] {
                    let mut acc = 0.0;
                    for a in 0..factor[0] {
                        for b in 0..factor[1] {
                            for d in 0..factor[2] {
                                acc += input.get(c, x * factor[0] + a, y * factor[1] + b, z * factor[2] + d);
                            }
                        }
                    }
                    out.data_mut()[o] = acc * scale;
                    o += 1;
                }
            }
        }
    }
    out
}

pub fn avg_pool_backward(in_channels: usize, in_dims: [usize; 3], factor: [usize; 3], d_out: &FeatureMap) -> FeatureMap {
    let od = d_out.dims();
    let scale = 1.0 / factor.iter().product::<usize>() as f64;
    let mut d_in = FeatureMap::zeros(in_channels, in_dims);
    for c in 0..in_channels {
        for x in 0..od[0] {
            for y in 0..od[1] {
                for z in 0..od[2] {
                    let g = d_out.get(c, x, y, z) * scale;
                    for a in 0..factor[0] {
                        for b in 0..factor[1] {
                            for d in 0..factor[2] {
                                let i = d_in.index(c, x * factor[0] + a, y * factor[1] + b, z * factor[2] + d);
                                d_in.data_mut()[i] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    d_in
}

/// Per-channel mean over all spatial positions.
pub fn global_average_pool(map: &FeatureMap) -> Vec<f64> {
    let n = map.spatial_len() as f64;
    (0..map.channels())
        .map(|c| map.channel(c).iter().sum::<f64>() / n)
        .collect()
}

pub fn global_average_pool_backward(channels: usize, dims: [usize; 3], d_out: &[f64]) -> FeatureMap {
    let n = dims.iter().product::<usize>() as f64;
    let mut d = FeatureMap::zeros(channels, dims);
    for (c, g) in d_out.iter().enumerate() {
        d.channel_mut(c).fill(g / n);
    }
    d
}

/// Source index along one axis for nearest interpolation to `out` samples.
fn nearest_src(t: usize, in_len: usize, out_len: usize) -> usize {
    (t * in_len / out_len).min(in_len - 1)
}

fn nearest_index_map(in_dims: [usize; 3], out_dims: [usize; 3]) -> Vec<usize> {
    let mut idx = Vec::with_capacity(out_dims.iter().product());
    for x in 0..out_dims[0] {
        let sx = nearest_src(x, in_dims[0], out_dims[0]);
        for y in 0..out_dims[1] {
            let sy = nearest_src(y, in_dims[1], out_dims[1]);
            for z in 0..out_dims[2] {
                let sz = nearest_src(z, in_dims[2], out_dims[2]);
                idx.push((sx * in_dims[1] + sy) * in_dims[2] + sz);
            }
        }
    }
    idx
}

/// Nearest-neighbour resampling of every channel to `out_dims`.
pub fn nearest_resample(input: &FeatureMap, out_dims: [usize; 3]) -> FeatureMap {
    if input.dims() == out_dims {
        return input.clone();
    }
    let idx = nearest_index_map(input.dims(), out_dims);
    let mut out = FeatureMap::zeros(input.channels(), out_dims);
    for c in 0..input.channels() {
        let src = input.channel(c);
        for (d, &i) in out.channel_mut(c).iter_mut().zip(&idx) {
            *d = src[i];
        }
    }
    out
}

pub fn nearest_resample_backward(in_dims: [usize; 3], d_out: &FeatureMap) -> FeatureMap {
    if d_out.dims() == in_dims {
        return d_out.clone();
    }
    let idx = nearest_index_map(in_dims, d_out.dims());
    let mut d_in = FeatureMap::zeros(d_out.channels(), in_dims);
    for c in 0..d_out.channels() {
        let g = d_out.channel(c);
        let dst = d_in.channel_mut(c);
        for (&i, v) in idx.iter().zip(g) {
            dst[i] += v;
        }
    }
    d_in
}

pub fn relu_inplace(map: &mut FeatureMap) {
    map.map_inplace(|v| v.max(0.0));
}

/// Gradient of ReLU given its output; zero at the kink.
pub fn relu_backward(output: &FeatureMap, d_out: &mut FeatureMap) {
    for (g, y) in d_out.data_mut().iter_mut().zip(output.data()) {
        if *y <= 0.0 {
            *g = 0.0;
        }
    }
}
