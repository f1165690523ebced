use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Channel-first dense feature map with up to three spatial axes.
///
/// Two-dimensional maps are stored with a trailing unit axis, so a `C×H×W`
/// image is a map with `dims = [H, W, 1]`. Layout is `[c][x][y][z]` with the
/// last axis contiguous.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    channels: usize,
    dims: [usize; 3],
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self {
            channels,
            dims,
            data: vec![0.0; channels * dims.iter().product::<usize>()],
        }
    }

    pub fn filled(channels: usize, dims: [usize; 3], value: f64) -> Self {
        Self {
            channels,
            dims,
            data: vec![value; channels * dims.iter().product::<usize>()],
        }
    }

    pub fn from_vec(channels: usize, dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let expected = channels * dims.iter().product::<usize>();
        ensure!(
            data.len() == expected,
            Shape,
            "feature map {channels}x{dims:?} needs {expected} values, got {}",
            data.len()
        );
        Ok(Self {
            channels,
            dims,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Number of spatial positions.
    pub fn spatial_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.spatial_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.spatial_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn index(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        let [_, dy, dz] = self.dims;
        ((c * self.dims[0] + x) * dy + y) * dz + z
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(c, x, y, z)]
    }

    pub fn set(&mut self, c: usize, x: usize, y: usize, z: usize, v: f64) {
        let i = self.index(c, x, y, z);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.dims == other.dims
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        self.data.iter_mut().for_each(|v| *v = f(*v));
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates maps of equal spatial size along the channel axis.
    pub fn concat_channels(maps: &[&FeatureMap]) -> Result<FeatureMap> {
        ensure!(!maps.is_empty(), Shape, "cannot concatenate zero maps");
        let dims = maps[0].dims;
        ensure!(
            maps.iter().all(|m| m.dims == dims),
            Shape,
            "channel concatenation needs equal spatial sizes, got {:?}",
            maps.iter().map(|m| m.dims).collect::<Vec<_>>()
        );
        let channels = maps.iter().map(|m| m.channels).sum();
        let mut data = Vec::with_capacity(channels * dims.iter().product::<usize>());
        for m in maps {
            data.extend_from_slice(&m.data);
        }
        Ok(FeatureMap {
            channels,
            dims,
            data,
        })
    }

    /// Splits channels into consecutive groups of the given sizes.
    pub fn split_channels(&self, sizes: &[usize]) -> Vec<FeatureMap> {
        debug_assert_eq!(sizes.iter().sum::<usize>(), self.channels);
        let n = self.spatial_len();
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &c in sizes {
            out.push(FeatureMap {
                channels: c,
                dims: self.dims,
                data: self.data[start * n..(start + c) * n].to_vec(),
            });
            start += c;
        }
        out
    }
}
