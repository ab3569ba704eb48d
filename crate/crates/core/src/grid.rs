//! Raster containers: multi-channel real images and integer instance maps.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interleaved `H × W × C` image of reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "image buffer has {} values, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Adapts the channel count: missing channels are zero-filled, extra
    /// channels are dropped.
    pub fn with_channels(&self, channels: usize) -> Image {
        if channels == self.channels {
            return self.clone();
        }
        let mut out = Image::zeros(self.height, self.width, channels);
        let keep = channels.min(self.channels);
        for p in 0..self.height * self.width {
            for c in 0..keep {
                out.data[p * channels + c] = self.data[p * self.channels + c];
            }
        }
        out
    }

    /// Single channel `c` as a new image.
    pub fn channel(&self, c: usize) -> Image {
        let data = (0..self.height * self.width).map(|p| self.data[p * self.channels + c]).collect();
        Image { height: self.height, width: self.width, channels: 1, data }
    }

    /// Per-channel min–max rescale to `[0, 1]`; constant channels become 0.
    pub fn normalize_unit(&mut self) {
        for c in 0..self.channels {
            let vals = self.data.iter().skip(c).step_by(self.channels);
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let span = hi - lo;
            for v in self.data.iter_mut().skip(c).step_by(self.channels) {
                *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
            }
        }
    }
}

/// Integer label image; 0 is background, any other value is a cell id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u32>,
}

impl InstanceMap {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "label buffer has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u32) {
        self.data[y * self.width + x] = v;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Sorted non-zero ids present in the map.
    pub fn ids(&self) -> Vec<u32> {
        self.data.iter().copied().filter(|&v| v != 0).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn n_instances(&self) -> usize {
        self.ids().len()
    }

    /// Pixel indices per id, ordered by id.
    pub fn pixels_by_id(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &v) in self.data.iter().enumerate() {
            if v != 0 {
                out.entry(v).or_default().push(i);
            }
        }
        out
    }
}
