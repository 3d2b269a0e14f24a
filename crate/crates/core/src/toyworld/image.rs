use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{Region, ToyError};
use crate::nn::DenseArray;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            height: 8,
            width: 8,
        }
    }
}

impl GridConfig {
    pub fn sites(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.channels * self.sites()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `C×H×W` latent grid, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyImage {
    grid: GridConfig,
    data: Vec<f64>,
}

impl ToyImage {
    pub fn zeros(grid: GridConfig) -> Self {
        Self {
            grid,
            data: vec![0.0; grid.len()],
        }
    }

    pub fn filled(grid: GridConfig, value: f64) -> Self {
        Self {
            grid,
            data: vec![value; grid.len()],
        }
    }

    pub fn from_vec(grid: GridConfig, data: Vec<f64>) -> Result<Self, ToyError> {
        if data.len() != grid.len() {
            return Err(ToyError::ShapeMismatch {
                expected: (grid.channels, grid.height, grid.width),
                found: (data.len(), 1, 1),
            });
        }
        Ok(Self { grid, data })
    }

    pub fn grid(&self) -> GridConfig {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.grid.channels
    }

    pub fn height(&self) -> usize {
        self.grid.height
    }

    pub fn width(&self) -> usize {
        self.grid.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn offset(&self, c: usize, i: usize, j: usize) -> usize {
        (c * self.grid.height + i) * self.grid.width + j
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.offset(c, i, j)]
    }

    pub fn set(&mut self, c: usize, i: usize, j: usize, v: f64) {
        let o = self.offset(c, i, j);
        self.data[o] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &ToyImage, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.grid, other.grid, "grid mismatch");
        Self {
            grid: self.grid,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn clamped(&self) -> Self {
        self.map(|v| v.clamp(-1.0, 1.0))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Token-major layout: one row per spatial site (row-major `i·W + j`),
    /// channels as columns.
    pub fn to_tokens(&self) -> DenseArray {
        let (c, n) = (self.grid.channels, self.grid.sites());
        let mut out = vec![0.0; c * n];
        for ch in 0..c {
            for s in 0..n {
                out[s * c + ch] = self.data[ch * n + s];
            }
        }
        DenseArray::new(vec![n, c], out).expect("non-empty grid")
    }

    pub fn from_tokens(grid: GridConfig, tokens: &DenseArray) -> Result<Self, ToyError> {
        let (c, n) = (grid.channels, grid.sites());
        if tokens.shape() != [n, c] {
            let s = tokens.shape();
            return Err(ToyError::ShapeMismatch {
                expected: (c, grid.height, grid.width),
                found: (s.get(1).copied().unwrap_or(0), s[0], 1),
            });
        }
        let mut data = vec![0.0; c * n];
        for s in 0..n {
            for ch in 0..c {
                data[ch * n + s] = tokens.data()[s * c + ch];
            }
        }
        Ok(Self { grid, data })
    }

    pub fn check_grid(&self, grid: GridConfig) -> Result<(), ToyError> {
        if self.grid == grid {
            Ok(())
        } else {
            Err(ToyError::ShapeMismatch {
                expected: (grid.channels, grid.height, grid.width),
                found: (self.grid.channels, self.grid.height, self.grid.width),
            })
        }
    }

    fn nested(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.channels())
            .map(|c| {
                (0..self.height())
                    .map(|i| (0..self.width()).map(|j| self.get(c, i, j)).collect())
                    .collect()
            })
            .collect()
    }
}

impl Serialize for ToyImage {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.nested().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ToyImage {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let nested: Vec<Vec<Vec<f64>>> = Vec::deserialize(d)?;
        let channels = nested.len();
        let height = nested.first().map_or(0, Vec::len);
        let width = nested.first().and_then(|c| c.first()).map_or(0, Vec::len);
        if channels == 0 || height == 0 || width == 0 {
            return Err(D::Error::custom("image must be a non-empty C×H×W nested array"));
        }
        let mut data = Vec::with_capacity(channels * height * width);
        for plane in &nested {
            if plane.len() != height {
                return Err(D::Error::custom("ragged image rows"));
            }
            for row in plane {
                if row.len() != width {
                    return Err(D::Error::custom("ragged image columns"));
                }
                data.extend_from_slice(row);
            }
        }
        Ok(Self {
            grid: GridConfig {
                channels,
                height,
                width,
            },
            data,
        })
    }
}

/// Boolean `H×W` grid marking the corrupted sites.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl RegionMask {
    pub fn quadrant(height: usize, width: usize, region: Region) -> Self {
        let (r0, r1, c0, c1) = region.bounds(height, width);
        let bits = (0..height)
            .flat_map(|i| (0..width).map(move |j| (r0..r1).contains(&i) && (c0..c1).contains(&j)))
            .collect();
        Self { height, width, bits }
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.width + j]
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }
}

impl Serialize for RegionMask {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<&[bool]> = self.bits.chunks(self.width).collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for RegionMask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows: Vec<Vec<bool>> = Vec::deserialize(d)?;
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if height == 0 || width == 0 || rows.iter().any(|r| r.len() != width) {
            return Err(D::Error::custom("mask must be a non-empty rectangular H×W array"));
        }
        Ok(Self {
            height,
            width,
            bits: rows.into_iter().flatten().collect(),
        })
    }
}

/// RMSE over every channel of the sites selected by `mask`. Zero for an
/// empty mask.
pub fn masked_rmse(a: &ToyImage, b: &ToyImage, mask: &RegionMask) -> f64 {
    assert_eq!(a.grid(), b.grid(), "grid mismatch");
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in 0..a.channels() {
        for i in 0..a.height() {
            for j in 0..a.width() {
                if mask.contains(i, j) {
                    let d = a.get(c, i, j) - b.get(c, i, j);
                    sum += d * d;
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

impl ToyImage {
    /// Region RMSE against `other` inside `mask`.
    pub fn region_rmse(&self, other: &ToyImage, mask: &RegionMask) -> f64 {
        masked_rmse(self, other, mask)
    }

    /// RMSE against `other` outside `mask`.
    pub fn outside_rmse(&self, other: &ToyImage, mask: &RegionMask) -> f64 {
        masked_rmse(self, other, &mask.complement())
    }
}
