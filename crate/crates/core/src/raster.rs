//! Dense row-major buffers: RGB frames, flow fields and feature grids.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::Point2;

/// Interleaved `height x width x channels` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(alloc::format!(
                "image buffer has {} values, expected {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, value: &[f32]) -> Self {
        let channels = value.len();
        let mut data = Vec::with_capacity(height * width * channels);
        for _ in 0..height * width {
            data.extend_from_slice(value);
        }
        Self { height, width, channels, data }
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let o = (row * self.width + col) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let o = (row * self.width + col) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Bilinear interpolation of a 2-channel field at continuous `(x, y)`.
///
/// Returns `None` outside `[0, width-1] x [0, height-1]`.
fn bilinear2(data: &[f32], height: usize, width: usize, p: Point2) -> Option<Point2> {
    if !p.is_finite() || p.x < 0.0 || p.y < 0.0 {
        return None;
    }
    let (xmax, ymax) = ((width - 1) as f64, (height - 1) as f64);
    if p.x > xmax || p.y > ymax {
        return None;
    }
    let x0 = libm::floor(p.x) as usize;
    let y0 = libm::floor(p.y) as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = p.x - x0 as f64;
    let fy = p.y - y0 as f64;
    let at = |r: usize, c: usize, k: usize| data[(r * width + c) * 2 + k] as f64;
    let mut out = [0.0; 2];
    for (k, o) in out.iter_mut().enumerate() {
        let top = (1.0 - fx) * at(y0, x0, k) + fx * at(y0, x1, k);
        let bottom = (1.0 - fx) * at(y1, x0, k) + fx * at(y1, x1, k);
        *o = (1.0 - fy) * top + fy * bottom;
    }
    Some(Point2::new(out[0], out[1]))
}

/// Dense displacement field `f_{source -> target}` in pixels.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FlowField {
    pub source: usize,
    pub target: usize,
    pub height: usize,
    pub width: usize,
    /// `(dx, dy)` interleaved, row-major.
    pub data: Vec<f32>,
}

impl FlowField {
    pub fn new(source: usize, target: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 2 {
            return Err(Error::shape("flow buffer must hold height*width*2 values"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("flow field contains non-finite values"));
        }
        Ok(Self { source, target, height, width, data })
    }

    pub fn constant(source: usize, target: usize, height: usize, width: usize, d: Point2) -> Self {
        let mut data = vec![0.0f32; height * width * 2];
        for px in data.chunks_exact_mut(2) {
            px[0] = d.x as f32;
            px[1] = d.y as f32;
        }
        Self { source, target, height, width, data }
    }

    /// Builds a field from a closure evaluated at every integer pixel `(x, y)`.
    pub fn from_fn(
        source: usize,
        target: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(f64, f64) -> Point2,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * 2);
        for r in 0..height {
            for c in 0..width {
                let d = f(c as f64, r as f64);
                data.push(d.x as f32);
                data.push(d.y as f32);
            }
        }
        Self { source, target, height, width, data }
    }

    pub fn at(&self, row: usize, col: usize) -> Point2 {
        let o = (row * self.width + col) * 2;
        Point2::new(self.data[o] as f64, self.data[o + 1] as f64)
    }

    pub fn contains(&self, p: Point2) -> bool {
        p.is_finite()
            && p.x >= 0.0
            && p.y >= 0.0
            && p.x <= (self.width - 1) as f64
            && p.y <= (self.height - 1) as f64
    }

    pub fn sample(&self, p: Point2) -> Option<Point2> {
        bilinear2(&self.data, self.height, self.width, p)
    }

    /// `p + f(p)`, or `None` when `p` lies outside the field.
    pub fn advect(&self, p: Point2) -> Option<Point2> {
        self.sample(p).map(|d| p + d)
    }
}

/// Row-major grid of `dim`-dimensional descriptors.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FeatureGrid {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(rows: usize, cols: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols * dim {
            return Err(Error::shape(alloc::format!(
                "feature buffer has {} values, expected {}x{}x{}",
                data.len(),
                rows,
                cols,
                dim
            )));
        }
        Ok(Self { rows, cols, dim, data })
    }

    pub fn zeros(rows: usize, cols: usize, dim: usize) -> Self {
        Self { rows, cols, dim, data: vec![0.0; rows * cols * dim] }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn cell_mut(&mut self, index: usize) -> &mut [f32] {
        &mut self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn cells(&self) -> core::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bilinear sample at continuous grid coordinates, clamped to the grid's
    /// hull.
    pub fn sample(&self, row: f64, col: f64) -> Vec<f64> {
        let row = row.clamp(0.0, (self.rows - 1) as f64);
        let col = col.clamp(0.0, (self.cols - 1) as f64);
        let r0 = libm::floor(row) as usize;
        let c0 = libm::floor(col) as usize;
        let r1 = (r0 + 1).min(self.rows - 1);
        let c1 = (c0 + 1).min(self.cols - 1);
        let fr = row - r0 as f64;
        let fc = col - c0 as f64;
        let w = [
            ((1.0 - fr) * (1.0 - fc), r0, c0),
            ((1.0 - fr) * fc, r0, c1),
            (fr * (1.0 - fc), r1, c0),
            (fr * fc, r1, c1),
        ];
        let mut out = vec![0.0f64; self.dim];
        for (wt, r, c) in w {
            if wt == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(self.cell(r * self.cols + c)) {
                *o += wt * *v as f64;
            }
        }
        out
    }
}
