//! Pixel and feature-grid coordinate conventions.
//!
//! Origin is the top-left corner, `x` grows rightward and `y` downward; the
//! center of pixel `(row i, col j)` sits at continuous `(x = j, y = i)`.

use core::ops::{Add, Mul, Sub};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        libm::sqrt(self.x * self.x + self.y * self.y)
    }

    pub fn dist(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Scales each axis independently, e.g. when mapping between resolutions.
    pub fn scale(self, sx: f64, sy: f64) -> Self {
        Self::new(self.x * sx, self.y * sy)
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.x * rhs, self.y * rhs)
    }
}

/// Maps pixel coordinate `x` on an axis of `size` pixels into `[-1, 1]`.
pub fn normalize_coord(x: f64, size: usize) -> f64 {
    2.0 * x / (size as f64 - 1.0) - 1.0
}

pub fn denormalize_coord(n: f64, size: usize) -> f64 {
    (n + 1.0) * (size as f64 - 1.0) / 2.0
}

/// Layout of a ViT patch-feature grid over an image.
///
/// Cell `k` along an axis covers the patch whose top-left pixel is
/// `stride * k`; its representative pixel is the patch center
/// `stride * k + (patch_size - 1) / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub stride: usize,
    pub patch_size: usize,
}

impl PatchGrid {
    pub fn for_image(height: usize, width: usize, stride: usize, patch_size: usize) -> Result<Self> {
        if stride == 0 || patch_size == 0 {
            return Err(Error::input("stride and patch size must be positive"));
        }
        if height < patch_size || width < patch_size {
            return Err(Error::input(alloc::format!(
                "frame {height}x{width} is smaller than the {patch_size}px patch"
            )));
        }
        Ok(Self {
            rows: (height - patch_size) / stride + 1,
            cols: (width - patch_size) / stride + 1,
            stride,
            patch_size,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn offset(&self) -> f64 {
        (self.patch_size as f64 - 1.0) / 2.0
    }

    /// Continuous grid coordinates `(row, col)` to pixel position.
    pub fn cell_to_pixel(&self, row: f64, col: f64) -> Point2 {
        let s = self.stride as f64;
        let o = self.offset();
        Point2::new(s * col + o, s * row + o)
    }

    /// Pixel position to continuous grid coordinates `(row, col)`.
    pub fn pixel_to_cell(&self, p: Point2) -> (f64, f64) {
        let s = self.stride as f64;
        let o = self.offset();
        ((p.y - o) / s, (p.x - o) / s)
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn row_col(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    /// Pixel center of the cell at row-major `index`.
    pub fn center(&self, index: usize) -> Point2 {
        let (r, c) = self.row_col(index);
        self.cell_to_pixel(r as f64, c as f64)
    }

    /// Row-major index of the cell whose center is nearest to `p`, clamped
    /// into the grid.
    pub fn nearest_cell(&self, p: Point2) -> usize {
        let (r, c) = self.pixel_to_cell(p);
        let r = libm::round(r).clamp(0.0, (self.rows - 1) as f64) as usize;
        let c = libm::round(c).clamp(0.0, (self.cols - 1) as f64) as usize;
        self.index(r, c)
    }

    pub fn centers(&self) -> impl Iterator<Item = Point2> + '_ {
        (0..self.len()).map(|i| self.center(i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_size_for_476_square() {
        let g = PatchGrid::for_image(476, 476, 7, 14).unwrap();
        assert_eq!((g.rows, g.cols), (67, 67));
    }

    #[test]
    fn patch_center_convention() {
        let g = PatchGrid::for_image(100, 100, 7, 14).unwrap();
        assert_eq!(g.cell_to_pixel(0.0, 0.0), Point2::new(6.5, 6.5));
        assert_eq!(g.pixel_to_cell(Point2::new(6.5, 6.5)), (0.0, 0.0));
        assert_eq!(g.cell_to_pixel(2.0, 3.0), Point2::new(27.5, 20.5));
    }

    #[test]
    fn integer_cells_round_trip_exactly() {
        let g = PatchGrid::for_image(480, 854, 7, 14).unwrap();
        for r in 0..g.rows {
            for c in 0..g.cols {
                let p = g.cell_to_pixel(r as f64, c as f64);
                assert_eq!(g.pixel_to_cell(p), (r as f64, c as f64));
            }
        }
    }

    #[test]
    fn too_small_frame_rejected() {
        assert!(PatchGrid::for_image(10, 100, 7, 14).is_err());
    }

    #[test]
    fn normalization_endpoints() {
        assert_eq!(normalize_coord(0.0, 128), -1.0);
        assert_eq!(normalize_coord(127.0, 128), 1.0);
        let x = 37.25;
        assert!((denormalize_coord(normalize_coord(x, 91), 91) - x).abs() < 1e-12);
    }
}
