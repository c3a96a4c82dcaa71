use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform structured 2D grid.
///
/// Cells are indexed row-major: `idx = j * nx + i`, where `i` counts columns
/// left to right (x) and `j` counts rows top to bottom (y measured downward
/// from the upper-left corner of the domain).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
}

impl Grid2D {
    pub fn new(nx: usize, ny: usize, dx: f64, dy: f64) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::Domain(format!("grid needs at least one cell, got {nx}x{ny}")));
        }
        if !(dx > 0.0 && dy > 0.0) || !dx.is_finite() || !dy.is_finite() {
            return Err(Error::Domain(format!("cell sizes must be positive, got dx={dx}, dy={dy}")));
        }
        Ok(Self { nx, ny, dx, dy })
    }

    /// Grid with `nx x ny` cells covering a `lx x ly` rectangle.
    pub fn covering(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::Domain(format!("grid needs at least one cell, got {nx}x{ny}")));
        }
        Self::new(nx, ny, lx / nx as f64, ly / ny as f64)
    }

    #[inline]
    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.nx, idx / self.nx)
    }

    pub fn lx(&self) -> f64 {
        self.nx as f64 * self.dx
    }

    pub fn ly(&self) -> f64 {
        self.ny as f64 * self.dy
    }

    /// Domain area |Ω|.
    pub fn area(&self) -> f64 {
        self.lx() * self.ly()
    }

    pub fn cell_area(&self) -> f64 {
        self.dx * self.dy
    }

    pub fn cell_center(&self, idx: usize) -> (f64, f64) {
        let (i, j) = self.coords(idx);
        ((i as f64 + 0.5) * self.dx, (j as f64 + 0.5) * self.dy)
    }

    /// Cell containing the physical point `(x, y)`; points on the far
    /// boundary belong to the last cell.
    pub fn cell_containing(&self, x: f64, y: f64) -> Result<usize> {
        let (lx, ly) = (self.lx(), self.ly());
        let tol = 1e-9 * lx.max(ly);
        if !(x >= -tol && x <= lx + tol && y >= -tol && y <= ly + tol) {
            return Err(Error::Domain(format!("point ({x}, {y}) outside {lx}x{ly} domain")));
        }
        let i = ((x / self.dx).floor().max(0.0) as usize).min(self.nx - 1);
        let j = ((y / self.dy).floor().max(0.0) as usize).min(self.ny - 1);
        Ok(self.index(i, j))
    }

    /// Same physical extent as `other` up to a relative tolerance.
    pub fn same_extent(&self, other: &Grid2D) -> bool {
        let rel = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs());
        rel(self.lx(), other.lx()) && rel(self.ly(), other.ly())
    }
}

/// One real value per grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarField {
    pub grid: Grid2D,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid2D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::Domain(format!(
                "field has {} values but the grid has {} cells",
                values.len(),
                grid.n_cells()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: Grid2D, value: f64) -> Self {
        Self { grid, values: vec![value; grid.n_cells()] }
    }

    pub fn zeros(grid: Grid2D) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Permeability in mD, one value per cell.
pub type PermeabilityField = ScalarField;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_grids() {
        assert!(Grid2D::new(0, 3, 1.0, 1.0).is_err());
        assert!(Grid2D::new(3, 3, 0.0, 1.0).is_err());
        assert!(Grid2D::new(3, 3, 1.0, -2.0).is_err());
    }

    #[test]
    fn row_major_indexing() {
        let g = Grid2D::new(4, 3, 1.0, 2.0).unwrap();
        assert_eq!(g.index(1, 2), 9);
        assert_eq!(g.coords(9), (1, 2));
        assert_eq!(g.cell_center(9), (1.5, 5.0));
        assert_eq!(g.area(), 24.0);
    }

    #[test]
    fn containing_cell_clamps_far_edge() {
        let g = Grid2D::covering(4, 4, 8.0, 8.0).unwrap();
        assert_eq!(g.cell_containing(0.0, 0.0).unwrap(), 0);
        assert_eq!(g.cell_containing(8.0, 8.0).unwrap(), 15);
        assert_eq!(g.cell_containing(3.9, 2.1).unwrap(), g.index(1, 1));
        assert!(g.cell_containing(9.0, 1.0).is_err());
    }

    #[test]
    fn field_length_checked() {
        let g = Grid2D::new(2, 2, 1.0, 1.0).unwrap();
        assert!(ScalarField::new(g, vec![1.0; 3]).is_err());
    }
}
