//! Permeability samplers: a straight high-permeability channel through a
//! low-permeability background, and conditioned log-normal fields with an
//! anisotropic exponential covariance.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fvsim::{Grid2D, PermeabilityField, ScalarField};

pub const CHANNEL_PERM: f64 = 245.0;
pub const BACKGROUND_PERM: f64 = 0.14;
pub const MIN_CHANNEL_WIDTH: f64 = 120.0;
pub const MAX_CHANNEL_WIDTH: f64 = 360.0;

/// Channel geometry in ft: width `w`, top-edge offsets `l1` (left side) and
/// `l2` (right side), measured downward from the top of the domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub w: f64,
    pub l1: f64,
    pub l2: f64,
    pub k_channel: f64,
    pub k_background: f64,
}

impl ChannelParams {
    pub fn new(w: f64, l1: f64, l2: f64) -> Self {
        Self { w, l1, l2, k_channel: CHANNEL_PERM, k_background: BACKGROUND_PERM }
    }

    /// w ~ U(120, 360), l1, l2 ~ U(0, L − w).
    pub fn sample<R: Rng + ?Sized>(length: f64, rng: &mut R) -> Result<Self> {
        if !(length >= MAX_CHANNEL_WIDTH) {
            return Err(Error::Domain(format!(
                "domain length {length} ft is narrower than the widest channel ({MAX_CHANNEL_WIDTH} ft)"
            )));
        }
        let w = rng.random_range(MIN_CHANNEL_WIDTH..=MAX_CHANNEL_WIDTH);
        let l1 = rng.random_range(0.0..=length - w);
        let l2 = rng.random_range(0.0..=length - w);
        Ok(Self::new(w, l1, l2))
    }

    /// Whether the point `(x, y)` (y downward from the top edge) lies inside.
    pub fn contains(&self, length: f64, x: f64, y: f64) -> bool {
        let top = (self.l2 - self.l1) / length * x + self.l1;
        top <= y && y <= top + self.w
    }
}

/// Evaluates the channel field at cell centres.
pub fn channel_field(grid: &Grid2D, length: f64, params: &ChannelParams) -> Result<PermeabilityField> {
    check_square(grid, length)?;
    let values = (0..grid.n_cells())
        .map(|c| {
            let (x, y) = grid.cell_center(c);
            if params.contains(length, x, y) {
                params.k_channel
            } else {
                params.k_background
            }
        })
        .collect();
    ScalarField::new(*grid, values)
}

pub fn sample_channel_perm<R: Rng + ?Sized>(grid: &Grid2D, length: f64, rng: &mut R) -> Result<PermeabilityField> {
    check_square(grid, length)?;
    let params = ChannelParams::sample(length, rng)?;
    channel_field(grid, length, &params)
}

fn check_square(grid: &Grid2D, length: f64) -> Result<()> {
    let ok = |a: f64| (a - length).abs() <= 1e-9 * length.abs().max(1.0);
    if !(length > 0.0) || !ok(grid.lx()) || !ok(grid.ly()) {
        return Err(Error::Domain(format!(
            "channel sampler needs a square {length} ft domain, grid covers {} x {}",
            grid.lx(),
            grid.ly()
        )));
    }
    Ok(())
}

/// Exponential variogram with rotated anisotropy axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariogramParams {
    pub sigma2: f64,
    pub lx: f64,
    pub ly: f64,
    /// Clockwise rotation of the long axis as seen on the map (y downward).
    pub rotation: f64,
    /// Log-permeability imposed at well cells; also used as the process mean.
    pub conditioned_value: f64,
}

impl Default for VariogramParams {
    fn default() -> Self {
        Self { sigma2: 5.0, lx: 620.0, ly: 62.0, rotation: std::f64::consts::FRAC_PI_8, conditioned_value: 2.41 }
    }
}

impl VariogramParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0 && self.lx > 0.0 && self.ly > 0.0) {
            return Err(Error::Domain(format!(
                "variogram needs positive variance and length scales, got {self:?}"
            )));
        }
        if !self.rotation.is_finite() || !self.conditioned_value.is_finite() {
            return Err(Error::Domain("variogram rotation and conditioning value must be finite".into()));
        }
        Ok(())
    }

    /// Projects a lag onto the rotated (long, short) axes.
    pub fn rotate_lag(&self, rx: f64, ry: f64) -> (f64, f64) {
        let (s, c) = self.rotation.sin_cos();
        (c * rx + s * ry, -s * rx + c * ry)
    }

    fn scaled_distance(&self, rx: f64, ry: f64) -> f64 {
        let (u, v) = self.rotate_lag(rx, ry);
        ((u / self.lx).powi(2) + (v / self.ly).powi(2)).sqrt()
    }

    pub fn covariance(&self, rx: f64, ry: f64) -> f64 {
        self.sigma2 * (-self.scaled_distance(rx, ry)).exp()
    }
}

/// γ(r) = σ²(1 − exp(−√((r_x/l_x)² + (r_y/l_y)²))) with the lag given in
/// the variogram's own axes (no rotation).
pub fn variogram_eval(params: &VariogramParams, rx: f64, ry: f64) -> f64 {
    let h = ((rx / params.lx).powi(2) + (ry / params.ly).powi(2)).sqrt();
    params.sigma2 * (1.0 - (-h).exp())
}

/// Factorized covariance and kriging weights for one grid and well layout,
/// reused across draws.
#[derive(Debug, Clone)]
pub struct KrigedSampler {
    grid: Grid2D,
    params: VariogramParams,
    well_cells: Vec<usize>,
    chol: DMatrix<f64>,
    /// Simple-kriging weights: column j maps the residual at well j to every cell.
    weights: DMatrix<f64>,
}

impl KrigedSampler {
    pub fn new(grid: Grid2D, params: VariogramParams, well_cells: &[usize]) -> Result<Self> {
        params.validate()?;
        let n = grid.n_cells();
        let mut wells = well_cells.to_vec();
        wells.sort_unstable();
        wells.dedup();
        if let Some(&bad) = wells.iter().find(|&&c| c >= n) {
            return Err(Error::Domain(format!("well cell {bad} out of range ({n} cells)")));
        }
        let centers: Vec<(f64, f64)> = (0..n).map(|c| grid.cell_center(c)).collect();
        let jitter = 1e-10 * params.sigma2;
        let cov = DMatrix::from_fn(n, n, |i, j| {
            let v = params.covariance(centers[i].0 - centers[j].0, centers[i].1 - centers[j].1);
            if i == j {
                v + jitter
            } else {
                v
            }
        });
        let chol = nalgebra::Cholesky::new(cov.clone())
            .ok_or_else(|| Error::Generation("covariance matrix is not positive definite".into()))?
            .l();
        let weights = if wells.is_empty() {
            DMatrix::zeros(n, 0)
        } else {
            let m = wells.len();
            let cww = DMatrix::from_fn(m, m, |a, b| cov[(wells[a], wells[b])]);
            let cnw = DMatrix::from_fn(n, m, |i, b| cov[(i, wells[b])]);
            let fac = nalgebra::Cholesky::new(cww)
                .ok_or_else(|| Error::Generation("well covariance block is not positive definite".into()))?;
            // W = C_nw C_ww⁻¹  ⇔  C_ww Wᵀ = C_wn
            fac.solve(&cnw.transpose()).transpose()
        };
        Ok(Self { grid, params, well_cells: wells, chol, weights })
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn well_cells(&self) -> &[usize] {
        &self.well_cells
    }

    /// Unconditional Gaussian log-permeability draw (mean = conditioning value).
    pub fn sample_unconditional<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.grid.n_cells();
        let xi = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = &self.chol * xi;
        z.iter().map(|v| v + self.params.conditioned_value).collect()
    }

    /// Conditions an unconditional draw so well cells hit the target exactly.
    pub fn condition(&self, mut field: Vec<f64>) -> Vec<f64> {
        if self.well_cells.is_empty() {
            return field;
        }
        let target = self.params.conditioned_value;
        let resid = DVector::from_iterator(self.well_cells.len(), self.well_cells.iter().map(|&c| target - field[c]));
        let corr = &self.weights * resid;
        for (v, d) in field.iter_mut().zip(corr.iter()) {
            *v += d;
        }
        for &c in &self.well_cells {
            field[c] = target;
        }
        field
    }

    /// Conditioned log-normal permeability draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<PermeabilityField> {
        let log_k = self.condition(self.sample_unconditional(rng));
        let values: Vec<f64> = log_k.into_iter().map(f64::exp).collect();
        if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Generation("kriged permeability is not finite and positive".into()));
        }
        ScalarField::new(self.grid, values)
    }
}

pub fn sample_kriged_perm<R: Rng + ?Sized>(
    grid: &Grid2D,
    params: &VariogramParams,
    well_cells: &[usize],
    rng: &mut R,
) -> Result<PermeabilityField> {
    KrigedSampler::new(*grid, *params, well_cells)?.sample(rng)
}
