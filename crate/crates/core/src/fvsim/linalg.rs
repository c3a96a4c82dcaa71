//! Linear solvers for the symmetric positive-definite pressure system.
//!
//! The matrix is the 5-point TPFA operator on a structured grid, stored as a
//! diagonal plus the x- and y-face couplings.

use crate::error::{Error, Result};

/// Symmetric 5-point operator: `(A p)_c = diag_c p_c - Σ_f T_f p_nb(f)`.
#[derive(Debug, Clone)]
pub struct FivePointMatrix {
    pub nx: usize,
    pub ny: usize,
    pub diag: Vec<f64>,
    /// Coupling between (i, j) and (i+1, j), indexed `j * (nx-1) + i`.
    pub off_x: Vec<f64>,
    /// Coupling between (i, j) and (i, j+1), indexed `j * nx + i`.
    pub off_y: Vec<f64>,
}

impl FivePointMatrix {
    pub fn n(&self) -> usize {
        self.nx * self.ny
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        let (nx, ny) = (self.nx, self.ny);
        for c in 0..self.n() {
            y[c] = self.diag[c] * x[c];
        }
        for j in 0..ny {
            for i in 0..nx.saturating_sub(1) {
                let t = self.off_x[j * (nx - 1) + i];
                let (a, b) = (j * nx + i, j * nx + i + 1);
                y[a] -= t * x[b];
                y[b] -= t * x[a];
            }
        }
        for j in 0..ny.saturating_sub(1) {
            for i in 0..nx {
                let t = self.off_y[j * nx + i];
                let (a, b) = (j * nx + i, (j + 1) * nx + i);
                y[a] -= t * x[b];
                y[b] -= t * x[a];
            }
        }
    }
}

/// Band Cholesky factor `A = L Lᵀ` with half-bandwidth `nx`.
///
/// `band[i * (bw + 1) + k]` holds `L(i, i - k)`.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    bw: usize,
    band: Vec<f64>,
}

impl BandCholesky {
    pub fn factor(a: &FivePointMatrix) -> Result<Self> {
        let n = a.n();
        let bw = if a.ny > 1 { a.nx } else { 1.min(n.saturating_sub(1)) };
        let w = bw + 1;
        let mut band = vec![0.0; n * w];
        // Scatter the lower triangle of A into the band.
        for c in 0..n {
            band[c * w] = a.diag[c];
        }
        let nx = a.nx;
        for j in 0..a.ny {
            for i in 0..nx.saturating_sub(1) {
                let r = j * nx + i + 1;
                band[r * w + 1] = -a.off_x[j * (nx - 1) + i];
            }
        }
        for j in 0..a.ny.saturating_sub(1) {
            for i in 0..nx {
                let r = (j + 1) * nx + i;
                band[r * w + nx] = -a.off_y[j * nx + i];
            }
        }
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let mut s = band[i * w + (i - j)];
                let m0 = j0.max(j.saturating_sub(bw));
                for m in m0..j {
                    s -= band[i * w + (i - m)] * band[j * w + (j - m)];
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(Error::SolverFailure { iterations: i, residual: f64::NAN });
                    }
                    band[i * w] = s.sqrt();
                } else {
                    band[i * w + (i - j)] = s / band[j * w];
                }
            }
        }
        Ok(Self { n, bw, band })
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        for i in 0..n {
            let mut s = x[i];
            for m in i.saturating_sub(bw)..i {
                s -= self.band[i * w + (i - m)] * x[m];
            }
            x[i] = s / self.band[i * w];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for m in (i + 1)..n.min(i + bw + 1) {
                s -= self.band[m * w + (m - i)] * x[m];
            }
            x[i] = s / self.band[i * w];
        }
    }
}

/// Jacobi-preconditioned conjugate gradient.
///
/// Returns the solution and iteration count; fails with the last residual
/// norm when `max_iter` is reached before `‖r‖ ≤ rel_tol · ‖b‖`.
pub fn pcg(a: &FivePointMatrix, b: &[f64], rel_tol: f64, max_iter: usize) -> Result<(Vec<f64>, usize)> {
    let n = a.n();
    let mut x = vec![0.0; n];
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return Ok((x, 0));
    }
    let inv_d: Vec<f64> = a.diag.iter().map(|d| 1.0 / d).collect();
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_d).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    for it in 0..max_iter {
        a.matvec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(Error::SolverFailure { iterations: it, residual: norm2(&r) });
        }
        let alpha = rz / pap;
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        if norm2(&r) <= rel_tol * bnorm {
            return Ok((x, it + 1));
        }
        for k in 0..n {
            z[k] = r[k] * inv_d[k];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
    }
    Err(Error::SolverFailure { iterations: max_iter, residual: norm2(&r) })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
