use serde::{Deserialize, Serialize};

use super::grid::{Grid2D, ScalarField};
use super::linalg::{pcg, BandCholesky, FivePointMatrix};
use super::wells::WellSet;
use crate::error::{Error, Result};

/// Face transmissibilities of the two-point flux approximation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transmissibilities {
    pub grid: Grid2D,
    /// Faces between (i, j) and (i+1, j), indexed `j * (nx-1) + i`.
    pub tx: Vec<f64>,
    /// Faces between (i, j) and (i, j+1), indexed `j * nx + i`.
    pub ty: Vec<f64>,
}

/// Volumetric fluxes through interior faces (ft²/day), positive in the +x / +y
/// index direction. Same layout as [`Transmissibilities`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceFluxes {
    pub fx: Vec<f64>,
    pub fy: Vec<f64>,
}

impl FaceFluxes {
    pub fn zeros(grid: &Grid2D) -> Self {
        Self {
            fx: vec![0.0; grid.nx.saturating_sub(1) * grid.ny],
            fy: vec![0.0; grid.nx * grid.ny.saturating_sub(1)],
        }
    }

    /// Net outflow through faces for every cell: Σ(out − in).
    pub fn net_outflow(&self, grid: &Grid2D) -> Vec<f64> {
        let (nx, ny) = (grid.nx, grid.ny);
        let mut div = vec![0.0; grid.n_cells()];
        for j in 0..ny {
            for i in 0..nx.saturating_sub(1) {
                let f = self.fx[j * (nx - 1) + i];
                div[j * nx + i] += f;
                div[j * nx + i + 1] -= f;
            }
        }
        for j in 0..ny.saturating_sub(1) {
            for i in 0..nx {
                let f = self.fy[j * nx + i];
                div[j * nx + i] += f;
                div[(j + 1) * nx + i] -= f;
            }
        }
        div
    }
}

#[inline]
fn harmonic(a: f64, b: f64) -> f64 {
    2.0 / (1.0 / a + 1.0 / b)
}

/// TPFA transmissibilities `T_f = hm(k_L, k_R) · face_len / (μ · dist)`.
pub fn assemble_transmissibilities(grid: &Grid2D, perm: &ScalarField, viscosity: f64) -> Result<Transmissibilities> {
    if perm.grid != *grid || perm.values.len() != grid.n_cells() {
        return Err(Error::Domain("permeability field does not match the grid".into()));
    }
    if !(viscosity > 0.0) || !viscosity.is_finite() {
        return Err(Error::Domain(format!("viscosity must be positive, got {viscosity}")));
    }
    if let Some((idx, k)) = perm.values.iter().enumerate().find(|(_, k)| !(**k > 0.0) || !k.is_finite()) {
        return Err(Error::Domain(format!("permeability must be positive, got {k} at cell {idx}")));
    }
    let (nx, ny) = (grid.nx, grid.ny);
    let k = &perm.values;
    let cx = grid.dy / (viscosity * grid.dx);
    let cy = grid.dx / (viscosity * grid.dy);
    let mut tx = Vec::with_capacity(nx.saturating_sub(1) * ny);
    for j in 0..ny {
        for i in 0..nx.saturating_sub(1) {
            tx.push(harmonic(k[j * nx + i], k[j * nx + i + 1]) * cx);
        }
    }
    let mut ty = Vec::with_capacity(nx * ny.saturating_sub(1));
    for j in 0..ny.saturating_sub(1) {
        for i in 0..nx {
            ty.push(harmonic(k[j * nx + i], k[(j + 1) * nx + i]) * cy);
        }
    }
    Ok(Transmissibilities { grid: *grid, tx, ty })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LinearSolverKind {
    /// Direct band Cholesky, factorised once per permeability field.
    #[default]
    BandCholesky,
    /// Jacobi-preconditioned CG, relative tolerance 1e-10, cap 50·n_cells.
    Pcg,
}

/// Relative CG tolerance.
pub const PCG_REL_TOL: f64 = 1e-10;
/// Acceptance bound on the mass-balance residual relative to ‖q‖∞.
pub const RESIDUAL_BOUND: f64 = 1e-8;

#[derive(Debug, Clone)]
enum Backend {
    Band(BandCholesky),
    Pcg,
}

/// Pressure operator for one permeability field, with the gauge fixed by
/// pinning cell 0 to zero pressure.
#[derive(Debug, Clone)]
pub struct PressureSystem {
    trans: Transmissibilities,
    matrix: FivePointMatrix,
    pinned: FivePointMatrix,
    backend: Backend,
}

impl PressureSystem {
    pub fn new(trans: Transmissibilities, kind: LinearSolverKind) -> Result<Self> {
        let grid = trans.grid;
        let (nx, ny) = (grid.nx, grid.ny);
        let mut diag = vec![0.0; grid.n_cells()];
        for j in 0..ny {
            for i in 0..nx.saturating_sub(1) {
                let t = trans.tx[j * (nx - 1) + i];
                diag[j * nx + i] += t;
                diag[j * nx + i + 1] += t;
            }
        }
        for j in 0..ny.saturating_sub(1) {
            for i in 0..nx {
                let t = trans.ty[j * nx + i];
                diag[j * nx + i] += t;
                diag[(j + 1) * nx + i] += t;
            }
        }
        let matrix = FivePointMatrix { nx, ny, diag, off_x: trans.tx.clone(), off_y: trans.ty.clone() };

        // Pin cell 0: decouple its row and column and keep its diagonal.
        let mut pinned = matrix.clone();
        if pinned.diag[0] == 0.0 {
            pinned.diag[0] = 1.0;
        }
        if nx > 1 {
            pinned.off_x[0] = 0.0;
        }
        if ny > 1 {
            pinned.off_y[0] = 0.0;
        }
        let backend = match kind {
            LinearSolverKind::BandCholesky => Backend::Band(BandCholesky::factor(&pinned)?),
            LinearSolverKind::Pcg => Backend::Pcg,
        };
        Ok(Self { trans, matrix, pinned, backend })
    }

    pub fn transmissibilities(&self) -> &Transmissibilities {
        &self.trans
    }

    pub fn grid(&self) -> &Grid2D {
        &self.trans.grid
    }

    /// Solves `A p = q` for a per-cell source vector; returns pressure and
    /// face fluxes.
    pub fn solve_sources(&self, q: &[f64]) -> Result<(Vec<f64>, FaceFluxes)> {
        let grid = self.trans.grid;
        let n = grid.n_cells();
        if q.len() != n {
            return Err(Error::Domain("source vector length mismatch".into()));
        }
        let qnorm = q.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if qnorm == 0.0 {
            return Ok((vec![0.0; n], FaceFluxes::zeros(&grid)));
        }
        let mut rhs = q.to_vec();
        rhs[0] = 0.0;
        let mut p = match &self.backend {
            Backend::Band(chol) => {
                let mut x = rhs.clone();
                chol.solve_in_place(&mut x);
                // One refinement sweep tightens the residual to round-off.
                let mut ax = vec![0.0; n];
                self.pinned.matvec(&x, &mut ax);
                let mut corr: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
                chol.solve_in_place(&mut corr);
                for (xi, ci) in x.iter_mut().zip(&corr) {
                    *xi += ci;
                }
                x
            }
            Backend::Pcg => pcg(&self.pinned, &rhs, PCG_REL_TOL, 50 * n)?.0,
        };
        p[0] = 0.0;
        let fluxes = self.fluxes(&p);
        let residual = mass_balance_residual(&grid, &fluxes, q);
        if !(residual <= RESIDUAL_BOUND * qnorm) {
            let iterations = if matches!(self.backend, Backend::Pcg) { 50 * n } else { 1 };
            return Err(Error::SolverFailure { iterations, residual });
        }
        Ok((p, fluxes))
    }

    pub fn solve(&self, wells: &WellSet) -> Result<(ScalarField, FaceFluxes)> {
        let grid = self.trans.grid;
        wells.validate(grid.n_cells())?;
        let (p, f) = self.solve_sources(&wells.source_field(grid.n_cells()))?;
        Ok((ScalarField { grid, values: p }, f))
    }

    /// Darcy fluxes from a pressure field.
    pub fn fluxes(&self, p: &[f64]) -> FaceFluxes {
        let grid = self.trans.grid;
        let (nx, ny) = (grid.nx, grid.ny);
        let mut fx = Vec::with_capacity(self.trans.tx.len());
        for j in 0..ny {
            for i in 0..nx.saturating_sub(1) {
                fx.push(self.trans.tx[j * (nx - 1) + i] * (p[j * nx + i] - p[j * nx + i + 1]));
            }
        }
        let mut fy = Vec::with_capacity(self.trans.ty.len());
        for j in 0..ny.saturating_sub(1) {
            for i in 0..nx {
                fy.push(self.trans.ty[j * nx + i] * (p[j * nx + i] - p[(j + 1) * nx + i]));
            }
        }
        FaceFluxes { fx, fy }
    }

    /// Unpinned operator, useful for residual checks.
    pub fn matrix(&self) -> &FivePointMatrix {
        &self.matrix
    }
}

/// ∞-norm of per-cell `Σ(out − in) − q`.
pub fn mass_balance_residual(grid: &Grid2D, fluxes: &FaceFluxes, q: &[f64]) -> f64 {
    fluxes
        .net_outflow(grid)
        .iter()
        .zip(q)
        .fold(0.0f64, |m, (d, q)| m.max((d - q).abs()))
}

/// One-shot pressure solve.
pub fn solve_pressure(grid: &Grid2D, trans: &Transmissibilities, wells: &WellSet) -> Result<(ScalarField, FaceFluxes)> {
    if trans.grid != *grid {
        return Err(Error::Domain("transmissibilities belong to a different grid".into()));
    }
    PressureSystem::new(trans.clone(), LinearSolverKind::default())?.solve(wells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_grid(nx: usize, ny: usize) -> Grid2D {
        Grid2D::new(nx, ny, 1.0, 1.0).unwrap()
    }

    #[test]
    fn homogeneous_pair_has_unit_transmissibility() {
        let g = unit_grid(2, 1);
        let t = assemble_transmissibilities(&g, &ScalarField::constant(g, 1.0), 1.0).unwrap();
        assert_eq!(t.tx, vec![1.0]);
        assert!(t.ty.is_empty());
    }

    #[test]
    fn harmonic_face_permeability() {
        let g = unit_grid(2, 1);
        let t = assemble_transmissibilities(&g, &ScalarField::new(g, vec![1.0, 4.0]).unwrap(), 1.0).unwrap();
        assert!((t.tx[0] - 1.6).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        let g = unit_grid(2, 1);
        assert!(assemble_transmissibilities(&g, &ScalarField::new(g, vec![1.0, 0.0]).unwrap(), 1.0).is_err());
        assert!(assemble_transmissibilities(&g, &ScalarField::new(g, vec![1.0, 1.0]).unwrap(), 0.0).is_err());
    }

    #[test]
    fn swapped_cells_give_same_transmissibility() {
        // 3x3 random field; every face recomputed with operands exchanged.
        let g = unit_grid(3, 3);
        let k = vec![0.3, 7.0, 1.2, 45.0, 0.9, 3.3, 12.0, 0.05, 2.2];
        let t = assemble_transmissibilities(&g, &ScalarField::new(g, k.clone()).unwrap(), 0.3).unwrap();
        for j in 0..3 {
            for i in 0..2 {
                let (a, b) = (k[j * 3 + i], k[j * 3 + i + 1]);
                let swapped = 2.0 / (1.0 / b + 1.0 / a) / 0.3;
                assert!(t.tx[j * 2 + i] > 0.0);
                assert!((t.tx[j * 2 + i] - swapped).abs() <= 1e-14 * swapped);
            }
        }
        assert!(t.ty.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn two_cell_hand_solution() {
        let g = unit_grid(2, 1);
        let t = assemble_transmissibilities(&g, &ScalarField::constant(g, 1.0), 1.0).unwrap();
        let w = WellSet::new(vec![(0, 1.0)], vec![(1, -1.0)], 2).unwrap();
        let (p, f) = solve_pressure(&g, &t, &w).unwrap();
        // Gauge pins cell 0; the hand solution {1, 0} shifted by -1.
        assert!((p.values[0] - p.values[1] - 1.0).abs() < 1e-14);
        assert_eq!(p.values[0], 0.0);
        assert!((f.fx[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn zero_sources_give_zero_solution() {
        let g = unit_grid(4, 3);
        let t = assemble_transmissibilities(&g, &ScalarField::constant(g, 2.0), 1.0).unwrap();
        let w = WellSet::new(vec![(0, 0.0)], vec![(11, 0.0)], 12).unwrap();
        let (p, f) = solve_pressure(&g, &t, &w).unwrap();
        assert!(p.values.iter().all(|v| *v == 0.0));
        assert!(f.fx.iter().chain(&f.fy).all(|v| *v == 0.0));
    }

    #[test]
    fn mirror_symmetric_wells_give_mirror_symmetric_pressure() {
        // Injectors in the two left corners, producers in the two right ones;
        // the configuration is symmetric about the horizontal mid-line.
        let g = unit_grid(4, 4);
        let t = assemble_transmissibilities(&g, &ScalarField::constant(g, 3.0), 1.0).unwrap();
        let w = WellSet::new(vec![(0, 1.0), (12, 1.0)], vec![(3, -1.0), (15, -1.0)], 16).unwrap();
        let (p, _) = solve_pressure(&g, &t, &w).unwrap();
        for j in 0..4 {
            for i in 0..4 {
                let a = p.values[g.index(i, j)];
                let b = p.values[g.index(i, 3 - j)];
                assert!((a - b).abs() < 1e-12, "({i},{j}) {a} vs {b}");
            }
        }
        // Point-symmetric about the centre up to the gauge constant.
        let shift = p.values[0] + p.values[15];
        for c in 0..16 {
            assert!((p.values[c] + p.values[15 - c] - shift).abs() < 1e-12);
        }
    }

    #[test]
    fn pcg_backend_matches_direct() {
        let g = unit_grid(6, 5);
        let k: Vec<f64> = (0..30).map(|c| 0.1 + (c as f64 * 1.37).sin().abs() * 50.0).collect();
        let t = assemble_transmissibilities(&g, &ScalarField::new(g, k).unwrap(), 0.3).unwrap();
        let w = WellSet::new(vec![(0, 2.0), (7, 1.0)], vec![(29, -2.5), (20, -0.5)], 30).unwrap();
        let (p1, _) = PressureSystem::new(t.clone(), LinearSolverKind::BandCholesky).unwrap().solve(&w).unwrap();
        let (p2, _) = PressureSystem::new(t, LinearSolverKind::Pcg).unwrap().solve(&w).unwrap();
        for (a, b) in p1.values.iter().zip(&p2.values) {
            assert!((a - b).abs() < 1e-7 * a.abs().max(1.0));
        }
    }

    #[test]
    fn refinement_self_convergence() {
        // Uniform k, point injector and producer in opposite corners. Well and
        // probe locations are cell centres on every grid (n = 9, 27, 81), so
        // the probe difference converges under refinement.
        let probe = |n: usize| {
            let g = Grid2D::covering(n, n, 1.0, 1.0).unwrap();
            let t = assemble_transmissibilities(&g, &ScalarField::constant(g, 1.0), 1.0).unwrap();
            let inj = g.cell_containing(1.0 / 18.0, 1.0 / 18.0).unwrap();
            let prod = g.cell_containing(17.0 / 18.0, 17.0 / 18.0).unwrap();
            let w = WellSet::new(vec![(inj, 1.0)], vec![(prod, -1.0)], n * n).unwrap();
            let (p, _) = solve_pressure(&g, &t, &w).unwrap();
            let a = p.values[g.cell_containing(2.5 / 9.0, 4.5 / 9.0).unwrap()];
            let b = p.values[g.cell_containing(6.5 / 9.0, 4.5 / 9.0).unwrap()];
            a - b
        };
        let (p1, p2, p3) = (probe(9), probe(27), probe(81));
        let e1 = (p1 - p2).abs();
        let e2 = (p2 - p3).abs();
        assert!(e2 < 0.5 * e1, "self-convergence ratio too small: {e1:e} then {e2:e}");
    }

    proptest! {
        #[test]
        fn discrete_conservation(seed in 0u64..1000, nx in 2usize..9, ny in 2usize..9) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = Grid2D::new(nx, ny, 10.0, 7.0).unwrap();
            let k: Vec<f64> = (0..nx * ny).map(|_| 10f64.powf(rng.random_range(-1.0..2.5))).collect();
            let t = assemble_transmissibilities(&g, &ScalarField::new(g, k).unwrap(), 0.3).unwrap();
            let n = nx * ny;
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n);
            if b == a { b = (a + 1) % n; }
            let rate = rng.random_range(0.1..100.0);
            let w = WellSet::new(vec![(a, rate)], vec![(b, -rate)], n).unwrap();
            let (_, f) = solve_pressure(&g, &t, &w).unwrap();
            let res = mass_balance_residual(&g, &f, &w.source_field(n));
            prop_assert!(res <= 1e-8 * rate);
        }
    }
}
