use crate::error::{Error, Result};
use crate::fvsim::{Grid2D, ScalarField};

/// Overlap-weighted transfer between two grids covering the same domain.
///
/// Each destination cell takes the area-weighted average of the source cells
/// it overlaps. On nested grids this is the partition mean when coarsening
/// and piecewise-constant injection when refining. Weights are separable:
/// `w(dst (i,j), src (a,b)) = wx[i][a] · wy[j][b]`.
#[derive(Debug, Clone)]
pub struct GridTransfer {
    src: Grid2D,
    dst: Grid2D,
    wx: Vec<Vec<(usize, f64)>>,
    wy: Vec<Vec<(usize, f64)>>,
}

/// 1D overlap fractions of each destination interval, in exact integer
/// arithmetic on the common refinement `n_src · n_dst`.
fn overlaps(n_src: usize, n_dst: usize) -> Vec<Vec<(usize, f64)>> {
    (0..n_dst)
        .map(|i| {
            let (lo, hi) = (i * n_src, (i + 1) * n_src);
            let first = lo / n_dst;
            let last = (hi - 1) / n_dst;
            (first..=last)
                .filter_map(|a| {
                    let (alo, ahi) = (a * n_dst, (a + 1) * n_dst);
                    let len = hi.min(ahi).saturating_sub(lo.max(alo));
                    (len > 0).then(|| (a, len as f64 / n_src as f64))
                })
                .collect()
        })
        .collect()
}

impl GridTransfer {
    /// Any pair of grids with the same physical extent.
    pub fn new(src: Grid2D, dst: Grid2D) -> Result<Self> {
        if !src.same_extent(&dst) {
            return Err(Error::Config(format!(
                "grids do not cover the same domain: {}x{} vs {}x{}",
                src.lx(),
                src.ly(),
                dst.lx(),
                dst.ly()
            )));
        }
        Ok(Self { src, dst, wx: overlaps(src.nx, dst.nx), wy: overlaps(src.ny, dst.ny) })
    }

    /// Like [`GridTransfer::new`] but requires one grid to partition the other
    /// exactly (integer cell ratios in both directions).
    pub fn nested(src: Grid2D, dst: Grid2D) -> Result<Self> {
        let divides = |a: usize, b: usize| if a >= b { a % b == 0 } else { b % a == 0 };
        let same_dir = (src.nx >= dst.nx) == (src.ny >= dst.ny);
        if !(divides(src.nx, dst.nx) && divides(src.ny, dst.ny) && same_dir) {
            return Err(Error::Config(format!(
                "grids {}x{} and {}x{} do not nest",
                src.nx, src.ny, dst.nx, dst.ny
            )));
        }
        Self::new(src, dst)
    }

    pub fn src(&self) -> &Grid2D {
        &self.src
    }

    pub fn dst(&self) -> &Grid2D {
        &self.dst
    }

    pub fn is_identity(&self) -> bool {
        self.src.nx == self.dst.nx && self.src.ny == self.dst.ny
    }

    /// Source cells and weights (summing to 1) feeding destination cell `cell`.
    pub fn weights_for(&self, cell: usize) -> Vec<(usize, f64)> {
        let (i, j) = self.dst.coords(cell);
        let mut out = Vec::with_capacity(self.wx[i].len() * self.wy[j].len());
        for &(b, wb) in &self.wy[j] {
            for &(a, wa) in &self.wx[i] {
                out.push((self.src.index(a, b), wa * wb));
            }
        }
        out
    }

    /// Area-weighted arithmetic mean.
    pub fn mean(&self, src: &[f64]) -> Vec<f64> {
        self.combine(src, |v| v, |s| s)
    }

    /// Area-weighted harmonic mean (for permeability).
    pub fn harmonic(&self, src: &[f64]) -> Vec<f64> {
        self.combine(src, |v| 1.0 / v, |s| 1.0 / s)
    }

    /// Extensive transfer: each destination cell receives the part of every
    /// source quantity lying inside it, so totals are conserved.
    pub fn sum(&self, src: &[f64]) -> Vec<f64> {
        let rev = GridTransfer { src: self.dst, dst: self.src, wx: overlaps(self.dst.nx, self.src.nx), wy: overlaps(self.dst.ny, self.src.ny) };
        let mut out = vec![0.0; self.dst.n_cells()];
        for s in 0..self.src.n_cells() {
            for (d, w) in rev.weights_for(s) {
                out[d] += w * src[s];
            }
        }
        out
    }

    fn combine(&self, src: &[f64], fwd: impl Fn(f64) -> f64, back: impl Fn(f64) -> f64) -> Vec<f64> {
        debug_assert_eq!(src.len(), self.src.n_cells());
        if self.is_identity() {
            return src.to_vec();
        }
        let nxs = self.src.nx;
        let mut out = Vec::with_capacity(self.dst.n_cells());
        for j in 0..self.dst.ny {
            for i in 0..self.dst.nx {
                let mut s = 0.0;
                for &(b, wb) in &self.wy[j] {
                    let mut row = 0.0;
                    for &(a, wa) in &self.wx[i] {
                        row += wa * fwd(src[b * nxs + a]);
                    }
                    s += wb * row;
                }
                out.push(back(s));
            }
        }
        out
    }

    pub fn mean_field(&self, f: &ScalarField) -> Result<ScalarField> {
        self.check(f)?;
        ScalarField::new(self.dst, self.mean(&f.values))
    }

    pub fn harmonic_field(&self, f: &ScalarField) -> Result<ScalarField> {
        self.check(f)?;
        if f.values.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Domain("harmonic transfer needs strictly positive values".into()));
        }
        ScalarField::new(self.dst, self.harmonic(&f.values))
    }

    fn check(&self, f: &ScalarField) -> Result<()> {
        if f.grid != self.src {
            return Err(Error::Config("field grid does not match the transfer source".into()));
        }
        Ok(())
    }
}

/// Coarsens concentration (mean) and permeability (harmonic mean) onto a
/// grid that nests inside `fine`.
pub fn restrict_fields(
    concentration: &ScalarField,
    permeability: &ScalarField,
    coarse: Grid2D,
) -> Result<(ScalarField, ScalarField)> {
    let fine = concentration.grid;
    if coarse.nx > fine.nx || coarse.ny > fine.ny {
        return Err(Error::Config("restriction target must be coarser".into()));
    }
    let t = GridTransfer::nested(fine, coarse)?;
    Ok((t.mean_field(concentration)?, t.harmonic_field(permeability)?))
}

/// Piecewise-constant injection of a coarse field onto a nested finer grid.
pub fn prolong_field(field: &ScalarField, fine: Grid2D) -> Result<ScalarField> {
    if fine.nx < field.grid.nx || fine.ny < field.grid.ny {
        return Err(Error::Config("prolongation target must be finer".into()));
    }
    GridTransfer::nested(field.grid, fine)?.mean_field(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sq(n: usize) -> Grid2D {
        Grid2D::covering(n, n, 8.0, 8.0).unwrap()
    }

    #[test]
    fn block_mean_and_harmonic() {
        let t = GridTransfer::nested(sq(2), sq(1)).unwrap();
        assert_eq!(t.mean(&[1.0, 2.0, 3.0, 4.0]), vec![2.5]);
        assert!((t.harmonic(&[1.0, 1.0, 4.0, 4.0])[0] - 1.6).abs() < 1e-15);
    }

    #[test]
    fn prolong_copies_and_round_trips() {
        let coarse = ScalarField::new(sq(2), vec![2.5, 0.0, 1.0, -3.0]).unwrap();
        let fine = prolong_field(&coarse, sq(4)).unwrap();
        assert_eq!(&fine.values[0..4], &[2.5, 2.5, 0.0, 0.0]);
        assert_eq!(fine.min(), coarse.min());
        assert_eq!(fine.max(), coarse.max());
        let back = GridTransfer::nested(sq(4), sq(2)).unwrap().mean_field(&fine).unwrap();
        assert_eq!(back, coarse);
    }

    #[test]
    fn rejects_mismatched_grids() {
        assert!(GridTransfer::nested(sq(4), sq(3)).is_err());
        assert!(GridTransfer::new(sq(4), Grid2D::covering(4, 4, 8.0, 9.0).unwrap()).is_err());
        assert!(GridTransfer::new(sq(4), sq(3)).is_ok());
        let c = ScalarField::zeros(sq(2));
        assert!(restrict_fields(&c, &ScalarField::constant(sq(2), 1.0), sq(4)).is_err());
    }

    #[test]
    fn non_nested_weights_partition_unity() {
        let a = Grid2D::covering(31, 111, 620.0, 1860.0).unwrap();
        let b = Grid2D::covering(73, 219, 620.0, 1860.0).unwrap();
        for t in [GridTransfer::new(a, b).unwrap(), GridTransfer::new(b, a).unwrap()] {
            for c in (0..t.dst().n_cells()).step_by(97) {
                let s: f64 = t.weights_for(c).iter().map(|(_, w)| w).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        // Area-weighted averaging conserves the domain integral.
        let t = GridTransfer::new(b, a).unwrap();
        let v: Vec<f64> = (0..b.n_cells()).map(|k| (k as f64 * 0.37).sin()).collect();
        let total_b: f64 = v.iter().sum::<f64>() * b.cell_area();
        let total_a: f64 = t.mean(&v).iter().sum::<f64>() * a.cell_area();
        assert!((total_a - total_b).abs() < 1e-9 * total_b.abs().max(1.0));
    }

    #[test]
    fn sum_transfer_conserves_totals() {
        let t = GridTransfer::nested(sq(8), sq(2)).unwrap();
        let mut q = vec![0.0; 64];
        q[9] = 3.0;
        q[14] = -1.0;
        q[63] = -2.0;
        let c = t.sum(&q);
        assert_eq!(c, vec![3.0, -1.0, 0.0, -2.0]);
    }

    proptest! {
        #[test]
        fn restriction_composes(vals in proptest::collection::vec(0.01f64..100.0, 256)) {
            let f = ScalarField::new(sq(16), vals).unwrap();
            let t1 = GridTransfer::nested(sq(16), sq(8)).unwrap();
            let t2 = GridTransfer::nested(sq(8), sq(4)).unwrap();
            let direct = GridTransfer::nested(sq(16), sq(4)).unwrap();
            let m2 = t2.mean(&t1.mean(&f.values));
            let h2 = t2.harmonic(&t1.harmonic(&f.values));
            for (a, b) in m2.iter().zip(direct.mean(&f.values)) {
                prop_assert!((a - b).abs() <= 1e-13 * b.abs());
            }
            for (a, b) in h2.iter().zip(direct.harmonic(&f.values)) {
                prop_assert!((a - b).abs() <= 1e-13 * b.abs());
                prop_assert!(*a > 0.0);
            }
            let gm: f64 = f.values.iter().sum::<f64>() / 256.0;
            let cm: f64 = m2.iter().sum::<f64>() / 16.0;
            prop_assert!((gm - cm).abs() <= 1e-12 * gm);
        }
    }
}
