//! Level hierarchy: grids of increasing resolution over one domain, the
//! state/action maps between them and per-level cost accounting.

mod transfer;

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use transfer::{prolong_field, restrict_fields, GridTransfer};

use crate::env::{equal_rate_pressures, Env, EnvConfig, EnvModel, LevelModel, ObsNormalizer};
use crate::error::{Error, Result};
use crate::fvsim::{Grid2D, PermeabilityField};

/// Default number of equal-rate episodes used to fit the observation scaling.
pub const CALIBRATION_EPISODES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    /// 1-based level index; the last level is the target task.
    pub level: usize,
    pub grid: Grid2D,
    pub cost_per_step: f64,
}

/// Analytic cost model: explicit transport work grows like cells × sub-steps,
/// i.e. `n^{3/2}` for `n` cells; normalized to the target level.
pub fn analytic_costs(grids: &[Grid2D]) -> Vec<f64> {
    let n_target = grids.last().map_or(1.0, |g| g.n_cells() as f64);
    grids.iter().map(|g| (g.n_cells() as f64 / n_target).powf(1.5)).collect()
}

/// One environment model per level, all sharing the well layout, totals and
/// the permeability set (defined on the target grid).
#[derive(Debug, Clone)]
pub struct LevelStack {
    specs: Vec<LevelSpec>,
    levels: Vec<Arc<LevelModel>>,
    normalizer: Arc<ObsNormalizer>,
}

impl LevelStack {
    /// `grids` are listed coarse to fine and the last must be `target.grid`.
    /// Without `costs` the analytic model is used. Unless `target.obs_grid`
    /// says otherwise, every level observes over the coarsest grid's cell
    /// around each well, so a synchronized pair sees the same observation.
    pub fn new(
        target: &EnvConfig,
        grids: &[Grid2D],
        perms: &[PermeabilityField],
        costs: Option<&[f64]>,
    ) -> Result<Self> {
        if grids.is_empty() {
            return Err(Error::Config("a level stack needs at least one level".into()));
        }
        let last = grids[grids.len() - 1];
        if last.nx != target.grid.nx || last.ny != target.grid.ny || !last.same_extent(&target.grid) {
            return Err(Error::Config("the finest level must be the target grid".into()));
        }
        for w in grids.windows(2) {
            if !w[0].same_extent(&w[1]) || w[0].nx > w[1].nx || w[0].ny > w[1].ny || w[0].n_cells() >= w[1].n_cells() {
                return Err(Error::Config(format!(
                    "levels must refine the same domain: {}x{} then {}x{}",
                    w[0].nx, w[0].ny, w[1].nx, w[1].ny
                )));
            }
        }
        let costs = match costs {
            Some(c) => c.to_vec(),
            None => analytic_costs(grids),
        };
        validate_costs(&costs, grids.len())?;
        let shared = EnvConfig { obs_grid: Some(target.obs_grid.unwrap_or(grids[0])), ..target.clone() };
        let levels = grids
            .iter()
            .map(|g| Ok(Arc::new(LevelModel::new(shared.on_grid(*g)?, target.grid, perms)?)))
            .collect::<Result<Vec<_>>>()?;
        let specs = grids
            .iter()
            .zip(&costs)
            .enumerate()
            .map(|(k, (g, c))| LevelSpec { level: k + 1, grid: *g, cost_per_step: *c })
            .collect();
        let normalizer = Arc::new(ObsNormalizer::identity(target.n_wells()));
        Ok(Self { specs, levels, normalizer })
    }

    pub fn n_levels(&self) -> usize {
        self.specs.len()
    }

    pub fn specs(&self) -> &[LevelSpec] {
        &self.specs
    }

    pub fn costs(&self) -> Vec<f64> {
        self.specs.iter().map(|s| s.cost_per_step).collect()
    }

    pub fn set_costs(&mut self, costs: &[f64]) -> Result<()> {
        validate_costs(costs, self.n_levels())?;
        for (s, c) in self.specs.iter_mut().zip(costs) {
            s.cost_per_step = *c;
        }
        Ok(())
    }

    /// Level model by 0-based index.
    pub fn level(&self, idx: usize) -> &Arc<LevelModel> {
        &self.levels[idx]
    }

    pub fn target(&self) -> &Arc<LevelModel> {
        &self.levels[self.levels.len() - 1]
    }

    pub fn target_config(&self) -> &EnvConfig {
        &self.target().config
    }

    pub fn n_perms(&self) -> usize {
        self.target().n_perms()
    }

    pub fn normalizer(&self) -> &ObsNormalizer {
        &self.normalizer
    }

    pub fn set_normalizer(&mut self, n: ObsNormalizer) -> Result<()> {
        let w = self.target_config().n_wells();
        if n.pressure_mean.len() != w || n.pressure_std.len() != w {
            return Err(Error::Config(format!("normalizer has the wrong size for {w} wells")));
        }
        self.normalizer = Arc::new(n);
        Ok(())
    }

    /// Fits the pressure scaling on equal-rate episodes at the target level.
    pub fn calibrate<R: Rng + ?Sized>(&mut self, n_episodes: usize, rng: &mut R) -> Result<()> {
        let mut env = Env::new(EnvModel { level: Arc::clone(self.target()), normalizer: Arc::clone(&self.normalizer) });
        let samples = equal_rate_pressures(&mut env, n_episodes.max(1), rng)?;
        self.set_normalizer(ObsNormalizer::fit(&samples)?)
    }

    pub fn model(&self, idx: usize) -> EnvModel {
        EnvModel { level: Arc::clone(&self.levels[idx]), normalizer: Arc::clone(&self.normalizer) }
    }

    /// Fresh environment at 0-based level `idx`.
    pub fn make_env(&self, idx: usize) -> Env {
        Env::new(self.model(idx))
    }

    /// Single-level stack holding only the target level of `self`.
    pub fn target_only(&self) -> Self {
        let mut spec = self.specs[self.specs.len() - 1];
        spec.level = 1;
        Self { specs: vec![spec], levels: vec![Arc::clone(self.target())], normalizer: Arc::clone(&self.normalizer) }
    }
}

fn validate_costs(costs: &[f64], n: usize) -> Result<()> {
    if costs.len() != n {
        return Err(Error::Config(format!("{} costs given for {n} levels", costs.len())));
    }
    if costs.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
        return Err(Error::Config("level costs must be positive".into()));
    }
    if costs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("level costs must increase with level".into()));
    }
    Ok(())
}

/// Overwrites `dst`'s state with `src`'s state mapped onto `dst`'s grid.
pub fn sync_env_from(dst: &mut Env, src: &Env) -> Result<()> {
    dst.map_from(src)
}

/// Maps level-`from` well weights to level `to`. Wells sit at the same
/// physical points on every level, so the weights carry over unchanged and
/// the per-level rate field conserves the total rate in each partition.
pub fn map_action(weights: &[f64], from: usize, to: usize) -> Result<Vec<f64>> {
    if to > from {
        return Err(Error::Usage(format!("actions map from the target level down, got {from} -> {to}")));
    }
    Ok(weights.to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    /// Mean seconds per control step.
    pub raw: Vec<f64>,
    /// Raw cost divided by the target level's.
    pub normalized: Vec<f64>,
}

impl CostTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("level,raw,normalized\n");
        for (k, (r, n)) in self.raw.iter().zip(&self.normalized).enumerate() {
            s.push_str(&format!("{},{r:.9e},{n:.9e}\n", k + 1));
        }
        s
    }
}

/// Mean wall time of an equal-rate control step per level over `n_trials`
/// steps, normalized by the target level.
pub fn measure_level_costs(stack: &LevelStack, n_trials: usize) -> Result<CostTable> {
    if n_trials == 0 {
        return Err(Error::Usage("need at least one timing trial".into()));
    }
    let mut raw = Vec::with_capacity(stack.n_levels());
    for idx in 0..stack.n_levels() {
        let mut env = stack.make_env(idx);
        let equal = vec![1.0; env.config().n_wells()];
        // Warm-up step keeps first-touch effects out of the timing.
        env.reset_to(0)?;
        env.step(&equal)?;
        let mut elapsed = 0.0;
        for t in 0..n_trials {
            if env.is_done() || t == 0 {
                env.reset_to(t % stack.n_perms())?;
            }
            let start = Instant::now();
            env.step(&equal)?;
            elapsed += start.elapsed().as_secs_f64();
        }
        raw.push(elapsed / n_trials as f64);
    }
    let top = raw[raw.len() - 1];
    let normalized = raw.iter().map(|r| r / top).collect();
    Ok(CostTable { raw, normalized })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fvsim::ScalarField;
    use crate::perm::{channel_field, ChannelParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const L: f64 = 1200.0;

    fn sq(n: usize) -> Grid2D {
        Grid2D::covering(n, n, L, L).unwrap()
    }

    fn stack(ns: &[usize]) -> LevelStack {
        let target = EnvConfig::channel_benchmark(*ns.last().unwrap(), L).unwrap();
        let perms: Vec<_> = [(240.0, 300.0, 500.0), (150.0, 0.0, 1000.0)]
            .iter()
            .map(|&(w, a, b)| channel_field(&target.grid, L, &ChannelParams::new(w, a, b)).unwrap())
            .collect();
        let grids: Vec<_> = ns.iter().map(|&n| sq(n)).collect();
        LevelStack::new(&target, &grids, &perms, None).unwrap()
    }

    #[test]
    fn stack_validation() {
        let target = EnvConfig::channel_benchmark(16, L).unwrap();
        let perms = vec![ScalarField::constant(target.grid, 1.0)];
        assert!(LevelStack::new(&target, &[], &perms, None).is_err());
        assert!(LevelStack::new(&target, &[sq(8), sq(8), sq(16)], &perms, None).is_err());
        assert!(LevelStack::new(&target, &[sq(8), sq(32)], &perms, None).is_err());
        assert!(LevelStack::new(&target, &[sq(8), sq(16)], &perms, Some(&[1.0, 0.5])).is_err());
        let s = LevelStack::new(&target, &[sq(8), sq(16)], &perms, None).unwrap();
        assert_eq!(s.costs(), vec![0.125, 1.0]);
        assert_eq!(s.specs()[1].level, 2);
    }

    #[test]
    fn coarse_permeability_is_harmonic_restriction() {
        let s = stack(&[4, 8]);
        let fine = &s.level(1).perms[0];
        let coarse = &s.level(0).perms[0];
        let t = GridTransfer::nested(sq(8), sq(4)).unwrap();
        assert_eq!(coarse.values, t.harmonic(&fine.values));
    }

    #[test]
    fn sync_observation_matches_restricted_state() {
        let s = stack(&[4, 8, 16]);
        let mut fine = s.make_env(2);
        fine.reset_to(1).unwrap();
        fine.step(&vec![0.7; 64]).unwrap();
        fine.step(&vec![0.2; 64]).unwrap();
        let mut coarse = s.make_env(0);
        sync_env_from(&mut coarse, &fine).unwrap();
        assert_eq!(coarse.step_index(), 2);
        assert_eq!(coarse.perm_id(), 1);
        let t = GridTransfer::new(sq(16), sq(4)).unwrap();
        assert_eq!(coarse.state().concentration.values, t.mean(&fine.state().concentration.values));
        let once = coarse.observe();
        sync_env_from(&mut coarse, &fine).unwrap();
        assert_eq!(coarse.observe(), once);
        // Composition: 16 -> 8 -> 4 equals 16 -> 4 to round-off.
        let mut mid = s.make_env(1);
        sync_env_from(&mut mid, &fine).unwrap();
        let mut via = s.make_env(0);
        sync_env_from(&mut via, &mid).unwrap();
        for (a, b) in via.state().concentration.values.iter().zip(&coarse.state().concentration.values) {
            assert!((a - b).abs() <= 1e-14);
        }
        // A finished coarse episode stays finished after continuing on it.
        let r = coarse.step(&vec![0.5; 64]).unwrap();
        assert_eq!(r.info.step, 3);
    }

    #[test]
    fn action_map_conserves_rates() {
        let s = stack(&[4, 8]);
        let w: Vec<f64> = (0..64).map(|k| 0.001 + (k % 7) as f64 / 7.0).collect();
        assert_eq!(map_action(&w, 2, 1).unwrap(), w);
        assert!(map_action(&w, 1, 2).is_err());
        let fine = s.level(1).rate_field(&w).unwrap();
        let coarse = s.level(0).rate_field(&w).unwrap();
        let summed = GridTransfer::nested(sq(8), sq(4)).unwrap().sum(&fine);
        for (a, b) in summed.iter().zip(&coarse) {
            assert!((a - b).abs() < 1e-10);
        }
        let inj = |q: &[f64]| q.iter().filter(|v| **v > 0.0).sum::<f64>();
        assert!((inj(&fine) - 2304.0).abs() < 1e-9 && (inj(&coarse) - 2304.0).abs() < 1e-9);
    }

    #[test]
    fn calibration_uses_target_pressures() {
        let mut s = stack(&[4, 8]);
        s.calibrate(10, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(s.normalizer().pressure_std.iter().all(|v| *v > 0.0));
        let mut env = s.make_env(1);
        let obs = env.reset_to(0).unwrap();
        assert!(obs.iter().all(|v| v.is_finite() && v.abs() < 1e3));
    }

    #[test]
    fn measured_costs_grow_with_level() {
        let s = stack(&[8, 32]);
        let t = measure_level_costs(&s, 10).unwrap();
        assert_eq!(t.normalized[1], 1.0);
        assert!(t.normalized[0] < 1.0);
        assert!(t.to_csv().starts_with("level,raw,normalized\n1,"));
        let single = measure_level_costs(&s.target_only(), 2).unwrap();
        assert_eq!(single.normalized, vec![1.0]);
    }
}
