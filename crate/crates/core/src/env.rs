//! Episodic waterflooding environment: each episode draws a permeability from
//! a finite set, the agent sets well weights for a fixed number of control
//! steps and is rewarded by the resident fluid it displaces.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fvsim::{
    assemble_transmissibilities, simulate_control_step, FlowState, Grid2D, LinearSolverKind, PermeabilityField,
    PressureSystem, ScalarField, TransportOptions, WellSet,
};
use crate::multilevel::GridTransfer;

pub const MIN_WEIGHT: f64 = 0.001;
pub const MAX_WEIGHT: f64 = 1.0;

/// Wells at fixed physical coordinates (ft, y downward from the top edge).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WellLayout {
    pub injectors: Vec<(f64, f64)>,
    pub producers: Vec<(f64, f64)>,
}

impl WellLayout {
    pub fn n_wells(&self) -> usize {
        self.injectors.len() + self.producers.len()
    }

    /// 32 injectors on the left edge and 32 producers on the right edge of a
    /// square domain, evenly spaced, one fine-grid column from the edge.
    pub fn five_spot_edges(length: f64, per_side: usize) -> Self {
        let edge = 0.5 * length / 128.0;
        let ys = (0..per_side).map(|k| (k as f64 + 0.5) * length / per_side as f64);
        Self {
            injectors: ys.clone().map(|y| (edge, y)).collect(),
            producers: ys.map(|y| (length - edge, y)).collect(),
        }
    }

    /// Injectors on the central vertical axis, producers on both vertical
    /// edges at the same heights.
    pub fn central_line(lx: f64, ly: f64, per_line: usize) -> Self {
        let edge = 0.5 * lx / 73.0;
        let ys: Vec<f64> = (0..per_line).map(|k| (k as f64 + 0.5) * ly / per_line as f64).collect();
        let mut producers: Vec<(f64, f64)> = ys.iter().map(|&y| (edge, y)).collect();
        producers.extend(ys.iter().map(|&y| (lx - edge, y)));
        Self { injectors: ys.iter().map(|&y| (0.5 * lx, y)).collect(), producers }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub grid: Grid2D,
    pub layout: WellLayout,
    pub total_rate: f64,
    pub porosity: f64,
    pub viscosity: f64,
    pub n_control_steps: usize,
    /// Episode length in days.
    pub episode_time: f64,
    pub solver: LinearSolverKind,
    pub transport: TransportOptions,
    /// Grid whose cell around each well is the observed region. `None`
    /// observes the target-level cell.
    #[serde(default)]
    pub obs_grid: Option<Grid2D>,
}

impl EnvConfig {
    /// Square channelized reservoir with edge well lines.
    pub fn channel_benchmark(n: usize, length: f64) -> Result<Self> {
        let grid = Grid2D::covering(n, n, length, length)?;
        Self::with_defaults(grid, WellLayout::five_spot_edges(length, 32), 2304.0)
    }

    /// Tall kriged reservoir with a central injector line.
    pub fn kriged_benchmark(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self> {
        let grid = Grid2D::covering(nx, ny, lx, ly)?;
        Self::with_defaults(grid, WellLayout::central_line(lx, ly, 7), 9072.0)
    }

    fn with_defaults(grid: Grid2D, layout: WellLayout, total_rate: f64) -> Result<Self> {
        let porosity = 0.2;
        let cfg = Self {
            grid,
            layout,
            total_rate,
            porosity,
            viscosity: 0.3,
            n_control_steps: 5,
            episode_time: porosity * grid.area() / total_rate,
            solver: LinearSolverKind::default(),
            transport: TransportOptions::default(),
            obs_grid: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Same physics on another grid of the same domain.
    pub fn on_grid(&self, grid: Grid2D) -> Result<Self> {
        if !grid.same_extent(&self.grid) {
            return Err(Error::Config("level grid must cover the same domain".into()));
        }
        Ok(Self { grid, ..self.clone() })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_control_steps == 0 {
            return Err(Error::Config("need at least one control step".into()));
        }
        if !(self.total_rate > 0.0 && self.porosity > 0.0 && self.viscosity > 0.0 && self.episode_time > 0.0) {
            return Err(Error::Config(
                "total rate, porosity, viscosity and episode time must be positive".into(),
            ));
        }
        if self.layout.injectors.is_empty() || self.layout.producers.is_empty() {
            return Err(Error::Config("need at least one injector and one producer".into()));
        }
        if let Some(g) = &self.obs_grid {
            if !g.same_extent(&self.grid) {
                return Err(Error::Config("observation grid must cover the reservoir".into()));
            }
        }
        Ok(())
    }

    pub fn control_dt(&self) -> f64 {
        self.episode_time / self.n_control_steps as f64
    }

    pub fn n_wells(&self) -> usize {
        self.layout.n_wells()
    }

    pub fn obs_dim(&self) -> usize {
        2 * self.n_wells()
    }
}

/// Fixed affine standardization of the pressure entries of an observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsNormalizer {
    pub pressure_mean: Vec<f64>,
    pub pressure_std: Vec<f64>,
}

impl ObsNormalizer {
    pub fn identity(n_wells: usize) -> Self {
        Self { pressure_mean: vec![0.0; n_wells], pressure_std: vec![1.0; n_wells] }
    }

    /// Per-entry mean and standard deviation of raw pressure observations.
    /// Entries with (near) zero spread fall back to the pooled spread.
    pub fn fit(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.first().map(Vec::len).unwrap_or(0);
        if samples.is_empty() || n == 0 {
            return Err(Error::Usage("cannot calibrate on an empty sample".into()));
        }
        let m = samples.len() as f64;
        let mean: Vec<f64> = (0..n).map(|k| samples.iter().map(|s| s[k]).sum::<f64>() / m).collect();
        let var: Vec<f64> =
            (0..n).map(|k| samples.iter().map(|s| (s[k] - mean[k]).powi(2)).sum::<f64>() / m).collect();
        let pooled = (var.iter().sum::<f64>() / n as f64).sqrt();
        let scale = mean.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let floor = if pooled > 0.0 { 0.1 * pooled } else if scale > 0.0 { scale } else { 1.0 };
        let std = var.iter().map(|v| v.sqrt().max(floor)).collect();
        Ok(Self { pressure_mean: mean, pressure_std: std })
    }

    pub fn apply(&self, raw_pressure: &[f64], out: &mut Vec<f64>) {
        for (k, p) in raw_pressure.iter().enumerate() {
            out.push((p - self.pressure_mean[k]) / self.pressure_std[k]);
        }
    }
}

/// Everything about one discretization level that does not change during an
/// episode: restricted permeabilities, factorized pressure systems and the
/// well-to-cell maps. Shared between actors.
#[derive(Debug)]
pub struct LevelModel {
    pub config: EnvConfig,
    pub perms: Vec<PermeabilityField>,
    systems: Vec<PressureSystem>,
    /// Cell of each well (injectors first).
    well_cells: Vec<usize>,
    /// Level-grid cells and weights averaged to observe at each well's
    /// observation cell.
    obs_stencils: Vec<Vec<(usize, f64)>>,
}

impl LevelModel {
    /// `perms` live on `target`; they are coarsened with the harmonic mean if
    /// this level is coarser.
    pub fn new(config: EnvConfig, target: Grid2D, perms: &[PermeabilityField]) -> Result<Self> {
        config.validate()?;
        if perms.is_empty() {
            return Err(Error::Config("permeability set is empty".into()));
        }
        let grid = config.grid;
        let down = GridTransfer::new(target, grid)?;
        let obs_grid = config.obs_grid.unwrap_or(target);
        let up = GridTransfer::new(grid, obs_grid)?;
        let mut level_perms = Vec::with_capacity(perms.len());
        let mut systems = Vec::with_capacity(perms.len());
        for k in perms {
            if k.grid != target {
                return Err(Error::Config("permeability field is not on the target grid".into()));
            }
            let kl = down.harmonic_field(k)?;
            let t = assemble_transmissibilities(&grid, &kl, config.viscosity)?;
            systems.push(PressureSystem::new(t, config.solver)?);
            level_perms.push(kl);
        }
        let points = config.layout.injectors.iter().chain(&config.layout.producers);
        let mut well_cells = Vec::with_capacity(config.n_wells());
        let mut obs_stencils = Vec::with_capacity(config.n_wells());
        for &(x, y) in points {
            well_cells.push(grid.cell_containing(x, y)?);
            obs_stencils.push(up.weights_for(obs_grid.cell_containing(x, y)?));
        }
        let n_inj = config.layout.injectors.len();
        if let Some(c) = well_cells[..n_inj].iter().find(|c| well_cells[n_inj..].contains(c)) {
            return Err(Error::Config(format!("cell {c} holds both an injector and a producer at this level")));
        }
        Ok(Self { config, perms: level_perms, systems, well_cells, obs_stencils })
    }

    pub fn grid(&self) -> &Grid2D {
        &self.config.grid
    }

    pub fn n_perms(&self) -> usize {
        self.perms.len()
    }

    pub fn system(&self, perm_id: usize) -> &PressureSystem {
        &self.systems[perm_id]
    }

    pub fn well_cells(&self) -> &[usize] {
        &self.well_cells
    }

    /// Turns clamped weights into a per-cell well set: injector weights are
    /// scaled to total `+Q`, producer weights to `−Q`; wells sharing a cell
    /// are summed.
    pub fn rates(&self, weights: &[f64]) -> Result<WellSet> {
        let n_inj = self.config.layout.injectors.len();
        let q = self.config.total_rate;
        let (wi, wp) = weights.split_at(n_inj);
        let si: f64 = wi.iter().sum();
        let sp: f64 = wp.iter().sum();
        let mut inj: Vec<(usize, f64)> = Vec::new();
        let mut prod: Vec<(usize, f64)> = Vec::new();
        let add = |list: &mut Vec<(usize, f64)>, cell: usize, r: f64| match list.iter_mut().find(|(c, _)| *c == cell) {
            Some(e) => e.1 += r,
            None => list.push((cell, r)),
        };
        for (k, w) in wi.iter().enumerate() {
            add(&mut inj, self.well_cells[k], q * w / si);
        }
        for (k, w) in wp.iter().enumerate() {
            add(&mut prod, self.well_cells[n_inj + k], -q * w / sp);
        }
        WellSet::new(inj, prod, self.grid().n_cells())
    }

    /// Per-cell source field induced by `weights`.
    pub fn rate_field(&self, weights: &[f64]) -> Result<Vec<f64>> {
        Ok(self.rates(weights)?.source_field(self.grid().n_cells()))
    }

    fn sample_wells(&self, values: &[f64], out: &mut Vec<f64>) {
        for st in &self.obs_stencils {
            out.push(st.iter().map(|&(c, w)| w * values[c]).sum());
        }
    }
}

/// Immutable part of an environment: its level and the observation scaling.
#[derive(Debug, Clone)]
pub struct EnvModel {
    pub level: Arc<LevelModel>,
    pub normalizer: Arc<ObsNormalizer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// Cumulative reward so far this episode.
    pub sweep_efficiency: f64,
    /// Completed control steps.
    pub step: usize,
    pub perm_id: usize,
    /// Whether any action component was outside [0.001, 1] and got clamped.
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// One environment instance. Not shared between threads.
#[derive(Debug, Clone)]
pub struct Env {
    model: EnvModel,
    pub(crate) state: FlowState,
    pub(crate) perm_id: usize,
    pub(crate) step: usize,
    pub(crate) done: bool,
    pub(crate) cum_reward: f64,
    pub(crate) started: bool,
}

impl Env {
    pub fn new(model: EnvModel) -> Self {
        let grid = *model.level.grid();
        Self { model, state: FlowState::initial(grid), perm_id: 0, step: 0, done: false, cum_reward: 0.0, started: false }
    }

    pub fn model(&self) -> &EnvModel {
        &self.model
    }

    pub fn config(&self) -> &EnvConfig {
        &self.model.level.config
    }

    pub fn grid(&self) -> &Grid2D {
        self.model.level.grid()
    }

    pub fn state(&self) -> &FlowState {
        &self.state
    }

    pub fn perm_id(&self) -> usize {
        self.perm_id
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn is_started(&self) -> bool {
        self.started
    }

    pub fn cumulative_reward(&self) -> f64 {
        self.cum_reward
    }

    /// Starts an episode on a uniformly drawn permeability.
    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Vec<f64>> {
        let id = rng.random_range(0..self.model.level.n_perms());
        self.reset_to(id)
    }

    /// Starts an episode on permeability `perm_id`.
    pub fn reset_to(&mut self, perm_id: usize) -> Result<Vec<f64>> {
        let level = &self.model.level;
        if perm_id >= level.n_perms() {
            return Err(Error::Usage(format!("permeability id {perm_id} out of range")));
        }
        let equal = vec![1.0; level.config.n_wells()];
        let (pressure, fluxes) = level.system(perm_id).solve(&level.rates(&equal)?)?;
        self.state = FlowState { concentration: ScalarField::zeros(*level.grid()), pressure, fluxes, time: 0.0 };
        self.perm_id = perm_id;
        self.step = 0;
        self.done = false;
        self.cum_reward = 0.0;
        self.started = true;
        Ok(self.observe())
    }

    /// Advances one control step with the given well weights.
    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if !self.started || self.done {
            return Err(Error::Usage("step called on an episode that is not running".into()));
        }
        let level = Arc::clone(&self.model.level);
        let cfg = &level.config;
        if action.len() != cfg.n_wells() {
            return Err(Error::Usage(format!("action has {} entries, expected {}", action.len(), cfg.n_wells())));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Domain("action contains non-finite entries".into()));
        }
        let mut clamped = false;
        let weights: Vec<f64> = action
            .iter()
            .map(|&a| {
                let w = a.clamp(MIN_WEIGHT, MAX_WEIGHT);
                clamped |= w != a;
                w
            })
            .collect();
        let wells = level.rates(&weights)?;
        let (next, produced) = simulate_control_step(
            &self.state,
            level.system(self.perm_id),
            &wells,
            cfg.porosity,
            cfg.control_dt(),
            &cfg.transport,
        )?;
        self.state = next;
        let reward = produced / (cfg.porosity * cfg.grid.area());
        self.cum_reward += reward;
        self.step += 1;
        self.done = self.step >= cfg.n_control_steps;
        Ok(StepResult {
            observation: self.observe(),
            reward,
            done: self.done,
            info: StepInfo { sweep_efficiency: self.cum_reward, step: self.step, perm_id: self.perm_id, clamped },
        })
    }

    /// Unscaled concentration and pressure at the wells.
    pub fn observe_raw(&self) -> (Vec<f64>, Vec<f64>) {
        let level = &self.model.level;
        let n = level.config.n_wells();
        let (mut c, mut p) = (Vec::with_capacity(n), Vec::with_capacity(n));
        level.sample_wells(&self.state.concentration.values, &mut c);
        level.sample_wells(&self.state.pressure.values, &mut p);
        (c, p)
    }

    /// Concentration at every well, then standardized pressure at every well.
    pub fn observe(&self) -> Vec<f64> {
        let (mut obs, p) = self.observe_raw();
        self.model.normalizer.apply(&p, &mut obs);
        obs
    }

    /// Overwrites this environment's state with `src`'s, transferred to this
    /// grid. Permeability is tied to the sample id, so only concentration and
    /// pressure move between grids.
    pub fn map_from(&mut self, src: &Env) -> Result<()> {
        if src.model.level.n_perms() != self.model.level.n_perms() {
            return Err(Error::Config("environments do not share a permeability set".into()));
        }
        let t = GridTransfer::new(*src.grid(), *self.grid())?;
        self.state = FlowState {
            concentration: t.mean_field(&src.state.concentration)?,
            pressure: t.mean_field(&src.state.pressure)?,
            fluxes: crate::fvsim::FaceFluxes::zeros(self.grid()),
            time: src.state.time,
        };
        self.perm_id = src.perm_id;
        self.step = src.step;
        self.done = src.done;
        self.cum_reward = src.cum_reward;
        self.started = src.started;
        Ok(())
    }
}

/// Raw well pressures from `n_episodes` equal-rate episodes, one sample per
/// visited state (including the reset state).
pub fn equal_rate_pressures<R: Rng + ?Sized>(env: &mut Env, n_episodes: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let equal = vec![1.0; env.config().n_wells()];
    let mut out = Vec::new();
    for _ in 0..n_episodes {
        env.reset(rng)?;
        out.push(env.observe_raw().1);
        while !env.is_done() {
            env.step(&equal)?;
            out.push(env.observe_raw().1);
        }
    }
    Ok(out)
}

/// Mean cumulative reward of the equal-weights control on every
/// permeability, in id order.
pub fn baseline_rewards(env: &mut Env) -> Result<Vec<f64>> {
    let equal = vec![1.0; env.config().n_wells()];
    (0..env.model().level.n_perms())
        .map(|id| {
            env.reset_to(id)?;
            while !env.is_done() {
                env.step(&equal)?;
            }
            Ok(env.cumulative_reward())
        })
        .collect()
}
