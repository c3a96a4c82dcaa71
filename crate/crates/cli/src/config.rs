//! Run configuration: one TOML file, every section optional, unknown keys
//! rejected.

use std::path::{Path, PathBuf};

use mlppo::analysis::AnalysisConfig;
use mlppo::env::EnvConfig;
use mlppo::fvsim::{io::load_field, Grid2D, LinearSolverKind, PermeabilityField};
use mlppo::multilevel::{measure_level_costs, LevelStack};
use mlppo::perm::{sample_channel_perm, KrigedSampler, VariogramParams};
use mlppo::ppo::{Algorithm, PpoConfig};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub io: IoSection,
    pub env: EnvSection,
    pub perm: PermSection,
    pub ppo: PpoConfig,
    pub train: TrainSection,
    pub analysis: AnalysisConfig,
    pub cluster: ClusterSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoSection {
    pub out: PathBuf,
    pub seed: u64,
    /// Iterations between evaluations and checkpoints.
    pub eval_interval: usize,
}

impl Default for IoSection {
    fn default() -> Self {
        Self { out: PathBuf::from("runs/default"), seed: 0, eval_interval: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reservoir {
    /// Square domain with a single high-permeability channel, edge wells.
    Channel,
    /// Kriged log-normal field with a central injector line.
    Kriged,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub reservoir: Reservoir,
    /// `[nx, ny]` per level, coarse to fine.
    pub levels: Vec<[usize; 2]>,
    /// Domain extent; the reservoir's benchmark extent when unset.
    pub lx: Option<f64>,
    pub ly: Option<f64>,
    /// Grid whose cell around each well is observed; the coarsest level's
    /// grid when unset.
    pub obs_grid: Option<[usize; 2]>,
    pub solver: LinearSolverKind,
    /// Equal-rate episodes used to fit the observation scaling.
    pub calibration_episodes: usize,
    /// Cost per step of each level. Unset: analytic model, unless
    /// `measure_costs` is set.
    pub costs: Option<Vec<f64>>,
    pub measure_costs: bool,
    pub cost_trials: usize,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            reservoir: Reservoir::Channel,
            levels: vec![[32, 32]],
            lx: None,
            ly: None,
            obs_grid: None,
            solver: LinearSolverKind::default(),
            calibration_episodes: 100,
            costs: None,
            measure_costs: false,
            cost_trials: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PermSection {
    /// Manifest written by `sample-perm` or `cluster`; fields are drawn from
    /// the seed when unset.
    pub manifest: Option<PathBuf>,
    /// Fields to draw when there is no manifest.
    pub n: usize,
    pub variogram: VariogramParams,
}

impl Default for PermSection {
    fn default() -> Self {
        Self { manifest: None, n: 4, variogram: VariogramParams::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: usize,
    /// Classic for one level, multilevel otherwise, when unset.
    pub algorithm: Option<Algorithm>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { iterations: 150, algorithm: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub n_samples: usize,
    pub k: usize,
    /// Time intervals of the response integral.
    pub time_intervals: usize,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self { n_samples: 1000, k: 16, time_intervals: mlppo::scenario::DEFAULT_TIME_INTERVALS }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<(), Failure> {
        if self.env.levels.is_empty() {
            return Err(Failure::Config("env.levels needs at least one level".into()));
        }
        if self.env.levels.iter().any(|l| l[0] == 0 || l[1] == 0) {
            return Err(Failure::Config("grid sizes must be positive".into()));
        }
        if let Some(c) = &self.env.costs {
            if c.len() != self.env.levels.len() || c.iter().any(|v| !(*v > 0.0)) {
                return Err(Failure::Config("env.costs needs one positive cost per level".into()));
            }
        }
        if self.env.reservoir == Reservoir::Channel {
            let [nx, ny] = self.target_size();
            if nx != ny || self.lx() != self.ly() {
                return Err(Failure::Config("the channel reservoir is square".into()));
            }
        }
        if self.io.eval_interval == 0 {
            return Err(Failure::Config("io.eval_interval must be positive".into()));
        }
        let as_config = |e: mlppo::Error| Failure::Config(e.to_string());
        self.ppo.validate().map_err(as_config)?;
        self.analysis.validate().map_err(as_config)?;
        self.perm.variogram.validate().map_err(as_config)?;
        self.target_env().map_err(|e| Failure::Config(e.to_string()))?;
        if self.cluster.k == 0 || self.cluster.time_intervals == 0 {
            return Err(Failure::Config("cluster.k and cluster.time_intervals must be positive".into()));
        }
        Ok(())
    }

    /// Training algorithm, checked against the level count and schedule.
    pub fn algorithm(&self) -> Result<Algorithm, Failure> {
        let alg = self.train.algorithm.unwrap_or(if self.env.levels.len() == 1 {
            Algorithm::Classic
        } else {
            Algorithm::Multilevel
        });
        let want = match alg {
            Algorithm::Classic => 1,
            Algorithm::Multilevel => self.env.levels.len(),
        };
        if self.ppo.n_levels() != want {
            return Err(Failure::Config(format!(
                "ppo.steps has {} entries; {alg:?} training on {} levels needs {want}",
                self.ppo.n_levels(),
                self.env.levels.len()
            )));
        }
        Ok(alg)
    }

    fn target_size(&self) -> [usize; 2] {
        *self.env.levels.last().expect("validated")
    }

    fn lx(&self) -> f64 {
        self.env.lx.unwrap_or(match self.env.reservoir {
            Reservoir::Channel => 1200.0,
            Reservoir::Kriged => 620.0,
        })
    }

    fn ly(&self) -> f64 {
        self.env.ly.unwrap_or(match self.env.reservoir {
            Reservoir::Channel => 1200.0,
            Reservoir::Kriged => 1860.0,
        })
    }

    pub fn grids(&self) -> Result<Vec<Grid2D>, Failure> {
        let (lx, ly) = (self.lx(), self.ly());
        Ok(self.env.levels.iter().map(|&[nx, ny]| Grid2D::covering(nx, ny, lx, ly)).collect::<mlppo::Result<_>>()?)
    }

    pub fn target_env(&self) -> Result<EnvConfig, Failure> {
        let [nx, ny] = self.target_size();
        let mut cfg = match self.env.reservoir {
            Reservoir::Channel => EnvConfig::channel_benchmark(nx, self.lx())?,
            Reservoir::Kriged => EnvConfig::kriged_benchmark(nx, ny, self.lx(), self.ly())?,
        };
        cfg.solver = self.env.solver;
        cfg.obs_grid = self.env.obs_grid.map(|[ox, oy]| Grid2D::covering(ox, oy, self.lx(), self.ly())).transpose()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `n` fresh samples on the target grid.
    pub fn sample_perms<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<PermeabilityField>, Failure> {
        let target = self.target_env()?;
        Ok(match self.env.reservoir {
            Reservoir::Channel => {
                (0..n).map(|_| sample_channel_perm(&target.grid, self.lx(), rng)).collect::<mlppo::Result<_>>()?
            }
            Reservoir::Kriged => {
                if n == 0 {
                    return Ok(Vec::new());
                }
                let wells: Vec<usize> = target
                    .layout
                    .injectors
                    .iter()
                    .chain(&target.layout.producers)
                    .map(|&(x, y)| target.grid.cell_containing(x, y))
                    .collect::<mlppo::Result<_>>()?;
                let sampler = KrigedSampler::new(target.grid, self.perm.variogram, &wells)?;
                (0..n).map(|_| sampler.sample(rng)).collect::<mlppo::Result<_>>()?
            }
        })
    }

    /// Fields from the manifest, or `perm.n` fresh samples.
    pub fn perms<R: Rng>(&self, rng: &mut R) -> Result<Vec<PermeabilityField>, Failure> {
        let perms = match &self.perm.manifest {
            Some(m) => read_manifest(m)?.into_iter().map(|(_, f)| f).collect(),
            None => self.sample_perms(self.perm.n, rng)?,
        };
        let target = self.target_env()?;
        if perms.iter().any(|p| p.grid != target.grid) {
            return Err(Failure::Config("permeability fields do not match the target grid".into()));
        }
        Ok(perms)
    }

    /// Level stack over `perms`, with fitted observation scaling when
    /// `calibrate` is set and costs as configured.
    pub fn stack<R: Rng>(&self, perms: &[PermeabilityField], calibrate: bool, rng: &mut R) -> Result<LevelStack, Failure> {
        let target = self.target_env()?;
        let mut stack = LevelStack::new(&target, &self.grids()?, perms, self.env.costs.as_deref())?;
        if calibrate {
            stack.calibrate(self.env.calibration_episodes, rng)?;
        }
        if self.env.costs.is_none() && self.env.measure_costs {
            let table = measure_level_costs(&stack, self.env.cost_trials)?;
            log::info!("measured level costs {:?}", table.normalized);
            stack.set_costs(&table.normalized)?;
        }
        Ok(stack)
    }
}

/// Manifest rows: `id,file,min,max,mean`, files relative to the manifest.
pub fn write_manifest(dir: &Path, entries: &[(usize, &PermeabilityField)]) -> Result<PathBuf, Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
    let mut text = String::from("id,file,min,max,mean\n");
    for (id, f) in entries {
        let name = format!("perm_{id:05}.csv");
        mlppo::fvsim::io::save_field(f, &dir.join(&name))?;
        text.push_str(&format!("{id},{name},{},{},{}\n", f.min(), f.max(), f.mean()));
    }
    let path = dir.join("manifest.csv");
    std::fs::write(&path, text).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Vec<(usize, PermeabilityField)>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("id,file,min,max,mean") {
        return Err(Failure::Config(format!("{}: not a permeability manifest", path.display())));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut parts = l.split(',');
            let id = parts
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Failure::Config(format!("{}: bad row {l:?}", path.display())))?;
            let file = parts.next().ok_or_else(|| Failure::Config(format!("{}: bad row {l:?}", path.display())))?;
            Ok((id, load_field(&dir.join(file.trim()))?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_configs_validate() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut n = 0;
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            let cfg = RunConfig::load(Some(&path)).unwrap();
            cfg.validate().unwrap();
            n += 1;
        }
        assert!(n >= 4);
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back.to_toml(), cfg.to_toml());
        assert_eq!(cfg.algorithm().unwrap(), Algorithm::Classic);
    }
}
