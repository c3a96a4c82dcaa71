use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{compute_gae, PpoConfig};
use crate::env::Env;
use crate::error::{Error, Result};
use crate::multilevel::LevelStack;
use crate::policy::{sample_action, MlpParams, SampledAction};

/// One stored transition.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRow {
    pub obs: Vec<f64>,
    /// Unclamped sampled action; `log_prob` is its density under the
    /// collecting policy.
    pub action: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub value: f64,
    pub log_prob: f64,
    pub ret: f64,
    pub adv: f64,
}

/// Transitions generated at one level, actor-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutBuffer {
    /// 1-based level.
    pub level: usize,
    pub rows: Vec<RolloutRow>,
}

/// Companion transitions at level `level − 1`, row-aligned with the level's
/// [`RolloutBuffer`]. Empty at level 1.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SyncRolloutBuffer {
    pub level: usize,
    pub rows: Vec<RolloutRow>,
}

pub(crate) fn gaussian_noise<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Observation, value and sampled action at the current state of `env`.
pub(crate) fn act(policy: &MlpParams, env: &Env, noise: &[f64]) -> Result<(Vec<f64>, f64, SampledAction)> {
    let obs = env.observe();
    let out = policy.forward(&obs)?;
    let s = sample_action(&out, noise);
    if !s.log_prob.is_finite() {
        return Err(Error::Numerical("non-finite action log-density".into()));
    }
    Ok((obs, out.value, s))
}

fn raw_row(obs: Vec<f64>, value: f64, s: SampledAction, reward: f64, done: bool) -> RolloutRow {
    RolloutRow { obs, action: s.raw, reward, done, value, log_prob: s.log_prob, ret: 0.0, adv: 0.0 }
}

/// Fills advantages and returns of one actor's segment in place.
pub(crate) fn finish_segment(rows: &mut [RolloutRow], bootstrap: f64, cfg: &PpoConfig) {
    let r: Vec<f64> = rows.iter().map(|x| x.reward).collect();
    let v: Vec<f64> = rows.iter().map(|x| x.value).collect();
    let d: Vec<bool> = rows.iter().map(|x| x.done).collect();
    let (adv, ret) = compute_gae(&r, &v, &d, bootstrap, cfg.gamma, cfg.gae_lambda);
    for (k, row) in rows.iter_mut().enumerate() {
        row.adv = adv[k];
        row.ret = ret[k];
    }
}

fn bootstrap_value(policy: &MlpParams, env: &Env) -> Result<f64> {
    Ok(policy.forward(&env.observe())?.value)
}

/// A single-level actor: one environment at the target level and its own
/// random stream. Episodes continue across collection rounds.
#[derive(Debug, Clone)]
pub struct ClassicActor {
    pub env: Env,
    pub rng: ChaCha8Rng,
}

impl ClassicActor {
    fn collect(&mut self, policy: &MlpParams, steps: usize, cfg: &PpoConfig) -> Result<Vec<RolloutRow>> {
        let mut rows = Vec::with_capacity(steps);
        for _ in 0..steps {
            if !self.env.is_started() || self.env.is_done() {
                self.env.reset(&mut self.rng)?;
            }
            let z = gaussian_noise(&mut self.rng, policy.n_actions);
            let (obs, value, s) = act(policy, &self.env, &z)?;
            let res = self.env.step(&s.action)?;
            rows.push(raw_row(obs, value, s, res.reward, res.done));
        }
        let boot = bootstrap_value(policy, &self.env)?;
        finish_segment(&mut rows, boot, cfg);
        Ok(rows)
    }
}

/// Standard PPO collection: every actor runs `steps` transitions on the
/// target level. Actors run in parallel and are merged in actor order.
pub fn collect_rollouts_classic(
    policy: &MlpParams,
    actors: &mut [ClassicActor],
    steps: usize,
    cfg: &PpoConfig,
) -> Result<RolloutBuffer> {
    let parts: Vec<Result<Vec<RolloutRow>>> = actors.par_iter_mut().map(|a| a.collect(policy, steps, cfg)).collect();
    let mut rows = Vec::with_capacity(steps * actors.len());
    for p in parts {
        rows.extend(p?);
    }
    Ok(RolloutBuffer { level: 1, rows })
}

/// A multilevel actor: one environment per level (coarse to fine) sharing a
/// random stream. The target-level environment carries the episode between
/// collection rounds.
#[derive(Debug, Clone)]
pub struct MultilevelActor {
    pub envs: Vec<Env>,
    pub rng: ChaCha8Rng,
}

impl MultilevelActor {
    pub fn new(stack: &LevelStack, rng: ChaCha8Rng) -> Self {
        Self { envs: (0..stack.n_levels()).map(|l| stack.make_env(l)).collect(), rng }
    }

    /// Runs `steps[l]` transitions at every level in turn. Above level 1 each
    /// step also advances the level below from the synchronized state with the
    /// same noise.
    fn collect(
        &mut self,
        policy: &MlpParams,
        steps: &[usize],
        cfg: &PpoConfig,
    ) -> Result<Vec<(Vec<RolloutRow>, Vec<RolloutRow>)>> {
        let n_levels = self.envs.len();
        let mut out = Vec::with_capacity(n_levels);
        for l in 0..n_levels {
            if l == 0 && n_levels > 1 {
                let (lo, hi) = self.envs.split_at_mut(n_levels - 1);
                lo[0].map_from(&hi[0])?;
            } else if l > 0 {
                let (lo, hi) = self.envs.split_at_mut(l);
                hi[0].map_from(&lo[l - 1])?;
            }
            let mut fine_rows = Vec::with_capacity(steps[l]);
            let mut comp_rows = Vec::with_capacity(if l > 0 { steps[l] } else { 0 });
            for _ in 0..steps[l] {
                let (lo, hi) = self.envs.split_at_mut(l);
                let fine = &mut hi[0];
                if !fine.is_started() || fine.is_done() {
                    fine.reset(&mut self.rng)?;
                }
                let z = gaussian_noise(&mut self.rng, policy.n_actions);
                let (obs, value, s) = act(policy, fine, &z)?;
                if l > 0 {
                    let coarse = &mut lo[l - 1];
                    coarse.map_from(fine)?;
                    let (c_obs, c_value, c_s) = act(policy, coarse, &z)?;
                    let c_res = coarse.step(&c_s.action)?;
                    comp_rows.push(raw_row(c_obs, c_value, c_s, c_res.reward, c_res.done));
                }
                let res = fine.step(&s.action)?;
                fine_rows.push(raw_row(obs, value, s, res.reward, res.done));
            }
            let boot = bootstrap_value(policy, &self.envs[l])?;
            finish_segment(&mut fine_rows, boot, cfg);
            if l > 0 {
                let (lo, hi) = self.envs.split_at_mut(l);
                lo[l - 1].map_from(&hi[0])?;
                let c_boot = bootstrap_value(policy, &lo[l - 1])?;
                // The pair shares episode boundaries: the fine episode decides.
                for (c, f) in comp_rows.iter_mut().zip(&fine_rows) {
                    c.done = f.done;
                }
                finish_segment(&mut comp_rows, c_boot, cfg);
            }
            out.push((fine_rows, comp_rows));
        }
        Ok(out)
    }
}

/// Multilevel collection. Returns one buffer and one sync buffer per level,
/// coarse to fine; `steps[l]` is the per-actor step count at level `l + 1`.
pub fn collect_rollouts_multilevel(
    policy: &MlpParams,
    actors: &mut [MultilevelActor],
    steps: &[usize],
    cfg: &PpoConfig,
) -> Result<(Vec<RolloutBuffer>, Vec<SyncRolloutBuffer>)> {
    let n_levels = steps.len();
    if actors.iter().any(|a| a.envs.len() != n_levels) {
        return Err(Error::Config("actor levels do not match the step schedule".into()));
    }
    let parts: Vec<Result<Vec<(Vec<RolloutRow>, Vec<RolloutRow>)>>> =
        actors.par_iter_mut().map(|a| a.collect(policy, steps, cfg)).collect();
    let mut bufs: Vec<RolloutBuffer> = (1..=n_levels).map(|level| RolloutBuffer { level, rows: vec![] }).collect();
    let mut syncs: Vec<SyncRolloutBuffer> = (1..=n_levels).map(|level| SyncRolloutBuffer { level, rows: vec![] }).collect();
    for p in parts {
        for (l, (fine, comp)) in p?.into_iter().enumerate() {
            bufs[l].rows.extend(fine);
            syncs[l].rows.extend(comp);
        }
    }
    Ok((bufs, syncs))
}
