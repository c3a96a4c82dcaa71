use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::rollout::{ClassicActor, MultilevelActor, RolloutBuffer, SyncRolloutBuffer};
use super::{clip_grad_norm, collect_rollouts_classic, collect_rollouts_multilevel, get_batches, weighted_loss_grad, PpoConfig, RowRole};
use crate::env::{Env, ObsNormalizer, MAX_WEIGHT, MIN_WEIGHT};
use crate::error::{Error, Result};
use crate::multilevel::LevelStack;
use crate::policy::{AdamState, MlpParams};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Single-level PPO on the target level.
    Classic,
    /// PPO with the telescoping multilevel loss.
    Multilevel,
}

/// Random stream of actor `k` for a run that (re)starts at `start_iteration`.
/// Stream 0 is reserved for initialization and minibatch shuffling.
pub fn actor_seed(seed: u64, start_iteration: usize, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (start_iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(k as u64 + 1);
    rng
}

/// Simulation cost of one collection round in target-level step units.
/// Multilevel rounds pay for each level's steps and their companion steps.
pub fn iteration_cost(costs: &[f64], steps: &[usize], n_actors: usize, algorithm: Algorithm) -> f64 {
    match algorithm {
        Algorithm::Classic => n_actors as f64 * steps[0] as f64 * costs[costs.len() - 1],
        Algorithm::Multilevel => steps
            .iter()
            .enumerate()
            .map(|(l, &t)| {
                let below = if l > 0 { costs[l - 1] } else { 0.0 };
                n_actors as f64 * t as f64 * (costs[l] + below)
            })
            .sum(),
    }
}

/// Cumulative reward of the deterministic (mean) policy on every
/// permeability at the target level, in id order.
pub fn evaluate_policy(policy: &MlpParams, stack: &LevelStack) -> Result<Vec<f64>> {
    let idx = stack.n_levels() - 1;
    (0..stack.n_perms())
        .into_par_iter()
        .map(|id| {
            let mut env: Env = stack.make_env(idx);
            env.reset_to(id)?;
            while !env.is_done() {
                let out = policy.forward(&env.observe())?;
                let w: Vec<f64> = out.mean.iter().map(|m| m.clamp(MIN_WEIGHT, MAX_WEIGHT)).collect();
                env.step(&w)?;
            }
            Ok(env.cumulative_reward())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Cumulative simulation cost after this iteration.
    pub cost: f64,
    /// Mean minibatch loss over the iteration's updates.
    pub loss: f64,
    pub mean_grad_norm: f64,
    /// Deterministic rewards over all permeabilities, when evaluated.
    pub eval: Option<EvalSummary>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl EvalSummary {
    pub fn from_rewards(r: &[f64]) -> Option<Self> {
        if r.is_empty() {
            return None;
        }
        Some(Self {
            mean: r.iter().sum::<f64>() / r.len() as f64,
            min: r.iter().copied().fold(f64::INFINITY, f64::min),
            max: r.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

impl IterationRecord {
    pub const CSV_HEADER: &'static str = "iteration,cost,wall_seconds,loss,grad_norm,eval_mean,eval_min,eval_max";

    pub fn csv_row(&self) -> String {
        let eval = self.eval.map_or(",,".to_string(), |e| format!("{},{},{}", e.mean, e.min, e.max));
        format!("{},{},{},{},{},{}", self.iteration, self.cost, self.wall_seconds, self.loss, self.mean_grad_norm, eval)
    }
}

/// Everything needed to continue training or to evaluate a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub iteration: usize,
    pub cost: f64,
    pub config: PpoConfig,
    pub params: MlpParams,
    pub adam: AdamState,
    pub normalizer: ObsNormalizer,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self)?;
        std::fs::write(path, s).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let mut c: Checkpoint = serde_json::from_str(&s)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {}", c.version)));
        }
        c.params.validate()?;
        if c.adam.m.len() != c.params.n_params() || c.adam.v.len() != c.params.n_params() {
            return Err(Error::Parse("optimizer state does not match the network".into()));
        }
        Ok(c)
    }
}

enum Actors {
    Classic(Vec<ClassicActor>),
    Multilevel(Vec<MultilevelActor>),
}

/// PPO training loop over a level stack.
pub struct Trainer {
    cfg: PpoConfig,
    algorithm: Algorithm,
    stack: LevelStack,
    pub policy: MlpParams,
    pub adam: AdamState,
    actors: Actors,
    shuffle_rng: ChaCha8Rng,
    seed: u64,
    iteration: usize,
    cost: f64,
}

impl Trainer {
    /// `stack` should already carry its calibrated observation scaling.
    /// Classic training uses only the stack's target level and a single
    /// entry in `cfg.steps`.
    pub fn new(cfg: PpoConfig, algorithm: Algorithm, stack: LevelStack, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = stack.target_config();
        let policy = MlpParams::new(t.obs_dim(), &cfg.hidden, t.n_wells(), &mut rng)?;
        let adam = AdamState::new(policy.n_params(), cfg.lr);
        Self::assemble(cfg, algorithm, stack, seed, policy, adam, 0, 0.0, rng)
    }

    /// Continues from a checkpoint. Episodes in flight are not stored, so
    /// actors start fresh episodes on streams derived from the iteration.
    pub fn resume(ckpt: Checkpoint, mut stack: LevelStack) -> Result<Self> {
        stack.set_normalizer(ckpt.normalizer.clone())?;
        let rng = actor_seed(ckpt.seed, ckpt.iteration, 0);
        Self::assemble(ckpt.config, ckpt.algorithm, stack, ckpt.seed, ckpt.params, ckpt.adam, ckpt.iteration, ckpt.cost, rng)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        cfg: PpoConfig,
        algorithm: Algorithm,
        stack: LevelStack,
        seed: u64,
        policy: MlpParams,
        adam: AdamState,
        iteration: usize,
        cost: f64,
        shuffle_rng: ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let stack = match algorithm {
            Algorithm::Classic => {
                if cfg.n_levels() != 1 {
                    return Err(Error::Config("classic training takes a single step count".into()));
                }
                stack.target_only()
            }
            Algorithm::Multilevel => {
                if cfg.n_levels() != stack.n_levels() {
                    return Err(Error::Config(format!(
                        "{} step counts for {} levels",
                        cfg.n_levels(),
                        stack.n_levels()
                    )));
                }
                stack
            }
        };
        let t = stack.target_config();
        if policy.input_dim() != t.obs_dim() || policy.n_actions != t.n_wells() {
            return Err(Error::Config("network shape does not match the environment".into()));
        }
        let actors = match algorithm {
            Algorithm::Classic => Actors::Classic(
                (0..cfg.n_actors)
                    .map(|k| ClassicActor { env: stack.make_env(0), rng: actor_seed(seed, iteration, k) })
                    .collect(),
            ),
            Algorithm::Multilevel => Actors::Multilevel(
                (0..cfg.n_actors).map(|k| MultilevelActor::new(&stack, actor_seed(seed, iteration, k))).collect(),
            ),
        };
        Ok(Self { cfg, algorithm, stack, policy, adam, actors, shuffle_rng, seed, iteration, cost })
    }

    pub fn config(&self) -> &PpoConfig {
        &self.cfg
    }

    pub fn stack(&self) -> &LevelStack {
        &self.stack
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn cost(&self) -> f64 {
        self.cost
    }

    pub fn cost_per_iteration(&self) -> f64 {
        iteration_cost(&self.stack.costs(), &self.cfg.steps, self.cfg.n_actors, self.algorithm)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            algorithm: self.algorithm,
            seed: self.seed,
            iteration: self.iteration,
            cost: self.cost,
            config: self.cfg.clone(),
            params: self.policy.clone(),
            adam: self.adam.clone(),
            normalizer: self.stack.normalizer().clone(),
        }
    }

    pub fn evaluate(&self) -> Result<Vec<f64>> {
        evaluate_policy(&self.policy, &self.stack)
    }

    /// One collection round followed by `epochs` passes of minibatch updates.
    pub fn train_iteration(&mut self) -> Result<IterationRecord> {
        let start = Instant::now();
        let (bufs, syncs) = match &mut self.actors {
            Actors::Classic(actors) => {
                let buf = collect_rollouts_classic(&self.policy, actors, self.cfg.steps[0], &self.cfg)?;
                (vec![buf], vec![SyncRolloutBuffer { level: 1, rows: vec![] }])
            }
            Actors::Multilevel(actors) => collect_rollouts_multilevel(&self.policy, actors, &self.cfg.steps, &self.cfg)?,
        };
        let (mut loss_sum, mut norm_sum, mut n_updates) = (0.0, 0.0, 0usize);
        for _ in 0..self.cfg.epochs {
            for batch in get_batches(&bufs, &syncs, &self.cfg.batch, &mut self.shuffle_rng)? {
                let (loss, mut grad) = self.batch_gradient(&bufs, &syncs, &batch)?;
                let norm = match self.cfg.max_grad_norm {
                    Some(m) => clip_grad_norm(&mut grad, m),
                    None => grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
                };
                self.policy.adam_update(&grad, &mut self.adam)?;
                loss_sum += loss;
                norm_sum += norm;
                n_updates += 1;
            }
        }
        self.iteration += 1;
        self.cost += self.cost_per_iteration();
        Ok(IterationRecord {
            iteration: self.iteration,
            cost: self.cost,
            loss: loss_sum / n_updates as f64,
            mean_grad_norm: norm_sum / n_updates as f64,
            eval: None,
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    }

    fn batch_gradient(
        &self,
        bufs: &[RolloutBuffer],
        syncs: &[SyncRolloutBuffer],
        batch: &[super::LevelBatch],
    ) -> Result<(f64, Vec<f64>)> {
        match self.algorithm {
            Algorithm::Classic => {
                let rows: Vec<_> = batch[0].rows.iter().map(|&k| &bufs[0].rows[k]).collect();
                weighted_loss_grad(&self.policy, &rows, &self.cfg, RowRole::Level, 1.0)
            }
            Algorithm::Multilevel => {
                let mut total: Option<(f64, Vec<f64>)> = None;
                for (l, lb) in batch.iter().enumerate() {
                    let fine: Vec<_> = lb.rows.iter().map(|&k| &bufs[l].rows[k]).collect();
                    let mut terms = vec![weighted_loss_grad(&self.policy, &fine, &self.cfg, RowRole::Level, 1.0)?];
                    if l > 0 {
                        let comp: Vec<_> = lb.rows.iter().map(|&k| &syncs[l].rows[k]).collect();
                        terms.push(weighted_loss_grad(&self.policy, &comp, &self.cfg, RowRole::Companion, -1.0)?);
                    }
                    for (loss, grad) in terms {
                        match &mut total {
                            None => total = Some((loss, grad)),
                            Some((tl, tg)) => {
                                *tl += loss;
                                for (a, b) in tg.iter_mut().zip(&grad) {
                                    *a += b;
                                }
                            }
                        }
                    }
                }
                total.ok_or_else(|| Error::Usage("empty minibatch".into()))
            }
        }
    }

    /// Runs `iterations` more iterations, evaluating every `eval_every`
    /// iterations (and after the last) when `eval_every > 0`.
    pub fn train(&mut self, iterations: usize, eval_every: usize, mut on_record: impl FnMut(&IterationRecord)) -> Result<Vec<IterationRecord>> {
        let mut out = Vec::with_capacity(iterations);
        for k in 0..iterations {
            let mut rec = self.train_iteration()?;
            if eval_every > 0 && ((k + 1) % eval_every == 0 || k + 1 == iterations) {
                let r = self.evaluate()?;
                rec.eval = EvalSummary::from_rewards(&r);
            }
            log::info!("iteration {} loss {:.4e} eval {:?}", rec.iteration, rec.loss, rec.eval.map(|e| e.mean));
            on_record(&rec);
            out.push(rec);
        }
        Ok(out)
    }
}
