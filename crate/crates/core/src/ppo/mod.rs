//! Proximal policy optimization with a plain Monte Carlo loss estimate and
//! with the telescoping multilevel estimate over synchronized level pairs.

mod rollout;
mod train;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use rollout::{
    collect_rollouts_classic, collect_rollouts_multilevel, ClassicActor, MultilevelActor, RolloutBuffer,
    RolloutRow, SyncRolloutBuffer,
};
pub(crate) use rollout::{act, finish_segment, gaussian_noise};
pub use train::{
    actor_seed, evaluate_policy, iteration_cost, Algorithm, Checkpoint, EvalSummary, IterationRecord, Trainer,
    CHECKPOINT_VERSION,
};

use crate::error::{Error, Result};
use crate::policy::{entropy, MlpParams, OutputGrads, PolicyOutput, Tape};

/// How the entropy bonus is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    /// Closed-form Gaussian entropy.
    #[default]
    Analytic,
    /// Single-sample estimate `−log π(a|s)` of the stored action.
    NegLogProb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub c_v: f64,
    pub c_e: f64,
    pub epochs: usize,
    pub n_actors: usize,
    /// Steps per actor at each level, coarse to fine.
    pub steps: Vec<usize>,
    /// Minibatch size at each level.
    pub batch: Vec<usize>,
    pub lr: f64,
    pub hidden: Vec<usize>,
    pub max_grad_norm: Option<f64>,
    pub normalize_advantages: bool,
    pub entropy_mode: EntropyMode,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.1,
            c_v: 0.5,
            c_e: 0.01,
            epochs: 20,
            n_actors: 50,
            steps: vec![50],
            batch: vec![250],
            lr: 3e-6,
            hidden: vec![150, 100, 80],
            max_grad_norm: Some(0.5),
            normalize_advantages: false,
            entropy_mode: EntropyMode::Analytic,
        }
    }
}

impl PpoConfig {
    pub fn n_levels(&self) -> usize {
        self.steps.len()
    }

    /// Minibatches per epoch (equal at every level).
    pub fn n_batches(&self) -> usize {
        self.n_actors * self.steps[0] / self.batch[0]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps.is_empty() {
            return bad("at least one level is required".into());
        }
        if self.steps.len() != self.batch.len() {
            return bad(format!("{} step counts but {} batch sizes", self.steps.len(), self.batch.len()));
        }
        if self.n_actors == 0 || self.epochs == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("actors, epochs and hidden widths must be positive".into());
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("clip range must lie in (0, 1), got {}", self.clip_eps));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("discount and GAE lambda must lie in [0, 1]".into());
        }
        if !(self.lr > 0.0) || self.c_v < 0.0 || self.c_e < 0.0 {
            return bad("learning rate must be positive and loss coefficients non-negative".into());
        }
        if let Some(g) = self.max_grad_norm {
            if !(g > 0.0) {
                return bad("gradient clip norm must be positive".into());
            }
        }
        let mut n_batches = None;
        for (l, (&t, &m)) in self.steps.iter().zip(&self.batch).enumerate() {
            let rows = self.n_actors * t;
            if t == 0 || m == 0 || m > rows || rows % m != 0 {
                return bad(format!(
                    "level {}: batch size {m} must divide the {rows} collected rows",
                    l + 1
                ));
            }
            let k = rows / m;
            if *n_batches.get_or_insert(k) != k {
                return bad("every level must give the same number of minibatches (T_l / M_l constant)".into());
            }
        }
        Ok(())
    }
}

/// Generalized advantage estimation over one contiguous trajectory segment.
///
/// `dones[t]` marks that the transition at `t` ended an episode, so nothing
/// is bootstrapped across it; `bootstrap` is the value of the state after the
/// last transition.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Per-row loss terms of a minibatch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchLosses {
    /// Clipped surrogate (to be maximized).
    pub l_a: Vec<f64>,
    /// `c_v (V − R)²`.
    pub l_v: Vec<f64>,
    /// `−c_e · entropy estimate`.
    pub l_e: Vec<f64>,
}

impl BatchLosses {
    pub fn len(&self) -> usize {
        self.l_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.l_a.is_empty()
    }

    /// Per-row objective to minimize: `−L_a + L_v + L_e`.
    pub fn row_loss(&self) -> Vec<f64> {
        (0..self.len()).map(|k| -self.l_a[k] + self.l_v[k] + self.l_e[k]).collect()
    }
}

/// Clipped surrogate `min(ρA, clip(ρ, 1−ε, 1+ε)A)`.
pub fn clipped_surrogate(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

fn advantages(rows: &[&RolloutRow], normalize: bool) -> Vec<f64> {
    let a: Vec<f64> = rows.iter().map(|r| r.adv).collect();
    if !normalize || a.len() < 2 {
        return a;
    }
    let n = a.len() as f64;
    let m = a.iter().sum::<f64>() / n;
    let sd = (a.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
    a.iter().map(|v| (v - m) / (sd + 1e-8)).collect()
}

/// Which side of a level difference a row sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowRole {
    /// Rows of a level's own buffer (added to the loss).
    Level,
    /// Companion rows from a sync buffer (subtracted from the loss). The
    /// ratio and the value prediction are clipped to the trust region around
    /// the collecting parameters, so a companion term is bounded and stops
    /// pulling once the policy has left the region. At the collecting
    /// parameters it equals the plain term.
    Companion,
}

/// Per-row terms and their derivatives with respect to `log π` and `V`.
struct RowTerms {
    l_a: f64,
    l_v: f64,
    l_e: f64,
    dla_dlp: f64,
    dlv_dv: f64,
}

fn terms(cfg: &PpoConfig, out: &PolicyOutput, row: &RolloutRow, adv: f64, role: RowRole) -> RowTerms {
    let eps = cfg.clip_eps;
    let lp = out.log_prob(&row.action);
    let ratio = (lp - row.log_prob).exp();
    let (raw, clipped) = (ratio * adv, ratio.clamp(1.0 - eps, 1.0 + eps) * adv);
    let err = out.value - row.ret;
    let (l_a, raw_active, l_v, dlv_dv) = match role {
        RowRole::Level => (raw.min(clipped), raw <= clipped, cfg.c_v * err * err, 2.0 * cfg.c_v * err),
        RowRole::Companion => {
            let dv = out.value - row.value;
            let err_c = row.value + dv.clamp(-eps, eps) - row.ret;
            let inside = ratio > 1.0 - eps && ratio < 1.0 + eps;
            let d = if dv.abs() < eps { 2.0 * cfg.c_v * err_c } else { 0.0 };
            (clipped, inside, cfg.c_v * err_c * err_c, d)
        }
    };
    let h = match cfg.entropy_mode {
        EntropyMode::Analytic => entropy(out),
        EntropyMode::NegLogProb => -lp,
    };
    RowTerms { l_a, l_v, l_e: -cfg.c_e * h, dla_dlp: if raw_active { raw } else { 0.0 }, dlv_dv }
}

fn batch_losses(policy: &MlpParams, rows: &[&RolloutRow], cfg: &PpoConfig, role: RowRole) -> Result<BatchLosses> {
    let mut tape = Tape::default();
    let outs = policy.forward_batch(&rows.iter().map(|r| r.obs.as_slice()).collect::<Vec<_>>(), &mut tape)?;
    let adv = advantages(rows, cfg.normalize_advantages);
    let mut out = BatchLosses::default();
    for (k, (o, r)) in outs.iter().zip(rows).enumerate() {
        let t = terms(cfg, o, r, adv[k], role);
        out.l_a.push(t.l_a);
        out.l_v.push(t.l_v);
        out.l_e.push(t.l_e);
    }
    Ok(out)
}

/// Loss terms of `rows` under the current policy.
pub fn compute_batch_losses(policy: &MlpParams, rows: &[&RolloutRow], cfg: &PpoConfig) -> Result<BatchLosses> {
    batch_losses(policy, rows, cfg, RowRole::Level)
}

/// Loss terms of companion rows (see [`RowRole::Companion`]).
pub fn compute_companion_losses(policy: &MlpParams, rows: &[&RolloutRow], cfg: &PpoConfig) -> Result<BatchLosses> {
    batch_losses(policy, rows, cfg, RowRole::Companion)
}

/// Monte Carlo loss: the minibatch mean of `−L_a + L_v + L_e`.
pub fn loss_mc(losses: &BatchLosses) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::Usage("loss of an empty minibatch".into()));
    }
    Ok(losses.row_loss().iter().sum::<f64>() / losses.len() as f64)
}

/// Multilevel loss: `Σ_l (mean over level-l rows − mean over their level-(l−1)
/// companions)`, with no companion term at the coarsest level.
pub fn loss_mlmc(levels: &[(BatchLosses, Option<BatchLosses>)]) -> Result<f64> {
    if levels.is_empty() {
        return Err(Error::Usage("multilevel loss needs at least one level".into()));
    }
    let mut total = 0.0;
    for (l, (fine, comp)) in levels.iter().enumerate() {
        let f = loss_mc(fine)?;
        total += match (l, comp) {
            (0, None) => f,
            (0, Some(_)) => return Err(Error::Usage("the coarsest level has no companion".into())),
            (_, Some(c)) => {
                if c.len() != fine.len() {
                    return Err(Error::Usage("companion batch size differs from its level's".into()));
                }
                f - loss_mc(c)?
            }
            (_, None) => return Err(Error::Usage(format!("level {} is missing its companion batch", l + 1))),
        };
    }
    Ok(total)
}

/// Mean loss of `rows` in the given role times `weight`, and its gradient
/// with respect to the policy parameters.
pub fn weighted_loss_grad(
    policy: &MlpParams,
    rows: &[&RolloutRow],
    cfg: &PpoConfig,
    role: RowRole,
    weight: f64,
) -> Result<(f64, Vec<f64>)> {
    if rows.is_empty() {
        return Err(Error::Usage("gradient of an empty minibatch".into()));
    }
    let mut tape = Tape::default();
    let outs = policy.forward_batch(&rows.iter().map(|r| r.obs.as_slice()).collect::<Vec<_>>(), &mut tape)?;
    let adv = advantages(rows, cfg.normalize_advantages);
    let scale = weight / rows.len() as f64;
    let n_act = policy.n_actions;
    let mut up = OutputGrads { mean: Vec::with_capacity(rows.len()), value: Vec::with_capacity(rows.len()), log_std: vec![0.0; n_act] };
    let mut loss = 0.0;
    for (k, (o, r)) in outs.iter().zip(rows).enumerate() {
        let t = terms(cfg, o, r, adv[k], role);
        loss += -t.l_a + t.l_v + t.l_e;
        let mut d_lp = -t.dla_dlp;
        if cfg.entropy_mode == EntropyMode::NegLogProb {
            d_lp += cfg.c_e;
        }
        let mut dm = Vec::with_capacity(n_act);
        for i in 0..n_act {
            let sd = o.log_std[i].exp();
            let z = (r.action[i] - o.mean[i]) / sd;
            dm.push(scale * d_lp * z / sd);
            let mut dls = d_lp * (z * z - 1.0);
            if cfg.entropy_mode == EntropyMode::Analytic {
                dls -= cfg.c_e;
            }
            up.log_std[i] += scale * dls;
        }
        up.mean.push(dm);
        up.value.push(scale * t.dlv_dv);
    }
    let grad = policy.backward(&tape, &up)?;
    Ok((scale * loss, grad))
}

/// Rescales `grad` to at most `max_norm` in Euclidean norm; returns the
/// norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
    norm
}

/// Row indices of one minibatch at one level, into the level's buffer and
/// (for levels above the first) the matching sync buffer rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelBatch {
    pub rows: Vec<usize>,
}

/// Shuffles each level's rows with one permutation shared by the buffer and
/// its sync buffer, then slices them into aligned minibatches: batch `b`
/// holds the `b`-th slice of every level.
pub fn get_batches<R: Rng + ?Sized>(
    buffers: &[RolloutBuffer],
    sync_buffers: &[SyncRolloutBuffer],
    batch: &[usize],
    rng: &mut R,
) -> Result<Vec<Vec<LevelBatch>>> {
    if buffers.len() != batch.len() || sync_buffers.len() != buffers.len() {
        return Err(Error::Config("one buffer, sync buffer and batch size per level is required".into()));
    }
    let mut n_batches = None;
    let mut perms = Vec::with_capacity(buffers.len());
    for (l, (buf, &m)) in buffers.iter().zip(batch).enumerate() {
        let n = buf.rows.len();
        if m == 0 || n % m != 0 {
            return Err(Error::Config(format!("level {}: batch size {m} does not divide {n} rows", l + 1)));
        }
        if l > 0 && sync_buffers[l].rows.len() != n {
            return Err(Error::Config(format!("level {}: sync buffer is not paired with the buffer", l + 1)));
        }
        if *n_batches.get_or_insert(n / m) != n / m {
            return Err(Error::Config("levels give different numbers of minibatches".into()));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        perms.push(idx);
    }
    let k = n_batches.unwrap_or(0);
    Ok((0..k)
        .map(|b| {
            perms
                .iter()
                .zip(batch)
                .map(|(p, &m)| LevelBatch { rows: p[b * m..(b + 1) * m].to_vec() })
                .collect()
        })
        .collect())
}
