//! Multilevel Monte Carlo analysis of the PPO objective: synchronized
//! per-level loss samples, moment estimates, decay-rate fit, optimal sample
//! allocation, cost comparison with plain Monte Carlo and the weak
//! convergence check.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multilevel::LevelStack;
use crate::policy::MlpParams;
use crate::ppo::{
    actor_seed, compute_batch_losses, PpoConfig, RolloutBuffer, RolloutRow, SyncRolloutBuffer,
};
use crate::ppo::{act, finish_segment, gaussian_noise};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Synchronized samples per level.
    pub n_samples: usize,
    pub n_actors: usize,
    /// RMS accuracies ε.
    pub epsilons: Vec<f64>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { n_samples: 1000, n_actors: 20, epsilons: vec![1e-2f64.sqrt(), 1e-3f64.sqrt(), 1e-4f64.sqrt()] }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 || self.n_actors == 0 {
            return Err(Error::Config("analysis needs at least 2 samples and one actor".into()));
        }
        if self.epsilons.is_empty() || self.epsilons.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(Error::Config("accuracies must be positive".into()));
        }
        Ok(())
    }
}

/// Per-level transition streams and their loss values. Row `k` of every
/// level comes from the same level-L pre-step state and the same noise.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisSamples {
    pub streams: Vec<Vec<RolloutRow>>,
    /// Per level, per sample: the PPO loss at ratio 1.
    pub j: Vec<Vec<f64>>,
}

impl AnalysisSamples {
    pub fn n_levels(&self) -> usize {
        self.j.len()
    }

    pub fn n_samples(&self) -> usize {
        self.j.first().map_or(0, Vec::len)
    }

    /// Difference samples `Y_l = J_l − J_{l−1}` (`Y_1 = J_1`), 0-based level.
    pub fn y(&self, level: usize) -> Vec<f64> {
        if level == 0 {
            return self.j[0].clone();
        }
        self.j[level].iter().zip(&self.j[level - 1]).map(|(f, c)| f - c).collect()
    }

    /// Buffers laid out as in multilevel training: level `l` holds stream
    /// `l` and its sync buffer holds stream `l − 1`.
    pub fn buffers(&self) -> (Vec<RolloutBuffer>, Vec<SyncRolloutBuffer>) {
        let bufs = self.streams.iter().enumerate().map(|(l, s)| RolloutBuffer { level: l + 1, rows: s.clone() }).collect();
        let syncs = (0..self.streams.len())
            .map(|l| SyncRolloutBuffer { level: l + 1, rows: if l == 0 { vec![] } else { self.streams[l - 1].clone() } })
            .collect();
        (bufs, syncs)
    }
}

/// Rolls stochastic trajectories at the target level. Before every fine
/// step each lower level is overwritten by the restriction of the fine
/// state and advanced one step with the same noise.
pub fn generate_analysis_samples(
    policy: &MlpParams,
    stack: &LevelStack,
    ppo: &PpoConfig,
    cfg: &AnalysisConfig,
    seed: u64,
) -> Result<AnalysisSamples> {
    cfg.validate()?;
    let n_levels = stack.n_levels();
    let per_actor = cfg.n_samples.div_ceil(cfg.n_actors);
    let parts: Vec<Result<Vec<Vec<RolloutRow>>>> = (0..cfg.n_actors)
        .into_par_iter()
        .map(|k| {
            let mut rng = actor_seed(seed, 0, k);
            let mut envs: Vec<_> = (0..n_levels).map(|l| stack.make_env(l)).collect();
            let (lo, hi) = envs.split_at_mut(n_levels - 1);
            let fine = &mut hi[0];
            let mut streams: Vec<Vec<RolloutRow>> = vec![Vec::with_capacity(per_actor); n_levels];
            for _ in 0..per_actor {
                if !fine.is_started() || fine.is_done() {
                    fine.reset(&mut rng)?;
                }
                let z = gaussian_noise(&mut rng, policy.n_actions);
                for (l, coarse) in lo.iter_mut().enumerate() {
                    coarse.map_from(fine)?;
                    let (obs, value, s) = act(policy, coarse, &z)?;
                    let res = coarse.step(&s.action)?;
                    streams[l].push(RolloutRow { obs, action: s.raw, reward: res.reward, done: false, value, log_prob: s.log_prob, ret: 0.0, adv: 0.0 });
                }
                let (obs, value, s) = act(policy, fine, &z)?;
                let res = fine.step(&s.action)?;
                streams[n_levels - 1].push(RolloutRow { obs, action: s.raw, reward: res.reward, done: res.done, value, log_prob: s.log_prob, ret: 0.0, adv: 0.0 });
            }
            let dones: Vec<bool> = streams[n_levels - 1].iter().map(|r| r.done).collect();
            for (l, stream) in streams.iter_mut().enumerate() {
                let boot = if l + 1 == n_levels {
                    policy.forward(&fine.observe())?.value
                } else {
                    lo[l].map_from(fine)?;
                    policy.forward(&lo[l].observe())?.value
                };
                for (r, d) in stream.iter_mut().zip(&dones) {
                    r.done = *d;
                }
                finish_segment(stream, boot, ppo);
            }
            Ok(streams)
        })
        .collect();
    let mut streams: Vec<Vec<RolloutRow>> = vec![Vec::with_capacity(per_actor * cfg.n_actors); n_levels];
    for p in parts {
        for (l, s) in p?.into_iter().enumerate() {
            streams[l].extend(s);
        }
    }
    for s in &mut streams {
        s.truncate(cfg.n_samples);
    }
    // Collection and evaluation use the same policy, so every ratio is 1.
    let eval_cfg = PpoConfig { normalize_advantages: false, ..ppo.clone() };
    let j = streams
        .iter()
        .map(|s| Ok(compute_batch_losses(policy, &s.iter().collect::<Vec<_>>(), &eval_cfg)?.row_loss()))
        .collect::<Result<Vec<_>>>()?;
    Ok(AnalysisSamples { streams, j })
}

/// Two-pass sample mean and unbiased variance.
pub fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = x.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (m, 0.0);
    }
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (m, v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    /// 1-based level.
    pub level: usize,
    pub mean_y: f64,
    pub var_y: f64,
    pub mean_j: f64,
    pub var_j: f64,
    /// Cost of one `Y_l` sample: a level-l step plus its level-(l−1) companion.
    pub cost: f64,
}

/// Moments of the difference and raw terms per level, with per-step level
/// costs `costs` (coarse to fine).
pub fn level_stats(samples: &AnalysisSamples, costs: &[f64]) -> Result<Vec<LevelStats>> {
    if costs.len() != samples.n_levels() {
        return Err(Error::Config(format!("{} costs for {} levels", costs.len(), samples.n_levels())));
    }
    Ok((0..samples.n_levels())
        .map(|l| {
            let (mean_y, var_y) = mean_var(&samples.y(l));
            let (mean_j, var_j) = mean_var(&samples.j[l]);
            let cost = costs[l] + if l > 0 { costs[l - 1] } else { 0.0 };
            LevelStats { level: l + 1, mean_y, var_y, mean_j, var_j, cost }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaFit {
    pub alpha: f64,
    /// 1-based levels that entered the regression.
    pub levels: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Decay rate of `|mean Y_l|`: minus the least-squares slope of
/// `log2|mean_l|` against the level index. `means[k]` belongs to level
/// `first_level + k`.
pub fn fit_alpha(means: &[f64], first_level: usize) -> Result<AlphaFit> {
    let mut warnings = Vec::new();
    let mut pts = Vec::new();
    for (k, m) in means.iter().enumerate() {
        let level = first_level + k;
        if *m == 0.0 {
            warnings.push(format!("level {level} has zero mean and is excluded from the fit"));
        } else {
            pts.push((level as f64, m.abs().log2(), level));
        }
    }
    if pts.len() < 2 {
        return Err(Error::Usage("the decay-rate fit needs at least two levels with nonzero means".into()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let alpha = -sxy / sxx;
    if alpha <= 0.0 {
        warnings.push(format!("fitted decay rate {alpha:.3} is not positive: level differences do not shrink"));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(AlphaFit { alpha, levels: pts.iter().map(|p| p.2).collect(), warnings })
}

fn check_inputs(v: &[f64], c: &[f64], eps: f64) -> Result<()> {
    if v.is_empty() || v.len() != c.len() {
        return Err(Error::Config("variances and costs must be non-empty and of equal length".into()));
    }
    if v.iter().any(|x| !(*x >= 0.0)) || c.iter().any(|x| !(*x > 0.0)) || !(eps > 0.0) {
        return Err(Error::Domain("need V ≥ 0, C > 0 and ε > 0".into()));
    }
    Ok(())
}

/// Pre-ceiling optimal sample counts `2ε⁻² (Σ_k √(V_k C_k)) √(V_l / C_l)`.
pub fn optimal_allocation_real(v: &[f64], c: &[f64], eps: f64) -> Result<Vec<f64>> {
    check_inputs(v, c, eps)?;
    let s: f64 = v.iter().zip(c).map(|(v, c)| (v * c).sqrt()).sum();
    Ok(v.iter().zip(c).map(|(v, c)| 2.0 / (eps * eps) * s * (v / c).sqrt()).collect())
}

/// Sample counts per level, rounded up, at least 1.
pub fn optimal_allocation(v: &[f64], c: &[f64], eps: f64) -> Result<Vec<usize>> {
    let m = optimal_allocation_real(v, c, eps)?;
    if v.iter().all(|x| *x == 0.0) {
        log::warn!("all level variances are zero; allocating one sample per level");
    }
    Ok(m.iter().map(|x| (x.ceil() as usize).max(1)).collect())
}

/// `2ε⁻² (Σ_l √(V_l C_l))²`.
pub fn mlmc_cost(v: &[f64], c: &[f64], eps: f64) -> Result<f64> {
    check_inputs(v, c, eps)?;
    let s: f64 = v.iter().zip(c).map(|(v, c)| (v * c).sqrt()).sum();
    Ok(2.0 / (eps * eps) * s * s)
}

/// Plain Monte Carlo: `M = ⌈2ε⁻² V⌉` samples at cost `M · C`.
pub fn mc_cost(v: f64, c: f64, eps: f64) -> Result<(usize, f64)> {
    check_inputs(&[v], &[c], eps)?;
    let m = ((2.0 / (eps * eps) * v).ceil() as usize).max(1);
    Ok((m, m as f64 * c))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakConvergence {
    pub passed: bool,
    /// Extrapolated bias bound over the last three levels.
    pub lhs: f64,
    /// `ε / √2`.
    pub rhs: f64,
    pub diagnostic: Option<String>,
}

impl WeakConvergence {
    pub fn slack(&self) -> f64 {
        self.rhs - self.lhs
    }
}

/// Bias check on the finest levels: each of the last three means is
/// extrapolated to the finest level with the fitted rate before taking the
/// maximum, `max_l |mean Y_l| 2^{−α(L−l)} / (2^α − 1) ≤ ε/√2`.
pub fn weak_convergence_check(means: &[f64], alpha: f64, eps: f64) -> WeakConvergence {
    let rhs = eps / std::f64::consts::SQRT_2;
    let n = means.len();
    let first = n.saturating_sub(3);
    if means[first..].iter().all(|m| *m == 0.0) {
        return WeakConvergence { passed: true, lhs: 0.0, rhs, diagnostic: None };
    }
    if !(alpha > 0.0) {
        return WeakConvergence {
            passed: false,
            lhs: f64::INFINITY,
            rhs,
            diagnostic: Some(format!("decay rate {alpha:.3} is not positive; bias cannot be extrapolated")),
        };
    }
    let top = (first..n).map(|l| means[l].abs() * 2f64.powf(-alpha * (n - 1 - l) as f64)).fold(0.0f64, f64::max);
    let lhs = top / (2f64.powf(alpha) - 1.0);
    WeakConvergence { passed: lhs <= rhs, lhs, rhs, diagnostic: None }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonResult {
    pub epsilon: f64,
    pub m_levels: Vec<usize>,
    /// Multilevel estimate `Σ_l mean of M_l draws of Y_l`.
    pub y: f64,
    pub c_mlmc: f64,
    pub m_mc: usize,
    pub y_mc: f64,
    pub c_mc: f64,
    pub weak: WeakConvergence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub n_samples: usize,
    pub levels: Vec<LevelStats>,
    pub alpha: Option<AlphaFit>,
    pub results: Vec<EpsilonResult>,
    pub notes: Vec<String>,
}

fn draw_mean<R: Rng + ?Sized>(pool: &[f64], m: usize, rng: &mut R) -> f64 {
    (0..m).map(|_| pool[rng.random_range(0..pool.len())]).sum::<f64>() / m as f64
}

/// Allocation, estimates and verdicts for each accuracy from an existing
/// sample pool. Estimates redraw (with replacement) from the pool.
pub fn analyze_samples(samples: &AnalysisSamples, costs: &[f64], epsilons: &[f64], seed: u64) -> Result<AnalysisReport> {
    let levels = level_stats(samples, costs)?;
    let n_levels = levels.len();
    let means: Vec<f64> = levels.iter().map(|s| s.mean_y).collect();
    let mut notes = vec![
        "allocation M_l = ceil(2 eps^-2 (sum_k sqrt(V_k C_k)) sqrt(V_l / C_l)); C_MLMC = 2 eps^-2 (sum_l sqrt(V_l C_l))^2".to_string(),
        "plain Monte Carlo uses M = ceil(2 eps^-2 V) at cost M C".to_string(),
        "estimates redraw with replacement from the analysis pool".to_string(),
    ];
    let alpha = match n_levels {
        1 => None,
        2 => Some(fit_alpha(&means, 1)?),
        _ => match fit_alpha(&means[1..], 2) {
            Ok(f) => Some(f),
            Err(_) => Some(fit_alpha(&means, 1)?),
        },
    };
    if let Some(f) = &alpha {
        notes.extend(f.warnings.iter().cloned());
    }
    let v: Vec<f64> = levels.iter().map(|s| s.var_y).collect();
    let c: Vec<f64> = levels.iter().map(|s| s.cost).collect();
    let top = &levels[n_levels - 1];
    let ys: Vec<Vec<f64>> = (0..n_levels).map(|l| samples.y(l)).collect();
    let mut results = Vec::with_capacity(epsilons.len());
    for (k, &eps) in epsilons.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64 + 1);
        let m_levels = optimal_allocation(&v, &c, eps)?;
        let y = ys.iter().zip(&m_levels).map(|(pool, &m)| draw_mean(pool, m, &mut rng)).sum();
        let c_mlmc = mlmc_cost(&v, &c, eps)?;
        let (m_mc, c_mc) = mc_cost(top.var_j, costs[n_levels - 1], eps)?;
        let y_mc = draw_mean(&samples.j[n_levels - 1], m_mc, &mut rng);
        let weak = match &alpha {
            Some(f) => weak_convergence_check(&means, f.alpha, eps),
            None => weak_convergence_check(&[0.0], 1.0, eps),
        };
        results.push(EpsilonResult { epsilon: eps, m_levels, y, c_mlmc, m_mc, y_mc, c_mc, weak });
    }
    Ok(AnalysisReport { n_samples: samples.n_samples(), levels, alpha, results, notes })
}

/// Full analysis: sample generation at the stack's costs, then
/// [`analyze_samples`].
pub fn run_analysis(
    policy: &MlpParams,
    stack: &LevelStack,
    ppo: &PpoConfig,
    cfg: &AnalysisConfig,
    seed: u64,
) -> Result<AnalysisReport> {
    let samples = generate_analysis_samples(policy, stack, ppo, cfg, seed)?;
    analyze_samples(&samples, &stack.costs(), &cfg.epsilons, seed)
}

impl AnalysisReport {
    pub fn levels_csv(&self) -> String {
        let mut s = String::from("level,mean_y,var_y,mean_j,var_j,cost\n");
        for l in &self.levels {
            let _ = writeln!(s, "{},{},{},{},{},{}", l.level, l.mean_y, l.var_y, l.mean_j, l.var_j, l.cost);
        }
        s
    }

    pub fn epsilons_csv(&self) -> String {
        let mut s = String::from("epsilon,epsilon_sq,m_levels,y_mlmc,c_mlmc,m_mc,y_mc,c_mc,cost_ratio,weak_pass,weak_lhs,weak_rhs\n");
        for r in &self.results {
            let m: Vec<String> = r.m_levels.iter().map(usize::to_string).collect();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.epsilon,
                r.epsilon * r.epsilon,
                m.join(";"),
                r.y,
                r.c_mlmc,
                r.m_mc,
                r.y_mc,
                r.c_mc,
                r.c_mlmc / r.c_mc,
                r.weak.passed,
                r.weak.lhs,
                r.weak.rhs
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for n in &self.notes {
            let _ = writeln!(s, "# {n}");
        }
        let _ = writeln!(s, "samples per level: {}", self.n_samples);
        if let Some(a) = &self.alpha {
            let _ = writeln!(s, "alpha: {:.4} (levels {:?})", a.alpha, a.levels);
        }
        for r in &self.results {
            let _ = writeln!(
                s,
                "eps^2 = {:.1e}: M = {:?}, Y = {:.6}, Y_MC = {:.6}, C_MLMC/C_MC = {:.4}, weak convergence {}{}",
                r.epsilon * r.epsilon,
                r.m_levels,
                r.y,
                r.y_mc,
                r.c_mlmc / r.c_mc,
                if r.weak.passed { "passed" } else { "failed" },
                r.weak.diagnostic.as_deref().map(|d| format!(" ({d})")).unwrap_or_default()
            );
        }
        s
    }
}
