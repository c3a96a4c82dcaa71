//! Gaussian policy and value network: a tanh MLP trunk with a squashed
//! action-mean head, a scalar value head and a state-independent log
//! standard deviation. Gradients are computed by hand from a recorded
//! forward pass.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{MAX_WEIGHT, MIN_WEIGHT};
use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const INITIAL_LOG_STD: f64 = -std::f64::consts::LN_2;
const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

/// Offsets of one dense layer inside the flat parameter vector; weights are
/// row-major `n_out × n_in`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct LayerSlot {
    n_in: usize,
    n_out: usize,
    w: usize,
    b: usize,
}

impl LayerSlot {
    fn forward(&self, theta: &[f64], x: &[f64], y: &mut Vec<f64>) {
        y.clear();
        for o in 0..self.n_out {
            let row = &theta[self.w + o * self.n_in..self.w + (o + 1) * self.n_in];
            let mut s = theta[self.b + o];
            for (a, b) in row.iter().zip(x) {
                s += a * b;
            }
            y.push(s);
        }
    }

    /// Accumulates weight/bias gradients and returns dL/dx.
    fn backward(&self, theta: &[f64], x: &[f64], dy: &[f64], grad: &mut [f64], dx: &mut Vec<f64>) {
        dx.clear();
        dx.resize(self.n_in, 0.0);
        for o in 0..self.n_out {
            let g = dy[o];
            if g == 0.0 {
                continue;
            }
            grad[self.b + o] += g;
            let w = self.w + o * self.n_in;
            let row = &theta[w..w + self.n_in];
            let grow = &mut grad[w..w + self.n_in];
            for i in 0..self.n_in {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
    }
}

/// Network weights, flattened. Layer shapes are recoverable from `sizes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    /// Input width followed by the hidden widths.
    pub sizes: Vec<usize>,
    pub n_actions: usize,
    pub theta: Vec<f64>,
    #[serde(skip)]
    slots: Option<Slots>,
}

#[derive(Debug, Clone, PartialEq)]
struct Slots {
    trunk: Vec<LayerSlot>,
    mean: LayerSlot,
    value: LayerSlot,
    log_std: usize,
}

fn layout(sizes: &[usize], n_actions: usize) -> (Slots, usize) {
    let mut at = 0;
    let mut slot = |n_in: usize, n_out: usize| {
        let s = LayerSlot { n_in, n_out, w: at, b: at + n_in * n_out };
        at += n_in * n_out + n_out;
        s
    };
    let trunk: Vec<LayerSlot> = sizes.windows(2).map(|w| slot(w[0], w[1])).collect();
    let h = *sizes.last().unwrap();
    let mean = slot(h, n_actions);
    let value = slot(h, 1);
    let log_std = at;
    (Slots { trunk, mean, value, log_std }, at + n_actions)
}

/// Output of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    pub value: f64,
}

impl PolicyOutput {
    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    /// Diagonal-Gaussian log density of `raw` (pre-clamp).
    pub fn log_prob(&self, raw: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.log_std)
            .zip(raw)
            .map(|((m, ls), a)| {
                let z = (a - m) / ls.exp();
                -0.5 * z * z - ls - HALF_LOG_2PI
            })
            .sum()
    }
}

/// Diagonal-Gaussian entropy Σ(½ + ½ log 2π + log σ).
pub fn entropy(out: &PolicyOutput) -> f64 {
    out.log_std.iter().map(|ls| 0.5 + HALF_LOG_2PI + ls).sum()
}

/// An action drawn with externally supplied noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledAction {
    /// `mean + std · noise`, before projection; the log density refers to this.
    pub raw: Vec<f64>,
    /// `raw` clamped to the admissible weight range.
    pub action: Vec<f64>,
    pub log_prob: f64,
}

pub fn sample_action(out: &PolicyOutput, noise: &[f64]) -> SampledAction {
    let raw: Vec<f64> = out.mean.iter().zip(&out.log_std).zip(noise).map(|((m, ls), z)| m + ls.exp() * z).collect();
    let action = raw.iter().map(|a| a.clamp(MIN_WEIGHT, MAX_WEIGHT)).collect();
    let log_prob = out.log_prob(&raw);
    SampledAction { raw, action, log_prob }
}

/// Recorded activations of a batch forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    /// Per row: input then every hidden activation.
    acts: Vec<Vec<Vec<f64>>>,
    /// Per row: sigmoid of the mean-head pre-activation.
    sig: Vec<Vec<f64>>,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.acts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acts.is_empty()
    }
}

/// Upstream derivatives of a scalar loss for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    /// Per row dL/dmean.
    pub mean: Vec<Vec<f64>>,
    /// Per row dL/dvalue.
    pub value: Vec<f64>,
    /// dL/dlog_std summed over the batch.
    pub log_std: Vec<f64>,
}

impl MlpParams {
    /// Scaled orthogonal initialization: gain √2 in the trunk, 0.01 on both
    /// heads, zero biases, log std = log 0.5.
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: &[usize], n_actions: usize, rng: &mut R) -> Result<Self> {
        if input == 0 || n_actions == 0 || hidden.contains(&0) {
            return Err(Error::Config("network widths must be positive".into()));
        }
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        let (slots, n) = layout(&sizes, n_actions);
        let mut theta = vec![0.0; n];
        let mut fill = |s: &LayerSlot, gain: f64| {
            let w = orthogonal(s.n_out, s.n_in, gain, rng);
            theta[s.w..s.w + w.len()].copy_from_slice(&w);
        };
        for s in &slots.trunk {
            fill(s, std::f64::consts::SQRT_2);
        }
        fill(&slots.mean, 0.01);
        fill(&slots.value, 0.01);
        theta[slots.log_std..].fill(INITIAL_LOG_STD);
        Ok(Self { sizes, n_actions, theta, slots: Some(slots) })
    }

    /// Parameters with every weight and bias zero and the given log std.
    pub fn zeros(input: usize, hidden: &[usize], n_actions: usize, log_std: f64) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        let (slots, n) = layout(&sizes, n_actions);
        let mut theta = vec![0.0; n];
        theta[slots.log_std..].fill(log_std);
        Self { sizes, n_actions, theta, slots: Some(slots) }
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    fn slots(&self) -> Slots {
        match &self.slots {
            Some(s) => s.clone(),
            None => layout(&self.sizes, self.n_actions).0,
        }
    }

    /// Rebuilds cached offsets after deserialization and checks the length.
    pub fn validate(&mut self) -> Result<()> {
        if self.sizes.len() < 2 || self.sizes.contains(&0) || self.n_actions == 0 {
            return Err(Error::Parse("network needs an input and at least one hidden layer".into()));
        }
        let (slots, n) = layout(&self.sizes, self.n_actions);
        if self.theta.len() != n {
            return Err(Error::Parse(format!("expected {n} parameters, found {}", self.theta.len())));
        }
        if self.theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse("non-finite parameter".into()));
        }
        self.slots = Some(slots);
        Ok(())
    }

    /// Index range of the log std entries in `theta`.
    pub fn log_std_range(&self) -> std::ops::Range<usize> {
        let s = self.slots().log_std;
        s..s + self.n_actions
    }

    /// Index range of the mean head's weights and biases.
    pub fn mean_head_range(&self) -> std::ops::Range<usize> {
        let s = self.slots().mean;
        s.w..s.b + s.n_out
    }

    /// Index range of the value head's weights and biases.
    pub fn value_head_range(&self) -> std::ops::Range<usize> {
        let s = self.slots().value;
        s.w..s.b + s.n_out
    }

    pub fn forward(&self, obs: &[f64]) -> Result<PolicyOutput> {
        let mut tape = Tape::default();
        Ok(self.forward_batch(&[obs], &mut tape)?.pop().unwrap())
    }

    /// Forward pass over a batch, recording activations on `tape` (cleared).
    pub fn forward_batch<O: AsRef<[f64]>>(&self, obs: &[O], tape: &mut Tape) -> Result<Vec<PolicyOutput>> {
        let slots = self.slots();
        let th = &self.theta;
        let log_std = th[slots.log_std..slots.log_std + self.n_actions].to_vec();
        tape.acts.clear();
        tape.sig.clear();
        let mut outs = Vec::with_capacity(obs.len());
        let mut pre = Vec::new();
        for o in obs {
            let o = o.as_ref();
            if o.len() != self.sizes[0] {
                return Err(Error::Usage(format!("observation has {} entries, network expects {}", o.len(), self.sizes[0])));
            }
            let mut acts = Vec::with_capacity(slots.trunk.len() + 1);
            acts.push(o.to_vec());
            for s in &slots.trunk {
                s.forward(th, acts.last().unwrap(), &mut pre);
                acts.push(pre.iter().map(|v| v.tanh()).collect());
            }
            let h = acts.last().unwrap();
            slots.mean.forward(th, h, &mut pre);
            let sig: Vec<f64> = pre.iter().map(|z| sigmoid(*z)).collect();
            let mean = sig.iter().map(|s| MIN_WEIGHT + (MAX_WEIGHT - MIN_WEIGHT) * s).collect();
            slots.value.forward(th, h, &mut pre);
            outs.push(PolicyOutput { mean, log_std: log_std.clone(), value: pre[0] });
            tape.acts.push(acts);
            tape.sig.push(sig);
        }
        Ok(outs)
    }

    /// Reverse pass: gradient of the loss with respect to `theta`.
    pub fn backward(&self, tape: &Tape, up: &OutputGrads) -> Result<Vec<f64>> {
        if tape.is_empty() {
            return Err(Error::Usage("backward called without a recorded forward pass".into()));
        }
        if up.mean.len() != tape.len() || up.value.len() != tape.len() || up.log_std.len() != self.n_actions {
            return Err(Error::Usage("upstream gradients do not match the recorded batch".into()));
        }
        let slots = self.slots();
        let th = &self.theta;
        let mut grad = vec![0.0; th.len()];
        let (mut dh, mut dh_v, mut dx) = (Vec::new(), Vec::new(), Vec::new());
        for r in 0..tape.len() {
            let acts = &tape.acts[r];
            let h = acts.last().unwrap();
            let dz: Vec<f64> = tape.sig[r]
                .iter()
                .zip(&up.mean[r])
                .map(|(s, g)| g * (MAX_WEIGHT - MIN_WEIGHT) * s * (1.0 - s))
                .collect();
            slots.mean.backward(th, h, &dz, &mut grad, &mut dh);
            slots.value.backward(th, h, &[up.value[r]], &mut grad, &mut dh_v);
            for (a, b) in dh.iter_mut().zip(&dh_v) {
                *a += b;
            }
            for (k, s) in slots.trunk.iter().enumerate().rev() {
                let out = &acts[k + 1];
                for (d, y) in dh.iter_mut().zip(out) {
                    *d *= 1.0 - y * y;
                }
                s.backward(th, &acts[k], &dh, &mut grad, &mut dx);
                std::mem::swap(&mut dh, &mut dx);
            }
        }
        for (g, u) in grad[slots.log_std..].iter_mut().zip(&up.log_std) {
            *g += u;
        }
        Ok(grad)
    }

    /// One Adam step followed by the log std clamp.
    pub fn adam_update(&mut self, grads: &[f64], state: &mut AdamState) -> Result<()> {
        state.step(&mut self.theta, grads)?;
        let r = self.log_std_range();
        for v in &mut self.theta[r] {
            *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
        Ok(())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Random `rows × cols` matrix with orthonormal rows or columns, scaled.
fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let (m, n) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::<f64>::from_fn(m, n, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let (mut q, r) = (qr.q(), qr.r());
    // Sign fix makes the draw uniform over orthogonal matrices.
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = gain * if rows >= cols { q[(i, j)] } else { q[(j, i)] };
        }
    }
    out
}

/// Adam optimizer state for a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Usage("optimizer, parameter and gradient sizes differ".into()));
        }
        if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient at parameter {k}")));
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for k in 0..params.len() {
            let g = grads[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let mh = self.m[k] / b1t;
            let vh = self.v[k] / b2t;
            params[k] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(seed: u64) -> MlpParams {
        MlpParams::new(4, &[6, 5], 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn zero_network_outputs_midpoint() {
        let p = MlpParams::zeros(3, &[4], 2, 0.0);
        let o = p.forward(&[0.3, -1.0, 2.0]).unwrap();
        assert_eq!(o.mean, vec![0.5005, 0.5005]);
        assert_eq!(o.value, 0.0);
        assert!(p.forward(&[1.0]).is_err());
    }

    #[test]
    fn initialization_is_orthogonal_and_seeded() {
        let p = MlpParams::new(8, &[5], 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let s = p.slots();
        let w = &p.theta[s.trunk[0].w..s.trunk[0].b];
        for a in 0..5 {
            for b in 0..5 {
                let d: f64 = (0..8).map(|i| w[a * 8 + i] * w[b * 8 + i]).sum();
                let expect = if a == b { 2.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-12);
            }
        }
        assert_eq!(p, MlpParams::new(8, &[5], 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap());
        assert!(p.theta[p.log_std_range()].iter().all(|v| (v.exp() - 0.5).abs() < 1e-15));
    }

    #[test]
    fn sampling_at_zero_noise_is_the_mode() {
        let o = PolicyOutput { mean: vec![0.2, 0.9], log_std: vec![(0.5f64).ln(), 0.0], value: 0.0 };
        let s = sample_action(&o, &[0.0, 0.0]);
        assert_eq!(s.action, o.mean);
        let expect: f64 = o.std().iter().map(|sd| -(sd * (2.0 * std::f64::consts::PI).sqrt()).ln()).sum();
        assert!((s.log_prob - expect).abs() < 1e-14);
        let far = sample_action(&o, &[2.0, -2.0]);
        let near = sample_action(&o, &[0.5, -0.5]);
        assert!(far.log_prob < near.log_prob && near.log_prob < s.log_prob);
        assert!(far.action.iter().all(|a| (MIN_WEIGHT..=MAX_WEIGHT).contains(a)));
    }

    #[test]
    fn density_integrates_to_one() {
        let o = PolicyOutput { mean: vec![0.3, 0.6], log_std: vec![-1.2, -0.4], value: 0.0 };
        let h = 0.005;
        let mut total = 0.0;
        let n = 2400;
        for i in 0..n {
            for j in 0..n {
                let a = -3.0 + (i as f64 + 0.5) * h;
                let b = -5.0 + (j as f64 + 0.5) * h;
                total += o.log_prob(&[a, b]).exp() * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn entropy_values() {
        let one = PolicyOutput { mean: vec![0.5], log_std: vec![0.0], value: 0.0 };
        assert!((entropy(&one) - 1.418_938_533_204_672_7).abs() < 1e-15);
        let two = PolicyOutput { mean: vec![0.5, 0.5], log_std: vec![0.0, 1.0], value: 0.0 };
        assert!((entropy(&two) - (2.0 * 1.418_938_533_204_672_7 + 1.0)).abs() < 1e-14);
        let wider = PolicyOutput { mean: vec![0.5], log_std: vec![0.3], value: 0.0 };
        assert!(entropy(&wider) > entropy(&one));
    }

    #[test]
    fn backward_without_forward_is_a_usage_error() {
        let p = small(0);
        let up = OutputGrads { mean: vec![], value: vec![], log_std: vec![0.0; 2] };
        assert!(matches!(p.backward(&Tape::default(), &up), Err(Error::Usage(_))));
    }

    fn fd_check(p: &MlpParams, obs: &[Vec<f64>], loss: impl Fn(&[PolicyOutput]) -> (f64, OutputGrads)) {
        let mut tape = Tape::default();
        let outs = p.forward_batch(obs, &mut tape).unwrap();
        let (_, up) = loss(&outs);
        let g = p.backward(&tape, &up).unwrap();
        let h = 1e-5;
        for k in 0..p.n_params() {
            let mut q = p.clone();
            q.theta[k] += h;
            let lp = loss(&q.forward_batch(obs, &mut Tape::default()).unwrap()).0;
            q.theta[k] -= 2.0 * h;
            let lm = loss(&q.forward_batch(obs, &mut Tape::default()).unwrap()).0;
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6);
            assert!(err < 1e-4, "param {k}: analytic {} vs fd {fd}", g[k]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        // Loss touching every output: Σ (mean·c) + value² + Σ log_std.
        let p = small(3);
        let obs: Vec<Vec<f64>> = (0..3).map(|r| (0..4).map(|i| ((r * 4 + i) as f64 * 0.7).sin()).collect()).collect();
        fd_check(&p, &obs, |outs| {
            let mut l = 0.0;
            let mut up = OutputGrads { mean: vec![], value: vec![], log_std: vec![0.0; 2] };
            for (r, o) in outs.iter().enumerate() {
                let c = [1.0 + r as f64, -0.5];
                l += o.mean[0] * c[0] + o.mean[1] * c[1] + o.value * o.value;
                up.mean.push(c.to_vec());
                up.value.push(2.0 * o.value);
            }
            l += outs[0].log_std.iter().map(|v| 3.0 * v).sum::<f64>();
            up.log_std = vec![3.0, 3.0];
            (l, up)
        });
    }

    #[test]
    fn heads_are_separated() {
        let p = small(5);
        let mut tape = Tape::default();
        let obs = vec![vec![0.1, 0.2, 0.3, 0.4]];
        p.forward_batch(&obs, &mut tape).unwrap();
        let up = OutputGrads { mean: vec![vec![0.0, 0.0]], value: vec![1.0], log_std: vec![0.0; 2] };
        let g = p.backward(&tape, &up).unwrap();
        assert!(g[p.mean_head_range()].iter().all(|v| *v == 0.0));
        assert!(g[p.log_std_range()].iter().all(|v| *v == 0.0));
        assert!(g[p.value_head_range()].iter().any(|v| *v != 0.0));
        let up = OutputGrads { mean: vec![vec![1.0, -1.0]], value: vec![0.0], log_std: vec![0.0; 2] };
        let g = p.backward(&tape, &up).unwrap();
        assert!(g[p.value_head_range()].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn adam_steps() {
        let mut x = vec![1.0, -2.0, 0.5];
        let mut s = AdamState::new(3, 0.01);
        s.step(&mut x, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(x, vec![1.0, -2.0, 0.5]);
        let mut x = vec![1.0, -2.0, 0.5];
        let mut s = AdamState::new(3, 0.01);
        s.step(&mut x, &[3.0, -0.2, 1e-3]).unwrap();
        for (a, b) in x.iter().zip([1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01]) {
            assert!((a - b).abs() < 1e-6);
        }
        // Two steps at lr differ from one step at 2·lr.
        let g = [0.4, -1.0, 2.0];
        let mut a = vec![0.0; 3];
        let mut sa = AdamState::new(3, 0.01);
        sa.step(&mut a, &g).unwrap();
        sa.step(&mut a, &g).unwrap();
        let mut b = vec![0.0; 3];
        AdamState::new(3, 0.02).step(&mut b, &g).unwrap();
        // With a constant gradient the bias-corrected moments are m̂ = g and
        // v̂ = g² at every step, so both routes move by 2·lr·g/(|g| + ε).
        for k in 0..3 {
            let one = g[k] / (g[k].abs() + 1e-8);
            assert!((a[k] + 2.0 * 0.01 * one).abs() < 1e-12);
            assert!((b[k] + 0.02 * one).abs() < 1e-12);
        }
        assert!(AdamState::new(3, 0.1).step(&mut b, &[f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn adam_differs_for_varying_gradients() {
        let mut a = vec![0.0];
        let mut sa = AdamState::new(1, 0.1);
        sa.step(&mut a, &[1.0]).unwrap();
        sa.step(&mut a, &[1.0]).unwrap();
        let mut b = vec![0.0];
        AdamState::new(1, 0.2).step(&mut b, &[1.0]).unwrap();
        let mut c = vec![0.0];
        let mut sc = AdamState::new(1, 0.1);
        sc.step(&mut c, &[1.0]).unwrap();
        sc.step(&mut c, &[0.25]).unwrap();
        // Hand recurrence for the second step with g = 0.25.
        let m = 0.9 * 0.1 + 0.1 * 0.25;
        let v = 0.999 * 0.001 + 0.001 * 0.0625;
        let step2 = 0.1 * (m / 0.19) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        let step1 = 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((c[0] + step1 + step2).abs() < 1e-12);
        assert!((c[0] - b[0]).abs() > 1e-3);
    }

    #[test]
    fn log_std_clamped_after_update() {
        let mut p = small(2);
        let mut st = AdamState::new(p.n_params(), 100.0);
        let mut g = vec![0.0; p.n_params()];
        for k in p.log_std_range() {
            g[k] = -1.0;
        }
        p.adam_update(&g, &mut st).unwrap();
        assert!(p.theta[p.log_std_range()].iter().all(|v| *v == LOG_STD_MAX));
    }

    #[test]
    fn serde_round_trip_is_bitwise() {
        let p = small(7);
        let text = serde_json::to_string(&p).unwrap();
        let mut q: MlpParams = serde_json::from_str(&text).unwrap();
        q.validate().unwrap();
        let x = [0.123456789, -3.3, 1e-7, 2.0];
        assert_eq!(p.forward(&x).unwrap(), q.forward(&x).unwrap());
        assert_eq!(p.theta, q.theta);
    }

    proptest! {
        #[test]
        fn mean_stays_in_range(seed in 0u64..1000, scale in 0.1f64..100.0) {
            let p = small(seed);
            let x: Vec<f64> = (0..4).map(|i| scale * ((seed as f64 + i as f64) * 1.3).cos()).collect();
            let o = p.forward(&x).unwrap();
            prop_assert!(o.mean.iter().all(|m| (MIN_WEIGHT..=MAX_WEIGHT).contains(m)));
            prop_assert_eq!(o, p.forward(&x).unwrap());
        }
    }
}
