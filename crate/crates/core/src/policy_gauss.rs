//! Diagonal-Gaussian policy trained by advantage-weighted likelihood.
//!
//! Two regression targets compete: dataset actions and actions drawn from
//! the policy itself. [`gated_awr_loss`] picks one target per step (or per
//! element) with a Bernoulli gate; [`deterministic_interp_loss`] blends both
//! with fixed weights and serves as the ablation baseline.

use std::f64::consts::PI;

use crate::critic::{clipped_exp_weight, Batch, CriticSet, HyperParams};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor_nn::{Activation, AdamVector, Matrix2D, Mlp, MlpGrads};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct GaussianPolicy {
    pub mean_net: Mlp,
    /// State-independent, clamped to `[LOG_STD_MIN, LOG_STD_MAX]` after every update.
    pub log_std: AdamVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSample {
    pub action: Vec<f64>,
    pub noise: Vec<f64>,
}

/// Gradients for the mean net and the log-std vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrads {
    pub mean: MlpGrads,
    pub log_std: Vec<f64>,
}

impl PolicyGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.mean.flatten();
        v.extend_from_slice(&self.log_std);
        v
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Closed-form diagonal-Gaussian log density.
pub fn diag_gaussian_log_prob(mean: &[f64], log_std: &[f64], a: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(a)
        .map(|((m, ls), x)| {
            let z = (x - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * (2.0 * PI).ln()
        })
        .sum()
}

impl GaussianPolicy {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let mut sizes = vec![state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(action_dim);
        Ok(Self {
            mean_net: Mlp::new(&sizes, Activation::Relu, rng)?,
            log_std: AdamVector::new(vec![0.0; action_dim]),
        })
    }

    pub fn from_parts(mean_net: Mlp, log_std: Vec<f64>) -> Result<Self> {
        if log_std.len() != mean_net.output_dim() {
            return Err(Error::shape("GaussianPolicy log_std", mean_net.output_dim(), log_std.len()));
        }
        let clamped = log_std.iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        Ok(Self {
            mean_net,
            log_std: AdamVector::new(clamped),
        })
    }

    pub fn action_dim(&self) -> usize {
        self.mean_net.output_dim()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.value.iter().map(|v| v.exp()).collect()
    }

    pub fn means(&self, states: &Matrix2D) -> Result<Matrix2D> {
        self.mean_net.predict(states)
    }

    pub fn log_prob(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        if a.len() != self.action_dim() {
            return Err(Error::shape("gaussian_log_prob action", self.action_dim(), a.len()));
        }
        let mean = self.mean_net.forward_one(s)?.0;
        Ok(diag_gaussian_log_prob(&mean, &self.log_std.value, a))
    }

    /// Reparameterized draw `μ(s) + σ ⊙ ε`, deterministic in `seed`.
    pub fn sample(&self, s: &[f64], seed: u64) -> Result<GaussianSample> {
        let mean = self.mean_net.forward_one(s)?.0;
        let mut rng = SplitMix64::new(seed);
        let noise: Vec<f64> = (0..mean.len()).map(|_| rng.normal()).collect();
        let action = mean
            .iter()
            .zip(&self.log_std.value)
            .zip(&noise)
            .map(|((m, ls), e)| m + ls.exp() * e)
            .collect();
        Ok(GaussianSample { action, noise })
    }

    /// One draw per row of `states`.
    pub fn sample_batch(&self, states: &Matrix2D, rng: &mut SplitMix64) -> Result<Matrix2D> {
        let mut out = self.means(states)?;
        let std = self.std();
        for r in 0..out.rows() {
            for (v, s) in out.row_mut(r).iter_mut().zip(&std) {
                *v += s * rng.normal();
            }
        }
        Ok(out)
    }

    pub fn apply_grads(&mut self, grads: &PolicyGrads, lr: f64) -> Result<()> {
        self.mean_net.adam_step(&grads.mean, lr)?;
        self.log_std.adam_step(&grads.log_std, lr)?;
        self.log_std
            .value
            .iter_mut()
            .for_each(|v| *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    /// One coin per update step.
    PerStep,
    /// One coin per minibatch element.
    PerElement,
}

impl std::str::FromStr for GateMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "per_step" | "step" => Ok(GateMode::PerStep),
            "per_element" | "element" => Ok(GateMode::PerElement),
            other => Err(format!("unknown gate mode `{other}` (per_step or per_element)")),
        }
    }
}

impl std::fmt::Display for GateMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GateMode::PerStep => "per_step",
            GateMode::PerElement => "per_element",
        })
    }
}

/// Realized Bernoulli gate. `true` selects the expansion (policy-sample) branch.
#[derive(Debug, Clone, PartialEq)]
pub struct GateRealization {
    pub mode: GateMode,
    pub draws: Vec<bool>,
    pub seed: u64,
}

impl GateRealization {
    pub fn draw(mode: GateMode, p: f64, batch_size: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let n = match mode {
            GateMode::PerStep => 1,
            GateMode::PerElement => batch_size,
        };
        Self {
            mode,
            draws: (0..n).map(|_| rng.bernoulli(p)).collect(),
            seed,
        }
    }

    pub fn per_step(expansion: bool) -> Self {
        Self {
            mode: GateMode::PerStep,
            draws: vec![expansion],
            seed: 0,
        }
    }

    pub fn per_element(draws: Vec<bool>) -> Self {
        Self {
            mode: GateMode::PerElement,
            draws,
            seed: 0,
        }
    }

    pub fn selects_expansion(&self, i: usize) -> bool {
        match self.mode {
            GateMode::PerStep => self.draws[0],
            GateMode::PerElement => self.draws[i],
        }
    }

    /// Fraction of draws selecting the expansion branch.
    pub fn value(&self) -> f64 {
        self.draws.iter().filter(|b| **b).count() as f64 / self.draws.len().max(1) as f64
    }

    pub fn any_expansion(&self) -> bool {
        self.draws.iter().any(|b| *b)
    }

    fn check(&self, n: usize) -> Result<()> {
        let expected = match self.mode {
            GateMode::PerStep => 1,
            GateMode::PerElement => n,
        };
        if self.draws.len() != expected {
            return Err(Error::shape("gate draws", expected, self.draws.len()));
        }
        Ok(())
    }
}

/// Detached regression targets and weights for both branches of the policy loss.
#[derive(Debug, Clone, PartialEq)]
pub struct AwrTargets {
    pub states: Matrix2D,
    pub data_actions: Matrix2D,
    pub data_weights: Vec<f64>,
    pub expansion_actions: Option<Matrix2D>,
    pub expansion_weights: Option<Vec<f64>>,
}

impl AwrTargets {
    /// Weights ω = min(exp(β(Q̂ − V)), ω_max) for dataset actions and, if given,
    /// for policy samples at the same states.
    pub fn build(
        batch: &Batch,
        expansion_actions: Option<Matrix2D>,
        critics: &CriticSet,
        hp: &HyperParams,
    ) -> Result<Self> {
        let v = critics.value(&batch.states)?;
        let weights = |q: Vec<f64>| -> Vec<f64> {
            q.iter()
                .zip(&v)
                .map(|(q, v)| clipped_exp_weight(q - v, hp.beta, hp.omega_max))
                .collect()
        };
        let data_q = critics.q_cropped_batch(&batch.states, &batch.actions, true)?;
        let expansion_weights = match &expansion_actions {
            Some(a) => Some(weights(critics.q_cropped_batch(&batch.states, a, true)?)),
            None => None,
        };
        Ok(Self {
            states: batch.states.clone(),
            data_actions: batch.actions.clone(),
            data_weights: weights(data_q),
            expansion_actions,
            expansion_weights,
        })
    }

    pub fn len(&self) -> usize {
        self.data_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data_weights.is_empty()
    }

    fn expansion(&self) -> Result<(&Matrix2D, &[f64])> {
        match (&self.expansion_actions, &self.expansion_weights) {
            (Some(a), Some(w)) => Ok((a, w)),
            _ => Err(Error::shape("expansion targets", "policy samples", "none")),
        }
    }
}

/// Loss `−Σ_i scale_i · log π(y_i | s_i)` with per-element targets `y_i`,
/// accumulated into one backward pass.
fn weighted_nll(
    policy: &GaussianPolicy,
    states: &Matrix2D,
    terms: &[(&Matrix2D, &[f64], f64)],
) -> Result<(f64, PolicyGrads)> {
    let n = states.rows();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let (means, tape) = policy.mean_net.forward(states)?;
    let d = policy.action_dim();
    let log_std = &policy.log_std.value;
    let inv_var: Vec<f64> = log_std.iter().map(|ls| (-2.0 * ls).exp()).collect();
    let mut mean_grad = Matrix2D::zeros(n, d);
    let mut log_std_grad = vec![0.0; d];
    let mut loss = 0.0;
    for &(targets, weights, scale) in terms {
        if targets.shape() != (n, d) || weights.len() != n {
            return Err(Error::shape("policy targets", format!("{n}x{d}"), format!("{:?}", targets.shape())));
        }
        for i in 0..n {
            let c = scale * weights[i] / n as f64;
            if c == 0.0 {
                continue;
            }
            let mu = means.row(i);
            let y = targets.row(i);
            loss -= c * diag_gaussian_log_prob(mu, log_std, y);
            let g = mean_grad.row_mut(i);
            for j in 0..d {
                let diff = y[j] - mu[j];
                g[j] -= c * diff * inv_var[j];
                log_std_grad[j] -= c * (diff * diff * inv_var[j] - 1.0);
            }
        }
    }
    let mean = policy.mean_net.backward(&tape, &mean_grad)?;
    Ok((
        loss,
        PolicyGrads {
            mean,
            log_std: log_std_grad,
        },
    ))
}

/// Advantage-weighted likelihood on a single branch: `−mean_i ω_i log π(y_i | s_i)`.
pub fn branch_loss(
    policy: &GaussianPolicy,
    states: &Matrix2D,
    actions: &Matrix2D,
    weights: &[f64],
) -> Result<(f64, PolicyGrads)> {
    weighted_nll(policy, states, &[(actions, weights, 1.0)])
}

/// Gated loss on prepared targets.
pub fn gated_awr_loss_on(
    policy: &GaussianPolicy,
    targets: &AwrTargets,
    gate: &GateRealization,
) -> Result<(f64, PolicyGrads)> {
    let n = targets.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    gate.check(n)?;
    match gate.mode {
        GateMode::PerStep => {
            if gate.draws[0] {
                let (a, w) = targets.expansion()?;
                branch_loss(policy, &targets.states, a, w)
            } else {
                branch_loss(policy, &targets.states, &targets.data_actions, &targets.data_weights)
            }
        }
        GateMode::PerElement => {
            if !gate.any_expansion() {
                return branch_loss(policy, &targets.states, &targets.data_actions, &targets.data_weights);
            }
            let (exp_a, exp_w) = targets.expansion()?;
            let mut actions = targets.data_actions.clone();
            let mut weights = targets.data_weights.clone();
            for i in 0..n {
                if gate.draws[i] {
                    actions.row_mut(i).copy_from_slice(exp_a.row(i));
                    weights[i] = exp_w[i];
                }
            }
            branch_loss(policy, &targets.states, &actions, &weights)
        }
    }
}

/// Both branches blended with fixed weights `(1 − p, p)` at every step.
pub fn deterministic_interp_loss_on(
    policy: &GaussianPolicy,
    targets: &AwrTargets,
    p: f64,
) -> Result<(f64, PolicyGrads)> {
    if targets.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let data = (&targets.data_actions, targets.data_weights.as_slice(), 1.0 - p);
    if p == 0.0 {
        return weighted_nll(policy, &targets.states, &[data]);
    }
    let (exp_a, exp_w) = targets.expansion()?;
    weighted_nll(policy, &targets.states, &[data, (exp_a, exp_w, p)])
}

/// Gated loss; draws fresh policy samples only when the gate needs them.
pub fn gated_awr_loss(
    batch: &Batch,
    policy: &GaussianPolicy,
    critics: &CriticSet,
    hp: &HyperParams,
    gate: &GateRealization,
    rng: &mut SplitMix64,
) -> Result<(f64, PolicyGrads)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let samples = if gate.any_expansion() {
        Some(policy.sample_batch(&batch.states, rng)?)
    } else {
        None
    };
    let targets = AwrTargets::build(batch, samples, critics, hp)?;
    gated_awr_loss_on(policy, &targets, gate)
}

pub fn deterministic_interp_loss(
    batch: &Batch,
    policy: &GaussianPolicy,
    critics: &CriticSet,
    hp: &HyperParams,
    rng: &mut SplitMix64,
) -> Result<(f64, PolicyGrads)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let samples = if hp.p > 0.0 {
        Some(policy.sample_batch(&batch.states, rng)?)
    } else {
        None
    };
    let targets = AwrTargets::build(batch, samples, critics, hp)?;
    deterministic_interp_loss_on(policy, &targets, hp.p)
}
