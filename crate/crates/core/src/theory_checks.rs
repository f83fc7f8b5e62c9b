//! Executable checks of the value-safety bound on tabular MDPs, and of the
//! gradient identities relating gated and blended policy losses.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::policy_gauss::{
    branch_loss, deterministic_interp_loss_on, gated_awr_loss_on, AwrTargets, GateRealization, GaussianPolicy,
};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `rewards[s][a]`.
    pub rewards: Vec<Vec<f64>>,
    /// `transitions[s][a][s']`.
    pub transitions: Vec<Vec<Vec<f64>>>,
    pub gamma: f64,
    /// Actions present in the dataset at each state.
    pub support: Vec<Vec<bool>>,
    pub r_max: f64,
}

impl TabularMdp {
    pub fn new(
        rewards: Vec<Vec<f64>>,
        transitions: Vec<Vec<Vec<f64>>>,
        gamma: f64,
        support: Vec<Vec<bool>>,
    ) -> Result<Self> {
        let n_states = rewards.len();
        let n_actions = rewards.first().map_or(0, |r| r.len());
        let r_max = rewards.iter().flatten().fold(0.0f64, |m, r| m.max(r.abs()));
        let mdp = Self {
            n_states,
            n_actions,
            rewards,
            transitions,
            gamma,
            support,
            r_max,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(Error::config("mdp", "needs at least one state and one action"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config("gamma", "must lie in [0, 1)"));
        }
        for s in 0..self.n_states {
            if self.rewards[s].len() != self.n_actions
                || self.transitions[s].len() != self.n_actions
                || self.support[s].len() != self.n_actions
            {
                return Err(Error::shape("mdp tables", self.n_actions, s));
            }
            if !self.support[s].iter().any(|b| *b) {
                return Err(Error::config("support", format!("state {s} has no supported action")));
            }
            for row in &self.transitions[s] {
                let total: f64 = row.iter().sum();
                if row.len() != self.n_states || (total - 1.0).abs() > 1e-12 || row.iter().any(|p| *p < 0.0) {
                    return Err(Error::config("transitions", format!("row at state {s} is not a distribution")));
                }
            }
        }
        Ok(())
    }

    pub fn v_max(&self) -> f64 {
        2.0 * self.r_max / (1.0 - self.gamma)
    }

    /// `r(s, a) + γ Σ_s' P(s'|s, a) V(s')`.
    pub fn backup(&self, v: &[f64]) -> Vec<Vec<f64>> {
        (0..self.n_states)
            .map(|s| {
                (0..self.n_actions)
                    .map(|a| {
                        let next: f64 = self.transitions[s][a].iter().zip(v).map(|(p, v)| p * v).sum();
                        self.rewards[s][a] + self.gamma * next
                    })
                    .collect()
            })
            .collect()
    }
}

/// Value iteration to sup-norm residual below `tol`; returns `(V*, Q*)`.
pub fn optimal_values(mdp: &TabularMdp, tol: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut v = vec![0.0; mdp.n_states];
    loop {
        let q = mdp.backup(&v);
        let next: Vec<f64> = q.iter().map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect();
        let residual = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if residual < tol * (1.0 - mdp.gamma) {
            let q = mdp.backup(&v);
            return (v, q);
        }
    }
}

/// τ-expectile of the uniform distribution on `samples`, by bisection on the
/// monotone first-order condition `τ Σ(q − v)₊ = (1 − τ) Σ(v − q)₊`.
pub fn expectile_bisect(samples: &[f64], tau: f64) -> f64 {
    assert!(!samples.is_empty(), "expectile of an empty set");
    let lo0 = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi0 = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let slope = |v: f64| -> f64 {
        samples
            .iter()
            .map(|&q| if q >= v { tau * (q - v) } else { -(1.0 - tau) * (v - q) })
            .sum()
    };
    let (mut lo, mut hi) = (lo0, hi0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if slope(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Both ends are within one ulp of the root; pick the smaller residual.
    if slope(lo).abs() <= slope(hi).abs() {
        lo
    } else {
        hi
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryParams {
    pub delta_tau: f64,
    pub delta_sub: f64,
    /// Probability that the supported maximum is realized; 1 by construction here.
    pub eta: f64,
    pub v_max: f64,
    pub v_star: Vec<f64>,
    pub delta_tau_per_state: Vec<f64>,
    pub delta_sub_per_state: Vec<f64>,
}

fn supported(mdp: &TabularMdp, s: usize, row: &[f64]) -> Vec<f64> {
    row.iter()
        .zip(&mdp.support[s])
        .filter(|(_, b)| **b)
        .map(|(q, _)| *q)
        .collect()
}

/// Expectile gap and support gap of `Q*`, per state and minimized over states.
pub fn measure_gaps(mdp: &TabularMdp, q_star: &[Vec<f64>], tau: f64) -> TheoryParams {
    let mut dt = Vec::with_capacity(mdp.n_states);
    let mut ds = Vec::with_capacity(mdp.n_states);
    for s in 0..mdp.n_states {
        let sup = supported(mdp, s, &q_star[s]);
        let max_sup = sup.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let max_all = q_star[s].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        dt.push((max_sup - expectile_bisect(&sup, tau)).max(0.0));
        ds.push((max_all - max_sup).max(0.0));
    }
    let v_star = q_star
        .iter()
        .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    TheoryParams {
        delta_tau: dt.iter().cloned().fold(f64::INFINITY, f64::min),
        delta_sub: ds.iter().cloned().fold(f64::INFINITY, f64::min),
        eta: 1.0,
        v_max: mdp.v_max(),
        v_star,
        delta_tau_per_state: dt,
        delta_sub_per_state: ds,
    }
}

/// `(δ_τ + δ_sub) / (V_max − V*(s) + δ_τ + δ_sub)`, clamped to [0, 1].
pub fn p_bound_value(delta_tau: f64, delta_sub: f64, v_max: f64, v_star: f64) -> f64 {
    let d = delta_tau + delta_sub;
    if d <= 0.0 {
        return 0.0;
    }
    let denom = v_max - v_star + d;
    if denom <= d {
        return 1.0;
    }
    (d / denom).clamp(0.0, 1.0)
}

pub fn p_bound(tp: &TheoryParams, state: usize) -> f64 {
    p_bound_value(tp.delta_tau, tp.delta_sub, tp.v_max, tp.v_star[state])
}

/// Smallest bound over all states: a `p` safe everywhere.
pub fn p_bound_min(tp: &TheoryParams) -> f64 {
    (0..tp.v_star.len()).map(|s| p_bound(tp, s)).fold(1.0, f64::min)
}

/// Policy that probes the value iteration's policy term.
#[derive(Debug, Clone, PartialEq)]
pub enum Probe {
    /// Fixed per-state action distribution.
    Fixed(Vec<Vec<f64>>),
    /// All mass on the action with the largest cropped Q at the current iterate,
    /// unsupported actions included.
    Adversarial,
}

/// How unsupported (out-of-dataset) actions are valued during iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OodValue {
    /// Worst case: the crop ceiling `V_max`.
    Ceiling,
    /// The true Bellman backup (an oracle critic).
    Backup,
}

/// Interpolated value iteration
/// `V_{k+1}(s) = (1 − p)·E^τ_supported[Q_k(s, ·)] + p·E_probe[Q_k(s, ·)]`,
/// where `Q_k` is the backup of `V_k` cropped at `±V_max`. Returns `V_0 … V_iters`.
pub fn tabular_isep_vi(
    mdp: &TabularMdp,
    tau: f64,
    p: f64,
    probe: &Probe,
    ood: OodValue,
    v0: &[f64],
    iters: usize,
) -> Vec<Vec<f64>> {
    let v_max = mdp.v_max();
    let mut trace = Vec::with_capacity(iters + 1);
    trace.push(v0.to_vec());
    for _ in 0..iters {
        let v = trace.last().expect("non-empty trace");
        let backup = mdp.backup(v);
        let next = (0..mdp.n_states)
            .map(|s| {
                let q: Vec<f64> = (0..mdp.n_actions)
                    .map(|a| {
                        if !mdp.support[s][a] && ood == OodValue::Ceiling {
                            v_max
                        } else {
                            backup[s][a].clamp(-v_max, v_max)
                        }
                    })
                    .collect();
                let in_sample = expectile_bisect(&supported(mdp, s, &q), tau);
                let probe_term = match probe {
                    Probe::Fixed(dist) => dist[s].iter().zip(&q).map(|(w, q)| w * q).sum(),
                    Probe::Adversarial => q.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                };
                (1.0 - p) * in_sample + p * probe_term
            })
            .collect();
        trace.push(next);
    }
    trace
}

/// Pessimistic start `−R_max / (1 − γ)`, a lower bound on every value.
pub fn pessimistic_init(mdp: &TabularMdp) -> Vec<f64> {
    vec![-mdp.r_max / (1.0 - mdp.gamma); mdp.n_states]
}

/// Random instance: 4–8 states, 3–6 actions, rewards uniform in [−1, 1].
///
/// The dataset hides the optimal action at every state, and each other
/// action with probability 0.5 while keeping at least two supported.
pub fn random_mdp(seed: u64, gamma: f64) -> Result<TabularMdp> {
    let mut rng = SplitMix64::new(seed);
    let n_states = 4 + rng.below(5);
    let n_actions = 3 + rng.below(4);
    let rewards: Vec<Vec<f64>> = (0..n_states)
        .map(|_| (0..n_actions).map(|_| rng.uniform(-1.0, 1.0)).collect())
        .collect();
    let transitions: Vec<Vec<Vec<f64>>> = (0..n_states)
        .map(|_| {
            (0..n_actions)
                .map(|_| {
                    let raw: Vec<f64> = (0..n_states).map(|_| rng.next_f64() + 1e-3).collect();
                    let total: f64 = raw.iter().sum();
                    let mut row: Vec<f64> = raw.iter().map(|x| x / total).collect();
                    // Put the rounding residue on the last entry so rows sum to 1 exactly.
                    let head: f64 = row[..n_states - 1].iter().sum();
                    row[n_states - 1] = 1.0 - head;
                    row
                })
                .collect()
        })
        .collect();
    let all = vec![vec![true; n_actions]; n_states];
    let full = TabularMdp::new(rewards.clone(), transitions.clone(), gamma, all)?;
    let (_, q_star) = optimal_values(&full, 1e-13);
    let support = q_star
        .iter()
        .map(|row| {
            let best = argmax(row);
            let mut mask: Vec<bool> = (0..n_actions).map(|a| a != best && !rng.bernoulli(0.5)).collect();
            let mut others: Vec<usize> = (0..n_actions).filter(|a| *a != best).collect();
            while mask.iter().filter(|b| **b).count() < 2 {
                let pick = others.remove(rng.below(others.len()));
                mask[pick] = true;
            }
            mask
        })
        .collect();
    TabularMdp::new(rewards, transitions, gamma, support)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceReport {
    pub instance: usize,
    pub seed: u64,
    pub delta_tau: f64,
    pub delta_sub: f64,
    pub p_bound_min: f64,
    /// `(iteration, state)` pairs with `V̂ > V* + tol` at `p = p_bound_min`.
    pub violations: usize,
    /// Largest `V̂ − V*` seen at `p = p_bound_min` (negative when safe).
    pub max_excess: f64,
    /// Whether running at `p_bound_min + 0.2` ever overshot `V*`. Descriptive only.
    pub above_bound_overshoots: bool,
}

pub const THEORY_HEADER: &str = "instance,seed,delta_tau,delta_sub,p_bound_min,violations";

#[derive(Debug, Clone, PartialEq)]
pub struct TheoremSweepConfig {
    pub instances: usize,
    pub seed: u64,
    pub tau: f64,
    pub gamma: f64,
    pub iters: usize,
    pub tol: f64,
}

impl Default for TheoremSweepConfig {
    fn default() -> Self {
        Self {
            instances: 50,
            seed: 0,
            tau: 0.7,
            gamma: 0.9,
            iters: 300,
            tol: 1e-9,
        }
    }
}

fn max_excess(trace: &[Vec<f64>], v_star: &[f64]) -> f64 {
    trace
        .iter()
        .flat_map(|v| v.iter().zip(v_star).map(|(a, b)| a - b))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Run the bound check on `instances` random MDPs with positive measured gaps.
/// Instances whose gaps come out zero are skipped; seeds are reported.
pub fn theorem_sweep(cfg: &TheoremSweepConfig) -> Result<Vec<InstanceReport>> {
    let mut reports = Vec::with_capacity(cfg.instances);
    let mut seed = cfg.seed;
    while reports.len() < cfg.instances {
        let mdp = random_mdp(seed, cfg.gamma)?;
        let (_, q_star) = optimal_values(&mdp, 1e-13);
        let tp = measure_gaps(&mdp, &q_star, cfg.tau);
        if tp.delta_tau > 0.0 && tp.delta_sub > 0.0 {
            let p = p_bound_min(&tp);
            let v0 = pessimistic_init(&mdp);
            let trace = tabular_isep_vi(&mdp, cfg.tau, p, &Probe::Adversarial, OodValue::Ceiling, &v0, cfg.iters);
            let worst = max_excess(&trace, &tp.v_star);
            let violations = trace
                .iter()
                .flat_map(|v| v.iter().zip(&tp.v_star).map(|(a, b)| a - b))
                .filter(|d| *d > cfg.tol)
                .count();
            let above = (p + 0.2).min(1.0);
            let trace_above =
                tabular_isep_vi(&mdp, cfg.tau, above, &Probe::Adversarial, OodValue::Ceiling, &v0, cfg.iters);
            let worst_above = max_excess(&trace_above, &tp.v_star);
            reports.push(InstanceReport {
                instance: reports.len(),
                seed,
                delta_tau: tp.delta_tau,
                delta_sub: tp.delta_sub,
                p_bound_min: p,
                violations,
                max_excess: worst,
                above_bound_overshoots: worst_above > cfg.tol,
            });
        }
        seed = seed.wrapping_add(1);
    }
    Ok(reports)
}

pub fn theory_csv(reports: &[InstanceReport]) -> String {
    let mut out = String::from(THEORY_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.instance, r.seed, r.delta_tau, r.delta_sub, r.p_bound_min, r.violations
        );
    }
    out
}

/// Monte-Carlo comparison of gated and blended gradients on frozen targets.
#[derive(Debug, Clone, PartialEq)]
pub struct GateIdentityReport {
    /// Relative error of the mean gated gradient against the blended gradient.
    pub expectation_rel_err: f64,
    /// Monte-Carlo trace variance of the gated gradient.
    pub variance_mc: f64,
    /// `p (1 − p) ‖∇L_D − ∇L_π‖²`.
    pub variance_formula: f64,
    pub variance_rel_err: f64,
    /// Draws whose gradient was not bit-identical to one of the two branch gradients.
    pub branch_mismatches: usize,
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(f64::MIN_POSITIVE)
}

/// Draw `n_draws` per-step gates with probability `p` and recompute the gated
/// gradient for each.
pub fn gate_identity_check(
    policy: &GaussianPolicy,
    targets: &AwrTargets,
    p: f64,
    n_draws: usize,
    seed: u64,
) -> Result<GateIdentityReport> {
    let exp_actions = targets
        .expansion_actions
        .as_ref()
        .ok_or_else(|| Error::config("targets", "expansion branch required"))?;
    let exp_weights = targets.expansion_weights.as_ref().expect("weights accompany actions");
    let g_data = branch_loss(policy, &targets.states, &targets.data_actions, &targets.data_weights)?.1.flatten();
    let g_pi = branch_loss(policy, &targets.states, exp_actions, exp_weights)?.1.flatten();
    let g_det = deterministic_interp_loss_on(policy, targets, p)?.1.flatten();

    let dim = g_data.len();
    let mut rng = SplitMix64::new(seed);
    let mut sum = vec![0.0; dim];
    let mut sum_sq = 0.0;
    let mut mismatches = 0;
    for _ in 0..n_draws {
        let gate = GateRealization::per_step(rng.bernoulli(p));
        let g = gated_awr_loss_on(policy, targets, &gate)?.1.flatten();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if bits(&g) != bits(&g_data) && bits(&g) != bits(&g_pi) {
            mismatches += 1;
        }
        for (s, x) in sum.iter_mut().zip(&g) {
            *s += x;
        }
        sum_sq += g.iter().map(|x| x * x).sum::<f64>();
    }
    let n = n_draws as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let variance_mc = (sum_sq / n - mean.iter().map(|m| m * m).sum::<f64>()).max(0.0);
    let gap: f64 = g_data.iter().zip(&g_pi).map(|(a, b)| (a - b).powi(2)).sum();
    let variance_formula = p * (1.0 - p) * gap;
    let variance_rel_err = if variance_formula == 0.0 {
        variance_mc
    } else {
        (variance_mc - variance_formula).abs() / variance_formula
    };
    Ok(GateIdentityReport {
        expectation_rel_err: rel_err(&mean, &g_det),
        variance_mc,
        variance_formula,
        variance_rel_err,
        branch_mismatches: mismatches,
    })
}
