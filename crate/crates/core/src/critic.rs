//! Value and twin-Q learning.
//!
//! The value net is regressed onto an interpolation of two targets: the
//! τ-expectile of target-Q on dataset actions, and a plain squared error on
//! target-Q at actions sampled from the current policy. `p` weights the
//! second (support-expanding) term.

use crate::envs_data::{EnvId, OfflineDataset};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor_nn::{Activation, Matrix2D, Mlp, MlpGrads};

/// Scalar knobs shared by the value, Q and policy objectives.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    /// Expansion weight in the value loss and gate probability in the policy loss.
    pub p: f64,
    pub tau: f64,
    pub beta: f64,
    /// Classifier-free guidance weight.
    pub w: f64,
    pub gamma: f64,
    pub rho: f64,
    pub lr_v: f64,
    pub lr_q: f64,
    pub lr_pi: f64,
    pub batch_size: usize,
    pub omega_max: f64,
    pub flow_steps: usize,
    pub token_dropout: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            p: 0.3,
            tau: 0.7,
            beta: 3.0,
            w: 1.0,
            gamma: 0.99,
            rho: 0.995,
            lr_v: 3e-4,
            lr_q: 3e-4,
            lr_pi: 3e-4,
            batch_size: 256,
            omega_max: 100.0,
            flow_steps: 10,
            token_dropout: 0.10,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(key, what))
            }
        };
        check((0.0..=1.0).contains(&self.p), "p", "must lie in [0, 1]")?;
        check(self.tau > 0.0 && self.tau < 1.0, "tau", "must lie in (0, 1)")?;
        check(self.beta >= 0.0 && self.beta.is_finite(), "beta", "must be >= 0")?;
        check(self.w >= 0.0 && self.w.is_finite(), "w", "must be >= 0")?;
        check((0.0..1.0).contains(&self.gamma), "gamma", "must lie in [0, 1)")?;
        check(self.rho > 0.0 && self.rho < 1.0, "rho", "must lie in (0, 1)")?;
        for (key, lr) in [("lr_v", self.lr_v), ("lr_q", self.lr_q), ("lr_pi", self.lr_pi)] {
            check(lr >= 0.0 && lr.is_finite(), key, "must be >= 0")?;
        }
        check(self.batch_size >= 1, "batch_size", "must be >= 1")?;
        check(self.omega_max > 0.0, "omega_max", "must be > 0")?;
        check(self.flow_steps >= 1, "flow_steps", "must be >= 1")?;
        check(
            (0.0..=1.0).contains(&self.token_dropout),
            "token_dropout",
            "must lie in [0, 1]",
        )?;
        Ok(())
    }
}

/// Column-oriented minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Matrix2D,
    pub actions: Matrix2D,
    pub rewards: Vec<f64>,
    pub next_states: Matrix2D,
    pub dones: Vec<bool>,
}

impl Batch {
    pub fn from_indices(ds: &OfflineDataset, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let (sd, ad) = (ds.state_dim(), ds.action_dim());
        let mut states = Vec::with_capacity(idx.len() * sd);
        let mut actions = Vec::with_capacity(idx.len() * ad);
        let mut next_states = Vec::with_capacity(idx.len() * sd);
        let mut rewards = Vec::with_capacity(idx.len());
        let mut dones = Vec::with_capacity(idx.len());
        for &i in idx {
            let t = &ds.transitions[i];
            states.extend_from_slice(&t.state);
            actions.extend_from_slice(&t.action);
            next_states.extend_from_slice(&t.next_state);
            rewards.push(t.reward);
            dones.push(t.done);
        }
        Ok(Self {
            states: Matrix2D::from_vec(idx.len(), sd, states)?,
            actions: Matrix2D::from_vec(idx.len(), ad, actions)?,
            rewards,
            next_states: Matrix2D::from_vec(idx.len(), sd, next_states)?,
            dones,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Value net, live twin Q nets and their Polyak-averaged targets.
#[derive(Debug, Clone)]
pub struct CriticSet {
    pub v_net: Mlp,
    pub q_nets: [Mlp; 2],
    pub target_q_nets: [Mlp; 2],
    pub v_max: f64,
}

/// Q-magnitude cap: `2 R_max / (1 − γ)`, or `2 R_max` for single-step bandits.
pub fn v_max_for(env: EnvId, gamma: f64) -> f64 {
    if env.is_bandit() {
        2.0 * env.r_max()
    } else {
        2.0 * env.r_max() / (1.0 - gamma)
    }
}

impl CriticSet {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        v_max: f64,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let sizes = |input: usize| -> Vec<usize> {
            let mut s = vec![input];
            s.extend_from_slice(hidden);
            s.push(1);
            s
        };
        let v_net = Mlp::new(&sizes(state_dim), Activation::Relu, rng)?;
        let q1 = Mlp::new(&sizes(state_dim + action_dim), Activation::Relu, rng)?;
        let q2 = Mlp::new(&sizes(state_dim + action_dim), Activation::Relu, rng)?;
        Self::from_nets(v_net, q1, q2, v_max)
    }

    /// Targets start as copies of the live twins.
    pub fn from_nets(v_net: Mlp, q1: Mlp, q2: Mlp, v_max: f64) -> Result<Self> {
        if q1.layer_sizes() != q2.layer_sizes() || q1.output_dim() != 1 || v_net.output_dim() != 1 {
            return Err(Error::shape(
                "CriticSet::from_nets",
                "scalar-output twins of identical shape",
                format!("{:?} / {:?}", q1.layer_sizes(), q2.layer_sizes()),
            ));
        }
        let target_q_nets = [q1.clone(), q2.clone()];
        Ok(Self {
            v_net,
            q_nets: [q1, q2],
            target_q_nets,
            v_max,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.v_net.input_dim()
    }

    pub fn value(&self, states: &Matrix2D) -> Result<Vec<f64>> {
        Ok(self.v_net.predict(states)?.into_vec())
    }

    /// Twin-min Q, cropped to `[−v_max, v_max]`, for each row.
    pub fn q_cropped_batch(&self, states: &Matrix2D, actions: &Matrix2D, use_target: bool) -> Result<Vec<f64>> {
        let input = Matrix2D::hconcat(&[states, actions])?;
        let nets = if use_target {
            &self.target_q_nets
        } else {
            &self.q_nets
        };
        let q1 = nets[0].predict(&input)?;
        let q2 = nets[1].predict(&input)?;
        Ok(q1
            .data()
            .iter()
            .zip(q2.data())
            .map(|(a, b)| a.min(*b).clamp(-self.v_max, self.v_max))
            .collect())
    }

    pub fn q_cropped(&self, s: &[f64], a: &[f64], use_target: bool) -> Result<f64> {
        let sm = Matrix2D::from_vec(1, s.len(), s.to_vec())?;
        let am = Matrix2D::from_vec(1, a.len(), a.to_vec())?;
        Ok(self.q_cropped_batch(&sm, &am, use_target)?[0])
    }

    /// Advantage `Q_target(s, a) − V(s)` per row.
    pub fn advantages(&self, states: &Matrix2D, actions: &Matrix2D) -> Result<Vec<f64>> {
        let q = self.q_cropped_batch(states, actions, true)?;
        let v = self.value(states)?;
        Ok(q.iter().zip(&v).map(|(q, v)| q - v).collect())
    }

    pub fn advantage_weight(&self, s: &[f64], a: &[f64], beta: f64, omega_max: f64) -> Result<f64> {
        let q = self.q_cropped(s, a, true)?;
        let v = self.v_net.forward_one(s)?.0[0];
        Ok(clipped_exp_weight(q - v, beta, omega_max))
    }

    /// `θ̂ ← ρ θ̂ + (1 − ρ) θ` for both twins.
    pub fn polyak_update(&mut self, rho: f64) -> Result<()> {
        for (target, live) in self.target_q_nets.iter_mut().zip(&self.q_nets) {
            target.polyak_from(live, rho)?;
        }
        Ok(())
    }
}

/// `|τ − 1(u < 0)| · u²`.
pub fn expectile_loss(u: f64, tau: f64) -> f64 {
    let weight = if u < 0.0 { 1.0 - tau } else { tau };
    weight * u * u
}

/// `min(exp(β·A), ω_max)`, evaluated without overflow.
pub fn clipped_exp_weight(advantage: f64, beta: f64, omega_max: f64) -> f64 {
    let z = beta * advantage;
    if z >= omega_max.ln() {
        omega_max
    } else {
        z.exp()
    }
}

/// One reweighting step towards the τ-expectile: the weighted mean of
/// `samples` under the asymmetric weights induced by the current guess `v`.
pub fn expectile_step(samples: &[f64], tau: f64, v: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for &q in samples {
        let w = if q < v { 1.0 - tau } else { tau };
        num += w * q;
        den += w;
    }
    num / den
}

/// Fixed point of [`expectile_step`]; reached in finitely many steps since
/// the weights only change when `v` crosses a sample.
pub fn expectile_fixed_point(samples: &[f64], tau: f64) -> f64 {
    assert!(!samples.is_empty(), "expectile of an empty sample set");
    let mut v = samples.iter().sum::<f64>() / samples.len() as f64;
    for _ in 0..(4 * samples.len() + 64) {
        let next = expectile_step(samples, tau, v);
        if next == v {
            break;
        }
        v = next;
    }
    v
}

#[derive(Debug, Clone)]
pub struct ValueLossOutput {
    pub loss: f64,
    pub grads: MlpGrads,
    /// Cropped target-Q at the dataset actions.
    pub data_q: Vec<f64>,
    /// Cropped target-Q at the policy samples, when `p > 0`.
    pub policy_q: Option<Vec<f64>>,
}

/// Interpolated value objective and its gradient with respect to the value net.
///
/// `policy_samples` must hold one action per batch row, drawn from the current
/// policy at that row's state; it may be `None` only when `p == 0`.
pub fn interpolated_value_loss(
    batch: &Batch,
    policy_samples: Option<&Matrix2D>,
    critics: &CriticSet,
    hp: &HyperParams,
) -> Result<ValueLossOutput> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let data_q = critics.q_cropped_batch(&batch.states, &batch.actions, true)?;
    let policy_q = match policy_samples {
        Some(samples) if hp.p > 0.0 => {
            if samples.rows() != n {
                return Err(Error::shape("policy samples", n, samples.rows()));
            }
            Some(critics.q_cropped_batch(&batch.states, samples, true)?)
        }
        None if hp.p > 0.0 => {
            return Err(Error::shape("policy samples", format!("{n} rows"), "none"));
        }
        _ => None,
    };

    let (v_out, tape) = critics.v_net.forward(&batch.states)?;
    let v = v_out.data();
    let inv_n = 1.0 / n as f64;
    let mut grad = vec![0.0; n];
    let mut data_term = 0.0;
    for i in 0..n {
        let u = data_q[i] - v[i];
        let w = if u < 0.0 { 1.0 - hp.tau } else { hp.tau };
        data_term += w * u * u;
        grad[i] -= (1.0 - hp.p) * 2.0 * w * u * inv_n;
    }
    let mut loss = (1.0 - hp.p) * data_term * inv_n;
    if let Some(pq) = &policy_q {
        let mut policy_term = 0.0;
        for i in 0..n {
            let u = pq[i] - v[i];
            policy_term += u * u;
            grad[i] -= hp.p * 2.0 * u * inv_n;
        }
        loss += hp.p * policy_term * inv_n;
    }
    let grads = critics
        .v_net
        .backward(&tape, &Matrix2D::from_vec(n, 1, grad)?)?;
    Ok(ValueLossOutput {
        loss,
        grads,
        data_q,
        policy_q,
    })
}

/// Bellman regression of both live twins onto `r + γ (1 − done) V(s′)`.
///
/// The loss averages over the batch and over the two twins.
pub fn bellman_q_loss(batch: &Batch, critics: &CriticSet, hp: &HyperParams) -> Result<(f64, [MlpGrads; 2])> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let next_v = if batch.dones.iter().all(|d| *d) {
        vec![0.0; n]
    } else {
        critics.value(&batch.next_states)?
    };
    let targets: Vec<f64> = (0..n)
        .map(|i| {
            let cont = if batch.dones[i] { 0.0 } else { 1.0 };
            batch.rewards[i] + hp.gamma * cont * next_v[i]
        })
        .collect();
    let input = Matrix2D::hconcat(&[&batch.states, &batch.actions])?;
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(2);
    for net in &critics.q_nets {
        let (q, tape) = net.forward(&input)?;
        let mut g = vec![0.0; n];
        for i in 0..n {
            let err = targets[i] - q.data()[i];
            loss += 0.5 * err * err * inv_n;
            g[i] = -err * inv_n;
        }
        grads.push(net.backward(&tape, &Matrix2D::from_vec(n, 1, g)?)?);
    }
    let g2 = grads.pop().expect("two twins");
    let g1 = grads.pop().expect("two twins");
    Ok((loss, [g1, g2]))
}
