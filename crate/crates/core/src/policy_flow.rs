//! Conditional flow-matching policy with optimality tokens and
//! classifier-free guidance.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::critic::{Batch, CriticSet, HyperParams};
use crate::error::{Error, Result};
use crate::policy_gauss::GateRealization;
use crate::rng::SplitMix64;
use crate::tensor_nn::{Activation, Matrix2D, Mlp, MlpGrads};

pub const TIME_FEATURES: usize = 3;
pub const TOKEN_FEATURES: usize = 3;

/// Optimality token. One-hot order is `[o=0, o=1, ∅]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Zero,
    One,
    Null,
}

impl Token {
    pub fn one_hot(self) -> [f64; TOKEN_FEATURES] {
        match self {
            Token::Zero => [1.0, 0.0, 0.0],
            Token::One => [0.0, 1.0, 0.0],
            Token::Null => [0.0, 0.0, 1.0],
        }
    }

    pub fn from_advantage(advantage: f64) -> Self {
        if advantage >= 0.0 {
            Token::One
        } else {
            Token::Zero
        }
    }
}

/// Which conditional drives the policy samples used for support expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpandToken {
    /// o=1 with the configured guidance weight.
    Guided,
    /// Plain o=1 conditional (w = 1).
    One,
    /// Unconditioned velocity (w = 0).
    Null,
}

impl ExpandToken {
    pub fn guidance(self, w: f64) -> f64 {
        match self {
            ExpandToken::Guided => w,
            ExpandToken::One => 1.0,
            ExpandToken::Null => 0.0,
        }
    }
}

impl FromStr for ExpandToken {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "guided" => Ok(ExpandToken::Guided),
            "one" | "1" => Ok(ExpandToken::One),
            "null" | "none" => Ok(ExpandToken::Null),
            other => Err(format!("unknown expand token `{other}` (guided, one or null)")),
        }
    }
}

impl fmt::Display for ExpandToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExpandToken::Guided => "guided",
            ExpandToken::One => "one",
            ExpandToken::Null => "null",
        })
    }
}

pub fn time_embedding(t: f64) -> [f64; TIME_FEATURES] {
    [t, (2.0 * PI * t).sin(), (2.0 * PI * t).cos()]
}

/// Point on the straight path from noise `a0` to `a` and its constant velocity.
pub fn fm_pair(a: &[f64], a0: &[f64], t: f64) -> (Vec<f64>, Vec<f64>) {
    let a_t = a.iter().zip(a0).map(|(x, z)| (1.0 - t) * z + t * x).collect();
    let v = a.iter().zip(a0).map(|(x, z)| x - z).collect();
    (a_t, v)
}

/// Token for one `(s, a)`: ∅ with probability `token_dropout`, else the sign of
/// the advantage under the target critics.
pub fn assign_token(
    critics: &CriticSet,
    s: &[f64],
    a: &[f64],
    seed: u64,
    token_dropout: f64,
) -> Result<Token> {
    let mut rng = SplitMix64::new(seed);
    if rng.bernoulli(token_dropout) {
        return Ok(Token::Null);
    }
    let adv = critics.q_cropped(s, a, true)? - critics.value(&Matrix2D::from_vec(1, s.len(), s.to_vec())?)?[0];
    Ok(Token::from_advantage(adv))
}

/// Batched token assignment; one dropout draw per element.
pub fn assign_tokens(advantages: &[f64], token_dropout: f64, rng: &mut SplitMix64) -> Vec<Token> {
    advantages
        .iter()
        .map(|&adv| {
            if rng.bernoulli(token_dropout) {
                Token::Null
            } else {
                Token::from_advantage(adv)
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FlowPolicy {
    pub net: Mlp,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl FlowPolicy {
    pub fn input_dim(state_dim: usize, action_dim: usize) -> usize {
        state_dim + action_dim + TIME_FEATURES + TOKEN_FEATURES
    }

    /// Mish net with a zero final layer, so the initial velocity is zero.
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut SplitMix64) -> Result<Self> {
        let mut sizes = vec![Self::input_dim(state_dim, action_dim)];
        sizes.extend_from_slice(hidden);
        sizes.push(action_dim);
        let mut net = Mlp::new(&sizes, Activation::Mish, rng)?;
        net.zero_final_layer();
        Ok(Self {
            net,
            state_dim,
            action_dim,
        })
    }

    pub fn from_net(net: Mlp, state_dim: usize, action_dim: usize) -> Result<Self> {
        let input = Self::input_dim(state_dim, action_dim);
        if net.input_dim() != input {
            return Err(Error::shape("flow net input", input, net.input_dim()));
        }
        if net.output_dim() != action_dim {
            return Err(Error::shape("flow net output", action_dim, net.output_dim()));
        }
        Ok(Self {
            net,
            state_dim,
            action_dim,
        })
    }

    pub fn inputs(&self, states: &Matrix2D, a_t: &Matrix2D, t: &[f64], tokens: &[Token]) -> Result<Matrix2D> {
        let n = states.rows();
        if states.cols() != self.state_dim {
            return Err(Error::shape("flow states", self.state_dim, states.cols()));
        }
        if a_t.shape() != (n, self.action_dim) {
            return Err(Error::shape("flow a_t", format!("{n}x{}", self.action_dim), format!("{:?}", a_t.shape())));
        }
        if t.len() != n || tokens.len() != n {
            return Err(Error::shape("flow t/tokens", n, t.len().min(tokens.len())));
        }
        let width = Self::input_dim(self.state_dim, self.action_dim);
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            data.extend_from_slice(states.row(i));
            data.extend_from_slice(a_t.row(i));
            data.extend_from_slice(&time_embedding(t[i]));
            data.extend_from_slice(&tokens[i].one_hot());
        }
        Matrix2D::from_vec(n, width, data)
    }

    pub fn velocity(&self, states: &Matrix2D, a_t: &Matrix2D, t: &[f64], tokens: &[Token]) -> Result<Matrix2D> {
        self.net.predict(&self.inputs(states, a_t, t, tokens)?)
    }

    pub fn velocity_one(&self, s: &[f64], a_t: &[f64], t: f64, token: Token) -> Result<Vec<f64>> {
        let states = Matrix2D::from_vec(1, s.len(), s.to_vec())?;
        let a = Matrix2D::from_vec(1, a_t.len(), a_t.to_vec())?;
        Ok(self.velocity(&states, &a, &[t], &[token])?.into_vec())
    }

    /// `(1 − w)·v(∅) + w·v(o=1)` for every row, all rows at the same time `t`.
    pub fn guided_velocity(&self, states: &Matrix2D, a_t: &Matrix2D, t: f64, w: f64) -> Result<Matrix2D> {
        let n = states.rows();
        let times = vec![t; n];
        // At w = 1 or w = 0 one branch carries a zero coefficient, which
        // leaves the blend bit-identical to the other branch alone.
        if w == 1.0 {
            return self.velocity(states, a_t, &times, &vec![Token::One; n]);
        }
        if w == 0.0 {
            return self.velocity(states, a_t, &times, &vec![Token::Null; n]);
        }
        let both_states = states.vconcat(states)?;
        let both_a = a_t.vconcat(a_t)?;
        let mut tokens = vec![Token::Null; n];
        tokens.extend(std::iter::repeat_n(Token::One, n));
        let v = self.velocity(&both_states, &both_a, &vec![t; 2 * n], &tokens)?;
        let mut out = Matrix2D::zeros(n, self.action_dim);
        for i in 0..n {
            let (v_null, v_one) = (v.row(i), v.row(n + i));
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = (1.0 - w) * v_null[j] + w * v_one[j];
            }
        }
        Ok(out)
    }

    /// Euler integration of the guided field from `a⁰ ~ N(0, I)`, one draw per row.
    pub fn sample_batch(&self, states: &Matrix2D, w: f64, flow_steps: usize, rng: &mut SplitMix64) -> Result<Matrix2D> {
        if flow_steps == 0 {
            return Err(Error::config("flow_steps", "must be at least 1"));
        }
        let n = states.rows();
        let mut a = Matrix2D::zeros(n, self.action_dim);
        a.data_mut().iter_mut().for_each(|x| *x = rng.normal());
        let dt = 1.0 / flow_steps as f64;
        for k in 0..flow_steps {
            let v = self.guided_velocity(states, &a, k as f64 / flow_steps as f64, w)?;
            for (x, dx) in a.data_mut().iter_mut().zip(v.data()) {
                *x += dt * dx;
            }
        }
        a.ensure_finite("flow sample")?;
        Ok(a)
    }
}

/// `(1 − w)·v(∅) + w·v(o=1)` at a single point.
pub fn cfg_guided_velocity(flow: &FlowPolicy, a_t: &[f64], t: f64, s: &[f64], w: f64) -> Result<Vec<f64>> {
    let states = Matrix2D::from_vec(1, s.len(), s.to_vec())?;
    let a = Matrix2D::from_vec(1, a_t.len(), a_t.to_vec())?;
    Ok(flow.guided_velocity(&states, &a, t, w)?.into_vec())
}

/// One guided sample at state `s`, deterministic in `seed`. Not clamped.
pub fn sample_flow_action(flow: &FlowPolicy, s: &[f64], w: f64, flow_steps: usize, seed: u64) -> Result<Vec<f64>> {
    let states = Matrix2D::from_vec(1, s.len(), s.to_vec())?;
    let mut rng = SplitMix64::new(seed);
    Ok(flow.sample_batch(&states, w, flow_steps, &mut rng)?.into_vec())
}

/// Flow-matching regression with explicit noise, times and tokens:
/// `mean_i ‖v(a_tᵢ, tᵢ, sᵢ, oᵢ) − (aᵢ − a⁰ᵢ)‖²`.
pub fn fm_loss_fixed(
    flow: &FlowPolicy,
    states: &Matrix2D,
    actions: &Matrix2D,
    a0: &Matrix2D,
    t: &[f64],
    tokens: &[Token],
) -> Result<(f64, MlpGrads)> {
    let n = states.rows();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if actions.shape() != a0.shape() || actions.rows() != n {
        return Err(Error::shape("fm actions/noise", format!("{:?}", actions.shape()), format!("{:?}", a0.shape())));
    }
    let d = flow.action_dim;
    let mut a_t = Matrix2D::zeros(n, d);
    let mut target = Matrix2D::zeros(n, d);
    for i in 0..n {
        let (p, v) = fm_pair(actions.row(i), a0.row(i), t[i]);
        a_t.row_mut(i).copy_from_slice(&p);
        target.row_mut(i).copy_from_slice(&v);
    }
    let (pred, tape) = flow.net.forward(&flow.inputs(states, &a_t, t, tokens)?)?;
    let mut grad = Matrix2D::zeros(n, d);
    let mut loss = 0.0;
    for ((g, p), y) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let r = p - y;
        loss += r * r;
        *g = 2.0 * r / n as f64;
    }
    let grads = flow.net.backward(&tape, &grad)?;
    Ok((loss / n as f64, grads))
}

/// Flow-matching regression with fresh `a⁰ ~ N(0, I)` and `t ~ U[0, 1]` per element.
pub fn fm_loss(
    flow: &FlowPolicy,
    states: &Matrix2D,
    actions: &Matrix2D,
    tokens: &[Token],
    rng: &mut SplitMix64,
) -> Result<(f64, MlpGrads)> {
    let n = actions.rows();
    let mut a0 = Matrix2D::zeros(n, actions.cols());
    a0.data_mut().iter_mut().for_each(|x| *x = rng.normal());
    let t: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
    fm_loss_fixed(flow, states, actions, &a0, &t, tokens)
}

/// Regression targets and their advantages for both branches.
#[derive(Debug, Clone, PartialEq)]
pub struct FmTargets {
    pub states: Matrix2D,
    pub data_actions: Matrix2D,
    pub data_advantages: Vec<f64>,
    pub expansion_actions: Option<Matrix2D>,
    pub expansion_advantages: Option<Vec<f64>>,
}

impl FmTargets {
    pub fn build(batch: &Batch, expansion_actions: Option<Matrix2D>, critics: &CriticSet) -> Result<Self> {
        let v = critics.value(&batch.states)?;
        let adv = |q: Vec<f64>| -> Vec<f64> { q.iter().zip(&v).map(|(q, v)| q - v).collect() };
        let data_advantages = adv(critics.q_cropped_batch(&batch.states, &batch.actions, true)?);
        let expansion_advantages = match &expansion_actions {
            Some(a) => Some(adv(critics.q_cropped_batch(&batch.states, a, true)?)),
            None => None,
        };
        Ok(Self {
            states: batch.states.clone(),
            data_actions: batch.actions.clone(),
            data_advantages,
            expansion_actions,
            expansion_advantages,
        })
    }

    pub fn len(&self) -> usize {
        self.data_advantages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data_advantages.is_empty()
    }

    /// Per-element targets chosen by the gate.
    pub fn select(&self, gate: &GateRealization) -> Result<(Matrix2D, Vec<f64>)> {
        let n = self.len();
        if !gate.any_expansion() {
            return Ok((self.data_actions.clone(), self.data_advantages.clone()));
        }
        let (exp_a, exp_adv) = match (&self.expansion_actions, &self.expansion_advantages) {
            (Some(a), Some(v)) => (a, v),
            _ => return Err(Error::shape("expansion targets", "policy samples", "none")),
        };
        let mut actions = self.data_actions.clone();
        let mut adv = self.data_advantages.clone();
        for i in 0..n {
            if gate.selects_expansion(i) {
                actions.row_mut(i).copy_from_slice(exp_a.row(i));
                adv[i] = exp_adv[i];
            }
        }
        Ok((actions, adv))
    }
}

/// Gated flow-matching loss on prepared targets.
pub fn gated_fm_loss_on(
    flow: &FlowPolicy,
    targets: &FmTargets,
    gate: &GateRealization,
    token_dropout: f64,
    rng: &mut SplitMix64,
) -> Result<(f64, MlpGrads)> {
    if targets.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (actions, adv) = targets.select(gate)?;
    let tokens = assign_tokens(&adv, token_dropout, rng);
    fm_loss(flow, &targets.states, &actions, &tokens, rng)
}

/// Gated flow-matching loss; expansion samples are drawn only if the gate needs them.
pub fn gated_fm_loss(
    batch: &Batch,
    flow: &FlowPolicy,
    critics: &CriticSet,
    hp: &HyperParams,
    gate: &GateRealization,
    expand: ExpandToken,
    seed: u64,
) -> Result<(f64, MlpGrads)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut rng = SplitMix64::new(seed);
    let samples = if gate.any_expansion() {
        Some(flow.sample_batch(&batch.states, expand.guidance(hp.w), hp.flow_steps, &mut rng)?)
    } else {
        None
    };
    let targets = FmTargets::build(batch, samples, critics)?;
    gated_fm_loss_on(flow, &targets, gate, hp.token_dropout, &mut rng)
}

/// Pointwise `(1 − p)·a_D + p·â`.
pub fn interpolate_actions(data: &Matrix2D, expansion: &Matrix2D, p: f64) -> Result<Matrix2D> {
    if data.shape() != expansion.shape() {
        return Err(Error::shape("interpolated actions", format!("{:?}", data.shape()), format!("{:?}", expansion.shape())));
    }
    let mut out = data.clone();
    for (o, e) in out.data_mut().iter_mut().zip(expansion.data()) {
        *o = (1.0 - p) * *o + p * e;
    }
    Ok(out)
}

/// Deterministic-interpolation flow baseline: regress on the blended action
/// `(1 − p)·a_D + p·â`, tokens from the advantage at the blended action.
pub fn deterministic_interp_fm_loss(
    batch: &Batch,
    flow: &FlowPolicy,
    critics: &CriticSet,
    hp: &HyperParams,
    expansion: Option<&Matrix2D>,
    rng: &mut SplitMix64,
) -> Result<(f64, MlpGrads)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let actions = match expansion {
        Some(e) if hp.p > 0.0 => interpolate_actions(&batch.actions, e, hp.p)?,
        None if hp.p > 0.0 => return Err(Error::shape("expansion targets", "policy samples", "none")),
        _ => batch.actions.clone(),
    };
    let v = critics.value(&batch.states)?;
    let q = critics.q_cropped_batch(&batch.states, &actions, true)?;
    let adv: Vec<f64> = q.iter().zip(&v).map(|(q, v)| q - v).collect();
    let tokens = assign_tokens(&adv, hp.token_dropout, rng);
    fm_loss(flow, &batch.states, &actions, &tokens, rng)
}
