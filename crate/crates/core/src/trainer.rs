//! Training loop: value, Q, policy and target updates per step, evaluation,
//! metrics and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::TrainConfig;
use crate::critic::{bellman_q_loss, clipped_exp_weight, interpolated_value_loss, v_max_for, Batch, CriticSet};
use crate::envs_data::{
    chain_step, generate_dataset, in_danger_zone, in_optimal_island, in_suboptimal_island, EnvId,
    OfflineDataset, CHAIN_STATES, DANGER_OPTIMUM,
};
use crate::error::{Error, Result};
use crate::policy_flow::{assign_tokens, fm_loss, interpolate_actions, FlowPolicy, FmTargets};
use crate::policy_gauss::{
    deterministic_interp_loss_on, gated_awr_loss_on, AwrTargets, GateRealization, GaussianPolicy, PolicyGrads,
};
use crate::rng::SplitMix64;
use crate::tensor_nn::{Activation, Matrix2D, Mlp, MlpGrads};

pub const METRICS_HEADER: &str = "step,v_loss,q_loss,pi_loss,gate,eval_reward_mean,eval_danger_rate,eval_opt_island_rate,eval_subopt_island_rate,eval_dist_to_opt";

/// Longest chain episode during evaluation.
pub const CHAIN_HORIZON: usize = 20;

#[derive(Debug, Clone)]
pub enum Policy {
    Gaussian(GaussianPolicy),
    Flow(FlowPolicy),
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub critics: CriticSet,
    pub policy: Policy,
}

impl Agent {
    pub fn new(config: &TrainConfig, rng: &mut SplitMix64) -> Result<Self> {
        let (sd, ad) = (config.env.state_dim(), config.env.action_dim());
        let critics = CriticSet::new(sd, ad, &config.hidden, v_max_for(config.env, config.hp.gamma), rng)?;
        let policy = if config.policy_kind.is_flow() {
            Policy::Flow(FlowPolicy::new(sd, ad, &config.flow_hidden, rng)?)
        } else {
            Policy::Gaussian(GaussianPolicy::new(sd, ad, &config.hidden, rng)?)
        };
        Ok(Self { critics, policy })
    }

    /// Policy draws for every row of `states`, unclamped. Flow draws use guidance `w`.
    pub fn sample_actions(&self, states: &Matrix2D, w: f64, flow_steps: usize, rng: &mut SplitMix64) -> Result<Matrix2D> {
        match &self.policy {
            Policy::Gaussian(p) => p.sample_batch(states, rng),
            Policy::Flow(f) => f.sample_batch(states, w, flow_steps, rng),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.critics.v_net.save(&dir.join("v.nn"))?;
        for k in 0..2 {
            self.critics.q_nets[k].save(&dir.join(format!("q{}.nn", k + 1)))?;
            self.critics.target_q_nets[k].save(&dir.join(format!("q{}_target.nn", k + 1)))?;
        }
        match &self.policy {
            Policy::Gaussian(p) => {
                p.mean_net.save(&dir.join("policy_mean.nn"))?;
                let d = p.action_dim();
                let log_std = Mlp::from_params(vec![Matrix2D::zeros(d, 1)], vec![p.log_std.value.clone()], Activation::Relu)?;
                log_std.save(&dir.join("policy_log_std.nn"))?;
            }
            Policy::Flow(f) => f.net.save(&dir.join("flow.nn"))?,
        }
        Ok(())
    }

    /// Restore an agent written by [`Agent::save`]. Optimizer state is not stored.
    pub fn load(dir: &Path, config: &TrainConfig) -> Result<Self> {
        let relu = Activation::Relu;
        let v = Mlp::load(&dir.join("v.nn"), relu)?;
        let q1 = Mlp::load(&dir.join("q1.nn"), relu)?;
        let q2 = Mlp::load(&dir.join("q2.nn"), relu)?;
        let mut critics = CriticSet::from_nets(v, q1, q2, v_max_for(config.env, config.hp.gamma))?;
        critics.target_q_nets = [
            Mlp::load(&dir.join("q1_target.nn"), relu)?,
            Mlp::load(&dir.join("q2_target.nn"), relu)?,
        ];
        let (sd, ad) = (config.env.state_dim(), config.env.action_dim());
        let policy = if config.policy_kind.is_flow() {
            Policy::Flow(FlowPolicy::from_net(Mlp::load(&dir.join("flow.nn"), Activation::Mish)?, sd, ad)?)
        } else {
            let mean = Mlp::load(&dir.join("policy_mean.nn"), relu)?;
            let log_std = Mlp::load(&dir.join("policy_log_std.nn"), relu)?;
            Policy::Gaussian(GaussianPolicy::from_parts(mean, log_std.biases()[0].clone())?)
        };
        Ok(Self { critics, policy })
    }
}

/// Independent random streams of one run.
#[derive(Debug, Clone)]
pub struct TrainStreams {
    pub init: SplitMix64,
    pub batch: SplitMix64,
    pub samples: SplitMix64,
    pub gate: SplitMix64,
    pub noise: SplitMix64,
    pub eval: SplitMix64,
}

impl TrainStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            init: SplitMix64::stream(seed, 0),
            batch: SplitMix64::stream(seed, 1),
            samples: SplitMix64::stream(seed, 2),
            gate: SplitMix64::stream(seed, 3),
            noise: SplitMix64::stream(seed, 4),
            eval: SplitMix64::stream(seed, 5),
        }
    }
}

/// Uniform minibatch indices, with replacement.
pub fn sample_indices(rng: &mut SplitMix64, n: usize, batch_size: usize) -> Vec<usize> {
    (0..batch_size).map(|_| rng.below(n)).collect()
}

/// Events emitted by [`train_step`], in execution order.
#[derive(Debug, Clone, PartialEq)]
pub enum StepEvent {
    PolicySamplesDrawn { rows: usize },
    ValueUpdate { used_policy_samples: bool },
    QUpdate,
    PolicyUpdate { expansion: bool },
    TargetUpdate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainStepRecord {
    pub step: usize,
    pub v_loss: f64,
    pub q_loss: f64,
    pub pi_loss: f64,
    /// 0/1 for a per-step gate, the expansion fraction for a per-element gate,
    /// NaN for the deterministic baselines.
    pub gate_value: f64,
    /// Gradient norms of V, Q1, Q2 and the policy.
    pub grad_norms: [f64; 4],
}

fn check_loss(step: usize, which: &'static str, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { step, which })
    }
}

fn tag(step: usize, which: &'static str) -> impl Fn(Error) -> Error {
    move |e| {
        if e.is_divergence() {
            Error::NonFiniteUpdate {
                step,
                which,
                detail: e.to_string(),
            }
        } else {
            e
        }
    }
}

/// One full update: value, then Q, then policy, then targets.
pub fn train_step(
    agent: &mut Agent,
    batch: &Batch,
    config: &TrainConfig,
    streams: &mut TrainStreams,
    step: usize,
    observer: &mut dyn FnMut(&StepEvent),
) -> Result<TrainStepRecord> {
    let hp = &config.hp;
    let n = batch.len();
    let kind = config.policy_kind;

    let gate = if kind.is_gated() {
        Some(GateRealization::draw(config.gate_mode, hp.p, n, streams.gate.next_u64()))
    } else {
        None
    };

    // One draw of policy actions per step, shared by the value and policy updates.
    let samples = if hp.p > 0.0 {
        let w = config.expand_token.guidance(hp.w);
        let s = agent
            .sample_actions(&batch.states, w, hp.flow_steps, &mut streams.samples)
            .map_err(tag(step, "policy sample"))?;
        observer(&StepEvent::PolicySamplesDrawn { rows: s.rows() });
        Some(s)
    } else {
        None
    };

    let value = interpolated_value_loss(batch, samples.as_ref(), &agent.critics, hp)?;
    check_loss(step, "value", value.loss)?;
    agent
        .critics
        .v_net
        .adam_step(&value.grads, hp.lr_v)
        .map_err(tag(step, "value"))?;
    observer(&StepEvent::ValueUpdate {
        used_policy_samples: value.policy_q.is_some(),
    });

    let (q_loss, q_grads) = bellman_q_loss(batch, &agent.critics, hp)?;
    check_loss(step, "q", q_loss)?;
    for (net, g) in agent.critics.q_nets.iter_mut().zip(&q_grads) {
        net.adam_step(g, hp.lr_q).map_err(tag(step, "q"))?;
    }
    observer(&StepEvent::QUpdate);

    // Target nets are untouched until the Polyak step, so the target-Q values
    // from the value update are still current; V has moved and is re-evaluated.
    let v_now = agent.critics.value(&batch.states)?;
    let advantages = |q: &[f64]| -> Vec<f64> { q.iter().zip(&v_now).map(|(q, v)| q - v).collect() };
    let data_adv = advantages(&value.data_q);
    let exp_adv = value.policy_q.as_deref().map(advantages);

    let expansion = gate.as_ref().is_some_and(|g| g.any_expansion());
    let (pi_loss, pi_norm) = match &mut agent.policy {
        Policy::Gaussian(policy) => {
            let weights = |adv: &[f64]| -> Vec<f64> {
                adv.iter().map(|a| clipped_exp_weight(*a, hp.beta, hp.omega_max)).collect()
            };
            let targets = AwrTargets {
                states: batch.states.clone(),
                data_actions: batch.actions.clone(),
                data_weights: weights(&data_adv),
                expansion_actions: samples.clone(),
                expansion_weights: exp_adv.as_deref().map(weights),
            };
            let (loss, grads): (f64, PolicyGrads) = match &gate {
                Some(g) => gated_awr_loss_on(policy, &targets, g)?,
                None => deterministic_interp_loss_on(policy, &targets, hp.p)?,
            };
            check_loss(step, "policy", loss)?;
            policy.apply_grads(&grads, hp.lr_pi).map_err(tag(step, "policy"))?;
            (loss, grads.norm())
        }
        Policy::Flow(flow) => {
            let (loss, grads): (f64, MlpGrads) = match &gate {
                Some(g) => {
                    let targets = FmTargets {
                        states: batch.states.clone(),
                        data_actions: batch.actions.clone(),
                        data_advantages: data_adv,
                        expansion_actions: samples.clone(),
                        expansion_advantages: exp_adv,
                    };
                    let (actions, adv) = targets.select(g)?;
                    let tokens = assign_tokens(&adv, hp.token_dropout, &mut streams.noise);
                    fm_loss(flow, &batch.states, &actions, &tokens, &mut streams.noise)?
                }
                None => {
                    let (actions, adv) = match &samples {
                        Some(s) => {
                            let blended = interpolate_actions(&batch.actions, s, hp.p)?;
                            let q = agent.critics.q_cropped_batch(&batch.states, &blended, true)?;
                            (blended, advantages(&q))
                        }
                        None => (batch.actions.clone(), data_adv),
                    };
                    let tokens = assign_tokens(&adv, hp.token_dropout, &mut streams.noise);
                    fm_loss(flow, &batch.states, &actions, &tokens, &mut streams.noise)?
                }
            };
            check_loss(step, "policy", loss)?;
            flow.net.adam_step(&grads, hp.lr_pi).map_err(tag(step, "policy"))?;
            (loss, grads.norm())
        }
    };
    observer(&StepEvent::PolicyUpdate { expansion });

    agent.critics.polyak_update(hp.rho)?;
    observer(&StepEvent::TargetUpdate);

    Ok(TrainStepRecord {
        step,
        v_loss: value.loss,
        q_loss,
        pi_loss,
        gate_value: gate.as_ref().map_or(f64::NAN, |g| g.value()),
        grad_norms: [value.grads.norm(), q_grads[0].norm(), q_grads[1].norm(), pi_norm],
    })
}

/// Evaluation summary. Rates that do not apply to an environment are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub reward_mean: f64,
    pub danger_rate: f64,
    pub opt_island_rate: f64,
    pub subopt_island_rate: f64,
    pub dist_to_opt: f64,
}

impl EvalSummary {
    /// Fraction of actions in neither island.
    pub fn background_rate(&self) -> f64 {
        1.0 - self.opt_island_rate - self.subopt_island_rate
    }
}

/// Score a set of bandit actions (already clamped) against the environment.
pub fn score_bandit_actions(env: EnvId, actions: &Matrix2D) -> EvalSummary {
    let field = env.reward_field();
    let n = actions.rows() as f64;
    let (mut reward, mut danger, mut opt, mut sub, mut dist) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..actions.rows() {
        let a = actions.row(i);
        reward += field.evaluate(a);
        danger += in_danger_zone(a) as u8 as f64;
        opt += in_optimal_island(a) as u8 as f64;
        sub += in_suboptimal_island(a) as u8 as f64;
        dist += ((a[0] - DANGER_OPTIMUM[0]).powi(2) + (a[1] - DANGER_OPTIMUM[1]).powi(2)).sqrt();
    }
    let danger_env = env == EnvId::DangerBandit;
    EvalSummary {
        reward_mean: reward / n,
        danger_rate: if danger_env { danger / n } else { f64::NAN },
        opt_island_rate: if danger_env { f64::NAN } else { opt / n },
        subopt_island_rate: if danger_env { f64::NAN } else { sub / n },
        dist_to_opt: dist / n,
    }
}

pub fn clamp_to_box(env: EnvId, actions: &mut Matrix2D) {
    let (lo, hi) = env.action_box();
    actions.data_mut().iter_mut().for_each(|a| *a = a.clamp(lo, hi));
}

/// Draw `rollouts` clamped actions at the bandit's evaluation state.
pub fn bandit_eval_actions(agent: &Agent, config: &TrainConfig, rollouts: usize, rng: &mut SplitMix64) -> Result<Matrix2D> {
    let states = Matrix2D::repeat_row(&config.env.eval_state(), rollouts);
    let mut actions = agent.sample_actions(&states, config.hp.w, config.hp.flow_steps, rng)?;
    clamp_to_box(config.env, &mut actions);
    Ok(actions)
}

pub fn evaluate(agent: &Agent, config: &TrainConfig, rng: &mut SplitMix64) -> Result<EvalSummary> {
    let env = config.env;
    if env.is_bandit() {
        let actions = bandit_eval_actions(agent, config, config.eval_rollouts, rng)?;
        return Ok(score_bandit_actions(env, &actions));
    }
    // Chain: undiscounted return of episodes started at the left end; all
    // episodes advance in lockstep, one batched policy query per time step.
    let n = config.eval_rollouts;
    let last = (CHAIN_STATES - 1) as f64;
    let mut state = vec![0.0; n];
    let mut alive = vec![true; n];
    let mut ret = vec![0.0; n];
    for _ in 0..CHAIN_HORIZON {
        let states = Matrix2D::from_vec(n, 1, state.clone())?;
        let mut actions = agent.sample_actions(&states, config.hp.w, config.hp.flow_steps, rng)?;
        clamp_to_box(env, &mut actions);
        for i in 0..n {
            if alive[i] {
                let (next, r, done) = chain_step(state[i], actions.row(i));
                state[i] = next;
                ret[i] += r;
                alive[i] = !done;
            }
        }
    }
    let dist = state.iter().map(|s| (1.0 - s) * last).sum::<f64>() / n as f64;
    Ok(EvalSummary {
        reward_mean: ret.iter().sum::<f64>() / n as f64,
        danger_rate: f64::NAN,
        opt_island_rate: f64::NAN,
        subopt_island_rate: f64::NAN,
        dist_to_opt: dist,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub record: TrainStepRecord,
    pub eval: Option<EvalSummary>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

fn fmt_num(out: &mut String, v: f64) {
    if v.is_nan() {
        out.push_str("nan");
    } else {
        let _ = write!(out, "{v}");
    }
}

impl MetricsTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(METRICS_HEADER);
        out.push('\n');
        for row in &self.rows {
            let r = &row.record;
            let _ = write!(out, "{}", r.step);
            for v in [r.v_loss, r.q_loss, r.pi_loss, r.gate_value] {
                out.push(',');
                fmt_num(&mut out, v);
            }
            match &row.eval {
                Some(e) => {
                    for v in [e.reward_mean, e.danger_rate, e.opt_island_rate, e.subopt_island_rate, e.dist_to_opt] {
                        out.push(',');
                        fmt_num(&mut out, v);
                    }
                }
                None => out.push_str(",,,,,"),
            }
            out.push('\n');
        }
        out
    }

    /// Last evaluation in the table.
    pub fn final_eval(&self) -> Option<&EvalSummary> {
        self.rows.iter().rev().find_map(|r| r.eval.as_ref())
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub agent: Agent,
    pub metrics: MetricsTable,
    /// Evaluation after the last step (or of the initial agent when no steps ran).
    pub final_eval: EvalSummary,
}

pub fn load_or_generate_dataset(config: &TrainConfig) -> Result<OfflineDataset> {
    let ds = match &config.dataset_path {
        Some(path) => OfflineDataset::load(path)?,
        None => generate_dataset(config.env, config.dataset_size, config.dataset_seed)?,
    };
    if ds.env_id != config.env {
        return Err(Error::config(
            "dataset",
            format!("dataset is for {} but env is {}", ds.env_id, config.env),
        ));
    }
    ds.validate()?;
    Ok(ds)
}

/// Train from scratch; writes `metrics.csv`, `config.txt` and a checkpoint
/// under `out_dir` when given. Metrics up to the failing step are still
/// written if the run aborts.
pub fn run_training(config: &TrainConfig, out_dir: Option<&Path>) -> Result<RunOutput> {
    run_training_with(config, out_dir, &mut |_| {})
}

pub fn run_training_with(
    config: &TrainConfig,
    out_dir: Option<&Path>,
    observer: &mut dyn FnMut(&StepEvent),
) -> Result<RunOutput> {
    config.validate()?;
    let dataset = load_or_generate_dataset(config)?;
    let mut streams = TrainStreams::new(config.seed);
    let mut agent = Agent::new(config, &mut streams.init)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), config.to_key_values())?;
    }

    let mut metrics = MetricsTable::default();
    let mut result = Ok(());
    for step in 1..=config.total_steps {
        let idx = sample_indices(&mut streams.batch, dataset.len(), config.hp.batch_size);
        let batch = Batch::from_indices(&dataset, &idx)?;
        match train_step(&mut agent, &batch, config, &mut streams, step, observer) {
            Ok(record) => {
                let is_eval = step == config.total_steps || (config.eval_every > 0 && step % config.eval_every == 0);
                let eval = if is_eval {
                    let mut rng = streams.eval.fork();
                    match evaluate(&agent, config, &mut rng) {
                        Ok(e) => Some(e),
                        Err(e) => {
                            result = Err(tag(step, "evaluation")(e));
                            break;
                        }
                    }
                } else {
                    None
                };
                metrics.rows.push(MetricsRow { record, eval });
            }
            Err(e) => {
                result = Err(e);
                break;
            }
        }
    }

    if let Some(dir) = out_dir {
        fs::write(dir.join("metrics.csv"), metrics.to_csv())?;
    }
    result?;
    let final_eval = match metrics.final_eval() {
        Some(e) => e.clone(),
        None => evaluate(&agent, config, &mut streams.eval.fork())?,
    };
    if let Some(dir) = out_dir {
        agent.save(&dir.join("checkpoint"))?;
    }
    Ok(RunOutput {
        agent,
        metrics,
        final_eval,
    })
}

/// Outcome of one run inside a sweep.
#[derive(Debug, Clone)]
pub enum RunResult {
    Finished(EvalSummary),
    Diverged(String),
}

/// Mean and standard error of the mean; SEM is 0 for a single value.
pub fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub label: String,
    pub runs: Vec<RunResult>,
}

impl SweepRow {
    pub fn finished(&self) -> Vec<&EvalSummary> {
        self.runs
            .iter()
            .filter_map(|r| match r {
                RunResult::Finished(e) => Some(e),
                RunResult::Diverged(_) => None,
            })
            .collect()
    }

    pub fn diverged(&self) -> usize {
        self.runs.len() - self.finished().len()
    }

    pub fn stat(&self, f: impl Fn(&EvalSummary) -> f64) -> (f64, f64) {
        mean_sem(&self.finished().iter().map(|e| f(e)).collect::<Vec<_>>())
    }
}

pub const SWEEP_HEADER: &str = "label,runs,diverged,reward_mean,reward_sem,danger_rate_mean,danger_rate_sem,opt_island_rate_mean,opt_island_rate_sem,subopt_island_rate_mean,subopt_island_rate_sem,dist_to_opt_mean,dist_to_opt_sem";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for row in rows {
        let _ = write!(out, "{},{},{}", row.label, row.runs.len(), row.diverged());
        let stats = [
            row.stat(|e| e.reward_mean),
            row.stat(|e| e.danger_rate),
            row.stat(|e| e.opt_island_rate),
            row.stat(|e| e.subopt_island_rate),
            row.stat(|e| e.dist_to_opt),
        ];
        for (m, s) in stats {
            out.push(',');
            fmt_num(&mut out, m);
            out.push(',');
            fmt_num(&mut out, s);
        }
        out.push('\n');
    }
    out
}

fn run_child(config: &TrainConfig, out_dir: Option<&Path>) -> Result<RunResult> {
    match run_training(config, out_dir) {
        Ok(out) => Ok(RunResult::Finished(out.final_eval)),
        Err(e) if e.is_divergence() => Ok(RunResult::Diverged(e.to_string())),
        Err(e) => Err(e),
    }
}

/// One run per `(p, seed)`; all other settings from `base`. Diverged runs are
/// counted, not averaged.
pub fn p_sweep(base: &TrainConfig, p_grid: &[f64], seeds: &[u64], out_dir: Option<&Path>) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(p_grid.len());
    for &p in p_grid {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.hp.p = p;
            cfg.seed = seed;
            let dir = out_dir.map(|d| d.join(format!("p{p}_seed{seed}")));
            runs.push(run_child(&cfg, dir.as_deref())?);
        }
        rows.push(SweepRow {
            label: format!("p={p}"),
            runs,
        });
    }
    Ok(rows)
}

/// Gated policy against its deterministic-interpolation counterpart over `seeds`.
pub fn ablate(base: &TrainConfig, seeds: &[u64], out_dir: Option<&Path>) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(2);
    for kind in [base.policy_kind, base.policy_kind.counterpart()] {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.policy_kind = kind;
            cfg.seed = seed;
            let dir = out_dir.map(|d| d.join(format!("{kind}_seed{seed}")));
            runs.push(run_child(&cfg, dir.as_deref())?);
        }
        rows.push(SweepRow {
            label: kind.to_string(),
            runs,
        });
    }
    Ok(rows)
}
