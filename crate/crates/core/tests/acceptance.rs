//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 2 5`.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::process::{Command, ExitCode};
use std::time::Instant;

use isep_core::config::{PolicyKind, TrainConfig};
use isep_core::critic::{bellman_q_loss, expectile_fixed_point, expectile_loss, interpolated_value_loss, Batch, CriticSet, HyperParams};
use isep_core::envs_data::EnvId;
use isep_core::policy_flow::{fm_loss_fixed, FlowPolicy, Token};
use isep_core::policy_gauss::{deterministic_interp_loss_on, gated_awr_loss_on, AwrTargets, GateMode, GateRealization, GaussianPolicy};
use isep_core::rng::SplitMix64;
use isep_core::tensor_nn::{Activation, Matrix2D, Mlp};
use isep_core::theory_checks::{gate_identity_check, theorem_sweep, TheoremSweepConfig};
use isep_core::trainer::{mean_sem, run_training, EvalSummary};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- numerics

fn random_matrix(rng: &mut SplitMix64, rows: usize, cols: usize, scale: f64) -> Matrix2D {
    let data = (0..rows * cols).map(|_| scale * rng.normal()).collect();
    Matrix2D::from_vec(rows, cols, data).unwrap()
}

/// Network with every weight and bias drawn from N(0, 0.5²), so no ReLU is
/// silent by construction.
fn random_net(rng: &mut SplitMix64, sizes: &[usize], act: Activation) -> Mlp {
    let mut net = Mlp::new(sizes, act, rng).unwrap();
    let params: Vec<f64> = (0..net.num_params()).map(|_| 0.5 * rng.normal()).collect();
    net.set_flat_params(&params).unwrap();
    net
}

/// Max over parameters of `|analytic − central| / max(|analytic|, |central|, 1e-6)`.
fn fd_max_rel_err(params: &[f64], analytic: &[f64], mut loss_at: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(params.len(), analytic.len());
    let mut worst: f64 = 0.0;
    let mut x = params.to_vec();
    for i in 0..x.len() {
        let h = 1e-6 * x[i].abs().max(1.0);
        x[i] = params[i] + h;
        let up = loss_at(&x);
        x[i] = params[i] - h;
        let down = loss_at(&x);
        x[i] = params[i];
        let fd = (up - down) / (2.0 * h);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

fn random_batch(rng: &mut SplitMix64, n: usize, sd: usize, ad: usize) -> Batch {
    Batch {
        states: random_matrix(rng, n, sd, 1.0),
        actions: random_matrix(rng, n, ad, 1.0),
        rewards: (0..n).map(|_| 3.0 * rng.normal()).collect(),
        next_states: random_matrix(rng, n, sd, 1.0),
        dones: (0..n).map(|_| rng.bernoulli(0.3)).collect(),
    }
}

fn random_critics(rng: &mut SplitMix64, sd: usize, ad: usize) -> CriticSet {
    let h = 3 + rng.below(5);
    let v = random_net(rng, &[sd, h, h, 1], Activation::Relu);
    let q1 = random_net(rng, &[sd + ad, h, 1], Activation::Relu);
    let q2 = random_net(rng, &[sd + ad, h, 1], Activation::Relu);
    CriticSet::from_nets(v, q1, q2, 50.0).unwrap()
}

fn criterion_1() -> Outcome {
    let mut rng = SplitMix64::new(101);
    let mut worst = [0.0f64; 4];
    for _ in 0..100 {
        let (sd, ad, n) = (1 + rng.below(3), 1 + rng.below(3), 2 + rng.below(7));
        let batch = random_batch(&mut rng, n, sd, ad);
        let critics = random_critics(&mut rng, sd, ad);
        let hp = HyperParams {
            p: rng.uniform(0.0, 1.0),
            tau: rng.uniform(0.55, 0.95),
            beta: rng.uniform(0.0, 2.0),
            gamma: rng.uniform(0.5, 0.99),
            ..HyperParams::default()
        };
        let samples = random_matrix(&mut rng, n, ad, 1.0);

        // Interpolated value loss, w.r.t. the value net.
        let out = interpolated_value_loss(&batch, Some(&samples), &critics, &hp).unwrap();
        let e = fd_max_rel_err(&critics.v_net.flat_params(), &out.grads.flatten(), |x| {
            let mut c = critics.clone();
            c.v_net.set_flat_params(x).unwrap();
            interpolated_value_loss(&batch, Some(&samples), &c, &hp).unwrap().loss
        });
        worst[0] = worst[0].max(e);

        // Bellman loss, w.r.t. both live twins.
        let (_, grads) = bellman_q_loss(&batch, &critics, &hp).unwrap();
        for k in 0..2 {
            let e = fd_max_rel_err(&critics.q_nets[k].flat_params(), &grads[k].flatten(), |x| {
                let mut c = critics.clone();
                c.q_nets[k].set_flat_params(x).unwrap();
                bellman_q_loss(&batch, &c, &hp).unwrap().0
            });
            worst[1] = worst[1].max(e);
        }

        // Advantage-weighted likelihood, both the blended and the gated form.
        let h = 3 + rng.below(5);
        let mean_net = random_net(&mut rng, &[sd, h, ad], Activation::Relu);
        let log_std: Vec<f64> = (0..ad).map(|_| rng.uniform(-1.0, 0.5)).collect();
        let policy = GaussianPolicy::from_parts(mean_net, log_std).unwrap();
        let targets = AwrTargets::build(&batch, Some(samples.clone()), &critics, &hp).unwrap();
        let gate = GateRealization::draw(GateMode::PerElement, hp.p, n, rng.next_u64());
        let with = |x: &[f64]| {
            let mut pol = policy.clone();
            let m = pol.mean_net.num_params();
            pol.mean_net.set_flat_params(&x[..m]).unwrap();
            pol.log_std.value.copy_from_slice(&x[m..]);
            pol
        };
        let mut theta = policy.mean_net.flat_params();
        theta.extend_from_slice(&policy.log_std.value);
        let (_, g) = deterministic_interp_loss_on(&policy, &targets, hp.p).unwrap();
        let e1 = fd_max_rel_err(&theta, &g.flatten(), |x| deterministic_interp_loss_on(&with(x), &targets, hp.p).unwrap().0);
        let (_, g) = gated_awr_loss_on(&policy, &targets, &gate).unwrap();
        let e2 = fd_max_rel_err(&theta, &g.flatten(), |x| gated_awr_loss_on(&with(x), &targets, &gate).unwrap().0);
        worst[2] = worst[2].max(e1).max(e2);

        // Flow matching, with noise, times and tokens held fixed.
        let fh = 3 + rng.below(5);
        let in_dim = FlowPolicy::input_dim(sd, ad);
        let flow = FlowPolicy::from_net(random_net(&mut rng, &[in_dim, fh, fh, ad], Activation::Mish), sd, ad).unwrap();
        let a0 = random_matrix(&mut rng, n, ad, 1.0);
        let t: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
        let tokens: Vec<Token> = (0..n).map(|_| [Token::Zero, Token::One, Token::Null][rng.below(3)]).collect();
        let (_, g) = fm_loss_fixed(&flow, &batch.states, &batch.actions, &a0, &t, &tokens).unwrap();
        let e = fd_max_rel_err(&flow.net.flat_params(), &g.flatten(), |x| {
            let mut f = flow.clone();
            f.net.set_flat_params(x).unwrap();
            fm_loss_fixed(&f, &batch.states, &batch.actions, &a0, &t, &tokens).unwrap().0
        });
        worst[3] = worst[3].max(e);
    }
    let pass = worst.iter().all(|w| *w < 1e-4);
    outcome(
        pass,
        format!(
            "max rel err: value {:.2e}, bellman {:.2e}, awr {:.2e}, flow {:.2e} (limit 1e-4)",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// ---------------------------------------------------------------- expectile

/// Exact minimizer of `Σ expectile_loss(x − v)`: on each gap between sorted
/// samples the objective is a quadratic with a closed-form minimizer.
fn brute_force_expectile(samples: &[f64], tau: f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let objective = |v: f64| xs.iter().map(|x| expectile_loss(x - v, tau)).sum::<f64>();
    let mut best = (f64::INFINITY, xs[0]);
    for k in 0..=xs.len() {
        // Samples below index k sit under v with weight 1 − τ.
        let (mut num, mut den) = (0.0, 0.0);
        for (i, x) in xs.iter().enumerate() {
            let w = if i < k { 1.0 - tau } else { tau };
            num += w * x;
            den += w;
        }
        let lo = if k == 0 { f64::NEG_INFINITY } else { xs[k - 1] };
        let hi = if k == xs.len() { f64::INFINITY } else { xs[k] };
        let v = (num / den).clamp(lo, hi);
        let f = objective(v);
        if f < best.0 {
            best = (f, v);
        }
    }
    best.1
}

fn criterion_2() -> Outcome {
    let mut rng = SplitMix64::new(202);
    let mut worst: f64 = 0.0;
    let mut mean_mismatch = 0;
    for _ in 0..200 {
        let n = 1 + rng.below(40);
        let scale = rng.uniform(0.1, 100.0);
        let samples: Vec<f64> = (0..n).map(|_| scale * rng.normal()).collect();
        for tau in [0.5, 0.7, 0.8, 0.9] {
            let v = expectile_fixed_point(&samples, tau);
            let oracle = brute_force_expectile(&samples, tau);
            worst = worst.max((v - oracle).abs());
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        if expectile_fixed_point(&samples, 0.5) != mean {
            mean_mismatch += 1;
        }
    }
    outcome(
        worst < 1e-6 && mean_mismatch == 0,
        format!("max |fixed point − oracle| {worst:.2e} (limit 1e-6); tau=0.5 mean mismatches {mean_mismatch}"),
    )
}

// ---------------------------------------------------------------- training runs

fn train(config: &TrainConfig) -> Result<EvalSummary, String> {
    run_training(config, None).map(|r| r.final_eval).map_err(|e| e.to_string())
}

fn preset(env: EnvId, kind: PolicyKind, p: f64, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::preset(env, kind);
    cfg.hp.p = p;
    cfg.seed = seed;
    cfg.eval_every = 0;
    cfg
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn criterion_3() -> Outcome {
    let grid = [0.0, 0.3, 0.5, 1.0];
    let mut reward = Vec::new();
    let mut danger = Vec::new();
    let mut diverged = Vec::new();
    for &p in &grid {
        let (mut r, mut d, mut div) = (Vec::new(), Vec::new(), 0);
        for seed in SEEDS {
            match train(&preset(EnvId::DangerBandit, PolicyKind::Gaussian, p, seed)) {
                Ok(e) => {
                    r.push(e.reward_mean);
                    d.push(e.danger_rate);
                }
                Err(_) => div += 1,
            }
        }
        reward.push(mean_sem(&r));
        danger.push(mean_sem(&d).0);
        diverged.push(div);
    }
    let mut lines = Vec::new();
    for (i, p) in grid.iter().enumerate() {
        lines.push(format!(
            "p={p}: reward {:.2}±{:.2} danger {:.4} diverged {}",
            reward[i].0, reward[i].1, danger[i], diverged[i]
        ));
    }
    let a = reward[1].0 - reward[0].0 >= 10.0 && reward[2].0 - reward[0].0 >= 10.0;
    let b = danger[1] <= 0.01 && danger[2] <= 0.01;
    let c = danger[3] >= 5.0 * danger[2] || diverged[3] > 0;
    let note = if danger[3] == 0.0 && danger[2] == 0.0 && diverged[3] == 0 {
        " [c holds only as 0 >= 5*0]"
    } else {
        ""
    };
    outcome(a && b && c, format!("(a) {a} (b) {b} (c) {c}{note}; {}", lines.join("; ")))
}

struct MultimodalRuns {
    flow_gated: Vec<Result<EvalSummary, String>>,
    flow_p0: Vec<Result<EvalSummary, String>>,
    gaussian: Vec<Result<EvalSummary, String>>,
}

fn multimodal_runs(cache: &mut Option<MultimodalRuns>) -> &MultimodalRuns {
    cache.get_or_insert_with(|| {
        let base = TrainConfig::preset(EnvId::MultimodalBandit, PolicyKind::Flow);
        let runs = |kind, p| -> Vec<_> { SEEDS.iter().map(|&s| train(&preset(EnvId::MultimodalBandit, kind, p, s))).collect() };
        MultimodalRuns {
            flow_gated: runs(PolicyKind::Flow, base.hp.p),
            flow_p0: runs(PolicyKind::Flow, 0.0),
            gaussian: runs(PolicyKind::Gaussian, TrainConfig::preset(EnvId::MultimodalBandit, PolicyKind::Gaussian).hp.p),
        }
    })
}

fn rates(runs: &[Result<EvalSummary, String>], f: impl Fn(&EvalSummary) -> f64) -> Vec<f64> {
    runs.iter().map(|r| r.as_ref().map(&f).unwrap_or(f64::NAN)).collect()
}

fn fmt_rates(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(",")
}

fn criterion_4(cache: &mut Option<MultimodalRuns>) -> Outcome {
    let runs = multimodal_runs(cache);
    let majority = |v: &[f64], ok: &dyn Fn(f64) -> bool| v.iter().filter(|x| ok(**x)).count() * 2 > v.len();
    let opt = rates(&runs.flow_gated, |e| e.opt_island_rate);
    let sub = rates(&runs.flow_p0, |e| e.subopt_island_rate);
    let bg = rates(&runs.gaussian, |e| e.background_rate());
    let a = majority(&opt, &|x| x >= 0.6);
    let b = majority(&sub, &|x| x >= 0.6);
    let c = majority(&bg, &|x| x >= 0.1);
    outcome(
        a && b && c,
        format!(
            "flow p>0 optimal-island [{}] {a}; flow p=0 suboptimal-island [{}] {b}; gaussian background [{}] {c}",
            fmt_rates(&opt),
            fmt_rates(&sub),
            fmt_rates(&bg)
        ),
    )
}

fn criterion_7(cache: &mut Option<MultimodalRuns>) -> Outcome {
    let gated = rates(&multimodal_runs(cache).flow_gated, |e| e.opt_island_rate);
    let p = TrainConfig::preset(EnvId::MultimodalBandit, PolicyKind::Flow).hp.p;
    let det: Vec<f64> = SEEDS
        .iter()
        .map(|&s| {
            train(&preset(EnvId::MultimodalBandit, PolicyKind::FlowDeterministicInterp, p, s))
                .map(|e| e.opt_island_rate)
                .unwrap_or(f64::NAN)
        })
        .collect();
    let (mg, _) = mean_sem(&gated);
    let (md, _) = mean_sem(&det);
    let gap = 100.0 * (mg - md);
    outcome(
        gap >= 15.0,
        format!(
            "optimal-island occupancy gated {:.1}% [{}] vs deterministic {:.1}% [{}]: gap {gap:.1} pp (need 15)",
            100.0 * mg,
            fmt_rates(&gated),
            100.0 * md,
            fmt_rates(&det)
        ),
    )
}

// ---------------------------------------------------------------- theory

fn criterion_5() -> Outcome {
    let reports = theorem_sweep(&TheoremSweepConfig::default()).expect("theorem sweep");
    let violations: usize = reports.iter().map(|r| r.violations).sum();
    let worst = reports.iter().map(|r| r.max_excess).fold(f64::NEG_INFINITY, f64::max);
    outcome(
        reports.len() == 50 && violations == 0,
        format!("{} instances, {violations} violations, max V̂ − V* {worst:.2e}", reports.len()),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = SplitMix64::new(606);
    let (sd, ad, n) = (2, 2, 16);
    let batch = random_batch(&mut rng, n, sd, ad);
    let critics = random_critics(&mut rng, sd, ad);
    let hp = HyperParams {
        beta: 0.5,
        ..HyperParams::default()
    };
    let samples = random_matrix(&mut rng, n, ad, 1.0);
    let targets = AwrTargets::build(&batch, Some(samples), &critics, &hp).unwrap();
    let policy = GaussianPolicy::from_parts(random_net(&mut rng, &[sd, 8, ad], Activation::Relu), vec![-0.3, 0.2]).unwrap();
    let p = 0.3;
    let small = gate_identity_check(&policy, &targets, p, 10_000, 1).unwrap();
    let large = gate_identity_check(&policy, &targets, p, 100_000, 2).unwrap();
    let a = small.expectation_rel_err < 0.02;
    let b = large.variance_rel_err < 0.05;
    let c = small.branch_mismatches == 0 && large.branch_mismatches == 0;
    outcome(
        a && b && c,
        format!(
            "(a) mean rel err {:.4} (b) variance rel err {:.4} (c) non-branch gradients {}",
            small.expectation_rel_err,
            large.variance_rel_err,
            small.branch_mismatches + large.branch_mismatches
        ),
    )
}

// ---------------------------------------------------------------- determinism

fn isep(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_isep")).args(args).output().expect("spawn isep");
    assert!(status.status.success(), "isep {args:?}: {}", String::from_utf8_lossy(&status.stderr));
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let mut checks = Vec::new();
    let trains: [&[&str]; 3] = [
        &["--env", "danger_bandit", "--p", "0.3", "--steps", "400", "--eval-every", "100"],
        &["--env", "multimodal_bandit", "--policy", "flow", "--steps", "150", "--eval-every", "50"],
        &["--env", "tabular_chain", "--policy", "det_interp", "--steps", "100", "--hidden", "32,32"],
    ];
    for (k, extra) in trains.iter().enumerate() {
        let mut files = Vec::new();
        for rep in 0..2 {
            let out = path(&format!("train{k}_{rep}"));
            let mut args = vec!["train", "--seed", "11", "--eval-rollouts", "200", "--out", &out];
            args.extend_from_slice(extra);
            isep(&args);
            files.push(fs::read(format!("{out}/metrics.csv")).unwrap());
        }
        checks.push((format!("train {}", extra[1]), files[0] == files[1]));
    }
    let mut csvs = Vec::new();
    for rep in 0..2 {
        let out = path(&format!("theory{rep}.csv"));
        isep(&["theory-check", "--instances", "10", "--seed", "5", "--out", &out]);
        csvs.push(fs::read(&out).unwrap());
    }
    checks.push(("theory-check".into(), csvs[0] == csvs[1]));
    let pass = checks.iter().all(|(_, ok)| *ok);
    let detail = checks
        .iter()
        .map(|(name, ok)| format!("{name}: {}", if *ok { "identical" } else { "DIFFERENT" }))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(pass, detail)
}

fn main() -> ExitCode {
    let selected: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wants = |n: u32| selected.is_empty() || selected.contains(&n);
    let mut cache = None;
    let names = [
        "gradients vs finite differences",
        "expectile oracle",
        "danger bandit p-sweep",
        "multimodal support expansion",
        "tabular value bound",
        "gate identities",
        "gated vs deterministic flow",
        "determinism",
    ];
    let mut failed = 0;
    let mut err = std::io::stderr();
    for (n, name) in (1..).zip(names) {
        if !wants(n) {
            continue;
        }
        let start = Instant::now();
        let out = match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(&mut cache),
            5 => criterion_5(),
            6 => criterion_6(),
            7 => criterion_7(&mut cache),
            _ => criterion_8(),
        };
        failed += usize::from(!out.pass);
        let _ = writeln!(
            err,
            "criterion {n} ({name}): {} in {:.1}s: {}",
            if out.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            out.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
