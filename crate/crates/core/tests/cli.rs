//! End-to-end runs of every subcommand through the built binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use isep_core::config::KEYS;

fn isep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_isep")).args(args).output().expect("spawn isep")
}

fn ok(args: &[&str]) -> String {
    let out = isep(args);
    assert!(
        out.status.success(),
        "isep {args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    isep(args).status.code().unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

const FAST: [&str; 8] = ["--steps", "60", "--eval-every", "30", "--eval-rollouts", "100", "--hidden", "16,16"];

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let data = p(dir, "danger.csv");
    ok(&["gen-data", "--env", "danger_bandit", "--n", "400", "--seed", "2", "--out", &data]);
    assert!(fs::read_to_string(&data).unwrap().starts_with("isep-dataset v1 danger_bandit 400 2"));

    let cfg = p(dir, "run.cfg");
    fs::write(&cfg, format!("env=danger_bandit\np=0.3\ndataset={data}\n")).unwrap();
    let run = p(dir, "run");
    let mut args = vec!["train", "--config", &cfg, "--out", &run, "--flow-hidden", "16,16"];
    args.extend_from_slice(&FAST);
    let stdout = ok(&args);
    assert!(stdout.contains("reward_mean="), "{stdout}");
    let saved = fs::read_to_string(format!("{run}/config.txt")).unwrap();
    assert!(saved.contains("p=0.3") && saved.contains("steps=60"), "{saved}");

    let actions = p(dir, "actions.csv");
    let stdout = ok(&["eval", "--run", &run, "--rollouts", "200", "--out", &actions]);
    assert!(stdout.contains("danger_rate="), "{stdout}");
    assert_eq!(fs::read_to_string(&actions).unwrap().lines().count(), 201);

    let sweep = p(dir, "sweep");
    let mut args = vec!["sweep", "--p-grid", "0.0,0.5", "--seeds", "0..2", "--out", &sweep];
    args.extend_from_slice(&FAST);
    let stdout = ok(&args);
    assert!(stdout.contains("p=0.5"), "{stdout}");
    let rows = fs::read_to_string(format!("{sweep}/sweep.csv")).unwrap();
    assert_eq!(rows.lines().count(), 3);
    assert!(Path::new(&format!("{sweep}/p0.5_seed1/metrics.csv")).exists());

    let abl = p(dir, "ablate");
    let mut args = vec!["ablate", "--env", "multimodal_bandit", "--policy", "flow", "--flow-hidden", "16,16", "--seeds", "0", "--out", &abl];
    args.extend_from_slice(&FAST);
    ok(&args);
    assert!(fs::read_to_string(format!("{abl}/ablate.csv")).unwrap().contains("flow_det_interp"));

    let theory = p(dir, "theory.csv");
    let stdout = ok(&["theory-check", "--instances", "5", "--out", &theory]);
    assert!(stdout.contains("5 of 5 instances pass"), "{stdout}");
    assert!(fs::read_to_string(&theory)
        .unwrap()
        .starts_with("instance,seed,delta_tau,delta_sub,p_bound_min,violations"));

    // Plots: re-rendering identical inputs gives identical bytes.
    let panel = format!("p=0.3={actions}");
    let table = format!("{sweep}/sweep.csv");
    let series = format!("p0={sweep}/p0_seed0/metrics.csv,{sweep}/p0_seed1/metrics.csv");
    let plots: [Vec<&str>; 4] = [
        vec!["--kind", "scatter", "--panel", &panel, "--title", "actions"],
        vec!["--kind", "scatter", "--env", "multimodal_bandit"],
        vec!["--kind", "curve", "--series", &series],
        vec!["--kind", "bars", "--table", &table],
    ];
    for (k, extra) in plots.iter().enumerate() {
        let mut renders = Vec::new();
        for rep in 0..2 {
            let out = p(dir, &format!("plot{k}_{rep}.svg"));
            let mut args = vec!["plot", "--out", &out];
            args.extend_from_slice(extra);
            ok(&args);
            renders.push(fs::read(&out).unwrap());
        }
        assert!(renders[0].starts_with(b"<svg"));
        assert_eq!(renders[0], renders[1], "plot {k} not reproducible");
    }
}

#[test]
fn help_lists_every_key() {
    let help = ok(&["train", "--help"]);
    for (key, _) in KEYS {
        assert!(help.contains(&format!("--{}", key.replace('_', "-"))), "--{key} missing from help");
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&["train", "--p", "1.5"]), 1);
    assert_eq!(code(&["train", "--no-such-key", "1"]), 1);
    assert_eq!(code(&["train", "--config", &p(tmp.path(), "missing.cfg")]), 1);
    assert_eq!(code(&["sweep", "--p-grid", "0.2,1.4"]), 1);

    let bad = p(tmp.path(), "bad.csv");
    fs::write(&bad, "a0,a1,reward\n1,2,3\n4,oops,6\n").unwrap();
    let out = isep(&["plot", "--kind", "scatter", "--panel", &format!("x={bad}"), "--out", &p(tmp.path(), "x.svg")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.csv:3:"));

    let run = p(tmp.path(), "diverge");
    let out = isep(&["train", "--lr-q", "1e150", "--lr-v", "1e150", "--steps", "200", "--hidden", "8", "--out", &run]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(Path::new(&format!("{run}/metrics.csv")).exists());
}
