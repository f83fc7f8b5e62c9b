//! Command-line front end. `run` returns the process exit code:
//! 0 on success, 1 on a validation error, 2 when a run aborts.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::config::{self, PolicyKind, TrainConfig, KEYS};
use crate::envs_data::{generate_dataset, EnvId};
use crate::error::{Error, Result};
use crate::plot::{self, PlotKind, PlotSpec};
use crate::rng::SplitMix64;
use crate::theory_checks::{theorem_sweep, theory_csv, TheoremSweepConfig};
use crate::trainer::{self, bandit_eval_actions, evaluate, sweep_csv, Agent, EvalSummary, SweepRow};

/// What a parsed command line asks for.
#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    GenData { env: EnvId, n: usize, seed: u64, out: PathBuf },
    Train { config: TrainConfig, out: Option<PathBuf> },
    Sweep { config: TrainConfig, p_grid: Vec<f64>, seeds: Vec<u64>, out: Option<PathBuf> },
    Eval { run: PathBuf, rollouts: Option<usize>, seed: u64, out: Option<PathBuf> },
    Ablate { config: TrainConfig, seeds: Vec<u64>, out: Option<PathBuf> },
    TheoryCheck { cfg: TheoremSweepConfig, out: Option<PathBuf> },
    Plot(PlotSpec),
}

fn key_args() -> Vec<Arg> {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .help("key=value file; flags override it")];
    for (key, help) in KEYS {
        let long = key.replace('_', "-");
        let mut arg = Arg::new(*key).long(long.clone()).value_name("VALUE").help(*help);
        if long != *key {
            arg = arg.alias(*key);
        }
        args.push(arg);
    }
    args
}

fn out_arg(help: &'static str) -> Arg {
    Arg::new("out").long("out").value_name("PATH").help(help)
}

pub fn command() -> Command {
    Command::new("isep")
        .about("Offline RL with in-sample expansion: training, sweeps, checks and plots")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("gen-data")
                .about("Write an offline dataset")
                .arg(Arg::new("env").long("env").required(true).value_name("ENV"))
                .arg(Arg::new("n").long("n").value_name("N").default_value("10000"))
                .arg(Arg::new("seed").long("seed").value_name("SEED").default_value("0"))
                .arg(out_arg("dataset file").required(true)),
        )
        .subcommand(
            Command::new("train")
                .about("Train one agent")
                .args(key_args())
                .arg(out_arg("run directory for config, metrics and checkpoint")),
        )
        .subcommand(
            Command::new("sweep")
                .about("Train over a grid of p values and seeds")
                .args(key_args())
                .arg(Arg::new("p_grid").long("p-grid").alias("p_grid").value_name("LIST").default_value("0.0,0.3,0.5,1.0"))
                .arg(Arg::new("seeds").long("seeds").value_name("SEEDS").default_value("0..5").help("a..b or comma list"))
                .arg(out_arg("directory for per-run output and sweep.csv")),
        )
        .subcommand(
            Command::new("eval")
                .about("Evaluate a trained run and dump sampled actions")
                .arg(Arg::new("run").long("run").required(true).value_name("DIR"))
                .arg(Arg::new("rollouts").long("rollouts").value_name("N"))
                .arg(Arg::new("seed").long("seed").value_name("SEED").default_value("0"))
                .arg(out_arg("CSV of sampled actions (bandits only)")),
        )
        .subcommand(
            Command::new("ablate")
                .about("Gated policy against its deterministic-interpolation counterpart")
                .args(key_args())
                .arg(Arg::new("seeds").long("seeds").value_name("SEEDS").default_value("0..5"))
                .arg(out_arg("directory for per-run output and ablate.csv")),
        )
        .subcommand(
            Command::new("theory-check")
                .about("Check the value bound on random tabular MDPs")
                .arg(Arg::new("instances").long("instances").value_name("N").default_value("50"))
                .arg(Arg::new("seed").long("seed").value_name("SEED").default_value("0"))
                .arg(Arg::new("tau").long("tau").value_name("TAU").default_value("0.7"))
                .arg(Arg::new("gamma").long("gamma").value_name("GAMMA").default_value("0.9"))
                .arg(Arg::new("iters").long("iters").value_name("N").default_value("300"))
                .arg(out_arg("CSV report")),
        )
        .subcommand(
            Command::new("plot")
                .about("Render an SVG figure")
                .arg(
                    Arg::new("kind")
                        .long("kind")
                        .required(true)
                        .value_parser(["scatter", "curve", "bars"]),
                )
                .arg(Arg::new("env").long("env").value_name("ENV").default_value("danger_bandit"))
                .arg(
                    Arg::new("panel")
                        .long("panel")
                        .value_name("LABEL=FILE")
                        .action(ArgAction::Append)
                        .help("scatter: actions CSV for one panel; repeatable"),
                )
                .arg(
                    Arg::new("series")
                        .long("series")
                        .value_name("LABEL=FILE,FILE")
                        .action(ArgAction::Append)
                        .help("curve: metrics files averaged into one band; repeatable"),
                )
                .arg(Arg::new("table").long("table").value_name("FILE").help("bars: sweep or ablate CSV"))
                .arg(Arg::new("metric").long("metric").value_name("NAME"))
                .arg(Arg::new("title").long("title").value_name("TEXT").default_value(""))
                .arg(out_arg("SVG file").required(true)),
        )
}

fn parse_value<T: std::str::FromStr>(m: &ArgMatches, key: &str) -> Result<T> {
    let raw = m.get_one::<String>(key).map(String::as_str).unwrap_or_default();
    raw.trim().parse().map_err(|_| Error::InvalidConfig {
        key: key.to_string(),
        reason: format!("cannot parse `{raw}`"),
    })
}

fn optional_path(m: &ArgMatches, key: &str) -> Option<PathBuf> {
    m.get_one::<String>(key).map(PathBuf::from)
}

/// Config file pairs first, then flags, so flags win.
fn resolve_config(m: &ArgMatches) -> Result<TrainConfig> {
    let mut pairs = match m.get_one::<String>("config") {
        Some(path) => config::read_key_values(Path::new(path))?,
        None => Vec::new(),
    };
    for (key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            pairs.push((key.to_string(), v.clone()));
        }
    }
    TrainConfig::resolve(EnvId::DangerBandit, PolicyKind::Gaussian, &pairs)
}

fn split_label(raw: &str, flag: &str) -> Result<(String, String)> {
    raw.rsplit_once('=')
        .map(|(l, r)| (l.to_string(), r.to_string()))
        .ok_or_else(|| Error::InvalidConfig {
            key: flag.to_string(),
            reason: format!("expected LABEL=FILE, got `{raw}`"),
        })
}

fn require_file(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingFile(path))
    }
}

fn plot_request(m: &ArgMatches) -> Result<PlotSpec> {
    let metric = |default: &str| m.get_one::<String>("metric").cloned().unwrap_or_else(|| default.to_string());
    let kind = match m.get_one::<String>("kind").map(String::as_str) {
        Some("scatter") => {
            let env: EnvId = parse_value(m, "env")?;
            let mut panels = Vec::new();
            for raw in m.get_many::<String>("panel").into_iter().flatten() {
                let (label, file) = split_label(raw, "panel")?;
                panels.push((label, Some(require_file(PathBuf::from(file))?)));
            }
            PlotKind::ScatterOverRewardContour { env, panels }
        }
        Some("curve") => {
            let mut series = Vec::new();
            for raw in m.get_many::<String>("series").into_iter().flatten() {
                let (label, files) = split_label(raw, "series")?;
                let files = files
                    .split(',')
                    .map(|f| require_file(PathBuf::from(f.trim())))
                    .collect::<Result<Vec<_>>>()?;
                series.push((label, files));
            }
            PlotKind::LearningCurve {
                metric: metric("eval_reward_mean"),
                series,
            }
        }
        _ => {
            let table = optional_path(m, "table").ok_or_else(|| Error::InvalidConfig {
                key: "table".into(),
                reason: "bars need --table".into(),
            })?;
            PlotKind::SweepBars {
                metric: metric("reward"),
                table: require_file(table)?,
            }
        }
    };
    Ok(PlotSpec {
        kind,
        output: optional_path(m, "out").unwrap_or_default(),
        title: m.get_one::<String>("title").cloned().unwrap_or_default(),
    })
}

/// Turn parsed matches into a request; range and file checks happen here.
pub fn request_from(matches: &ArgMatches) -> Result<Request> {
    let (name, m) = matches.subcommand().expect("subcommand required");
    Ok(match name {
        "gen-data" => Request::GenData {
            env: parse_value(m, "env")?,
            n: parse_value(m, "n")?,
            seed: parse_value(m, "seed")?,
            out: optional_path(m, "out").unwrap_or_default(),
        },
        "train" => Request::Train {
            config: resolve_config(m)?,
            out: optional_path(m, "out"),
        },
        "sweep" => Request::Sweep {
            config: resolve_config(m)?,
            p_grid: {
                let grid = config::parse_float_list("p_grid", m.get_one::<String>("p_grid").unwrap())?;
                if let Some(bad) = grid.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                    return Err(Error::InvalidConfig {
                        key: "p_grid".into(),
                        reason: format!("{bad} is outside [0, 1]"),
                    });
                }
                grid
            },
            seeds: config::parse_seed_list("seeds", m.get_one::<String>("seeds").unwrap())?,
            out: optional_path(m, "out"),
        },
        "eval" => Request::Eval {
            run: require_file(optional_path(m, "run").unwrap_or_default())?,
            rollouts: match m.get_one::<String>("rollouts") {
                Some(_) => Some(parse_value(m, "rollouts")?),
                None => None,
            },
            seed: parse_value(m, "seed")?,
            out: optional_path(m, "out"),
        },
        "ablate" => Request::Ablate {
            config: resolve_config(m)?,
            seeds: config::parse_seed_list("seeds", m.get_one::<String>("seeds").unwrap())?,
            out: optional_path(m, "out"),
        },
        "theory-check" => Request::TheoryCheck {
            cfg: TheoremSweepConfig {
                instances: parse_value(m, "instances")?,
                seed: parse_value(m, "seed")?,
                tau: parse_value(m, "tau")?,
                gamma: parse_value(m, "gamma")?,
                iters: parse_value(m, "iters")?,
                ..TheoremSweepConfig::default()
            },
            out: optional_path(m, "out"),
        },
        _ => Request::Plot(plot_request(m)?),
    })
}

pub fn parse_cli<I, T>(argv: I) -> std::result::Result<Request, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = command().try_get_matches_from(argv).map_err(CliError::Usage)?;
    request_from(&matches).map_err(CliError::Run)
}

#[derive(Debug)]
pub enum CliError {
    Usage(clap::Error),
    Run(Error),
}

fn format_eval(e: &EvalSummary) -> String {
    let mut parts = vec![format!("reward_mean={:.4}", e.reward_mean)];
    for (name, v) in [
        ("danger_rate", e.danger_rate),
        ("opt_island_rate", e.opt_island_rate),
        ("subopt_island_rate", e.subopt_island_rate),
        ("dist_to_opt", e.dist_to_opt),
    ] {
        if !v.is_nan() {
            parts.push(format!("{name}={v:.4}"));
        }
    }
    parts.join(" ")
}

fn print_rows(rows: &[SweepRow]) {
    for row in rows {
        let (m, s) = row.stat(|e| e.reward_mean);
        println!(
            "{:<20} finished={} diverged={} reward={m:.3}±{s:.3}",
            row.label,
            row.finished().len(),
            row.diverged()
        );
    }
}

fn write_table(out: Option<&Path>, file: &str, text: &str) -> Result<()> {
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(file), text)?;
    }
    Ok(())
}

pub fn execute(request: Request) -> Result<()> {
    match request {
        Request::GenData { env, n, seed, out } => {
            let ds = generate_dataset(env, n, seed)?;
            ds.save(&out)?;
            println!("wrote {} transitions to {}", ds.len(), out.display());
        }
        Request::Train { config, out } => {
            let run = trainer::run_training(&config, out.as_deref())?;
            println!("final {}", format_eval(&run.final_eval));
        }
        Request::Sweep { config, p_grid, seeds, out } => {
            let rows = trainer::p_sweep(&config, &p_grid, &seeds, out.as_deref())?;
            print_rows(&rows);
            write_table(out.as_deref(), "sweep.csv", &sweep_csv(&rows))?;
        }
        Request::Ablate { config, seeds, out } => {
            let rows = trainer::ablate(&config, &seeds, out.as_deref())?;
            print_rows(&rows);
            write_table(out.as_deref(), "ablate.csv", &sweep_csv(&rows))?;
        }
        Request::Eval { run, rollouts, seed, out } => {
            let pairs = config::read_key_values(&run.join("config.txt"))?;
            let mut cfg = TrainConfig::resolve(EnvId::DangerBandit, PolicyKind::Gaussian, &pairs)?;
            if let Some(n) = rollouts {
                cfg.set("eval_rollouts", &n.to_string())?;
                cfg.validate()?;
            }
            let agent = Agent::load(&run.join("checkpoint"), &cfg)?;
            let mut rng = SplitMix64::new(seed);
            println!("{}", format_eval(&evaluate(&agent, &cfg, &mut rng.fork())?));
            if let Some(path) = out {
                if !cfg.env.is_bandit() {
                    return Err(Error::config("out", "action dumps are only available for bandits"));
                }
                let actions = bandit_eval_actions(&agent, &cfg, cfg.eval_rollouts, &mut rng)?;
                let field = cfg.env.reward_field();
                let mut text = String::from("a0,a1,reward\n");
                for i in 0..actions.rows() {
                    let a = actions.row(i);
                    text.push_str(&format!("{},{},{}\n", a[0], a[1], field.evaluate(a)));
                }
                fs::write(&path, text)?;
            }
        }
        Request::TheoryCheck { cfg, out } => {
            let reports = theorem_sweep(&cfg)?;
            println!("instance  seed  p_bound_min  violations  result");
            let mut failed = 0;
            for r in &reports {
                let ok = r.violations == 0;
                failed += usize::from(!ok);
                println!(
                    "{:>8}  {:>4}  {:>11.5}  {:>10}  {}",
                    r.instance,
                    r.seed,
                    r.p_bound_min,
                    r.violations,
                    if ok { "pass" } else { "FAIL" }
                );
            }
            println!("{} of {} instances pass", reports.len() - failed, reports.len());
            if let Some(path) = out {
                fs::write(path, theory_csv(&reports))?;
            }
        }
        Request::Plot(spec) => {
            plot::emit_plot(&spec)?;
            println!("wrote {}", spec.output.display());
        }
    }
    Ok(())
}

/// Parse, execute and map the outcome to an exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match parse_cli(argv) {
        Err(CliError::Usage(e)) => {
            let _ = e.print();
            if e.use_stderr() {
                1
            } else {
                0
            }
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            1
        }
        Ok(request) => match execute(request) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                if e.is_validation() {
                    1
                } else {
                    2
                }
            }
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn train_config(args: &[&str]) -> TrainConfig {
        let mut argv = vec!["isep", "train"];
        argv.extend_from_slice(args);
        match parse_cli(argv).unwrap() {
            Request::Train { config, .. } => config,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn flags_override_preset() {
        let cfg = train_config(&["--env", "danger_bandit", "--p", "0.5", "--seed", "7"]);
        let mut expected = TrainConfig::preset(EnvId::DangerBandit, PolicyKind::Gaussian);
        expected.hp.p = 0.5;
        expected.seed = 7;
        assert_eq!(cfg, expected);
    }

    #[test]
    fn underscore_alias_is_accepted() {
        assert_eq!(train_config(&["--lr_v", "0.5"]).hp.lr_v, 0.5);
        assert_eq!(train_config(&["--lr-v", "0.25"]).hp.lr_v, 0.25);
    }

    #[test]
    fn out_of_range_p_names_the_interval() {
        let err = match parse_cli(["isep", "train", "--p", "1.5"]) {
            Err(CliError::Run(e)) => e,
            other => panic!("{other:?}"),
        };
        assert!(err.is_validation());
        assert!(err.to_string().contains("[0, 1]"), "{err}");
    }

    #[test]
    fn flags_win_over_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        fs::write(&path, "p=0.2\nbeta=0.7\n").unwrap();
        let cfg = train_config(&["--config", path.to_str().unwrap(), "--p", "0.9"]);
        assert_eq!(cfg.hp.p, 0.9);
        assert_eq!(cfg.hp.beta, 0.7);
    }

    #[test]
    fn sweep_children_differ_only_in_p() {
        let req = parse_cli(["isep", "sweep", "--p-grid", "0.0,0.3,0.5,1.0", "--seeds", "3"]).unwrap();
        let Request::Sweep { config, p_grid, seeds, .. } = req else { panic!() };
        assert_eq!(p_grid, vec![0.0, 0.3, 0.5, 1.0]);
        assert_eq!(seeds, vec![3]);
        let children: Vec<TrainConfig> = p_grid
            .iter()
            .map(|&p| {
                let mut c = config.clone();
                c.hp.p = p;
                c
            })
            .collect();
        for c in &children {
            let mut back = c.clone();
            back.hp.p = config.hp.p;
            assert_eq!(back, config);
        }
    }

    #[test]
    fn help_lists_every_key() {
        let help = command().find_subcommand_mut("train").unwrap().render_long_help().to_string();
        for (key, _) in KEYS {
            assert!(help.contains(&format!("--{}", key.replace('_', "-"))), "{key}");
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["isep", "train", "--p", "1.5"]), 1);
        assert_eq!(run(["isep", "train", "--bogus", "1"]), 1);
        assert_eq!(run(["isep", "eval", "--run", "/nonexistent/run"]), 1);
        assert_eq!(run(["isep", "--help"]), 0);
    }
}
