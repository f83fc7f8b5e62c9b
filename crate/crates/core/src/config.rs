//! Run configuration: presets, `key=value` files and per-key overrides.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::critic::HyperParams;
use crate::envs_data::EnvId;
use crate::error::{Error, Result};
use crate::policy_flow::ExpandToken;
use crate::policy_gauss::GateMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    /// Gaussian policy with the Bernoulli-gated likelihood loss.
    Gaussian,
    /// Flow policy with the gated flow-matching loss.
    Flow,
    /// Gaussian policy with both branches blended by fixed weights.
    DeterministicInterpBaseline,
    /// Flow policy regressed on pointwise-interpolated actions.
    FlowDeterministicInterp,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::Gaussian,
        PolicyKind::Flow,
        PolicyKind::DeterministicInterpBaseline,
        PolicyKind::FlowDeterministicInterp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Gaussian => "gaussian",
            PolicyKind::Flow => "flow",
            PolicyKind::DeterministicInterpBaseline => "det_interp",
            PolicyKind::FlowDeterministicInterp => "flow_det_interp",
        }
    }

    pub fn is_flow(self) -> bool {
        matches!(self, PolicyKind::Flow | PolicyKind::FlowDeterministicInterp)
    }

    pub fn is_gated(self) -> bool {
        matches!(self, PolicyKind::Gaussian | PolicyKind::Flow)
    }

    /// The deterministic-interpolation counterpart of a gated kind, and vice versa.
    pub fn counterpart(self) -> Self {
        match self {
            PolicyKind::Gaussian => PolicyKind::DeterministicInterpBaseline,
            PolicyKind::DeterministicInterpBaseline => PolicyKind::Gaussian,
            PolicyKind::Flow => PolicyKind::FlowDeterministicInterp,
            PolicyKind::FlowDeterministicInterp => PolicyKind::Flow,
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gaussian" => Ok(PolicyKind::Gaussian),
            "flow" => Ok(PolicyKind::Flow),
            "det_interp" | "deterministic" => Ok(PolicyKind::DeterministicInterpBaseline),
            "flow_det_interp" => Ok(PolicyKind::FlowDeterministicInterp),
            other => Err(format!(
                "unknown policy `{other}` (gaussian, flow, det_interp or flow_det_interp)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hp: HyperParams,
    pub env: EnvId,
    pub policy_kind: PolicyKind,
    pub total_steps: usize,
    pub eval_every: usize,
    pub eval_rollouts: usize,
    pub seed: u64,
    /// Dataset file; when absent the dataset is generated from `dataset_size` and `dataset_seed`.
    pub dataset_path: Option<PathBuf>,
    pub dataset_size: usize,
    pub dataset_seed: u64,
    /// Hidden widths of the critics and the Gaussian mean net.
    pub hidden: Vec<usize>,
    /// Hidden widths of the flow velocity net.
    pub flow_hidden: Vec<usize>,
    pub gate_mode: GateMode,
    pub expand_token: ExpandToken,
}

/// Every recognized key with a one-line description, in `--help` order.
pub const KEYS: &[(&str, &str)] = &[
    ("env", "environment: danger_bandit, multimodal_bandit or tabular_chain"),
    ("policy", "policy kind: gaussian, flow, det_interp or flow_det_interp"),
    ("steps", "number of training steps"),
    ("eval_every", "evaluate every this many steps (0 = only at the end)"),
    ("eval_rollouts", "policy draws (bandits) or episodes (chain) per evaluation"),
    ("seed", "run seed; fixes network init, batches, gates and noise"),
    ("dataset", "dataset file; generated in memory when unset"),
    ("dataset_size", "transitions to generate when no dataset file is given"),
    ("dataset_seed", "seed for the generated dataset"),
    ("hidden", "comma-separated hidden widths of critics and Gaussian policy"),
    ("flow_hidden", "comma-separated hidden widths of the flow velocity net"),
    ("gate_mode", "per_step or per_element Bernoulli gate"),
    ("expand_token", "conditional used for flow expansion samples: guided, one or null"),
    ("p", "expansion probability in [0, 1]"),
    ("tau", "expectile in (0, 1)"),
    ("beta", "advantage temperature, >= 0"),
    ("w", "classifier-free guidance weight, >= 0"),
    ("gamma", "discount in [0, 1)"),
    ("rho", "Polyak coefficient in (0, 1)"),
    ("lr_v", "value net learning rate"),
    ("lr_q", "Q net learning rate"),
    ("lr_pi", "policy learning rate"),
    ("batch_size", "minibatch size"),
    ("omega_max", "clip for advantage weights"),
    ("flow_steps", "Euler steps when sampling the flow policy"),
    ("token_dropout", "probability of the unconditioned token during flow training"),
];

impl TrainConfig {
    /// Defaults for an environment and policy kind.
    ///
    /// Bandit presets use narrow networks; the default width of 256 is kept
    /// for the chain. The bandit state is constant zero, so with zero biases
    /// every hidden unit of V is silent and only its output bias learns; the
    /// larger `lr_v` lets that bias reach values of order 100.
    pub fn preset(env: EnvId, policy_kind: PolicyKind) -> Self {
        let mut hp = HyperParams::default();
        let (total_steps, eval_every, hidden, flow_hidden, dataset_size) = match env {
            EnvId::DangerBandit => {
                hp.p = 0.3;
                hp.tau = 0.7;
                hp.beta = 0.3;
                hp.w = 1.0;
                hp.lr_v = 1e-2;
                (30_000, 5_000, vec![32, 32], vec![64, 64], 10_000)
            }
            EnvId::MultimodalBandit => {
                hp.p = 0.5;
                hp.tau = 0.5;
                hp.beta = 0.1;
                hp.w = 1.0;
                hp.lr_v = 1e-2;
                (10_000, 2_500, vec![32, 32], vec![64, 64], 10_000)
            }
            EnvId::TabularChain => (5_000, 1_000, vec![256, 256], vec![256, 256], 2_000),
        };
        Self {
            hp,
            env,
            policy_kind,
            total_steps,
            eval_every,
            eval_rollouts: 1_000,
            seed: 0,
            dataset_path: None,
            dataset_size,
            dataset_seed: 0,
            hidden,
            flow_hidden,
            gate_mode: GateMode::PerStep,
            expand_token: ExpandToken::Guided,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        if self.eval_rollouts == 0 {
            return Err(Error::config("eval_rollouts", "must be at least 1"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("hidden", "needs at least one non-zero width"));
        }
        if self.flow_hidden.is_empty() || self.flow_hidden.contains(&0) {
            return Err(Error::config("flow_hidden", "needs at least one non-zero width"));
        }
        if self.dataset_path.is_none() && self.dataset_size == 0 {
            return Err(Error::config("dataset_size", "must be at least 1"));
        }
        Ok(())
    }

    /// Set one key from its textual value. `-` and `_` are interchangeable in keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = normalize_key(key);
        let value = value.trim();
        let hp = &mut self.hp;
        match key.as_str() {
            "env" => self.env = parse_with(&key, value)?,
            "policy" | "policy_kind" => self.policy_kind = parse_with(&key, value)?,
            "steps" | "total_steps" => self.total_steps = parse_num(&key, value)?,
            "eval_every" => self.eval_every = parse_num(&key, value)?,
            "eval_rollouts" => self.eval_rollouts = parse_num(&key, value)?,
            "seed" => self.seed = parse_num(&key, value)?,
            "dataset" | "dataset_path" => {
                self.dataset_path = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "dataset_size" => self.dataset_size = parse_num(&key, value)?,
            "dataset_seed" => self.dataset_seed = parse_num(&key, value)?,
            "hidden" => self.hidden = parse_widths(&key, value)?,
            "flow_hidden" => self.flow_hidden = parse_widths(&key, value)?,
            "gate_mode" => self.gate_mode = parse_with(&key, value)?,
            "expand_token" => self.expand_token = parse_with(&key, value)?,
            "p" => hp.p = parse_num(&key, value)?,
            "tau" => hp.tau = parse_num(&key, value)?,
            "beta" => hp.beta = parse_num(&key, value)?,
            "w" => hp.w = parse_num(&key, value)?,
            "gamma" => hp.gamma = parse_num(&key, value)?,
            "rho" => hp.rho = parse_num(&key, value)?,
            "lr_v" => hp.lr_v = parse_num(&key, value)?,
            "lr_q" => hp.lr_q = parse_num(&key, value)?,
            "lr_pi" => hp.lr_pi = parse_num(&key, value)?,
            "batch_size" => hp.batch_size = parse_num(&key, value)?,
            "omega_max" => hp.omega_max = parse_num(&key, value)?,
            "flow_steps" => hp.flow_steps = parse_num(&key, value)?,
            "token_dropout" => hp.token_dropout = parse_num(&key, value)?,
            _ => return Err(Error::UnknownKey(key)),
        }
        Ok(())
    }

    /// Preset for the environment and policy named in `pairs` (falling back to
    /// `env`/`policy`), then every pair applied in order.
    pub fn resolve(env: EnvId, policy: PolicyKind, pairs: &[(String, String)]) -> Result<Self> {
        let mut env = env;
        let mut policy = policy;
        for (k, v) in pairs {
            match normalize_key(k).as_str() {
                "env" => env = parse_with("env", v.trim())?,
                "policy" | "policy_kind" => policy = parse_with("policy", v.trim())?,
                _ => {}
            }
        }
        let mut cfg = Self::preset(env, policy);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// All keys as `key=value` lines, in [`KEYS`] order.
    pub fn to_key_values(&self) -> String {
        let widths = |w: &[usize]| w.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let hp = &self.hp;
        let values: Vec<(&str, String)> = vec![
            ("env", self.env.to_string()),
            ("policy", self.policy_kind.to_string()),
            ("steps", self.total_steps.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_rollouts", self.eval_rollouts.to_string()),
            ("seed", self.seed.to_string()),
            (
                "dataset",
                self.dataset_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
            ("dataset_size", self.dataset_size.to_string()),
            ("dataset_seed", self.dataset_seed.to_string()),
            ("hidden", widths(&self.hidden)),
            ("flow_hidden", widths(&self.flow_hidden)),
            ("gate_mode", self.gate_mode.to_string()),
            ("expand_token", self.expand_token.to_string()),
            ("p", hp.p.to_string()),
            ("tau", hp.tau.to_string()),
            ("beta", hp.beta.to_string()),
            ("w", hp.w.to_string()),
            ("gamma", hp.gamma.to_string()),
            ("rho", hp.rho.to_string()),
            ("lr_v", hp.lr_v.to_string()),
            ("lr_q", hp.lr_q.to_string()),
            ("lr_pi", hp.lr_pi.to_string()),
            ("batch_size", hp.batch_size.to_string()),
            ("omega_max", hp.omega_max.to_string()),
            ("flow_steps", hp.flow_steps.to_string()),
            ("token_dropout", hp.token_dropout.to_string()),
        ];
        values.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

pub fn normalize_key(key: &str) -> String {
    key.trim().trim_start_matches("--").replace('-', "_")
}

/// Parse a `key=value` file. Blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: format!("expected key=value, got `{line}`"),
        })?;
        let key = normalize_key(k);
        if !KEYS.iter().any(|(name, _)| *name == key) && !matches!(key.as_str(), "policy_kind" | "total_steps" | "dataset_path") {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("unknown config key `{key}`"),
            });
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_key_values(path: &Path) -> Result<Vec<(String, String)>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    parse_key_values(&fs::read_to_string(path)?, path)
}

fn parse_with<T: FromStr<Err = String>>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|e: String| Error::config(key, e))
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}` as a number")))
}

fn parse_widths(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|w| parse_num(key, w.trim())).collect()
}

/// Comma-separated list of floats, e.g. a p grid.
pub fn parse_float_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|w| parse_num(key, w.trim())).collect()
}

/// Comma-separated list of seeds, or a range `a..b` (exclusive).
pub fn parse_seed_list(key: &str, value: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = value.split_once("..") {
        let a: u64 = parse_num(key, a.trim())?;
        let b: u64 = parse_num(key, b.trim())?;
        return Ok((a..b).collect());
    }
    value.split(',').map(|w| parse_num(key, w.trim())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_style_override_keeps_other_defaults() {
        let pairs = vec![("p".to_string(), "0.5".to_string()), ("seed".to_string(), "7".to_string())];
        let cfg = TrainConfig::resolve(EnvId::DangerBandit, PolicyKind::Gaussian, &pairs).unwrap();
        let mut expected = TrainConfig::preset(EnvId::DangerBandit, PolicyKind::Gaussian);
        expected.hp.p = 0.5;
        expected.seed = 7;
        assert_eq!(cfg, expected);
    }

    #[test]
    fn out_of_range_names_the_constraint() {
        let pairs = vec![("p".to_string(), "1.5".to_string())];
        let err = TrainConfig::resolve(EnvId::DangerBandit, PolicyKind::Gaussian, &pairs).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("[0, 1]"), "{err}");
    }

    #[test]
    fn dashes_and_underscores_are_equivalent() {
        let mut a = TrainConfig::preset(EnvId::TabularChain, PolicyKind::Gaussian);
        let mut b = a.clone();
        a.set("lr-v", "0.01").unwrap();
        b.set("lr_v", "0.01").unwrap();
        assert_eq!(a, b);
        assert!(matches!(a.set("bogus", "1"), Err(Error::UnknownKey(_))));
    }

    #[test]
    fn key_values_round_trip() {
        let mut cfg = TrainConfig::preset(EnvId::MultimodalBandit, PolicyKind::Flow);
        cfg.hp.w = 2.5;
        cfg.hidden = vec![16, 8];
        let text = cfg.to_key_values();
        let pairs = parse_key_values(&text, Path::new("cfg")).unwrap();
        assert_eq!(pairs.len(), KEYS.len());
        let back = TrainConfig::resolve(EnvId::DangerBandit, PolicyKind::Gaussian, &pairs).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn parse_errors_report_lines() {
        let err = parse_key_values("p=0.3\n\nnot a pair\n", Path::new("x.cfg")).unwrap_err();
        assert!(err.to_string().starts_with("x.cfg:3:"), "{err}");
        let err = parse_key_values("# c\nzeta=1\n", Path::new("x.cfg")).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn seed_and_grid_lists() {
        assert_eq!(parse_seed_list("seeds", "0..3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seed_list("seeds", "4,9").unwrap(), vec![4, 9]);
        assert_eq!(parse_float_list("p_grid", "0.0,0.3,0.5,1.0").unwrap(), vec![0.0, 0.3, 0.5, 1.0]);
    }
}
