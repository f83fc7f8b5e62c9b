//! Toy environments, offline dataset generation and the dataset text format.
//!
//! Both bandits are single-step: the state is the constant `[0.0]` and every
//! transition terminates, so a Bellman target reduces to the reward.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const DANGER_CENTER: [f64; 2] = [4.0, 4.0];
pub const DANGER_RADIUS: f64 = 1.0;
pub const DANGER_REWARD: f64 = -1000.0;
pub const DANGER_OPTIMUM: [f64; 2] = [2.0, 2.0];

pub const OPT_ISLAND_CENTER: [f64; 2] = [2.0, 2.0];
pub const SUBOPT_ISLAND_CENTER: [f64; 2] = [-2.0, -2.0];
pub const ISLAND_RADIUS: f64 = 1.0;
pub const OPT_ISLAND_PEAK: f64 = 100.0;
pub const SUBOPT_ISLAND_PEAK: f64 = 40.0;
pub const BACKGROUND_REWARD: f64 = -5.0;

/// Chain length of the tabular chain environment.
pub const CHAIN_STATES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnvId {
    DangerBandit,
    MultimodalBandit,
    TabularChain,
}

impl EnvId {
    pub fn name(self) -> &'static str {
        match self {
            EnvId::DangerBandit => "danger_bandit",
            EnvId::MultimodalBandit => "multimodal_bandit",
            EnvId::TabularChain => "tabular_chain",
        }
    }

    pub fn state_dim(self) -> usize {
        1
    }

    pub fn action_dim(self) -> usize {
        2
    }

    pub fn reward_field(self) -> RewardField {
        match self {
            EnvId::DangerBandit => RewardField::danger(),
            EnvId::MultimodalBandit => RewardField::multimodal(),
            EnvId::TabularChain => RewardField::Chain,
        }
    }

    /// Largest reward magnitude the environment can emit.
    pub fn r_max(self) -> f64 {
        match self {
            EnvId::DangerBandit => DANGER_REWARD.abs(),
            EnvId::MultimodalBandit => OPT_ISLAND_PEAK,
            EnvId::TabularChain => 1.0,
        }
    }

    /// Box that evaluated actions are clamped to.
    pub fn action_box(self) -> (f64, f64) {
        match self {
            EnvId::DangerBandit | EnvId::MultimodalBandit => (-5.0, 5.0),
            EnvId::TabularChain => (-1.0, 1.0),
        }
    }

    /// The constant state at which a bandit policy is queried.
    pub fn eval_state(self) -> Vec<f64> {
        vec![0.0]
    }

    pub fn is_bandit(self) -> bool {
        !matches!(self, EnvId::TabularChain)
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "danger_bandit" | "danger" => Ok(EnvId::DangerBandit),
            "multimodal_bandit" | "multimodal" => Ok(EnvId::MultimodalBandit),
            "tabular_chain" | "chain" => Ok(EnvId::TabularChain),
            other => Err(format!(
                "unknown env `{other}` (expected danger_bandit, multimodal_bandit or tabular_chain)"
            )),
        }
    }
}

fn dist2(a: &[f64], c: [f64; 2]) -> f64 {
    (a[0] - c[0]).powi(2) + (a[1] - c[1]).powi(2)
}

pub fn danger_bandit_reward(action: &[f64]) -> f64 {
    if dist2(action, DANGER_CENTER) <= DANGER_RADIUS * DANGER_RADIUS {
        DANGER_REWARD
    } else {
        -10.0 * dist2(action, DANGER_OPTIMUM) + 100.0
    }
}

pub fn multimodal_bandit_reward(action: &[f64]) -> f64 {
    let r2 = ISLAND_RADIUS * ISLAND_RADIUS;
    let d_opt = dist2(action, OPT_ISLAND_CENTER);
    if d_opt <= r2 {
        return OPT_ISLAND_PEAK * (1.0 - d_opt / r2);
    }
    let d_sub = dist2(action, SUBOPT_ISLAND_CENTER);
    if d_sub <= r2 {
        return SUBOPT_ISLAND_PEAK * (1.0 - d_sub / r2);
    }
    BACKGROUND_REWARD
}

pub fn in_danger_zone(action: &[f64]) -> bool {
    dist2(action, DANGER_CENTER) <= DANGER_RADIUS * DANGER_RADIUS
}

pub fn in_optimal_island(action: &[f64]) -> bool {
    dist2(action, OPT_ISLAND_CENTER) <= ISLAND_RADIUS * ISLAND_RADIUS
}

pub fn in_suboptimal_island(action: &[f64]) -> bool {
    dist2(action, SUBOPT_ISLAND_CENTER) <= ISLAND_RADIUS * ISLAND_RADIUS
}

/// Chain step: `action[0] > 0` moves right. Reaching the right end pays 1 and terminates.
pub fn chain_step(state: f64, action: &[f64]) -> (f64, f64, bool) {
    let last = (CHAIN_STATES - 1) as f64;
    let idx = (state * last).round();
    let next = if action[0] > 0.0 {
        (idx + 1.0).min(last)
    } else {
        (idx - 1.0).max(0.0)
    };
    let done = next == last;
    let reward = if done { 1.0 } else { 0.0 };
    (next / last, reward, done)
}

/// Reward landscape of an environment, evaluable anywhere in ℝ².
#[derive(Debug, Clone, PartialEq)]
pub enum RewardField {
    Danger {
        optimum: [f64; 2],
        danger_center: [f64; 2],
        danger_radius: f64,
        danger_reward: f64,
    },
    Multimodal {
        optimal_center: [f64; 2],
        suboptimal_center: [f64; 2],
        radius: f64,
        optimal_peak: f64,
        suboptimal_peak: f64,
        background: f64,
    },
    /// Rewards depend on the state; the field is zero everywhere in action space.
    Chain,
}

impl RewardField {
    pub fn danger() -> Self {
        RewardField::Danger {
            optimum: DANGER_OPTIMUM,
            danger_center: DANGER_CENTER,
            danger_radius: DANGER_RADIUS,
            danger_reward: DANGER_REWARD,
        }
    }

    pub fn multimodal() -> Self {
        RewardField::Multimodal {
            optimal_center: OPT_ISLAND_CENTER,
            suboptimal_center: SUBOPT_ISLAND_CENTER,
            radius: ISLAND_RADIUS,
            optimal_peak: OPT_ISLAND_PEAK,
            suboptimal_peak: SUBOPT_ISLAND_PEAK,
            background: BACKGROUND_REWARD,
        }
    }

    pub fn evaluate(&self, action: &[f64]) -> f64 {
        match *self {
            RewardField::Danger {
                optimum,
                danger_center,
                danger_radius,
                danger_reward,
            } => {
                if dist2(action, danger_center) <= danger_radius * danger_radius {
                    danger_reward
                } else {
                    -10.0 * dist2(action, optimum) + 100.0
                }
            }
            RewardField::Multimodal {
                optimal_center,
                suboptimal_center,
                radius,
                optimal_peak,
                suboptimal_peak,
                background,
            } => {
                let r2 = radius * radius;
                let d = dist2(action, optimal_center);
                if d <= r2 {
                    return optimal_peak * (1.0 - d / r2);
                }
                let d = dist2(action, suboptimal_center);
                if d <= r2 {
                    return suboptimal_peak * (1.0 - d / r2);
                }
                background
            }
            RewardField::Chain => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub transitions: Vec<Transition>,
    pub env_id: EnvId,
    pub rng_seed: u64,
}

impl OfflineDataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.transitions.first().map_or(0, |t| t.state.len())
    }

    pub fn action_dim(&self) -> usize {
        self.transitions.first().map_or(0, |t| t.action.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.transitions.is_empty() {
            return Err(Error::config("dataset", "dataset is empty"));
        }
        for (i, t) in self.transitions.iter().enumerate() {
            if !t.reward.is_finite() || t.action.iter().chain(&t.state).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("dataset transition {i}"),
                });
            }
            if self.env_id.is_bandit() && !t.done {
                return Err(Error::config("dataset", format!("bandit transition {i} is not terminal")));
            }
        }
        Ok(())
    }

    /// Best reward present in the data.
    pub fn max_reward(&self) -> f64 {
        self.transitions
            .iter()
            .map(|t| t.reward)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(
            w,
            "isep-dataset v1 {} {} {}",
            self.env_id,
            self.transitions.len(),
            self.rng_seed
        )?;
        for t in &self.transitions {
            writeln!(
                w,
                "{},{},{},{},{}",
                t.state[0],
                t.action[0],
                t.action[1],
                t.reward,
                u8::from(t.done)
            )?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::read_from(BufReader::new(std::fs::File::open(path)?), path)
    }

    pub fn read_from(r: impl BufRead, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, reason: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| parse_err(1, "empty file".into()))??;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 || fields[0] != "isep-dataset" || fields[1] != "v1" {
            return Err(parse_err(1, format!("bad header `{header}`")));
        }
        let env_id: EnvId = fields[2].parse().map_err(|e| parse_err(1, e))?;
        let n: usize = fields[3]
            .parse()
            .map_err(|_| parse_err(1, format!("bad count `{}`", fields[3])))?;
        let rng_seed: u64 = fields[4]
            .parse()
            .map_err(|_| parse_err(1, format!("bad seed `{}`", fields[4])))?;

        let mut transitions = Vec::with_capacity(n);
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 5 {
                return Err(parse_err(line_no, format!("expected 5 columns, got {}", cols.len())));
            }
            let num = |j: usize| -> Result<f64> {
                cols[j]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(line_no, format!("bad number `{}`", cols[j])))
            };
            let s0 = num(0)?;
            let action = vec![num(1)?, num(2)?];
            let reward = num(3)?;
            let done = match cols[4].trim() {
                "1" | "true" => true,
                "0" | "false" => false,
                other => return Err(parse_err(line_no, format!("bad done flag `{other}`"))),
            };
            let next_state = match env_id {
                EnvId::TabularChain => vec![chain_step(s0, &action).0],
                _ => vec![s0],
            };
            transitions.push(Transition {
                state: vec![s0],
                action,
                reward,
                next_state,
                done,
            });
        }
        if transitions.len() != n {
            return Err(parse_err(
                1,
                format!("header declares {n} transitions, found {}", transitions.len()),
            ));
        }
        let ds = OfflineDataset {
            transitions,
            env_id,
            rng_seed,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn bandit_transition(action: [f64; 2], reward: f64) -> Transition {
    Transition {
        state: vec![0.0],
        action: action.to_vec(),
        reward,
        next_state: vec![0.0],
        done: true,
    }
}

/// `n` uniform actions on [−2, 2]², rewarded by the danger landscape.
pub fn generate_danger_dataset(n: usize, seed: u64) -> Result<OfflineDataset> {
    if n == 0 {
        return Err(Error::config("dataset_size", "must be at least 1"));
    }
    let mut rng = SplitMix64::new(seed);
    let transitions = (0..n)
        .map(|_| {
            let a = [rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)];
            bandit_transition(a, danger_bandit_reward(&a))
        })
        .collect();
    Ok(OfflineDataset {
        transitions,
        env_id: EnvId::DangerBandit,
        rng_seed: seed,
    })
}

/// 90 % of actions uniform in the suboptimal island, the rest in the optimal one.
pub fn generate_multimodal_dataset(n: usize, seed: u64) -> Result<OfflineDataset> {
    if n < 10 {
        return Err(Error::config("dataset_size", "multimodal dataset needs at least 10 samples"));
    }
    let mut rng = SplitMix64::new(seed);
    let n_sub = n * 9 / 10;
    let transitions = (0..n)
        .map(|i| {
            let center = if i < n_sub {
                SUBOPT_ISLAND_CENTER
            } else {
                OPT_ISLAND_CENTER
            };
            let a = rng.in_disk(center, ISLAND_RADIUS);
            bandit_transition(a, multimodal_bandit_reward(&a))
        })
        .collect();
    Ok(OfflineDataset {
        transitions,
        env_id: EnvId::MultimodalBandit,
        rng_seed: seed,
    })
}

/// Uniformly random behavior on the chain, states drawn uniformly from the non-terminal ones.
pub fn generate_chain_dataset(n: usize, seed: u64) -> Result<OfflineDataset> {
    if n == 0 {
        return Err(Error::config("dataset_size", "must be at least 1"));
    }
    let mut rng = SplitMix64::new(seed);
    let last = (CHAIN_STATES - 1) as f64;
    let transitions = (0..n)
        .map(|_| {
            let s = rng.below(CHAIN_STATES - 1) as f64 / last;
            let a = vec![rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)];
            let (next, reward, done) = chain_step(s, &a);
            Transition {
                state: vec![s],
                action: a,
                reward,
                next_state: vec![next],
                done,
            }
        })
        .collect();
    Ok(OfflineDataset {
        transitions,
        env_id: EnvId::TabularChain,
        rng_seed: seed,
    })
}

pub fn generate_dataset(env: EnvId, n: usize, seed: u64) -> Result<OfflineDataset> {
    match env {
        EnvId::DangerBandit => generate_danger_dataset(n, seed),
        EnvId::MultimodalBandit => generate_multimodal_dataset(n, seed),
        EnvId::TabularChain => generate_chain_dataset(n, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn danger_reward_values() {
        assert_eq!(danger_bandit_reward(&[2.0, 2.0]), 100.0);
        assert_eq!(danger_bandit_reward(&[4.0, 4.0]), -1000.0);
        assert_eq!(danger_bandit_reward(&[0.0, 0.0]), 20.0);
        // Hard override right at the rim, quadratic just outside.
        assert_eq!(danger_bandit_reward(&[5.0, 4.0]), -1000.0);
        assert!((danger_bandit_reward(&[5.0 + 1e-9, 4.0]) + 30.0).abs() < 1e-6);
    }

    #[test]
    fn multimodal_reward_values() {
        assert_eq!(multimodal_bandit_reward(&[2.0, 2.0]), 100.0);
        assert_eq!(multimodal_bandit_reward(&[0.0, 0.0]), -5.0);
        assert_eq!(multimodal_bandit_reward(&[-2.0, -2.0]), 40.0);
        assert_eq!(multimodal_bandit_reward(&[2.5, 2.0]), 75.0);
        assert_eq!(multimodal_bandit_reward(&[3.0, 2.0]), 0.0);
    }

    #[test]
    fn reward_field_matches_free_functions() {
        let danger = RewardField::danger();
        let multi = RewardField::multimodal();
        let mut rng = SplitMix64::new(77);
        for _ in 0..2000 {
            let a = [rng.uniform(-6.0, 6.0), rng.uniform(-6.0, 6.0)];
            assert_eq!(danger.evaluate(&a), danger_bandit_reward(&a));
            assert_eq!(multi.evaluate(&a), multimodal_bandit_reward(&a));
        }
    }

    #[test]
    fn danger_dataset_support_and_mean() {
        let ds = generate_danger_dataset(10_000, 1).unwrap();
        assert_eq!(ds.len(), 10_000);
        let mut mean = [0.0; 2];
        for t in &ds.transitions {
            assert!(t.action.iter().all(|v| (-2.0..=2.0).contains(v)));
            assert!(t.done);
            assert_eq!(t.state, vec![0.0]);
            mean[0] += t.action[0] / 10_000.0;
            mean[1] += t.action[1] / 10_000.0;
        }
        assert!(mean[0].abs() < 0.05 && mean[1].abs() < 0.05, "{mean:?}");
        assert_eq!(generate_danger_dataset(1, 3).unwrap().len(), 1);
    }

    #[test]
    fn multimodal_split() {
        let ds = generate_multimodal_dataset(1000, 2).unwrap();
        let sub = ds.transitions.iter().filter(|t| in_suboptimal_island(&t.action)).count();
        let opt = ds.transitions.iter().filter(|t| in_optimal_island(&t.action)).count();
        assert_eq!((sub, opt), (900, 100));
        assert!(ds.transitions.iter().all(|t| t.reward >= 0.0 && t.reward != -5.0));

        let small = generate_multimodal_dataset(10, 2).unwrap();
        let sub = small.transitions.iter().filter(|t| in_suboptimal_island(&t.action)).count();
        assert_eq!(sub, 9);
        assert!(generate_multimodal_dataset(9, 2).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_danger_dataset(500, 99).unwrap();
        let b = generate_danger_dataset(500, 99).unwrap();
        assert_eq!(a, b);
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        a.write_to(&mut ba).unwrap();
        b.write_to(&mut bb).unwrap();
        assert_eq!(ba, bb);
        assert_ne!(a, generate_danger_dataset(500, 100).unwrap());
    }

    #[test]
    fn file_round_trip_and_header() {
        for env in [EnvId::DangerBandit, EnvId::MultimodalBandit, EnvId::TabularChain] {
            let ds = generate_dataset(env, 50, 4).unwrap();
            let mut buf = Vec::new();
            ds.write_to(&mut buf).unwrap();
            let text = String::from_utf8(buf.clone()).unwrap();
            assert_eq!(text.lines().next().unwrap(), format!("isep-dataset v1 {env} 50 4"));
            let back = OfflineDataset::read_from(&buf[..], Path::new("mem")).unwrap();
            assert_eq!(back, ds);
        }
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let text = "isep-dataset v1 danger_bandit 2 0\n0,1,1,80,1\n0,x,1,80,1\n";
        let err = OfflineDataset::read_from(text.as_bytes(), Path::new("d.csv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let short = "isep-dataset v1 danger_bandit 3 0\n0,1,1,80,1\n";
        assert!(OfflineDataset::read_from(short.as_bytes(), Path::new("d.csv")).is_err());
    }

    #[test]
    fn chain_dynamics() {
        assert_eq!(chain_step(0.0, &[0.5, 0.0]), (0.25, 0.0, false));
        assert_eq!(chain_step(0.0, &[-0.5, 0.0]), (0.0, 0.0, false));
        assert_eq!(chain_step(0.75, &[0.1, 0.0]), (1.0, 1.0, true));
    }
}
