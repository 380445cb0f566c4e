//! Experiment configuration and its `key = value` file format.

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::perturb::AgConfig;
use crate::rea::ReaConfig;
use crate::rtra::RtraConfig;
use crate::simenv::EnvConfig;

/// Training variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Carrl,
    HfrrlContinuous,
    CleanOnly,
    VanillaSac,
    NoCcpo,
    NoDrb,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Carrl,
        Mode::HfrrlContinuous,
        Mode::CleanOnly,
        Mode::VanillaSac,
        Mode::NoCcpo,
        Mode::NoDrb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Carrl => "carrl",
            Mode::HfrrlContinuous => "hfrrl_continuous",
            Mode::CleanOnly => "clean_only",
            Mode::VanillaSac => "vanilla_sac",
            Mode::NoCcpo => "no_ccpo",
            Mode::NoDrb => "no_drb",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown mode {s:?}")))
    }
}

/// When the adversary perturbs the defender during agent phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackSchedule {
    None,
    Budgeted,
    Continuous,
}

/// What a mode switches on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Components {
    pub dual_replay: bool,
    pub consistency: bool,
    pub attack: AttackSchedule,
    pub train_adversary: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub ag: AgConfig,
    pub rea: ReaConfig,
    pub rtra: RtraConfig,
    pub n_iterations: usize,
    pub episodes_per_agent_phase: usize,
    pub episodes_per_adversary_phase: usize,
    pub mode: Mode,
    pub seeds: Vec<u64>,
    /// Explicit component switches; must agree with `mode` when present.
    pub dual_replay: Option<bool>,
    pub consistency: Option<bool>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            ag: AgConfig::default(),
            rea: ReaConfig::default(),
            rtra: RtraConfig::default(),
            n_iterations: 20,
            episodes_per_agent_phase: 500,
            episodes_per_adversary_phase: 500,
            mode: Mode::Carrl,
            seeds: vec![0, 1, 2],
            dual_replay: None,
            consistency: None,
        }
    }
}

/// Resolves a mode (plus explicit switches) into the components it wires.
pub fn configure_ablation(cfg: &ExperimentConfig) -> Result<Components> {
    let (dual_replay, consistency, attack, train_adversary) = match cfg.mode {
        Mode::Carrl => (true, true, AttackSchedule::Budgeted, true),
        Mode::HfrrlContinuous => (true, true, AttackSchedule::Continuous, true),
        Mode::CleanOnly => (true, true, AttackSchedule::None, false),
        Mode::VanillaSac => (false, false, AttackSchedule::None, true),
        Mode::NoCcpo => (true, false, AttackSchedule::Budgeted, true),
        Mode::NoDrb => (false, true, AttackSchedule::Budgeted, true),
    };
    for (name, explicit, implied) in [
        ("dual_replay", cfg.dual_replay, dual_replay),
        ("consistency", cfg.consistency, consistency),
    ] {
        if let Some(v) = explicit {
            if v != implied {
                return Err(Error::config(format!(
                    "{name} = {v} contradicts mode {} (which implies {implied})",
                    cfg.mode
                )));
            }
        }
    }
    Ok(Components {
        dual_replay,
        consistency,
        attack,
        train_adversary,
    })
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse()
        .map_err(|e| Error::config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    v.split(',')
        .map(|p| p.trim())
        .filter(|p| !p.is_empty())
        .map(|p| parse(key, p))
        .collect()
}

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn opt_bool(v: Option<bool>) -> String {
    v.map_or_else(|| "auto".to_string(), |b| b.to_string())
}

fn parse_opt_bool(key: &str, v: &str) -> Result<Option<bool>> {
    if v == "auto" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

type Getter = fn(&ExperimentConfig) -> String;
type Setter = fn(&mut ExperimentConfig, &str, &str) -> Result<()>;

/// A documented configuration key.
pub struct Key {
    pub name: &'static str,
    pub doc: &'static str,
    get: Getter,
    set: Setter,
}

macro_rules! keys {
    ($( $name:literal, $doc:literal, |$c:ident| $field:expr, $kind:ident; )*) => {
        &[$(
            Key {
                name: $name,
                doc: $doc,
                get: |$c| keys!(@get $kind, $field),
                set: |$c, k, v| { keys!(@set $kind, $field, k, v); Ok(()) },
            },
        )*]
    };
    (@get num, $f:expr) => { format!("{:?}", $f) };
    (@get show, $f:expr) => { $f.to_string() };
    (@get list, $f:expr) => { join(&$f) };
    (@get optb, $f:expr) => { opt_bool($f) };
    (@set num, $f:expr, $k:ident, $v:ident) => { $f = parse($k, $v)? };
    (@set show, $f:expr, $k:ident, $v:ident) => { $f = parse($k, $v)? };
    (@set list, $f:expr, $k:ident, $v:ident) => { $f = parse_list($k, $v)? };
    (@set optb, $f:expr, $k:ident, $v:ident) => { $f = parse_opt_bool($k, $v)? };
}

/// Every recognised key, in canonical order.
pub const KEYS: &[Key] = keys! {
    "density", "per-second arrival probability on the oncoming lane", |c| c.env.density, num;
    "v_max", "speed limit (m/s)", |c| c.env.v_max, num;
    "accel_limit", "ego acceleration magnitude at |a| = 1 (m/s^2)", |c| c.env.accel_limit, num;
    "horizon", "maximum steps per episode", |c| c.env.horizon, num;
    "dt", "seconds per control step", |c| c.env.dt, num;
    "substeps", "integration sub-steps per control step", |c| c.env.substeps, num;
    "sensing_range", "neighbour sensing radius (m)", |c| c.env.sensing_range, num;
    "ego_initial_speed", "ego speed at reset (m/s)", |c| c.env.ego_initial_speed, num;
    "warm_up", "seconds of traffic simulated before the ego starts", |c| c.env.warm_up, num;
    "lane_width", "lane width (m)", |c| c.env.geometry.lane_width, num;
    "turn_radius", "left-turn arc radius (m)", |c| c.env.geometry.turn_radius, num;
    "ego_approach", "ego straight approach before the turn (m)", |c| c.env.geometry.ego_approach, num;
    "ego_exit", "ego straight leg after the turn (m)", |c| c.env.geometry.ego_exit, num;
    "oncoming_approach", "oncoming lane length before the conflict area (m)", |c| c.env.geometry.oncoming_approach, num;
    "oncoming_exit", "oncoming lane length after the conflict area (m)", |c| c.env.geometry.oncoming_exit, num;
    "vehicle_length", "vehicle footprint length (m)", |c| c.env.geometry.vehicle_length, num;
    "vehicle_width", "vehicle footprint width (m)", |c| c.env.geometry.vehicle_width, num;
    "idm_desired_speed", "IDM desired speed (m/s)", |c| c.env.idm.desired_speed, num;
    "idm_time_headway", "IDM time headway (s)", |c| c.env.idm.time_headway, num;
    "idm_min_gap", "IDM standstill gap (m)", |c| c.env.idm.min_gap, num;
    "idm_max_accel", "IDM maximum acceleration (m/s^2)", |c| c.env.idm.max_accel, num;
    "idm_comfortable_decel", "IDM comfortable deceleration (m/s^2)", |c| c.env.idm.comfortable_decel, num;
    "idm_exponent", "IDM free-road exponent", |c| c.env.idm.exponent, num;
    "perturbation_epsilon", "L-infinity radius of observation perturbations", |c| c.ag.epsilon, num;
    "ag_iterations", "sign-gradient iterations per perturbation", |c| c.ag.iterations, num;
    "attack_budget", "maximum attacked steps per episode", |c| c.rea.budget, num;
    "gamma", "discount factor for both learners", |c| c.rtra.gamma, num;
    "learning_rate", "optimizer step size for both learners", |c| c.rtra.lr, num;
    "alpha", "entropy temperature", |c| c.rtra.alpha, num;
    "alpha_lambda", "dual ascent step size", |c| c.rtra.alpha_lambda, num;
    "eps_def", "consistency threshold on the KL divergence", |c| c.rtra.eps_def, num;
    "lambda_init", "initial consistency multiplier", |c| c.rtra.lambda_init, num;
    "beta", "attacked fraction of each defender batch", |c| c.rtra.beta, num;
    "batch_size", "defender minibatch size", |c| c.rtra.batch_size, num;
    "buffer_capacity", "capacity of each replay buffer", |c| c.rtra.buffer_capacity, num;
    "tau", "target network soft-update rate", |c| c.rtra.tau, num;
    "warmup_steps", "environment steps before defender updates start", |c| c.rtra.warmup_steps, num;
    "defender_hidden", "defender hidden layer widths", |c| c.rtra.hidden, list;
    "defender_optimizer", "defender optimizer (adam|rmsprop)", |c| c.rtra.optimizer, show;
    "clip_epsilon", "PPO clipping range", |c| c.rea.clip, num;
    "gae_lambda", "GAE smoothing factor", |c| c.rea.gae_lambda, num;
    "ppo_epochs", "passes over each adversary rollout", |c| c.rea.epochs, num;
    "ppo_minibatch", "adversary minibatch size", |c| c.rea.minibatch, num;
    "rollout_length", "adversary steps collected per PPO update", |c| c.rea.rollout_len, num;
    "adversary_hidden", "adversary hidden layer widths", |c| c.rea.hidden, list;
    "adversary_optimizer", "adversary optimizer (adam|rmsprop)", |c| c.rea.optimizer, show;
    "n_iterations", "alternating training iterations", |c| c.n_iterations, num;
    "episodes_per_agent_phase", "defender episodes per iteration", |c| c.episodes_per_agent_phase, num;
    "episodes_per_adversary_phase", "adversary episodes per iteration", |c| c.episodes_per_adversary_phase, num;
    "mode", "carrl|hfrrl_continuous|clean_only|vanilla_sac|no_ccpo|no_drb", |c| c.mode, show;
    "seeds", "comma-separated training seeds", |c| c.seeds, list;
    "dual_replay", "auto|true|false; must agree with mode", |c| c.dual_replay, optb;
    "consistency", "auto|true|false; must agree with mode", |c| c.consistency, optb;
};

impl ExperimentConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = KEYS
            .iter()
            .find(|k| k.name == key)
            .ok_or_else(|| Error::config(format!("unknown key {key:?}")))?;
        (k.set)(self, key, value)?;
        if key == "learning_rate" {
            self.rea.lr = self.rtra.lr;
        }
        if key == "gamma" {
            self.rea.gamma = self.rtra.gamma;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        KEYS.iter().find(|k| k.name == key).map(|k| (k.get)(self))
    }

    /// Canonical text: every key in fixed order, floats printed exactly.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{} = {}\n", k.name, (k.get)(self)))
            .collect()
    }

    /// Hex SHA-256 of [`to_text`](Self::to_text).
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        AgConfig::new(self.ag.epsilon, self.ag.iterations)?;
        configure_ablation(self)?;
        let r = &self.rtra;
        if !(r.gamma > 0.0 && r.gamma <= 1.0) {
            return Err(Error::config(format!("gamma {} outside (0, 1]", r.gamma)));
        }
        if !(r.lr > 0.0 && r.alpha >= 0.0 && r.alpha_lambda >= 0.0 && r.eps_def >= 0.0 && r.lambda_init >= 0.0) {
            return Err(Error::config("learning rates, alpha, alpha_lambda, eps_def and lambda_init must be non-negative (lr positive)"));
        }
        if !(0.0..=1.0).contains(&r.beta) {
            return Err(Error::config(format!("beta {} outside [0, 1]", r.beta)));
        }
        if !(r.tau > 0.0 && r.tau <= 1.0) {
            return Err(Error::config(format!("tau {} outside (0, 1]", r.tau)));
        }
        if r.batch_size == 0 || r.buffer_capacity == 0 {
            return Err(Error::config("batch_size and buffer_capacity must be positive"));
        }
        let a = &self.rea;
        if a.budget == 0 {
            return Err(Error::config("attack_budget must be positive"));
        }
        if !(a.clip > 0.0 && (0.0..=1.0).contains(&a.gae_lambda)) {
            return Err(Error::config("clip_epsilon must be positive and gae_lambda in [0, 1]"));
        }
        if a.epochs == 0 || a.minibatch == 0 || a.rollout_len == 0 {
            return Err(Error::config("ppo_epochs, ppo_minibatch and rollout_length must be positive"));
        }
        if r.hidden.is_empty() || a.hidden.is_empty() || r.hidden.contains(&0) || a.hidden.contains(&0) {
            return Err(Error::config("hidden layer lists must be non-empty with positive widths"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        Ok(())
    }

    pub fn components(&self) -> Result<Components> {
        configure_ablation(self)
    }

    /// Defender settings with the mode's switches applied.
    pub fn rtra_config(&self) -> Result<RtraConfig> {
        let c = self.components()?;
        Ok(RtraConfig {
            dual_replay: c.dual_replay,
            consistency: c.consistency,
            ..self.rtra.clone()
        })
    }
}
