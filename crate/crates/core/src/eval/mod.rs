//! Evaluation of frozen policies under the different attack modes.
//!
//! The defender always acts with its deterministic mean action. Every
//! episode owns its own random streams derived from `(seed, episode)`, so a
//! run is reproducible and episode order does not matter.

mod report;

pub use report::{
    emit_report, merge_rows, parse_metrics_csv, read_metrics_csv, regenerate_report, render_svg, summarize, write_metrics_csv, Condition,
    ConditionSummary, MetricRow, MetricSummary, CSV_HEADER, METRICS_FILE, SUMMARY_FILE,
};

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perturb::{apply_perturbation, generate_perturbation, AgConfig, DifferentiablePolicy, Perturbation};
use crate::rea::{adv_observe, AdvNets, TriggerMask};
use crate::rng;
use crate::diffnet::LogStdBounds;
use crate::simenv::{EnvConfig, WorldState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    None,
    CriticalityAware,
    Continuous,
    /// Baseline: the budget is spent on uniformly random timesteps.
    RandomTrigger,
}

impl AttackMode {
    pub const ALL: [AttackMode; 4] = [
        AttackMode::None,
        AttackMode::CriticalityAware,
        AttackMode::Continuous,
        AttackMode::RandomTrigger,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackMode::None => "none",
            AttackMode::CriticalityAware => "criticality_aware",
            AttackMode::Continuous => "continuous",
            AttackMode::RandomTrigger => "random_trigger",
        }
    }

    pub fn needs_adversary(self) -> bool {
        self != AttackMode::None
    }
}

impl fmt::Display for AttackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::usage(format!(
                    "unknown attack mode {s:?} (expected none|criticality_aware|continuous|random_trigger)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub n_episodes: usize,
    pub attack_mode: AttackMode,
    pub epsilon: f64,
    pub ag_iterations: usize,
    /// Attack budget for the criticality-aware and random-trigger modes.
    pub budget: usize,
    pub seeds: Vec<u64>,
    /// Traffic density overrides `env.density`.
    pub density: f64,
    pub env: EnvConfig,
    pub log_std_bounds: LogStdBounds,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_episodes: 500,
            attack_mode: AttackMode::None,
            epsilon: 0.05,
            ag_iterations: 50,
            budget: 5,
            seeds: vec![0],
            density: 0.5,
            env: EnvConfig::default(),
            log_std_bounds: LogStdBounds::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_episodes == 0 {
            return Err(Error::config("n_episodes must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one evaluation seed is required"));
        }
        if self.budget == 0 && matches!(self.attack_mode, AttackMode::CriticalityAware | AttackMode::RandomTrigger) {
            return Err(Error::config("budgeted attack modes need a positive budget"));
        }
        AgConfig::new(self.epsilon, self.ag_iterations)?;
        self.env_config().validate()
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            density: self.density,
            ..self.env.clone()
        }
    }

    pub fn condition(&self) -> Condition {
        Condition {
            mode: self.attack_mode,
            epsilon: self.epsilon,
            density: self.density,
        }
    }
}

/// Outcome counts and rates of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub episodes: usize,
    pub successes: usize,
    pub collisions: usize,
    pub timeouts: usize,
    /// Success rate.
    pub sr: f64,
    /// Collision rate.
    pub cr: f64,
    /// Mean ego speed over every step of every episode (m/s).
    pub de: f64,
    pub steps: usize,
    pub attacked_steps: usize,
    pub max_attacks_per_episode: usize,
}

impl Metrics {
    fn from_counts(episodes: usize, successes: usize, collisions: usize, speed_sum: f64, steps: usize) -> Self {
        Metrics {
            episodes,
            successes,
            collisions,
            timeouts: episodes - successes - collisions,
            sr: successes as f64 / episodes as f64,
            cr: collisions as f64 / episodes as f64,
            de: if steps > 0 { speed_sum / steps as f64 } else { 0.0 },
            steps,
            attacked_steps: 0,
            max_attacks_per_episode: 0,
        }
    }
}

/// Result of a single episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub success: bool,
    pub collision: bool,
    pub speeds: Vec<f64>,
    pub attacks: usize,
}

fn check_adversary(cfg: &EvalConfig, adversary: Option<&AdvNets>) -> Result<()> {
    if cfg.attack_mode.needs_adversary() && adversary.is_none() {
        return Err(Error::usage(format!("attack mode {} requires an adversary", cfg.attack_mode)));
    }
    Ok(())
}

/// Runs episode `episode` of seed `seed`.
pub fn run_episode<P: DifferentiablePolicy + ?Sized>(
    defender: &P,
    adversary: Option<&AdvNets>,
    cfg: &EvalConfig,
    seed: u64,
    episode: usize,
) -> Result<EpisodeResult> {
    check_adversary(cfg, adversary)?;
    let env = cfg.env_config();
    let env_seed: u64 = rng::stream(seed, "eval-env", &[episode as u64]).random();
    let mut attack_rng = rng::stream(seed, "eval-attack", &[episode as u64]);
    let ag = AgConfig::new(cfg.epsilon, cfg.ag_iterations)?;
    let random_steps: Vec<usize> = if cfg.attack_mode == AttackMode::RandomTrigger {
        let k = cfg.budget.min(env.horizon);
        index::sample(&mut attack_rng, env.horizon, k).into_vec()
    } else {
        Vec::new()
    };

    let (mut world, mut s) = WorldState::reset(&env, env_seed)?;
    let mut n_remain = cfg.budget;
    let mut result = EpisodeResult {
        success: false,
        collision: false,
        speeds: Vec::new(),
        attacks: 0,
    };
    for t in 0.. {
        let s_tilde = match (cfg.attack_mode, adversary) {
            (AttackMode::None, _) | (_, None) => s,
            (mode, Some(adv)) => {
                let mask = match mode {
                    AttackMode::CriticalityAware if n_remain == 0 => TriggerMask::ForceOff,
                    AttackMode::CriticalityAware => TriggerMask::Free,
                    AttackMode::Continuous => TriggerMask::ForceOn,
                    _ if random_steps.contains(&t) => TriggerMask::ForceOn,
                    _ => TriggerMask::ForceOff,
                };
                let shown = if mode == AttackMode::Continuous { cfg.budget.max(1) } else { n_remain };
                let obs = adv_observe(&s, shown, cfg.budget.max(1), defender.deterministic_action(s.as_slice())?)?;
                let step = adv.act(&obs, mask, cfg.log_std_bounds, &mut attack_rng)?;
                let x = step.action.trigger;
                let delta = if x {
                    generate_perturbation(defender, &s, step.action.target, &ag)?
                } else {
                    Perturbation::zero()
                };
                if x {
                    result.attacks += 1;
                    n_remain = n_remain.saturating_sub(1);
                }
                apply_perturbation(&s, &delta, x)
            }
        };
        let out = world.step(defender.deterministic_action(s_tilde.as_slice())?)?;
        result.speeds.push(out.ego_speed);
        s = out.observation;
        if out.done {
            result.success = out.success;
            result.collision = out.collision;
            break;
        }
    }
    Ok(result)
}

/// Evaluates one seed over `cfg.n_episodes` episodes.
pub fn run_evaluation<P: DifferentiablePolicy + ?Sized>(
    defender: &P,
    adversary: Option<&AdvNets>,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Metrics> {
    cfg.validate()?;
    check_adversary(cfg, adversary)?;
    let (mut successes, mut collisions, mut steps, mut attacked, mut max_att) = (0, 0, 0, 0, 0);
    let mut speed_sum = 0.0;
    for e in 0..cfg.n_episodes {
        let ep = run_episode(defender, adversary, cfg, seed, e)?;
        successes += usize::from(ep.success);
        collisions += usize::from(ep.collision);
        steps += ep.speeds.len();
        speed_sum += ep.speeds.iter().sum::<f64>();
        attacked += ep.attacks;
        max_att = max_att.max(ep.attacks);
    }
    let mut m = Metrics::from_counts(cfg.n_episodes, successes, collisions, speed_sum, steps);
    m.attacked_steps = attacked;
    m.max_attacks_per_episode = max_att;
    Ok(m)
}

/// Evaluates every seed in `cfg.seeds`, returning `(seed, metrics)` pairs.
pub fn run_evaluation_seeds<P: DifferentiablePolicy + ?Sized>(
    defender: &P,
    adversary: Option<&AdvNets>,
    cfg: &EvalConfig,
) -> Result<Vec<(u64, Metrics)>> {
    cfg.seeds
        .iter()
        .map(|&seed| Ok((seed, run_evaluation(defender, adversary, cfg, seed)?)))
        .collect()
}

/// Mean and sample standard deviation; the deviation is absent for a
/// single value.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    // shifted by the first value so identical inputs give exactly zero spread
    let mean = values[0] + values.iter().map(|v| v - values[0]).sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, Some((ss / (n - 1) as f64).sqrt()))
}

/// Mean and dispersion of SR, CR and DE across seeds.
pub fn aggregate_seeds(per_seed: &[Metrics]) -> Result<[MetricSummary; 3]> {
    if per_seed.is_empty() {
        return Err(Error::usage("cannot aggregate zero seeds"));
    }
    let pick = |f: fn(&Metrics) -> f64| {
        let v: Vec<f64> = per_seed.iter().map(f).collect();
        let (mean, std) = mean_std(&v);
        MetricSummary { mean, std }
    };
    Ok([pick(|m| m.sr), pick(|m| m.cr), pick(|m| m.de)])
}
