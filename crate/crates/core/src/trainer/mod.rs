//! Alternating adversary/defender training.
//!
//! Each iteration runs an agent phase (the defender learns while a frozen
//! adversary perturbs its observations) and then an adversary phase (PPO
//! against the frozen defender). The first agent phase is clean because no
//! trained adversary exists yet.

pub mod checkpoint;
mod config;

pub use config::{configure_ablation, AttackSchedule, Components, ExperimentConfig, Key, Mode, KEYS};

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perturb::{apply_perturbation, generate_perturbation, Perturbation};
use crate::rea::{adv_observe, adv_reward, budget_mask, Rea, RolloutBuffer, RolloutRecord};
use crate::rng::{self, Stream};
use crate::rtra::{DefenderActor, DualReplayBuffer, Rtra, Transition};
use crate::simenv::{EgoObservation, WorldState};
use checkpoint::{
    with_heads, DefenderFile, Reader, Writer, ADVERSARY_HEADS, DEFENDER_HEADS, ROLE_TRAINING,
};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const HALT_FILE: &str = "halt.ckpt";
pub const DEFENDER_FILE: &str = "defender.ckpt";
pub const ADVERSARY_FILE: &str = "adversary.ckpt";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Agent,
    Adversary,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub phase: Phase,
    pub episodes: usize,
    /// Defender return in agent phases, adversary return in adversary phases.
    pub mean_return: f64,
    pub collisions: usize,
    pub lambda_def: f64,
    /// Mean consistency cost over the phase's defender updates.
    pub c_consist: f64,
    pub wall_time_s: f64,
}

impl LogRecord {
    /// Equality on every field except the wall-clock time.
    pub fn same_outcome(&self, other: &LogRecord) -> bool {
        LogRecord {
            wall_time_s: 0.0,
            ..self.clone()
        } == LogRecord {
            wall_time_s: 0.0,
            ..other.clone()
        }
    }
}

/// Complete training state; everything needed to resume bit-exactly.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub components: Components,
    pub seed: u64,
    pub rtra: Rtra,
    pub rea: Rea,
    /// Iteration and phase that run next.
    pub iteration: usize,
    pub phase: Phase,
    /// Defender environment steps so far, for the update warm-up.
    pub env_steps: u64,
    pub log: Vec<LogRecord>,
    /// Largest number of attacked steps seen in any single episode.
    pub max_attacks_per_episode: usize,
    agent_rng: Stream,
    adv_rng: Stream,
}

fn episode_seed(seed: u64, phase: Phase, iteration: usize, episode: usize) -> u64 {
    let code = match phase {
        Phase::Agent => 0,
        Phase::Adversary => 1,
    };
    rng::stream(seed, "episode", &[code, iteration as u64, episode as u64]).random()
}

/// Adversary decision and resulting perturbation for one step.
struct AttackStep {
    obs: crate::rea::AdvObservation,
    step: crate::rea::AdvStep,
    delta: Perturbation,
}

fn attack_step<R: Rng + ?Sized>(
    rea: &Rea,
    defender: &DefenderActor,
    trainer_cfg: &ExperimentConfig,
    schedule: AttackSchedule,
    s: &EgoObservation,
    n_remain: usize,
    rng: &mut R,
) -> Result<AttackStep> {
    use crate::perturb::DifferentiablePolicy;
    let budget = rea.cfg.budget;
    let continuous = schedule == AttackSchedule::Continuous;
    let shown = if continuous { budget } else { n_remain };
    let a_clean = defender.deterministic_action(s.as_slice())?;
    let obs = adv_observe(s, shown, budget, a_clean)?;
    let step = rea
        .nets
        .act(&obs, budget_mask(n_remain, continuous), rea.cfg.log_std_bounds, rng)?;
    let delta = if step.action.trigger {
        generate_perturbation(defender, s, step.action.target, &trainer_cfg.ag)?
    } else {
        Perturbation::zero()
    };
    Ok(AttackStep { obs, step, delta })
}

impl Trainer {
    pub fn new(cfg: ExperimentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let components = cfg.components()?;
        let mut init = rng::stream(seed, "init", &[]);
        let rtra = Rtra::new(cfg.rtra_config()?, &mut init)?;
        let rea = Rea::new(cfg.rea.clone(), &mut init)?;
        Ok(Self {
            components,
            seed,
            rtra,
            rea,
            iteration: 0,
            phase: Phase::Agent,
            env_steps: 0,
            log: Vec::new(),
            max_attacks_per_episode: 0,
            agent_rng: rng::stream(seed, "agent", &[]),
            adv_rng: rng::stream(seed, "adversary", &[]),
            cfg,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.cfg.n_iterations
    }

    fn advance(&mut self) {
        match self.phase {
            Phase::Agent if self.components.train_adversary => self.phase = Phase::Adversary,
            _ => {
                self.phase = Phase::Agent;
                self.iteration += 1;
            }
        }
    }

    /// Runs the next phase and appends its log record.
    pub fn run_phase(&mut self) -> Result<LogRecord> {
        if self.is_finished() {
            return Err(Error::usage("training already finished"));
        }
        let start = Instant::now();
        let mut rec = match self.phase {
            Phase::Agent => self.agent_phase()?,
            Phase::Adversary => self.adversary_phase()?,
        };
        rec.wall_time_s = start.elapsed().as_secs_f64();
        self.log.push(rec.clone());
        self.advance();
        Ok(rec)
    }

    fn agent_phase(&mut self) -> Result<LogRecord> {
        let schedule = if self.iteration == 0 {
            AttackSchedule::None
        } else {
            self.components.attack
        };
        let n = self.cfg.episodes_per_agent_phase;
        let warmup = self.rtra.cfg.warmup_steps as u64;
        let (mut ret_sum, mut collisions) = (0.0, 0);
        let (mut c_sum, mut c_count) = (0.0, 0usize);
        for e in 0..n {
            let (mut world, mut s) = WorldState::reset(&self.cfg.env, episode_seed(self.seed, Phase::Agent, self.iteration, e))?;
            let mut n_remain = self.rea.cfg.budget;
            let mut attacks = 0;
            loop {
                let (attacked, s_tilde) = if schedule == AttackSchedule::None {
                    (false, s)
                } else {
                    let a = attack_step(&self.rea, &self.rtra.nets.actor, &self.cfg, schedule, &s, n_remain, &mut self.agent_rng)?;
                    let x = a.step.action.trigger;
                    if x && schedule == AttackSchedule::Budgeted {
                        n_remain -= 1;
                    }
                    (x, apply_perturbation(&s, &a.delta, x))
                };
                let action = if self.env_steps < warmup {
                    self.agent_rng.random_range(-1.0..=1.0)
                } else {
                    self.rtra.act(&s_tilde, &mut self.agent_rng)?
                };
                let out = world.step(action)?;
                self.rtra.buffer.store(Transition {
                    s_tilde,
                    s,
                    action,
                    reward: out.reward,
                    s_next: out.observation,
                    done: out.done,
                    attacked,
                });
                self.env_steps += 1;
                ret_sum += out.reward;
                if self.env_steps >= warmup && self.rtra.buffer.len() >= self.rtra.cfg.batch_size {
                    let stats = self.rtra.update(&mut self.agent_rng)?;
                    c_sum += stats.actor.consistency;
                    c_count += 1;
                }
                attacks += usize::from(attacked);
                s = out.observation;
                if out.done {
                    collisions += usize::from(out.collision);
                    break;
                }
            }
            self.max_attacks_per_episode = self.max_attacks_per_episode.max(attacks);
        }
        Ok(LogRecord {
            iteration: self.iteration,
            phase: Phase::Agent,
            episodes: n,
            mean_return: ret_sum / n.max(1) as f64,
            collisions,
            lambda_def: self.rtra.lambda,
            c_consist: if c_count > 0 { c_sum / c_count as f64 } else { 0.0 },
            wall_time_s: 0.0,
        })
    }

    fn adversary_phase(&mut self) -> Result<LogRecord> {
        let defender = self.rtra.nets.actor.clone();
        let schedule = match self.components.attack {
            AttackSchedule::None => AttackSchedule::Budgeted,
            s => s,
        };
        let n = self.cfg.episodes_per_adversary_phase;
        let (gamma, lambda) = (self.rea.cfg.gamma, self.rea.cfg.gae_lambda);
        let mut rollout = RolloutBuffer::default();
        let (mut ret_sum, mut collisions) = (0.0, 0);
        for e in 0..n {
            let (mut world, mut s) = WorldState::reset(&self.cfg.env, episode_seed(self.seed, Phase::Adversary, self.iteration, e))?;
            let mut n_remain = self.rea.cfg.budget;
            let mut attacks = 0;
            loop {
                let a = attack_step(&self.rea, &defender, &self.cfg, schedule, &s, n_remain, &mut self.adv_rng)?;
                let x = a.step.action.trigger;
                if x && schedule == AttackSchedule::Budgeted {
                    n_remain -= 1;
                }
                let s_tilde = apply_perturbation(&s, &a.delta, x);
                let action = crate::perturb::DifferentiablePolicy::deterministic_action(&defender, s_tilde.as_slice())?;
                let out = world.step(action)?;
                let reward = adv_reward(&out);
                ret_sum += reward;
                rollout.push(RolloutRecord {
                    obs: a.obs,
                    step: a.step,
                    reward,
                    done: out.done,
                });
                attacks += usize::from(x);
                s = out.observation;
                if out.done {
                    collisions += usize::from(out.collision);
                    break;
                }
            }
            self.max_attacks_per_episode = self.max_attacks_per_episode.max(attacks);
            if rollout.len() >= self.rea.cfg.rollout_len {
                rollout.finish(gamma, lambda, 0.0);
                self.rea.update(&rollout, &mut self.adv_rng)?;
                rollout.clear();
            }
        }
        if !rollout.is_empty() {
            rollout.finish(gamma, lambda, 0.0);
            self.rea.update(&rollout, &mut self.adv_rng)?;
        }
        Ok(LogRecord {
            iteration: self.iteration,
            phase: Phase::Adversary,
            episodes: n,
            mean_return: ret_sum / n.max(1) as f64,
            collisions,
            lambda_def: self.rtra.lambda,
            c_consist: 0.0,
            wall_time_s: 0.0,
        })
    }

    pub fn defender_file(&self) -> DefenderFile {
        DefenderFile {
            actor: self.rtra.nets.actor.clone(),
            q1: self.rtra.nets.q1.clone(),
            q2: self.rtra.nets.q2.clone(),
            lambda: self.rtra.lambda,
            alpha: self.rtra.cfg.alpha,
        }
    }

    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|r| serde_json::to_string(r).expect("log record serialises") + "\n")
            .collect()
    }

    /// Writes the log, the resumable checkpoint and both policy files.
    pub fn save_outputs(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out)?;
        fs::write(out.join(CONFIG_FILE), self.cfg.to_text())?;
        fs::write(out.join(LOG_FILE), self.log_jsonl())?;
        write_atomic(&out.join(CHECKPOINT_FILE), &self.encode())?;
        checkpoint::save_defender(&out.join(DEFENDER_FILE), &self.defender_file())?;
        checkpoint::save_adversary(&out.join(ADVERSARY_FILE), &self.rea.nets)?;
        Ok(())
    }

    /// Runs every remaining phase, saving after each when `out` is given.
    /// A failing phase leaves a diagnostic snapshot in `halt.ckpt`.
    pub fn run(&mut self, out: Option<&Path>) -> Result<()> {
        while !self.is_finished() {
            if let Err(e) = self.run_phase() {
                if let Some(dir) = out {
                    fs::create_dir_all(dir)?;
                    fs::write(dir.join(HALT_FILE), self.encode())?;
                }
                return Err(e);
            }
            if let Some(dir) = out {
                self.save_outputs(dir)?;
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new(ROLE_TRAINING);
        w.str(&self.cfg.to_text());
        w.str(&self.cfg.hash());
        w.u64(self.seed);
        w.u64(self.iteration as u64);
        w.u8(match self.phase {
            Phase::Agent => 0,
            Phase::Adversary => 1,
        });
        w.u64(self.env_steps);
        w.u64(self.max_attacks_per_episode as u64);
        let n = &self.rtra.nets;
        for net in [&n.actor.0, &n.q1, &n.q2, &n.q1_target, &n.q2_target] {
            w.net(net);
        }
        w.optimizer(&self.rtra.actor_opt);
        w.optimizer(&self.rtra.q1_opt);
        w.optimizer(&self.rtra.q2_opt);
        w.f64(self.rtra.lambda);
        w.u64(self.rtra.updates);
        w.ring(&self.rtra.buffer.normal);
        w.ring(&self.rtra.buffer.attack);
        w.net(&self.rea.nets.actor);
        w.net(&self.rea.nets.critic);
        w.optimizer(&self.rea.actor_opt);
        w.optimizer(&self.rea.critic_opt);
        w.rng(&rng::capture(&self.agent_rng));
        w.rng(&rng::capture(&self.adv_rng));
        w.str(&self.log_jsonl());
        w.0
    }

    /// Restores a training checkpoint. With `expected`, refuses files whose
    /// configuration hash differs.
    pub fn decode(bytes: &[u8], expected: Option<&ExperimentConfig>) -> Result<Self> {
        let mut r = Reader::new(bytes, ROLE_TRAINING)?;
        let text = r.string()?;
        let hash = r.string()?;
        let cfg = ExperimentConfig::parse(&text)?;
        if cfg.hash() != hash {
            return Err(Error::format("embedded configuration does not match its hash"));
        }
        if let Some(want) = expected {
            if want.hash() != hash {
                return Err(Error::config(format!(
                    "checkpoint config hash {hash} does not match {}",
                    want.hash()
                )));
            }
        }
        let seed = r.u64()?;
        let mut t = Trainer::new(cfg, seed)?;
        t.iteration = r.u64()? as usize;
        t.phase = match r.u8()? {
            0 => Phase::Agent,
            1 => Phase::Adversary,
            b => return Err(Error::format(format!("bad phase byte {b}"))),
        };
        t.env_steps = r.u64()?;
        t.max_attacks_per_episode = r.u64()? as usize;
        let lr = t.cfg.rtra.lr;
        let nets = &mut t.rtra.nets;
        nets.actor = DefenderActor(with_heads(r.net()?, DEFENDER_HEADS)?);
        nets.q1 = r.net()?;
        nets.q2 = r.net()?;
        nets.q1_target = r.net()?;
        nets.q2_target = r.net()?;
        t.rtra.actor_opt = r.optimizer(lr)?;
        t.rtra.q1_opt = r.optimizer(lr)?;
        t.rtra.q2_opt = r.optimizer(lr)?;
        t.rtra.lambda = r.f64()?;
        t.rtra.updates = r.u64()?;
        let normal = r.ring()?;
        let attack = r.ring()?;
        t.rtra.buffer = DualReplayBuffer {
            normal,
            attack,
            ..t.rtra.buffer.clone()
        };
        t.rea.nets.actor = with_heads(r.net()?, ADVERSARY_HEADS)?;
        t.rea.nets.critic = r.net()?;
        t.rea.actor_opt = r.optimizer(t.cfg.rea.lr)?;
        t.rea.critic_opt = r.optimizer(t.cfg.rea.lr)?;
        t.agent_rng = rng::restore(&r.rng()?);
        t.adv_rng = rng::restore(&r.rng()?);
        let log = r.string()?;
        r.finish()?;
        t.log = log
            .lines()
            .map(|l| serde_json::from_str(l).map_err(|e| Error::format(format!("bad log line: {e}"))))
            .collect::<Result<_>>()?;
        check_shapes(&t)?;
        Ok(t)
    }

    pub fn load(path: &Path, expected: Option<&ExperimentConfig>) -> Result<Self> {
        Self::decode(&fs::read(path)?, expected)
    }
}

fn check_shapes(t: &Trainer) -> Result<()> {
    let fresh = Trainer::new(t.cfg.clone(), t.seed)?;
    let pairs = [
        (t.rtra.nets.actor.0.spec(), fresh.rtra.nets.actor.0.spec()),
        (t.rtra.nets.q1.spec(), fresh.rtra.nets.q1.spec()),
        (t.rtra.nets.q2.spec(), fresh.rtra.nets.q2.spec()),
        (t.rtra.nets.q1_target.spec(), fresh.rtra.nets.q1_target.spec()),
        (t.rtra.nets.q2_target.spec(), fresh.rtra.nets.q2_target.spec()),
        (t.rea.nets.actor.spec(), fresh.rea.nets.actor.spec()),
        (t.rea.nets.critic.spec(), fresh.rea.nets.critic.spec()),
    ];
    if pairs.iter().any(|(a, b)| a != b) {
        return Err(Error::format("network shapes disagree with the embedded configuration"));
    }
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Trains from scratch, saving into `out` after every phase when given.
pub fn run_alternating_training(cfg: ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<Trainer> {
    let mut t = Trainer::new(cfg, seed)?;
    t.run(out)?;
    Ok(t)
}

/// Continues a run from its checkpoint, writing next to it.
pub fn resume(checkpoint_path: &Path) -> Result<Trainer> {
    let mut t = Trainer::load(checkpoint_path, None)?;
    let dir = checkpoint_path.parent().unwrap_or(Path::new("."));
    t.run(Some(dir))?;
    Ok(t)
}
