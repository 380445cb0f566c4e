//! Budgeted hybrid-action PPO adversary.
//!
//! The actor shares one trunk between a two-logit attack-trigger head and a
//! squashed-Gaussian target-action head. Each head gets its own clipped
//! surrogate; the target-action surrogate only counts on steps where the
//! trigger fired.

mod gae;

pub use gae::compute_gae;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffnet::{
    column, log_one_minus_tanh_sq, stack_rows, Activation, GaussianPolicyHead, LogStdBounds, Mlp,
    NetSpec, Optimizer, OptimizerKind,
};
use crate::error::{Error, Result};
use crate::simenv::{EgoObservation, StepOutcome, OBS_DIM};

pub const ADV_OBS_DIM: usize = OBS_DIM + 2;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq)]
pub struct ReaConfig {
    pub budget: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub lr: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub rollout_len: usize,
    pub hidden: Vec<usize>,
    pub optimizer: OptimizerKind,
    pub normalize_advantages: bool,
    pub log_std_bounds: LogStdBounds,
}

impl Default for ReaConfig {
    fn default() -> Self {
        Self {
            budget: 5,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            lr: 1e-4,
            epochs: 10,
            minibatch: 64,
            rollout_len: 2048,
            hidden: vec![256, 256],
            optimizer: OptimizerKind::RmsProp,
            normalize_advantages: true,
            log_std_bounds: LogStdBounds::default(),
        }
    }
}

/// `(s_def, n_remain / n_budget, a_def)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvObservation(pub [f64; ADV_OBS_DIM]);

impl AdvObservation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn adv_observe(
    s_def: &EgoObservation,
    n_remain: usize,
    n_budget: usize,
    a_def: f64,
) -> Result<AdvObservation> {
    if n_budget == 0 || n_remain > n_budget {
        return Err(Error::usage(format!(
            "remaining budget {n_remain} outside [0, {n_budget}]"
        )));
    }
    let mut v = [0.0; ADV_OBS_DIM];
    v[..OBS_DIM].copy_from_slice(s_def.as_slice());
    v[OBS_DIM] = n_remain as f64 / n_budget as f64;
    v[OBS_DIM + 1] = a_def.clamp(-1.0, 1.0);
    Ok(AdvObservation(v))
}

/// 1 on the step where a collision happens, else 0.
pub fn adv_reward(outcome: &StepOutcome) -> f64 {
    if outcome.collision {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvAction {
    pub trigger: bool,
    /// Target normalised acceleration, recorded even when the trigger is off.
    pub target: f64,
}

/// How the trigger distribution is constrained on a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriggerMask {
    Free,
    /// Budget exhausted: point mass at "no attack".
    ForceOff,
    /// Continuous-attack variant: point mass at "attack".
    ForceOn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvStep {
    pub action: AdvAction,
    pub target_pre_squash: f64,
    pub log_prob_trigger: f64,
    pub log_prob_target: f64,
    pub value: f64,
    pub mask: TriggerMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvNets {
    pub actor: Mlp,
    pub critic: Mlp,
}

fn log_softmax2(l0: f64, l1: f64) -> [f64; 2] {
    let m = l0.max(l1);
    let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
    [l0 - lse, l1 - lse]
}

/// Trigger probabilities `[p(no attack), p(attack)]` from the two logits.
pub fn trigger_probs(logits: [f64; 2]) -> [f64; 2] {
    let [l0, l1] = log_softmax2(logits[0], logits[1]);
    [l0.exp(), l1.exp()]
}

impl AdvNets {
    pub fn new<R: Rng + ?Sized>(cfg: &ReaConfig, rng: &mut R) -> Result<Self> {
        let actor_spec = NetSpec::mlp(ADV_OBS_DIM, &cfg.hidden, 4, Activation::Tanh)?
            .with_head("trigger", 0, 2)?
            .with_head("target", 2, 2)?;
        let critic_spec = NetSpec::mlp(ADV_OBS_DIM, &cfg.hidden, 1, Activation::Relu)?;
        Ok(Self {
            actor: Mlp::init(actor_spec, rng),
            critic: Mlp::init(critic_spec, rng),
        })
    }

    /// Samples the hybrid action. With `mask` other than `Free` the trigger
    /// is a point mass and its log-probability is 0.
    pub fn act<R: Rng + ?Sized>(
        &self,
        obs: &AdvObservation,
        mask: TriggerMask,
        bounds: LogStdBounds,
        rng: &mut R,
    ) -> Result<AdvStep> {
        let out = self.actor.forward(obs.as_slice())?;
        let value = self.critic.forward(obs.as_slice())?[0];
        let logp = log_softmax2(out[0], out[1]);
        // always consume one uniform draw so masking never shifts the stream
        let u: f64 = rng.random();
        let (trigger, log_prob_trigger) = match mask {
            TriggerMask::Free => {
                let fire = u < logp[1].exp();
                (fire, if fire { logp[1] } else { logp[0] })
            }
            TriggerMask::ForceOff => (false, 0.0),
            TriggerMask::ForceOn => (true, 0.0),
        };
        let head = GaussianPolicyHead::new(vec![out[2]], vec![out[3]], bounds);
        let xi: f64 = rng.sample(StandardNormal);
        let z = head.mean[0] + head.std(0) * xi;
        let log_prob_target = -0.5 * xi * xi - head.log_std[0] - HALF_LN_2PI - log_one_minus_tanh_sq(z);
        Ok(AdvStep {
            action: AdvAction {
                trigger,
                target: z.tanh(),
            },
            target_pre_squash: z,
            log_prob_trigger,
            log_prob_target,
            value,
            mask,
        })
    }

    pub fn value(&self, obs: &AdvObservation) -> Result<f64> {
        Ok(self.critic.forward(obs.as_slice())?[0])
    }
}

/// Budget-aware mask: exhausted budgets force the trigger off.
pub fn budget_mask(n_remain: usize, continuous: bool) -> TriggerMask {
    if continuous {
        TriggerMask::ForceOn
    } else if n_remain == 0 {
        TriggerMask::ForceOff
    } else {
        TriggerMask::Free
    }
}

/// Convenience wrapper: budget masking plus sampling.
pub fn adv_act<R: Rng + ?Sized>(
    nets: &AdvNets,
    obs: &AdvObservation,
    n_remain: usize,
    bounds: LogStdBounds,
    rng: &mut R,
) -> Result<AdvStep> {
    nets.act(obs, budget_mask(n_remain, false), bounds, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub obs: AdvObservation,
    pub step: AdvStep,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub records: Vec<RolloutRecord>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, record: RolloutRecord) {
        self.records.push(record);
    }

    /// Recomputes advantages and returns from scratch. `bootstrap_value`
    /// values the state after the last record when it is not terminal.
    pub fn finish(&mut self, gamma: f64, lambda: f64, bootstrap_value: f64) {
        let rewards: Vec<f64> = self.records.iter().map(|r| r.reward).collect();
        let values: Vec<f64> = self.records.iter().map(|r| r.step.value).collect();
        let dones: Vec<bool> = self.records.iter().map(|r| r.done).collect();
        let (adv, ret) = compute_gae(&rewards, &values, bootstrap_value, &dones, gamma, lambda);
        self.advantages = adv;
        self.returns = ret;
    }

    pub fn clear(&mut self) {
        self.records.clear();
        self.advantages.clear();
        self.returns.clear();
    }
}

/// `min(ratio * adv, clip(ratio, 1 - eps, 1 + eps) * adv)`.
pub fn clipped_surrogate(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// Derivative of [`clipped_surrogate`] with respect to the log-probability.
fn surrogate_dlogp(ratio: f64, adv: f64, eps: f64) -> f64 {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= clipped {
        unclipped
    } else {
        0.0
    }
}

/// Actor objective on a minibatch: the mean over steps of
/// `J_x + x * J_u`, together with `dJ/d(actor output)` per row.
#[derive(Debug, Clone)]
pub struct ActorObjective {
    pub objective: f64,
    pub trigger_part: f64,
    pub target_part: f64,
    pub grad_output: Array2<f64>,
    pub max_ratio: f64,
}

pub fn actor_objective(
    nets: &AdvNets,
    records: &[&RolloutRecord],
    advantages: &[f64],
    clip: f64,
    bounds: LogStdBounds,
) -> Result<ActorObjective> {
    let x = stack_rows(records.iter().map(|r| r.obs.as_slice()), ADV_OBS_DIM);
    let tape = nets.actor.forward_batch(x.view())?;
    objective_from_output(tape.output(), records, advantages, clip, bounds)
}

fn objective_from_output(
    out: &Array2<f64>,
    records: &[&RolloutRecord],
    advantages: &[f64],
    clip: f64,
    bounds: LogStdBounds,
) -> Result<ActorObjective> {
    let n = records.len();
    let mut grad = Array2::<f64>::zeros((n, 4));
    let (mut jx_sum, mut ju_sum, mut max_ratio) = (0.0, 0.0, 0.0f64);
    let inv_n = 1.0 / n as f64;
    for (i, rec) in records.iter().enumerate() {
        let adv = advantages[i];
        if rec.step.mask == TriggerMask::Free {
            let logp = log_softmax2(out[[i, 0]], out[[i, 1]]);
            let taken = usize::from(rec.step.action.trigger);
            let ratio = (logp[taken] - rec.step.log_prob_trigger).exp();
            if !ratio.is_finite() {
                return Err(Error::NonFinite {
                    context: "trigger ratio",
                    detail: format!("row {i}: log-prob {} vs old {}", logp[taken], rec.step.log_prob_trigger),
                });
            }
            max_ratio = max_ratio.max(ratio);
            jx_sum += clipped_surrogate(ratio, adv, clip);
            let d = surrogate_dlogp(ratio, adv, clip) * inv_n;
            let p = [logp[0].exp(), logp[1].exp()];
            for k in 0..2 {
                let onehot = if k == taken { 1.0 } else { 0.0 };
                grad[[i, k]] = d * (onehot - p[k]);
            }
        }
        if rec.step.action.trigger {
            let raw_log_std = out[[i, 3]];
            let head = GaussianPolicyHead::new(vec![out[[i, 2]]], vec![raw_log_std], bounds);
            let z = rec.step.target_pre_squash;
            let sigma = head.std(0);
            let u = (z - head.mean[0]) / sigma;
            let logp = -0.5 * u * u - head.log_std[0] - HALF_LN_2PI - log_one_minus_tanh_sq(z);
            let ratio = (logp - rec.step.log_prob_target).exp();
            if !ratio.is_finite() {
                return Err(Error::NonFinite {
                    context: "target ratio",
                    detail: format!("row {i}: log-prob {logp} vs old {}", rec.step.log_prob_target),
                });
            }
            max_ratio = max_ratio.max(ratio);
            ju_sum += clipped_surrogate(ratio, adv, clip);
            let d = surrogate_dlogp(ratio, adv, clip) * inv_n;
            grad[[i, 2]] = d * u / sigma;
            if bounds.passes(raw_log_std) {
                grad[[i, 3]] = d * (u * u - 1.0);
            }
        }
    }
    Ok(ActorObjective {
        objective: (jx_sum + ju_sum) * inv_n,
        trigger_part: jx_sum * inv_n,
        target_part: ju_sum * inv_n,
        grad_output: grad,
        max_ratio,
    })
}

/// Mean squared error between `V(s)` and the return targets.
pub fn critic_loss(nets: &AdvNets, obs: &[AdvObservation], returns: &[f64]) -> Result<f64> {
    let x = stack_rows(obs.iter().map(|o| o.as_slice()), ADV_OBS_DIM);
    let tape = nets.critic.forward_batch(x.view())?;
    let v = tape.output();
    Ok(returns
        .iter()
        .enumerate()
        .map(|(i, r)| (v[[i, 0]] - r).powi(2))
        .sum::<f64>()
        / returns.len() as f64)
}

fn normalise(adv: &mut [f64]) {
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv {
        *a = (*a - mean) / (std + 1e-8);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PpoStats {
    pub actor_objective: f64,
    pub critic_loss: f64,
    pub minibatches: usize,
}

/// The adversary learner: networks plus optimizer state.
#[derive(Debug, Clone)]
pub struct Rea {
    pub cfg: ReaConfig,
    pub nets: AdvNets,
    pub actor_opt: Optimizer,
    pub critic_opt: Optimizer,
}

impl Rea {
    pub fn new<R: Rng + ?Sized>(cfg: ReaConfig, rng: &mut R) -> Result<Self> {
        let nets = AdvNets::new(&cfg, rng)?;
        let actor_opt = Optimizer::new(cfg.optimizer, nets.actor.params().len(), cfg.lr);
        let critic_opt = Optimizer::new(cfg.optimizer, nets.critic.params().len(), cfg.lr);
        Ok(Self {
            cfg,
            nets,
            actor_opt,
            critic_opt,
        })
    }

    fn minibatches<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        idx.chunks(self.cfg.minibatch.max(1)).map(|c| c.to_vec()).collect()
    }

    /// Clipped-surrogate ascent over `epochs` passes of shuffled minibatches.
    pub fn ppo_actor_update<R: Rng + ?Sized>(
        &mut self,
        rollout: &RolloutBuffer,
        rng: &mut R,
    ) -> Result<f64> {
        if rollout.advantages.len() != rollout.len() {
            return Err(Error::usage("advantages not computed for this rollout"));
        }
        let mut last = 0.0;
        for _ in 0..self.cfg.epochs {
            for mb in self.minibatches(rollout.len(), rng) {
                let records: Vec<&RolloutRecord> = mb.iter().map(|&i| &rollout.records[i]).collect();
                let mut adv: Vec<f64> = mb.iter().map(|&i| rollout.advantages[i]).collect();
                if self.cfg.normalize_advantages && adv.len() > 1 {
                    normalise(&mut adv);
                }
                let x = stack_rows(records.iter().map(|r| r.obs.as_slice()), ADV_OBS_DIM);
                let tape = self.nets.actor.forward_batch(x.view())?;
                let obj = objective_from_output(
                    tape.output(),
                    &records,
                    &adv,
                    self.cfg.clip,
                    self.cfg.log_std_bounds,
                )?;
                // descend on -J
                let upstream = obj.grad_output.mapv(|g| -g);
                let (grad, _) = self.nets.actor.backward(&tape, upstream.view(), false)?;
                if !grad.is_finite() {
                    return Err(Error::NonFinite {
                        context: "adversary actor gradient",
                        detail: format!("objective {}", obj.objective),
                    });
                }
                self.actor_opt.step(self.nets.actor.params_mut(), &grad);
                last = obj.objective;
            }
        }
        Ok(last)
    }

    /// Value regression towards the GAE returns.
    pub fn ppo_critic_update<R: Rng + ?Sized>(
        &mut self,
        rollout: &RolloutBuffer,
        rng: &mut R,
    ) -> Result<f64> {
        if rollout.returns.len() != rollout.len() {
            return Err(Error::usage("returns not computed for this rollout"));
        }
        let mut last = 0.0;
        for _ in 0..self.cfg.epochs {
            for mb in self.minibatches(rollout.len(), rng) {
                let x = stack_rows(mb.iter().map(|&i| rollout.records[i].obs.as_slice()), ADV_OBS_DIM);
                let tape = self.nets.critic.forward_batch(x.view())?;
                let v = tape.output();
                let n = mb.len() as f64;
                let mut loss = 0.0;
                let diffs: Vec<f64> = mb
                    .iter()
                    .enumerate()
                    .map(|(k, &i)| {
                        let d = v[[k, 0]] - rollout.returns[i];
                        loss += d * d;
                        2.0 * d / n
                    })
                    .collect();
                loss /= n;
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        context: "adversary critic loss",
                        detail: format!("{loss}"),
                    });
                }
                let (grad, _) = self.nets.critic.backward(&tape, column(diffs).view(), false)?;
                self.critic_opt.step(self.nets.critic.params_mut(), &grad);
                last = loss;
            }
        }
        Ok(last)
    }

    /// Full PPO update on a finished rollout; the caller clears the buffer.
    pub fn update<R: Rng + ?Sized>(&mut self, rollout: &RolloutBuffer, rng: &mut R) -> Result<PpoStats> {
        let actor_objective = self.ppo_actor_update(rollout, rng)?;
        let critic_loss = self.ppo_critic_update(rollout, rng)?;
        Ok(PpoStats {
            actor_objective,
            critic_loss,
            minibatches: rollout.len().div_ceil(self.cfg.minibatch.max(1)) * self.cfg.epochs,
        })
    }
}
