//! Soft actor-critic defender with dual replay and a policy-consistency
//! constraint enforced by Lagrangian dual ascent.
//!
//! The constraint keeps `KL(pi(.|s) || pi(.|s_tilde))` on attacked samples
//! below a threshold. The actor loss is evaluated at the observation the
//! defender actually saw; the critic regresses `Q(s_tilde, a)` towards a
//! target built from the clean next observation.

mod replay;

pub use replay::{Batch, DualReplayBuffer, Ring, Source, Transition};

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffnet::{
    column, gaussian_kl, gaussian_kl_grad, log_one_minus_tanh_sq, polyak_update, stack_rows,
    Activation, GaussianPolicyHead, LogStdBounds, Mlp, NetSpec, Optimizer, OptimizerKind, ParamSet,
};
use crate::error::{Error, Result};
use crate::perturb::DifferentiablePolicy;
use crate::simenv::{EgoObservation, OBS_DIM};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq)]
pub struct RtraConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub lr: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub beta: f64,
    pub eps_def: f64,
    pub alpha_lambda: f64,
    pub lambda_init: f64,
    pub warmup_steps: usize,
    pub hidden: Vec<usize>,
    pub optimizer: OptimizerKind,
    pub dual_replay: bool,
    pub consistency: bool,
    pub log_std_bounds: LogStdBounds,
}

impl Default for RtraConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            alpha: 0.1,
            lr: 1e-4,
            tau: 0.005,
            batch_size: 64,
            buffer_capacity: 1_000_000,
            beta: 0.5,
            eps_def: 0.1,
            alpha_lambda: 5e-5,
            lambda_init: 0.0,
            warmup_steps: 1000,
            hidden: vec![256, 256],
            optimizer: OptimizerKind::Adam,
            dual_replay: true,
            consistency: true,
            log_std_bounds: LogStdBounds::default(),
        }
    }
}

/// Defender actor: outputs `[mean, raw log std]` of the pre-squash action.
#[derive(Debug, Clone, PartialEq)]
pub struct DefenderActor(pub Mlp);

impl DefenderActor {
    pub fn new<R: Rng + ?Sized>(hidden: &[usize], rng: &mut R) -> Result<Self> {
        let spec = NetSpec::mlp(OBS_DIM, hidden, 2, Activation::Relu)?.with_head("action", 0, 2)?;
        Ok(Self(Mlp::init(spec, rng)))
    }

    pub fn head(&self, obs: &[f64], bounds: LogStdBounds) -> Result<GaussianPolicyHead> {
        let out = self.0.forward(obs)?;
        Ok(GaussianPolicyHead::new(vec![out[0]], vec![out[1]], bounds))
    }

    /// Samples `tanh(mean + std * xi)`; returns the action and its log density.
    pub fn sample<R: Rng + ?Sized>(&self, obs: &[f64], bounds: LogStdBounds, rng: &mut R) -> Result<(f64, f64)> {
        let h = self.head(obs, bounds)?;
        let xi: f64 = rng.sample(StandardNormal);
        let z = h.mean[0] + h.std(0) * xi;
        Ok((z.tanh(), -0.5 * xi * xi - h.log_std[0] - HALF_LN_2PI - log_one_minus_tanh_sq(z)))
    }
}

impl DifferentiablePolicy for DefenderActor {
    fn deterministic_action(&self, obs: &[f64]) -> Result<f64> {
        Ok(self.0.forward(obs)?[0].tanh())
    }

    fn action_and_gradient(&self, obs: &[f64]) -> Result<(f64, Vec<f64>)> {
        let x = stack_rows([obs], OBS_DIM);
        let tape = self.0.forward_batch(x.view())?;
        let a = tape.output()[[0, 0]].tanh();
        let up = ndarray::arr2(&[[1.0 - a * a, 0.0]]);
        let g = self.0.backward_input(&tape, up.view())?;
        Ok((a, g.row(0).to_vec()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefenderNets {
    pub actor: DefenderActor,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
}

impl DefenderNets {
    pub fn new<R: Rng + ?Sized>(hidden: &[usize], rng: &mut R) -> Result<Self> {
        let actor = DefenderActor::new(hidden, rng)?;
        let spec = NetSpec::mlp(OBS_DIM + 1, hidden, 1, Activation::Relu)?;
        let q1 = Mlp::init(spec.clone(), rng);
        let q2 = Mlp::init(spec, rng);
        Ok(Self {
            actor,
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
        })
    }
}

fn critic_rows<'a>(obs: impl Iterator<Item = &'a EgoObservation>, actions: &[f64]) -> Array2<f64> {
    let mut m = Array2::zeros((actions.len(), OBS_DIM + 1));
    for (i, (o, a)) in obs.zip(actions).enumerate() {
        for j in 0..OBS_DIM {
            m[[i, j]] = o.0[j];
        }
        m[[i, OBS_DIM]] = *a;
    }
    m
}

/// Reparameterised samples of the squashed policy for a batch of rows.
struct PolicySample {
    mean: Vec<f64>,
    raw_log_std: Vec<f64>,
    log_std: Vec<f64>,
    xi: Vec<f64>,
    action: Vec<f64>,
    log_prob: Vec<f64>,
}

fn sample_rows<R: Rng + ?Sized>(out: &Array2<f64>, bounds: LogStdBounds, rng: &mut R) -> PolicySample {
    let n = out.nrows();
    let mut s = PolicySample {
        mean: Vec::with_capacity(n),
        raw_log_std: Vec::with_capacity(n),
        log_std: Vec::with_capacity(n),
        xi: Vec::with_capacity(n),
        action: Vec::with_capacity(n),
        log_prob: Vec::with_capacity(n),
    };
    for i in 0..n {
        let mu = out[[i, 0]];
        let raw = out[[i, 1]];
        let ls = bounds.clamp(raw);
        let xi: f64 = rng.sample(StandardNormal);
        let z = mu + ls.exp() * xi;
        s.mean.push(mu);
        s.raw_log_std.push(raw);
        s.log_std.push(ls);
        s.xi.push(xi);
        s.action.push(z.tanh());
        s.log_prob.push(-0.5 * xi * xi - ls - HALF_LN_2PI - log_one_minus_tanh_sq(z));
    }
    s
}

/// `r + gamma (1 - done) (min Q' - alpha log pi(a'|s'))`.
pub fn soft_bellman_target(reward: f64, gamma: f64, done: bool, min_q_next: f64, alpha: f64, log_prob_next: f64) -> f64 {
    let live = if done { 0.0 } else { 1.0 };
    reward + gamma * live * (min_q_next - alpha * log_prob_next)
}

/// Soft Bellman target for one transition, sampling `a' ~ pi(.|s')`.
pub fn critic_target<R: Rng + ?Sized>(
    nets: &DefenderNets,
    cfg: &RtraConfig,
    t: &Transition,
    rng: &mut R,
) -> Result<f64> {
    Ok(critic_targets(nets, cfg, std::slice::from_ref(t), rng)?[0])
}

fn critic_targets<R: Rng + ?Sized>(
    nets: &DefenderNets,
    cfg: &RtraConfig,
    items: &[Transition],
    rng: &mut R,
) -> Result<Vec<f64>> {
    let next = stack_rows(items.iter().map(|t| t.s_next.as_slice()), OBS_DIM);
    let out = nets.actor.0.forward_batch(next.view())?;
    let smp = sample_rows(out.output(), cfg.log_std_bounds, rng);
    let x = critic_rows(items.iter().map(|t| &t.s_next), &smp.action);
    let t1 = nets.q1_target.forward_batch(x.view())?;
    let t2 = nets.q2_target.forward_batch(x.view())?;
    Ok(items
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let q = t1.output()[[i, 0]].min(t2.output()[[i, 0]]);
            soft_bellman_target(t.reward, cfg.gamma, t.done, q, cfg.alpha, smp.log_prob[i])
        })
        .collect())
}

/// Mean KL between clean and perturbed policies over attacked samples;
/// zero when the batch has none.
pub fn consistency_cost(actor: &DefenderActor, batch: &Batch, bounds: LogStdBounds) -> Result<f64> {
    let attacked: Vec<&Transition> = batch.items.iter().filter(|t| t.attacked).collect();
    if attacked.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for t in &attacked {
        let p = actor.head(t.s.as_slice(), bounds)?;
        let q = actor.head(t.s_tilde.as_slice(), bounds)?;
        sum += gaussian_kl(&p, &q);
    }
    Ok(sum / attacked.len() as f64)
}

/// `lambda <- max(0, lambda + alpha_lambda (c - eps))`.
pub fn dual_update(lambda: f64, cost: f64, eps_def: f64, alpha_lambda: f64) -> f64 {
    (lambda + alpha_lambda * (cost - eps_def)).max(0.0)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ActorStats {
    /// Lagrangian `L_actor + lambda (c - eps)`.
    pub loss: f64,
    pub policy_loss: f64,
    pub consistency: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor: ActorStats,
    pub lambda: f64,
}

/// The defender learner.
#[derive(Debug, Clone)]
pub struct Rtra {
    pub cfg: RtraConfig,
    pub nets: DefenderNets,
    pub actor_opt: Optimizer,
    pub q1_opt: Optimizer,
    pub q2_opt: Optimizer,
    pub lambda: f64,
    pub buffer: DualReplayBuffer,
    pub updates: u64,
}

fn check_finite(context: &'static str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context,
            detail: format!("{v}"),
        })
    }
}

impl Rtra {
    pub fn new<R: Rng + ?Sized>(cfg: RtraConfig, rng: &mut R) -> Result<Self> {
        if !(cfg.tau > 0.0 && cfg.tau <= 1.0) {
            return Err(Error::config(format!("polyak rate {} outside (0, 1]", cfg.tau)));
        }
        if cfg.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        let nets = DefenderNets::new(&cfg.hidden, rng)?;
        let actor_opt = Optimizer::new(cfg.optimizer, nets.actor.0.params().len(), cfg.lr);
        let q1_opt = Optimizer::new(cfg.optimizer, nets.q1.params().len(), cfg.lr);
        let q2_opt = Optimizer::new(cfg.optimizer, nets.q2.params().len(), cfg.lr);
        let buffer = DualReplayBuffer::new(cfg.buffer_capacity, cfg.beta, cfg.dual_replay)?;
        Ok(Self {
            lambda: if cfg.consistency { cfg.lambda_init } else { 0.0 },
            cfg,
            nets,
            actor_opt,
            q1_opt,
            q2_opt,
            buffer,
            updates: 0,
        })
    }

    pub fn act<R: Rng + ?Sized>(&self, obs: &EgoObservation, rng: &mut R) -> Result<f64> {
        Ok(self.nets.actor.sample(obs.as_slice(), self.cfg.log_std_bounds, rng)?.0)
    }

    pub fn act_deterministic(&self, obs: &EgoObservation) -> Result<f64> {
        self.nets.actor.deterministic_action(obs.as_slice())
    }

    /// Twin-critic regression step followed by the target soft update.
    pub fn critic_update<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<f64> {
        let y = critic_targets(&self.nets, &self.cfg, &batch.items, rng)?;
        let actions: Vec<f64> = batch.items.iter().map(|t| t.action).collect();
        let x = critic_rows(batch.items.iter().map(|t| &t.s_tilde), &actions);
        let n = batch.len() as f64;
        let mut loss = 0.0;
        for (q, opt) in [(&mut self.nets.q1, &mut self.q1_opt), (&mut self.nets.q2, &mut self.q2_opt)] {
            let tape = q.forward_batch(x.view())?;
            let up: Vec<f64> = (0..batch.len())
                .map(|i| {
                    let d = tape.output()[[i, 0]] - y[i];
                    loss += d * d / n;
                    2.0 * d / n
                })
                .collect();
            let (g, _) = q.backward(&tape, column(up).view(), false)?;
            check_finite("critic loss", loss)?;
            opt.step(q.params_mut(), &g);
        }
        polyak_update(self.nets.q1_target.params_mut(), self.nets.q1.params(), self.cfg.tau)?;
        polyak_update(self.nets.q2_target.params_mut(), self.nets.q2.params(), self.cfg.tau)?;
        Ok(loss)
    }

    /// Entropy-regularised policy step plus the Lagrangian consistency term.
    pub fn actor_update_lagrangian<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<ActorStats> {
        let (stats, grad) = self.actor_loss_and_grad(batch, rng)?;
        self.actor_opt.step(self.nets.actor.0.params_mut(), &grad);
        Ok(stats)
    }

    /// Lagrangian actor loss and its exact parameter gradient, without
    /// stepping the optimizer.
    pub fn actor_loss_and_grad<R: Rng + ?Sized>(&self, batch: &Batch, rng: &mut R) -> Result<(ActorStats, ParamSet)> {
        let cfg = &self.cfg;
        let bounds = cfg.log_std_bounds;
        let actor = &self.nets.actor.0;
        let b = batch.len();
        let inv_b = 1.0 / b as f64;
        let x_tilde = stack_rows(batch.items.iter().map(|t| t.s_tilde.as_slice()), OBS_DIM);
        let tape = actor.forward_batch(x_tilde.view())?;
        let smp = sample_rows(tape.output(), bounds, rng);

        let xq = critic_rows(batch.items.iter().map(|t| &t.s_tilde), &smp.action);
        let t1 = self.nets.q1.forward_batch(xq.view())?;
        let t2 = self.nets.q2.forward_batch(xq.view())?;
        let mut up1 = Array2::zeros((b, 1));
        let mut up2 = Array2::zeros((b, 1));
        let mut policy_loss = 0.0;
        for i in 0..b {
            let (a, c) = (t1.output()[[i, 0]], t2.output()[[i, 0]]);
            if a <= c {
                up1[[i, 0]] = 1.0;
            } else {
                up2[[i, 0]] = 1.0;
            }
            policy_loss += (cfg.alpha * smp.log_prob[i] - a.min(c)) * inv_b;
        }
        let g1 = self.nets.q1.backward_input(&t1, up1.view())?;
        let g2 = self.nets.q2.backward_input(&t2, up2.view())?;

        let mut up = Array2::zeros((b, 2));
        for i in 0..b {
            let dq = g1[[i, OBS_DIM]] + g2[[i, OBS_DIM]];
            let t = smp.action[i];
            let sigma = smp.log_std[i].exp();
            let xi = smp.xi[i];
            let sech2 = 1.0 - t * t;
            up[[i, 0]] = (cfg.alpha * 2.0 * t - dq * sech2) * inv_b;
            if bounds.passes(smp.raw_log_std[i]) {
                up[[i, 1]] = (cfg.alpha * (-1.0 + 2.0 * t * sigma * xi) - dq * sech2 * sigma * xi) * inv_b;
            }
        }

        let attacked: Vec<usize> = (0..b).filter(|&i| batch.items[i].attacked).collect();
        let mut consistency = 0.0;
        let mut clean_grad = None;
        if !attacked.is_empty() {
            let x_clean = stack_rows(attacked.iter().map(|&i| batch.items[i].s.as_slice()), OBS_DIM);
            let clean_tape = actor.forward_batch(x_clean.view())?;
            let co = clean_tape.output();
            let inv_n = 1.0 / attacked.len() as f64;
            let use_grad = cfg.consistency && self.lambda != 0.0;
            let mut up_clean = Array2::zeros((attacked.len(), 2));
            for (k, &i) in attacked.iter().enumerate() {
                let p = GaussianPolicyHead::new(vec![co[[k, 0]]], vec![co[[k, 1]]], bounds);
                let q = GaussianPolicyHead {
                    mean: vec![smp.mean[i]],
                    log_std: vec![smp.log_std[i]],
                };
                consistency += gaussian_kl(&p, &q) * inv_n;
                if use_grad {
                    let w = self.lambda * inv_n;
                    let g = gaussian_kl_grad(&p, &q);
                    up_clean[[k, 0]] = w * g.mean_p[0];
                    if bounds.passes(co[[k, 1]]) {
                        up_clean[[k, 1]] = w * g.log_std_p[0];
                    }
                    up[[i, 0]] += w * g.mean_q[0];
                    if bounds.passes(smp.raw_log_std[i]) {
                        up[[i, 1]] += w * g.log_std_q[0];
                    }
                }
            }
            if use_grad {
                clean_grad = Some(actor.backward(&clean_tape, up_clean.view(), false)?.0);
            }
        }

        let (mut grad, _) = actor.backward(&tape, up.view(), false)?;
        if let Some(g) = clean_grad {
            grad.add_scaled(&g, 1.0);
        }
        let loss = if cfg.consistency {
            policy_loss + self.lambda * (consistency - cfg.eps_def)
        } else {
            policy_loss
        };
        check_finite("actor loss", loss)?;
        if !grad.is_finite() {
            return Err(Error::NonFinite {
                context: "actor gradient",
                detail: format!("loss {loss}"),
            });
        }
        Ok((
            ActorStats {
                loss,
                policy_loss,
                consistency,
            },
            grad,
        ))
    }

    /// One full gradient step: sample, critics, actor, multiplier.
    pub fn update<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<UpdateStats> {
        let batch = self.buffer.sample_mixed_batch(self.cfg.batch_size, rng)?;
        let critic_loss = self.critic_update(&batch, rng)?;
        let actor = self.actor_update_lagrangian(&batch, rng)?;
        if self.cfg.consistency {
            self.lambda = dual_update(self.lambda, actor.consistency, self.cfg.eps_def, self.cfg.alpha_lambda);
        }
        self.updates += 1;
        Ok(UpdateStats {
            critic_loss,
            actor,
            lambda: self.lambda,
        })
    }
}
