//! Adversary-guided observation perturbation.
//!
//! Iterative sign-gradient descent pulls the defender's deterministic action
//! towards a target action while staying inside an L∞ ball.

use crate::error::{Error, Result};
use crate::simenv::{EgoObservation, OBS_DIM};

/// Iterative sign-gradient settings. The step size is tied to the radius so
/// that `iterations * step_size == epsilon`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgConfig {
    pub epsilon: f64,
    pub iterations: usize,
}

impl AgConfig {
    pub fn new(epsilon: f64, iterations: usize) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            return Err(Error::config(format!("perturbation radius {epsilon} must be >= 0")));
        }
        if iterations == 0 {
            return Err(Error::config("perturbation iterations must be positive"));
        }
        Ok(Self { epsilon, iterations })
    }

    pub fn step_size(&self) -> f64 {
        self.epsilon / self.iterations as f64
    }
}

impl Default for AgConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            iterations: 50,
        }
    }
}

/// A policy whose deterministic action is differentiable in the observation.
pub trait DifferentiablePolicy {
    /// Deterministic action in `[-1, 1]`.
    fn deterministic_action(&self, obs: &[f64]) -> Result<f64>;
    /// Action together with `d action / d obs`.
    fn action_and_gradient(&self, obs: &[f64]) -> Result<(f64, Vec<f64>)>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation(pub [f64; OBS_DIM]);

impl Perturbation {
    pub fn zero() -> Self {
        Self([0.0; OBS_DIM])
    }

    pub fn linf(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Minimises `(pi(s + delta) - target)^2` over `|delta|_inf <= epsilon`.
pub fn generate_perturbation<P: DifferentiablePolicy + ?Sized>(
    policy: &P,
    s: &EgoObservation,
    target: f64,
    cfg: &AgConfig,
) -> Result<Perturbation> {
    generate_perturbation_traced(policy, s, target, cfg, |_, _| {})
}

/// As [`generate_perturbation`], calling `on_iteration(k, delta)` after
/// every iteration `k`.
pub fn generate_perturbation_traced<P, F>(
    policy: &P,
    s: &EgoObservation,
    target: f64,
    cfg: &AgConfig,
    mut on_iteration: F,
) -> Result<Perturbation>
where
    P: DifferentiablePolicy + ?Sized,
    F: FnMut(usize, &[f64; OBS_DIM]),
{
    if !(-1.0..=1.0).contains(&target) {
        return Err(Error::usage(format!("target action {target} outside [-1, 1]")));
    }
    let eps = cfg.epsilon;
    let step = cfg.step_size();
    let mut delta = [0.0; OBS_DIM];
    let mut x = [0.0; OBS_DIM];
    for k in 0..cfg.iterations {
        for i in 0..OBS_DIM {
            x[i] = s.0[i] + delta[i];
        }
        let (a, da) = policy.action_and_gradient(&x)?;
        let outer = 2.0 * (a - target);
        for i in 0..OBS_DIM {
            let g = outer * da[i];
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    context: "perturbation gradient",
                    detail: format!("component {i}"),
                });
            }
            delta[i] = (delta[i] - step * sign(g)).clamp(-eps, eps);
        }
        on_iteration(k, &delta);
    }
    Ok(Perturbation(delta))
}

/// `s + x * delta`; no re-clamping of the perturbed features.
pub fn apply_perturbation(s: &EgoObservation, delta: &Perturbation, attack: bool) -> EgoObservation {
    if !attack {
        return *s;
    }
    let mut out = *s;
    for (o, d) in out.0.iter_mut().zip(&delta.0) {
        *o += d;
    }
    out
}

/// Squared gap between the defender's action and the target.
pub fn ag_loss<P: DifferentiablePolicy + ?Sized>(policy: &P, obs: &[f64], target: f64) -> Result<f64> {
    Ok((policy.deterministic_action(obs)? - target).powi(2))
}
