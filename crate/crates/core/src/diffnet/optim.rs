//! First-order optimizers over flat parameter buffers.

use serde::{Deserialize, Serialize};

use super::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    RmsProp,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adam" => Ok(Self::Adam),
            "rmsprop" => Ok(Self::RmsProp),
            other => Err(format!("unknown optimizer {other:?} (expected adam|rmsprop)")),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Adam => "adam",
            Self::RmsProp => "rmsprop",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    fn apply(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Momentum-free adaptive step: each parameter is scaled by a running RMS of
/// its own gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    pub sq: Vec<f64>,
}

impl RmsProp {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            decay: 0.99,
            eps: 1e-8,
            sq: vec![0.0; len],
        }
    }

    fn apply(&mut self, params: &mut [f64], grad: &[f64]) {
        for i in 0..params.len() {
            let g = grad[i];
            self.sq[i] = self.decay * self.sq[i] + (1.0 - self.decay) * g * g;
            params[i] -= self.lr * g / (self.sq[i].sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Adam(Adam),
    RmsProp(RmsProp),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, len: usize, lr: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(len, lr)),
            OptimizerKind::RmsProp => Optimizer::RmsProp(RmsProp::new(len, lr)),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Adam(_) => OptimizerKind::Adam,
            Optimizer::RmsProp(_) => OptimizerKind::RmsProp,
        }
    }

    /// One descent step along `grad`.
    pub fn step(&mut self, params: &mut ParamSet, grad: &ParamSet) {
        assert_eq!(params.len(), grad.len(), "gradient shape mismatch");
        match self {
            Optimizer::Adam(a) => a.apply(params.as_mut_slice(), grad.as_slice()),
            Optimizer::RmsProp(r) => r.apply(params.as_mut_slice(), grad.as_slice()),
        }
    }

    /// Every scalar of optimizer state, in a fixed order, for checkpoints.
    pub fn state(&self) -> (u64, Vec<f64>) {
        match self {
            Optimizer::Adam(a) => {
                let mut s = a.m.clone();
                s.extend_from_slice(&a.v);
                (a.step, s)
            }
            Optimizer::RmsProp(r) => (0, r.sq.clone()),
        }
    }

    pub fn set_state(&mut self, step: u64, state: &[f64]) -> Result<(), String> {
        match self {
            Optimizer::Adam(a) => {
                let n = a.m.len();
                if state.len() != 2 * n {
                    return Err(format!("adam state length {} != {}", state.len(), 2 * n));
                }
                a.step = step;
                a.m.copy_from_slice(&state[..n]);
                a.v.copy_from_slice(&state[n..]);
            }
            Optimizer::RmsProp(r) => {
                if state.len() != r.sq.len() {
                    return Err(format!("rmsprop state length {} != {}", state.len(), r.sq.len()));
                }
                r.sq.copy_from_slice(state);
            }
        }
        Ok(())
    }
}
