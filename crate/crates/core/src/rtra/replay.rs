use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Error, Result};
use crate::simenv::EgoObservation;

/// One defender interaction. `s_tilde` is what the defender saw, `s` the
/// clean observation; they coincide when `attacked` is false.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub s_tilde: EgoObservation,
    pub s: EgoObservation,
    pub action: f64,
    pub reward: f64,
    pub s_next: EgoObservation,
    pub done: bool,
    pub attacked: bool,
}

/// Fixed-capacity FIFO store.
#[derive(Debug, Clone, PartialEq)]
pub struct Ring {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl Ring {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "ring capacity must be positive");
        Self {
            capacity,
            items: VecDeque::new(),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Normal,
    Attack,
    Unified,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub items: Vec<Transition>,
    pub sources: Vec<Source>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn attacked_count(&self) -> usize {
        self.items.iter().filter(|t| t.attacked).count()
    }
}

/// Separate stores for clean and attacked transitions, or a single store
/// when `dual` is off.
#[derive(Debug, Clone, PartialEq)]
pub struct DualReplayBuffer {
    pub normal: Ring,
    pub attack: Ring,
    pub beta: f64,
    pub dual: bool,
}

impl DualReplayBuffer {
    pub fn new(capacity: usize, beta: f64, dual: bool) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("replay capacity must be positive"));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::config(format!("adversarial sample ratio {beta} outside [0, 1]")));
        }
        Ok(Self {
            normal: Ring::new(capacity),
            attack: Ring::new(capacity),
            beta,
            dual,
        })
    }

    pub fn store(&mut self, t: Transition) {
        if self.dual && t.attacked {
            self.attack.push(t);
        } else {
            self.normal.push(t);
        }
    }

    pub fn len(&self) -> usize {
        self.normal.len() + self.attack.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `min(floor(beta n), |attack|)` attacked samples, the rest clean, all
    /// drawn uniformly with replacement. Attack draws come first.
    pub fn sample_mixed_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Batch> {
        if self.is_empty() {
            return Err(Error::usage("cannot sample from empty replay buffers"));
        }
        let mut items = Vec::with_capacity(n);
        let mut sources = Vec::with_capacity(n);
        if !self.dual {
            for _ in 0..n {
                items.push(*self.normal.get(rng.random_range(0..self.normal.len())));
                sources.push(Source::Unified);
            }
            return Ok(Batch { items, sources });
        }
        let mut n_att = ((self.beta * n as f64).floor() as usize).min(self.attack.len());
        if self.normal.is_empty() {
            n_att = n;
        }
        for _ in 0..n_att {
            items.push(*self.attack.get(rng.random_range(0..self.attack.len())));
            sources.push(Source::Attack);
        }
        for _ in n_att..n {
            items.push(*self.normal.get(rng.random_range(0..self.normal.len())));
            sources.push(Source::Normal);
        }
        Ok(Batch { items, sources })
    }
}
