//! Fixtures shared by the benchmarks.

use carrl_core::rng::{self, Stream};
use carrl_core::rtra::{Rtra, RtraConfig, Transition};
use carrl_core::simenv::{EgoObservation, EnvConfig, WorldState};
use rand::Rng;

/// Observations from random-action rollouts in the default environment.
pub fn observations(n: usize, seed: u64) -> Vec<EgoObservation> {
    let mut out = Vec::with_capacity(n);
    let mut r = rng::stream(seed, "bench-obs", &[]);
    let env = EnvConfig::default();
    let mut episode = 0;
    while out.len() < n {
        let (mut world, mut s) = WorldState::reset(&env, episode).expect("default env is valid");
        episode += 1;
        loop {
            out.push(s);
            let step = world.step(r.random_range(-1.0..=1.0)).expect("valid action");
            s = step.observation;
            if step.done || out.len() == n {
                break;
            }
        }
    }
    out
}

/// A defender with `transitions` random transitions already buffered,
/// half of them marked as attacked.
pub fn filled_rtra(cfg: RtraConfig, transitions: usize, seed: u64) -> (Rtra, Stream) {
    let mut r = rng::stream(seed, "bench-rtra", &[]);
    let mut rtra = Rtra::new(cfg, &mut r).expect("valid config");
    let obs = observations(transitions + 1, seed);
    for (i, w) in obs.windows(2).enumerate() {
        let attacked = i % 2 == 1;
        let mut s_tilde = w[0];
        if attacked {
            for v in s_tilde.0.iter_mut() {
                *v += r.random_range(-0.05..=0.05);
            }
        }
        rtra.buffer.store(Transition {
            s_tilde,
            s: w[0],
            action: r.random_range(-1.0..=1.0),
            reward: r.random_range(-1.0..=1.0),
            s_next: w[1],
            done: i % 5 == 4,
            attacked,
        });
    }
    (rtra, r)
}
