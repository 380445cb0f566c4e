//! Criticality-aware adversarial training for an unprotected left-turn
//! driving task.
//!
//! * [`simenv`]: seedable intersection micro-simulator with IDM traffic.
//! * [`diffnet`]: dense networks with exact parameter and input gradients.
//! * [`rea`]: budgeted hybrid-action PPO adversary.
//! * [`perturb`]: adversary-guided BIM observation perturbations.
//! * [`rtra`]: SAC defender with a dual replay buffer and a KL
//!   consistency constraint enforced by dual ascent.
//! * [`trainer`]: alternating training, ablations, config and checkpoints.
//! * [`eval`]: evaluation under attack modes, seed aggregation, reports.

pub mod diffnet;
pub mod error;
pub mod eval;
pub mod perturb;
pub mod rea;
pub mod rng;
pub mod rtra;
pub mod simenv;
pub mod trainer;

pub use error::{Error, Result};
