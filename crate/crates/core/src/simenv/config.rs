use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Intersection layout. The ego lane runs north at `x = lane_width / 2` and
/// turns left on a quarter circle starting at `y = 0`; the single oncoming
/// lane runs south at `x = -lane_width / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub lane_width: f64,
    pub turn_radius: f64,
    /// Straight distance from the ego start to the start of the turn.
    pub ego_approach: f64,
    /// Straight leg after the turn, heading away from the conflict area.
    pub ego_exit: f64,
    /// Distance from the oncoming lane entry to the junction (`y = 0`).
    pub oncoming_approach: f64,
    /// Distance past the junction after which oncoming vehicles leave.
    pub oncoming_exit: f64,
    pub vehicle_length: f64,
    pub vehicle_width: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            lane_width: 3.5,
            turn_radius: 10.0,
            ego_approach: 1.0,
            ego_exit: 40.0,
            oncoming_approach: 100.0,
            oncoming_exit: 60.0,
            vehicle_length: 5.0,
            vehicle_width: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    pub desired_speed: f64,
    pub time_headway: f64,
    pub min_gap: f64,
    pub max_accel: f64,
    pub comfortable_decel: f64,
    pub exponent: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            desired_speed: 15.0,
            time_headway: 1.5,
            min_gap: 2.0,
            max_accel: 2.6,
            comfortable_decel: 4.5,
            exponent: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Per-second arrival probability at the oncoming lane entry.
    pub density: f64,
    pub v_max: f64,
    pub accel_limit: f64,
    pub horizon: usize,
    pub dt: f64,
    /// Integration sub-steps per control step; collisions are checked at
    /// every sub-step.
    pub substeps: usize,
    pub sensing_range: f64,
    pub ego_initial_speed: f64,
    /// Seconds of traffic simulated before the ego appears.
    pub warm_up: f64,
    pub geometry: Geometry,
    pub idm: IdmParams,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            density: 0.5,
            v_max: 15.0,
            accel_limit: 7.6,
            horizon: 30,
            dt: 1.0,
            substeps: 10,
            sensing_range: 200.0,
            ego_initial_speed: 5.0,
            warm_up: 12.0,
            geometry: Geometry::default(),
            idm: IdmParams::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::config(format!("density {} outside (0, 1]", self.density)));
        }
        if !(self.dt > 0.0) || self.horizon == 0 || self.substeps == 0 {
            return Err(Error::config("dt, horizon and substeps must be positive"));
        }
        if !(self.accel_limit > 0.0 && self.v_max > 0.0 && self.sensing_range > 0.0) {
            return Err(Error::config("accel_limit, v_max and sensing_range must be positive"));
        }
        if !(0.0..=self.v_max).contains(&self.ego_initial_speed) {
            return Err(Error::config("ego initial speed outside [0, v_max]"));
        }
        if !(self.warm_up >= 0.0) {
            return Err(Error::config("negative warm-up"));
        }
        let lengths = [
            g.lane_width,
            g.turn_radius,
            g.ego_approach,
            g.oncoming_approach,
            g.oncoming_exit,
            g.vehicle_length,
            g.vehicle_width,
        ];
        if lengths.iter().any(|&l| !(l > 0.0)) || !(g.ego_exit >= 0.0) {
            return Err(Error::config(format!("non-positive geometry length in {g:?}")));
        }
        if g.turn_radius <= g.lane_width {
            return Err(Error::config("turn radius must exceed the lane width"));
        }
        let idm = &self.idm;
        if [
            idm.desired_speed,
            idm.time_headway,
            idm.min_gap,
            idm.max_accel,
            idm.comfortable_decel,
            idm.exponent,
        ]
        .iter()
        .any(|&p| !(p > 0.0))
        {
            return Err(Error::config("IDM parameters must be positive"));
        }
        Ok(())
    }
}
