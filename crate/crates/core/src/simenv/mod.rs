//! Deterministic micro-simulator of an unprotected left turn.
//!
//! The ego follows a fixed route (short straight approach, then a
//! quarter-circle left turn) and controls only its longitudinal
//! acceleration. Oncoming traffic arrives as a Bernoulli process at the lane
//! entry and follows the IDM; it never reacts to the ego.

mod config;
mod geometry;
mod idm;

pub use config::{EnvConfig, Geometry, IdmParams};
pub use geometry::{wrap_angle, Footprint, Pose, Route};
pub use idm::idm_accel;

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const OBS_DIM: usize = 26;
pub const NEIGHBOR_SLOTS: usize = 6;
/// Encoding of an empty neighbour slot.
pub const SENTINEL_BLOCK: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

/// Neighbour slot order inside the observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sector {
    Front = 0,
    Rear = 1,
    FrontLeft = 2,
    RearLeft = 3,
    FrontRight = 4,
    RearRight = 5,
}

impl Sector {
    /// Sector of a bearing measured in the ego frame (positive = left).
    pub fn from_bearing(bearing: f64) -> Self {
        let a = bearing.abs();
        let left = bearing > 0.0;
        if a <= PI / 6.0 {
            Sector::Front
        } else if a > 5.0 * PI / 6.0 {
            Sector::Rear
        } else if a <= PI / 2.0 {
            if left {
                Sector::FrontLeft
            } else {
                Sector::FrontRight
            }
        } else if left {
            Sector::RearLeft
        } else {
            Sector::RearRight
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleState {
    pub position: (f64, f64),
    pub speed: f64,
    pub heading: f64,
    pub route: Route,
    pub length: f64,
    pub width: f64,
    /// Distance travelled along the route (m).
    pub travelled: f64,
    route_length: f64,
}

impl VehicleState {
    pub fn on_route(geometry: &Geometry, route: Route, travelled: f64, speed: f64) -> Self {
        let mut v = Self {
            position: (0.0, 0.0),
            speed,
            heading: 0.0,
            route,
            length: geometry.vehicle_length,
            width: geometry.vehicle_width,
            travelled,
            route_length: geometry.route_length(route),
        };
        v.sync_pose(geometry);
        v
    }

    /// Progress along the route in `[0, 1]`.
    pub fn arc_parameter(&self) -> f64 {
        (self.travelled / self.route_length).clamp(0.0, 1.0)
    }

    pub fn footprint(&self) -> Footprint {
        Footprint {
            x: self.position.0,
            y: self.position.1,
            heading: self.heading,
            length: self.length,
            width: self.width,
        }
    }

    fn sync_pose(&mut self, geometry: &Geometry) {
        let p = geometry.pose(self.route, self.travelled);
        self.position = (p.x, p.y);
        self.heading = p.heading;
    }
}

/// The defender's 26-dimensional observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoObservation(pub [f64; OBS_DIM]);

impl EgoObservation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; OBS_DIM] = values
            .try_into()
            .map_err(|_| Error::usage(format!("observation needs {OBS_DIM} values, got {}", values.len())))?;
        Ok(Self(arr))
    }

    pub fn neighbor(&self, sector: Sector) -> [f64; 4] {
        let o = 2 + 4 * sector as usize;
        [self.0[o], self.0[o + 1], self.0[o + 2], self.0[o + 3]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: EgoObservation,
    pub reward: f64,
    pub collision: bool,
    pub success: bool,
    pub done: bool,
    pub ego_speed: f64,
}

#[derive(Debug, Clone)]
pub struct WorldState {
    pub config: EnvConfig,
    pub ego: VehicleState,
    /// Oncoming vehicles, front (furthest along) to back.
    pub traffic: Vec<VehicleState>,
    pub step_index: usize,
    pub done: bool,
    rng: Stream,
}

/// `v / 15 - [collision]`, with the normalising speed taken as 15 m/s.
pub fn compute_reward(speed: f64, collision: bool) -> f64 {
    compute_reward_with(speed, collision, 15.0)
}

pub fn compute_reward_with(speed: f64, collision: bool, v_max: f64) -> f64 {
    speed / v_max - if collision { 1.0 } else { 0.0 }
}

/// Whether the ego footprint overlaps any traffic footprint.
pub fn detect_collision(world: &WorldState) -> bool {
    let ego = world.ego.footprint();
    world.traffic.iter().any(|v| ego.overlaps(&v.footprint()))
}

impl WorldState {
    /// Places the ego at the start of its approach after `warm_up` seconds
    /// of traffic. Identical `(config, seed)` give identical worlds.
    pub fn reset(config: &EnvConfig, seed: u64) -> Result<(Self, EgoObservation)> {
        config.validate()?;
        let g = &config.geometry;
        let mut world = Self {
            config: config.clone(),
            ego: VehicleState::on_route(g, Route::EgoLeftTurn, 0.0, config.ego_initial_speed),
            traffic: Vec::new(),
            step_index: 0,
            done: false,
            rng: rng::stream(seed, "env", &[]),
        };
        let warm_steps = (config.warm_up / config.dt).ceil() as usize;
        for _ in 0..warm_steps {
            for _ in 0..config.substeps {
                world.advance_traffic(config.dt / config.substeps as f64);
            }
            world.maybe_spawn();
        }
        let obs = world.observe();
        Ok((world, obs))
    }

    /// Builds a world with explicit traffic and no warm-up, for tests and
    /// scripted scenarios.
    pub fn with_traffic(config: &EnvConfig, seed: u64, traffic: Vec<VehicleState>) -> Result<Self> {
        config.validate()?;
        let mut traffic = traffic;
        traffic.sort_by(|a, b| b.travelled.total_cmp(&a.travelled));
        Ok(Self {
            config: config.clone(),
            ego: VehicleState::on_route(
                &config.geometry,
                Route::EgoLeftTurn,
                0.0,
                config.ego_initial_speed,
            ),
            traffic,
            step_index: 0,
            done: false,
            rng: rng::stream(seed, "env", &[]),
        })
    }

    /// Applies the normalised ego acceleration `a_def` for one control step.
    pub fn step(&mut self, a_def: f64) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::usage("step called on a finished episode"));
        }
        if !(-1.0 - 1e-12..=1.0 + 1e-12).contains(&a_def) {
            return Err(Error::usage(format!("ego action {a_def} outside [-1, 1]")));
        }
        let cfg = &self.config;
        let accel = a_def.clamp(-1.0, 1.0) * cfg.accel_limit;
        let h = cfg.dt / cfg.substeps as f64;
        let ego_len = cfg.geometry.route_length(Route::EgoLeftTurn);
        let (v_max, substeps) = (cfg.v_max, cfg.substeps);

        let mut collision = false;
        let mut success = false;
        let v_start = self.ego.speed;
        for k in 1..=substeps {
            // speed from the step start so the end-of-step value is exact
            let t = self.config.dt * k as f64 / substeps as f64;
            let v0 = self.ego.speed;
            let v1 = (v_start + accel * t).clamp(0.0, v_max);
            self.ego.travelled = (self.ego.travelled + 0.5 * (v0 + v1) * h).min(ego_len);
            self.ego.speed = v1;
            self.ego.sync_pose(&self.config.geometry);
            self.advance_traffic(h);
            if detect_collision(self) {
                collision = true;
                break;
            }
            if self.ego.travelled >= ego_len {
                success = true;
                break;
            }
        }
        self.maybe_spawn();
        self.step_index += 1;
        let done = collision || success || self.step_index >= self.config.horizon;
        self.done = done;
        Ok(StepOutcome {
            observation: self.observe(),
            reward: compute_reward_with(self.ego.speed, collision, self.config.v_max),
            collision,
            success,
            done,
            ego_speed: self.ego.speed,
        })
    }

    fn advance_traffic(&mut self, h: f64) {
        let cfg = &self.config;
        let accels: Vec<f64> = (0..self.traffic.len())
            .map(|i| {
                let me = &self.traffic[i];
                let (gap, v_lead) = match i.checked_sub(1).map(|j| &self.traffic[j]) {
                    Some(lead) => (lead.travelled - lead.length - me.travelled, lead.speed),
                    None => (f64::INFINITY, me.speed),
                };
                idm_accel(gap, me.speed, v_lead, &cfg.idm, cfg.accel_limit)
            })
            .collect();
        for (veh, a) in self.traffic.iter_mut().zip(accels) {
            let v0 = veh.speed;
            let v1 = (v0 + a * h).clamp(0.0, cfg.v_max);
            veh.travelled += 0.5 * (v0 + v1) * h;
            veh.speed = v1;
            veh.sync_pose(&cfg.geometry);
        }
        self.traffic.retain(|v| v.travelled < v.route_length);
    }

    /// One Bernoulli arrival draw with probability `density * dt`. The draw
    /// is made every step so the random sequence never depends on the
    /// traffic state.
    fn maybe_spawn(&mut self) {
        let p = (self.config.density * self.config.dt).min(1.0);
        let arrive = self.rng.random::<f64>() < p;
        if !arrive {
            return;
        }
        let g = &self.config.geometry;
        let entry_clear = self
            .traffic
            .last()
            .is_none_or(|last| last.travelled >= self.config.idm.min_gap + last.length);
        if entry_clear {
            let speed = self
                .traffic
                .last()
                .map_or(self.config.idm.desired_speed, |l| l.speed.min(self.config.idm.desired_speed));
            self.traffic
                .push(VehicleState::on_route(g, Route::OncomingStraight, 0.0, speed));
        }
    }

    /// Ego speed and heading, then for each sector the nearest vehicle in
    /// sensing range as `[distance / range, bearing / pi, speed / v_max,
    /// relative heading / pi]`, or [`SENTINEL_BLOCK`].
    pub fn observe(&self) -> EgoObservation {
        let cfg = &self.config;
        let mut obs = [0.0; OBS_DIM];
        obs[0] = self.ego.speed / cfg.v_max;
        obs[1] = wrap_angle(self.ego.heading) / PI;
        let mut nearest: [Option<(f64, [f64; 4])>; NEIGHBOR_SLOTS] = [None; NEIGHBOR_SLOTS];
        let (ex, ey) = self.ego.position;
        for v in &self.traffic {
            let (dx, dy) = (v.position.0 - ex, v.position.1 - ey);
            let dist = dx.hypot(dy);
            if dist > cfg.sensing_range {
                continue;
            }
            let bearing = wrap_angle(dy.atan2(dx) - self.ego.heading);
            let slot = Sector::from_bearing(bearing) as usize;
            if nearest[slot].is_none_or(|(d, _)| dist < d) {
                let block = [
                    dist / cfg.sensing_range,
                    bearing / PI,
                    v.speed / cfg.v_max,
                    wrap_angle(v.heading - self.ego.heading) / PI,
                ];
                nearest[slot] = Some((dist, block));
            }
        }
        for (slot, entry) in nearest.iter().enumerate() {
            let block = entry.map_or(SENTINEL_BLOCK, |(_, b)| b);
            obs[2 + 4 * slot..6 + 4 * slot].copy_from_slice(&block);
        }
        EgoObservation(obs)
    }
}
