//! Route poses and oriented-rectangle overlap.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use super::config::Geometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Route {
    OncomingStraight,
    EgoLeftTurn,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Geometry {
    pub fn route_length(&self, route: Route) -> f64 {
        match route {
            Route::OncomingStraight => self.oncoming_approach + self.oncoming_exit,
            Route::EgoLeftTurn => self.ego_approach + FRAC_PI_2 * self.turn_radius + self.ego_exit,
        }
    }

    /// Pose at distance `s` along `route` (clamped to the route).
    pub fn pose(&self, route: Route, s: f64) -> Pose {
        let half = 0.5 * self.lane_width;
        let s = s.clamp(0.0, self.route_length(route));
        match route {
            Route::OncomingStraight => Pose {
                x: -half,
                y: self.oncoming_approach - s,
                heading: -FRAC_PI_2,
            },
            Route::EgoLeftTurn => {
                if s <= self.ego_approach {
                    Pose {
                        x: half,
                        y: s - self.ego_approach,
                        heading: FRAC_PI_2,
                    }
                } else if s >= self.ego_approach + FRAC_PI_2 * self.turn_radius {
                    let along = s - self.ego_approach - FRAC_PI_2 * self.turn_radius;
                    Pose {
                        x: half - self.turn_radius - along,
                        y: self.turn_radius,
                        heading: PI,
                    }
                } else {
                    let theta = (s - self.ego_approach) / self.turn_radius;
                    Pose {
                        x: half - self.turn_radius + self.turn_radius * theta.cos(),
                        y: self.turn_radius * theta.sin(),
                        heading: FRAC_PI_2 + theta,
                    }
                }
            }
        }
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// An oriented rectangle centred at `(x, y)`, long side along `heading`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl Footprint {
    fn axes(&self) -> [(f64, f64); 2] {
        let (s, c) = self.heading.sin_cos();
        [(c, s), (-s, c)]
    }

    fn project(&self, axis: (f64, f64)) -> (f64, f64) {
        let [u, v] = self.axes();
        let centre = self.x * axis.0 + self.y * axis.1;
        let extent = 0.5 * self.length * (u.0 * axis.0 + u.1 * axis.1).abs()
            + 0.5 * self.width * (v.0 * axis.0 + v.1 * axis.1).abs();
        (centre - extent, centre + extent)
    }

    /// Closed-set overlap by the separating-axis test: touching boundaries
    /// count as overlapping.
    pub fn overlaps(&self, other: &Footprint) -> bool {
        for axis in self.axes().into_iter().chain(other.axes()) {
            let (a0, a1) = self.project(axis);
            let (b0, b1) = other.project(axis);
            if a1 < b0 || b1 < a0 {
                return false;
            }
        }
        true
    }
}
