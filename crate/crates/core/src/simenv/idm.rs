use super::config::IdmParams;

/// Intelligent-driver-model acceleration for a follower at speed `v`,
/// bumper gap `gap` behind a leader at `v_lead`, clamped to
/// `[-accel_limit, accel_limit]`. A non-positive gap is an emergency brake.
pub fn idm_accel(gap: f64, v: f64, v_lead: f64, p: &IdmParams, accel_limit: f64) -> f64 {
    if gap <= 0.0 {
        return -accel_limit;
    }
    let free = 1.0 - (v / p.desired_speed).powf(p.exponent);
    let interaction = if gap.is_finite() {
        let dynamic =
            v * p.time_headway + v * (v - v_lead) / (2.0 * (p.max_accel * p.comfortable_decel).sqrt());
        let s_star = p.min_gap + dynamic.max(0.0);
        (s_star / gap).powi(2)
    } else {
        0.0
    };
    (p.max_accel * (free - interaction)).clamp(-accel_limit, accel_limit)
}
