//! Diagonal Gaussian policy heads, tanh-squashed sampling and KL divergence.

use rand::Rng;
use rand_distr::StandardNormal;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogStdBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for LogStdBounds {
    fn default() -> Self {
        Self { min: -5.0, max: 2.0 }
    }
}

impl LogStdBounds {
    pub fn clamp(&self, raw: f64) -> f64 {
        raw.clamp(self.min, self.max)
    }

    /// Whether gradients flow through the clamp at `raw`.
    pub fn passes(&self, raw: f64) -> bool {
        raw >= self.min && raw <= self.max
    }
}

/// Mean and (clamped) log standard deviation of a diagonal Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicyHead {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl GaussianPolicyHead {
    pub fn new(mean: Vec<f64>, raw_log_std: Vec<f64>, bounds: LogStdBounds) -> Self {
        assert_eq!(mean.len(), raw_log_std.len(), "mean/log_std length mismatch");
        let log_std = raw_log_std.into_iter().map(|v| bounds.clamp(v)).collect();
        Self { mean, log_std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self, i: usize) -> f64 {
        self.log_std[i].exp()
    }

    /// Deterministic action `tanh(mean)`.
    pub fn mode(&self) -> Vec<f64> {
        self.mean.iter().map(|m| m.tanh()).collect()
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln(1 - tanh(z)^2)` evaluated without cancellation for large `|z|`.
pub fn log_one_minus_tanh_sq(z: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - z - softplus(-2.0 * z))
}

/// Log-density of `tanh(z)` under the squashed head, given the pre-squash
/// sample `z`.
pub fn squashed_log_prob(head: &GaussianPolicyHead, pre_squash: &[f64]) -> f64 {
    assert_eq!(pre_squash.len(), head.dim());
    let mut lp = 0.0;
    for (i, &z) in pre_squash.iter().enumerate() {
        let s = head.std(i);
        let u = (z - head.mean[i]) / s;
        lp += -0.5 * u * u - head.log_std[i] - HALF_LN_2PI - log_one_minus_tanh_sq(z);
    }
    lp
}

/// Draws `tanh(mean + std * xi)` and its log-density. Also returns the
/// pre-squash sample, which callers need for later log-prob evaluation.
pub fn sample_squashed<R: Rng + ?Sized>(
    head: &GaussianPolicyHead,
    rng: &mut R,
) -> (Vec<f64>, f64, Vec<f64>) {
    let mut action = Vec::with_capacity(head.dim());
    let mut pre = Vec::with_capacity(head.dim());
    let mut lp = 0.0;
    for i in 0..head.dim() {
        let xi: f64 = rng.sample(StandardNormal);
        let z = head.mean[i] + head.std(i) * xi;
        lp += -0.5 * xi * xi - head.log_std[i] - HALF_LN_2PI - log_one_minus_tanh_sq(z);
        pre.push(z);
        action.push(z.tanh());
    }
    (action, lp, pre)
}

/// `KL(p || q)` between the pre-squash diagonal Gaussians. Since tanh is a
/// bijection this equals the KL between the squashed distributions.
pub fn gaussian_kl(p: &GaussianPolicyHead, q: &GaussianPolicyHead) -> f64 {
    assert_eq!(p.dim(), q.dim(), "KL between heads of different dimension");
    let mut kl = 0.0;
    for i in 0..p.dim() {
        let var_p = (2.0 * p.log_std[i]).exp();
        let var_q = (2.0 * q.log_std[i]).exp();
        let dm = p.mean[i] - q.mean[i];
        kl += q.log_std[i] - p.log_std[i] + (var_p + dm * dm) / (2.0 * var_q) - 0.5;
    }
    kl
}

/// Partial derivatives of [`gaussian_kl`] with respect to both heads.
#[derive(Debug, Clone, PartialEq)]
pub struct KlGrad {
    pub mean_p: Vec<f64>,
    pub log_std_p: Vec<f64>,
    pub mean_q: Vec<f64>,
    pub log_std_q: Vec<f64>,
}

pub fn gaussian_kl_grad(p: &GaussianPolicyHead, q: &GaussianPolicyHead) -> KlGrad {
    let n = p.dim();
    let mut g = KlGrad {
        mean_p: Vec::with_capacity(n),
        log_std_p: Vec::with_capacity(n),
        mean_q: Vec::with_capacity(n),
        log_std_q: Vec::with_capacity(n),
    };
    for i in 0..n {
        let var_p = (2.0 * p.log_std[i]).exp();
        let var_q = (2.0 * q.log_std[i]).exp();
        let dm = p.mean[i] - q.mean[i];
        g.mean_p.push(dm / var_q);
        g.mean_q.push(-dm / var_q);
        g.log_std_p.push(-1.0 + var_p / var_q);
        g.log_std_q.push(1.0 - (var_p + dm * dm) / var_q);
    }
    g
}
