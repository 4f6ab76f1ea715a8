//! Closed-form marginals, posteriors, drifts and drift Jacobians for
//! Gaussian-mixture targets carried along Gaussian paths X_t = α_t Z + σ_t ξ.

use crate::error::{Error, Result};
use crate::linalg::{lambda_max, SquareMatrix};
use crate::points::{norm, Points};
use crate::schedules::{Coefficients, GaussianSchedule, PathCoefficients};
use crate::special::{chi_square_sf, normal_cdf, trapezoid};
use crate::targets::GaussianMixture;

/// A target, a schedule and a time with σ_t > 0.
#[derive(Clone, Debug)]
pub struct MarginalContext<'a> {
    target: &'a GaussianMixture,
    sched: &'a GaussianSchedule,
    t: f64,
    path: PathCoefficients,
    marginal: GaussianMixture,
}

/// Exact posterior of Z given X_t = x.
#[derive(Clone, Debug)]
pub struct PosteriorMoments {
    pub responsibilities: Vec<f64>,
    /// E[Z | x, component j]
    pub post_means: Vec<Vec<f64>>,
    /// Var(Z | x, component j), isotropic.
    pub post_var: Vec<f64>,
    pub mean_z: Vec<f64>,
    pub cov_z: SquareMatrix,
    alpha: f64,
    alpha_dot: f64,
}

impl PosteriorMoments {
    /// E[m_t(Z) | x]
    pub fn mean_m(&self) -> Vec<f64> {
        self.mean_z.iter().map(|v| self.alpha * v).collect()
    }

    /// E[ṁ_t(Z) | x]
    pub fn mean_mdot(&self) -> Vec<f64> {
        self.mean_z.iter().map(|v| self.alpha_dot * v).collect()
    }

    /// Cov(m_t(Z) | x)
    pub fn cov_m(&self) -> SquareMatrix {
        let mut c = self.cov_z.clone();
        c.scale(self.alpha * self.alpha);
        c
    }

    /// Cov(ṁ_t(Z), m_t(Z) | x)
    pub fn cov_mdot_m(&self) -> SquareMatrix {
        let mut c = self.cov_z.clone();
        c.scale(self.alpha * self.alpha_dot);
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BrascampLieb {
    pub measured: f64,
    pub bound: f64,
    /// measured exceeds bound beyond rounding
    pub exceeded: bool,
}

impl<'a> MarginalContext<'a> {
    pub fn new(target: &'a GaussianMixture, sched: &'a GaussianSchedule, t: f64) -> Result<Self> {
        let path = sched.path(t)?;
        if !(path.sigma > 0.0) {
            return Err(Error::TimeOutOfDomain { t, what: "the marginal (σ_t = 0)" });
        }
        let marginal = target.affine_convolved(path.alpha, path.sigma * path.sigma);
        Ok(Self { target, sched, t, path, marginal })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn target(&self) -> &GaussianMixture {
        self.target
    }

    pub fn path(&self) -> PathCoefficients {
        self.path
    }

    pub fn coefficients(&self) -> Result<Coefficients> {
        self.sched.eval(self.t)
    }

    /// p_t as a Gaussian mixture.
    pub fn marginal(&self) -> &GaussianMixture {
        &self.marginal
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.marginal.density(x)
    }

    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        self.marginal.score(x)
    }

    pub fn posterior(&self, x: &[f64]) -> PosteriorMoments {
        let d = self.target.dim();
        let a = self.path.alpha;
        let s2 = self.path.sigma * self.path.sigma;
        let r = self.marginal.responsibilities(x);
        let mut post_means = Vec::with_capacity(r.len());
        let mut post_var = Vec::with_capacity(r.len());
        for (mu, v) in self.target.means().iter().zip(self.target.variances()) {
            let tot = a * a * v + s2;
            post_means.push(mu.iter().zip(x).map(|(m, xi)| (s2 * m + a * v * xi) / tot).collect::<Vec<f64>>());
            post_var.push(v * s2 / tot);
        }
        let mut mean_z = vec![0.0; d];
        for (rj, m) in r.iter().zip(&post_means) {
            for k in 0..d {
                mean_z[k] += rj * m[k];
            }
        }
        // law of total variance
        let mut cov_z = SquareMatrix::zeros(d);
        for ((rj, m), v) in r.iter().zip(&post_means).zip(&post_var) {
            for i in 0..d {
                cov_z[(i, i)] += rj * v;
                for j in 0..d {
                    cov_z[(i, j)] += rj * (m[i] - mean_z[i]) * (m[j] - mean_z[j]);
                }
            }
        }
        PosteriorMoments {
            responsibilities: r,
            post_means,
            post_var,
            mean_z,
            cov_z,
            alpha: a,
            alpha_dot: self.path.alpha_dot,
        }
    }

    /// a_t(x) = η x + E[ṁ − η m | x]
    pub fn exact_drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        let c = self.coefficients()?;
        let post = self.posterior(x);
        let k = c.alpha_dot - c.eta * c.alpha;
        Ok(x.iter().zip(&post.mean_z).map(|(xi, ez)| c.eta * xi + k * ez).collect())
    }

    /// (α̇/α) x + (σ_fwd² + b²) ∇log p_t(x); needs α_t > 0.
    pub fn drift_score_form(&self, x: &[f64]) -> Result<Vec<f64>> {
        let c = self.coefficients()?;
        if !(c.alpha > 0.0) {
            return Err(Error::TimeOutOfDomain { t: self.t, what: "the score form of the drift (α_t = 0)" });
        }
        let g = c.sigma_fwd_sq() + c.b * c.b;
        let s = self.score(x);
        Ok(x.iter().zip(&s).map(|(xi, si)| c.alpha_dot / c.alpha * xi + g * si).collect())
    }

    /// Velocity of the probability-flow ODE, which ignores b_t.
    pub fn probability_flow_velocity(&self, x: &[f64]) -> Result<Vec<f64>> {
        let c = self.path;
        if !(c.alpha > 0.0) {
            return Err(Error::TimeOutOfDomain { t: self.t, what: "the probability-flow velocity (α_t = 0)" });
        }
        let g = c.sigma * c.sigma * c.alpha_dot / c.alpha - c.sigma * c.sigma_dot;
        let s = self.score(x);
        Ok(x.iter().zip(&s).map(|(xi, si)| c.alpha_dot / c.alpha * xi + g * si).collect())
    }

    /// ∇a_t = η I − (η/σ²) Cov(m|x) + (1/σ²) Cov(ṁ, m|x)
    pub fn drift_jacobian(&self, x: &[f64]) -> Result<SquareMatrix> {
        let c = self.coefficients()?;
        let post = self.posterior(x);
        let s2 = c.sigma * c.sigma;
        let mut j = post.cov_m();
        j.scale(-c.eta / s2);
        let cross = post.cov_mdot_m();
        let d = x.len();
        for a in 0..d {
            for b in 0..d {
                j[(a, b)] += cross[(a, b)] / s2;
            }
        }
        j.add_identity(c.eta);
        Ok(j)
    }

    /// λ_max(Cov(m_t(Z)|x)) against σ_t²/(1 + α_t σ_t²) with α_t = α/t².
    pub fn brascamp_lieb_check(&self, x: &[f64]) -> BrascampLieb {
        let measured = lambda_max(&self.posterior(x).cov_m());
        let s2 = self.path.sigma * self.path.sigma;
        let alpha = self.target.structure().alpha;
        let t2 = self.t * self.t;
        let bound = s2 * t2 / (t2 + alpha * s2);
        BrascampLieb { measured, bound, exceeded: measured > bound * (1.0 + 1e-10) + 1e-300 }
    }

    /// Mass of the centered ball of radius `r`; exact in 1D, a lower bound above.
    pub fn ball_mass(&self, r: f64) -> f64 {
        let m = &self.marginal;
        if m.dim() == 1 {
            return m
                .weights()
                .iter()
                .zip(m.means())
                .zip(m.variances())
                .map(|((w, c), v)| {
                    let sd = v.sqrt();
                    w * (normal_cdf((r - c[0]) / sd) - normal_cdf((-r - c[0]) / sd))
                })
                .sum();
        }
        let tail: f64 = m
            .weights()
            .iter()
            .zip(m.means())
            .zip(m.variances())
            .map(|((w, c), v)| {
                let slack = r - norm(c);
                if slack <= 0.0 {
                    *w
                } else {
                    w * chi_square_sf(m.dim(), slack * slack / v)
                }
            })
            .sum();
        (1.0 - tail).max(0.0)
    }

    /// Smallest radius R with p_t(‖x‖ ≤ R) ≥ 1 − eps.
    pub fn effective_support(&self, eps: f64) -> f64 {
        if eps >= 1.0 {
            return 0.0;
        }
        let target = 1.0 - eps.max(1e-300);
        let mut hi = 1.0;
        while self.ball_mass(hi) < target {
            hi *= 2.0;
            if hi > 1e12 {
                return hi;
            }
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.ball_mass(mid) >= target {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= 1e-13 * hi {
                break;
            }
        }
        hi
    }
}

/// Per-time supremum of λ_max(∇a_t) over a spatial grid.
#[derive(Clone, Debug)]
pub struct OslEnvelope {
    pub times: Vec<f64>,
    pub envelope: Vec<f64>,
    /// Hölder exponent entering the reference rate (1−t)^((β∧1)/2 − 1).
    pub beta: f64,
}

impl OslEnvelope {
    fn rate_exponent(&self) -> f64 {
        1.0 - self.beta.min(1.0) / 2.0
    }

    /// envelope(t)·(1−t)^(1−(β∧1)/2)
    pub fn scaled(&self) -> Vec<f64> {
        let e = self.rate_exponent();
        self.times.iter().zip(&self.envelope).map(|(t, v)| v * (1.0 - t).powf(e)).collect()
    }

    /// Ĉ = sup over lo ≤ t ≤ hi of the scaled envelope.
    pub fn fitted_constant(&self, lo: f64, hi: f64) -> f64 {
        self.times
            .iter()
            .zip(self.scaled())
            .filter(|(t, _)| **t >= lo && **t <= hi)
            .map(|(_, c)| c)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// ∫ max(envelope, 0) dt by trapezoid.
    pub fn positive_integral(&self) -> f64 {
        let pos: Vec<f64> = self.envelope.iter().map(|v| v.max(0.0)).collect();
        trapezoid(&self.times, &pos)
    }
}

/// Sweep `t_grid`, taking the sup of λ_max(∇a_t) over `x_grid`; with
/// `support_eps`, points outside the effective support at t are skipped.
pub fn osl_envelope(
    target: &GaussianMixture,
    sched: &GaussianSchedule,
    x_grid: &Points,
    t_grid: &[f64],
    support_eps: Option<f64>,
    beta: f64,
) -> Result<OslEnvelope> {
    let mut envelope = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let ctx = MarginalContext::new(target, sched, t)?;
        let radius = support_eps.map(|e| ctx.effective_support(e));
        let mut sup = f64::NEG_INFINITY;
        for x in x_grid.rows() {
            if radius.is_some_and(|r| norm(x) > r) {
                continue;
            }
            sup = sup.max(lambda_max(&ctx.drift_jacobian(x)?));
        }
        envelope.push(sup);
    }
    Ok(OslEnvelope { times: t_grid.to_vec(), envelope, beta })
}
