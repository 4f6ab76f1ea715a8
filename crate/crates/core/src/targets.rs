//! Target distributions with closed-form densities, scores and samplers.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::{dist_sq, Points};
use crate::rng;
use crate::special::{log_sum_exp, LN_2PI};

/// Isotropic Gaussian mixture Σ_j w_j N(μ_j, s_j² I).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
    dim: usize,
}

/// Strong-convexity floor, Hölder constant and exponent of a target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureParams {
    pub alpha: f64,
    pub holder_k: f64,
    pub beta: f64,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        let m = weights.len();
        if m == 0 || means.len() != m || variances.len() != m {
            return Err(Error::InvalidTarget("weights, means and variances need equal nonzero length".into()));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|mu| mu.len() != dim) {
            return Err(Error::InvalidTarget("all means must share a positive dimension".into()));
        }
        check_pmf(&weights)?;
        if variances.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidTarget("variances must be positive and finite".into()));
        }
        if means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidTarget("means must be finite".into()));
        }
        Ok(Self { weights, means, variances, dim })
    }

    pub fn gaussian(mean: Vec<f64>, variance: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![variance])
    }

    pub fn standard(dim: usize) -> Self {
        Self::gaussian(vec![0.0; dim], 1.0).expect("standard normal is valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Law of `scale·Z + noise_sd·ξ` for Z from this mixture and ξ ~ N(0, I).
    pub fn affine_convolved(&self, scale: f64, noise_var: f64) -> Self {
        Self {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m.iter().map(|v| scale * v).collect()).collect(),
            variances: self.variances.iter().map(|s2| scale * scale * s2 + noise_var).collect(),
            dim: self.dim,
        }
    }

    /// log(w_j φ(x; μ_j, s_j² I)) for every component.
    pub fn component_log_terms(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim as f64;
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((w, mu), v)| w.ln() - 0.5 * d * (LN_2PI + v.ln()) - 0.5 * dist_sq(x, mu) / v)
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.component_log_terms(x))
    }

    /// Density, floored at the smallest positive normal float.
    pub fn density(&self, x: &[f64]) -> f64 {
        self.log_density(x).exp().max(f64::MIN_POSITIVE)
    }

    /// Posterior component probabilities given `x`.
    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        let logs = self.component_log_terms(x);
        let lse = log_sum_exp(&logs);
        logs.iter().map(|l| (l - lse).exp()).collect()
    }

    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let r = self.responsibilities(x);
        let mut s = vec![0.0; self.dim];
        for ((rj, mu), v) in r.iter().zip(&self.means).zip(&self.variances) {
            for k in 0..self.dim {
                s[k] -= rj * (x[k] - mu[k]) / v;
            }
        }
        s
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            for k in 0..self.dim {
                m[k] += w * mu[k];
            }
        }
        m
    }

    /// Per-coordinate variance.
    pub fn coordinate_variance(&self) -> Vec<f64> {
        let mean = self.mean();
        (0..self.dim)
            .map(|k| {
                self.weights
                    .iter()
                    .zip(&self.means)
                    .zip(&self.variances)
                    .map(|((w, mu), v)| w * (v + mu[k] * mu[k]))
                    .sum::<f64>()
                    - mean[k] * mean[k]
            })
            .collect()
    }

    /// CDF in one dimension.
    pub fn cdf_1d(&self, x: f64) -> f64 {
        assert_eq!(self.dim, 1, "cdf_1d needs a one-dimensional mixture");
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((w, mu), v)| w * crate::special::normal_cdf((x - mu[0]) / v.sqrt()))
            .sum()
    }

    /// Quantile in one dimension by bisection on the CDF.
    pub fn quantile_1d(&self, p: f64) -> f64 {
        let (mut lo, mut hi) = self.bracket_1d(40.0);
        while self.cdf_1d(lo) > p {
            lo -= hi - lo;
        }
        while self.cdf_1d(hi) < p {
            hi += hi - lo;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf_1d(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * (1.0 + mid.abs()) {
                break;
            }
        }
        0.5 * (lo + hi)
    }

    /// Interval holding every component within `k` standard deviations (1D).
    pub fn bracket_1d(&self, k: f64) -> (f64, f64) {
        let lo = self.means.iter().zip(&self.variances).map(|(m, v)| m[0] - k * v.sqrt()).fold(f64::INFINITY, f64::min);
        let hi = self.means.iter().zip(&self.variances).map(|(m, v)| m[0] + k * v.sqrt()).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    /// α is the inverse of the largest component variance; K measures how far
    /// the modes sit from the global mean on that scale (0 for one component);
    /// Gaussian mixtures are smooth, so β is taken as 1.
    pub fn structure(&self) -> StructureParams {
        let vmax = self.variances.iter().cloned().fold(0.0, f64::max);
        let mean = self.mean();
        let spread = self.means.iter().map(|m| dist_sq(m, &mean).sqrt()).fold(0.0, f64::max);
        StructureParams { alpha: 1.0 / vmax, holder_k: spread / vmax, beta: 1.0 }
    }

    /// Draw one component index from a uniform variate.
    pub fn pick_component(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (j, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return j;
            }
        }
        self.weights.len() - 1
    }

    pub fn sample_one(&self, rng: &mut rng::Rng, out: &mut [f64]) {
        let j = self.pick_component(rng.random::<f64>());
        let sd = self.variances[j].sqrt();
        for (o, m) in out.iter_mut().zip(&self.means[j]) {
            let e: f64 = rng.sample(StandardNormal);
            *o = m + sd * e;
        }
    }

    pub fn sample(&self, n: usize, seed: u64) -> Points {
        let mut rng = rng::stream(seed, 0);
        let mut p = Points::zeros(n, self.dim);
        for i in 0..n {
            self.sample_one(&mut rng, p.row_mut(i));
        }
        p
    }
}

/// Probability vector over S = {0, …, s−1}.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteTarget {
    pmf: Vec<f64>,
}

impl FiniteTarget {
    pub fn new(pmf: Vec<f64>) -> Result<Self> {
        if pmf.is_empty() {
            return Err(Error::InvalidTarget("pmf must be nonempty".into()));
        }
        check_pmf(&pmf)?;
        Ok(Self { pmf })
    }

    pub fn uniform(s: usize) -> Self {
        Self { pmf: vec![1.0 / s as f64; s] }
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    pub fn n_states(&self) -> usize {
        self.pmf.len()
    }

    pub fn draw(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (j, p) in self.pmf.iter().enumerate() {
            acc += p;
            if u < acc && *p > 0.0 {
                return j;
            }
        }
        self.pmf.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    pub fn sample(&self, n: usize, seed: u64) -> Vec<usize> {
        let mut rng = rng::stream(seed, 0);
        (0..n).map(|_| self.draw(rng.random::<f64>())).collect()
    }
}

fn check_pmf(p: &[f64]) -> Result<()> {
    if p.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidTarget("probabilities must be nonnegative".into()));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidTarget(format!("probabilities sum to {s}, not 1")));
    }
    Ok(())
}
