//! Distances, divergences and evaluators for the stability bounds.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::StaticPath;
use crate::points::{norm, Points};
use crate::rng;
use crate::samplers::{integrate_sde, Initial};
use crate::special::{normal_cdf, normal_pdf, trapezoid};
use crate::targets::GaussianMixture;

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Exact W1 between two empirical laws on the line, ∫|F_a − F_b|.
pub fn w1_1d(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "W1 needs nonempty samples");
    let (a, b) = (sorted(a), sorted(b));
    if a.len() == b.len() {
        return a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            _ => unreachable!(),
        };
        total += (next - prev) * (i as f64 / na - j as f64 / nb).abs();
        while i < a.len() && a[i] <= next {
            i += 1;
        }
        while j < b.len() && b[j] <= next {
            j += 1;
        }
        prev = next;
    }
    total
}

/// ∫_{−∞}^x F for a 1D mixture, from s[zΦ(z) + φ(z)] per component.
fn cdf_antiderivative(m: &GaussianMixture, x: f64) -> f64 {
    m.weights()
        .iter()
        .zip(m.means())
        .zip(m.variances())
        .map(|((w, mu), v)| {
            let s = v.sqrt();
            let z = (x - mu[0]) / s;
            w * s * (z * normal_cdf(z) + normal_pdf(z))
        })
        .sum()
}

/// Exact W1 between an empirical law and a 1D Gaussian mixture.
pub fn w1_to_mixture_1d(samples: &[f64], law: &GaussianMixture) -> f64 {
    assert!(law.dim() == 1 && !samples.is_empty());
    let x = sorted(samples);
    let n = x.len() as f64;
    let g = |v: f64| cdf_antiderivative(law, v);
    let mean = law.mean()[0];
    // left tail ∫_{−∞}^{x_1} F, right tail ∫_{x_n}^{∞} (1 − F) = mean-free form
    let mut total = g(x[0]);
    let last = x[x.len() - 1];
    total += g(last) - last + mean;
    for i in 0..x.len() - 1 {
        let (lo, hi, c) = (x[i], x[i + 1], (i + 1) as f64 / n);
        if hi <= lo {
            continue;
        }
        // ∫ |c − F| on [lo, hi], split where F crosses c
        let (flo, fhi) = (law.cdf_1d(lo), law.cdf_1d(hi));
        let above = |a: f64, b: f64| (g(b) - g(a)) - c * (b - a);
        if c <= flo {
            total += above(lo, hi);
        } else if c >= fhi {
            total += -above(lo, hi);
        } else {
            let cross = law.quantile_1d(c).clamp(lo, hi);
            total += -above(lo, cross) + above(cross, hi);
        }
    }
    total
}

/// Mean 1D W1 over `n_proj` random unit directions (exact 1D W1 when d = 1).
pub fn sliced_w1(a: &Points, b: &Points, n_proj: usize, seed: u64) -> f64 {
    let d = a.dim();
    if d == 1 {
        return w1_1d(a.as_flat(), b.as_flat());
    }
    let mut total = 0.0;
    for j in 0..n_proj {
        let mut r = rng::stream(seed, j as u64);
        let mut dir: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
        let l = norm(&dir);
        dir.iter_mut().for_each(|v| *v /= l);
        total += w1_1d(&a.project(&dir), &b.project(&dir));
    }
    total / n_proj as f64
}

pub fn empirical_pmf(states: &[usize], s: usize) -> Vec<f64> {
    let mut p = vec![0.0; s];
    for &x in states {
        p[x] += 1.0;
    }
    p.iter_mut().for_each(|v| *v /= states.len() as f64);
    p
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// KL(N(m1, v1 I) ‖ N(m2, v2 I)).
pub fn gaussian_kl(m1: &[f64], v1: f64, m2: &[f64], v2: f64) -> Result<f64> {
    if !(v1 > 0.0 && v2 > 0.0) {
        return Err(Error::InvalidArgument("variances must be positive".into()));
    }
    let d = m1.len() as f64;
    let dm: f64 = m1.iter().zip(m2).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(0.5 * (d * v1 / v2 + dm / v2 - d + d * (v2 / v1).ln()))
}

// ---------------------------------------------------------------------------
// bound reports

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Holds,
    HoldsWithinBand,
    Violated,
}

impl Verdict {
    pub fn from_slack(slack: f64, se: f64, disc_tol: f64) -> Self {
        if slack >= -disc_tol {
            Self::Holds
        } else if slack >= -(3.0 * se + disc_tol) {
            Self::HoldsWithinBand
        } else {
            Self::Violated
        }
    }

    pub fn is_violated(self) -> bool {
        self == Self::Violated
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub monte_carlo_se: f64,
    pub disc_tol: f64,
    pub verdict: Verdict,
}

impl BoundReport {
    pub fn new(lhs: f64, rhs: f64, se: f64, disc_tol: f64) -> Self {
        let slack = rhs - lhs;
        Self { lhs, rhs, slack, monte_carlo_se: se, disc_tol, verdict: Verdict::from_slack(slack, se, disc_tol) }
    }
}

/// 1D Gaussian flow with velocity A x + B and constant coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearGaussianFlow1d {
    pub slope: f64,
    pub offset: f64,
    pub m0: f64,
    pub v0: f64,
}

impl LinearGaussianFlow1d {
    /// Closed-form (mean, variance) at t.
    pub fn moments(&self, t: f64) -> (f64, f64) {
        let (a, b) = (self.slope, self.offset);
        let m = if a == 0.0 { self.m0 + b * t } else { (self.m0 + b / a) * (a * t).exp() - b / a };
        (m, self.v0 * (2.0 * a * t).exp())
    }

    pub fn velocity(&self, x: f64) -> f64 {
        self.slope * x + self.offset
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KlTransportReport {
    /// KL(p_1 ‖ q_1)
    pub lhs: f64,
    /// KL(p_0 ‖ q_0) + ∫⟨u − û, ∇log(p_t/q_t)⟩ p_t dt
    pub rhs: f64,
    pub residual: f64,
}

/// Both sides of the integrated KL transport identity on [0, 1] with an
/// `n_grid`-point trapezoid in t.
pub fn kl_transport_check(p: &LinearGaussianFlow1d, q: &LinearGaussianFlow1d, n_grid: usize) -> KlTransportReport {
    let kl = |t: f64| {
        let ((mp, vp), (mq, vq)) = (p.moments(t), q.moments(t));
        gaussian_kl(&[mp], vp, &[mq], vq).expect("positive variances")
    };
    let ts: Vec<f64> = (0..n_grid).map(|k| k as f64 / (n_grid - 1) as f64).collect();
    let integrand: Vec<f64> = ts
        .iter()
        .map(|&t| {
            let ((mp, vp), (mq, vq)) = (p.moments(t), q.moments(t));
            // (u − û)(x) = c1 x + c0, ∇log(p/q)(x) = e1 x + e0, x ~ N(mp, vp)
            let (c1, c0) = (p.slope - q.slope, p.offset - q.offset);
            let (e1, e0) = (1.0 / vq - 1.0 / vp, mp / vp - mq / vq);
            let ex2 = vp + mp * mp;
            c1 * e1 * ex2 + (c1 * e0 + c0 * e1) * mp + c0 * e0
        })
        .collect();
    let rhs = kl(0.0) + trapezoid(&ts, &integrand);
    let lhs = kl(1.0);
    KlTransportReport { lhs, rhs, residual: (lhs - rhs).abs() }
}

/// Score estimate used by the reverse OU sampler.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScoreEstimate {
    Exact,
    /// (1 + ε) times the exact score
    Scaled(f64),
}

/// Prior for the reverse sampler.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Prior {
    /// N(0, σ²/λ)
    Stationary,
    /// the exact forward law at the horizon
    ExactTerminal,
}

/// Forward OU dY = −λ Y dτ + √2 σ dB from N(m0, v0) on [0, horizon] in d
/// dimensions, reversed with diffusion b and a score estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlBoundSetup {
    pub lambda: f64,
    pub sigma: f64,
    pub horizon: f64,
    pub reverse_diffusion: f64,
    pub m0: f64,
    pub v0: f64,
    pub dim: usize,
}

impl KlBoundSetup {
    /// (mean, variance) of the forward law at τ.
    pub fn forward(&self, tau: f64) -> (f64, f64) {
        let e = (-self.lambda * tau).exp();
        (self.m0 * e, self.v0 * e * e + self.sigma * self.sigma / self.lambda * (1.0 - e * e))
    }
}

/// KL(p_0 ‖ p̂_T) against KL(p_T ‖ p_∞) + ∫ (σ² + b²)²/(4b²) E‖∇log p − ŝ‖².
/// The left side integrates the Gaussian moment ODEs of the linear reverse
/// SDE by RK4; the integrand is a Monte-Carlo mean over forward samples.
pub fn kl_stability_bound(setup: &KlBoundSetup, score: ScoreEstimate, prior: Prior, n_time: usize, n_mc: usize, seed: u64) -> Result<BoundReport> {
    let s = *setup;
    if !(s.reverse_diffusion > 0.0) {
        return Err(Error::InvalidArgument("reverse diffusion must be positive".into()));
    }
    let eps = match score {
        ScoreEstimate::Exact => 0.0,
        ScoreEstimate::Scaled(e) => e,
    };
    let (sig2, b2) = (s.sigma * s.sigma, s.reverse_diffusion * s.reverse_diffusion);
    let g = sig2 + b2;
    let (m_t, v_t) = s.forward(s.horizon);
    let (mut m, mut v) = match prior {
        Prior::Stationary => (0.0, sig2 / s.lambda),
        Prior::ExactTerminal => (m_t, v_t),
    };
    let prior_kl = gaussian_kl(&vec![m_t; s.dim], v_t, &vec![m; s.dim], v)?;

    // reverse time u ∈ [0, T] runs the forward law backwards from τ = T − u
    let rhs_mv = |u: f64, m: f64, v: f64| {
        let (mu, vu) = s.forward(s.horizon - u);
        let k = (1.0 + eps) * g / vu;
        (s.lambda * m - k * (m - mu), 2.0 * (s.lambda - k) * v + 2.0 * b2)
    };
    let steps = 20 * n_time.max(1);
    let h = s.horizon / steps as f64;
    for k in 0..steps {
        let u = k as f64 * h;
        let (a1, b1) = rhs_mv(u, m, v);
        let (a2, b2_) = rhs_mv(u + 0.5 * h, m + 0.5 * h * a1, v + 0.5 * h * b1);
        let (a3, b3) = rhs_mv(u + 0.5 * h, m + 0.5 * h * a2, v + 0.5 * h * b2_);
        let (a4, b4) = rhs_mv(u + h, m + h * a3, v + h * b3);
        m += h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
        v += h / 6.0 * (b1 + 2.0 * b2_ + 2.0 * b3 + b4);
    }
    let lhs = gaussian_kl(&vec![s.m0; s.dim], s.v0, &vec![m; s.dim], v)?;

    let weight = g * g / (4.0 * b2);
    let taus: Vec<f64> = (0..=n_time).map(|k| s.horizon * k as f64 / n_time as f64).collect();
    let mut means = Vec::with_capacity(taus.len());
    let mut vars = Vec::with_capacity(taus.len());
    for (j, &tau) in taus.iter().enumerate() {
        let (mu, vu) = s.forward(tau);
        let mut r = rng::stream(seed, j as u64);
        let (mut acc, mut acc2) = (0.0, 0.0);
        for _ in 0..n_mc {
            let mut sq = 0.0;
            for _ in 0..s.dim {
                let y = mu + vu.sqrt() * r.sample::<f64, _>(StandardNormal);
                let err = eps * (y - mu) / vu;
                sq += err * err;
            }
            acc += sq;
            acc2 += sq * sq;
        }
        let mean = acc / n_mc as f64;
        means.push(weight * mean);
        vars.push(weight * weight * (acc2 / n_mc as f64 - mean * mean).max(0.0) / n_mc as f64);
    }
    let rhs = prior_kl + trapezoid(&taus, &means);
    let hstep = s.horizon / n_time as f64;
    let se = vars
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let w = if k == 0 || k == n_time { 0.5 * hstep } else { hstep };
            w * w * v
        })
        .sum::<f64>()
        .sqrt();
    Ok(BoundReport::new(lhs, rhs, se, 1e-6 * (1.0 + rhs.abs())))
}

/// How the Wasserstein side of the W1 bound is obtained.
pub enum W1Lhs<'a> {
    Known(f64),
    /// Simulate both drifts with b = 0 from `initial` on the bound's grid.
    Simulated { initial: &'a Initial, n: usize },
}

/// W1(p_T, p̂_T) against ∫ exp(∫_t^T ℓ̂) ‖a_t − â_t‖_{L¹(p_t)} dt, with the
/// drift error averaged over static-path samples at each grid time.
pub fn w1_stability_bound(
    exact: &dyn Fn(f64, &[f64], &mut [f64]),
    learned: &dyn Fn(f64, &[f64], &mut [f64]),
    ell: &dyn Fn(f64) -> f64,
    path: &dyn StaticPath,
    grid: &[f64],
    lhs: W1Lhs<'_>,
    n_mc: usize,
    disc_tol: f64,
    seed: u64,
) -> Result<BoundReport> {
    let lhs = match lhs {
        W1Lhs::Known(v) => v,
        W1Lhs::Simulated { initial, n } => {
            let zero = |_: f64| 0.0;
            let a = integrate_sde(exact, &zero, initial, grid, n, seed, 0)?;
            let b = integrate_sde(learned, &zero, initial, grid, n, seed, 0)?;
            sliced_w1(&a.ends, &b.ends, 64, rng::derive(seed, 5))
        }
    };
    // cumulative ∫_t^T ℓ̂ by trapezoid from the end
    let m = grid.len();
    let ells: Vec<f64> = grid.iter().map(|&t| ell(t)).collect();
    let mut tail = vec![0.0; m];
    for k in (0..m - 1).rev() {
        tail[k] = tail[k + 1] + 0.5 * (grid[k + 1] - grid[k]) * (ells[k] + ells[k + 1]);
    }
    let d = path.dim();
    let (mut ea, mut eb) = (vec![0.0; d], vec![0.0; d]);
    let mut vals = Vec::with_capacity(m);
    let mut vars = Vec::with_capacity(m);
    for (k, &t) in grid.iter().enumerate() {
        let xs = path.sample_at(t, n_mc, rng::derive(seed, 100 + k as u64))?;
        let (mut acc, mut acc2) = (0.0, 0.0);
        for x in xs.rows() {
            exact(t, x, &mut ea);
            learned(t, x, &mut eb);
            let e = ea.iter().zip(&eb).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            acc += e;
            acc2 += e * e;
        }
        let mean = acc / n_mc as f64;
        let w = tail[k].exp();
        vals.push(w * mean);
        vars.push(w * w * (acc2 / n_mc as f64 - mean * mean).max(0.0) / n_mc as f64);
    }
    let rhs = trapezoid(grid, &vals);
    let se = (0..m)
        .map(|k| {
            let left = if k > 0 { grid[k] - grid[k - 1] } else { 0.0 };
            let right = if k + 1 < m { grid[k + 1] - grid[k] } else { 0.0 };
            let w = 0.5 * (left + right);
            w * w * vars[k]
        })
        .sum::<f64>()
        .sqrt();
    Ok(BoundReport::new(lhs, rhs, se, disc_tol))
}

// ---------------------------------------------------------------------------
// rate fitting

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub budgets: usize,
}

fn ols(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Least-squares slope of ln(error) on ln(n) with a 95% percentile bootstrap
/// that resamples repetitions within each budget.
pub fn rate_slope(points: &[(f64, f64)], n_boot: usize, seed: u64) -> Result<RateFit> {
    let mut budgets: Vec<f64> = points.iter().map(|p| p.0).collect();
    budgets.sort_by(f64::total_cmp);
    budgets.dedup();
    let groups: Vec<Vec<(f64, f64)>> = budgets
        .iter()
        .map(|&n| points.iter().filter(|p| p.0 == n).map(|p| (p.0.ln(), p.1.ln())).collect())
        .collect();
    if groups.len() < 4 || groups.iter().any(|g| g.len() < 5) {
        return Err(Error::InvalidArgument("rate fit needs at least 4 budgets with 5 repetitions each".into()));
    }
    if points.iter().any(|p| !(p.0 > 0.0 && p.1 > 0.0)) {
        return Err(Error::InvalidArgument("budgets and errors must be positive".into()));
    }
    let all: Vec<(f64, f64)> = groups.iter().flatten().copied().collect();
    let (slope, intercept) = ols(&all);
    let mut r = rng::stream(seed, 0);
    let mut slopes = Vec::with_capacity(n_boot);
    let mut sample = Vec::with_capacity(all.len());
    for _ in 0..n_boot {
        sample.clear();
        for g in &groups {
            for _ in 0..g.len() {
                sample.push(g[r.random_range(0..g.len())]);
            }
        }
        slopes.push(ols(&sample).0);
    }
    slopes.sort_by(f64::total_cmp);
    let pick = |q: f64| slopes[((q * (n_boot - 1) as f64).round() as usize).min(n_boot - 1)];
    let (ci_low, ci_high) = if n_boot == 0 { (slope, slope) } else { (pick(0.025), pick(0.975)) };
    Ok(RateFit { slope, intercept, ci_low, ci_high, budgets: groups.len() })
}
