//! Simulation of every dynamic: Brownian paths, Ornstein-Uhlenbeck laws,
//! Euler-Maruyama on time grids, mixture-path jumps, finite-state chains and
//! operator-split superpositions.
//!
//! Trajectory i always draws from its own substream `rng::stream(seed, i)`,
//! so results do not depend on evaluation order or thread count.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::generators::{marginalize_conditional, ConditionalGenerator, GeneratorSpec, Law, LocalPart, Part, Posterior, RateFn};
use crate::points::Points;
use crate::rng;
use crate::schedules::MixtureSchedule;
use crate::special::adaptive_simpson;

/// Largest tolerated fraction of dropped non-finite trajectories.
pub const MAX_DROP_FRACTION: f64 = 1e-3;

/// Brownian increments over consecutive steps of length `dts[k]`, one row per step.
pub fn brownian_increments(dts: &[f64], d: usize, seed: u64) -> Points {
    let mut r = rng::stream(seed, 0);
    let mut out = Points::zeros(dts.len(), d);
    for (k, &dt) in dts.iter().enumerate() {
        let s = dt.sqrt();
        for v in out.row_mut(k) {
            *v = s * r.sample::<f64, _>(StandardNormal);
        }
    }
    out
}

/// Σ ‖ΔB_k‖² over the increments of a path.
pub fn quadratic_variation(increments: &Points) -> f64 {
    increments.as_flat().iter().map(|v| v * v).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Points,
    /// (time, from, to)
    pub jumps: Vec<(f64, Vec<f64>, Vec<f64>)>,
}

/// Starting law of a simulation.
#[derive(Clone, Debug, PartialEq)]
pub enum Initial {
    Point(Vec<f64>),
    Law(Law),
    /// Row i starts trajectory i.
    Points(Points),
}

impl Initial {
    pub fn dim(&self) -> usize {
        match self {
            Self::Point(p) => p.len(),
            Self::Law(l) => l.dim(),
            Self::Points(p) => p.dim(),
        }
    }

    fn draw(&self, i: usize, r: &mut rng::Rng, out: &mut [f64]) {
        match self {
            Self::Point(p) => out.copy_from_slice(p),
            Self::Law(l) => l.sample_one(r, out),
            Self::Points(p) => out.copy_from_slice(p.row(i)),
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        match self {
            Self::Points(p) if p.len() != n => Err(Error::InvalidArgument(format!("{} initial points for {n} trajectories", p.len()))),
            _ => Ok(()),
        }
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("time grid must be strictly increasing with at least two points".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Ornstein-Uhlenbeck

/// dY = −f_τ Y dτ + √2 σ_τ dB on [0, horizon].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OuCoefficients {
    Constant { lambda: f64, sigma: f64 },
    /// f_τ = lambda·(1 + amplitude·sin τ), σ_τ = sigma·(1 + amplitude·cos τ)
    Oscillating { lambda: f64, sigma: f64, amplitude: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OuParams {
    pub coefficients: OuCoefficients,
    pub horizon: f64,
}

impl OuParams {
    pub fn constant(lambda: f64, sigma: f64, horizon: f64) -> Result<Self> {
        let p = Self { coefficients: OuCoefficients::Constant { lambda, sigma }, horizon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.coefficients {
            OuCoefficients::Constant { lambda, sigma } => lambda > 0.0 && sigma > 0.0,
            OuCoefficients::Oscillating { lambda, sigma, amplitude } => lambda > 0.0 && sigma > 0.0 && amplitude.abs() < 1.0,
        };
        if !ok || !(self.horizon > 0.0) {
            return Err(Error::InvalidArgument("OU parameters must be positive".into()));
        }
        Ok(())
    }

    pub fn rate(&self, tau: f64) -> f64 {
        match self.coefficients {
            OuCoefficients::Constant { lambda, .. } => lambda,
            OuCoefficients::Oscillating { lambda, amplitude, .. } => lambda * (1.0 + amplitude * tau.sin()),
        }
    }

    pub fn noise(&self, tau: f64) -> f64 {
        match self.coefficients {
            OuCoefficients::Constant { sigma, .. } => sigma,
            OuCoefficients::Oscillating { sigma, amplitude, .. } => sigma * (1.0 + amplitude * tau.cos()),
        }
    }

    /// μ_τ = ∫_0^τ f
    pub fn integrated_rate(&self, tau: f64) -> f64 {
        match self.coefficients {
            OuCoefficients::Constant { lambda, .. } => lambda * tau,
            OuCoefficients::Oscillating { lambda, amplitude, .. } => lambda * (tau + amplitude * (1.0 - tau.cos())),
        }
    }

    /// (e^{−μ_τ}, ∫_0^τ 2σ_s² e^{2(μ_s − μ_τ)} ds)
    pub fn transition(&self, tau: f64) -> (f64, f64) {
        let mu = self.integrated_rate(tau);
        let var = match self.coefficients {
            OuCoefficients::Constant { lambda, sigma } => sigma * sigma / lambda * (-(-2.0 * lambda * tau).exp_m1()),
            OuCoefficients::Oscillating { .. } => {
                let f = |s: f64| 2.0 * self.noise(s).powi(2) * (2.0 * (self.integrated_rate(s) - mu)).exp();
                adaptive_simpson(&f, 0.0, tau, 1e-12)
            }
        };
        ((-mu).exp(), var)
    }
}

/// Exact samples of Y_τ.
pub fn ou_exact_sample(params: &OuParams, initial: &Initial, tau: f64, n: usize, seed: u64) -> Result<Points> {
    if !(0.0..=params.horizon).contains(&tau) {
        return Err(Error::TimeOutOfDomain { t: tau, what: "the OU horizon" });
    }
    initial.check(n)?;
    let (decay, var) = params.transition(tau);
    let sd = var.sqrt();
    let d = initial.dim();
    let mut out = Points::zeros(n, d);
    for i in 0..n {
        let mut r = rng::stream(seed, i as u64);
        let row = out.row_mut(i);
        initial.draw(i, &mut r, row);
        for v in row.iter_mut() {
            let e: f64 = r.sample(StandardNormal);
            *v = decay * *v + if tau > 0.0 { sd * e } else { 0.0 };
        }
    }
    Ok(out)
}

/// Euler-Maruyama for the OU forward process, optionally keeping paths.
pub fn ou_euler(params: &OuParams, initial: &Initial, tau: f64, dt: f64, n: usize, seed: u64, keep: usize) -> Result<(Points, Vec<Trajectory>)> {
    let steps = (tau / dt).ceil().max(1.0) as usize;
    let grid: Vec<f64> = (0..=steps).map(|k| tau * k as f64 / steps as f64).collect();
    let p = *params;
    let drift = move |s: f64, x: &[f64], out: &mut [f64]| {
        for k in 0..x.len() {
            out[k] = -p.rate(s) * x[k];
        }
    };
    let out = integrate_sde(&drift, &|s| p.noise(s), initial, &grid, n, seed, keep)?;
    Ok((out.ends, out.paths))
}

// ---------------------------------------------------------------------------
// SDE / ODE

#[derive(Clone, Debug, PartialEq)]
pub struct SdeOutput {
    pub ends: Points,
    /// indices of dropped trajectories with the first non-finite time
    pub dropped: Vec<(usize, f64)>,
    pub paths: Vec<Trajectory>,
}

/// Euler-Maruyama for dX = a(t, X) dt + √2 b_t dB on `grid`. With b ≡ 0 this
/// is explicit Euler. The first `keep` trajectories are stored in full.
pub fn integrate_sde(
    drift: &dyn Fn(f64, &[f64], &mut [f64]),
    b: &dyn Fn(f64) -> f64,
    initial: &Initial,
    grid: &[f64],
    n: usize,
    seed: u64,
    keep: usize,
) -> Result<SdeOutput> {
    check_grid(grid)?;
    initial.check(n)?;
    let d = initial.dim();
    let mut ends = Points::new(d);
    let mut dropped = Vec::new();
    let mut paths = Vec::new();
    let mut x = vec![0.0; d];
    let mut a = vec![0.0; d];
    for i in 0..n {
        let mut r = rng::stream(seed, i as u64);
        initial.draw(i, &mut r, &mut x);
        let mut path = (i < keep).then(|| Trajectory { times: vec![grid[0]], states: Points::from_rows(d, &[&x]), jumps: Vec::new() });
        let mut bad = None;
        for w in grid.windows(2) {
            let h = w[1] - w[0];
            drift(w[0], &x, &mut a);
            let noise = (2.0 * h).sqrt() * b(w[0]);
            for k in 0..d {
                let e: f64 = r.sample(StandardNormal);
                x[k] += h * a[k] + noise * e;
            }
            if x.iter().any(|v| !v.is_finite()) {
                bad = Some(w[1]);
                break;
            }
            if let Some(p) = path.as_mut() {
                p.times.push(w[1]);
                p.states.push(&x);
            }
        }
        match bad {
            Some(t) => dropped.push((i, t)),
            None => ends.push(&x),
        }
        if let Some(p) = path {
            paths.push(p);
        }
    }
    if dropped.len() as f64 > MAX_DROP_FRACTION * n as f64 {
        return Err(Error::NonFiniteState { dropped: dropped.len(), total: n, first_time: dropped[0].1 });
    }
    Ok(SdeOutput { ends, dropped, paths })
}

/// Two Euler solutions from the same starts, on `grid` and on its uniform
/// refinement by `factor`, with aggregated Brownian increments.
pub fn coupled_refinement(
    drift: &dyn Fn(f64, &[f64], &mut [f64]),
    b: &dyn Fn(f64) -> f64,
    initial: &Initial,
    grid: &[f64],
    factor: usize,
    n: usize,
    seed: u64,
) -> Result<(Points, Points)> {
    check_grid(grid)?;
    initial.check(n)?;
    let d = initial.dim();
    let (mut coarse, mut fine) = (Points::new(d), Points::new(d));
    let (mut xc, mut xf, mut a) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut db = vec![0.0; d];
    for i in 0..n {
        let mut r = rng::stream(seed, i as u64);
        initial.draw(i, &mut r, &mut xc);
        xf.copy_from_slice(&xc);
        for w in grid.windows(2) {
            let h = (w[1] - w[0]) / factor as f64;
            db.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..factor {
                let s = w[0] + j as f64 * h;
                drift(s, &xf, &mut a);
                let bs = b(s);
                for k in 0..d {
                    let inc = h.sqrt() * r.sample::<f64, _>(StandardNormal);
                    db[k] += inc;
                    xf[k] += h * a[k] + 2f64.sqrt() * bs * inc;
                }
            }
            drift(w[0], &xc, &mut a);
            let bs = b(w[0]);
            for k in 0..d {
                xc[k] += (w[1] - w[0]) * a[k] + 2f64.sqrt() * bs * db[k];
            }
        }
        coarse.push(&xc);
        fine.push(&xf);
    }
    Ok((coarse, fine))
}

// ---------------------------------------------------------------------------
// jumps

/// Smallest τ with κ_τ ≥ level.
fn inverse_kappa(kappa: &MixtureSchedule, level: f64) -> f64 {
    match *kappa {
        MixtureSchedule::Linear => level,
        MixtureSchedule::Power { exponent } => level.powf(1.0 / exponent),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JumpOutput {
    pub ends: Points,
    /// number of jumps per trajectory
    pub jumps: Vec<usize>,
}

/// Simulate the mixture path up to `t_end` from a base draw at t = 0.
/// Conditional mode jumps once, to a target draw z. Marginal mode jumps
/// whenever the x-independent intensity κ̇/(1−κ) fires and lands on a draw
/// from the posterior landing law. Jump times come from exact inversion of
/// the survival function (1 − κ_t)/(1 − κ_s).
pub fn simulate_jump_mixture(
    kappa: MixtureSchedule,
    base: &Law,
    target: &Law,
    marginal: Option<&Posterior>,
    t_end: f64,
    n: usize,
    seed: u64,
) -> Result<JumpOutput> {
    if !(0.0..1.0).contains(&t_end) {
        return Err(Error::TimeOutOfDomain { t: t_end, what: "jump simulation (needs t < 1)" });
    }
    let d = base.dim();
    let mut ends = Points::new(d);
    let mut counts = Vec::with_capacity(n);
    let (mut x, mut z) = (vec![0.0; d], vec![0.0; d]);
    let cond = ConditionalGenerator::JumpCond { kappa };
    for i in 0..n {
        let mut r = rng::stream(seed, i as u64);
        base.sample_one(&mut r, &mut x);
        let mut jumps = 0;
        match marginal {
            None => {
                target.sample_one(&mut r, &mut z);
                let tau = inverse_kappa(&kappa, r.random::<f64>());
                if tau <= t_end {
                    x.copy_from_slice(&z);
                    jumps = 1;
                }
            }
            Some(post) => {
                let mut s = 0.0;
                loop {
                    let u: f64 = r.random();
                    let level = 1.0 - (1.0 - kappa.kappa(s)) * (1.0 - u);
                    let tau = inverse_kappa(&kappa, level);
                    if tau > t_end {
                        break;
                    }
                    let LocalPart::Jump { law, .. } = marginalize_conditional(&cond, post, tau, &x)? else {
                        unreachable!("jump conditionals marginalize to jumps")
                    };
                    law.sample(&mut r, &mut z)?;
                    x.copy_from_slice(&z);
                    jumps += 1;
                    s = tau;
                }
            }
        }
        ends.push(&x);
        counts.push(jumps);
    }
    Ok(JumpOutput { ends, jumps: counts })
}

fn draw_from_pmf(pmf: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    pmf.iter().rposition(|&p| p > 0.0).unwrap_or(pmf.len() - 1)
}

/// Gillespie simulation with rates frozen at each cell's midpoint.
pub fn simulate_ctmc(q: &RateFn, p0: &[f64], grid: &[f64], n: usize, seed: u64) -> Result<Vec<usize>> {
    check_grid(grid)?;
    let mut ends = Vec::with_capacity(n);
    let cells: Vec<_> = grid.windows(2).map(|w| (w[0], w[1], q(0.5 * (w[0] + w[1])))).collect();
    for i in 0..n {
        let mut r = rng::stream(seed, i as u64);
        let mut x = draw_from_pmf(p0, r.random());
        for (lo, hi, qm) in &cells {
            let mut t = *lo;
            loop {
                let out = qm.exit_rate(x);
                if out <= 0.0 {
                    break;
                }
                t += -(1.0 - r.random::<f64>()).ln() / out;
                if t >= *hi {
                    break;
                }
                let u = r.random::<f64>() * out;
                let mut acc = 0.0;
                let mut next = x;
                for y in 0..qm.n_states() {
                    if y != x {
                        acc += qm.rate(y, x);
                        next = y;
                        if u < acc {
                            break;
                        }
                    }
                }
                x = next;
            }
        }
        ends.push(x);
    }
    Ok(ends)
}

/// RK4 for ṗ = Q_t p; returns the pmf at every grid time.
pub fn forward_ode(q: &RateFn, p0: &[f64], grid: &[f64]) -> Result<Vec<Vec<f64>>> {
    check_grid(grid)?;
    let mut p = p0.to_vec();
    let mut out = vec![p.clone()];
    for w in grid.windows(2) {
        let h = w[1] - w[0];
        let (q0, qm, q1) = (q(w[0]), q(w[0] + 0.5 * h), q(w[1]));
        let k1 = q0.apply(&p);
        let p2: Vec<f64> = p.iter().zip(&k1).map(|(a, k)| a + 0.5 * h * k).collect();
        let k2 = qm.apply(&p2);
        let p3: Vec<f64> = p.iter().zip(&k2).map(|(a, k)| a + 0.5 * h * k).collect();
        let k3 = qm.apply(&p3);
        let p4: Vec<f64> = p.iter().zip(&k3).map(|(a, k)| a + h * k).collect();
        let k4 = q1.apply(&p4);
        for i in 0..p.len() {
            p[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        out.push(p.clone());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// superposition

#[derive(Clone, Debug, PartialEq)]
pub struct SuperpositionOutput {
    pub ends: Points,
    /// max over steps of the jump probability λ·dt
    pub max_jump_probability: f64,
    pub warnings: Vec<String>,
}

/// First-order splitting: an Euler-Maruyama step of the flow and diffusion
/// parts, then each jump part fires with probability w·λ·dt. Gaussian noise
/// uses stream i of `seed`; jump uniforms use stream i of a derived seed, so
/// switching jump parts off leaves the diffusive trajectory unchanged.
pub fn simulate_superposition(spec: &GeneratorSpec, initial: &Initial, grid: &[f64], n: usize, seed: u64) -> Result<SuperpositionOutput> {
    check_grid(grid)?;
    initial.check(n)?;
    let d = spec.dim;
    let jump_seed = rng::derive(seed, 0x6a75_6d70);
    let mut ends = Points::new(d);
    let mut max_p: f64 = 0.0;
    let (mut x, mut a, mut y) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for i in 0..n {
        let mut r = rng::stream(seed, i as u64);
        let mut rj = rng::stream(jump_seed, i as u64);
        initial.draw(i, &mut r, &mut x);
        for w in grid.windows(2) {
            let (t, h) = (w[0], w[1] - w[0]);
            spec.total_drift(t, &x, &mut a);
            let noise = (2.0 * h).sqrt() * spec.total_diffusion(t);
            for k in 0..d {
                let e: f64 = r.sample(StandardNormal);
                x[k] += h * a[k] + noise * e;
            }
            for wp in &spec.parts {
                let weight = (wp.weight)(t);
                if weight == 0.0 {
                    continue;
                }
                match &wp.part {
                    Part::Jump { intensity, law } => {
                        let p = weight * intensity(t, &x) * h;
                        max_p = max_p.max(p);
                        if rj.random::<f64>() < p {
                            law(t, &x)?.sample(&mut rj, &mut y)?;
                            x.copy_from_slice(&y);
                        }
                    }
                    Part::Rates(q) => {
                        let q = q(t);
                        let s = x[0].round() as usize;
                        let p = weight * q.exit_rate(s) * h;
                        max_p = max_p.max(p);
                        if rj.random::<f64>() < p {
                            let out = q.exit_rate(s);
                            let pmf: Vec<f64> = (0..q.n_states()).map(|y| if y == s { 0.0 } else { q.rate(y, s) / out }).collect();
                            x[0] = draw_from_pmf(&pmf, rj.random::<f64>()) as f64;
                        }
                    }
                    _ => {}
                }
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { dropped: 1, total: n, first_time: grid[grid.len() - 1] });
        }
        ends.push(&x);
    }
    let mut warnings = Vec::new();
    if max_p > 0.1 {
        warnings.push(format!("jump probability per step reached {max_p:.3} > 0.1; splitting error may be visible"));
    }
    Ok(SuperpositionOutput { ends, max_jump_probability: max_p, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::{finite_mixture_rates, gaussian_path_generator, marginal_generator, mixture_path_flow_1d, superpose, GaussianPath, MixturePath, StaticPath};
    use crate::generators::RateMatrix;
    use crate::metrics::{empirical_pmf, sliced_w1, total_variation, w1_1d, w1_to_mixture_1d};
    use crate::oracles::MarginalContext;
    use crate::schedules::{build_time_grid, CapacityConstants, GaussianSchedule};
    use crate::targets::{FiniteTarget, GaussianMixture};
    use std::sync::Arc;

    fn tv_band(p: &[f64], n: usize) -> f64 {
        0.5 * p.iter().map(|q| 3.0 * (q * (1.0 - q) / n as f64).sqrt()).sum::<f64>()
    }

    #[test]
    fn brownian_quadratic_variation() {
        let inc = brownian_increments(&vec![1e-4; 10_000], 1, 3);
        assert!((quadratic_variation(&inc) - 1.0).abs() < 5.0 * (2.0f64 / 1e4).sqrt());
        assert_eq!(quadratic_variation(&brownian_increments(&[], 1, 3)), 0.0);
        let inc = brownian_increments(&vec![0.01; 100_000], 1, 4);
        let v = inc.as_flat().iter().map(|x| x * x).sum::<f64>() / 1e5;
        assert!((v - 0.01).abs() < 4.0 * 0.01 * (2.0f64 / 1e5).sqrt());
    }

    #[test]
    fn ou_exact_law_matches_closed_form() {
        let p = OuParams::constant(5.0, 0.5, 5.0).unwrap();
        let (decay, var) = p.transition(5.0);
        assert!((decay - (-25.0f64).exp()).abs() < 1e-25);
        assert!((var - 0.05 * (1.0 - (-50.0f64).exp())).abs() < 1e-15);
        let y = ou_exact_sample(&p, &Initial::Point(vec![2.0]), 5.0, 100_000, 1).unwrap();
        let m = y.as_flat().iter().sum::<f64>() / 1e5;
        let v = y.as_flat().iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 1e5;
        assert!(m.abs() < 4.0 * (0.05f64 / 1e5).sqrt());
        assert!((v - 0.05).abs() < 4.0 * 0.05 * (2.0f64 / 1e5).sqrt());
        let y0 = ou_exact_sample(&p, &Initial::Point(vec![2.0]), 0.0, 10, 1).unwrap();
        assert!(y0.as_flat().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn ou_euler_agrees_with_exact_law() {
        let p = OuParams::constant(5.0, 0.5, 5.0).unwrap();
        let (ends, _) = ou_euler(&p, &Initial::Point(vec![2.0]), 1.0, 1e-4, 4000, 2, 0).unwrap();
        let (decay, var) = p.transition(1.0);
        let law = GaussianMixture::gaussian(vec![2.0 * decay], var).unwrap();
        assert!(w1_to_mixture_1d(ends.as_flat(), &law) <= 0.01);

        // time-varying coefficients: quadrature transition against Euler moments
        let q = OuParams { coefficients: OuCoefficients::Oscillating { lambda: 1.0, sigma: 0.7, amplitude: 0.5 }, horizon: 3.0 };
        let (decay, var) = q.transition(2.0);
        let (ends, _) = ou_euler(&q, &Initial::Point(vec![1.5]), 2.0, 1e-3, 20_000, 3, 0).unwrap();
        let law = GaussianMixture::gaussian(vec![1.5 * decay], var).unwrap();
        assert!(w1_to_mixture_1d(ends.as_flat(), &law) <= 0.015);
    }

    fn geometric_grid(k: usize, t_n: f64, steps: usize) -> Vec<f64> {
        let consts = CapacityConstants::default();
        let ratio = crate::schedules::anchored_ratio(k, t_n);
        build_time_grid(ratio, k, t_n, 1000, 1.0, 1, &consts).unwrap().sampler_grid(steps)
    }

    #[test]
    fn exact_flow_reaches_the_marginal_law() {
        let target = GaussianMixture::gaussian(vec![0.5], 0.3).unwrap();
        let sched = GaussianSchedule::vanilla_fm();
        let grid = geometric_grid(20, 0.999, 20);
        assert_eq!(grid.len(), 401);
        let drift = |t: f64, x: &[f64], o: &mut [f64]| {
            let a = MarginalContext::new(&target, &sched, t).unwrap().exact_drift(x).unwrap();
            o.copy_from_slice(&a);
        };
        let out = integrate_sde(&drift, &|_| 0.0, &Initial::Law(Law::Mixture(GaussianMixture::standard(1))), &grid, 10_000, 5, 0).unwrap();
        let end = MarginalContext::new(&target, &sched, 0.999).unwrap().marginal().clone();
        assert!(w1_to_mixture_1d(out.ends.as_flat(), &end) <= 0.02);
    }

    #[test]
    fn zero_dynamics_keep_initial_states() {
        let init = Initial::Law(Law::Mixture(GaussianMixture::standard(2)));
        let out = integrate_sde(&|_, _, o| o.fill(0.0), &|_| 0.0, &init, &[0.0, 0.5, 1.0], 50, 9, 2).unwrap();
        for i in 0..50 {
            let mut r = rng::stream(9, i as u64);
            let mut x = [0.0; 2];
            init.draw(i, &mut r, &mut x);
            assert_eq!(out.ends.row(i), &x);
        }
        assert_eq!(out.paths.len(), 2);
        assert_eq!(out.paths[0].states.len(), 3);
    }

    #[test]
    fn non_finite_trajectories_abort_the_run() {
        let init = Initial::Point(vec![1.0]);
        let r = integrate_sde(&|_, x, o| o[0] = x[0] * x[0] * 1e3, &|_| 0.0, &init, &(0..=20).map(|k| k as f64 * 0.05).collect::<Vec<_>>(), 10, 1, 0);
        assert!(matches!(r, Err(Error::NonFiniteState { dropped: 10, .. })));
    }

    #[test]
    fn generative_ou_sde_recovers_the_target() {
        let target = GaussianMixture::new(vec![0.4, 0.6], vec![vec![-1.0, 0.5], vec![1.0, -0.5]], vec![0.1, 0.15]).unwrap();
        let sched = GaussianSchedule::ou_sgm(1.0, 1.0, 5.0);
        let gen = gaussian_path_generator(&target, &sched);
        let grid: Vec<f64> = (0..=2000).map(|k| 0.999 * k as f64 / 2000.0).collect();
        let init = Initial::Law(Law::Mixture(MarginalContext::new(&target, &sched, 0.0).unwrap().marginal().clone()));
        let drift = |t: f64, x: &[f64], o: &mut [f64]| gen.total_drift(t, x, o);
        let b = |t: f64| gen.total_diffusion(t);
        let out = integrate_sde(&drift, &b, &init, &grid, 4000, 6, 0).unwrap();
        let reference = target.sample(4000, 60);
        assert!(sliced_w1(&out.ends, &reference, 64, 1) <= 0.05);
    }

    #[test]
    fn conditional_jump_fraction_equals_kappa() {
        let base = Law::Mixture(GaussianMixture::standard(1));
        let target = Law::Mixture(GaussianMixture::gaussian(vec![50.0], 1e-4).unwrap());
        let n = 100_000;
        for t in [0.3, 0.7] {
            let out = simulate_jump_mixture(MixtureSchedule::Linear, &base, &target, None, t, n, 1).unwrap();
            let frac = out.jumps.iter().filter(|&&j| j > 0).count() as f64 / n as f64;
            assert!((frac - t).abs() <= 3.0 * (t * (1.0 - t) / n as f64).sqrt(), "{t}: {frac}");
        }
        let out = simulate_jump_mixture(MixtureSchedule::Linear, &base, &target, None, 0.0, 1000, 1).unwrap();
        assert!(out.jumps.iter().all(|&j| j == 0));
    }

    #[test]
    fn marginal_jumps_match_the_static_path_on_finite_states() {
        let base = FiniteTarget::uniform(4);
        let target = FiniteTarget::new(vec![0.1, 0.6, 0.0, 0.3]).unwrap();
        for kappa in [MixtureSchedule::Linear, MixtureSchedule::Power { exponent: 2.0 }] {
            let post = Posterior::FiniteMixture { base: base.clone(), target: target.clone(), kappa };
            let n = 40_000;
            let t = 0.8;
            let out = simulate_jump_mixture(kappa, &Law::Finite(base.clone()), &Law::Finite(target.clone()), Some(&post), t, n, 2).unwrap();
            let states: Vec<usize> = out.ends.as_flat().iter().map(|&v| v as usize).collect();
            let k = kappa.kappa(t);
            let exact: Vec<f64> = (0..4).map(|i| (1.0 - k) * base.pmf()[i] + k * target.pmf()[i]).collect();
            let tv = total_variation(&empirical_pmf(&states, 4), &exact);
            assert!(tv <= tv_band(&exact, n), "{kappa:?}: {tv}");
        }
    }

    #[test]
    fn ctmc_reaches_detailed_balance_and_matches_forward_ode() {
        let q: RateFn = Arc::new(|_| RateMatrix::from_off_diagonal(2, |_, _| 1.0));
        let grid: Vec<f64> = (0..=100).map(|k| k as f64 * 0.1).collect();
        let n = 20_000;
        let ends = simulate_ctmc(&q, &[1.0, 0.0], &grid, n, 3).unwrap();
        let pmf = empirical_pmf(&ends, 2);
        assert!(total_variation(&pmf, &[0.5, 0.5]) <= tv_band(&[0.5, 0.5], n));

        let zero: RateFn = Arc::new(|_| RateMatrix::zero(3));
        let path = forward_ode(&zero, &[0.2, 0.3, 0.5], &grid).unwrap();
        assert_eq!(path.last().unwrap(), &vec![0.2, 0.3, 0.5]);

        let base = FiniteTarget::uniform(3);
        let target = FiniteTarget::new(vec![0.7, 0.2, 0.1]).unwrap();
        let q = finite_mixture_rates(&base, &target, MixtureSchedule::Linear);
        let grid: Vec<f64> = (0..=200).map(|k| 0.9 * k as f64 / 200.0).collect();
        let ode = forward_ode(&q, base.pmf(), &grid).unwrap();
        let exact: Vec<f64> = (0..3).map(|i| 0.1 * base.pmf()[i] + 0.9 * target.pmf()[i]).collect();
        assert!(total_variation(ode.last().unwrap(), &exact) < 1e-6);
        let ends = simulate_ctmc(&q, base.pmf(), &grid, n, 4).unwrap();
        let tv = total_variation(&empirical_pmf(&ends, 3), ode.last().unwrap());
        assert!(tv <= tv_band(&exact, n) + 0.01, "{tv}");
    }

    #[test]
    fn superposition_reduces_to_its_parts() {
        let base = GaussianMixture::standard(1);
        let target = GaussianMixture::new(vec![0.5, 0.5], vec![vec![-1.0], vec![2.0]], vec![0.2, 0.3]).unwrap();
        let kappa = MixtureSchedule::Linear;
        let flow = mixture_path_flow_1d(&base, &target, kappa);
        let jump = marginal_generator(
            ConditionalGenerator::JumpCond { kappa },
            Posterior::ContinuousMixture { base: base.clone(), target: target.clone(), kappa },
            1,
        );
        let grid: Vec<f64> = (0..=1000).map(|k| 0.9 * k as f64 / 1000.0).collect();
        let init = Initial::Law(Law::Mixture(base.clone()));

        let only_flow = superpose(&flow, &jump, Arc::new(|_| 1.0));
        let a = simulate_superposition(&only_flow, &init, &grid, 200, 5).unwrap();
        let b = integrate_sde(&|t, x, o| flow.total_drift(t, x, o), &|_| 0.0, &init, &grid, 200, 5, 0).unwrap();
        assert_eq!(a.ends, b.ends);

        let half = superpose(&flow, &jump, Arc::new(|_| 0.5));
        let n = 20_000;
        let out = simulate_superposition(&half, &init, &grid, n, 6).unwrap();
        assert!(out.warnings.is_empty());
        let path = MixturePath { base: Law::Mixture(base), target: Law::Mixture(target), kappa };
        let reference = path.sample_at(0.9, n, 66).unwrap();
        let w = w1_1d(out.ends.as_flat(), reference.as_flat());
        // two-sample fluctuation plus first-order splitting error
        assert!(w <= 0.05, "{w}");
    }

    #[test]
    fn superposition_warns_on_large_jump_probability() {
        let g = crate::generators::GeneratorSpec::new(1).with_jump(|_, _| 50.0, |_, x| Ok(crate::generators::JumpLaw::point(x)));
        let out = simulate_superposition(&g, &Initial::Point(vec![0.0]), &[0.0, 0.01], 5, 1).unwrap();
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn coupled_refinement_shares_noise() {
        let drift = |_: f64, x: &[f64], o: &mut [f64]| o[0] = -x[0];
        let grid: Vec<f64> = (0..=10).map(|k| k as f64 * 0.1).collect();
        let (c, f) = coupled_refinement(&drift, &|_| 0.3, &Initial::Point(vec![1.0]), &grid, 16, 2000, 7).unwrap();
        let (c, f) = (c.as_flat(), f.as_flat());
        let paired = (0..2000).map(|i| (c[i] - f[i]).abs()).sum::<f64>() / 2000.0;
        let shuffled = (0..2000).map(|i| (c[i] - f[(i + 1) % 2000]).abs()).sum::<f64>() / 2000.0;
        assert!(paired < 0.2 * shuffled, "{paired} vs {shuffled}");
        let _ = GaussianPath { target: GaussianMixture::standard(1), sched: GaussianSchedule::vanilla_fm() };
    }
}
