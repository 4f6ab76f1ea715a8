//! Interpolation schedules, the geometric time partition and early stopping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleKind {
    VanillaFm,
    RescaledDiffusion,
    /// Reparametrized OU score model with rate `lambda`, noise `sigma` and
    /// physical horizon `horizon`.
    OuSgm { lambda: f64, sigma: f64, horizon: f64 },
}

/// Generative diffusion b_t attached to a Gaussian path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "diffusion", content = "value", rename_all = "kebab-case")]
pub enum Diffusion {
    /// b_t of the named model: 0, t^(−1/2), or √T·σ.
    #[default]
    PathDefault,
    Zero,
    Constant(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSchedule {
    pub kind: ScheduleKind,
    pub diffusion: Diffusion,
}

/// Mean scale and noise level of the static path at one time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathCoefficients {
    pub alpha: f64,
    pub alpha_dot: f64,
    pub sigma: f64,
    pub sigma_dot: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coefficients {
    pub alpha: f64,
    pub alpha_dot: f64,
    pub sigma: f64,
    pub sigma_dot: f64,
    pub b: f64,
    pub eta: f64,
}

impl Coefficients {
    /// σ²α̇/α − σσ̇, the forward noise rate of the path.
    pub fn sigma_fwd_sq(&self) -> f64 {
        self.sigma * self.sigma * self.alpha_dot / self.alpha - self.sigma * self.sigma_dot
    }
}

impl GaussianSchedule {
    pub fn new(kind: ScheduleKind) -> Self {
        Self { kind, diffusion: Diffusion::PathDefault }
    }

    pub fn vanilla_fm() -> Self {
        Self::new(ScheduleKind::VanillaFm)
    }

    pub fn rescaled_diffusion() -> Self {
        Self::new(ScheduleKind::RescaledDiffusion)
    }

    pub fn ou_sgm(lambda: f64, sigma: f64, horizon: f64) -> Self {
        Self::new(ScheduleKind::OuSgm { lambda, sigma, horizon })
    }

    pub fn with_diffusion(mut self, diffusion: Diffusion) -> Self {
        self.diffusion = diffusion;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let ScheduleKind::OuSgm { lambda, sigma, horizon } = self.kind {
            if !(lambda > 0.0 && sigma > 0.0 && horizon > 0.0) {
                return Err(Error::InvalidArgument("OU schedule needs positive lambda, sigma and horizon".into()));
            }
        }
        if let Diffusion::Constant(b) = self.diffusion {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::InvalidArgument("constant diffusion must be finite and nonnegative".into()));
            }
        }
        Ok(())
    }

    /// Path coefficients, valid on [0, 1) (σ_t > 0).
    pub fn path(&self, t: f64) -> Result<PathCoefficients> {
        if !(0.0..1.0).contains(&t) {
            return Err(Error::TimeOutOfDomain { t, what: "the Gaussian path (σ_t > 0 needs 0 ≤ t < 1)" });
        }
        Ok(match self.kind {
            ScheduleKind::VanillaFm => PathCoefficients { alpha: t, alpha_dot: 1.0, sigma: 1.0 - t, sigma_dot: -1.0 },
            ScheduleKind::RescaledDiffusion => {
                let sigma = (1.0 - t * t).sqrt();
                PathCoefficients { alpha: t, alpha_dot: 1.0, sigma, sigma_dot: -t / sigma }
            }
            ScheduleKind::OuSgm { lambda, sigma, horizon } => {
                let decay = (-lambda * horizon * (1.0 - t)).exp();
                let var = sigma * sigma / lambda * (1.0 - decay * decay);
                let s = var.sqrt();
                PathCoefficients {
                    alpha: decay,
                    alpha_dot: lambda * horizon * decay,
                    sigma: s,
                    sigma_dot: -sigma * sigma * horizon * decay * decay / s,
                }
            }
        })
    }

    /// Generative diffusion b_t.
    pub fn diffusion_at(&self, t: f64) -> Result<f64> {
        match self.diffusion {
            Diffusion::Zero => Ok(0.0),
            Diffusion::Constant(b) => Ok(b),
            Diffusion::PathDefault => match self.kind {
                ScheduleKind::VanillaFm => Ok(0.0),
                ScheduleKind::RescaledDiffusion => {
                    if t > 0.0 {
                        Ok(t.powf(-0.5))
                    } else {
                        Err(Error::TimeOutOfDomain { t, what: "the rescaled diffusion b_t = t^(-1/2)" })
                    }
                }
                ScheduleKind::OuSgm { sigma, horizon, .. } => Ok(horizon.sqrt() * sigma),
            },
        }
    }

    pub fn eval(&self, t: f64) -> Result<Coefficients> {
        let p = self.path(t)?;
        let b = self.diffusion_at(t)?;
        let eta = match (self.kind, self.diffusion) {
            (ScheduleKind::VanillaFm, Diffusion::PathDefault | Diffusion::Zero) => -1.0 / (1.0 - t),
            (ScheduleKind::RescaledDiffusion, Diffusion::PathDefault) => -(1.0 + t * t) / (t * (1.0 - t * t)),
            _ => p.sigma_dot / p.sigma - b * b / (p.sigma * p.sigma),
        };
        Ok(Coefficients { alpha: p.alpha, alpha_dot: p.alpha_dot, sigma: p.sigma, sigma_dot: p.sigma_dot, b, eta })
    }

    /// Earliest time at which `eval` succeeds, as a sampler floor.
    pub fn needs_positive_start(&self) -> bool {
        matches!((self.kind, self.diffusion), (ScheduleKind::RescaledDiffusion, Diffusion::PathDefault))
    }
}

/// κ_t of the mixture path (1−κ_t)p_0 + κ_t δ_z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MixtureSchedule {
    #[default]
    Linear,
    /// κ_t = t^p with p ≥ 1.
    Power { exponent: f64 },
}

impl MixtureSchedule {
    pub fn kappa(&self, t: f64) -> f64 {
        match *self {
            Self::Linear => t,
            Self::Power { exponent } => t.powf(exponent),
        }
    }

    pub fn kappa_dot(&self, t: f64) -> f64 {
        match *self {
            Self::Linear => 1.0,
            Self::Power { exponent } => exponent * t.powf(exponent - 1.0),
        }
    }

    /// Jump intensity κ̇/(1−κ) of the conditional jump generator.
    pub fn intensity(&self, t: f64) -> Result<f64> {
        let k = self.kappa(t);
        if !(0.0..1.0).contains(&t) || k >= 1.0 {
            return Err(Error::TimeOutOfDomain { t, what: "the jump intensity (needs κ_t < 1)" });
        }
        Ok(self.kappa_dot(t) / (1.0 - k))
    }
}

/// Constants multiplying the capacity formulas.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CapacityConstants {
    pub depth: f64,
    pub width: f64,
    pub weight_exponent: f64,
    pub value: f64,
    pub osl: f64,
    /// Hard cap on the width formula, which explodes as t_k → 1.
    pub max_width: usize,
}

impl Default for CapacityConstants {
    fn default() -> Self {
        Self { depth: 1.0, width: 1.0, weight_exponent: 1.0, value: 1.0, osl: 1.0, max_width: 64 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCapacity {
    pub depth: usize,
    pub width: usize,
    pub weight_bound: f64,
    pub value_bound: f64,
    pub osl_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub alpha_ratio: f64,
    pub k_n: usize,
    pub t_n: f64,
    /// t_0 < … < t_{K_n} = T_n
    pub edges: Vec<f64>,
    /// 1 − t_k, kept separately so sums near t = 1 stay exact.
    pub gaps: Vec<f64>,
    pub capacity: Vec<BlockCapacity>,
}

/// ⌈ln n⌉, at least 1.
pub fn default_block_count(n: usize) -> usize {
    ((n as f64).ln().ceil() as usize).max(1)
}

/// T_n = 1 − n^(−2(β+1)/(2β+d)).
pub fn stopping_time(n: usize, beta: f64, d: usize) -> f64 {
    1.0 - (n as f64).powf(-2.0 * (beta + 1.0) / (2.0 * beta + d as f64))
}

/// Ratio placing t_0 at 0 for the given block count and stopping time.
pub fn anchored_ratio(k_n: usize, t_n: f64) -> f64 {
    (1.0 - t_n).powf(-1.0 / k_n as f64)
}

pub fn build_time_grid(
    alpha_ratio: f64,
    k_n: usize,
    t_n: f64,
    n: usize,
    beta: f64,
    d: usize,
    consts: &CapacityConstants,
) -> Result<TimeGrid> {
    if !(alpha_ratio > 1.0) || !alpha_ratio.is_finite() {
        return Err(Error::InvalidPartition(format!("grid ratio {alpha_ratio} must exceed 1")));
    }
    if k_n == 0 {
        return Err(Error::InvalidPartition("need at least one block".into()));
    }
    if !(t_n > 0.0 && t_n < 1.0) {
        return Err(Error::InvalidPartition(format!("stopping time {t_n} must lie in (0, 1)")));
    }
    if n == 0 || !(beta > 0.0) || d == 0 {
        return Err(Error::InvalidPartition("sample budget, smoothness and dimension must be positive".into()));
    }
    let gap = 1.0 - t_n;
    let gaps: Vec<f64> = (0..=k_n).map(|k| alpha_ratio.powi((k_n - k) as i32) * gap).collect();
    let mut edges: Vec<f64> = gaps.iter().map(|g| 1.0 - g).collect();
    edges[k_n] = t_n;
    // absorb rounding when the grid is anchored at zero
    if edges[0] < 0.0 && edges[0] > -1e-12 {
        edges[0] = 0.0;
    }
    if edges[0] < 0.0 {
        return Err(Error::InvalidPartition(format!(
            "first edge t_0 = {} is negative; ratio {alpha_ratio} too large for {k_n} blocks",
            edges[0]
        )));
    }
    let rate = (d as f64 - 2.0) / (2.0 * beta + d as f64);
    let nf = n as f64;
    let capacity = edges[..k_n]
        .iter()
        .map(|&t| {
            let gap = 1.0 - t;
            let width = (consts.width / gap * nf.powf(rate)).ceil();
            let width = if width.is_finite() { width as usize } else { usize::MAX };
            BlockCapacity {
                depth: (consts.depth.round() as usize).max(1),
                width: width.clamp(4, consts.max_width.max(4)),
                weight_bound: nf.powf(consts.weight_exponent),
                value_bound: consts.value * gap.powf(-0.5),
                osl_bound: consts.osl * gap.powf(-1.0 + beta.min(1.0) / 2.0),
            }
        })
        .collect();
    Ok(TimeGrid { alpha_ratio, k_n, t_n, edges, gaps, capacity })
}

impl TimeGrid {
    /// Grid with ⌈ln n⌉ blocks, the minimax stopping time and t_0 = 0.
    pub fn for_budget(n: usize, beta: f64, d: usize, consts: &CapacityConstants) -> Result<Self> {
        let k_n = default_block_count(n);
        let t_n = stopping_time(n, beta, d);
        build_time_grid(anchored_ratio(k_n, t_n), k_n, t_n, n, beta, d, consts)
    }

    /// Σ_k (t_{k+1} − t_k)/(1 − t_k)
    pub fn partition_sum(&self) -> f64 {
        self.gaps.windows(2).map(|g| (g[0] - g[1]) / g[0]).sum()
    }

    pub fn block(&self, k: usize) -> (f64, f64) {
        (self.edges[k], self.edges[k + 1])
    }

    /// Block holding `t`; times past T_n map to the last block.
    pub fn block_of(&self, t: f64) -> usize {
        match self.edges[1..].iter().position(|&e| t < e) {
            Some(k) => k,
            None => self.k_n - 1,
        }
    }

    /// Uniform refinement of every block.
    pub fn sampler_grid(&self, steps_per_block: usize) -> Vec<f64> {
        let s = steps_per_block.max(1);
        let mut times = Vec::with_capacity(self.k_n * s + 1);
        for w in self.edges.windows(2) {
            let h = (w[1] - w[0]) / s as f64;
            for j in 0..s {
                times.push(w[0] + j as f64 * h);
            }
        }
        times.push(self.t_n);
        times
    }
}

/// Drop times below `floor` and start the grid exactly at it.
pub fn floor_start(times: &[f64], floor: f64) -> Vec<f64> {
    if times.first().is_none_or(|&t| t >= floor) {
        return times.to_vec();
    }
    let mut out = vec![floor];
    out.extend(times.iter().copied().filter(|&t| t > floor));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn all() -> Vec<GaussianSchedule> {
        vec![
            GaussianSchedule::vanilla_fm(),
            GaussianSchedule::rescaled_diffusion(),
            GaussianSchedule::ou_sgm(1.0, 1.0, 6.0),
            GaussianSchedule::ou_sgm(5.0, 0.5, 1.0),
            GaussianSchedule::vanilla_fm().with_diffusion(Diffusion::Constant(0.7)),
            GaussianSchedule::rescaled_diffusion().with_diffusion(Diffusion::Zero),
        ]
    }

    #[test]
    fn vanilla_values() {
        let s = GaussianSchedule::vanilla_fm();
        let c = s.eval(0.0).unwrap();
        assert_eq!((c.eta, c.sigma, c.alpha), (-1.0, 1.0, 0.0));
        let c = s.eval(0.5).unwrap();
        assert_eq!((c.eta, c.sigma), (-2.0, 0.5));
        assert!(s.eval(1.0).is_err());
    }

    #[test]
    fn rescaled_values() {
        let s = GaussianSchedule::rescaled_diffusion();
        let c = s.eval(0.5).unwrap();
        assert!((c.sigma - 0.75f64.sqrt()).abs() < 1e-15);
        assert!((c.eta + 10.0 / 3.0).abs() < 1e-14);
        assert!(matches!(s.eval(0.0), Err(Error::TimeOutOfDomain { .. })));
        assert!(s.path(0.0).is_ok());
    }

    #[test]
    fn endpoints() {
        for s in all() {
            let p = s.path(0.0).unwrap();
            let q = s.path(1.0 - 1e-12).unwrap();
            assert!(p.alpha < 1e-2 && (q.alpha - 1.0).abs() < 1e-9 && q.sigma < 1e-5);
        }
        let v = GaussianSchedule::vanilla_fm().path(0.0).unwrap();
        assert_eq!((v.sigma, v.alpha), (1.0, 0.0));
    }

    #[test]
    fn ou_forward_noise_rate_is_constant() {
        // σ_fwd² = Tσ² for every t: the reparametrized OU drift.
        let s = GaussianSchedule::ou_sgm(2.0, 0.8, 1.5);
        for t in [0.1, 0.4, 0.9] {
            let c = s.eval(t).unwrap();
            assert!((c.sigma_fwd_sq() - 1.5 * 0.64).abs() < 1e-12);
            assert!((c.b * c.b - 1.5 * 0.64).abs() < 1e-12);
        }
    }

    #[test]
    fn geometric_identity_examples() {
        let c = CapacityConstants::default();
        let g = build_time_grid(2.0, 10, 1.0 - 2f64.powi(-12), 100, 1.0, 1, &c).unwrap();
        assert!((g.partition_sum() - 5.0).abs() < 1e-13);
        let g = build_time_grid(3.0, 1, 0.9, 100, 1.0, 1, &c).unwrap();
        assert_eq!(g.edges.len(), 2);
        assert!((1.0 - g.edges[0] - 3.0 * 0.1).abs() < 1e-15);
        assert!(build_time_grid(2.0, 10, 0.5, 100, 1.0, 1, &c).is_err());
        assert!(build_time_grid(1.0, 3, 0.5, 100, 1.0, 1, &c).is_err());
    }

    #[test]
    fn stopping_rule_and_budget_grid() {
        assert_eq!(stopping_time(4096, 1.0, 1), 1.0 - 4096f64.powf(-4.0 / 3.0));
        assert_eq!(default_block_count(4096), 9);
        let g = TimeGrid::for_budget(4096, 1.0, 1, &CapacityConstants::default()).unwrap();
        assert!(g.edges[0].abs() < 1e-12);
        assert_eq!(*g.edges.last().unwrap(), g.t_n);
        assert!(g.capacity.iter().all(|c| c.width >= 4 && c.width <= 64));
        assert!(g.capacity.windows(2).all(|w| w[0].value_bound <= w[1].value_bound));
    }

    #[test]
    fn sampler_grid_refines_blocks() {
        let g = build_time_grid(2.0, 4, 0.95, 100, 1.0, 1, &CapacityConstants::default()).unwrap();
        assert_eq!(g.sampler_grid(1), g.edges);
        let times = g.sampler_grid(7);
        assert_eq!(times.len(), 4 * 7 + 1);
        assert_eq!(*times.last().unwrap(), 0.95);
        assert!(times.windows(2).all(|w| w[1] > w[0]));
        for k in 0..4 {
            let h: Vec<f64> = times[k * 7..=(k + 1) * 7].windows(2).map(|w| w[1] - w[0]).collect();
            assert!(h.iter().all(|x| (x - h[0]).abs() < 1e-14));
        }
        let f = floor_start(&times, 0.3);
        assert_eq!(f[0], 0.3);
        assert!(f[1] > 0.3 && *f.last().unwrap() == 0.95);
        assert_eq!(floor_start(&times, 1e-3), times);
    }

    #[test]
    fn block_lookup() {
        let g = build_time_grid(2.0, 3, 0.875, 100, 1.0, 1, &CapacityConstants::default()).unwrap();
        assert_eq!(g.edges, vec![0.0, 0.5, 0.75, 0.875]);
        assert_eq!(g.block_of(0.0), 0);
        assert_eq!(g.block_of(0.5), 1);
        assert_eq!(g.block_of(0.8), 2);
        assert_eq!(g.block_of(0.9), 2);
    }

    #[test]
    fn mixture_schedule() {
        let m = MixtureSchedule::Linear;
        assert_eq!(m.intensity(0.5).unwrap(), 2.0);
        assert!(m.intensity(1.0).is_err());
        let p = MixtureSchedule::Power { exponent: 2.0 };
        assert_eq!(p.kappa(0.5), 0.25);
        assert_eq!(p.kappa_dot(0.5), 1.0);
    }

    proptest! {
        #[test]
        fn eta_identity(t in 0.001f64..0.999, which in 0usize..6) {
            let s = all()[which];
            let c = s.eval(t).unwrap();
            let generic = c.sigma_dot / c.sigma - c.b * c.b / (c.sigma * c.sigma);
            prop_assert!((c.eta - generic).abs() <= 1e-10 * generic.abs().max(1.0));
        }

        #[test]
        fn sigma_dot_matches_finite_difference(t in 0.01f64..0.98, which in 0usize..6) {
            let s = all()[which];
            let h = 1e-5;
            let c = s.path(t).unwrap();
            let fd = (s.path(t + h).unwrap().sigma - s.path(t - h).unwrap().sigma) / (2.0 * h);
            prop_assert!((c.sigma_dot - fd).abs() <= 1e-6 * c.sigma_dot.abs().max(1.0));
            let fa = (s.path(t + h).unwrap().alpha - s.path(t - h).unwrap().alpha) / (2.0 * h);
            prop_assert!((c.alpha_dot - fa).abs() <= 1e-6 * c.alpha_dot.abs().max(1.0));
        }

        #[test]
        fn eta_nonpositive_for_benchmarks(t in 0.0005f64..0.9995) {
            prop_assert!(GaussianSchedule::vanilla_fm().eval(t).unwrap().eta <= 0.0);
            prop_assert!(GaussianSchedule::rescaled_diffusion().eval(t).unwrap().eta <= 0.0);
        }

        #[test]
        fn partition_identity(alpha in 1.05f64..4.0, k in 1usize..20, gap_exp in 1.0f64..12.0) {
            let t_n = 1.0 - 10f64.powf(-gap_exp);
            let c = CapacityConstants::default();
            if let Ok(g) = build_time_grid(alpha, k, t_n, 1000, 1.0, 1, &c) {
                prop_assert!((g.partition_sum() - k as f64 * (1.0 - 1.0 / alpha)).abs() <= 1e-12);
                prop_assert!(g.edges.windows(2).all(|w| w[1] > w[0]));
            }
        }
    }
}
