//! Generator algebra: flow, diffusion, jump and rate-matrix parts, their
//! action on smooth test functions, conditional-to-marginal reduction,
//! superposition, the weak forward-equation residual, a 1D backward solver
//! and a pathwise coupling check.
//!
//! Rate matrices use the column convention: `q(y, x)` is the rate of moving
//! from state x to state y, so every column sums to zero. Finite states are
//! embedded on the real line as the points 0, 1, …, s−1.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::oracles::MarginalContext;
use crate::points::{dist_sq, dot, norm_sq, Points};
use crate::rng;
use crate::schedules::{GaussianSchedule, MixtureSchedule};
use crate::special::{adaptive_simpson, integrate_gl256, normal_cdf};
use crate::targets::{FiniteTarget, GaussianMixture};

pub type VectorField = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
pub type TimeFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type Intensity = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
pub type JumpKernel = Arc<dyn Fn(f64, &[f64]) -> Result<JumpLaw> + Send + Sync>;
pub type RateFn = Arc<dyn Fn(f64) -> RateMatrix + Send + Sync>;

// ---------------------------------------------------------------------------
// test functions

/// Smooth scalar function with analytic gradient and Laplacian.
pub trait TestFunction: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], out: &mut [f64]);
    fn laplacian(&self, x: &[f64]) -> f64;
    /// E[f(Y)] for Y from an isotropic Gaussian mixture, when closed-form.
    fn gaussian_mean(&self, _law: &GaussianMixture) -> Option<f64> {
        None
    }
    /// E[f(Y)] for Y uniform on the box [lo, hi], when closed-form.
    fn uniform_mean(&self, _lo: &[f64], _hi: &[f64]) -> Option<f64> {
        None
    }
    fn label(&self) -> String {
        "f".into()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BankFunction {
    /// x ↦ x_i
    Coordinate(usize),
    /// x ↦ x_i x_j
    Product(usize, usize),
    /// x ↦ exp(−‖x − c‖²/(2w²))
    Bump { center: Vec<f64>, width: f64 },
    /// x ↦ cos⟨ω, x⟩
    Cosine { omega: Vec<f64> },
}

impl TestFunction for BankFunction {
    fn value(&self, x: &[f64]) -> f64 {
        match self {
            Self::Coordinate(i) => x[*i],
            Self::Product(i, j) => x[*i] * x[*j],
            Self::Bump { center, width } => (-dist_sq(x, center) / (2.0 * width * width)).exp(),
            Self::Cosine { omega } => dot(omega, x).cos(),
        }
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        match self {
            Self::Coordinate(i) => out[*i] = 1.0,
            Self::Product(i, j) => {
                out[*i] += x[*j];
                out[*j] += x[*i];
            }
            Self::Bump { center, width } => {
                let g = self.value(x);
                for k in 0..x.len() {
                    out[k] = -(x[k] - center[k]) / (width * width) * g;
                }
            }
            Self::Cosine { omega } => {
                let s = dot(omega, x).sin();
                for k in 0..x.len() {
                    out[k] = -s * omega[k];
                }
            }
        }
    }

    fn laplacian(&self, x: &[f64]) -> f64 {
        match self {
            Self::Coordinate(_) => 0.0,
            Self::Product(i, j) => {
                if i == j {
                    2.0
                } else {
                    0.0
                }
            }
            Self::Bump { center, width } => {
                let w2 = width * width;
                self.value(x) * (dist_sq(x, center) / (w2 * w2) - x.len() as f64 / w2)
            }
            Self::Cosine { omega } => -norm_sq(omega) * dot(omega, x).cos(),
        }
    }

    fn gaussian_mean(&self, law: &GaussianMixture) -> Option<f64> {
        let mut total = 0.0;
        for ((w, mu), v) in law.weights().iter().zip(law.means()).zip(law.variances()) {
            let e = match self {
                Self::Coordinate(i) => mu[*i],
                Self::Product(i, j) => mu[*i] * mu[*j] + if i == j { *v } else { 0.0 },
                Self::Bump { center, width } => {
                    let s = width * width + v;
                    mu.iter()
                        .zip(center)
                        .map(|(m, c)| width / s.sqrt() * (-(m - c) * (m - c) / (2.0 * s)).exp())
                        .product()
                }
                Self::Cosine { omega } => dot(omega, mu).cos() * (-0.5 * v * norm_sq(omega)).exp(),
            };
            total += w * e;
        }
        Some(total)
    }

    fn uniform_mean(&self, lo: &[f64], hi: &[f64]) -> Option<f64> {
        let mid = |k: usize| 0.5 * (lo[k] + hi[k]);
        Some(match self {
            Self::Coordinate(i) => mid(*i),
            Self::Product(i, j) if i != j => mid(*i) * mid(*j),
            Self::Product(i, _) => {
                let (a, b) = (lo[*i], hi[*i]);
                (b * b * b - a * a * a) / (3.0 * (b - a))
            }
            Self::Bump { center, width } => (0..lo.len())
                .map(|k| {
                    let (a, b) = (lo[k], hi[k]);
                    width * (2.0 * PI).sqrt() * (normal_cdf((b - center[k]) / width) - normal_cdf((a - center[k]) / width))
                        / (b - a)
                })
                .product(),
            Self::Cosine { omega } => {
                // Re Π_k (e^{iω_k b} − e^{iω_k a}) / (iω_k (b − a))
                let (mut re, mut im) = (1.0, 0.0);
                for k in 0..lo.len() {
                    let (a, b, w) = (lo[k], hi[k], omega[k]);
                    let (fr, fi) = if w == 0.0 {
                        (1.0, 0.0)
                    } else {
                        let len = w * (b - a);
                        ((w * b).sin() - (w * a).sin(), (w * a).cos() - (w * b).cos()).into_scaled(1.0 / len)
                    };
                    let nr = re * fr - im * fi;
                    im = re * fi + im * fr;
                    re = nr;
                }
                re
            }
        })
    }

    fn label(&self) -> String {
        match self {
            Self::Coordinate(i) => format!("x{i}"),
            Self::Product(i, j) => format!("x{i}*x{j}"),
            Self::Bump { width, .. } => format!("bump(w={width})"),
            Self::Cosine { omega } => format!("cos({omega:?})"),
        }
    }
}

trait Scaled {
    fn into_scaled(self, c: f64) -> (f64, f64);
}

impl Scaled for (f64, f64) {
    fn into_scaled(self, c: f64) -> (f64, f64) {
        (self.0 * c, self.1 * c)
    }
}

/// Fixed finite family of test functions.
#[derive(Clone, Debug, PartialEq)]
pub struct TestFunctionBank {
    pub functions: Vec<BankFunction>,
}

impl TestFunctionBank {
    /// Coordinates, pairwise products, a unit bump at 0 and two cosines.
    pub fn standard(d: usize) -> Self {
        let mut functions: Vec<BankFunction> = (0..d).map(BankFunction::Coordinate).collect();
        for i in 0..d {
            for j in i..d {
                functions.push(BankFunction::Product(i, j));
            }
        }
        functions.push(BankFunction::Bump { center: vec![0.0; d], width: 1.0 });
        functions.push(BankFunction::Cosine { omega: vec![1.0; d] });
        functions.push(BankFunction::Cosine { omega: (0..d).map(|k| if k % 2 == 0 { 2.5 } else { -1.5 }).collect() });
        Self { functions }
    }
}

// ---------------------------------------------------------------------------
// jump laws and rate matrices

#[derive(Clone)]
pub enum JumpLaw {
    Atoms { points: Points, weights: Vec<f64> },
    Uniform { lo: Vec<f64>, hi: Vec<f64> },
    Gaussian(GaussianMixture),
    /// Normalized density on [lo, hi] in one dimension.
    Density1d { density: Arc<dyn Fn(f64) -> f64 + Send + Sync>, lo: f64, hi: f64 },
    Mixture(Vec<(f64, JumpLaw)>),
}

impl std::fmt::Debug for JumpLaw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Atoms { points, weights } => f.debug_struct("Atoms").field("points", points).field("weights", weights).finish(),
            Self::Uniform { lo, hi } => f.debug_struct("Uniform").field("lo", lo).field("hi", hi).finish(),
            Self::Gaussian(g) => f.debug_tuple("Gaussian").field(g).finish(),
            Self::Density1d { lo, hi, .. } => f.debug_struct("Density1d").field("lo", lo).field("hi", hi).finish(),
            Self::Mixture(parts) => f.debug_tuple("Mixture").field(parts).finish(),
        }
    }
}

impl JumpLaw {
    pub fn point(x: &[f64]) -> Self {
        Self::Atoms { points: Points::from_rows(x.len(), &[x]), weights: vec![1.0] }
    }

    /// Law over the embedded finite states {0, …, s−1}.
    pub fn finite(pmf: &[f64]) -> Self {
        let points = Points::from_flat(1, (0..pmf.len()).map(|i| i as f64).collect());
        Self::Atoms { points, weights: pmf.to_vec() }
    }

    pub fn expectation(&self, f: &dyn TestFunction) -> Result<f64> {
        match self {
            Self::Atoms { points, weights } => Ok(points.rows().zip(weights).map(|(p, w)| w * f.value(p)).sum()),
            Self::Uniform { lo, hi } => match f.uniform_mean(lo, hi) {
                Some(v) => Ok(v),
                None if lo.len() == 1 => Ok(integrate_gl256(lo[0], hi[0], |y| f.value(&[y])) / (hi[0] - lo[0])),
                None => Err(Error::UnsupportedJumpLaw("uniform law without closed form in d > 1".into())),
            },
            Self::Gaussian(g) => match f.gaussian_mean(g) {
                Some(v) => Ok(v),
                None if g.dim() == 1 => {
                    let (lo, hi) = g.bracket_1d(12.0);
                    Ok(integrate_gl256(lo, hi, |y| g.density(&[y]) * f.value(&[y])))
                }
                None => Err(Error::UnsupportedJumpLaw("Gaussian law without closed form in d > 1".into())),
            },
            Self::Density1d { density, lo, hi } => {
                let mass = integrate_gl256(*lo, *hi, |y| density(y));
                Ok(integrate_gl256(*lo, *hi, |y| density(y) * f.value(&[y])) / mass)
            }
            Self::Mixture(parts) => {
                let mut total = 0.0;
                for (w, law) in parts {
                    if *w > 0.0 {
                        total += w * law.expectation(f)?;
                    }
                }
                Ok(total)
            }
        }
    }

    pub fn sample(&self, rng: &mut rng::Rng, out: &mut [f64]) -> Result<()> {
        match self {
            Self::Atoms { points, weights } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = points.len() - 1;
                for (k, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        pick = k;
                        break;
                    }
                }
                out.copy_from_slice(points.row(pick));
            }
            Self::Uniform { lo, hi } => {
                for k in 0..out.len() {
                    out[k] = lo[k] + (hi[k] - lo[k]) * rng.random::<f64>();
                }
            }
            Self::Gaussian(g) => g.sample_one(rng, out),
            Self::Density1d { .. } => {
                return Err(Error::UnsupportedJumpLaw("sampling from a tabulated density is not implemented".into()))
            }
            Self::Mixture(parts) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (w, law) in parts {
                    acc += w;
                    if u < acc {
                        return law.sample(rng, out);
                    }
                }
                if let Some((_, law)) = parts.iter().rev().find(|(w, _)| *w > 0.0) {
                    return law.sample(rng, out);
                }
            }
        }
        Ok(())
    }
}

/// Rate matrix in the column convention, `q[y·s + x]` = rate x → y.
#[derive(Clone, Debug, PartialEq)]
pub struct RateMatrix {
    s: usize,
    q: Vec<f64>,
}

impl RateMatrix {
    pub fn new(s: usize, q: Vec<f64>) -> Result<Self> {
        if q.len() != s * s {
            return Err(Error::InvalidArgument("rate matrix must be s × s".into()));
        }
        let m = Self { s, q };
        for x in 0..s {
            let mut col = 0.0;
            let mut scale: f64 = 0.0;
            for y in 0..s {
                let r = m.rate(y, x);
                if y != x && r < 0.0 {
                    return Err(Error::InvalidArgument(format!("negative rate {r} from {x} to {y}")));
                }
                col += r;
                scale = scale.max(r.abs());
            }
            if col.abs() > 1e-12 * scale.max(1.0) {
                return Err(Error::InvalidArgument(format!("column {x} sums to {col}")));
            }
        }
        Ok(m)
    }

    /// Off-diagonal rates from `rate(y, x)`; the diagonal closes each column.
    pub fn from_off_diagonal(s: usize, rate: impl Fn(usize, usize) -> f64) -> Self {
        let mut q = vec![0.0; s * s];
        for x in 0..s {
            let mut out = 0.0;
            for y in 0..s {
                if y != x {
                    let r = rate(y, x).max(0.0);
                    q[y * s + x] = r;
                    out += r;
                }
            }
            q[x * s + x] = -out;
        }
        Self { s, q }
    }

    pub fn zero(s: usize) -> Self {
        Self { s, q: vec![0.0; s * s] }
    }

    pub fn n_states(&self) -> usize {
        self.s
    }

    pub fn rate(&self, y: usize, x: usize) -> f64 {
        self.q[y * self.s + x]
    }

    pub fn exit_rate(&self, x: usize) -> f64 {
        -self.rate(x, x)
    }

    /// (Q p)_y = Σ_x q(y, x) p_x
    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        (0..self.s).map(|y| (0..self.s).map(|x| self.rate(y, x) * p[x]).sum()).collect()
    }
}

// ---------------------------------------------------------------------------
// generator specs

#[derive(Clone)]
pub enum Part {
    Flow(VectorField),
    /// Isotropic b_t; contributes b_t² Δf.
    Diffusion(TimeFn),
    Jump { intensity: Intensity, law: JumpKernel },
    Rates(RateFn),
}

impl Part {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Flow(_) => "flow",
            Self::Diffusion(_) => "diffusion",
            Self::Jump { .. } => "jump",
            Self::Rates(_) => "rates",
        }
    }
}

#[derive(Clone)]
pub struct WeightedPart {
    pub part: Part,
    pub weight: TimeFn,
}

#[derive(Clone)]
pub struct GeneratorSpec {
    pub dim: usize,
    pub parts: Vec<WeightedPart>,
}

fn unit() -> TimeFn {
    Arc::new(|_| 1.0)
}

impl GeneratorSpec {
    pub fn new(dim: usize) -> Self {
        Self { dim, parts: Vec::new() }
    }

    pub fn with_part(mut self, part: Part) -> Self {
        self.parts.push(WeightedPart { part, weight: unit() });
        self
    }

    pub fn with_flow(self, f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.with_part(Part::Flow(Arc::new(f)))
    }

    pub fn with_diffusion(self, b: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.with_part(Part::Diffusion(Arc::new(b)))
    }

    pub fn with_jump(
        self,
        intensity: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        law: impl Fn(f64, &[f64]) -> Result<JumpLaw> + Send + Sync + 'static,
    ) -> Self {
        self.with_part(Part::Jump { intensity: Arc::new(intensity), law: Arc::new(law) })
    }

    pub fn with_rates(self, q: impl Fn(f64) -> RateMatrix + Send + Sync + 'static) -> Self {
        self.with_part(Part::Rates(Arc::new(q)))
    }

    pub fn kinds(&self) -> Vec<&'static str> {
        self.parts.iter().map(|p| p.part.kind()).collect()
    }

    /// Weighted sum of flow parts at (t, x).
    pub fn total_drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut tmp = vec![0.0; x.len()];
        for wp in &self.parts {
            if let Part::Flow(a) = &wp.part {
                let w = (wp.weight)(t);
                if w != 0.0 {
                    a(t, x, &mut tmp);
                    for (o, v) in out.iter_mut().zip(&tmp) {
                        *o += w * v;
                    }
                }
            }
        }
    }

    /// Effective b_t with b² = Σ w·b_part².
    pub fn total_diffusion(&self, t: f64) -> f64 {
        self.parts
            .iter()
            .filter_map(|wp| match &wp.part {
                Part::Diffusion(b) => Some((wp.weight)(t) * b(t) * b(t)),
                _ => None,
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// L_t f(x).
pub fn apply_generator(gen: &GeneratorSpec, f: &dyn TestFunction, t: f64, x: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    let mut grad = vec![0.0; x.len()];
    let mut a = vec![0.0; x.len()];
    for wp in &gen.parts {
        let w = (wp.weight)(t);
        if w == 0.0 {
            continue;
        }
        let term = match &wp.part {
            Part::Flow(field) => {
                field(t, x, &mut a);
                f.gradient(x, &mut grad);
                dot(&a, &grad)
            }
            Part::Diffusion(b) => {
                let b = b(t);
                b * b * f.laplacian(x)
            }
            Part::Jump { intensity, law } => {
                let lam = intensity(t, x);
                if lam == 0.0 {
                    0.0
                } else {
                    lam * (law(t, x)?.expectation(f)? - f.value(x))
                }
            }
            Part::Rates(q) => {
                let q = q(t);
                let s = q.n_states();
                let xi = x[0].round();
                if !(0.0..s as f64).contains(&xi) {
                    return Err(Error::InvalidArgument(format!("state {} outside 0..{s}", x[0])));
                }
                let xi = xi as usize;
                (0..s).map(|y| q.rate(y, xi) * f.value(&[y as f64])).sum()
            }
        };
        total += w * term;
    }
    Ok(total)
}

/// α_t·g1 + (1 − α_t)·g2, part by part.
pub fn superpose(g1: &GeneratorSpec, g2: &GeneratorSpec, alpha: TimeFn) -> GeneratorSpec {
    let mut parts = Vec::with_capacity(g1.parts.len() + g2.parts.len());
    for wp in &g1.parts {
        let (w, a) = (wp.weight.clone(), alpha.clone());
        parts.push(WeightedPart { part: wp.part.clone(), weight: Arc::new(move |t| a(t) * w(t)) });
    }
    for wp in &g2.parts {
        let (w, a) = (wp.weight.clone(), alpha.clone());
        parts.push(WeightedPart { part: wp.part.clone(), weight: Arc::new(move |t| (1.0 - a(t)) * w(t)) });
    }
    GeneratorSpec { dim: g1.dim, parts }
}

// ---------------------------------------------------------------------------
// conditional generators and marginalization

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ConditionalGenerator {
    /// (z − x)/(1 − t)
    FlowCond,
    /// rate κ̇/(1 − κ), landing at z
    JumpCond { kappa: MixtureSchedule },
    /// ṁ(z) + η_t (x − m(z)) with diffusion b_t
    GaussCond { sched: GaussianSchedule },
}

impl ConditionalGenerator {
    /// Generator of the path conditioned on endpoint `z`.
    pub fn spec(&self, z: &[f64]) -> GeneratorSpec {
        let z = z.to_vec();
        let d = z.len();
        match *self {
            Self::FlowCond => GeneratorSpec::new(d).with_flow(move |t, x, out| {
                for k in 0..x.len() {
                    out[k] = (z[k] - x[k]) / (1.0 - t);
                }
            }),
            Self::JumpCond { kappa } => {
                let law = JumpLaw::point(&z);
                GeneratorSpec::new(d).with_jump(move |t, _| kappa.intensity(t).unwrap_or(f64::INFINITY), move |_, _| Ok(law.clone()))
            }
            Self::GaussCond { sched } => GeneratorSpec::new(d)
                .with_flow(move |t, x, out| {
                    let c = sched.eval(t).expect("conditional drift evaluated inside the schedule domain");
                    for k in 0..x.len() {
                        out[k] = c.alpha_dot * z[k] + c.eta * (x[k] - c.alpha * z[k]);
                    }
                })
                .with_diffusion(move |t| sched.diffusion_at(t).unwrap_or(f64::INFINITY)),
        }
    }
}

/// Where the posterior of Z given X_t = x comes from.
#[derive(Clone, Debug)]
pub enum Posterior {
    /// Gaussian path over a Gaussian-mixture target.
    Gaussian { target: GaussianMixture, sched: GaussianSchedule },
    /// Mixture path on finite states.
    FiniteMixture { base: FiniteTarget, target: FiniteTarget, kappa: MixtureSchedule },
    /// Mixture path with continuous base and target.
    ContinuousMixture { base: GaussianMixture, target: GaussianMixture, kappa: MixtureSchedule },
    /// Target concentrated on one point.
    PointMass(Vec<f64>),
}

/// A generator part frozen at one (t, x).
#[derive(Clone, Debug)]
pub enum LocalPart {
    Flow(Vec<f64>),
    FlowDiffusion { drift: Vec<f64>, b: f64 },
    Jump { intensity: f64, law: JumpLaw },
}

/// Posterior pmf of Z given X_t = x on the finite mixture path, by Bayes:
/// P(z | x) ∝ p*(z)[(1 − κ) p_0(x) + κ 1{x = z}].
pub fn finite_mixture_posterior(base: &FiniteTarget, target: &FiniteTarget, kappa: f64, x: usize) -> Result<Vec<f64>> {
    let w: Vec<f64> = target
        .pmf()
        .iter()
        .enumerate()
        .map(|(z, pz)| pz * ((1.0 - kappa) * base.pmf()[x] + if z == x { kappa } else { 0.0 }))
        .collect();
    let tot: f64 = w.iter().sum();
    if !(tot > 0.0) {
        return Err(Error::PosteriorUnavailable(format!("state {x} has zero probability on the path")));
    }
    Ok(w.iter().map(|v| v / tot).collect())
}

/// E[L^Z f(x) | X_t = x] expressed as a local part.
pub fn marginalize_conditional(cond: &ConditionalGenerator, posterior: &Posterior, t: f64, x: &[f64]) -> Result<LocalPart> {
    match (cond, posterior) {
        (ConditionalGenerator::FlowCond, Posterior::Gaussian { target, sched }) => {
            let ctx = MarginalContext::new(target, sched, t)?;
            let ez = ctx.posterior(x).mean_z;
            Ok(LocalPart::Flow(ez.iter().zip(x).map(|(z, xi)| (z - xi) / (1.0 - t)).collect()))
        }
        (ConditionalGenerator::FlowCond, Posterior::PointMass(z)) => {
            Ok(LocalPart::Flow(z.iter().zip(x).map(|(z, xi)| (z - xi) / (1.0 - t)).collect()))
        }
        (ConditionalGenerator::GaussCond { sched }, Posterior::Gaussian { target, .. }) => {
            let ctx = MarginalContext::new(target, sched, t)?;
            Ok(LocalPart::FlowDiffusion { drift: ctx.exact_drift(x)?, b: sched.diffusion_at(t)? })
        }
        (ConditionalGenerator::JumpCond { kappa }, Posterior::FiniteMixture { base, target, .. }) => {
            let xi = x[0].round();
            if !(0.0..base.n_states() as f64).contains(&xi) {
                return Err(Error::PosteriorUnavailable(format!("state {} outside the support", x[0])));
            }
            let post = finite_mixture_posterior(base, target, kappa.kappa(t), xi as usize)?;
            Ok(LocalPart::Jump { intensity: kappa.intensity(t)?, law: JumpLaw::finite(&post) })
        }
        (ConditionalGenerator::JumpCond { kappa }, Posterior::ContinuousMixture { base, target, .. }) => {
            let k = kappa.kappa(t);
            let p0 = (1.0 - k) * base.density(x);
            let p1 = k * target.density(x);
            let tot = p0 + p1;
            if !(tot > 0.0) {
                return Err(Error::PosteriorUnavailable("point outside both supports".into()));
            }
            let law = JumpLaw::Mixture(vec![(p1 / tot, JumpLaw::point(x)), (p0 / tot, JumpLaw::Gaussian(target.clone()))]);
            Ok(LocalPart::Jump { intensity: kappa.intensity(t)?, law })
        }
        (ConditionalGenerator::JumpCond { kappa }, Posterior::PointMass(z)) => {
            Ok(LocalPart::Jump { intensity: kappa.intensity(t)?, law: JumpLaw::point(z) })
        }
        _ => Err(Error::PosteriorUnavailable("no posterior formula for this conditional family and path".into())),
    }
}

/// Marginal generator assembled from `marginalize_conditional` pointwise.
pub fn marginal_generator(cond: ConditionalGenerator, posterior: Posterior, dim: usize) -> GeneratorSpec {
    let post = Arc::new(posterior);
    match cond {
        ConditionalGenerator::FlowCond => GeneratorSpec::new(dim).with_flow(move |t, x, out| {
            match marginalize_conditional(&cond, &post, t, x) {
                Ok(LocalPart::Flow(v)) => out.copy_from_slice(&v),
                _ => out.iter_mut().for_each(|o| *o = f64::NAN),
            }
        }),
        ConditionalGenerator::GaussCond { sched } => {
            let p = post.clone();
            GeneratorSpec::new(dim)
                .with_flow(move |t, x, out| match marginalize_conditional(&cond, &p, t, x) {
                    Ok(LocalPart::FlowDiffusion { drift, .. }) => out.copy_from_slice(&drift),
                    _ => out.iter_mut().for_each(|o| *o = f64::NAN),
                })
                .with_diffusion(move |t| sched.diffusion_at(t).unwrap_or(f64::NAN))
        }
        ConditionalGenerator::JumpCond { kappa } => GeneratorSpec::new(dim).with_jump(
            move |t, _| kappa.intensity(t).unwrap_or(f64::INFINITY),
            move |t, x| match marginalize_conditional(&cond, &post, t, x)? {
                LocalPart::Jump { law, .. } => Ok(law),
                _ => unreachable!("jump conditionals marginalize to jumps"),
            },
        ),
    }
}

/// Exact generator of a Gaussian path: drift a_t plus diffusion b_t.
pub fn gaussian_path_generator(target: &GaussianMixture, sched: &GaussianSchedule) -> GeneratorSpec {
    marginal_generator(
        ConditionalGenerator::GaussCond { sched: *sched },
        Posterior::Gaussian { target: target.clone(), sched: *sched },
        target.dim(),
    )
}

/// Velocity κ̇ (F_0 − F*)/p_t transporting the 1D mixture path.
pub fn mixture_path_flow_1d(base: &GaussianMixture, target: &GaussianMixture, kappa: MixtureSchedule) -> GeneratorSpec {
    let (b, z) = (base.clone(), target.clone());
    GeneratorSpec::new(1).with_flow(move |t, x, out| {
        let k = kappa.kappa(t);
        let p = (1.0 - k) * b.density(x) + k * z.density(x);
        out[0] = kappa.kappa_dot(t) * (b.cdf_1d(x[0]) - z.cdf_1d(x[0])) / p;
    })
}

/// Rate matrix q(y, x) = λ_t P(Z = y | x) of the finite mixture path.
pub fn finite_mixture_rates(base: &FiniteTarget, target: &FiniteTarget, kappa: MixtureSchedule) -> RateFn {
    let (b, z) = (base.clone(), target.clone());
    Arc::new(move |t| {
        let lam = kappa.intensity(t).unwrap_or(0.0);
        let k = kappa.kappa(t);
        let s = z.n_states();
        let post: Vec<Vec<f64>> = (0..s).map(|x| finite_mixture_posterior(&b, &z, k, x).unwrap_or_else(|_| vec![0.0; s])).collect();
        RateMatrix::from_off_diagonal(s, |y, x| lam * post[x][y])
    })
}

// ---------------------------------------------------------------------------
// static paths and the forward-equation residual

/// Law known by a sampler: a Gaussian mixture, or finite states as points.
#[derive(Clone, Debug, PartialEq)]
pub enum Law {
    Mixture(GaussianMixture),
    Finite(FiniteTarget),
}

impl Law {
    pub fn dim(&self) -> usize {
        match self {
            Self::Mixture(g) => g.dim(),
            Self::Finite(_) => 1,
        }
    }

    pub fn sample_one(&self, rng: &mut rng::Rng, out: &mut [f64]) {
        match self {
            Self::Mixture(g) => g.sample_one(rng, out),
            Self::Finite(f) => out[0] = f.draw(rng.random::<f64>()) as f64,
        }
    }
}

/// X°_t with common random numbers across t: sample i always uses stream i.
pub trait StaticPath: Send + Sync {
    fn dim(&self) -> usize;
    fn sample_at(&self, t: f64, n: usize, seed: u64) -> Result<Points>;
}

#[derive(Clone, Debug)]
pub struct GaussianPath {
    pub target: GaussianMixture,
    pub sched: GaussianSchedule,
}

impl StaticPath for GaussianPath {
    fn dim(&self) -> usize {
        self.target.dim()
    }

    fn sample_at(&self, t: f64, n: usize, seed: u64) -> Result<Points> {
        let c = self.sched.path(t)?;
        let d = self.target.dim();
        let mut out = Points::zeros(n, d);
        let mut z = vec![0.0; d];
        for i in 0..n {
            let mut r = rng::stream(seed, i as u64);
            self.target.sample_one(&mut r, &mut z);
            let row = out.row_mut(i);
            for k in 0..d {
                let xi: f64 = r.sample(StandardNormal);
                row[k] = c.alpha * z[k] + c.sigma * xi;
            }
        }
        Ok(out)
    }
}

/// (1 − κ_t) p_0 + κ_t p*: sample z, a base draw and a uniform; show z once u < κ_t.
#[derive(Clone, Debug)]
pub struct MixturePath {
    pub base: Law,
    pub target: Law,
    pub kappa: MixtureSchedule,
}

impl StaticPath for MixturePath {
    fn dim(&self) -> usize {
        self.target.dim()
    }

    fn sample_at(&self, t: f64, n: usize, seed: u64) -> Result<Points> {
        let k = self.kappa.kappa(t);
        let d = self.dim();
        let mut out = Points::zeros(n, d);
        let mut z = vec![0.0; d];
        let mut x0 = vec![0.0; d];
        for i in 0..n {
            let mut r = rng::stream(seed, i as u64);
            self.base.sample_one(&mut r, &mut x0);
            self.target.sample_one(&mut r, &mut z);
            let u: f64 = r.random();
            out.row_mut(i).copy_from_slice(if u < k { &z } else { &x0 });
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KfeReport {
    pub t: f64,
    /// (⟨p_{t+h}, f⟩ − ⟨p_{t−h}, f⟩)/2h
    pub lhs: f64,
    /// ⟨p_t, L_t f⟩
    pub rhs: f64,
    pub residual: f64,
    pub se: f64,
}

/// Monte-Carlo check of d/dt⟨p_t, f⟩ = ⟨p_t, L_t f⟩ with paired samples.
pub fn kfe_residual(
    gen: &GeneratorSpec,
    path: &dyn StaticPath,
    f: &dyn TestFunction,
    t: f64,
    h: f64,
    n_mc: usize,
    seed: u64,
) -> Result<KfeReport> {
    let xp = path.sample_at(t + h, n_mc, seed)?;
    let xm = path.sample_at(t - h, n_mc, seed)?;
    let x0 = path.sample_at(t, n_mc, seed)?;
    let (mut sd, mut sr, mut s_diff, mut s_diff2) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n_mc {
        let d = (f.value(xp.row(i)) - f.value(xm.row(i))) / (2.0 * h);
        let r = apply_generator(gen, f, t, x0.row(i))?;
        sd += d;
        sr += r;
        s_diff += d - r;
        s_diff2 += (d - r) * (d - r);
    }
    let n = n_mc as f64;
    let mean = s_diff / n;
    let var = (s_diff2 / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    Ok(KfeReport { t, lhs: sd / n, rhs: sr / n, residual: mean.abs(), se: (var / n).sqrt() })
}

// ---------------------------------------------------------------------------
// 1D backward equation

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpatialGrid {
    pub lo: f64,
    pub dx: f64,
    pub n: usize,
}

impl SpatialGrid {
    /// Uniform grid covering [lo, hi] with spacing close to `dx`.
    pub fn covering(lo: f64, hi: f64, dx: f64) -> Self {
        let n = ((hi - lo) / dx).round() as usize + 1;
        Self { lo, dx: (hi - lo) / (n - 1) as f64, n }
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.lo + i as f64 * self.dx).collect()
    }
}

/// Solve ∂_t f̂ + L̂_t f̂ = 0 backward from f̂_{t1} = f to t0 for a
/// flow-plus-diffusion generator. Second-order upwind differences for the
/// drift, centered differences for the diffusion, SSP-RK3 in time; ghost
/// values are linearly extrapolated. `observe` sees every time level, from
/// t1 down to t0. Returns f̂_{t0}.
pub fn backward_solve_1d(
    gen: &GeneratorSpec,
    terminal: &dyn Fn(f64) -> f64,
    grid: &SpatialGrid,
    t0: f64,
    t1: f64,
    dt: f64,
    observe: &mut dyn FnMut(f64, &[f64]),
) -> Result<Vec<f64>> {
    if gen.dim != 1 || gen.parts.iter().any(|p| matches!(p.part, Part::Jump { .. } | Part::Rates(_))) {
        return Err(Error::InvalidArgument("backward_solve_1d needs a 1D flow/diffusion generator".into()));
    }
    let xs = grid.xs();
    let steps = ((t1 - t0) / dt).ceil().max(1.0) as usize;
    let h = (t1 - t0) / steps as f64;
    let mut f: Vec<f64> = xs.iter().map(|&x| terminal(x)).collect();
    observe(t1, &f);
    let mut drift = vec![0.0; xs.len()];
    let rhs = |t: f64, f: &[f64], drift: &mut [f64], out: &mut [f64]| -> Result<()> {
        let mut a = [0.0];
        let mut amax: f64 = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            gen.total_drift(t, &[x], &mut a);
            drift[i] = a[0];
            amax = amax.max(a[0].abs());
        }
        let b = gen.total_diffusion(t);
        let limit = 1.0 / (amax / (0.8 * grid.dx) + 2.0 * b * b / (grid.dx * grid.dx) + 1e-300);
        if h > limit {
            return Err(Error::CflViolation { dt: h, limit });
        }
        let n = f.len();
        let at = |i: isize| -> f64 {
            if i < 0 {
                f[0] + (f[0] - f[1]) * (-i) as f64
            } else if i as usize >= n {
                f[n - 1] + (f[n - 1] - f[n - 2]) * (i as usize - n + 1) as f64
            } else {
                f[i as usize]
            }
        };
        let dx = grid.dx;
        for i in 0..n {
            let ii = i as isize;
            let grad = if drift[i] > 0.0 {
                (-3.0 * at(ii) + 4.0 * at(ii + 1) - at(ii + 2)) / (2.0 * dx)
            } else {
                (3.0 * at(ii) - 4.0 * at(ii - 1) + at(ii - 2)) / (2.0 * dx)
            };
            let lap = (at(ii + 1) - 2.0 * at(ii) + at(ii - 1)) / (dx * dx);
            out[i] = drift[i] * grad + b * b * lap;
        }
        Ok(())
    };
    let n = xs.len();
    let (mut k, mut u1, mut u2) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for step in 0..steps {
        let t = t1 - step as f64 * h;
        // reversed time s = t1 − t, dF/ds = L̂_{t1−s} F
        rhs(t, &f, &mut drift, &mut k)?;
        for i in 0..n {
            u1[i] = f[i] + h * k[i];
        }
        rhs(t - h, &u1, &mut drift, &mut k)?;
        for i in 0..n {
            u2[i] = 0.75 * f[i] + 0.25 * (u1[i] + h * k[i]);
        }
        rhs(t - 0.5 * h, &u2, &mut drift, &mut k)?;
        for i in 0..n {
            f[i] = f[i] / 3.0 + 2.0 / 3.0 * (u2[i] + h * k[i]);
        }
        let tn = if step + 1 == steps { t0 } else { t1 - (step + 1) as f64 * h };
        observe(tn, &f);
    }
    Ok(f)
}

/// Largest stable step of `backward_solve_1d` over `samples` times in [t0, t1].
pub fn cfl_limit(gen: &GeneratorSpec, grid: &SpatialGrid, t0: f64, t1: f64, samples: usize) -> f64 {
    let xs = grid.xs();
    let mut a = [0.0];
    let mut worst = f64::INFINITY;
    for k in 0..=samples {
        let t = t0 + (t1 - t0) * k as f64 / samples as f64;
        let amax = xs.iter().fold(0.0f64, |m, &x| {
            gen.total_drift(t, &[x], &mut a);
            m.max(a[0].abs())
        });
        let b = gen.total_diffusion(t);
        worst = worst.min(1.0 / (amax / (0.8 * grid.dx) + 2.0 * b * b / (grid.dx * grid.dx) + 1e-300));
    }
    worst
}

/// 1D Gaussian flow with affine velocity A(t) x + B(t) started from N(m0, v0).
#[derive(Clone)]
pub struct AffineFlow1d {
    pub slope: TimeFn,
    pub offset: TimeFn,
    pub m0: f64,
    pub v0: f64,
}

impl AffineFlow1d {
    pub fn generator(&self) -> GeneratorSpec {
        let (a, b) = (self.slope.clone(), self.offset.clone());
        GeneratorSpec::new(1).with_flow(move |t, x, out| out[0] = a(t) * x[0] + b(t))
    }

    /// (mean, variance) at t from ṁ = A m + B, v̇ = 2 A v by RK4.
    pub fn moments(&self, t0: f64, t: f64, steps: usize) -> (f64, f64) {
        let rhs = |s: f64, m: f64, v: f64| ((self.slope)(s) * m + (self.offset)(s), 2.0 * (self.slope)(s) * v);
        let (mut m, mut v) = (self.m0, self.v0);
        let h = (t - t0) / steps.max(1) as f64;
        for k in 0..steps.max(1) {
            let s = t0 + k as f64 * h;
            let (a1, b1) = rhs(s, m, v);
            let (a2, b2) = rhs(s + 0.5 * h, m + 0.5 * h * a1, v + 0.5 * h * b1);
            let (a3, b3) = rhs(s + 0.5 * h, m + 0.5 * h * a2, v + 0.5 * h * b2);
            let (a4, b4) = rhs(s + h, m + h * a3, v + h * b3);
            m += h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
            v += h / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4);
        }
        (m, v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualityReport {
    /// ⟨p_1 − p̂_1, f⟩ from closed forms
    pub lhs: f64,
    /// ∫⟨p_t, (L − L̂) f̂_t⟩ dt from the backward solve
    pub rhs: f64,
    pub rel_error: f64,
}

/// Both sides of the duality identity for two affine Gaussian flows sharing
/// their initial law, on [0, 1], with a bank test function. The time step is
/// half the sampled stability limit.
pub fn duality_check_1d(p: &AffineFlow1d, q: &AffineFlow1d, f: &BankFunction, grid: &SpatialGrid) -> Result<DualityReport> {
    let moments_steps = 4000;
    let (m1, v1) = p.moments(0.0, 1.0, moments_steps);
    let (n1, w1) = q.moments(0.0, 1.0, moments_steps);
    let law = |m: f64, v: f64| GaussianMixture::gaussian(vec![m], v).expect("positive variance");
    let lhs = f.gaussian_mean(&law(m1, v1)).expect("bank closed form") - f.gaussian_mean(&law(n1, w1)).expect("bank closed form");

    let xs = grid.xs();
    let gen_q = q.generator();
    let dt = 0.5 * cfl_limit(&gen_q, grid, 0.0, 1.0, 64);
    let mut times = Vec::new();
    let mut integrand = Vec::new();
    // p_t moments advanced alongside the backward sweep would run the wrong
    // way, so evaluate them per level from t = 0.
    let mut obs = |t: f64, fhat: &[f64]| {
        let (m, v) = p.moments(0.0, t, ((t * 400.0).ceil() as usize).max(1));
        let n = fhat.len();
        let mut acc = 0.0;
        for i in 0..n {
            let df = if i == 0 {
                (fhat[1] - fhat[0]) / grid.dx
            } else if i == n - 1 {
                (fhat[n - 1] - fhat[n - 2]) / grid.dx
            } else {
                (fhat[i + 1] - fhat[i - 1]) / (2.0 * grid.dx)
            };
            let x = xs[i];
            let diff = ((p.slope)(t) - (q.slope)(t)) * x + (p.offset)(t) - (q.offset)(t);
            let dens = (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt();
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            acc += w * dens * diff * df;
        }
        times.push(t);
        integrand.push(acc * grid.dx);
    };
    let terminal = |x: f64| f.value(&[x]);
    backward_solve_1d(&gen_q, &terminal, grid, 0.0, 1.0, dt, &mut obs)?;
    // times run from 1 down to 0
    let rhs = -crate::special::trapezoid(&times, &integrand);
    Ok(DualityReport { lhs, rhs, rel_error: (rhs - lhs).abs() / lhs.abs() })
}

// ---------------------------------------------------------------------------
// coupling

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CouplingReport {
    pub pairs: usize,
    pub violations: usize,
    /// max over pairs of |X_1 − Y_1| / (exp(∫ℓ)|x − y|)
    pub max_ratio: f64,
    pub tol: f64,
}

/// Simulate pairs from (x, y) at `grid[0]` to the final grid time with shared
/// Brownian increments and check |X − Y| ≤ exp(∫ℓ)|x − y|(1 + tol).
pub fn gronwall_coupling_check(
    drift: &dyn Fn(f64, &[f64], &mut [f64]),
    ell: &dyn Fn(f64) -> f64,
    b: &dyn Fn(f64) -> f64,
    lipschitz_sup: f64,
    starts: &[(Vec<f64>, Vec<f64>)],
    grid: &[f64],
    seed: u64,
) -> CouplingReport {
    let dt_max = grid.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    let tol = 10.0 * dt_max * lipschitz_sup;
    let int_ell: f64 = grid.windows(2).map(|w| adaptive_simpson(ell, w[0], w[1], 1e-12)).sum();
    let factor = int_ell.exp();
    let mut violations = 0;
    let mut max_ratio: f64 = 0.0;
    for (i, (x0, y0)) in starts.iter().enumerate() {
        let d = x0.len();
        let mut r = rng::stream(seed, i as u64);
        let (mut x, mut y) = (x0.clone(), y0.clone());
        let (mut ax, mut ay) = (vec![0.0; d], vec![0.0; d]);
        for w in grid.windows(2) {
            let h = w[1] - w[0];
            drift(w[0], &x, &mut ax);
            drift(w[0], &y, &mut ay);
            let noise = (2.0 * h).sqrt() * b(w[0]);
            for k in 0..d {
                let e: f64 = r.sample(StandardNormal);
                x[k] += h * ax[k] + noise * e;
                y[k] += h * ay[k] + noise * e;
            }
        }
        let ratio = dist_sq(&x, &y).sqrt() / (factor * dist_sq(x0, y0).sqrt());
        if ratio > 1.0 + tol {
            violations += 1;
        }
        max_ratio = max_ratio.max(ratio);
    }
    CouplingReport { pairs: starts.len(), violations, max_ratio, tol }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::integrate_gl256;
    use proptest::prelude::*;

    fn bimodal() -> GaussianMixture {
        GaussianMixture::new(vec![0.3, 0.7], vec![vec![-1.0], vec![1.5]], vec![0.2, 0.5]).unwrap()
    }

    fn bank_1d() -> TestFunctionBank {
        TestFunctionBank::standard(1)
    }

    #[test]
    fn bank_gaussian_means_match_quadrature() {
        let g = bimodal();
        for f in bank_1d().functions {
            let exact = f.gaussian_mean(&g).unwrap();
            let quad = integrate_gl256(-12.0, 12.0, |y| g.density(&[y]) * f.value(&[y]));
            assert!((exact - quad).abs() < 1e-10, "{}: {exact} vs {quad}", f.label());
        }
    }

    #[test]
    fn bank_uniform_means_match_quadrature() {
        let (lo, hi) = ([-0.5, 0.2], [1.5, 2.0]);
        for f in TestFunctionBank::standard(2).functions {
            let exact = f.uniform_mean(&lo, &hi).unwrap();
            let quad = integrate_gl256(lo[0], hi[0], |a| integrate_gl256(lo[1], hi[1], |b| f.value(&[a, b])))
                / ((hi[0] - lo[0]) * (hi[1] - lo[1]));
            assert!((exact - quad).abs() < 1e-10, "{}: {exact} vs {quad}", f.label());
        }
    }

    proptest! {
        #[test]
        fn bank_derivatives_match_finite_differences(x in prop::collection::vec(-2.0f64..2.0, 2)) {
            let h = 1e-4;
            for f in TestFunctionBank::standard(2).functions {
                let mut g = [0.0; 2];
                f.gradient(&x, &mut g);
                let mut lap = 0.0;
                for k in 0..2 {
                    let (mut xp, mut xm) = (x.clone(), x.clone());
                    xp[k] += h;
                    xm[k] -= h;
                    let fd = (f.value(&xp) - f.value(&xm)) / (2.0 * h);
                    prop_assert!((fd - g[k]).abs() < 1e-6);
                    lap += (f.value(&xp) - 2.0 * f.value(&x) + f.value(&xm)) / (h * h);
                }
                prop_assert!((lap - f.laplacian(&x)).abs() < 1e-4, "{}", f.label());
            }
        }
    }

    #[test]
    fn rate_matrix_columns_sum_to_zero() {
        let q = RateMatrix::from_off_diagonal(3, |y, x| (y + 2 * x) as f64);
        let q = RateMatrix::new(3, q.q.clone()).unwrap();
        assert_eq!(q.exit_rate(0), 1.0 + 2.0);
        let p = q.apply(&[0.2, 0.3, 0.5]);
        assert!(p.iter().sum::<f64>().abs() < 1e-14);
        assert!(RateMatrix::new(2, vec![-1.0, 0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn flow_conditional_marginalizes_to_vanilla_drift() {
        let g = bimodal();
        let sched = GaussianSchedule::vanilla_fm();
        let post = Posterior::Gaussian { target: g.clone(), sched };
        for &t in &[0.1, 0.5, 0.93] {
            let ctx = MarginalContext::new(&g, &sched, t).unwrap();
            for &x in &[-2.0, 0.3, 1.7] {
                let LocalPart::Flow(v) = marginalize_conditional(&ConditionalGenerator::FlowCond, &post, t, &[x]).unwrap() else {
                    panic!("flow expected")
                };
                let a = ctx.exact_drift(&[x]).unwrap();
                assert!((v[0] - a[0]).abs() < 1e-10 * (1.0 + a[0].abs()));
            }
        }
    }

    #[test]
    fn unsupported_combination_is_rejected() {
        let post = Posterior::Gaussian { target: bimodal(), sched: GaussianSchedule::vanilla_fm() };
        let cond = ConditionalGenerator::JumpCond { kappa: MixtureSchedule::Linear };
        assert!(matches!(marginalize_conditional(&cond, &post, 0.5, &[0.0]), Err(Error::PosteriorUnavailable(_))));
    }

    #[test]
    fn finite_mixture_rates_solve_forward_equation() {
        let base = FiniteTarget::uniform(4);
        let target = FiniteTarget::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        for kappa in [MixtureSchedule::Linear, MixtureSchedule::Power { exponent: 2.0 }] {
            let q = finite_mixture_rates(&base, &target, kappa);
            for &t in &[0.1, 0.5, 0.9] {
                let k = kappa.kappa(t);
                let p: Vec<f64> = (0..4).map(|i| (1.0 - k) * base.pmf()[i] + k * target.pmf()[i]).collect();
                let dp: Vec<f64> = (0..4).map(|i| kappa.kappa_dot(t) * (target.pmf()[i] - base.pmf()[i])).collect();
                let qp = q(t).apply(&p);
                for i in 0..4 {
                    assert!((qp[i] - dp[i]).abs() < 1e-12, "{t} {i}");
                }
            }
        }
    }

    #[test]
    fn continuous_mixture_jump_and_flow_satisfy_weak_equation() {
        let base = GaussianMixture::standard(1);
        let target = bimodal();
        let kappa = MixtureSchedule::Linear;
        let cond = ConditionalGenerator::JumpCond { kappa };
        let jump = marginal_generator(cond, Posterior::ContinuousMixture { base: base.clone(), target: target.clone(), kappa }, 1);
        let flow = mixture_path_flow_1d(&base, &target, kappa);
        for f in bank_1d().functions {
            for &t in &[0.2, 0.7] {
                let k = kappa.kappa(t);
                let lhs = kappa.kappa_dot(t) * (f.gaussian_mean(&target).unwrap() - f.gaussian_mean(&base).unwrap());
                let pt = |y: f64| (1.0 - k) * base.density(&[y]) + k * target.density(&[y]);
                for gen in [&jump, &flow] {
                    let rhs = integrate_gl256(-12.0, 12.0, |y| pt(y) * apply_generator(gen, &f, t, &[y]).unwrap());
                    assert!((lhs - rhs).abs() < 1e-8, "{} {:?} t={t}: {lhs} vs {rhs}", f.label(), gen.kinds());
                }
            }
        }
    }

    #[test]
    fn gaussian_path_kfe_residual_is_within_noise() {
        let g = bimodal();
        let sched = GaussianSchedule::vanilla_fm();
        let gen = gaussian_path_generator(&g, &sched);
        let path = GaussianPath { target: g, sched };
        for f in bank_1d().functions {
            let rep = kfe_residual(&gen, &path, &f, 0.5, 1e-3, 20_000, 7).unwrap();
            assert!(rep.residual < 4.0 * rep.se + 1e-4, "{}: {rep:?}", f.label());
        }
    }

    #[test]
    fn superposition_is_convex_combination() {
        let base = GaussianMixture::standard(1);
        let target = bimodal();
        let kappa = MixtureSchedule::Linear;
        let g1 = mixture_path_flow_1d(&base, &target, kappa);
        let g2 = marginal_generator(
            ConditionalGenerator::JumpCond { kappa },
            Posterior::ContinuousMixture { base, target, kappa },
            1,
        );
        let alpha: TimeFn = Arc::new(|t| 0.25 + 0.5 * t);
        let s = superpose(&g1, &g2, alpha.clone());
        let f = BankFunction::Cosine { omega: vec![1.3] };
        for &(t, x) in &[(0.3, -0.4), (0.6, 1.2)] {
            let a = alpha(t);
            let want = a * apply_generator(&g1, &f, t, &[x]).unwrap() + (1.0 - a) * apply_generator(&g2, &f, t, &[x]).unwrap();
            assert!((apply_generator(&s, &f, t, &[x]).unwrap() - want).abs() < 1e-12);
        }
    }

    struct Well;
    impl TestFunction for Well {
        fn value(&self, x: &[f64]) -> f64 {
            (x[0] - 0.5).powi(2) + 0.1 * (x[0] - 0.5).powi(4)
        }
        fn gradient(&self, x: &[f64], out: &mut [f64]) {
            out[0] = 2.0 * (x[0] - 0.5) + 0.4 * (x[0] - 0.5).powi(3);
        }
        fn laplacian(&self, x: &[f64]) -> f64 {
            2.0 + 1.2 * (x[0] - 0.5).powi(2)
        }
    }

    #[test]
    fn generator_respects_minimum_principle() {
        let target = bimodal();
        let kappa = MixtureSchedule::Linear;
        let gens = [
            gaussian_path_generator(&target, &GaussianSchedule::rescaled_diffusion()),
            marginal_generator(
                ConditionalGenerator::JumpCond { kappa },
                Posterior::ContinuousMixture { base: GaussianMixture::standard(1), target: target.clone(), kappa },
                1,
            ),
            mixture_path_flow_1d(&GaussianMixture::standard(1), &target, kappa),
        ];
        for g in &gens {
            for &t in &[0.2, 0.5, 0.9] {
                assert!(apply_generator(g, &Well, t, &[0.5]).unwrap() >= -1e-12);
            }
        }
    }

    #[test]
    fn backward_solve_transports_under_constant_drift() {
        // a = c gives f̂_t(x) = f(x + c(1 − t))
        let c = 0.7;
        let gen = GeneratorSpec::new(1).with_flow(move |_, _, out| out[0] = c);
        let f = |x: f64| (-x * x).exp();
        let mut errs = Vec::new();
        for &dx in &[0.04, 0.02, 0.01] {
            let grid = SpatialGrid::covering(-6.0, 6.0, dx);
            let sol = backward_solve_1d(&gen, &f, &grid, 0.0, 1.0, 0.5 * dx, &mut |_, _| {}).unwrap();
            let err = grid
                .xs()
                .iter()
                .zip(&sol)
                .filter(|(x, _)| x.abs() < 4.0)
                .map(|(x, v)| (v - f(x + c)).abs())
                .fold(0.0, f64::max);
            errs.push(err);
        }
        let order = (errs[1] / errs[2]).log2();
        assert!(order > 1.8, "{errs:?}");
    }

    #[test]
    fn backward_solve_reports_cfl_violation() {
        let gen = GeneratorSpec::new(1).with_diffusion(|_| 1.0);
        let grid = SpatialGrid::covering(-1.0, 1.0, 0.1);
        let r = backward_solve_1d(&gen, &|x| x, &grid, 0.0, 1.0, 0.1, &mut |_, _| {});
        assert!(matches!(r, Err(Error::CflViolation { .. })));
    }

    #[test]
    fn duality_identity_for_affine_flows() {
        // p: vanilla flow from N(0, 1) to N(0, 1); q: perturbed drift
        let p = AffineFlow1d {
            slope: Arc::new(|t| (2.0 * t - 1.0) / (t * t + (1.0 - t) * (1.0 - t))),
            offset: Arc::new(|_| 0.0),
            m0: 0.0,
            v0: 1.0,
        };
        let pslope = p.slope.clone();
        let q = AffineFlow1d { slope: Arc::new(move |t| pslope(t) - 0.3), offset: Arc::new(|_| 0.3), m0: 0.0, v0: 1.0 };
        let f = BankFunction::Bump { center: vec![0.5], width: 1.0 };
        let mut errs = Vec::new();
        for dx in [0.04, 0.02] {
            let grid = SpatialGrid::covering(-8.0, 8.0, dx);
            let rep = duality_check_1d(&p, &q, &f, &grid).unwrap();
            assert!(rep.rel_error < 0.05, "{rep:?}");
            errs.push((rep.rhs - rep.lhs).abs());
        }
        assert!((errs[0] / errs[1]).log2() > 1.8, "{errs:?}");
    }

    #[test]
    fn coupling_stays_below_gronwall_envelope() {
        let drift = |t: f64, x: &[f64], out: &mut [f64]| {
            let s2 = t * t + (1.0 - t) * (1.0 - t);
            out[0] = (2.0 * t - 1.0) / s2 * x[0];
        };
        let ell = |t: f64| (2.0 * t - 1.0) / (t * t + (1.0 - t) * (1.0 - t));
        let grid: Vec<f64> = (0..=200).map(|k| k as f64 / 200.0).collect();
        let starts: Vec<_> = (0..50).map(|i| (vec![i as f64 * 0.1 - 2.5], vec![i as f64 * 0.1 - 2.4])).collect();
        let rep = gronwall_coupling_check(&drift, &ell, &|_| 0.5, 1.0, &starts, &grid, 3);
        assert_eq!(rep.violations, 0, "{rep:?}");
    }

    #[test]
    fn static_paths_use_common_random_numbers() {
        let path = MixturePath {
            base: Law::Finite(FiniteTarget::uniform(5)),
            target: Law::Finite(FiniteTarget::new(vec![0.5, 0.5, 0.0, 0.0, 0.0]).unwrap()),
            kappa: MixtureSchedule::Linear,
        };
        let a = path.sample_at(0.3, 100, 1).unwrap();
        let b = path.sample_at(0.3, 100, 1).unwrap();
        assert_eq!(a, b);
        let late = path.sample_at(0.999, 100, 1).unwrap();
        assert!(late.as_flat().iter().filter(|&&v| v >= 2.0).count() <= 1);
    }
}
