//! Matching losses and the blockwise empirical-risk driver.
//!
//! Gaussian kinds regress a network onto a conditional target built from a
//! data point z and a noise draw ξ at X°_t = α_t z + σ_t ξ. The jump kind
//! regresses softmax rates on finite states (one-hot embedded) onto the
//! conditional rate vector λ_t e_z.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::finite_mixture_posterior;
use crate::nets::{Certification, ConstrainedNet, GradientWorkspace, NetBounds};
use crate::oracles::MarginalContext;
use crate::points::Points;
use crate::rng;
use crate::schedules::{CapacityConstants, GaussianSchedule, MixtureSchedule, TimeGrid};
use crate::targets::{FiniteTarget, GaussianMixture};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// velocity regression onto α̇ z + σ̇ ξ
    Cfm,
    /// drift regression onto α̇ z + η σ ξ
    GaussCgm,
    /// score regression onto −ξ/σ
    Dsm,
    /// 2∇·s + ‖s‖², no target
    VanillaSm,
    /// rate regression on finite states
    JumpCgm,
}

impl LossKind {
    /// Whether the trained field is a score rather than a drift.
    pub fn learns_score(self) -> bool {
        matches!(self, Self::Dsm | Self::VanillaSm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bregman {
    /// Φ = ‖·‖²
    SquaredEuclidean,
    /// Φ = Σ a ln a on the positive orthant (generalized KL)
    SimplexKl,
}

impl Bregman {
    pub fn potential(self, a: &[f64]) -> f64 {
        match self {
            Self::SquaredEuclidean => a.iter().map(|v| v * v).sum(),
            Self::SimplexKl => a.iter().map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 }).sum(),
        }
    }

    pub fn potential_grad(self, b: &[f64], out: &mut [f64]) {
        for (o, &v) in out.iter_mut().zip(b) {
            *o = match self {
                Self::SquaredEuclidean => 2.0 * v,
                Self::SimplexKl => v.ln() + 1.0,
            };
        }
    }

    /// D(a, b) = Φ(a) − Φ(b) − ⟨∇Φ(b), a − b⟩
    pub fn value(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Self::SquaredEuclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
            Self::SimplexKl => a
                .iter()
                .zip(b)
                .map(|(&x, &y)| if x > 0.0 { x * (x / y).ln() - x + y } else { y })
                .sum(),
        }
    }

    /// ∂D/∂b = −∇²Φ(b)(a − b)
    pub fn grad_b(self, a: &[f64], b: &[f64], out: &mut [f64]) {
        for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
            *o = match self {
                Self::SquaredEuclidean => -2.0 * (x - y),
                Self::SimplexKl => 1.0 - x / y,
            };
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PathSchedule {
    Gaussian(GaussianSchedule),
    Mixture { kappa: MixtureSchedule },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TimeWeight {
    Unit,
    /// (1 − t)^p
    Power { exponent: f64 },
}

impl TimeWeight {
    pub fn at(self, t: f64) -> f64 {
        match self {
            Self::Unit => 1.0,
            Self::Power { exponent } => (1.0 - t).powf(exponent),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub osl_weight: f64,
    /// fresh ξ on every draw; otherwise one ξ per data point
    pub fresh_noise: bool,
    /// sample t on [0, T_n) regardless of block
    pub global_time: bool,
    pub weight: TimeWeight,
    /// cosine decay of the learning rate to zero over the run
    pub cosine_decay: bool,
    pub capacity: CapacityConstants,
    pub certify_points: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            steps: 2000,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            osl_weight: 1e-2,
            fresh_noise: true,
            global_time: false,
            weight: TimeWeight::Unit,
            cosine_decay: false,
            capacity: CapacityConstants::default(),
            certify_points: 10_000,
        }
    }
}

impl TrainConfig {
    /// Larger step with cosine decay; the pilot runs on one-dimensional
    /// mixtures reach several times lower drift error than the defaults.
    pub fn tuned() -> Self {
        Self { learning_rate: 2e-2, steps: 4000, cosine_decay: true, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        if self.osl_weight < 0.0 {
            return Err(Error::InvalidArgument("osl_weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// Parameters with a value and a vector-Jacobian product.
pub trait ParamModel {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn n_params(&self) -> usize;
    fn value(&self, t: f64, x: &[f64], out: &mut [f64]);
    /// grad += scale · ∇_θ⟨cot, model(t, x)⟩
    fn accumulate_grad(&self, t: f64, x: &[f64], cot: &[f64], scale: f64, grad: &mut [f64]);
}

impl ParamModel for ConstrainedNet {
    fn in_dim(&self) -> usize {
        self.dim()
    }
    fn out_dim(&self) -> usize {
        self.dim()
    }
    fn n_params(&self) -> usize {
        ConstrainedNet::n_params(self)
    }
    fn value(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.forward_with(&mut self.workspace(), t, x, out)
    }
    fn accumulate_grad(&self, t: f64, x: &[f64], cot: &[f64], scale: f64, grad: &mut [f64]) {
        self.backprop(&mut self.workspace(), t, x, None, cot, None, scale, grad)
    }
}

/// (X°_t, conditional target) for the Gaussian kinds. VanillaSm has an empty target.
pub fn conditional_target(kind: LossKind, sched: &GaussianSchedule, z: &[f64], xi: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let p = sched.path(t)?;
    if !(p.sigma > 0.0) {
        return Err(Error::TimeOutOfDomain { t, what: "conditional target needs σ_t > 0" });
    }
    let x: Vec<f64> = z.iter().zip(xi).map(|(z, e)| p.alpha * z + p.sigma * e).collect();
    let target = match kind {
        LossKind::Cfm => z.iter().zip(xi).map(|(z, e)| p.alpha_dot * z + p.sigma_dot * e).collect(),
        LossKind::GaussCgm => {
            let c = sched.eval(t)?;
            z.iter().zip(xi).map(|(z, e)| c.alpha_dot * z + c.eta * c.sigma * e).collect()
        }
        LossKind::Dsm => xi.iter().map(|e| -e / p.sigma).collect(),
        LossKind::VanillaSm => Vec::new(),
        LossKind::JumpCgm => return Err(Error::IncompatibleLoss("jump matching needs a mixture schedule".into())),
    };
    Ok((x, target))
}

/// Marginal counterpart of `conditional_target` at x, from the oracles.
pub fn marginal_target(kind: LossKind, target: &GaussianMixture, sched: &GaussianSchedule, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    let ctx = MarginalContext::new(target, sched, t)?;
    match kind {
        LossKind::GaussCgm => ctx.exact_drift(x),
        LossKind::Dsm => Ok(ctx.score(x)),
        LossKind::Cfm => {
            let p = ctx.path();
            let m = ctx.posterior(x).mean_z;
            Ok(m.iter().zip(x).map(|(m, xi)| p.alpha_dot * m + p.sigma_dot * (xi - p.alpha * m) / p.sigma).collect())
        }
        _ => Err(Error::IncompatibleLoss(format!("{kind:?} has no regression target"))),
    }
}

/// One draw: for Gaussian paths `z` is a data point and `noise` is ξ; for
/// mixture paths `z` = [z state] and `noise` = [base state, uniform].
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub z: Vec<f64>,
    pub noise: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValue {
    pub data: f64,
    pub osl: f64,
}

impl LossValue {
    pub fn total(&self, osl_weight: f64) -> f64 {
        self.data + osl_weight * self.osl
    }
}

fn one_hot(s: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; s];
    v[i] = 1.0;
    v
}

fn softmax(o: &[f64]) -> Vec<f64> {
    let m = o.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = o.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Rates λ p and the logit cotangent for a Bregman regression onto `a`.
fn rate_loss(bregman: Bregman, lam: f64, logits: &[f64], a: &[f64]) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let b: Vec<f64> = p.iter().map(|v| lam * v).collect();
    let mut g = vec![0.0; b.len()];
    bregman.grad_b(a, &b, &mut g);
    let gp: f64 = g.iter().zip(&p).map(|(g, p)| g * p).sum();
    let cot = p.iter().zip(&g).map(|(p, g)| lam * p * (g - gp)).collect();
    (bregman.value(a, &b), cot)
}

fn mixture_state(kappa: &MixtureSchedule, s: &Sample) -> usize {
    if s.noise[1] < kappa.kappa(s.t) {
        s.z[0] as usize
    } else {
        s.noise[0] as usize
    }
}

/// Batch mean of the weighted data loss and of the one-sided Lipschitz
/// penalty; `grad` receives ∇_θ(data + osl_weight·osl).
pub fn loss_batch(
    kind: LossKind,
    net: &ConstrainedNet,
    batch: &[Sample],
    schedule: &PathSchedule,
    bregman: Bregman,
    weight: TimeWeight,
    osl_weight: f64,
    ws: &mut GradientWorkspace,
    grad: &mut [f64],
) -> Result<LossValue> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let d = net.dim();
    let inv_n = 1.0 / batch.len() as f64;
    let mut out = LossValue::default();
    let mut val = vec![0.0; d];
    let mut gb = vec![0.0; d];
    match (kind, schedule) {
        (LossKind::JumpCgm, PathSchedule::Mixture { kappa }) => {
            for s in batch {
                let x = mixture_state(kappa, s);
                let input = one_hot(d, x);
                let lam = kappa.intensity(s.t)?;
                net.forward_with(ws, s.t, &input, &mut val);
                let a: Vec<f64> = one_hot(d, s.z[0] as usize).iter().map(|v| lam * v).collect();
                let (l, cot) = rate_loss(bregman, lam, &val, &a);
                let w = weight.at(s.t) * inv_n;
                out.data += w * l;
                net.backprop(ws, s.t, &input, None, &cot, None, w, grad);
            }
        }
        (LossKind::JumpCgm, _) => return Err(Error::IncompatibleLoss("jump matching needs a mixture schedule".into())),
        (_, PathSchedule::Mixture { .. }) => {
            return Err(Error::IncompatibleLoss(format!("{kind:?} needs a Gaussian schedule")))
        }
        (_, PathSchedule::Gaussian(sched)) => {
            if bregman != Bregman::SquaredEuclidean {
                return Err(Error::IncompatibleLoss("Gaussian kinds regress with the squared Euclidean divergence".into()));
            }
            let mut e = vec![0.0; d];
            let zero = vec![0.0; d];
            for s in batch {
                let (x, target) = conditional_target(kind, sched, &s.z, &s.noise, s.t)?;
                let w = weight.at(s.t) * inv_n;
                net.forward_with(ws, s.t, &x, &mut val);
                if kind == LossKind::VanillaSm {
                    let div = net.jacobian_x_with(ws, s.t, &x).trace();
                    out.data += w * (2.0 * div + val.iter().map(|v| v * v).sum::<f64>());
                    let two_s: Vec<f64> = val.iter().map(|v| 2.0 * v).collect();
                    net.backprop(ws, s.t, &x, None, &two_s, None, w, grad);
                    for k in 0..d {
                        e.iter_mut().for_each(|v| *v = 0.0);
                        e[k] = 1.0;
                        net.backprop(ws, s.t, &x, Some(&e), &zero, Some(&e), 2.0 * w, grad);
                    }
                } else {
                    out.data += w * bregman.value(&target, &val);
                    bregman.grad_b(&target, &val, &mut gb);
                    net.backprop(ws, s.t, &x, None, &gb, None, w, grad);
                }
                if osl_weight > 0.0 {
                    out.osl += inv_n * net.osl_penalty_grad(ws, s.t, &x, osl_weight * inv_n, grad);
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// gradient equivalence

#[derive(Clone, Debug)]
pub enum EquivalenceCase {
    Gaussian { target: GaussianMixture, sched: GaussianSchedule, kind: LossKind },
    Finite { base: FiniteTarget, target: FiniteTarget, kappa: MixtureSchedule },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub n_mc: usize,
    pub cosine: f64,
    pub norm_ratio: f64,
    pub marginal_norm: f64,
    pub conditional_norm: f64,
    /// √(tr Cov / n) of the per-sample gradient estimates
    pub marginal_se: f64,
    pub conditional_se: f64,
}

struct GradStats {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl GradStats {
    fn new(p: usize) -> Self {
        Self { sum: vec![0.0; p], sum_sq: vec![0.0; p] }
    }
    fn add(&mut self, g: &[f64]) {
        for i in 0..g.len() {
            self.sum[i] += g[i];
            self.sum_sq[i] += g[i] * g[i];
        }
    }
    fn mean_and_se(&self, n: usize) -> (Vec<f64>, f64) {
        let nf = n as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / nf).collect();
        let var: f64 = self.sum_sq.iter().zip(&mean).map(|(q, m)| (q / nf - m * m).max(0.0)).sum();
        (mean, (var / (nf - 1.0).max(1.0)).sqrt())
    }
}

/// ∇_θ of the marginal and conditional regression losses on common random
/// numbers, with t uniform on `t_range`.
pub fn bregman_gradient_equivalence_check(
    model: &dyn ParamModel,
    case: &EquivalenceCase,
    bregman: Bregman,
    t_range: (f64, f64),
    n_mc: usize,
    seed: u64,
) -> Result<EquivalenceReport> {
    let p = model.n_params();
    let (mut gm, mut cg) = (GradStats::new(p), GradStats::new(p));
    let (mut g1, mut g2) = (vec![0.0; p], vec![0.0; p]);
    let d_out = model.out_dim();
    let mut val = vec![0.0; d_out];
    let mut cot = vec![0.0; d_out];
    for i in 0..n_mc {
        let mut r = rng::stream(seed, i as u64);
        let t = t_range.0 + (t_range.1 - t_range.0) * r.random::<f64>();
        g1.iter_mut().for_each(|v| *v = 0.0);
        g2.iter_mut().for_each(|v| *v = 0.0);
        match case {
            EquivalenceCase::Gaussian { target, sched, kind } => {
                let d = target.dim();
                let mut z = vec![0.0; d];
                target.sample_one(&mut r, &mut z);
                let xi: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
                let (x, cond) = conditional_target(*kind, sched, &z, &xi, t)?;
                let marg = marginal_target(*kind, target, sched, t, &x)?;
                model.value(t, &x, &mut val);
                bregman.grad_b(&marg, &val, &mut cot);
                model.accumulate_grad(t, &x, &cot, 1.0, &mut g1);
                bregman.grad_b(&cond, &val, &mut cot);
                model.accumulate_grad(t, &x, &cot, 1.0, &mut g2);
            }
            EquivalenceCase::Finite { base, target, kappa } => {
                let s = target.n_states();
                let sample = Sample {
                    t,
                    z: vec![target.draw(r.random::<f64>()) as f64],
                    noise: vec![base.draw(r.random::<f64>()) as f64, r.random::<f64>()],
                };
                let x = mixture_state(kappa, &sample);
                let input = one_hot(s, x);
                let lam = kappa.intensity(t)?;
                model.value(t, &input, &mut val);
                let post = finite_mixture_posterior(base, target, kappa.kappa(t), x)?;
                let marg: Vec<f64> = post.iter().map(|v| lam * v).collect();
                let cond: Vec<f64> = one_hot(s, sample.z[0] as usize).iter().map(|v| lam * v).collect();
                let (_, c1) = rate_loss(bregman, lam, &val, &marg);
                model.accumulate_grad(t, &input, &c1, 1.0, &mut g1);
                let (_, c2) = rate_loss(bregman, lam, &val, &cond);
                model.accumulate_grad(t, &input, &c2, 1.0, &mut g2);
            }
        }
        gm.add(&g1);
        cg.add(&g2);
    }
    let (m1, se1) = gm.mean_and_se(n_mc);
    let (m2, se2) = cg.mean_and_se(n_mc);
    let n1 = m1.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n2 = m2.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dotp: f64 = m1.iter().zip(&m2).map(|(a, b)| a * b).sum();
    Ok(EquivalenceReport {
        n_mc,
        cosine: dotp / (n1 * n2),
        norm_ratio: n2 / n1,
        marginal_norm: n1,
        conditional_norm: n2,
        marginal_se: se1,
        conditional_se: se2,
    })
}

// ---------------------------------------------------------------------------
// optimizer and blockwise driver

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        Self { kind, lr, m: vec![0.0; n_params], v: vec![0.0; n_params], step: 0 }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
                let c1 = 1.0 - b1.powi(self.step as i32);
                let c2 = 1.0 - b2.powi(self.step as i32);
                for i in 0..params.len() {
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
                    params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub block: usize,
    pub step: usize,
    pub loss: f64,
    pub osl_penalty: f64,
}

/// â_t = Σ_k φ_k(t, ·) 1{t ∈ [t_k, t_{k+1})}
#[derive(Clone, Debug)]
pub struct BlockwiseEstimator {
    pub kind: LossKind,
    pub sched: GaussianSchedule,
    pub grid: TimeGrid,
    pub nets: Vec<ConstrainedNet>,
    pub certificates: Vec<Certification>,
    pub curve: Vec<CurvePoint>,
}

impl BlockwiseEstimator {
    /// Raw network output at (t, x).
    pub fn field(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let k = self.grid.block_of(t);
        self.nets[k].forward_with(&mut self.nets[k].workspace(), t, x, out);
    }

    /// Generative drift; score estimates are converted through
    /// a = (α̇/α) x + (σ_fwd² + b²) ŝ.
    pub fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.field(t, x, out);
        if self.kind.learns_score() {
            let c = self.sched.eval(t).expect("estimator used inside the schedule domain");
            let g = c.sigma_fwd_sq() + c.b * c.b;
            for k in 0..x.len() {
                out[k] = c.alpha_dot / c.alpha * x[k] + g * out[k];
            }
        }
    }

    /// Largest certified λ_max over blocks.
    pub fn certified_osl(&self) -> f64 {
        self.certificates.iter().map(|c| c.max_lambda).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Certification radius: max |z| plus four noise scales.
fn support_radius(data: &Points) -> f64 {
    data.as_flat().iter().fold(0.0f64, |m, v| m.max(v.abs())) + 4.0
}

/// Train one block on a shared dataset.
pub fn train_block(
    net: &mut ConstrainedNet,
    kind: LossKind,
    sched: &GaussianSchedule,
    data: &Points,
    fixed_noise: Option<&Points>,
    t_range: (f64, f64),
    config: &TrainConfig,
    block: usize,
    curve: &mut Vec<CurvePoint>,
) -> Result<()> {
    let d = data.dim();
    let path = PathSchedule::Gaussian(*sched);
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, net.n_params());
    let mut r = rng::stream(rng::derive(config.seed, block as u64), 0);
    let mut grad = vec![0.0; net.n_params()];
    let mut ws = net.workspace();
    let mut batch: Vec<Sample> = (0..config.batch_size).map(|_| Sample { t: 0.0, z: vec![0.0; d], noise: vec![0.0; d] }).collect();
    for step in 0..config.steps {
        for s in &mut batch {
            let i = r.random_range(0..data.len());
            s.t = t_range.0 + (t_range.1 - t_range.0) * r.random::<f64>();
            s.z.copy_from_slice(data.row(i));
            match fixed_noise {
                Some(xi) => s.noise.copy_from_slice(xi.row(i)),
                None => s.noise.iter_mut().for_each(|v| *v = r.sample(StandardNormal)),
            }
        }
        if config.cosine_decay {
            let frac = step as f64 / config.steps as f64;
            opt.set_learning_rate(config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()));
        }
        grad.iter_mut().for_each(|v| *v = 0.0);
        let lv = loss_batch(kind, net, &batch, &path, Bregman::SquaredEuclidean, config.weight, config.osl_weight, &mut ws, &mut grad)?;
        opt.step(net.params_mut(), &grad);
        net.clip_weights();
        curve.push(CurvePoint { block, step, loss: lv.data, osl_penalty: lv.osl });
    }
    Ok(())
}

/// Train φ_k on every block of `grid` from one fixed dataset.
pub fn train_blockwise(grid: &TimeGrid, kind: LossKind, data: &Points, sched: &GaussianSchedule, config: &TrainConfig) -> Result<BlockwiseEstimator> {
    config.validate()?;
    if kind == LossKind::JumpCgm {
        return Err(Error::IncompatibleLoss("blockwise training runs on Gaussian schedules".into()));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let d = data.dim();
    let fixed = (!config.fresh_noise).then(|| {
        let mut r = rng::stream(rng::derive(config.seed, u64::MAX), 0);
        Points::from_flat(d, (0..data.len() * d).map(|_| r.sample(StandardNormal)).collect())
    });
    let radius = support_radius(data);
    let mut nets = Vec::with_capacity(grid.k_n);
    let mut certificates = Vec::with_capacity(grid.k_n);
    let mut curve = Vec::new();
    for k in 0..grid.k_n {
        let (lo, hi) = grid.block(k);
        let t_range = if config.global_time { (grid.edges[0], grid.t_n) } else { (lo, hi) };
        let bounds = NetBounds::from(&grid.capacity[k]);
        let mut net = ConstrainedNet::new(d, bounds, rng::derive(config.seed, 1000 + k as u64))?;
        train_block(&mut net, kind, sched, data, fixed.as_ref(), t_range, config, k, &mut curve)?;
        certificates.push(net.certify(lo, hi, radius, config.certify_points, rng::derive(config.seed, 2000 + k as u64)));
        nets.push(net);
    }
    Ok(BlockwiseEstimator { kind, sched: *sched, grid: grid.clone(), nets, certificates, curve })
}

/// √∫‖f̂ − f‖² p_t by Monte Carlo over `xs`.
pub fn l2_error(xs: &Points, mut estimate: impl FnMut(&[f64], &mut [f64]), mut exact: impl FnMut(&[f64]) -> Vec<f64>) -> f64 {
    let mut out = vec![0.0; xs.dim()];
    let mut acc = 0.0;
    for x in xs.rows() {
        estimate(x, &mut out);
        let e = exact(x);
        acc += out.iter().zip(&e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    (acc / xs.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::{GaussianPath, StaticPath};
    use crate::schedules::build_time_grid;
    use proptest::prelude::*;

    fn small_bounds(d: usize) -> NetBounds {
        let _ = d;
        NetBounds { depth: 2, width: 8, weight_bound: 10.0, value_bound: 20.0, osl_bound: 0.5 }
    }

    #[test]
    fn conditional_targets_match_closed_forms() {
        let fm = GaussianSchedule::vanilla_fm();
        let (x, a) = conditional_target(LossKind::Cfm, &fm, &[1.0], &[0.0], 0.3).unwrap();
        assert!((x[0] - 0.3).abs() < 1e-15 && (a[0] - 1.0).abs() < 1e-15);
        let (_, a) = conditional_target(LossKind::Dsm, &fm, &[0.7], &[2.0], 0.5).unwrap();
        assert!((a[0] + 4.0).abs() < 1e-15);
        for t in [0.1, 0.6, 0.95] {
            let (x, a) = conditional_target(LossKind::GaussCgm, &fm, &[0.0], &[0.0], t).unwrap();
            assert_eq!((x[0], a[0]), (0.0, 0.0));
        }
        assert!(matches!(conditional_target(LossKind::JumpCgm, &fm, &[0.0], &[0.0], 0.5), Err(Error::IncompatibleLoss(_))));
    }

    #[test]
    fn bregman_divergences_are_nonnegative_and_affine_invariant() {
        let (a, b) = ([0.2, 0.5, 0.3], [0.3, 0.3, 0.4]);
        for br in [Bregman::SquaredEuclidean, Bregman::SimplexKl] {
            assert!(br.value(&a, &a).abs() < 1e-15);
            assert!(br.value(&a, &b) > 0.0);
            // generic definition vs closed form
            let mut g = [0.0; 3];
            br.potential_grad(&b, &mut g);
            let generic = br.potential(&a) - br.potential(&b) - (0..3).map(|i| g[i] * (a[i] - b[i])).sum::<f64>();
            assert!((generic - br.value(&a, &b)).abs() < 1e-12);
            // Φ + ⟨c, ·⟩ + k gives the same divergence
            let c = [0.7, -1.1, 2.0];
            let phi = |v: &[f64]| br.potential(v) + (0..3).map(|i| c[i] * v[i]).sum::<f64>() + 3.0;
            let shifted = phi(&a) - phi(&b) - (0..3).map(|i| (g[i] + c[i]) * (a[i] - b[i])).sum::<f64>();
            assert!((shifted - br.value(&a, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn incompatible_losses_are_rejected() {
        let net = ConstrainedNet::new(1, small_bounds(1), 1).unwrap();
        let mut ws = net.workspace();
        let mut g = vec![0.0; net.n_params()];
        let batch = [Sample { t: 0.5, z: vec![0.0], noise: vec![0.0, 0.5] }];
        let mix = PathSchedule::Mixture { kappa: MixtureSchedule::Linear };
        let gauss = PathSchedule::Gaussian(GaussianSchedule::vanilla_fm());
        assert!(loss_batch(LossKind::Dsm, &net, &batch, &mix, Bregman::SquaredEuclidean, TimeWeight::Unit, 0.0, &mut ws, &mut g).is_err());
        assert!(loss_batch(LossKind::JumpCgm, &net, &batch, &gauss, Bregman::SimplexKl, TimeWeight::Unit, 0.0, &mut ws, &mut g).is_err());
        assert!(loss_batch(LossKind::Dsm, &net, &batch, &gauss, Bregman::SimplexKl, TimeWeight::Unit, 0.0, &mut ws, &mut g).is_err());
    }

    fn random_batch(kind: LossKind, d: usize, seed: u64) -> Vec<Sample> {
        let mut r = rng::stream(seed, 0);
        (0..5)
            .map(|_| {
                let t = r.random_range(0.1..0.9);
                if kind == LossKind::JumpCgm {
                    Sample { t, z: vec![r.random_range(0..d) as f64], noise: vec![r.random_range(0..d) as f64, r.random()] }
                } else {
                    Sample {
                        t,
                        z: (0..d).map(|_| r.random_range(-1.0..1.0)).collect(),
                        noise: (0..d).map(|_| r.sample(StandardNormal)).collect(),
                    }
                }
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10))]
        #[test]
        fn loss_gradient_matches_finite_differences(seed in 0u64..500, which in 0usize..6) {
            let (kind, d, path, br) = match which {
                0 => (LossKind::Cfm, 2, PathSchedule::Gaussian(GaussianSchedule::vanilla_fm()), Bregman::SquaredEuclidean),
                1 => (LossKind::GaussCgm, 2, PathSchedule::Gaussian(GaussianSchedule::rescaled_diffusion()), Bregman::SquaredEuclidean),
                2 => (LossKind::Dsm, 2, PathSchedule::Gaussian(GaussianSchedule::vanilla_fm()), Bregman::SquaredEuclidean),
                3 => (LossKind::VanillaSm, 2, PathSchedule::Gaussian(GaussianSchedule::vanilla_fm()), Bregman::SquaredEuclidean),
                4 => (LossKind::JumpCgm, 3, PathSchedule::Mixture { kappa: MixtureSchedule::Linear }, Bregman::SimplexKl),
                _ => (LossKind::JumpCgm, 3, PathSchedule::Mixture { kappa: MixtureSchedule::Power { exponent: 2.0 } }, Bregman::SquaredEuclidean),
            };
            let osl = if kind == LossKind::JumpCgm { 0.0 } else { 0.3 };
            let mut net = ConstrainedNet::new(d, small_bounds(d), seed).unwrap();
            net.params_mut().iter_mut().for_each(|p| *p *= 1.5);
            let batch = random_batch(kind, d, seed);
            let w = TimeWeight::Power { exponent: 0.5 };
            let mut ws = net.workspace();
            let total = |n: &ConstrainedNet| {
                let mut g = vec![0.0; n.n_params()];
                loss_batch(kind, n, &batch, &path, br, w, osl, &mut n.workspace(), &mut g).unwrap().total(osl)
            };
            let mut g = vec![0.0; net.n_params()];
            loss_batch(kind, &net, &batch, &path, br, w, osl, &mut ws, &mut g).unwrap();
            let h = 1e-6;
            let gmax = g.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-8);
            for i in 0..net.n_params() {
                let (mut a, mut b) = (net.clone(), net.clone());
                a.params_mut()[i] += h;
                b.params_mut()[i] -= h;
                let fd = (total(&a) - total(&b)) / (2.0 * h);
                prop_assert!((fd - g[i]).abs() / gmax < 1e-4, "{kind:?} param {i}: fd {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn vanilla_score_objective_at_true_score() {
        // s(x) = −x on N(0, 1): E[2 s' + s²] = −2 + 1 = −1
        let n = 200_000;
        let mut r = rng::stream(4, 0);
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let x: f64 = r.sample(StandardNormal);
            let v = 2.0 * -1.0 + x * x;
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean + 1.0).abs() < 3.0 * se);
    }

    /// a(x) = θ₀ x + θ₁, independent of t.
    struct Affine([f64; 2]);
    impl ParamModel for Affine {
        fn in_dim(&self) -> usize {
            1
        }
        fn out_dim(&self) -> usize {
            1
        }
        fn n_params(&self) -> usize {
            2
        }
        fn value(&self, _: f64, x: &[f64], out: &mut [f64]) {
            out[0] = self.0[0] * x[0] + self.0[1];
        }
        fn accumulate_grad(&self, _: f64, x: &[f64], cot: &[f64], scale: f64, grad: &mut [f64]) {
            grad[0] += scale * cot[0] * x[0];
            grad[1] += scale * cot[0];
        }
    }

    #[test]
    fn gradients_vanish_at_the_exact_drift() {
        // N(1, 0.5) under the vanilla path: a_t(x) is affine in x at fixed t
        let target = GaussianMixture::gaussian(vec![1.0], 0.5).unwrap();
        let sched = GaussianSchedule::vanilla_fm();
        let t = 0.4;
        let ctx = MarginalContext::new(&target, &sched, t).unwrap();
        let a0 = ctx.exact_drift(&[0.0]).unwrap()[0];
        let a1 = ctx.exact_drift(&[1.0]).unwrap()[0];
        let model = Affine([a1 - a0, a0]);
        let case = EquivalenceCase::Gaussian { target, sched, kind: LossKind::GaussCgm };
        let rep = bregman_gradient_equivalence_check(&model, &case, Bregman::SquaredEuclidean, (t, t), 20_000, 2).unwrap();
        assert!(rep.marginal_norm < 1e-10, "{rep:?}");
        assert!(rep.conditional_norm <= 3.0 * rep.conditional_se, "{rep:?}");
    }

    #[test]
    fn conditional_and_marginal_gradients_agree() {
        let net = ConstrainedNet::new(1, small_bounds(1), 3).unwrap();
        let case = EquivalenceCase::Gaussian {
            target: GaussianMixture::gaussian(vec![0.5], 0.8).unwrap(),
            sched: GaussianSchedule::vanilla_fm(),
            kind: LossKind::GaussCgm,
        };
        let rep = bregman_gradient_equivalence_check(&net, &case, Bregman::SquaredEuclidean, (0.05, 0.95), 20_000, 1).unwrap();
        assert!(rep.cosine > 0.97, "{rep:?}");
        let jump = ConstrainedNet::new(2, small_bounds(2), 3).unwrap();
        let case = EquivalenceCase::Finite {
            base: FiniteTarget::uniform(2),
            target: FiniteTarget::new(vec![0.8, 0.2]).unwrap(),
            kappa: MixtureSchedule::Linear,
        };
        let rep = bregman_gradient_equivalence_check(&jump, &case, Bregman::SimplexKl, (0.05, 0.9), 20_000, 1).unwrap();
        assert!(rep.cosine > 0.97, "{rep:?}");
    }

    fn one_block_grid(t_n: f64, n: usize) -> TimeGrid {
        let consts = CapacityConstants { width: 16.0, max_width: 16, depth: 2.0, value: 8.0, ..Default::default() };
        build_time_grid(1.0 / (1.0 - t_n), 1, t_n, n, 1.0, 1, &consts).unwrap()
    }

    #[test]
    fn gauss_cgm_recovers_single_gaussian_drift() {
        let n = 4096;
        let target = GaussianMixture::gaussian(vec![1.0], 0.5).unwrap();
        let sched = GaussianSchedule::vanilla_fm();
        let grid = one_block_grid(0.9, n);
        let data = target.sample(n, 5);
        let cfg = TrainConfig { seed: 5, certify_points: 500, ..TrainConfig::tuned() };
        let est = train_blockwise(&grid, LossKind::GaussCgm, &data, &sched, &cfg).unwrap();
        let t = 0.5;
        let ctx = MarginalContext::new(&target, &sched, t).unwrap();
        let xs = GaussianPath { target: target.clone(), sched }.sample_at(t, 4000, 77).unwrap();
        let err = l2_error(&xs, |x, o| est.drift(t, x, o), |x| ctx.exact_drift(x).unwrap());
        assert!(err <= 0.1, "drift error {err}");

        // smoothed training loss should not trend upward
        let chunk = cfg.steps / 10;
        let means: Vec<f64> = est.curve.chunks(chunk).map(|c| c.iter().map(|p| p.loss).sum::<f64>() / c.len() as f64).collect();
        for w in means.windows(2) {
            assert!(w[1] <= w[0] * 1.05, "{means:?}");
        }
    }

    #[test]
    fn zero_steps_and_reproducibility() {
        let target = GaussianMixture::gaussian(vec![0.0], 1.0).unwrap();
        let sched = GaussianSchedule::vanilla_fm();
        let grid = one_block_grid(0.9, 512);
        let data = target.sample(512, 1);
        let cfg = TrainConfig { steps: 0, certify_points: 10, ..Default::default() };
        let est = train_blockwise(&grid, LossKind::Cfm, &data, &sched, &cfg).unwrap();
        let init = ConstrainedNet::new(1, NetBounds::from(&grid.capacity[0]), rng::derive(cfg.seed, 1000)).unwrap();
        assert_eq!(est.nets[0], init);
        let mut o = [0.0];
        est.drift(0.3, &[0.2], &mut o);
        assert!(o[0].is_finite());

        let cfg = TrainConfig { steps: 50, certify_points: 10, seed: 9, ..Default::default() };
        let a = train_blockwise(&grid, LossKind::Dsm, &data, &sched, &cfg).unwrap();
        let b = train_blockwise(&grid, LossKind::Dsm, &data, &sched, &cfg).unwrap();
        assert_eq!(a.nets[0].to_bytes(), b.nets[0].to_bytes());
    }
}
