//! One function per experiment kind. Each returns its artifacts in memory;
//! `runner` writes them.

use std::sync::Arc;

use markovgen_core::generators::{
    finite_mixture_rates, marginal_generator, mixture_path_flow_1d, superpose, ConditionalGenerator, GaussianPath,
    Law, MixturePath, Posterior, StaticPath,
};
use markovgen_core::metrics::{empirical_pmf, rate_slope, sliced_w1, total_variation, w1_1d, w1_to_mixture_1d, RateFit};
use markovgen_core::oracles::MarginalContext;
use markovgen_core::samplers::{
    coupled_refinement, integrate_sde, ou_euler, ou_exact_sample, simulate_ctmc, simulate_jump_mixture, simulate_superposition, Initial,
    OuParams,
};
use markovgen_core::schedules::{anchored_ratio, build_time_grid, floor_start, CapacityConstants, GaussianSchedule, TimeGrid};
use markovgen_core::special::normal_pdf;
use markovgen_core::targets::{FiniteTarget, GaussianMixture};
use markovgen_core::training::{l2_error, train_blockwise, LossKind, TrainConfig};
use markovgen_core::{rng, Points};
use rayon::prelude::*;
use serde_json::json;

use crate::checks;
use crate::config::{DiscretizationConfig, ExperimentConfig, ExperimentKind, OuConfig, PathConfig, RateConfig, SamplerKind, TargetConfig};
use crate::error::CliError;
use crate::table::{Cell, Table};

/// Everything an experiment produces. Names are file stems.
#[derive(Debug, Default)]
pub struct Artifacts {
    pub tables: Vec<(String, Table)>,
    pub reports: Vec<(String, serde_json::Value)>,
    pub blobs: Vec<(String, Vec<u8>)>,
    pub violated: bool,
    pub summary: Vec<String>,
}

impl Artifacts {
    fn table(&mut self, name: &str, t: Table) {
        self.tables.push((name.to_owned(), t));
    }
}

/// Earliest simulation time for schedules whose coefficients blow up at 0.
pub const START_FLOOR: f64 = 1e-3;

pub fn run(kind: ExperimentKind, cfg: &ExperimentConfig) -> Result<Artifacts, CliError> {
    match kind {
        ExperimentKind::SamplePath => sample_path(cfg),
        ExperimentKind::Train => train(cfg),
        ExperimentKind::Verify => verify(cfg),
        ExperimentKind::Rate => rate(cfg),
        ExperimentKind::Discretization => discretization(cfg),
        ExperimentKind::OuFigures => ou_figures(&cfg.ou, cfg.seed),
    }
}

/// Geometric grid anchored at t_0 = 0 with `blocks` blocks up to `t_end`.
pub fn geometric_grid(blocks: usize, t_end: f64, steps_per_block: usize) -> Result<Vec<f64>, CliError> {
    let g = build_time_grid(anchored_ratio(blocks, t_end), blocks, t_end, 1000, 1.0, 1, &CapacityConstants::default())?;
    Ok(g.sampler_grid(steps_per_block))
}

fn grid_for(cfg: &ExperimentConfig, d: usize) -> Result<TimeGrid, CliError> {
    let g = cfg.grid;
    match (g.blocks, g.t_end) {
        (None, None) => Ok(TimeGrid::for_budget(g.budget, g.beta, d, &cfg.train.config.capacity)?),
        (k, t) => {
            let k = k.unwrap_or_else(|| markovgen_core::schedules::default_block_count(g.budget));
            let t = t.unwrap_or_else(|| markovgen_core::schedules::stopping_time(g.budget, g.beta, d));
            Ok(build_time_grid(anchored_ratio(k, t), k, t, g.budget, g.beta, d, &cfg.train.config.capacity)?)
        }
    }
}

/// Law of the continuous mixture path (1 − κ) base + κ target.
pub fn mixture_path_law(base: &GaussianMixture, target: &GaussianMixture, kappa: f64) -> Result<GaussianMixture, CliError> {
    let mut w: Vec<f64> = base.weights().iter().map(|v| v * (1.0 - kappa)).collect();
    let mut m = base.means().to_vec();
    let mut v = base.variances().to_vec();
    w.extend(target.weights().iter().map(|x| x * kappa));
    m.extend(target.means().iter().cloned());
    v.extend(target.variances().iter().copied());
    let keep: Vec<usize> = (0..w.len()).filter(|&i| w[i] > 0.0).collect();
    Ok(GaussianMixture::new(keep.iter().map(|&i| w[i]).collect(), keep.iter().map(|&i| m[i].clone()).collect(), keep.iter().map(|&i| v[i]).collect())?)
}

fn points_table(points: &Points) -> Table {
    let d = points.dim();
    let mut t = Table::new(std::iter::once("index".to_owned()).chain((0..d).map(|k| format!("x{k}"))));
    for (i, row) in points.rows().enumerate() {
        t.push(std::iter::once(Cell::from(i)).chain(row.iter().map(|&v| v.into())).collect());
    }
    t
}

/// Drift field of a Gaussian schedule from exact oracles.
pub fn exact_drift_fn<'a>(target: &'a GaussianMixture, sched: &'a GaussianSchedule) -> impl Fn(f64, &[f64], &mut [f64]) + Sync + 'a {
    move |t, x, o| {
        let a = MarginalContext::new(target, sched, t).and_then(|c| c.exact_drift(x)).expect("drift inside the schedule domain");
        o.copy_from_slice(&a);
    }
}

// ---------------------------------------------------------------------------
// sample-path

fn comparison_row(t: &mut Table, statistic: &str, value: f64, band: f64) -> bool {
    let pass = value <= band;
    t.push(vec![statistic.into(), value.into(), band.into(), pass.into()]);
    pass
}

fn sample_path(cfg: &ExperimentConfig) -> Result<Artifacts, CliError> {
    let s = cfg.sample;
    let mut art = Artifacts::default();
    let mut cmp = Table::new(["statistic", "value", "band", "within_band"]);
    let seed = cfg.seed;
    match (&cfg.path, s.sampler) {
        (PathConfig::Mixture { .. }, SamplerKind::Flow | SamplerKind::Sde) if cfg.target.dim() != 1 => {
            return Err(CliError::config("the mixture-path flow is available in one dimension only"));
        }
        (PathConfig::Mixture { .. }, _) => {
            let kappa = cfg.path.mixture()?;
            let t_end = cfg.grid.t_end.unwrap_or(0.9);
            match &cfg.target {
                TargetConfig::Finite { .. } => {
                    let target = cfg.target.finite()?;
                    let base = FiniteTarget::uniform(target.n_states());
                    let states = match s.sampler {
                        SamplerKind::Jump => {
                            let post = Posterior::FiniteMixture { base: base.clone(), target: target.clone(), kappa };
                            let out = simulate_jump_mixture(kappa, &Law::Finite(base.clone()), &Law::Finite(target.clone()), Some(&post), t_end, s.n, seed)?;
                            out.ends.as_flat().iter().map(|&v| v as usize).collect()
                        }
                        SamplerKind::Ctmc => {
                            let q = finite_mixture_rates(&base, &target, kappa);
                            let grid: Vec<f64> = (0..=cfg.grid.steps_per_block * 10).map(|k| t_end * k as f64 / (cfg.grid.steps_per_block * 10) as f64).collect();
                            simulate_ctmc(&q, base.pmf(), &grid, s.n, seed)?
                        }
                        _ => return Err(CliError::config("finite targets use the `jump` or `ctmc` sampler")),
                    };
                    let k = kappa.kappa(t_end);
                    let exact: Vec<f64> = base.pmf().iter().zip(target.pmf()).map(|(b, p)| (1.0 - k) * b + k * p).collect();
                    let pmf = empirical_pmf(&states, target.n_states());
                    let clt: f64 = 0.5 * exact.iter().map(|p| (p * (1.0 - p) / s.n as f64).sqrt()).sum::<f64>();
                    let mut ends = Table::new(["index", "state"]);
                    for (i, x) in states.iter().enumerate() {
                        ends.push(vec![i.into(), (*x).into()]);
                    }
                    let mut pm = Table::new(["state", "empirical", "exact"]);
                    for i in 0..pmf.len() {
                        pm.push(vec![i.into(), pmf[i].into(), exact[i].into()]);
                    }
                    comparison_row(&mut cmp, "total_variation", total_variation(&pmf, &exact), 3.0 * clt);
                    art.table("end_states", ends);
                    art.table("pmf", pm);
                }
                TargetConfig::Mixture { .. } => {
                    let target = cfg.target.mixture()?;
                    let base = GaussianMixture::standard(target.dim());
                    let ends = match s.sampler {
                        SamplerKind::Jump => {
                            let post = Posterior::ContinuousMixture { base: base.clone(), target: target.clone(), kappa };
                            simulate_jump_mixture(kappa, &Law::Mixture(base.clone()), &Law::Mixture(target.clone()), Some(&post), t_end, s.n, seed)?.ends
                        }
                        SamplerKind::Flow | SamplerKind::Superposition => {
                            let flow = mixture_path_flow_1d(&base, &target, kappa);
                            let jump = marginal_generator(
                                ConditionalGenerator::JumpCond { kappa },
                                Posterior::ContinuousMixture { base: base.clone(), target: target.clone(), kappa },
                                1,
                            );
                            let w = if s.sampler == SamplerKind::Flow { 1.0 } else { s.flow_weight };
                            let spec = superpose(&flow, &jump, Arc::new(move |_| w));
                            let steps = cfg.grid.steps_per_block * 50;
                            let grid: Vec<f64> = (0..=steps).map(|k| t_end * k as f64 / steps as f64).collect();
                            let out = simulate_superposition(&spec, &Initial::Law(Law::Mixture(base.clone())), &grid, s.n, seed)?;
                            art.summary.extend(out.warnings.iter().cloned());
                            out.ends
                        }
                        _ => return Err(CliError::config("continuous mixture paths use `jump`, `flow` or `superposition`")),
                    };
                    let path = MixturePath { base: Law::Mixture(base.clone()), target: Law::Mixture(target.clone()), kappa };
                    let stat = path.sample_at(t_end, s.n, rng::derive(seed, 1))?;
                    if target.dim() == 1 {
                        let law = mixture_path_law(&base, &target, kappa.kappa(t_end))?;
                        let clt = w1_to_mixture_1d(stat.as_flat(), &law);
                        comparison_row(&mut cmp, "w1_to_exact_law", w1_to_mixture_1d(ends.as_flat(), &law), 3.0 * clt);
                    } else {
                        let other = path.sample_at(t_end, s.n, rng::derive(seed, 2))?;
                        let clt = sliced_w1(&stat, &other, 64, seed);
                        comparison_row(&mut cmp, "sliced_w1_to_static", sliced_w1(&ends, &stat, 64, seed), 3.0 * clt);
                    }
                    art.table("end_states", points_table(&ends));
                }
            }
        }
        (_, SamplerKind::Flow | SamplerKind::Sde) => {
            let target = cfg.target.mixture()?;
            let mut sched = cfg.path.gaussian()?;
            if s.sampler == SamplerKind::Flow {
                sched = sched.with_diffusion(markovgen_core::schedules::Diffusion::Zero);
            }
            let tg = grid_for(cfg, target.dim())?;
            let mut grid = tg.sampler_grid(cfg.grid.steps_per_block);
            if sched.needs_positive_start() {
                grid = floor_start(&grid, START_FLOOR);
            }
            let t0 = grid[0];
            let t_end = *grid.last().expect("nonempty grid");
            let start = MarginalContext::new(&target, &sched, t0)?.marginal().clone();
            let drift = exact_drift_fn(&target, &sched);
            let b = |t: f64| sched.diffusion_at(t).expect("diffusion inside the domain");
            let init = Initial::Law(Law::Mixture(start));
            let out = integrate_sde(&drift, &b, &init, &grid, s.n, seed, s.keep)?;
            let (coarse, fine) = coupled_refinement(&drift, &b, &init, &grid, 2, s.n.min(2000), seed)?;
            let disc = 2.0 * mean_pair_distance(&coarse, &fine);
            let path = GaussianPath { target: target.clone(), sched };
            let stat = path.sample_at(t_end, s.n, rng::derive(seed, 1))?;
            if target.dim() == 1 {
                let law = MarginalContext::new(&target, &sched, t_end)?.marginal().clone();
                let clt = w1_to_mixture_1d(stat.as_flat(), &law);
                comparison_row(&mut cmp, "w1_to_exact_law", w1_to_mixture_1d(out.ends.as_flat(), &law), 3.0 * (clt + disc));
            } else {
                let other = path.sample_at(t_end, s.n, rng::derive(seed, 2))?;
                let clt = sliced_w1(&stat, &other, 64, seed);
                comparison_row(&mut cmp, "sliced_w1_to_static", sliced_w1(&out.ends, &stat, 64, seed), 3.0 * (clt + disc));
            }
            if !out.paths.is_empty() {
                let mut tr = Table::new(std::iter::once("trajectory".to_owned()).chain(["t".into()]).chain((0..target.dim()).map(|k| format!("x{k}"))));
                for (i, p) in out.paths.iter().enumerate() {
                    for (t, x) in p.times.iter().zip(p.states.rows()) {
                        tr.push([Cell::from(i), (*t).into()].into_iter().chain(x.iter().map(|&v| v.into())).collect());
                    }
                }
                art.table("trajectories", tr);
            }
            art.summary.push(format!("{} dropped trajectories", out.dropped.len()));
            art.table("end_states", points_table(&out.ends));
        }
        (_, other) => return Err(CliError::config(format!("sampler {other:?} needs `path.kind = \"mixture\"`"))),
    }
    art.violated = cmp.rows().iter().any(|r| r[3] == Cell::from(false));
    art.summary.push(cmp.to_text());
    art.table("comparison", cmp);
    Ok(art)
}

/// Mean Euclidean distance between paired rows.
pub fn mean_pair_distance(a: &Points, b: &Points) -> f64 {
    a.rows().zip(b.rows()).map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()).sum::<f64>() / a.len() as f64
}

// ---------------------------------------------------------------------------
// train

fn train(cfg: &ExperimentConfig) -> Result<Artifacts, CliError> {
    let target = cfg.target.mixture()?;
    let sched = cfg.path.gaussian()?;
    let section = &cfg.train;
    let grid = grid_for(cfg, target.dim())?;
    let data = target.sample(section.n, rng::derive(cfg.seed, 7));
    let tc = TrainConfig { seed: cfg.seed, ..section.config.clone() };
    let est = train_blockwise(&grid, section.loss, &data, &sched, &tc)?;
    let mut art = Artifacts::default();

    let mut curve = Table::new(["block", "step", "loss", "osl_penalty"]);
    for c in &est.curve {
        curve.push(vec![c.block.into(), c.step.into(), c.loss.into(), c.osl_penalty.into()]);
    }
    art.table("curve", curve);

    let mut blocks = Table::new(["block", "t_start", "t_end", "width", "depth", "certified_points", "max_lambda", "osl_bound", "violated"]);
    for (k, (net, c)) in est.nets.iter().zip(&est.certificates).enumerate() {
        let (a, b) = grid.block(k);
        let nb = net.bounds();
        blocks.push(vec![k.into(), a.into(), b.into(), nb.width.into(), nb.depth.into(), c.points.into(), c.max_lambda.into(), c.osl_bound.into(), c.violated.into()]);
        art.blobs.push((format!("block_{k:02}.ckpt"), net.to_bytes()));
    }
    art.table("blocks", blocks);

    let mut eval = Table::new(["t", "field", "l2_error"]);
    let path = GaussianPath { target: target.clone(), sched };
    let label = if section.loss.learns_score() { "score" } else { "drift" };
    for (j, &t) in section.eval_times.iter().filter(|&&t| t < grid.t_n).enumerate() {
        let ctx = MarginalContext::new(&target, &sched, t)?;
        let xs = path.sample_at(t, section.eval_points, rng::derive(cfg.seed, 100 + j as u64))?;
        let err = if section.loss.learns_score() {
            l2_error(&xs, |x, o| est.field(t, x, o), |x| ctx.score(x))
        } else {
            l2_error(&xs, |x, o| est.field(t, x, o), |x| ctx.exact_drift(x).expect("inside the domain"))
        };
        eval.push(vec![t.into(), label.into(), err.into()]);
    }
    art.summary.push(eval.to_text());
    art.table("eval", eval);
    art.reports.push((
        "grid".into(),
        json!({ "k_n": grid.k_n, "t_n": grid.t_n, "alpha_ratio": grid.alpha_ratio, "edges": grid.edges }),
    ));
    Ok(art)
}

// ---------------------------------------------------------------------------
// verify

fn verify(cfg: &ExperimentConfig) -> Result<Artifacts, CliError> {
    let mut art = Artifacts::default();
    let mut verdicts = Table::new(["check", "statistic", "lhs", "rhs", "slack", "se", "verdict"]);
    if cfg.verify.checks.is_empty() {
        for row in checks::property_suite(&cfg.target.mixture()?, &cfg.path.gaussian()?, cfg.seed)? {
            art.violated |= row.verdict().is_violated();
            verdicts.push(row.cells());
        }
    }
    let mut crit = Table::new(["criterion", "name", "passed", "summary"]);
    for &id in &cfg.verify.checks {
        let c = checks::run(id, cfg.seed)?;
        art.violated |= !c.passed;
        crit.push(vec![(id as usize).into(), c.name.into(), c.passed.into(), c.summary.clone().into()]);
        art.table(&format!("criterion_{id:02}"), c.table);
    }
    if !crit.is_empty() {
        art.summary.push(crit.to_text());
        art.table("criteria", crit);
    }
    if !verdicts.is_empty() {
        art.summary.push(verdicts.to_text());
        art.table("verdicts", verdicts);
    }
    Ok(art)
}

// ---------------------------------------------------------------------------
// rate

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateCell {
    pub n: usize,
    pub repetition: u64,
    pub k_n: usize,
    pub t_n: f64,
    pub steps: usize,
    pub w1: f64,
    pub data_w1: f64,
}

/// Quantile-stratified draws from a 1D law.
pub fn stratified_1d(law: &GaussianMixture, m: usize) -> Points {
    Points::from_scalars(&(0..m).map(|i| law.quantile_1d((i as f64 + 0.5) / m as f64)).collect::<Vec<_>>())
}

fn rate_cell(target: &GaussianMixture, sched: &GaussianSchedule, cfg: &RateConfig, seed: u64, n: usize, rep: u64) -> Result<RateCell, CliError> {
    let grid = TimeGrid::for_budget(n, 1.0, 1, &cfg.train.capacity)?;
    let cell_seed = rng::derive(seed, (n as u64) << 8 | rep);
    let data = target.sample(n, rng::derive(cell_seed, 0));
    let steps = if cfg.steps_per_sample > 0.0 { (n as f64 * cfg.steps_per_sample).ceil() as usize } else { cfg.train.steps };
    let tc = TrainConfig { seed: rng::derive(cell_seed, 1), steps, ..cfg.train.clone() };
    let est = train_blockwise(&grid, LossKind::GaussCgm, &data, sched, &tc)?;
    let mut times = grid.sampler_grid(cfg.steps_per_block);
    if sched.needs_positive_start() {
        times = floor_start(&times, START_FLOOR);
    }
    let start = MarginalContext::new(target, sched, times[0])?.marginal().clone();
    let init = Initial::Points(stratified_1d(&start, cfg.eval_points));
    let out = integrate_sde(&|t, x, o| est.drift(t, x, o), &|_| 0.0, &init, &times, cfg.eval_points, 0, 0)?;
    Ok(RateCell {
        n,
        repetition: rep,
        k_n: grid.k_n,
        t_n: grid.t_n,
        steps,
        w1: w1_to_mixture_1d(out.ends.as_flat(), target),
        data_w1: w1_to_mixture_1d(data.as_flat(), target),
    })
}

/// Blockwise GaussCGM training and probability-flow sampling for every
/// (budget, repetition); cells run in parallel and are reported in order.
pub fn rate_experiment(target: &GaussianMixture, sched: &GaussianSchedule, cfg: &RateConfig, seed: u64) -> Result<(Vec<RateCell>, RateFit), CliError> {
    if target.dim() != 1 {
        return Err(CliError::config("the rate experiment runs on one-dimensional targets"));
    }
    let jobs: Vec<(usize, u64)> = cfg.budgets.iter().flat_map(|&n| (0..cfg.repetitions).map(move |r| (n, r))).collect();
    let cells = jobs.par_iter().map(|&(n, r)| rate_cell(target, sched, cfg, seed, n, r)).collect::<Result<Vec<_>, _>>()?;
    let pts: Vec<(f64, f64)> = cells.iter().map(|c| (c.n as f64, c.w1)).collect();
    let fit = rate_slope(&pts, cfg.bootstrap, rng::derive(seed, 9))?;
    Ok((cells, fit))
}

pub fn rate_tables(cells: &[RateCell], fit: &RateFit) -> (Table, Table) {
    let mut t = Table::new(["n", "repetition", "k_n", "t_n", "steps_per_block", "w1", "data_w1"]);
    for c in cells {
        t.push(vec![c.n.into(), c.repetition.into(), c.k_n.into(), c.t_n.into(), c.steps.into(), c.w1.into(), c.data_w1.into()]);
    }
    let mut f = Table::new(["slope", "intercept", "ci_low", "ci_high", "budgets", "reference_slope"]);
    f.push(vec![fit.slope.into(), fit.intercept.into(), fit.ci_low.into(), fit.ci_high.into(), fit.budgets.into(), (-2.0 / 3.0).into()]);
    (t, f)
}

fn rate(cfg: &ExperimentConfig) -> Result<Artifacts, CliError> {
    let target = cfg.target.mixture()?;
    let sched = cfg.path.gaussian()?;
    let (cells, fit) = rate_experiment(&target, &sched, &cfg.rate, cfg.seed)?;
    let (t, f) = rate_tables(&cells, &fit);
    let mut art = Artifacts::default();
    art.summary.push(f.to_text());
    art.table("rate_cells", t);
    art.table("rate_fit", f);
    art.reports.push(("rate_fit".into(), serde_json::to_value(fit)?));
    Ok(art)
}

// ---------------------------------------------------------------------------
// discretization

/// End-state W1 of the exact-drift flow for each step count, measured
/// against the exact flow map applied to the same stratified starts.
pub fn discretization_sweep(target: &GaussianMixture, sched: &GaussianSchedule, cfg: &DiscretizationConfig) -> Result<(Table, f64), CliError> {
    if target.dim() != 1 || target.n_components() != 1 {
        return Err(CliError::config("the discretization sweep needs a single one-dimensional Gaussian target"));
    }
    let flow = sched.with_diffusion(markovgen_core::schedules::Diffusion::Zero);
    let (m, v) = (target.means()[0][0], target.variances()[0]);
    let mut t = Table::new(["steps", "w1"]);
    let mut pts = Vec::new();
    for &n_steps in &cfg.total_steps {
        if n_steps % cfg.blocks != 0 {
            return Err(CliError::config(format!("total step count {n_steps} is not a multiple of {} blocks", cfg.blocks)));
        }
        let mut grid = geometric_grid(cfg.blocks, cfg.t_end, n_steps / cfg.blocks)?;
        if flow.needs_positive_start() {
            grid = floor_start(&grid, START_FLOOR);
        }
        let (t0, t1) = (grid[0], *grid.last().expect("nonempty grid"));
        let law0 = MarginalContext::new(target, &flow, t0)?.marginal().clone();
        let starts = stratified_1d(&law0, cfg.n);
        let out = integrate_sde(&exact_drift_fn(target, &flow), &|_| 0.0, &Initial::Points(starts.clone()), &grid, cfg.n, 0, 0)?;
        // the exact flow map is affine: x ↦ m_1 + (s_1/s_0)(x − m_0)
        let (p0, p1) = (flow.path(t0)?, flow.path(t1)?);
        let (s0, s1) = ((p0.alpha * p0.alpha * v + p0.sigma * p0.sigma).sqrt(), (p1.alpha * p1.alpha * v + p1.sigma * p1.sigma).sqrt());
        let exact: Vec<f64> = starts.as_flat().iter().map(|x| p1.alpha * m + s1 / s0 * (x - p0.alpha * m)).collect();
        let w = w1_1d(out.ends.as_flat(), &exact);
        t.push(vec![n_steps.into(), w.into()]);
        pts.push(((n_steps as f64).ln(), w.ln()));
    }
    Ok((t, ols_slope(&pts)))
}

pub fn ols_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

fn discretization(cfg: &ExperimentConfig) -> Result<Artifacts, CliError> {
    let (t, slope) = discretization_sweep(&cfg.target.mixture()?, &cfg.path.gaussian()?, &cfg.discretization)?;
    let mut art = Artifacts::default();
    let mut f = Table::new(["slope"]);
    f.push(vec![slope.into()]);
    art.summary.push(t.to_text());
    art.summary.push(format!("log-log slope {slope}"));
    art.table("discretization", t);
    art.table("discretization_fit", f);
    Ok(art)
}

// ---------------------------------------------------------------------------
// ou-figures

pub fn ou_figures(cfg: &OuConfig, seed: u64) -> Result<Artifacts, CliError> {
    let p = OuParams::constant(cfg.lambda, cfg.sigma, cfg.horizon)?;
    let start = Initial::Point(vec![cfg.start]);
    let mut art = Artifacts::default();

    let (_, paths) = ou_euler(&p, &start, cfg.horizon, cfg.dt, cfg.trajectories, rng::derive(seed, 1), cfg.trajectories)?;
    let stride = ((cfg.horizon / cfg.dt / 500.0).round() as usize).max(1);
    let mut tr = Table::new(["trajectory", "tau", "y"]);
    for (i, path) in paths.iter().enumerate() {
        let last = path.times.len() - 1;
        for (k, (tau, y)) in path.times.iter().zip(path.states.as_flat()).enumerate() {
            if k % stride == 0 || k == last {
                tr.push(vec![i.into(), (*tau).into(), (*y).into()]);
            }
        }
    }
    art.table("trajectories", tr);

    let draws = ou_exact_sample(&p, &start, cfg.horizon, cfg.draws, rng::derive(seed, 2))?;
    let (decay, var) = p.transition(cfg.horizon);
    let mean = cfg.start * decay;
    let sd = var.sqrt();
    let (lo, hi) = (mean - 5.0 * sd, mean + 5.0 * sd);
    let width = (hi - lo) / cfg.bins as f64;
    let mut counts = vec![0usize; cfg.bins];
    for &y in draws.as_flat() {
        let k = ((y - lo) / width).floor();
        if k >= 0.0 && (k as usize) < cfg.bins {
            counts[k as usize] += 1;
        }
    }
    let mut hist = Table::new(["bin_left", "bin_right", "count", "density", "normal_density"]);
    for (k, &c) in counts.iter().enumerate() {
        let (a, b) = (lo + k as f64 * width, lo + (k + 1) as f64 * width);
        let mid = 0.5 * (a + b);
        hist.push(vec![a.into(), b.into(), c.into(), (c as f64 / (cfg.draws as f64 * width)).into(), (normal_pdf((mid - mean) / sd) / sd).into()]);
    }
    art.table("histogram", hist);

    let ys = draws.as_flat();
    let m = ys.iter().sum::<f64>() / ys.len() as f64;
    let v = ys.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / (ys.len() as f64 - 1.0).max(1.0);
    let mut s = Table::new(["quantity", "empirical", "exact"]);
    s.push(vec!["mean".into(), m.into(), mean.into()]);
    s.push(vec!["variance".into(), v.into(), var.into()]);
    s.push(vec!["stationary_variance".into(), v.into(), (cfg.sigma * cfg.sigma / cfg.lambda).into()]);
    art.summary.push(s.to_text());
    art.table("moments", s);
    Ok(art)
}
