//! End-to-end paths through the public API: oracle drift into a sampler
//! into a metric, and training into a checkpoint and back.

use markovgen_core::metrics::{w1_1d, w1_to_mixture_1d};
use markovgen_core::nets::ConstrainedNet;
use markovgen_core::oracles::MarginalContext;
use markovgen_core::samplers::{integrate_sde, Initial};
use markovgen_core::schedules::{anchored_ratio, build_time_grid, CapacityConstants, GaussianSchedule, TimeGrid};
use markovgen_core::special::normal_quantile;
use markovgen_core::targets::GaussianMixture;
use markovgen_core::training::{train_blockwise, LossKind, TrainConfig};
use markovgen_core::Points;

fn stratified_normal(m: usize) -> Points {
    Points::from_scalars(&(0..m).map(|i| normal_quantile((i as f64 + 0.5) / m as f64)).collect::<Vec<_>>())
}

#[test]
fn exact_flow_transports_standard_normal_to_the_target_marginal() {
    let target = GaussianMixture::gaussian(vec![1.0], 0.5).unwrap();
    let sched = GaussianSchedule::vanilla_fm();
    let t_end = 0.95;
    let g = build_time_grid(anchored_ratio(10, t_end), 10, t_end, 1000, 1.0, 1, &CapacityConstants::default()).unwrap();
    let times = g.sampler_grid(40);
    let drift = |t: f64, x: &[f64], o: &mut [f64]| {
        let a = MarginalContext::new(&target, &sched, t).unwrap().exact_drift(x).unwrap();
        o.copy_from_slice(&a);
    };
    let init = Initial::Points(stratified_normal(2000));
    let out = integrate_sde(&drift, &|_| 0.0, &init, &times, 2000, 0, 0).unwrap();
    assert!(out.dropped.is_empty());

    // N(m, v) under the vanilla path: x ↦ t m + s_t x with s_t² = t² v + (1 − t)²
    let s = (t_end * t_end * 0.5 + (1.0 - t_end) * (1.0 - t_end)).sqrt();
    let exact: Vec<f64> = stratified_normal(2000).as_flat().iter().map(|z| t_end + s * z).collect();
    assert!(w1_1d(out.ends.as_flat(), &exact) < 5e-3);
    let law = MarginalContext::new(&target, &sched, t_end).unwrap().marginal().clone();
    assert!(w1_to_mixture_1d(out.ends.as_flat(), &law) < 1e-2);
}

#[test]
fn trained_blocks_survive_a_checkpoint_round_trip() {
    let target = GaussianMixture::gaussian(vec![0.0], 1.0).unwrap();
    let consts = CapacityConstants { max_width: 8, ..CapacityConstants::default() };
    let grid = TimeGrid::for_budget(256, 1.0, 1, &consts).unwrap();
    let data = target.sample(256, 4);
    let cfg = TrainConfig { steps: 30, certify_points: 20, capacity: consts, ..TrainConfig::tuned() };
    let est = train_blockwise(&grid, LossKind::GaussCgm, &data, &GaussianSchedule::vanilla_fm(), &cfg).unwrap();
    assert_eq!(est.nets.len(), grid.k_n);
    let dir = tempfile::tempdir().unwrap();
    for (k, net) in est.nets.iter().enumerate() {
        let p = dir.path().join(format!("block_{k}.ckpt"));
        net.save(&p).unwrap();
        let back = ConstrainedNet::load(&p).unwrap();
        assert_eq!(back.params(), net.params());
        for x in [-1.0, 0.0, 2.0] {
            assert_eq!(back.forward(0.3, &[x]), net.forward(0.3, &[x]));
        }
    }
}
