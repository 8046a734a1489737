use mudemod_core::cplx::{CMatrix, C64};
use mudemod_core::diffusion::NoiseSchedule;
use mudemod_core::distill::{
    adaptive_weight, consistency_loss, distill_run, energy_ratio, self_consistency_gap, student_single_step, DistillConfig,
    LossWeighting, Student,
};
use mudemod_core::dit::{ConditionSet, DitConfig, WirelessDit};
use mudemod_core::sysmodel::{draw_sample, sample_rng, ChannelModel, DemodSample, Modulation, SystemConfig};
use mudemod_core::Error;
use mudemod_nn::ParamStore;
use proptest::prelude::*;

fn toy_dit() -> DitConfig {
    DitConfig { depth: 1, width: 16, heads: 2, patch: (2, 2), timesteps: 1000 }
}

fn toy_data(n: usize, seed: u64) -> Vec<DemodSample> {
    let cfg = SystemConfig::uniform(2, 1, 4, Modulation::Qpsk, 5.0, 0.01);
    (0..n).map(|i| draw_sample(&cfg, ChannelModel::IidRayleigh, &mut sample_rng(seed, i as u64)).unwrap()).collect()
}

fn quick(epochs: usize, batch: usize, mu: f64, weighting: LossWeighting) -> DistillConfig {
    DistillConfig {
        epochs,
        batch_size: batch,
        learning_rate: 0.001,
        mu,
        weighting,
        grid_points: 6,
        max_timestep: Some(300),
        seed: 3,
        ..DistillConfig::default()
    }
}

fn scaled_channel(scale: f64) -> Vec<CMatrix> {
    vec![
        CMatrix::from_fn(3, 1, |r, _| C64::new(scale * (1.0 + r as f64), 0.5 * scale)),
        CMatrix::from_fn(3, 2, |r, c| C64::new(-0.3 * scale, scale * (r + c) as f64)),
    ]
}

#[test]
fn target_is_frozen_when_mu_is_one() {
    let sched = NoiseSchedule::default();
    let (teacher, params) = WirelessDit::init(toy_dit(), 1).unwrap();
    let data = toy_data(8, 1);
    let (target, report) = distill_run(&teacher, &params, &data, &sched, &quick(2, 4, 1.0, LossWeighting::Adaptive), |_, _| {}).unwrap();
    assert_eq!(report.train.epoch_loss.len(), 2);
    assert_eq!(target, params);
}

#[test]
fn ema_step_is_exact() {
    let sched = NoiseSchedule::default();
    let (teacher, params) = WirelessDit::init(toy_dit(), 2).unwrap();
    let data = toy_data(4, 2);
    let run = |mu| distill_run(&teacher, &params, &data, &sched, &quick(1, 4, mu, LossWeighting::Fixed(0.0)), |_, _| {}).unwrap().0;
    let online = run(0.0);
    assert_ne!(online, params, "one optimiser step must move the student");
    let mu = 0.3;
    let mut want = params.clone();
    want.ema_update(&online, mu);
    assert_eq!(run(mu), want);

    for (e, (a, b)) in want.entries().iter().zip(params.entries().iter().zip(online.entries())) {
        for (w, (x, y)) in e.value.data.iter().zip(a.value.data.iter().zip(&b.value.data)) {
            assert_eq!(*w, mu * x + (1.0 - mu) * y);
        }
    }
}

#[test]
fn both_loss_extremes_train() {
    let sched = NoiseSchedule::default();
    let (teacher, params) = WirelessDit::init(toy_dit(), 3).unwrap();
    let data = toy_data(12, 3);
    for weighting in [LossWeighting::Fixed(0.0), LossWeighting::Fixed(1.0), LossWeighting::Adaptive] {
        let (target, report) = distill_run(&teacher, &params, &data, &sched, &quick(2, 4, 0.2, weighting), |_, _| {}).unwrap();
        assert!(report.train.epoch_loss.iter().all(|l| l.is_finite()), "{weighting:?}");
        assert!(target.all_finite());
        assert_eq!(report.grid.first(), Some(&1));
        assert!(report.grid.windows(2).all(|w| w[0] < w[1]));
        assert!(*report.grid.last().unwrap() <= 300);
    }
}

#[test]
fn median_midpoint_is_reported() {
    let sched = NoiseSchedule::default();
    let (teacher, params) = WirelessDit::init(toy_dit(), 4).unwrap();
    let data = toy_data(5, 4);
    let mut ratios: Vec<f64> = data.iter().map(|s| energy_ratio(&s.estimates.h_hat, s.sigma_n_sq)).collect();
    ratios.sort_by(f64::total_cmp);
    let (_, report) = distill_run(&teacher, &params, &data, &sched, &quick(1, 5, 0.2, LossWeighting::Adaptive), |_, _| {}).unwrap();
    assert_eq!(report.s0, ratios[2]);
    let fixed = DistillConfig { s0: Some(7.5), ..quick(1, 5, 0.2, LossWeighting::Adaptive) };
    let (_, report) = distill_run(&teacher, &params, &data, &sched, &fixed, |_, _| {}).unwrap();
    assert_eq!(report.s0, 7.5);
}

#[test]
fn invalid_runs_are_rejected() {
    let sched = NoiseSchedule::default();
    let (teacher, params) = WirelessDit::init(toy_dit(), 5).unwrap();
    let data = toy_data(2, 5);
    let base = quick(1, 2, 0.2, LossWeighting::Adaptive);
    assert!(matches!(distill_run(&teacher, &params, &[], &sched, &base, |_, _| {}), Err(Error::Usage(_))));
    for bad in [
        DistillConfig { mu: 1.5, ..base.clone() },
        DistillConfig { k0: 0.0, ..base.clone() },
        DistillConfig { lambda: Some(vec![1.0; 2]), ..base.clone() },
        DistillConfig { weighting: LossWeighting::Fixed(-0.1), ..base.clone() },
    ] {
        assert!(matches!(distill_run(&teacher, &params, &data, &sched, &bad, |_, _| {}), Err(Error::Config(_))));
    }
}

#[test]
fn student_runs_the_network_once_per_batch() {
    let sched = NoiseSchedule::default();
    let (model, params) = WirelessDit::init(toy_dit(), 6).unwrap();
    let student = Student::new(model, params);
    let data = toy_data(5, 6);
    let conds: Vec<ConditionSet> = data.iter().map(|s| ConditionSet::from_sample(s, 90)).collect();
    let refs: Vec<&ConditionSet> = conds.iter().collect();
    let x: Vec<Vec<C64>> = data.iter().map(|s| s.x.concat()).collect();
    let out = student_single_step(&x, &refs, &student, &sched).unwrap();
    assert_eq!(student.network_calls(), 1);
    assert_eq!(out.len(), 5);
    assert!(out.iter().zip(&x).all(|(o, i)| o.len() == i.len()));
    student.reset_calls();
    assert_eq!(student.network_calls(), 0);
    assert!(student_single_step(&[], &[], &student, &sched).unwrap().is_empty());
    assert_eq!(student.network_calls(), 0);
}

#[test]
fn self_consistency_improves_with_training() {
    let sched = NoiseSchedule::default();
    let (teacher, mut params) = WirelessDit::init(toy_dit(), 7).unwrap();
    let mut rng = sample_rng(0, 99);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for v in &mut params.get_mut(id).data {
            *v += 0.05 * rand::Rng::random_range(&mut rng, -1.0..1.0);
        }
    }
    let train = toy_data(64, 7);
    let held = toy_data(32, 8);
    let gap = |p: &ParamStore| self_consistency_gap(&teacher, p, &held, &sched, 40, 200, 11).unwrap();
    let before = gap(&params);
    let cfg = DistillConfig { learning_rate: 0.002, ..quick(6, 8, 0.2, LossWeighting::Adaptive) };
    let (target, _) = distill_run(&teacher, &params, &train, &sched, &cfg, |_, _| {}).unwrap();
    let after = gap(&target);
    assert!(after < before, "gap {before} -> {after}");
}

#[test]
fn weight_midpoint_and_limits() {
    let h = scaled_channel(1.0);
    let r = energy_ratio(&h, 0.4);
    assert_eq!(adaptive_weight(&h, 0.4, 0.1, r), 0.5);
    assert!(adaptive_weight(&h, 1e12, 0.1, r) < 0.5);
    assert_eq!(adaptive_weight(&h, 0.0, 0.1, r), 1.0);
    let direct = 1.0 / (1.0 + (-(0.7 * (r - 2.0))).exp());
    assert!((adaptive_weight(&h, 0.4, 0.7, 2.0) - direct).abs() < 1e-15);
}

proptest! {
    #[test]
    fn weight_is_bounded_and_increasing(a in 0.1f64..3.0, b in 0.1f64..3.0, noise in 0.05f64..2.0, k0 in 0.01f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(hi - lo > 1e-6);
        let s0 = energy_ratio(&scaled_channel(1.5), noise);
        let arg = |x: f64| k0 * (energy_ratio(&scaled_channel(x), noise) - s0);
        prop_assume!(arg(lo) > -30.0 && arg(hi) < 30.0);
        let wl = adaptive_weight(&scaled_channel(lo), noise, k0, s0);
        let wh = adaptive_weight(&scaled_channel(hi), noise, k0, s0);
        prop_assert!(wl > 0.0 && wh < 1.0);
        prop_assert!(wl < wh);
    }

    #[test]
    fn consistency_scales_with_lambda(v in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..10), lambda in 0.0f64..5.0) {
        let a: Vec<C64> = v.iter().map(|&(r, i)| C64::new(r, i)).collect();
        let b = vec![C64::new(0.0, 0.0); a.len()];
        let norm = a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        prop_assert!((consistency_loss(&a, &b, lambda).unwrap() - lambda * norm).abs() < 1e-12);
        prop_assert_eq!(consistency_loss(&a, &b, 1.0).unwrap(), consistency_loss(&b, &a, 1.0).unwrap());
    }
}
