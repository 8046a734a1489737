use mudemod_core::aligner::{Aligner, AlignerConfig};
use mudemod_core::cplx::{CMatrix, C64};
use mudemod_core::diffusion::NoiseSchedule;
use mudemod_core::distill::Student;
use mudemod_core::dit::{DitConfig, WirelessDit};
use mudemod_core::metrics::ber;
use mudemod_core::pipeline::{
    channel_strength, demodulate, demodulate_baseline, demodulate_batch, greedy_group, rank_users, sic_residual, Baseline,
    Models, PipelineConfig, Refiner,
};
use mudemod_core::sysmodel::{complex_normal, draw_sample, sample_rng, ChannelModel, DemodSample, Modulation, SystemConfig};
use proptest::prelude::*;

const NO_MODELS: Models<'static> = Models { aligner: None, refiner: Refiner::None };

fn samples(cfg: &SystemConfig, n: usize, seed: u64) -> Vec<DemodSample> {
    (0..n).map(|i| draw_sample(cfg, ChannelModel::IidRayleigh, &mut sample_rng(seed, i as u64)).unwrap()).collect()
}

fn matvec(h: &CMatrix, x: &[C64]) -> Vec<C64> {
    (0..h.nrows()).map(|r| (0..h.ncols()).map(|c| h[(r, c)] * x[c]).sum()).collect()
}

#[test]
fn single_user_matches_lmmse_decisions() {
    let sched = NoiseSchedule::default();
    let cfg = SystemConfig::uniform(1, 2, 6, Modulation::Qpsk, 3.0, 0.0);
    for s in samples(&cfg, 40, 1) {
        let out = demodulate(&s, &NO_MODELS, &sched, &PipelineConfig { threshold: 6, buffer: None }).unwrap();
        assert_eq!(out.plan.groups, vec![vec![0]]);
        assert_eq!(out.residuals, vec![s.y.clone()]);
        assert_eq!(out.bits, demodulate_baseline(&s, Baseline::Lmmse).unwrap().bits);
    }
}

#[test]
fn one_group_without_networks_keeps_psk_decisions() {
    let sched = NoiseSchedule::default();
    let cfg = SystemConfig::uniform(3, 1, 8, Modulation::Psk8, 6.0, 0.0);
    for s in samples(&cfg, 30, 2) {
        let out = demodulate(&s, &NO_MODELS, &sched, &PipelineConfig { threshold: 8, buffer: None }).unwrap();
        assert_eq!(out.plan.groups.len(), 1);
        assert_eq!(out.bits, demodulate_baseline(&s, Baseline::Lmmse).unwrap().bits);
    }
}

#[test]
fn later_groups_see_the_cancelled_residual() {
    let sched = NoiseSchedule::default();
    let cfg = SystemConfig::uniform(4, 1, 8, Modulation::Qpsk, 10.0, 0.01);
    for s in samples(&cfg, 10, 3) {
        let out = demodulate(&s, &NO_MODELS, &sched, &PipelineConfig { threshold: 2, buffer: None }).unwrap();
        assert_eq!(out.plan.groups.len(), 2);
        assert_eq!(out.residuals.len(), 2);
        let mut want = s.y.clone();
        for &u in &out.plan.groups[0] {
            for (w, v) in want.iter_mut().zip(matvec(&s.estimates.h_hat[u], &out.symbols[u])) {
                *w -= v;
            }
        }
        let err = want.iter().zip(&out.residuals[1]).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-10);
    }
}

#[test]
fn high_snr_with_perfect_csi_is_error_free() {
    let sched = NoiseSchedule::default();
    let cfg = SystemConfig::uniform(4, 1, 8, Modulation::Qpsk, 30.0, 0.0);
    let data = samples(&cfg, 60, 4);
    let refs: Vec<&DemodSample> = data.iter().collect();
    let out = demodulate_batch(&refs, &NO_MODELS, &sched, &PipelineConfig { threshold: 4, buffer: None }).unwrap();
    for (r, s) in out.iter().zip(&data) {
        assert_eq!(ber(&r.bits, &s.bits).unwrap(), 0.0);
    }
}

#[test]
fn networks_run_inside_the_pipeline() {
    let sched = NoiseSchedule::default();
    let (aligner, a_params) = Aligner::init(AlignerConfig { depth: 1, width: 16, heads: 2, timesteps: 1000 }, 1).unwrap();
    let dit_cfg = DitConfig { depth: 1, width: 16, heads: 2, patch: (2, 2), timesteps: 1000 };
    let (dit, d_params) = WirelessDit::init(dit_cfg, 2).unwrap();
    let student = Student::new(dit.clone(), d_params.clone());
    let cfg = SystemConfig { tx_antennas: vec![1, 2, 1], ..SystemConfig::uniform(3, 1, 6, Modulation::Qam16, 5.0, 0.01) };
    let data = samples(&cfg, 6, 5);
    let refs: Vec<&DemodSample> = data.iter().collect();
    let pcfg = PipelineConfig { threshold: 3, buffer: None };
    let refiners = [Refiner::Student(&student), Refiner::Teacher { model: &dit, params: &d_params, steps: 4 }, Refiner::None];
    for refiner in refiners {
        let models = Models { aligner: Some((&aligner, &a_params)), refiner };
        student.reset_calls();
        let batch = demodulate_batch(&refs, &models, &sched, &pcfg).unwrap();
        if matches!(refiner, Refiner::Student(_)) {
            let depth = batch.iter().map(|r| r.plan.groups.len()).max().unwrap();
            assert_eq!(student.network_calls(), depth, "one student call per group index over the batch");
        }
        for (r, s) in batch.iter().zip(&data) {
            assert_eq!(r.bits.iter().map(Vec::len).collect::<Vec<_>>(), s.bits.iter().map(Vec::len).collect::<Vec<_>>());
            assert!(r.symbols.iter().flatten().all(|z| z.re.is_finite() && z.im.is_finite()));
            assert!(r.source_steps.iter().all(|&t| t < 1000));
            let single = demodulate(s, &models, &sched, &pcfg).unwrap();
            assert_eq!(single.plan, r.plan);
        }
    }
}

#[test]
fn bad_threshold_is_rejected() {
    let sched = NoiseSchedule::default();
    let cfg = SystemConfig::uniform(2, 1, 4, Modulation::Qpsk, 5.0, 0.0);
    let s = &samples(&cfg, 1, 6)[0];
    assert!(demodulate(s, &NO_MODELS, &sched, &PipelineConfig { threshold: 0, buffer: None }).is_err());
}

#[test]
fn baselines_return_one_bit_vector_per_user() {
    let cfg = SystemConfig { tx_antennas: vec![2, 1, 3], ..SystemConfig::uniform(3, 1, 8, Modulation::Qam64, 8.0, 0.0) };
    for s in samples(&cfg, 5, 7) {
        for method in [Baseline::Ls, Baseline::Lmmse] {
            let r = demodulate_baseline(&s, method).unwrap();
            assert_eq!(r.bits.len(), 3);
            for (b, t) in r.bits.iter().zip(&s.bits) {
                assert_eq!(b.len(), t.len());
            }
        }
    }
    let wide = SystemConfig::uniform(3, 2, 4, Modulation::Qpsk, 8.0, 0.0);
    let s = &samples(&wide, 1, 8)[0];
    assert!(demodulate_baseline(s, Baseline::Ls).is_err());
    assert!(demodulate_baseline(s, Baseline::Lmmse).is_ok());
}

#[test]
fn lmmse_beats_ls_at_low_snr() {
    let cfg = SystemConfig::uniform(2, 1, 4, Modulation::Qpsk, 0.0, 0.0);
    let (mut ls, mut lmmse) = (0.0, 0.0);
    for s in samples(&cfg, 1500, 9) {
        ls += ber(&demodulate_baseline(&s, Baseline::Ls).unwrap().bits, &s.bits).unwrap();
        lmmse += ber(&demodulate_baseline(&s, Baseline::Lmmse).unwrap().bits, &s.bits).unwrap();
    }
    assert!(lmmse <= ls, "LMMSE {lmmse} vs LS {ls}");
}

fn random_channel(seed: u64, nr: usize, nt: usize) -> CMatrix {
    let mut rng = sample_rng(seed, 0);
    CMatrix::from_fn(nr, nt, |_, _| complex_normal(&mut rng, 1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn plans_partition_and_respect_bounds(
        nts in prop::collection::vec(1usize..=4, 1..=8),
        strengths in prop::collection::vec(0.0f64..4.0, 8),
        nr in 1usize..=16,
        div in prop::sample::select(vec![1usize, 2, 4]),
    ) {
        let threshold = (nr / div).max(1);
        let strengths = &strengths[..nts.len()];
        let order = rank_users(strengths);
        let plan = greedy_group(&order, &nts, threshold).unwrap();
        let mut seen: Vec<usize> = plan.order().collect();
        prop_assert_eq!(&seen, &order);
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..nts.len()).collect::<Vec<_>>());
        for g in &plan.groups {
            prop_assert!(!g.is_empty());
            let load: usize = g.iter().map(|&u| nts[u]).sum();
            prop_assert!(load <= threshold || (g.len() == 1 && plan.oversize.contains(&g[0])));
        }
        let flat: Vec<f64> = plan.order().map(|u| strengths[u]).collect();
        prop_assert!(flat.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn genie_cancellation_leaves_the_noise(nts in prop::collection::vec(1usize..=4, 1..=6), nr in 1usize..12, seed in any::<u64>()) {
        let mut rng = sample_rng(seed, 1);
        let h: Vec<CMatrix> = nts.iter().enumerate().map(|(u, &nt)| random_channel(seed ^ u as u64, nr, nt)).collect();
        let x: Vec<Vec<C64>> = nts.iter().map(|&nt| (0..nt).map(|_| complex_normal(&mut rng, 1.0)).collect()).collect();
        let n: Vec<C64> = (0..nr).map(|_| complex_normal(&mut rng, 0.1)).collect();
        let mut y = n.clone();
        for (hu, xu) in h.iter().zip(&x) {
            for (r, v) in matvec(hu, xu).into_iter().enumerate() {
                y[r] += v;
            }
        }
        let processed: Vec<(&CMatrix, &[C64])> = h.iter().zip(&x).map(|(a, b)| (a, b.as_slice())).collect();
        let r = sic_residual(&y, &processed).unwrap();
        let err = r.iter().zip(&n).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        prop_assert!(err < 1e-10);
        prop_assert_eq!(sic_residual(&y, &[]).unwrap(), y);
    }

    #[test]
    fn strength_is_two_homogeneous(nr in 1usize..6, nt in 1usize..4, re in -3.0f64..3.0, im in -3.0f64..3.0, seed in any::<u64>()) {
        let h = random_channel(seed, nr, nt);
        let c = C64::new(re, im);
        let scaled = channel_strength(&(h.clone() * c));
        prop_assert!((scaled - c.norm_sqr() * channel_strength(&h)).abs() < 1e-9 * (1.0 + scaled));
    }
}
