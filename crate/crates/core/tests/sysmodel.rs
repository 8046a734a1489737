use mudemod_core::cplx::{CMatrix, C64};
use mudemod_core::sysmodel::dataset::{load_external_channels, read_dataset, write_channels, write_dataset, ArrayShape, GenerationInfo};
use mudemod_core::sysmodel::{
    add_estimation_error, draw_sample, gen_channels, hard_demap, modulate, sample_rng, synthesize_sample, ChannelModel,
    ChannelSet, Constellation, Modulation, SystemConfig,
};
use mudemod_core::Error;
use proptest::prelude::*;

fn hamming(a: usize, b: usize) -> u32 {
    (a ^ b).count_ones()
}

#[test]
fn constellations_have_unit_power() {
    for m in Modulation::ALL {
        let c = Constellation::new(m);
        assert_eq!(c.len(), 1 << c.bits_per_symbol);
        let p = c.points.iter().map(|z| z.norm_sqr()).sum::<f64>() / c.len() as f64;
        assert!((p - 1.0).abs() < 1e-12, "{m}: mean power {p}");
    }
}

#[test]
fn nearest_neighbours_differ_in_one_bit() {
    for m in Modulation::ALL {
        let c = Constellation::new(m);
        let dmin = c.min_distance();
        for (i, a) in c.points.iter().enumerate() {
            for (k, b) in c.points.iter().enumerate() {
                if i != k && ((a - b).norm() - dmin).abs() < 1e-9 {
                    assert_eq!(hamming(i, k), 1, "{m}: points {i} and {k}");
                }
            }
        }
    }
}

fn modulation() -> impl Strategy<Value = Modulation> {
    prop::sample::select(Modulation::ALL.to_vec())
}

proptest! {
    #[test]
    fn bits_round_trip(m in modulation(), seed in any::<u64>(), symbols in 1usize..20) {
        let c = Constellation::new(m);
        let mut rng = sample_rng(seed, 0);
        let bits: Vec<u8> = (0..symbols * c.bits_per_symbol).map(|_| rand::Rng::random_range(&mut rng, 0..2u8)).collect();
        let x = modulate(&bits, &c).unwrap();
        let (sym, back) = hard_demap(&x, &c).unwrap();
        prop_assert_eq!(back, bits);
        prop_assert_eq!(sym, x);
    }

    #[test]
    fn small_perturbations_stay_on_their_point(m in modulation(), idx in 0usize..64, r in 0.0f64..0.499, phase in 0.0f64..6.283) {
        let c = Constellation::new(m);
        let i = idx % c.len();
        let z = c.points[i] + C64::from_polar(r * c.min_distance(), phase);
        let brute = (0..c.len())
            .min_by(|&a, &b| (z - c.points[a]).norm().partial_cmp(&(z - c.points[b]).norm()).unwrap())
            .unwrap();
        let (sym, _) = hard_demap(&[z], &c).unwrap();
        prop_assert_eq!(brute, i);
        prop_assert_eq!(sym[0], c.points[i]);
    }
}

#[test]
fn iid_rayleigh_moments() {
    let cfg = SystemConfig::uniform(1, 10, 100, Modulation::Qpsk, 0.0, 0.0);
    let mut rng = sample_rng(11, 0);
    let mut vals = Vec::new();
    while vals.len() < 100_000 {
        let h = gen_channels(&cfg, ChannelModel::IidRayleigh, &mut rng).unwrap();
        vals.extend(h.h[0].iter().copied());
    }
    let n = vals.len() as f64;
    let mean: C64 = vals.iter().sum::<C64>() / n;
    let var = vals.iter().map(|v| (v - mean).norm_sqr()).sum::<f64>() / n;
    assert!(mean.norm() < 0.02, "mean {mean}");
    assert!((var - 1.0).abs() < 0.02, "variance {var}");
}

#[test]
fn estimation_error_matches_frobenius_mse() {
    let cfg = SystemConfig::uniform(1, 2, 8, Modulation::Qpsk, 0.0, 0.1);
    let mut rng = sample_rng(12, 0);
    let draws = 10_000;
    let mut total = 0.0;
    for _ in 0..draws {
        let h = gen_channels(&cfg, ChannelModel::IidRayleigh, &mut rng).unwrap();
        let e = add_estimation_error(&h, &[0.1], &mut rng).unwrap();
        total += (&e.h_hat[0] - &h.h[0]).iter().map(|v| v.norm_sqr()).sum::<f64>();
    }
    let mse = total / draws as f64;
    assert!((mse / 0.1 - 1.0).abs() < 0.03, "mse {mse}");
    assert!(matches!(add_estimation_error(&ChannelSet { h: vec![CMatrix::zeros(1, 1)] }, &[-0.1], &mut rng), Err(Error::Config(_))));
}

#[test]
fn residual_variance_matches_noise_power() {
    let cfg = SystemConfig::uniform(2, 1, 1, Modulation::Qam16, 3.0, 0.0);
    let mut rng = sample_rng(13, 0);
    let mut total = 0.0;
    let n = 10_000;
    for _ in 0..n {
        let s = draw_sample(&cfg, ChannelModel::IidRayleigh, &mut rng).unwrap();
        total += (s.y[0] - s.clean_signal()[0]).norm_sqr();
    }
    let var = total / n as f64;
    assert!((var / cfg.noise_variance() - 1.0).abs() < 0.03, "residual variance {var}");
}

#[test]
fn empirical_snr_is_calibrated() {
    for (snr, model) in [(0.0, ChannelModel::IidRayleigh), (7.0, ChannelModel::ExpCorrelated { rho: 0.6 })] {
        let cfg = SystemConfig {
            users: 2,
            tx_antennas: vec![1, 2],
            rx_antennas: 4,
            constellation: Modulation::Qpsk,
            snr_db: snr,
            sigma_h_sq: vec![0.0, 0.0],
            seed: 0,
        };
        let (mut sig, mut noise) = (0.0, 0.0);
        for i in 0..100_000 {
            let s = draw_sample(&cfg, model, &mut sample_rng(14, i)).unwrap();
            let clean = s.clean_signal();
            sig += clean.iter().map(|v| v.norm_sqr()).sum::<f64>();
            noise += s.y.iter().zip(&clean).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>();
        }
        let measured = 10.0 * (sig / noise).log10();
        assert!((measured - snr).abs() < 0.2, "target {snr} dB, measured {measured:.3} dB");
    }
}

#[test]
fn noiseless_limit_is_exact() {
    let cfg = SystemConfig::uniform(3, 2, 6, Modulation::Psk8, 400.0, 0.0);
    let s = draw_sample(&cfg, ChannelModel::IidRayleigh, &mut sample_rng(15, 0)).unwrap();
    for (a, b) in s.y.iter().zip(s.clean_signal()) {
        assert!((a - b).norm() < 1e-12);
    }
}

#[test]
fn synthesis_rejects_mismatched_channels() {
    let cfg = SystemConfig::uniform(2, 1, 4, Modulation::Qpsk, 0.0, 0.0);
    let h = ChannelSet { h: vec![CMatrix::zeros(4, 1), CMatrix::zeros(3, 1)] };
    let e = add_estimation_error(&h, &[0.0, 0.0], &mut sample_rng(0, 0)).unwrap();
    assert!(matches!(synthesize_sample(&cfg, &h, &e, &mut sample_rng(0, 0)), Err(Error::Shape(_))));
}

fn toy_dataset(seed: u64, n: u64) -> (GenerationInfo, Vec<mudemod_core::sysmodel::DemodSample>) {
    let mut cfg = SystemConfig {
        users: 2,
        tx_antennas: vec![1, 2],
        rx_antennas: 4,
        constellation: Modulation::Qam16,
        snr_db: 5.0,
        sigma_h_sq: vec![0.05, 0.0],
        seed,
    };
    let samples = (0..n)
        .map(|i| {
            cfg.snr_db = i as f64;
            draw_sample(&cfg, ChannelModel::IidRayleigh, &mut sample_rng(seed, i)).unwrap()
        })
        .collect();
    (GenerationInfo { system: cfg, channel_model: ChannelModel::IidRayleigh, snr_db_range: Some((0.0, 10.0)) }, samples)
}

#[test]
fn dataset_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (info, samples) = toy_dataset(21, 7);
    let m = write_dataset(dir.path(), &info, &samples).unwrap();
    assert_eq!(m.record_count, 7);
    let (m2, back) = read_dataset(dir.path()).unwrap();
    assert_eq!(m, m2);
    assert_eq!(back, samples);

    let channels: Vec<ChannelSet> = load_external_channels(dir.path()).unwrap().collect::<Result<_, _>>().unwrap();
    assert_eq!(channels.len(), 7);
    for (c, s) in channels.iter().zip(&samples) {
        assert_eq!(c, &s.channels);
    }
}

#[test]
fn regeneration_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let (info, samples) = toy_dataset(22, 5);
        write_dataset(d.path(), &info, &samples).unwrap();
    }
    for f in ["manifest.json", "H.bin", "H_hat.bin", "x.bin", "y.bin", "bits.bin", "noise.bin", "sigma_h_sq.bin"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn empty_directory_yields_nothing() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(load_external_channels(dir.path()).unwrap().count(), 0);
}

#[test]
fn missing_manifest_is_an_ingestion_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("H.bin"), [0u8; 16]).unwrap();
    assert!(matches!(load_external_channels(dir.path()), Err(Error::Ingest { .. })));
}

#[test]
fn shape_mismatch_names_the_record() {
    let dir = tempfile::tempdir().unwrap();
    let small = ArrayShape { users: 1, tx_antennas: vec![2], rx_antennas: 8 };
    let sets: Vec<ChannelSet> = (0..3)
        .map(|i| ChannelSet { h: vec![CMatrix::from_element(8, 2, C64::new(i as f64, 1.0))] })
        .collect();
    write_channels(dir.path(), &small, &sets).unwrap();

    let path = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&path).unwrap().replace("\"rx_antennas\": 8", "\"rx_antennas\": 16");
    std::fs::write(&path, text).unwrap();
    let err = load_external_channels(dir.path()).err().expect("shape mismatch must fail");
    assert!(matches!(err, Error::Ingest { record: Some(0), .. }), "{err}");
    assert!(err.to_string().contains("record 0"), "{err}");
}

#[test]
fn truncated_file_reports_first_bad_record() {
    let dir = tempfile::tempdir().unwrap();
    let shape = ArrayShape { users: 1, tx_antennas: vec![1], rx_antennas: 2 };
    let sets: Vec<ChannelSet> = (0..4).map(|_| ChannelSet { h: vec![CMatrix::zeros(2, 1)] }).collect();
    write_channels(dir.path(), &shape, &sets).unwrap();
    let h = dir.path().join("H.bin");
    let bytes = std::fs::read(&h).unwrap();
    std::fs::write(&h, &bytes[..bytes.len() - 5]).unwrap();
    match load_external_channels(dir.path()) {
        Err(Error::Ingest { record: Some(3), .. }) => {}
        other => panic!("unexpected {:?}", other.map(|_| ())),
    }
}

#[test]
fn corrupted_values_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let shape = ArrayShape { users: 1, tx_antennas: vec![1], rx_antennas: 1 };
    let mut sets: Vec<ChannelSet> = (0..3).map(|_| ChannelSet { h: vec![CMatrix::zeros(1, 1)] }).collect();
    sets[1].h[0][(0, 0)] = C64::new(f64::NAN, 0.0);
    write_channels(dir.path(), &shape, &sets).unwrap();
    let out: Vec<_> = load_external_channels(dir.path()).unwrap().collect();
    assert_eq!(out.len(), 2);
    assert!(out[0].is_ok());
    assert!(matches!(out[1], Err(Error::Ingest { record: Some(1), .. })));
}
