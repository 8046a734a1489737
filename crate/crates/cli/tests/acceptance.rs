//! End-to-end acceptance checks, one line per criterion.
//!
//! The trained-model criteria share one Small experiment (50k training
//! records, 5k held-out records at 5 dB). Set `MUDEMOD_ACCEPTANCE_CACHE` to a
//! directory to keep its datasets and checkpoints between runs; otherwise a
//! fresh temporary directory is used.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mudemod_core::aligner::{align_target, compute_source_timestep, EncoderLayer};
use mudemod_core::checkpoint::{load_aligner, load_dit};
use mudemod_core::cplx::{CMatrix, C64};
use mudemod_core::diffusion::{forward_diffuse, normal_mat, NoiseSchedule};
use mudemod_core::distill::{adaptive_weight, energy_ratio, Student};
use mudemod_core::dit::{ConditionSet, DitBlock};
use mudemod_core::metrics::{ber, bit_errors, throughput};
use mudemod_core::pipeline::{
    demodulate_baseline, demodulate_batch, greedy_group, rank_users, sic_residual, Baseline, Models, PipelineConfig, Refiner,
};
use mudemod_core::sysmodel::{complex_normal, draw_sample, sample_rng, ChannelModel, DemodSample, Modulation, SystemConfig};
use mudemod_harness::config::{ExperimentConfig, Method, SystemCell};
use mudemod_harness::experiment::{evaluate, run_experiment, Layout, MetricsReport};
use mudemod_nn::gradcheck::{check_params, max_rel_error, GroupError};
use mudemod_nn::{Builder, Graph, Mat, ParamStore, Segment, Var};
use rand::Rng;

const MOMENT_REL_TOL: f64 = 0.02;
const MOMENT_DRAWS: usize = 100_000;
const LINEAR_SAMPLES: usize = 2000;
const LINEAR_MIN_GAIN: f64 = 0.05;
const LEARNED_MAX_RATIO: f64 = 0.9;
const DISTILL_REL_TOL: f64 = 0.10;
const LATENCY_MAX_RATIO: f64 = 0.2;
const GROUPING_CONFIGS: usize = 10_000;
const SIC_TOL: f64 = 1e-10;
const USER_SETS: usize = 1000;
const GRAD_REL_TOL: f64 = 1e-3;
const METRIC_VECTORS: usize = 1000;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

fn moments() -> Outcome {
    let sched = NoiseSchedule::default();
    let x0 = 0.7;
    let mut worst: f64 = 0.0;
    for t in [1, 250, 500, 999] {
        let eps = normal_mat(&mut sample_rng(1, t as u64), MOMENT_DRAWS, 1).data;
        let xs = forward_diffuse(&vec![x0; MOMENT_DRAWS], t, &eps, &sched).unwrap();
        let n = MOMENT_DRAWS as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let a = sched.alpha_bar(t);
        let want_mean = a.sqrt() * x0;
        let want_var = 1.0 - a;
        worst = worst.max((mean - want_mean).abs() / want_mean.abs().max(want_var.sqrt()));
        worst = worst.max((var - want_var).abs() / want_var);
    }
    Outcome::new(worst < MOMENT_REL_TOL, format!("worst relative moment error {worst:.4} (< {MOMENT_REL_TOL})"))
}

fn linear_ordering() -> Outcome {
    let cfg = SystemConfig::uniform(2, 1, 8, Modulation::Qpsk, 0.0, 0.0);
    let (mut ls, mut lmmse) = (0.0, 0.0);
    for i in 0..LINEAR_SAMPLES {
        let s = draw_sample(&cfg, ChannelModel::IidRayleigh, &mut sample_rng(2, i as u64)).unwrap();
        ls += ber(&demodulate_baseline(&s, Baseline::Ls).unwrap().bits, &s.bits).unwrap();
        lmmse += ber(&demodulate_baseline(&s, Baseline::Lmmse).unwrap().bits, &s.bits).unwrap();
    }
    let (ls, lmmse) = (ls / LINEAR_SAMPLES as f64, lmmse / LINEAR_SAMPLES as f64);
    let gain = (ls - lmmse) / ls;
    Outcome::new(gain >= LINEAR_MIN_GAIN, format!("LS {ls:.4}, LMMSE {lmmse:.4}, relative gain {gain:.3} (>= {LINEAR_MIN_GAIN})"))
}

fn grouping_and_sic() -> Outcome {
    let mut rng = sample_rng(5, 0);
    let mut violations = 0;
    let mut worst_sic: f64 = 0.0;
    for _ in 0..GROUPING_CONFIGS {
        let users = rng.random_range(1..=8);
        let nts: Vec<usize> = (0..users).map(|_| rng.random_range(1..=4)).collect();
        let nr = rng.random_range(4..=32);
        let threshold = (nr / [1, 2, 4][rng.random_range(0..3)]).max(1);
        let h: Vec<CMatrix> = nts.iter().map(|&nt| CMatrix::from_fn(nr, nt, |_, _| complex_normal(&mut rng, 1.0))).collect();
        let strengths: Vec<f64> = h.iter().map(|m| m.iter().map(|z| z.norm_sqr()).sum()).collect();
        let order = rank_users(&strengths);
        let plan = greedy_group(&order, &nts, threshold).unwrap();
        let mut seen: Vec<usize> = plan.order().collect();
        let ordered = seen.windows(2).all(|w| strengths[w[0]] >= strengths[w[1]]);
        seen.sort_unstable();
        let partition = seen == (0..users).collect::<Vec<_>>();
        let bounded = plan.groups.iter().all(|g| {
            !g.is_empty() && (g.iter().map(|&u| nts[u]).sum::<usize>() <= threshold || (g.len() == 1 && plan.oversize.contains(&g[0])))
        });
        if !(ordered && partition && bounded) {
            violations += 1;
        }

        let x: Vec<Vec<C64>> = nts.iter().map(|&nt| (0..nt).map(|_| complex_normal(&mut rng, 1.0)).collect()).collect();
        let noise: Vec<C64> = (0..nr).map(|_| complex_normal(&mut rng, 0.1)).collect();
        let mut y = noise.clone();
        for (hu, xu) in h.iter().zip(&x) {
            for r in 0..nr {
                y[r] += (0..xu.len()).map(|c| hu[(r, c)] * xu[c]).sum::<C64>();
            }
        }
        let genie: Vec<(&CMatrix, &[C64])> = h.iter().zip(&x).map(|(a, b)| (a, b.as_slice())).collect();
        let residual = sic_residual(&y, &genie).unwrap();
        worst_sic = worst_sic.max(residual.iter().zip(&noise).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max));
    }
    Outcome::new(
        violations == 0 && worst_sic < SIC_TOL,
        format!("{violations} plan violations in {GROUPING_CONFIGS} configs, worst genie residual {worst_sic:.2e} (< {SIC_TOL:e})"),
    )
}

fn timestep_mapping() -> Outcome {
    let sched = NoiseSchedule::default();
    let zero = compute_source_timestep(0.0, &sched);
    let grid: Vec<usize> = (0..100).map(|i| compute_source_timestep(i as f64 * 0.012, &sched)).collect();
    let monotone = grid.windows(2).all(|w| w[0] <= w[1]);
    let mut rng = sample_rng(6, 0);
    let mut mismatches = 0;
    for _ in 0..USER_SETS {
        let users = rng.random_range(1..=8);
        let steps: Vec<usize> =
            (0..users).map(|_| compute_source_timestep(rng.random_range(0.0..1.5), &sched)).collect();
        if align_target(&steps).unwrap() != *steps.iter().min().unwrap() {
            mismatches += 1;
        }
    }
    Outcome::new(
        zero == 0 && monotone && mismatches == 0,
        format!("t(0) = {zero}, monotone on 100 points: {monotone}, {mismatches}/{USER_SETS} alignment mismatches"),
    )
}

fn rand_mat(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Worst relative error over parameters with a nonzero gradient, and whether
/// the attention key-bias gradients vanish exactly.
fn worst_gradient_error(store: &ParamStore, build: impl Fn(&mut Graph) -> Var) -> (f64, bool) {
    let analytic = {
        let mut g = Graph::new(store);
        let l = build(&mut g);
        g.backward(l).param_grads(store)
    };
    let errors = check_params(store, &analytic, 1e-5, |s| {
        let mut g = Graph::new(s);
        let l = build(&mut g);
        g.scalar(l)
    });
    let (key_bias, rest): (Vec<GroupError>, Vec<GroupError>) = errors.into_iter().partition(|e| e.name.ends_with("attn.k.b"));
    let structural = key_bias.iter().all(|e| e.analytic_norm < 1e-12) && rest.iter().all(|e| e.analytic_norm > 0.0);
    (max_rel_error(&rest), structural)
}

fn gradient_checks() -> Outcome {
    let mut rng = sample_rng(7, 0);
    let mut store = ParamStore::new();
    let layer = EncoderLayer::new(&mut Builder::new(&mut store, &mut rng), "enc", 8, 2);
    let x_id = store.add("x", rand_mat(&mut rng, 3, 8));
    let probe = rand_mat(&mut rng, 3, 8);
    let (enc, enc_ok) = worst_gradient_error(&store, |g| {
        let x = g.param(x_id);
        let y = layer.forward(g, x, &[Segment::new(0, 3)]);
        let w = g.input(probe.clone());
        let p = g.mul(y, w);
        g.sum(p)
    });

    let mut store = ParamStore::new();
    let block = DitBlock::new(&mut Builder::new(&mut store, &mut rng), "block", 8, 2);
    let (r, c) = store.get(block.modulation.w).shape();
    *store.get_mut(block.modulation.w) = rand_mat(&mut rng, r, c);
    *store.get_mut(block.modulation.b) = rand_mat(&mut rng, 1, c);
    let z_id = store.add("z", rand_mat(&mut rng, 3, 8));
    let c_id = store.add("c", rand_mat(&mut rng, 1, 8));
    let probe = rand_mat(&mut rng, 3, 8);
    let (dit, dit_ok) = worst_gradient_error(&store, |g| {
        let z = g.param(z_id);
        let cond = g.param(c_id);
        let out = block.forward(g, z, cond, &[0, 0, 0], &[Segment::new(0, 3)]);
        let p = g.input(probe.clone());
        let m = g.mul(out, p);
        g.sum(m)
    });
    Outcome::new(
        enc < GRAD_REL_TOL && dit < GRAD_REL_TOL && enc_ok && dit_ok,
        format!("encoder layer {enc:.2e}, transformer block {dit:.2e} (< {GRAD_REL_TOL:e})"),
    )
}

fn naive_counts(decided: &[Vec<u8>], truth: &[Vec<u8>]) -> (usize, usize) {
    let mut errors = 0;
    let mut total = 0;
    for (d, t) in decided.iter().zip(truth) {
        for i in 0..t.len() {
            total += 1;
            errors += usize::from(d[i] != t[i]);
        }
    }
    (errors, total)
}

fn metric_oracles() -> Outcome {
    let mut rng = sample_rng(9, 0);
    let mut mismatches = 0;
    for _ in 0..METRIC_VECTORS {
        let lens: Vec<usize> = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..40)).collect();
        let truth: Vec<Vec<u8>> = lens.iter().map(|&n| (0..n).map(|_| rng.random_range(0..2u8)).collect()).collect();
        let p = rng.random_range(0.0..1.0);
        let decided: Vec<Vec<u8>> =
            truth.iter().map(|u| u.iter().map(|&b| if rng.random_bool(p) { 1 - b } else { b }).collect()).collect();
        let (e, n) = naive_counts(&decided, &truth);
        let want_ber = if n == 0 { 0.0 } else { e as f64 / n as f64 };
        let ok = bit_errors(&decided, &truth).unwrap() == (e, n)
            && ber(&decided, &truth).unwrap() == want_ber
            && throughput(&decided, &truth, 2.0).unwrap() == (n - e) as f64 / 2.0;
        mismatches += usize::from(!ok);
    }
    let h = |scale: f64| vec![CMatrix::from_fn(4, 2, |r, c| C64::new(scale * (1.0 + r as f64), scale * c as f64))];
    let noise = 0.5;
    let s0 = energy_ratio(&h(1.0), noise);
    let midpoint = adaptive_weight(&h(1.0), noise, 0.1, s0);
    let weights: Vec<f64> = (1..=40).map(|i| adaptive_weight(&h(0.1 * i as f64), noise, 0.1, s0)).collect();
    let monotone = weights.windows(2).all(|w| w[0] <= w[1] && (w[0] < w[1] || w[1] == 1.0 || w[0] == 0.0));
    Outcome::new(
        mismatches == 0 && midpoint == 0.5 && monotone,
        format!("{mismatches}/{METRIC_VECTORS} oracle mismatches, weight at midpoint {midpoint}, monotone: {monotone}"),
    )
}

fn trained_config(root: &Path) -> ExperimentConfig {
    let cell = SystemCell { tx_antennas: vec![1, 1], rx_antennas: 8, constellation: Modulation::Qpsk, sigma_h_sq: None };
    let mut cfg = ExperimentConfig::new(root, vec![cell]);
    cfg.seed = 2024;
    cfg.data.train_samples = 50_000;
    cfg.data.val_samples = 5_000;
    cfg.data.train_snr_db = (0.0, 10.0);
    cfg.eval.snr_db = vec![5.0];
    cfg.eval.methods = vec![Method::Lmmse, Method::Teacher, Method::Student];
    cfg.eval.teacher_steps = 10;
    cfg.aligner.epochs = 5;
    cfg.aligner.max_timestep = Some(300);
    cfg.aligner.seed = 1;
    cfg.dit.epochs = 20;
    cfg.dit.max_timestep = Some(300);
    cfg.dit.seed = 2;
    cfg.distill.epochs = 10;
    cfg.distill.max_timestep = Some(300);
    cfg.distill.seed = 3;
    cfg.distill_samples = Some(10_000);
    cfg
}

fn row<'a>(report: &'a MetricsReport, method: Method) -> &'a mudemod_harness::experiment::MetricsRow {
    report.rows.iter().find(|r| r.method == method.label()).expect("method evaluated")
}

fn learning_beats_linear(report: &MetricsReport) -> Outcome {
    let lmmse = row(report, Method::Lmmse).ber;
    let teacher = row(report, Method::Teacher).ber;
    Outcome::new(
        teacher <= LEARNED_MAX_RATIO * lmmse,
        format!("pipeline BER {teacher:.5} vs LMMSE {lmmse:.5} at 5 dB (need <= {LEARNED_MAX_RATIO} x LMMSE)"),
    )
}

fn distillation_fidelity(report: &MetricsReport) -> Outcome {
    let teacher = row(report, Method::Teacher).ber;
    let student = row(report, Method::Student).ber;
    let rel = if teacher == 0.0 { if student == 0.0 { 0.0 } else { f64::INFINITY } } else { (student - teacher).abs() / teacher };
    let latency = |m: Method| report.latency.iter().find(|r| r.method == m.label()).expect("timed").refine_us;
    let (t_us, s_us) = (latency(Method::Teacher), latency(Method::Student));
    let ratio = s_us / t_us;
    Outcome::new(
        rel <= DISTILL_REL_TOL && ratio < LATENCY_MAX_RATIO,
        format!(
            "student BER {student:.5} vs teacher {teacher:.5} (rel {rel:.3} <= {DISTILL_REL_TOL}); \
             refine {s_us:.1} us vs {t_us:.1} us per sample (ratio {ratio:.3} < {LATENCY_MAX_RATIO})"
        ),
    )
}

fn heterogeneity(cfg: &ExperimentConfig) -> Outcome {
    let layout = Layout::of(cfg);
    let (aligner, a_params, sched) = load_aligner(&layout.checkpoint("aligner")).unwrap();
    let (teacher, t_params, _) = load_dit(&layout.checkpoint("dit")).unwrap();
    let (s_model, s_params, _) = load_dit(&layout.checkpoint("student")).unwrap();
    let student = Student::new(s_model, s_params);
    let cases: [(&[usize], usize); 3] = [(&[1, 2], 8), (&[2, 1, 3, 1], 16), (&[1, 2, 1, 4, 1, 1, 2, 3], 32)];
    let mut failures = Vec::new();
    for (nts, nr) in cases {
        let sys = SystemConfig { tx_antennas: nts.to_vec(), ..SystemConfig::uniform(nts.len(), 1, nr, Modulation::Qpsk, 5.0, 0.0) };
        let data: Vec<DemodSample> =
            (0..8).map(|i| draw_sample(&sys, ChannelModel::IidRayleigh, &mut sample_rng(10, i)).unwrap()).collect();
        let refs: Vec<&DemodSample> = data.iter().collect();
        let x: Vec<Vec<C64>> = data.iter().map(|s| s.x.concat()).collect();
        let conds: Vec<ConditionSet> = data.iter().map(|s| ConditionSet::from_sample(s, 100)).collect();
        let cref: Vec<&ConditionSet> = conds.iter().collect();
        let raw = teacher.forward(&t_params, &x, &cref, &sched);
        let raw_ok = raw.is_ok_and(|out| {
            out.iter().zip(&x).all(|((eps, x0), xi)| {
                eps.len() == xi.len() && x0.len() == xi.len() && eps.iter().chain(x0).all(|z| z.re.is_finite() && z.im.is_finite())
            })
        });
        let pcfg = PipelineConfig { threshold: nr, buffer: None };
        let refiners = [Refiner::Teacher { model: &teacher, params: &t_params, steps: 10 }, Refiner::Student(&student)];
        let pipe_ok = refiners.into_iter().all(|refiner| {
            let models = Models { aligner: Some((&aligner, &a_params)), refiner };
            demodulate_batch(&refs, &models, &sched, &pcfg).is_ok_and(|out| {
                out.iter().zip(&data).all(|(r, s)| {
                    r.bits.iter().map(Vec::len).eq(s.bits.iter().map(Vec::len))
                        && r.symbols.iter().map(Vec::len).eq(nts.iter().copied())
                        && r.symbols.iter().flatten().all(|z| z.re.is_finite() && z.im.is_finite())
                })
            })
        });
        if !(raw_ok && pipe_ok) {
            failures.push(format!("(U={}, Nr={nr})", nts.len()));
        }
    }
    Outcome::new(
        failures.is_empty(),
        if failures.is_empty() {
            "(2,8), (4,16), (8,32) ragged: finite, shape-correct outputs from one checkpoint".to_string()
        } else {
            format!("failed on {}", failures.join(", "))
        },
    )
}

fn reproducibility(cfg: &ExperimentConfig, first_csv: &[u8]) -> Outcome {
    let mut quiet = |_: &str| {};
    let path = Layout::of(cfg).metrics_csv();
    evaluate(cfg, &mut quiet).unwrap();
    let a = fs::read(&path).unwrap();
    evaluate(cfg, &mut quiet).unwrap();
    let b = fs::read(&path).unwrap();
    Outcome::new(a == b && a == first_csv, format!("three evaluations, metrics.csv {} bytes, identical: {}", a.len(), a == b && a == first_csv))
}

fn report(results: &mut Vec<(usize, &'static str, Outcome)>, id: usize, name: &'static str, outcome: Outcome) {
    println!("{} [{id:>2}] {name}: {}", if outcome.pass { "PASS" } else { "FAIL" }, outcome.detail);
    results.push((id, name, outcome));
}

fn main() {
    let mut results = Vec::new();
    let started = Instant::now();
    report(&mut results, 1, "forward-diffusion moments", moments());
    report(&mut results, 2, "linear demodulator ordering", linear_ordering());
    report(&mut results, 5, "grouping and SIC invariants", grouping_and_sic());
    report(&mut results, 6, "timestep mapping", timestep_mapping());
    report(&mut results, 7, "gradient checks", gradient_checks());
    report(&mut results, 9, "metric oracles", metric_oracles());

    let scratch;
    let root: PathBuf = match std::env::var_os("MUDEMOD_ACCEPTANCE_CACHE") {
        Some(dir) => PathBuf::from(dir),
        None => {
            scratch = tempfile::tempdir().expect("temporary directory");
            scratch.path().to_path_buf()
        }
    };
    let cfg = trained_config(&root);
    let mut log = |msg: &str| eprintln!("  {msg}");
    let trained = Instant::now();
    match run_experiment(&cfg, true, &mut log) {
        Ok(rep) => {
            eprintln!("  experiment finished in {:.0} s", trained.elapsed().as_secs_f64());
            let csv = fs::read(Layout::of(&cfg).metrics_csv()).unwrap();
            report(&mut results, 3, "learning beats linear", learning_beats_linear(&rep));
            report(&mut results, 4, "distillation fidelity", distillation_fidelity(&rep));
            report(&mut results, 8, "heterogeneous systems", heterogeneity(&cfg));
            report(&mut results, 10, "reproducible evaluation", reproducibility(&cfg, &csv));
        }
        Err(e) => {
            for (id, name) in [(3, "learning beats linear"), (4, "distillation fidelity"), (8, "heterogeneous systems"), (10, "reproducible evaluation")] {
                report(&mut results, id, name, Outcome::new(false, format!("experiment failed: {e}")));
            }
        }
    }

    results.sort_by_key(|r| r.0);
    let passed = results.iter().filter(|r| r.2.pass).count();
    println!("acceptance: {passed}/{} criteria passed in {:.0} s", results.len(), started.elapsed().as_secs_f64());
    for (id, name, _) in results.iter().filter(|r| !r.2.pass) {
        println!("  not met: [{id}] {name}");
    }
}
