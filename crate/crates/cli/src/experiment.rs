//! Dataset generation, training stages and evaluation sweeps.
//!
//! Everything an experiment produces lives under its `output_dir`:
//!
//! | path | contents |
//! |------|----------|
//! | `data/cell-NN/train/` | training records, SNR drawn per record |
//! | `data/cell-NN/val/snr_S/` | validation records at a fixed SNR |
//! | `checkpoints/{aligner,dit,student}.ckpt` | model checkpoints |
//! | `logs/{aligner,dit,distill}.csv` | per-epoch training loss |
//! | `metrics.csv` | BER, throughput and cost per cell, SNR and method |
//! | `latency.csv` | wall-clock stage timings (not reproducible) |
//! | `report.json` | both tables plus seeds and content hashes |
//! | `plots/ber_cell-NN.svg` | BER against SNR, drawn from `metrics.csv` |
//!
//! `metrics.csv` columns: `cell, system, snr_db, method, samples,
//! bit_errors, total_bits, ber, throughput_bpcu, mflops`. Throughput is
//! delivered bits per channel use, one channel use per record.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use mudemod_core::aligner::{train_aligner, Aligner, AlignerConfig};
use mudemod_core::checkpoint::{self, file_hash, hex_digest};
use mudemod_core::cplx::CMatrix;
use mudemod_core::diffusion::{train_denoiser, NoiseSchedule, TrainConfig, DEFAULT_BETA_END, DEFAULT_BETA_START};
use mudemod_core::distill::{distill_run, Student};
use mudemod_core::dit::{DitConfig, WirelessDit};
use mudemod_core::linear::MemoryBuffer;
use mudemod_core::metrics::{bit_errors, flops_estimate, ProblemShape};
use mudemod_core::pipeline::{demodulate_baseline, demodulate_batch, Baseline, DemodResult, Models, PipelineConfig, Refiner, Timing};
use mudemod_core::sysmodel::dataset::{read_dataset, write_dataset, ArrayShape, GenerationInfo};
use mudemod_core::sysmodel::{draw_sample, sample_rng, ChannelSet, DemodSample};
use mudemod_core::{Error, Result};
use mudemod_nn::ParamStore;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method, SystemCell};
use crate::plot;

pub type Progress<'a> = &'a mut dyn FnMut(&str);

pub const METRICS_HEADER: &str = "cell,system,snr_db,method,samples,bit_errors,total_bits,ber,throughput_bpcu,mflops";
pub const LATENCY_HEADER: &str = "cell,snr_db,method,samples,coarse_us,align_us,refine_us,total_us";

/// File locations of one experiment.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn of(cfg: &ExperimentConfig) -> Self {
        Layout { root: cfg.output_dir.clone() }
    }

    fn cell_dir(&self, cell: usize) -> PathBuf {
        self.root.join("data").join(format!("cell-{cell:02}"))
    }

    pub fn train_dir(&self, cell: usize) -> PathBuf {
        self.cell_dir(cell).join("train")
    }

    pub fn val_dir(&self, cell: usize, snr_db: f64) -> PathBuf {
        self.cell_dir(cell).join("val").join(format!("snr_{snr_db:.2}"))
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(format!("{name}.csv"))
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn latency_csv(&self) -> PathBuf {
        self.root.join("latency.csv")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn plot_dir(&self) -> PathBuf {
        self.root.join("plots")
    }
}

/// Independent random stream for each (cell, split) pair.
fn split_seed(seed: u64, cell: usize, split: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((cell as u64) << 40) ^ (split as u64)
}

fn draw_records(cfg: &ExperimentConfig, cell: usize, split: usize, n: usize, snr: (f64, f64)) -> Result<Vec<DemodSample>> {
    let sc = &cfg.system[cell];
    let seed = split_seed(cfg.seed, cell, split);
    (0..n)
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            let snr_db = if snr.0 < snr.1 { rng.random_range(snr.0..snr.1) } else { snr.0 };
            draw_sample(&sc.at_snr(snr_db), cfg.data.channel_model, &mut rng)
        })
        .collect()
}

/// Writes the training set and one validation set per SNR point for every
/// grid cell. Returns the directories written.
pub fn generate_dataset(cfg: &ExperimentConfig, progress: Progress<'_>) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let layout = Layout::of(cfg);
    let mut dirs = Vec::new();
    for (c, cell) in cfg.system.iter().enumerate() {
        let range = cfg.data.train_snr_db;
        let train = draw_records(cfg, c, 0, cfg.data.train_samples, range)?;
        let info = GenerationInfo { system: cell.at_snr(range.0), channel_model: cfg.data.channel_model, snr_db_range: Some(range) };
        let dir = layout.train_dir(c);
        write_dataset(&dir, &info, &train)?;
        progress(&format!("cell {c} ({cell}): {} training records -> {}", train.len(), dir.display()));
        dirs.push(dir);
        for (k, &snr) in cfg.eval.snr_db.iter().enumerate() {
            let val = draw_records(cfg, c, k + 1, cfg.data.val_samples, (snr, snr))?;
            let info = GenerationInfo { system: cell.at_snr(snr), channel_model: cfg.data.channel_model, snr_db_range: None };
            let dir = layout.val_dir(c, snr);
            write_dataset(&dir, &info, &val)?;
            dirs.push(dir);
        }
        progress(&format!("cell {c}: {} validation sets of {} records", cfg.eval.snr_db.len(), cfg.data.val_samples));
    }
    Ok(dirs)
}

/// Loads one dataset directory and checks it belongs to `cell`.
pub fn load_split(dir: &Path, cell: &SystemCell) -> Result<Vec<DemodSample>> {
    if !dir.join(mudemod_core::sysmodel::dataset::MANIFEST).exists() {
        return Err(Error::Config(format!("no dataset at {}; run `mudemod gen-data` first", dir.display())));
    }
    let (manifest, samples) = read_dataset(dir)?;
    let expected = ArrayShape::from_config(&cell.at_snr(0.0));
    let modulation = manifest.generation.as_ref().map(|g| g.system.constellation);
    if manifest.shape != expected || modulation != Some(cell.constellation) {
        return Err(Error::Config(format!(
            "dataset at {} was generated for a different system than {cell}; rerun `mudemod gen-data`",
            dir.display()
        )));
    }
    Ok(samples)
}

fn training_set(cfg: &ExperimentConfig) -> Result<Vec<DemodSample>> {
    let layout = Layout::of(cfg);
    let mut all = Vec::new();
    for (c, cell) in cfg.system.iter().enumerate() {
        all.extend(load_split(&layout.train_dir(c), cell)?);
    }
    Ok(all)
}

fn schedule(train: &TrainConfig) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(train.timesteps, DEFAULT_BETA_START, DEFAULT_BETA_END)
}

fn write_log(path: &Path, csv: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, csv)?;
    Ok(())
}

fn epoch_logger<'a>(stage: &'a str, progress: Progress<'a>) -> impl FnMut(usize, f64) + 'a {
    move |epoch, loss| progress(&format!("{stage} epoch {epoch}: loss {loss:.5}"))
}

pub fn train_aligner_stage(cfg: &ExperimentConfig, progress: Progress<'_>) -> Result<PathBuf> {
    cfg.validate()?;
    let layout = Layout::of(cfg);
    let samples = training_set(cfg)?;
    let data: Vec<_> = samples.iter().flat_map(|s| s.x.iter().cloned()).collect();
    let sched = schedule(&cfg.aligner)?;
    let acfg = AlignerConfig { timesteps: cfg.aligner.timesteps, ..AlignerConfig::preset(cfg.preset) };
    let (model, mut params) = Aligner::init(acfg, split_seed(cfg.seed, 0, 101))?;
    let report = train_aligner(&model, &mut params, &data, &sched, &cfg.aligner, epoch_logger("aligner", progress))?;
    let path = layout.checkpoint("aligner");
    checkpoint::save_aligner(&path, &model, &params, &sched, Some(serde_json::to_value(&cfg.aligner)?))?;
    write_log(&layout.log("aligner"), &report.to_csv())?;
    Ok(path)
}

pub fn train_dit_stage(cfg: &ExperimentConfig, progress: Progress<'_>) -> Result<PathBuf> {
    cfg.validate()?;
    let layout = Layout::of(cfg);
    let samples = training_set(cfg)?;
    let sched = schedule(&cfg.dit)?;
    let dcfg = DitConfig { timesteps: cfg.dit.timesteps, ..DitConfig::preset(cfg.preset) };
    let (model, mut params) = WirelessDit::init(dcfg, split_seed(cfg.seed, 0, 102))?;
    progress(&format!("denoiser: {} parameters, {} training records", params.num_scalars(), samples.len()));
    let report = train_denoiser(&model, &mut params, &samples, &sched, &cfg.dit, epoch_logger("dit", progress))?;
    let path = layout.checkpoint("dit");
    checkpoint::save_dit(&path, &model, &params, &sched, Some(serde_json::to_value(&cfg.dit)?), None)?;
    write_log(&layout.log("dit"), &report.to_csv())?;
    Ok(path)
}

fn require(path: &Path, verb: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!("{} not found; run `mudemod {verb}` first", path.display())))
    }
}

pub fn distill_stage(cfg: &ExperimentConfig, progress: Progress<'_>) -> Result<PathBuf> {
    cfg.validate()?;
    let layout = Layout::of(cfg);
    let teacher_path = layout.checkpoint("dit");
    require(&teacher_path, "train-dit")?;
    let (teacher, teacher_params, header) = checkpoint::load_dit(&teacher_path)?;
    let sched = header.schedule.build()?;
    let mut samples = training_set(cfg)?;
    if let Some(n) = cfg.distill_samples {
        samples.truncate(n);
    }
    let (student, report) = distill_run(&teacher, &teacher_params, &samples, &sched, &cfg.distill, epoch_logger("distill", progress))?;
    progress(&format!("distill: s0 = {:.4}, grid = {:?}", report.s0, report.grid));
    let path = layout.checkpoint("student");
    let mut training = serde_json::to_value(&cfg.distill)?;
    training["s0"] = report.s0.into();
    checkpoint::save_dit(&path, &teacher, &student, &sched, Some(training), Some(&teacher_path))?;
    write_log(&layout.log("distill"), &report.train.to_csv())?;
    Ok(path)
}

/// Checkpoints needed by the pipeline methods of an evaluation.
pub struct LoadedModels {
    pub sched: NoiseSchedule,
    pub aligner: Option<(Aligner, ParamStore)>,
    pub teacher: Option<(WirelessDit, ParamStore)>,
    pub student: Option<Student>,
    pub hashes: Vec<(String, String)>,
}

impl LoadedModels {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let layout = Layout::of(cfg);
        let wants = |m: Method| cfg.eval.methods.contains(&m);
        let mut hashes = Vec::new();
        let mut sched = schedule(&cfg.dit)?;
        let mut aligner = None;
        if wants(Method::Teacher) || wants(Method::Student) {
            let p = layout.checkpoint("aligner");
            require(&p, "train-aligner")?;
            let (m, params, s) = checkpoint::load_aligner(&p)?;
            hashes.push(("aligner".to_string(), file_hash(&p)?));
            sched = s;
            aligner = Some((m, params));
        }
        let mut load = |name: &str, verb: &str| -> Result<(WirelessDit, ParamStore)> {
            let p = layout.checkpoint(name);
            require(&p, verb)?;
            let (m, params, header) = checkpoint::load_dit(&p)?;
            if header.schedule.build()? != sched {
                return Err(Error::Config(format!(
                    "{} uses a different noise schedule than the aligner; retrain with matching `timesteps`",
                    p.display()
                )));
            }
            hashes.push((name.to_string(), file_hash(&p)?));
            Ok((m, params))
        };
        let teacher = if wants(Method::Teacher) { Some(load("dit", "train-dit")?) } else { None };
        let student = if wants(Method::Student) {
            let (m, p) = load("student", "distill")?;
            Some(Student::new(m, p))
        } else {
            None
        };
        Ok(LoadedModels { sched, aligner, teacher, student, hashes })
    }

    fn models(&self, method: Method, steps: usize) -> Option<Models<'_>> {
        let aligner = self.aligner.as_ref().map(|(m, p)| (m, p));
        let refiner = match method {
            Method::Teacher => {
                let (model, params) = self.teacher.as_ref()?;
                Refiner::Teacher { model, params, steps }
            }
            Method::Student => Refiner::Student(self.student.as_ref()?),
            Method::Ls | Method::Lmmse => return None,
        };
        Some(Models { aligner, refiner })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub cell: usize,
    pub system: String,
    pub snr_db: f64,
    pub method: String,
    pub samples: usize,
    pub bit_errors: usize,
    pub total_bits: usize,
    pub ber: f64,
    pub throughput_bpcu: f64,
    pub mflops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub cell: usize,
    pub snr_db: f64,
    pub method: String,
    pub samples: usize,
    pub coarse_us: f64,
    pub align_us: f64,
    pub refine_us: f64,
    pub total_us: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub code_version: String,
    pub seed: u64,
    pub config_sha256: String,
    /// Digest of each validation manifest, keyed by directory.
    pub datasets: Vec<(String, String)>,
    pub checkpoints: Vec<(String, String)>,
    pub rows: Vec<MetricsRow>,
    pub latency: Vec<LatencyRow>,
}

impl MetricsReport {
    pub fn metrics_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},\"{}\",{},{},{},{},{},{:.8},{:.6},{:.4}",
                r.cell, r.system, r.snr_db, r.method, r.samples, r.bit_errors, r.total_bits, r.ber, r.throughput_bpcu, r.mflops
            );
        }
        s
    }

    pub fn latency_csv(&self) -> String {
        let mut s = format!("{LATENCY_HEADER}\n");
        for r in &self.latency {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.2},{:.2},{:.2},{:.2}",
                r.cell, r.snr_db, r.method, r.samples, r.coarse_us, r.align_us, r.refine_us, r.total_us
            );
        }
        s
    }
}

/// Runs one method over a set of records and returns per-record results.
pub fn run_method(
    samples: &[DemodSample],
    method: Method,
    models: &LoadedModels,
    cfg: &ExperimentConfig,
    threshold: usize,
    buffer: Option<&MemoryBuffer>,
) -> Result<Vec<DemodResult>> {
    match method {
        Method::Ls => samples.iter().map(|s| demodulate_baseline(s, Baseline::Ls)).collect(),
        Method::Lmmse => samples.iter().map(|s| demodulate_baseline(s, Baseline::Lmmse)).collect(),
        Method::Teacher | Method::Student => {
            let m = models
                .models(method, cfg.eval.teacher_steps)
                .ok_or_else(|| Error::State(format!("{} checkpoint was not loaded", method.label())))?;
            let pcfg = PipelineConfig { threshold, buffer };
            let mut out = Vec::with_capacity(samples.len());
            for chunk in samples.chunks(cfg.eval.batch_size) {
                let refs: Vec<&DemodSample> = chunk.iter().collect();
                out.extend(demodulate_batch(&refs, &m, &models.sched, &pcfg)?);
            }
            Ok(out)
        }
    }
}

fn buffer_for(cfg: &ExperimentConfig, cell: usize) -> Result<Option<MemoryBuffer>> {
    if cfg.eval.buffer_capacity == 0 {
        return Ok(None);
    }
    let train = load_split(&Layout::of(cfg).train_dir(cell), &cfg.system[cell])?;
    let mut buffer = MemoryBuffer::new(cfg.eval.buffer_capacity)?;
    for s in train.iter().rev().take(cfg.eval.buffer_capacity).rev() {
        buffer.update(&ChannelSet { h: s.estimates.h_hat.iter().cloned().collect::<Vec<CMatrix>>() })?;
    }
    Ok(Some(buffer))
}

fn method_steps(method: Method, cfg: &ExperimentConfig) -> Option<usize> {
    match method {
        Method::Ls | Method::Lmmse => None,
        Method::Teacher => Some(cfg.eval.teacher_steps),
        Method::Student => Some(1),
    }
}

fn micros(d: Duration) -> f64 {
    d.as_secs_f64() * 1e6
}

/// Evaluates every configured method on the stored validation sets and
/// writes `metrics.csv`, `latency.csv`, `report.json` and the plots. Nothing
/// is written unless every evaluation succeeds.
pub fn evaluate(cfg: &ExperimentConfig, progress: Progress<'_>) -> Result<MetricsReport> {
    cfg.validate()?;
    let layout = Layout::of(cfg);
    let models = LoadedModels::load(cfg)?;
    let mut rows = Vec::new();
    let mut latency = Vec::new();
    let mut datasets = Vec::new();
    for (c, cell) in cfg.system.iter().enumerate() {
        let buffer = buffer_for(cfg, c)?;
        let threshold = cfg.eval.threshold.resolve(cell.rx_antennas);
        let shape = ProblemShape { tx_antennas: cell.tx_antennas.clone(), rx_antennas: cell.rx_antennas };
        for &snr in &cfg.eval.snr_db {
            let dir = layout.val_dir(c, snr);
            let samples = load_split(&dir, cell)?;
            if samples.is_empty() {
                return Err(Error::Config(format!("validation set {} is empty; raise data.val_samples", dir.display())));
            }
            datasets.push((dir.display().to_string(), file_hash(&dir.join(mudemod_core::sysmodel::dataset::MANIFEST))?));
            for &method in &cfg.eval.methods {
                let results = run_method(&samples, method, &models, cfg, threshold, buffer.as_ref())?;
                let decided: Vec<Vec<u8>> = results.iter().flat_map(|r| r.bits.iter().cloned()).collect();
                let truth: Vec<Vec<u8>> = samples.iter().flat_map(|s| s.bits.iter().cloned()).collect();
                let (errors, total) = bit_errors(&decided, &truth)?;
                let n = samples.len();
                let cost = flops_estimate(cfg.preset, &shape, method_steps(method, cfg).unwrap_or(0));
                let mflops = match method_steps(method, cfg) {
                    None => cost.coarse,
                    Some(_) => cost.total,
                } / 1e6;
                let row = MetricsRow {
                    cell: c,
                    system: cell.to_string(),
                    snr_db: snr,
                    method: method.label().to_string(),
                    samples: n,
                    bit_errors: errors,
                    total_bits: total,
                    ber: errors as f64 / total as f64,
                    throughput_bpcu: (total - errors) as f64 / n as f64,
                    mflops,
                };
                progress(&format!("cell {c} snr {snr} dB {}: BER {:.5}", row.method, row.ber));
                rows.push(row);
                let mut sum = Timing::default();
                for r in &results {
                    sum.coarse += r.timing.coarse;
                    sum.align += r.timing.align;
                    sum.refine += r.timing.refine;
                    sum.total += r.timing.total;
                }
                let k = n as f64;
                latency.push(LatencyRow {
                    cell: c,
                    snr_db: snr,
                    method: method.label().to_string(),
                    samples: n,
                    coarse_us: micros(sum.coarse) / k,
                    align_us: micros(sum.align) / k,
                    refine_us: micros(sum.refine) / k,
                    total_us: micros(sum.total) / k,
                });
            }
        }
    }
    let report = MetricsReport {
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        config_sha256: hex_digest(cfg.to_toml()?.as_bytes()),
        datasets,
        checkpoints: models.hashes.clone(),
        rows,
        latency,
    };
    fs::create_dir_all(&layout.root)?;
    fs::write(layout.metrics_csv(), report.metrics_csv())?;
    fs::write(layout.latency_csv(), report.latency_csv())?;
    fs::write(layout.report(), serde_json::to_string_pretty(&report)?)?;
    plot::render_ber_plots(&layout.metrics_csv(), &layout.plot_dir())?;
    Ok(report)
}

/// Full experiment: data, all training stages and the evaluation. With
/// `reuse`, existing datasets and checkpoints are kept instead of rebuilt.
pub fn run_experiment(cfg: &ExperimentConfig, reuse: bool, progress: Progress<'_>) -> Result<MetricsReport> {
    cfg.validate()?;
    let layout = Layout::of(cfg);
    let have = |p: PathBuf| reuse && p.exists();
    let data_ready = (0..cfg.system.len()).all(|c| {
        have(layout.train_dir(c).join(mudemod_core::sysmodel::dataset::MANIFEST))
            && cfg.eval.snr_db.iter().all(|&s| have(layout.val_dir(c, s).join(mudemod_core::sysmodel::dataset::MANIFEST)))
    });
    if !data_ready {
        generate_dataset(cfg, progress)?;
    }
    let pipeline = cfg.eval.methods.iter().any(|m| matches!(m, Method::Teacher | Method::Student));
    if pipeline && !have(layout.checkpoint("aligner")) {
        train_aligner_stage(cfg, progress)?;
    }
    if pipeline && !have(layout.checkpoint("dit")) {
        train_dit_stage(cfg, progress)?;
    }
    if cfg.eval.methods.contains(&Method::Student) && !have(layout.checkpoint("student")) {
        distill_stage(cfg, progress)?;
    }
    evaluate(cfg, progress)
}
