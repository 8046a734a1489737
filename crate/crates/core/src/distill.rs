//! Consistency distillation of the multi-step sampler into a single-step student.
//!
//! The student shares the teacher's architecture and starts from its weights.
//! Its output in the variance-exploding view is
//! `S(x, t) = x - sigma(t) * F(sqrt(alpha_bar_t) * x, t, c)`, which equals the
//! one-step clean estimate of the network `F`.

use std::sync::atomic::{AtomicUsize, Ordering};

use mudemod_nn::{Adam, Graph, Mat, OptimizerKind, ParamStore, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cplx::{complexify_rows, frob_sq, realify, C64};
use crate::diffusion::{normal_mat, NoiseSchedule, TrainReport};
use crate::dit::{ConditionSet, WirelessDit};
use crate::error::{Error, Result};
use crate::sysmodel::DemodSample;

pub const DEFAULT_GRID_POINTS: usize = 18;

/// How the per-sample balance between the consistency and regression terms is set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    /// The channel-aware sigmoid weight.
    Adaptive,
    /// A fixed weight on the consistency term.
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// EMA weight of the target network.
    pub mu: f64,
    pub k0: f64,
    /// Sigmoid midpoint; the training-set median of the energy ratio when unset.
    #[serde(default)]
    pub s0: Option<f64>,
    pub weighting: LossWeighting,
    pub grid_points: usize,
    /// Upper timestep of the grid; `T` when unset.
    #[serde(default)]
    pub max_timestep: Option<usize>,
    /// Per-interval consistency weights, low noise first; all ones when unset.
    #[serde(default)]
    pub lambda: Option<Vec<f64>>,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            epochs: 80,
            batch_size: 64,
            learning_rate: 0.0008,
            optimizer: OptimizerKind::Adam,
            mu: 0.2,
            k0: 0.1,
            s0: None,
            weighting: LossWeighting::Adaptive,
            grid_points: DEFAULT_GRID_POINTS,
            max_timestep: None,
            lambda: None,
            grad_clip: Some(1.0),
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::Config(format!("EMA weight {} must lie in [0, 1]", self.mu)));
        }
        if !(self.k0 > 0.0) {
            return Err(Error::Config("k0 must be positive".into()));
        }
        if self.batch_size == 0 || self.grid_points < 2 {
            return Err(Error::Config("batch_size must be positive and the grid needs two points".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        if let LossWeighting::Fixed(w) = self.weighting {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Config(format!("fixed consistency weight {w} must lie in [0, 1]")));
            }
        }
        if let Some(l) = &self.lambda {
            if l.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::Config("consistency weights must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// `sum_u ||H_u||_F^2 / (U sigma_n^2)`.
pub fn energy_ratio(h_hat: &[crate::cplx::CMatrix], sigma_n_sq: f64) -> f64 {
    let e: f64 = h_hat.iter().map(frob_sq).sum();
    e / (h_hat.len() as f64 * sigma_n_sq)
}

/// Channel-aware weight of the consistency term, `sigmoid(k0 (ratio - s0))`;
/// 1 in the noiseless limit.
pub fn adaptive_weight(h_hat: &[crate::cplx::CMatrix], sigma_n_sq: f64, k0: f64, s0: f64) -> f64 {
    if sigma_n_sq == 0.0 {
        return 1.0;
    }
    sigmoid(k0 * (energy_ratio(h_hat, sigma_n_sq) - s0))
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `lambda * ||a - b||_F` for complex vectors.
pub fn consistency_loss(student_next: &[C64], ema_cur: &[C64], lambda: f64) -> Result<f64> {
    if student_next.len() != ema_cur.len() {
        return Err(Error::Shape(format!("{} vs {} entries", student_next.len(), ema_cur.len())));
    }
    let sq: f64 = student_next.iter().zip(ema_cur).map(|(a, b)| (a - b).norm_sqr()).sum();
    Ok(lambda * sq.sqrt())
}

/// Increasing integer timesteps whose noise levels are geometrically spaced
/// between `sigma(1)` and `sigma(t_max)`.
pub fn distill_grid(sched: &NoiseSchedule, points: usize, t_max: usize) -> Result<Vec<usize>> {
    if t_max < 2 || t_max > sched.timesteps() {
        return Err(Error::Config(format!("grid top {t_max} must lie in [2, {}]", sched.timesteps())));
    }
    if points < 2 {
        return Err(Error::Config("the grid needs at least two points".into()));
    }
    let (lo, hi) = (sched.sigma(1).ln(), sched.sigma(t_max).ln());
    let mut grid: Vec<usize> = (0..points)
        .map(|i| sched.nearest_step((lo + (hi - lo) * i as f64 / (points - 1) as f64).exp()).clamp(1, t_max))
        .collect();
    grid.dedup();
    Ok(grid)
}

/// Single-step student with a forward-call counter.
#[derive(Debug)]
pub struct Student {
    pub model: WirelessDit,
    pub params: ParamStore,
    calls: AtomicUsize,
}

impl Student {
    pub fn new(model: WirelessDit, params: ParamStore) -> Self {
        Student { model, params, calls: AtomicUsize::new(0) }
    }

    pub fn network_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset_calls(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }
}

/// One network evaluation per batch: maps variance-preserving samples at each
/// condition's timestep to clean-signal estimates.
pub fn student_single_step(
    x: &[Vec<C64>],
    conds: &[&ConditionSet],
    student: &Student,
    sched: &NoiseSchedule,
) -> Result<Vec<Vec<C64>>> {
    if x.is_empty() {
        return Ok(Vec::new());
    }
    student.calls.fetch_add(1, Ordering::Relaxed);
    let out = student.model.forward(&student.params, x, conds, sched)?;
    Ok(out.into_iter().map(|(_, x0)| x0).collect())
}

/// `x - sigma(t) F(sqrt(alpha_bar_t) x)` for row-stacked VE inputs; differentiable in the parameters.
fn student_graph(
    model: &WirelessDit,
    g: &mut Graph,
    x_ve: &Mat,
    conds: &[&ConditionSet],
    row_sample: &[usize],
    sched: &NoiseSchedule,
) -> Var {
    let mut scaled = x_ve.clone();
    let mut sig = Mat::zeros(x_ve.rows, 1);
    for (r, &b) in row_sample.iter().enumerate() {
        let t = conds[b].t;
        let a = sched.alpha_bar(t).sqrt();
        for v in scaled.row_mut(r) {
            *v *= a;
        }
        sig.set(r, 0, sched.sigma(t));
    }
    let xin = g.input(scaled);
    let f = model.predict_eps(g, xin, conds);
    let s = g.input(sig);
    let sf = g.mul_col(f, s);
    let x = g.input(x_ve.clone());
    g.sub(x, sf)
}

fn eval_student(model: &WirelessDit, params: &ParamStore, x_ve: &Mat, conds: &[&ConditionSet], row_sample: &[usize], sched: &NoiseSchedule) -> Mat {
    let mut g = Graph::new(params);
    let out = student_graph(model, &mut g, x_ve, conds, row_sample, sched);
    g.value(out).clone()
}

/// Per-sample row sums of `m`, as a `[samples, 1]` column.
fn per_sample_sum(g: &mut Graph, m: Var, row_sample: &[usize], samples: usize) -> Var {
    let mut sel = Mat::zeros(samples, row_sample.len());
    for (r, &b) in row_sample.iter().enumerate() {
        sel.set(b, r, 1.0);
    }
    let sel = g.input(sel);
    let cols = g.value(m).cols;
    let rows = g.matmul(sel, m);
    let ones = g.input(Mat::filled(cols, 1, 1.0));
    g.matmul(rows, ones)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub s0: f64,
    pub grid: Vec<usize>,
    pub train: TrainReport,
}

/// Trains a student from `teacher` on clean samples and returns its EMA target
/// parameters together with the training report.
pub fn distill_run(
    teacher: &WirelessDit,
    teacher_params: &ParamStore,
    data: &[DemodSample],
    sched: &NoiseSchedule,
    dcfg: &DistillConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(ParamStore, DistillReport)> {
    dcfg.validate()?;
    if data.is_empty() {
        return Err(Error::Usage("distillation set is empty".into()));
    }
    let t_max = dcfg.max_timestep.unwrap_or(sched.timesteps()).min(sched.timesteps());
    let grid = distill_grid(sched, dcfg.grid_points, t_max)?;
    let lambda = match &dcfg.lambda {
        Some(l) if l.len() != grid.len() - 1 => {
            return Err(Error::Config(format!("{} consistency weights for {} grid intervals", l.len(), grid.len() - 1)))
        }
        Some(l) => l.clone(),
        None => vec![1.0; grid.len() - 1],
    };
    let s0 = dcfg.s0.unwrap_or_else(|| {
        let mut r: Vec<f64> = data.iter().map(|s| energy_ratio(&s.estimates.h_hat, s.sigma_n_sq)).filter(|v| v.is_finite()).collect();
        r.sort_by(f64::total_cmp);
        match r.len() {
            0 => 0.0,
            n if n % 2 == 1 => r[n / 2],
            n => 0.5 * (r[n / 2 - 1] + r[n / 2]),
        }
    });

    let mut student = teacher_params.clone();
    let mut target = teacher_params.clone();
    let mut opt = Adam::new(dcfg.optimizer, &student, dcfg.learning_rate, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(dcfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = DistillReport { s0, grid: grid.clone(), train: TrainReport::default() };

    for epoch in 0..dcfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(dcfg.batch_size) {
            let items: Vec<&DemodSample> = chunk.iter().map(|&i| &data[i]).collect();
            let n_idx: Vec<usize> = items.iter().map(|_| rng.random_range(0..grid.len() - 1)).collect();
            let clean: Vec<C64> = items.iter().flat_map(|s| s.x.iter().flatten().copied()).collect();
            let x0 = realify(&clean);
            let z = normal_mat(&mut rng, x0.rows, 2);
            let mut row_sample = Vec::with_capacity(x0.rows);
            for (b, s) in items.iter().enumerate() {
                row_sample.extend(std::iter::repeat_n(b, s.x.iter().map(Vec::len).sum()));
            }
            let mut x_next = x0.clone();
            for (r, &b) in row_sample.iter().enumerate() {
                let s = sched.sigma(grid[n_idx[b] + 1]);
                for k in 0..2 {
                    x_next.set(r, k, x0.get(r, k) + s * z.get(r, k));
                }
            }
            let conds_next: Vec<ConditionSet> =
                items.iter().zip(&n_idx).map(|(s, &n)| ConditionSet::from_sample(s, grid[n + 1])).collect();
            let conds_cur: Vec<ConditionSet> =
                items.iter().zip(&n_idx).map(|(s, &n)| ConditionSet::from_sample(s, grid[n])).collect();
            let next_refs: Vec<&ConditionSet> = conds_next.iter().collect();
            let cur_refs: Vec<&ConditionSet> = conds_cur.iter().collect();

            // Teacher Euler step from t_{n+1} down to t_n.
            let teacher_x0 = eval_student(teacher, teacher_params, &x_next, &next_refs, &row_sample, sched);
            let mut x_cur = x_next.clone();
            for (r, &b) in row_sample.iter().enumerate() {
                let (hi, lo) = (sched.sigma(grid[n_idx[b] + 1]), sched.sigma(grid[n_idx[b]]));
                for k in 0..2 {
                    let eps = (x_next.get(r, k) - teacher_x0.get(r, k)) / hi;
                    x_cur.set(r, k, x_next.get(r, k) + (lo - hi) * eps);
                }
            }
            let ema_out = eval_student(teacher, &target, &x_cur, &cur_refs, &row_sample, sched);

            let mut w_cd = Mat::zeros(items.len(), 1);
            let mut w_mse = Mat::zeros(items.len(), 1);
            let inv_b = 1.0 / items.len() as f64;
            for (b, s) in items.iter().enumerate() {
                let eta = match dcfg.weighting {
                    LossWeighting::Adaptive => adaptive_weight(&s.estimates.h_hat, s.sigma_n_sq, dcfg.k0, s0),
                    LossWeighting::Fixed(w) => w,
                };
                w_cd.set(b, 0, eta * lambda[n_idx[b]] * inv_b);
                w_mse.set(b, 0, (1.0 - eta) * inv_b);
            }

            let mut grads = {
                let mut g = Graph::new(&student);
                let out = student_graph(teacher, &mut g, &x_next, &next_refs, &row_sample, sched);
                let ema = g.input(ema_out);
                let d_cd = g.sub(out, ema);
                let sq_cd = g.mul(d_cd, d_cd);
                let sq_cd = per_sample_sum(&mut g, sq_cd, &row_sample, items.len());
                let norm_cd = g.sqrt(sq_cd);
                let target_x0 = g.input(x0);
                let d_mse = g.sub(out, target_x0);
                let sq_mse = g.mul(d_mse, d_mse);
                let sq_mse = per_sample_sum(&mut g, sq_mse, &row_sample, items.len());
                let wc = g.input(w_cd);
                let wm = g.input(w_mse);
                let a = g.mul(norm_cd, wc);
                let b = g.mul(sq_mse, wm);
                let a = g.sum(a);
                let b = g.sum(b);
                let loss = g.add(a, b);
                let l = g.scalar(loss);
                if !l.is_finite() {
                    return Err(Error::Divergence { epoch, msg: format!("distillation loss became {l}") });
                }
                total += l;
                batches += 1;
                g.backward(loss).param_grads(&student)
            };
            if !grads.all_finite() {
                return Err(Error::Divergence { epoch, msg: "non-finite distillation gradient".into() });
            }
            if let Some(c) = dcfg.grad_clip {
                grads.clip_global_norm(c);
            }
            opt.step(&mut student, &grads);
            target.ema_update(&student, dcfg.mu);
        }
        let mean = total / batches as f64;
        report.train.epoch_loss.push(mean);
        on_epoch(epoch, mean);
    }
    Ok((target, report))
}

/// Student outputs at a fixed noise draw for two adjacent grid points, used
/// to measure self-consistency on held-out data.
pub fn self_consistency_gap(
    model: &WirelessDit,
    params: &ParamStore,
    data: &[DemodSample],
    sched: &NoiseSchedule,
    t_lo: usize,
    t_hi: usize,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Usage("no samples".into()));
    }
    if t_lo == 0 || t_lo >= t_hi || t_hi > sched.timesteps() {
        return Err(Error::Usage(format!("need 0 < {t_lo} < {t_hi} <= T")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean: Vec<C64> = data.iter().flat_map(|s| s.x.iter().flatten().copied()).collect();
    let x0 = realify(&clean);
    let z = normal_mat(&mut rng, x0.rows, 2);
    let mut row_sample = Vec::new();
    for (b, s) in data.iter().enumerate() {
        row_sample.extend(std::iter::repeat_n(b, s.x.iter().map(Vec::len).sum()));
    }
    let at = |t: usize| {
        let mut x = x0.clone();
        for r in 0..x.rows {
            for k in 0..2 {
                x.set(r, k, x0.get(r, k) + sched.sigma(t) * z.get(r, k));
            }
        }
        let conds: Vec<ConditionSet> = data.iter().map(|s| ConditionSet::from_sample(s, t)).collect();
        let refs: Vec<&ConditionSet> = conds.iter().collect();
        eval_student(model, params, &x, &refs, &row_sample, sched)
    };
    let (a, b) = (at(t_hi), at(t_lo));
    let mut gap = 0.0;
    let mut start = 0;
    for s in data {
        let n: usize = s.x.iter().map(Vec::len).sum();
        let (ca, cb) = (complexify_rows(&a, start, n), complexify_rows(&b, start, n));
        gap += consistency_loss(&ca, &cb, 1.0)?;
        start += n;
    }
    Ok(gap / data.len() as f64)
}
