//! DDPM noise schedule, forward diffusion, sinusoidal timestep embeddings
//! and the generic noise-prediction training loop.

use mudemod_nn::{Adam, Builder, Graph, Linear, Mat, OptimizerKind, ParamStore, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Discrete variance-preserving schedule with steps `1..=T`.
///
/// Step 0 is the clean-signal extension with `alpha_bar(0) = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta_start: f64,
    pub beta_end: f64,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::linear(DEFAULT_TIMESTEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid default schedule")
    }
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::Config(format!("schedule needs at least 2 steps, got {timesteps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!("invalid beta bounds ({beta_start}, {beta_end}); need 0 < start <= end < 1")));
        }
        let step = (beta_end - beta_start) / (timesteps - 1) as f64;
        let beta: Vec<f64> = (0..timesteps).map(|i| beta_start + step * i as f64).collect();
        let mut alpha_bar = Vec::with_capacity(timesteps);
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let sigma = alpha_bar.iter().map(|a| ((1.0 - a) / a).sqrt()).collect();
        Ok(NoiseSchedule { beta_start, beta_end, beta, alpha_bar, sigma })
    }

    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// `alpha_bar_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Variance-exploding noise level `sqrt((1 - alpha_bar_t) / alpha_bar_t)`; zero at `t = 0`.
    pub fn sigma(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.sigma[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `sigma(t)` for `t = 1..=T`.
    pub fn sigma_grid(&self) -> &[f64] {
        &self.sigma
    }

    /// Step whose noise level is closest to `sigma`, searched over `0..=T`.
    pub fn nearest_step(&self, sigma: f64) -> usize {
        let idx = self.sigma.partition_point(|&s| s < sigma);
        let mut best = (sigma.abs(), 0);
        for t in [idx, idx + 1] {
            if (1..=self.timesteps()).contains(&t) {
                let d = (self.sigma(t) - sigma).abs();
                if d < best.0 {
                    best = (d, t);
                }
            }
        }
        best.1
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.timesteps() {
            return Err(Error::Usage(format!("timestep {t} outside 0..={}", self.timesteps())));
        }
        Ok(())
    }
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_diffuse(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    if x0.len() != eps.len() {
        return Err(Error::Shape(format!("x0 has {} entries, eps has {}", x0.len(), eps.len())));
    }
    let a = sched.alpha_bar(t);
    let (s, n) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| s * x + n * e).collect())
}

pub fn timestep_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim < 4 || dim % 2 != 0 {
        return Err(Error::Config(format!("timestep embedding width must be even and >= 4, got {dim}")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for j in 0..half {
        let w = 10000f64.powf(-(j as f64) / (half as f64 - 1.0));
        out[j] = (t * w).sin();
        out[half + j] = (t * w).cos();
    }
    Ok(out)
}

/// One embedding row per timestep.
pub fn timestep_rows(ts: &[usize], dim: usize) -> Result<Mat> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(timestep_embedding(t as f64, dim)?);
    }
    Ok(Mat::from_vec(ts.len(), dim, data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub timesteps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Restricts sampled training timesteps to `1..=max_timestep`.
    #[serde(default)]
    pub max_timestep: Option<usize>,
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn aligner_default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            learning_rate: 0.002,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 1e-4,
            timesteps: DEFAULT_TIMESTEPS,
            seed: 0,
            max_timestep: None,
            grad_clip: Some(1.0),
        }
    }

    pub fn dit_default() -> Self {
        TrainConfig { learning_rate: 0.001, ..Self::aligner_default() }
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if self.timesteps != sched.timesteps() {
            return Err(Error::Config(format!(
                "training config uses T = {} but the schedule has {} steps",
                self.timesteps,
                sched.timesteps()
            )));
        }
        if let Some(m) = self.max_timestep {
            if m == 0 || m > sched.timesteps() {
                return Err(Error::Config(format!("max_timestep {m} outside 1..={}", sched.timesteps())));
            }
        }
        Ok(())
    }

    pub fn timestep_cap(&self) -> usize {
        self.max_timestep.unwrap_or(self.timesteps)
    }
}

/// A network trained to predict the noise added by [`forward_diffuse`].
pub trait Denoiser {
    type Item;

    /// Clean signal of an item as a `[rows, 2]` matrix.
    fn clean(&self, item: &Self::Item) -> Mat;

    /// Noise prediction for the row-stacked noisy signals of `items` at steps `t`.
    fn predict_noise(&self, g: &mut Graph, x_t: Var, t: &[usize], items: &[&Self::Item]) -> Var;
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-element squared error for each epoch.
    pub epoch_loss: Vec<f64>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss\n");
        for (i, l) in self.epoch_loss.iter().enumerate() {
            s.push_str(&format!("{},{l:.10e}\n", i + 1));
        }
        s
    }
}

/// Draws a standard-normal matrix.
pub fn normal_mat<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

/// Noisy batch `x_t` built row-block by row-block with per-item steps.
pub fn diffuse_batch(clean: &[Mat], t: &[usize], eps: &Mat, sched: &NoiseSchedule) -> Mat {
    let cols = clean.first().map_or(2, |m| m.cols);
    let mut out = Mat::zeros(eps.rows, cols);
    let mut r0 = 0;
    for (m, &ti) in clean.iter().zip(t) {
        let a = sched.alpha_bar(ti);
        let (s, n) = (a.sqrt(), (1.0 - a).sqrt());
        for r in 0..m.rows {
            for c in 0..cols {
                out.set(r0 + r, c, s * m.get(r, c) + n * eps.get(r0 + r, c));
            }
        }
        r0 += m.rows;
    }
    out
}

/// Mean squared noise-prediction error of one batch, built on `g`.
pub fn denoising_loss<M: Denoiser>(
    model: &M,
    g: &mut Graph,
    items: &[&M::Item],
    t: &[usize],
    eps: &Mat,
    sched: &NoiseSchedule,
) -> Var {
    let clean: Vec<Mat> = items.iter().map(|i| model.clean(i)).collect();
    let x_t = g.input(diffuse_batch(&clean, t, eps, sched));
    let pred = model.predict_noise(g, x_t, t, items);
    let target = g.input(eps.clone());
    let diff = g.sub(pred, target);
    let sq = g.sum_sq(diff);
    g.scale(sq, 1.0 / eps.len() as f64)
}

/// Generic mini-batch loop: shuffles item indices each epoch, builds a loss
/// graph per batch with `batch_loss` and applies one optimizer step.
pub fn fit(
    params: &mut ParamStore,
    items: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mut batch_loss: impl FnMut(&mut Graph<'_>, &[usize], &mut ChaCha8Rng) -> Var,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    if items == 0 {
        return Err(Error::Usage("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut opt = Adam::new(cfg.optimizer, params, cfg.learning_rate, cfg.weight_decay);
    let mut order: Vec<usize> = (0..items).collect();
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = {
                let mut g = Graph::new(params);
                let loss = batch_loss(&mut g, chunk, rng);
                let l = g.scalar(loss);
                if !l.is_finite() {
                    return Err(Error::Divergence { epoch, msg: format!("loss became {l}") });
                }
                total += l;
                batches += 1;
                g.backward(loss).param_grads(params)
            };
            if !grads.all_finite() {
                return Err(Error::Divergence { epoch, msg: "non-finite gradient".into() });
            }
            if let Some(c) = cfg.grad_clip {
                grads.clip_global_norm(c);
            }
            opt.step(params, &grads);
        }
        let mean = total / batches as f64;
        report.epoch_loss.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(report)
}

/// Trains `model` with the noise-prediction objective, returning per-epoch mean loss.
pub fn train_denoiser<M: Denoiser>(
    model: &M,
    params: &mut ParamStore,
    data: &[M::Item],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate(sched)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cap = cfg.timestep_cap();
    fit(
        params,
        data.len(),
        cfg,
        &mut rng,
        |g, chunk, rng| {
            let items: Vec<&M::Item> = chunk.iter().map(|&i| &data[i]).collect();
            let t: Vec<usize> = items.iter().map(|_| rng.random_range(1..=cap)).collect();
            let rows: usize = items.iter().map(|i| model.clean(i).rows).sum();
            let eps = normal_mat(rng, rows, 2);
            denoising_loss(model, g, &items, &t, &eps, sched)
        },
        on_epoch,
    )
}

/// A two-layer perceptron denoiser over `[x_t, embedding(t)]`, used for testing the training loop.
#[derive(Clone, Debug)]
pub struct ToyDenoiser {
    pub embed_dim: usize,
    pub hidden: Linear,
    pub out: Linear,
}

impl ToyDenoiser {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, embed_dim: usize, hidden: usize) -> Self {
        let mut b = Builder::new(store, rng);
        let h = b.linear("toy.hidden", 2 + embed_dim, hidden);
        let o = b.linear("toy.out", hidden, 2);
        ToyDenoiser { embed_dim, hidden: h, out: o }
    }
}

impl Denoiser for ToyDenoiser {
    type Item = Mat;

    fn clean(&self, item: &Mat) -> Mat {
        item.clone()
    }

    fn predict_noise(&self, g: &mut Graph, x_t: Var, t: &[usize], items: &[&Mat]) -> Var {
        let per_row: Vec<usize> = items.iter().zip(t).flat_map(|(m, &ti)| std::iter::repeat_n(ti, m.rows)).collect();
        let temb = g.input(timestep_rows(&per_row, self.embed_dim).expect("valid embedding width"));
        let z = g.concat_cols(&[x_t, temb]);
        let h = self.hidden.forward(g, z);
        let h = g.silu(h);
        self.out.forward(g, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_hand_product() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        assert!((s.sigma(1) - (0.1f64 / 0.9).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn invalid_bounds_rejected() {
        assert!(NoiseSchedule::linear(1, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn embedding_edge_cases() {
        let e = timestep_embedding(0.0, 8).unwrap();
        assert_eq!(e, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let e = timestep_embedding(1.0, 8).unwrap();
        assert_eq!(e[0], 1f64.sin());
        assert!(timestep_embedding(1.0, 7).is_err());
        assert!(timestep_embedding(1.0, 2).is_err());
    }

    #[test]
    fn diffuse_limits() {
        let s = NoiseSchedule::default();
        let x0 = [0.5, -1.0, 2.0];
        assert_eq!(forward_diffuse(&x0, 0, &[3.0, 1.0, -2.0], &s).unwrap(), x0.to_vec());
        let no_noise = forward_diffuse(&x0, 500, &[0.0; 3], &s).unwrap();
        for (a, b) in no_noise.iter().zip(x0) {
            assert!((a - s.alpha_bar(500).sqrt() * b).abs() < 1e-15);
        }
        assert!(matches!(forward_diffuse(&x0, 1001, &[0.0; 3], &s), Err(Error::Usage(_))));
        assert!(matches!(forward_diffuse(&x0, 1, &[0.0; 2], &s), Err(Error::Shape(_))));
    }

    #[test]
    fn nearest_step_inverts_sigma() {
        let s = NoiseSchedule::default();
        for t in [1, 17, 400, 1000] {
            assert_eq!(s.nearest_step(s.sigma(t)), t);
        }
        assert_eq!(s.nearest_step(0.0), 0);
    }
}
