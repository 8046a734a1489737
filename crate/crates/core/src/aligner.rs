//! Per-user timestep alignment.
//!
//! Each user's coarse estimate is treated as a diffusion sample at a source
//! step derived from its equivalent noise power, and a small transformer
//! encoder moves it to a common destination step (the cleanest user's).

use mudemod_nn::{Builder, Graph, Linear, Mat, Mlp, MultiHeadAttention, ParamStore, Segment, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cplx::{complexify_rows, realify, C64};
use crate::diffusion::{fit, normal_mat, timestep_rows, NoiseSchedule, TrainConfig, TrainReport};
use crate::error::{Error, Result};
use crate::preset::Preset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignerConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub timesteps: usize,
}

impl AlignerConfig {
    pub fn preset(p: Preset) -> Self {
        let (depth, width, heads) = match p {
            Preset::Small => (1, 64, 4),
            Preset::Base => (1, 64, 4),
            Preset::Large => (2, 64, 4),
        };
        AlignerConfig { depth, width, heads, timesteps: crate::diffusion::DEFAULT_TIMESTEPS }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.heads == 0 || self.width == 0 {
            return Err(Error::Config("aligner depth, width and heads must be positive".into()));
        }
        if self.width % self.heads != 0 || self.width % 2 != 0 || self.width < 4 {
            return Err(Error::Config(format!(
                "aligner width {} must be even, at least 4 and divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ffn: Mlp,
}

impl EncoderLayer {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, width: usize, heads: usize) -> Self {
        b.scoped(name, |b| EncoderLayer { attn: b.attention("attn", width, heads), ffn: b.mlp("ffn", width, 4 * width, width) })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, segs: &[Segment]) -> Var {
        let h = g.layer_norm(x);
        let a = self.attn.self_attend(g, h, segs.to_vec());
        let x = g.add(x, a);
        let h = g.layer_norm(x);
        let f = self.ffn.forward(g, h);
        g.add(x, f)
    }
}

#[derive(Clone, Debug)]
pub struct Aligner {
    pub cfg: AlignerConfig,
    pub input: Linear,
    pub time: Mlp,
    pub layers: Vec<EncoderLayer>,
    pub noise_out: Linear,
    pub decode: Linear,
}

/// One sequence in an alignment batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AlignJob {
    pub len: usize,
    pub t_src: usize,
    pub t_dst: usize,
}

impl Aligner {
    pub fn new<R: Rng>(cfg: AlignerConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let mut b = Builder::new(store, rng);
        Ok(b.scoped("aligner", |b| Aligner {
            input: b.linear("input", 2, d),
            time: b.mlp("time", d, d, d),
            layers: (0..cfg.depth).map(|i| EncoderLayer::new(b, &format!("layer{i}"), d, cfg.heads)).collect(),
            noise_out: b.linear_zero("noise_out", d, d),
            decode: b.linear("decode", d, 2),
            cfg,
        }))
    }

    /// Builds a fresh parameter store for `cfg` from a seed.
    pub fn init(cfg: AlignerConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let model = Aligner::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok((model, store))
    }

    /// Aligns the row-stacked sequences of `x` (`[sum len, 2]`) described by `jobs`.
    pub fn forward_graph(&self, g: &mut Graph, x: Var, jobs: &[AlignJob]) -> Var {
        let d = self.cfg.width;
        let n: usize = jobs.iter().map(|j| j.len).sum();
        let pos: Vec<usize> = jobs.iter().flat_map(|j| 0..j.len).collect();
        let xe = self.input.forward(g, x);
        let xpe = g.rope(xe, pos);

        let steps: Vec<usize> = jobs.iter().flat_map(|j| [j.t_dst, j.t_src]).collect();
        let temb = g.input(timestep_rows(&steps, d).expect("validated width"));
        let tokens_t = self.time.forward(g, temb);

        let all = g.concat_rows(&[xpe, tokens_t]);
        let mut idx = Vec::with_capacity(n + 2 * jobs.len());
        let mut sig_rows = Vec::with_capacity(n);
        let mut start = 0;
        for (b, j) in jobs.iter().enumerate() {
            for r in 0..j.len {
                sig_rows.push(idx.len());
                idx.push(start + r);
            }
            idx.push(n + 2 * b);
            idx.push(n + 2 * b + 1);
            start += j.len;
        }
        let segs = Segment::consecutive(jobs.iter().map(|j| j.len + 2));
        let mut z = g.gather_rows(all, idx);
        for layer in &self.layers {
            z = layer.forward(g, z, &segs);
        }
        let zs = g.gather_rows(z, sig_rows);
        let zs = g.layer_norm(zs);
        let noise = self.noise_out.forward(g, zs);
        let clean = g.sub(xpe, noise);
        self.decode.forward(g, clean)
    }

    /// Aligns a batch of complex vectors; each entry is `(x, t_src, t_dst)`.
    pub fn align_batch(&self, params: &ParamStore, batch: &[(&[C64], usize, usize)]) -> Result<Vec<Vec<C64>>> {
        let mut jobs = Vec::with_capacity(batch.len());
        let mut rows = Vec::new();
        for &(x, t_src, t_dst) in batch {
            if t_dst > t_src {
                return Err(Error::Usage(format!("destination step {t_dst} is above source step {t_src}")));
            }
            if t_src > self.cfg.timesteps {
                return Err(Error::Usage(format!("source step {t_src} beyond T = {}", self.cfg.timesteps)));
            }
            if x.is_empty() {
                return Err(Error::Shape("cannot align an empty symbol vector".into()));
            }
            jobs.push(AlignJob { len: x.len(), t_src, t_dst });
            rows.extend_from_slice(x);
        }
        if jobs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new(params);
        let xv = g.input(realify(&rows));
        let out = self.forward_graph(&mut g, xv, &jobs);
        let m = g.value(out);
        let mut res = Vec::with_capacity(jobs.len());
        let mut start = 0;
        for j in &jobs {
            res.push(complexify_rows(m, start, j.len));
            start += j.len;
        }
        Ok(res)
    }
}

pub fn aligner_forward(x_hat: &[C64], t_src: usize, t_dst: usize, model: &Aligner, params: &ParamStore) -> Result<Vec<C64>> {
    Ok(model.align_batch(params, &[(x_hat, t_src, t_dst)])?.remove(0))
}

/// Source step for an estimate with equivalent noise power `sigma_bar_sq`:
/// `sigma_bar_sq (T - 1) / (alpha_bar_1 - alpha_bar_T)`, rounded and clamped to `[0, T - 1]`.
pub fn compute_source_timestep(sigma_bar_sq: f64, sched: &NoiseSchedule) -> usize {
    let t_max = sched.timesteps();
    if !(sigma_bar_sq > 0.0) {
        return 0;
    }
    let span = sched.alpha_bar(1) - sched.alpha_bar(t_max);
    let raw = sigma_bar_sq * (t_max - 1) as f64 / span;
    raw.round().clamp(0.0, (t_max - 1) as f64) as usize
}

/// The common destination step: the smallest source step.
pub fn align_target(steps: &[usize]) -> Result<usize> {
    steps.iter().copied().min().ok_or_else(|| Error::Usage("no users to align".into()))
}

/// Mean squared error of aligning `x(t_src)` to `x(t_dst)` for the given batch.
fn pair_loss(model: &Aligner, g: &mut Graph, clean: &[&[C64]], steps: &[(usize, usize)], eps: &Mat, sched: &NoiseSchedule) -> Var {
    let rows: Vec<C64> = clean.iter().flat_map(|c| c.iter().copied()).collect();
    let x0 = realify(&rows);
    let mut src = Mat::zeros(x0.rows, 2);
    let mut dst = Mat::zeros(x0.rows, 2);
    let mut jobs = Vec::with_capacity(clean.len());
    let mut r0 = 0;
    for (c, &(t_src, t_dst)) in clean.iter().zip(steps) {
        let (a_s, a_d) = (sched.alpha_bar(t_src), sched.alpha_bar(t_dst));
        for r in r0..r0 + c.len() {
            for k in 0..2 {
                let (x, e) = (x0.get(r, k), eps.get(r, k));
                src.set(r, k, a_s.sqrt() * x + (1.0 - a_s).sqrt() * e);
                dst.set(r, k, a_d.sqrt() * x + (1.0 - a_d).sqrt() * e);
            }
        }
        jobs.push(AlignJob { len: c.len(), t_src, t_dst });
        r0 += c.len();
    }
    let xs = g.input(src);
    let pred = model.forward_graph(g, xs, &jobs);
    let target = g.input(dst);
    let diff = g.sub(pred, target);
    let sq = g.sum_sq(diff);
    g.scale(sq, 1.0 / eps.len() as f64)
}

/// Draws `t_dst < t_src`, uniform over such pairs in `0..=cap`.
fn draw_pair<R: Rng + ?Sized>(rng: &mut R, cap: usize) -> (usize, usize) {
    let a = rng.random_range(0..=cap);
    let mut b = rng.random_range(0..cap);
    if b >= a {
        b += 1;
    }
    (a.max(b), a.min(b))
}

/// Trains the aligner on clean symbol vectors. Source steps are capped at
/// `min(max_timestep, T - 1)`.
pub fn train_aligner(
    model: &Aligner,
    params: &mut ParamStore,
    data: &[Vec<C64>],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate(sched)?;
    if model.cfg.timesteps != sched.timesteps() {
        return Err(Error::Config("aligner and schedule disagree on T".into()));
    }
    if data.iter().any(Vec::is_empty) {
        return Err(Error::Shape("training vectors must be non-empty".into()));
    }
    let cap = cfg.timestep_cap().min(sched.timesteps() - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    fit(
        params,
        data.len(),
        cfg,
        &mut rng,
        |g, chunk, rng| {
            let clean: Vec<&[C64]> = chunk.iter().map(|&i| data[i].as_slice()).collect();
            let steps: Vec<(usize, usize)> = clean.iter().map(|_| draw_pair(rng, cap)).collect();
            let rows: usize = clean.iter().map(|c| c.len()).sum();
            let eps = normal_mat(rng, rows, 2);
            pair_loss(model, g, &clean, &steps, &eps, sched)
        },
        on_epoch,
    )
}
