//! Conditional diffusion transformer for multi-user symbol refinement.
//!
//! Signal tokens (one per transmit stream) are denoised by a stack of
//! adaptive-layer-norm blocks whose modulation comes from a single condition
//! vector per sample. That vector fuses per-user channel embeddings with a
//! received-signal embedding through cross-attention.

use std::rc::Rc;

use mudemod_nn::{
    AttnLayout, BiGru, Builder, Embedding, Graph, Linear, Mat, Mlp, MultiHeadAttention, ParamStore, Segment, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cplx::{complexify_rows, realify, CMatrix, C64, SQRT2};
use crate::diffusion::{timestep_rows, Denoiser, NoiseSchedule, DEFAULT_TIMESTEPS};
use crate::error::{Error, Result};
use crate::preset::Preset;
use crate::sysmodel::DemodSample;

/// Rows of the user-index, user-count and transmit-antenna embedding tables.
pub const MAX_USERS: usize = 16;
/// Rows of the receive-antenna embedding table.
pub const MAX_RX_ANTENNAS: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DitConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub patch: (usize, usize),
    pub timesteps: usize,
}

impl DitConfig {
    pub fn preset(p: Preset) -> Self {
        let (depth, width) = match p {
            Preset::Small => (3, 64),
            Preset::Base => (6, 128),
            Preset::Large => (8, 256),
        };
        DitConfig { depth, width, heads: 8, patch: (4, 4), timesteps: DEFAULT_TIMESTEPS }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.heads == 0 || self.width < 4 || self.width % 2 != 0 {
            return Err(Error::Config("DiT depth and heads must be positive and width even and at least 4".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!("DiT width {} not divisible by {} heads", self.width, self.heads)));
        }
        if self.patch.0 == 0 || self.patch.1 == 0 {
            return Err(Error::Config("patch dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Everything the denoiser is conditioned on for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSet {
    pub h_hat: Vec<CMatrix>,
    pub y: Vec<C64>,
    pub t: usize,
    /// Identity of each user, used for the user embedding.
    pub user_ids: Vec<usize>,
}

impl ConditionSet {
    pub fn new(h_hat: Vec<CMatrix>, y: Vec<C64>, t: usize) -> Self {
        let user_ids = (0..h_hat.len()).collect();
        ConditionSet { h_hat, y, t, user_ids }
    }

    pub fn from_sample(s: &DemodSample, t: usize) -> Self {
        ConditionSet::new(s.estimates.h_hat.clone(), s.y.clone(), t)
    }

    pub fn users(&self) -> usize {
        self.h_hat.len()
    }

    pub fn rx_antennas(&self) -> usize {
        self.y.len()
    }

    pub fn tx_antennas(&self) -> Vec<usize> {
        self.h_hat.iter().map(|h| h.ncols()).collect()
    }

    pub fn streams(&self) -> usize {
        self.h_hat.iter().map(|h| h.ncols()).sum()
    }

    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if self.h_hat.is_empty() {
            return Err(Error::Shape("condition set has no users".into()));
        }
        if self.user_ids.len() != self.h_hat.len() {
            return Err(Error::Shape("one user id per channel matrix is required".into()));
        }
        for (u, h) in self.h_hat.iter().enumerate() {
            if h.nrows() != self.y.len() || h.ncols() == 0 {
                return Err(Error::Shape(format!(
                    "user {u}: channel is {}x{}, received vector has {} entries",
                    h.nrows(),
                    h.ncols(),
                    self.y.len()
                )));
            }
        }
        if self.t > timesteps {
            return Err(Error::Usage(format!("timestep {} beyond T = {timesteps}", self.t)));
        }
        Ok(())
    }
}

/// Shared structure of the two condition encoders: tokens plus a time token go
/// through self-attention and are averaged; a gate computed from side
/// information scales the averaged bidirectional GRU states.
#[derive(Clone, Debug)]
struct TokenSummarizer {
    attn: MultiHeadAttention,
    gru: BiGru,
    gate: Mlp,
}

impl TokenSummarizer {
    fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, d: usize, heads: usize, side: usize) -> Self {
        b.scoped(name, |b| TokenSummarizer {
            attn: b.attention("attn", d, heads),
            gru: BiGru::new(b, "gru", d, d),
            gate: b.mlp("gate", side * d, d, d),
        })
    }

    /// `tokens` holds the groups back to back as described by `segs`;
    /// `time_rows[i]` is the row of `time` joined to group `i`.
    fn forward(&self, g: &mut Graph, tokens: Var, segs: &[Segment], time: Var, time_rows: &[usize], side: Var) -> Var {
        let n: usize = segs.iter().map(|s| s.len).sum();
        let all = g.concat_rows(&[tokens, time]);
        let mut idx = Vec::with_capacity(n + segs.len());
        for (s, &tr) in segs.iter().zip(time_rows) {
            idx.extend(s.rows());
            idx.push(n + tr);
        }
        let seq = g.gather_rows(all, idx);
        let seq_segs = Segment::consecutive(segs.iter().map(|s| s.len + 1));
        let att = self.attn.self_attend(g, seq, seq_segs.clone());
        let mixed = g.add(seq, att);
        let branch_attn = g.segment_mean(mixed, seq_segs);

        let gate = self.gate.forward(g, side);
        let rec = self.gru.mean_states(g, tokens, segs);
        let branch_gru = g.mul(gate, rec);
        g.add(branch_attn, branch_gru)
    }
}

/// Adaptive-layer-norm denoising block with a scalar attention gate.
#[derive(Clone, Debug)]
pub struct DitBlock {
    pub modulation: Linear,
    pub attn: MultiHeadAttention,
    pub ffn: Mlp,
    pub width: usize,
}

impl DitBlock {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, width: usize, heads: usize) -> Self {
        b.scoped(name, |b| DitBlock {
            modulation: b.linear_zero("modulation", width, 4 * width + 1),
            attn: b.attention("attn", width, heads),
            ffn: b.mlp("ffn", width, 4 * width, width),
            width,
        })
    }

    /// `cond` is `SiLU(c)` with one row per sample; `row_sample[r]` names the
    /// sample of token row `r`, and `segs` groups token rows by sample.
    pub fn forward(&self, g: &mut Graph, z: Var, cond: Var, row_sample: &[usize], segs: &[Segment]) -> Var {
        let d = self.width;
        let m = self.modulation.forward(g, cond);
        let m = g.gather_rows(m, row_sample.to_vec());
        let gamma1 = g.slice_cols(m, 0, d);
        let beta1 = g.slice_cols(m, d, d);
        let gamma2 = g.slice_cols(m, 2 * d, d);
        let beta2 = g.slice_cols(m, 3 * d, d);
        let alpha = g.slice_cols(m, 4 * d, 1);

        let z_in = modulate(g, z, gamma1, beta1);
        let att = self.attn.self_attend(g, z_in, segs.to_vec());
        let gated = g.mul_col(att, alpha);
        let z_res = g.add(gated, z_in);
        let h = modulate(g, z_res, gamma2, beta2);
        let z_ffn = self.ffn.forward(g, h);
        g.add(z_res, z_ffn)
    }
}

fn modulate(g: &mut Graph, x: Var, gamma: Var, beta: Var) -> Var {
    let n = g.layer_norm(x);
    let scale = g.affine(gamma, 1.0, 1.0);
    let s = g.mul(n, scale);
    g.add(s, beta)
}

#[derive(Clone, Debug)]
pub struct WirelessDit {
    pub cfg: DitConfig,
    signal_embed: Mlp,
    time: Mlp,
    patch_proj: Linear,
    patch_mlp: Mlp,
    csi: TokenSummarizer,
    y_proj: Linear,
    y_mlp: Mlp,
    y_summary: TokenSummarizer,
    user_emb: Embedding,
    users_emb: Embedding,
    rx_emb: Embedding,
    tx_emb: Embedding,
    fuse_attn: MultiHeadAttention,
    fuse_out: Linear,
    pub blocks: Vec<DitBlock>,
    head: Mlp,
}

/// Row bookkeeping for one batch of condition sets.
struct BatchLayout {
    signal_segs: Vec<Segment>,
    row_sample: Vec<usize>,
    signal_pos: Vec<usize>,
}

impl BatchLayout {
    fn new(conds: &[&ConditionSet]) -> Self {
        let signal_segs = Segment::consecutive(conds.iter().map(|c| c.streams()));
        let mut row_sample = Vec::new();
        let mut signal_pos = Vec::new();
        for (b, s) in signal_segs.iter().enumerate() {
            row_sample.extend(std::iter::repeat_n(b, s.len));
            signal_pos.extend(0..s.len);
        }
        BatchLayout { signal_segs, row_sample, signal_pos }
    }
}

impl WirelessDit {
    pub fn new<R: Rng>(cfg: DitConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let h = cfg.heads;
        let patch_len = 2 * cfg.patch.0 * cfg.patch.1;
        let mut b = Builder::new(store, rng);
        Ok(b.scoped("dit", |b| WirelessDit {
            signal_embed: b.mlp("signal_embed", 2, d, d),
            time: b.mlp("time", d, d, d),
            patch_proj: b.linear("patch_proj", patch_len, d),
            patch_mlp: b.mlp("patch_mlp", d, d, d),
            csi: TokenSummarizer::new(b, "csi", d, h, 3),
            y_proj: b.linear("y_proj", 2, d),
            y_mlp: b.mlp("y_mlp", d, d, d),
            y_summary: TokenSummarizer::new(b, "y", d, h, 2),
            user_emb: b.embedding("user_emb", MAX_USERS, d),
            users_emb: b.embedding("users_emb", MAX_USERS + 1, d),
            rx_emb: b.embedding("rx_emb", MAX_RX_ANTENNAS + 1, d),
            tx_emb: b.embedding("tx_emb", MAX_USERS + 1, d),
            fuse_attn: b.attention("fuse", d, h),
            fuse_out: b.linear("fuse_out", d, d),
            blocks: (0..cfg.depth).map(|i| DitBlock::new(b, &format!("block{i}"), d, h)).collect(),
            head: b.mlp("head", d, d, 2),
            cfg,
        }))
    }

    pub fn init(cfg: DitConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let model = WirelessDit::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok((model, store))
    }

    /// Number of patches a `rows x cols` channel splits into.
    pub fn patch_count(&self, rows: usize, cols: usize) -> usize {
        rows.div_ceil(self.cfg.patch.0) * cols.div_ceil(self.cfg.patch.1)
    }

    /// Zero-padded, realified patches of one channel matrix, one row per patch
    /// in row-major patch order. Each row lists the real plane then the
    /// imaginary plane of the patch.
    pub fn patchify(&self, h: &CMatrix) -> Mat {
        let (px, py) = self.cfg.patch;
        let (gr, gc) = (h.nrows().div_ceil(px), h.ncols().div_ceil(py));
        let mut out = Mat::zeros(gr * gc, 2 * px * py);
        for pr in 0..gr {
            for pc in 0..gc {
                let row = out.row_mut(pr * gc + pc);
                for i in 0..px {
                    for j in 0..py {
                        let (r, c) = (pr * px + i, pc * py + j);
                        if r < h.nrows() && c < h.ncols() {
                            let v = h[(r, c)] * SQRT2;
                            row[i * py + j] = v.re;
                            row[px * py + i * py + j] = v.im;
                        }
                    }
                }
            }
        }
        out
    }

    fn time_tokens(&self, g: &mut Graph, conds: &[&ConditionSet]) -> Var {
        let steps: Vec<usize> = conds.iter().map(|c| c.t).collect();
        let e = g.input(timestep_rows(&steps, self.cfg.width).expect("validated width"));
        self.time.forward(g, e)
    }

    /// Per-user channel conditions, one row per (sample, user) in order.
    fn csi_embed(&self, g: &mut Graph, conds: &[&ConditionSet], time: Var) -> Var {
        let mut patches = Vec::new();
        let mut lens = Vec::new();
        let mut pos = Vec::new();
        let mut time_rows = Vec::new();
        let (mut uid, mut rx, mut tx) = (Vec::new(), Vec::new(), Vec::new());
        for (b, c) in conds.iter().enumerate() {
            for (h, &id) in c.h_hat.iter().zip(&c.user_ids) {
                let p = self.patchify(h);
                lens.push(p.rows);
                pos.extend(0..p.rows);
                patches.push(p);
                time_rows.push(b);
                uid.push(id);
                rx.push(h.nrows());
                tx.push(h.ncols());
            }
        }
        let width = patches[0].cols;
        let rows: usize = lens.iter().sum();
        let data = patches.into_iter().flat_map(|p| p.data).collect();
        let p = g.input(Mat::from_vec(rows, width, data));
        let tok = self.patch_proj.forward(g, p);
        let tok = self.patch_mlp.forward(g, tok);
        let tok = g.rope(tok, pos);

        let ue = self.user_emb.lookup(g, &uid);
        let re = self.rx_emb.lookup(g, &rx);
        let te = self.tx_emb.lookup(g, &tx);
        let side = g.concat_cols(&[ue, re, te]);
        self.csi.forward(g, tok, &Segment::consecutive(lens), time, &time_rows, side)
    }

    /// Received-signal condition, one row per sample.
    fn y_embed(&self, g: &mut Graph, conds: &[&ConditionSet], time: Var) -> Var {
        let mut rows = Vec::new();
        let mut pos = Vec::new();
        let mut lens = Vec::new();
        let (mut users, mut rx) = (Vec::new(), Vec::new());
        for c in conds {
            let scale = 1.0 / (c.streams() as f64).sqrt();
            rows.extend(c.y.iter().map(|v| v * scale));
            pos.extend(0..c.y.len());
            lens.push(c.y.len());
            users.push(c.users());
            rx.push(c.rx_antennas());
        }
        let yv = g.input(realify(&rows));
        let tok = self.y_proj.forward(g, yv);
        let tok = self.y_mlp.forward(g, tok);
        let tok = g.rope(tok, pos);

        let ue = self.users_emb.lookup(g, &users);
        let re = self.rx_emb.lookup(g, &rx);
        let side = g.concat_cols(&[ue, re]);
        let time_rows: Vec<usize> = (0..conds.len()).collect();
        self.y_summary.forward(g, tok, &Segment::consecutive(lens), time, &time_rows, side)
    }

    /// Cross-attention of the received-signal condition over the channel
    /// conditions of the same sample, followed by a residual and a linear head.
    pub fn fuse(&self, g: &mut Graph, c_h: Var, c_y: Var, users: &[usize]) -> Var {
        let layout = Rc::new(AttnLayout {
            heads: self.cfg.heads,
            q_segs: Segment::consecutive(std::iter::repeat_n(1, users.len())),
            k_segs: Segment::consecutive(users.iter().copied()),
        });
        let a = self.fuse_attn.cross_attend(g, c_y, c_h, layout);
        let r = g.add(a, c_y);
        self.fuse_out.forward(g, r)
    }

    /// Condition vectors `c`, one row per sample.
    pub fn condition(&self, g: &mut Graph, conds: &[&ConditionSet]) -> Var {
        let time = self.time_tokens(g, conds);
        let c_h = self.csi_embed(g, conds, time);
        let c_y = self.y_embed(g, conds, time);
        let users: Vec<usize> = conds.iter().map(|c| c.users()).collect();
        self.fuse(g, c_h, c_y, &users)
    }

    /// Noise prediction for the row-stacked realified signals `x_t`
    /// (`[sum of streams, 2]`), one condition set per sample.
    pub fn predict_eps(&self, g: &mut Graph, x_t: Var, conds: &[&ConditionSet]) -> Var {
        let layout = BatchLayout::new(conds);
        let c = self.condition(g, conds);
        let c = g.silu(c);
        let z = self.signal_embed.forward(g, x_t);
        let mut z = g.rope(z, layout.signal_pos.clone());
        for block in &self.blocks {
            z = block.forward(g, z, c, &layout.row_sample, &layout.signal_segs);
        }
        self.head.forward(g, z)
    }

    fn check(&self, conds: &[&ConditionSet], x_rows: &[usize]) -> Result<()> {
        for (i, (c, &n)) in conds.iter().zip(x_rows).enumerate() {
            c.validate(self.cfg.timesteps)?;
            if c.streams() != n {
                return Err(Error::Shape(format!("sample {i}: {n} signal entries for {} streams", c.streams())));
            }
            if c.users() > MAX_USERS {
                return Err(Error::Config(format!("at most {MAX_USERS} users are supported, got {}", c.users())));
            }
        }
        Ok(())
    }

    /// Noise predictions and clean-signal estimates for a batch of noisy
    /// per-sample vectors (all users concatenated in user order).
    pub fn forward(
        &self,
        params: &ParamStore,
        x_t: &[Vec<C64>],
        conds: &[&ConditionSet],
        sched: &NoiseSchedule,
    ) -> Result<Vec<(Vec<C64>, Vec<C64>)>> {
        if x_t.len() != conds.len() {
            return Err(Error::Shape("one condition set per sample is required".into()));
        }
        let lens: Vec<usize> = x_t.iter().map(Vec::len).collect();
        self.check(conds, &lens)?;
        if x_t.is_empty() {
            return Ok(Vec::new());
        }
        let eps = self.eps_batch(params, x_t, conds);
        Ok(x_t
            .iter()
            .zip(eps)
            .zip(conds)
            .map(|((x, e), c)| {
                let x0 = if c.t == 0 {
                    x.clone()
                } else {
                    let (a, s) = (sched.alpha_bar(c.t).sqrt(), (1.0 - sched.alpha_bar(c.t)).sqrt());
                    x.iter().zip(&e).map(|(xv, ev)| (xv - ev * s) / a).collect()
                };
                (e, x0)
            })
            .collect())
    }

    /// Unchecked noise predictions for a batch.
    fn eps_batch(&self, params: &ParamStore, x_t: &[Vec<C64>], conds: &[&ConditionSet]) -> Vec<Vec<C64>> {
        let rows: Vec<C64> = x_t.iter().flatten().copied().collect();
        let mut g = Graph::new(params);
        let xv = g.input(realify(&rows));
        let out = self.predict_eps(&mut g, xv, conds);
        let m = g.value(out);
        let mut start = 0;
        x_t.iter()
            .map(|x| {
                let v = complexify_rows(m, start, x.len());
                start += x.len();
                v
            })
            .collect()
    }

    /// Noise prediction of the variance-exploding view: `x` is at noise level
    /// `sigma(t)` without the `sqrt(alpha_bar)` contraction.
    fn eps_ve(&self, params: &ParamStore, x: &[Vec<C64>], conds: &[&ConditionSet], sched: &NoiseSchedule) -> Vec<Vec<C64>> {
        let scaled: Vec<Vec<C64>> = x
            .iter()
            .zip(conds)
            .map(|(v, c)| {
                let a = sched.alpha_bar(c.t).sqrt();
                v.iter().map(|z| z * a).collect()
            })
            .collect();
        self.eps_batch(params, &scaled, conds)
    }
}

impl Denoiser for WirelessDit {
    type Item = DemodSample;

    fn clean(&self, item: &DemodSample) -> Mat {
        let x: Vec<C64> = item.x.iter().flatten().copied().collect();
        realify(&x)
    }

    fn predict_noise(&self, g: &mut Graph, x_t: Var, t: &[usize], items: &[&DemodSample]) -> Var {
        let conds: Vec<ConditionSet> = items.iter().zip(t).map(|(s, &t)| ConditionSet::from_sample(s, t)).collect();
        let refs: Vec<&ConditionSet> = conds.iter().collect();
        self.predict_eps(g, x_t, &refs)
    }
}

/// Integer timesteps `t_start = t_0 > t_1 > ... > t_n = 0` evenly spaced in step index.
pub fn sampling_grid(t_start: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps == 0 {
        return Err(Error::Usage("at least one sampling step is required".into()));
    }
    if t_start == 0 {
        return Ok(vec![0]);
    }
    if n_steps > t_start {
        return Err(Error::Usage(format!("{n_steps} steps do not fit between step {t_start} and 0")));
    }
    Ok((0..=n_steps).map(|k| ((t_start * (n_steps - k)) as f64 / n_steps as f64).round() as usize).collect())
}

/// Multi-step probability-flow sampler.
///
/// Each entry of `x` is a variance-preserving sample at the condition's
/// timestep; the result is the clean-signal estimate after `n_steps` Euler
/// steps of the variance-exploding flow `dx = eps dsigma`.
pub fn teacher_sample(
    model: &WirelessDit,
    params: &ParamStore,
    x: &[Vec<C64>],
    conds: &[&ConditionSet],
    sched: &NoiseSchedule,
    n_steps: usize,
) -> Result<Vec<Vec<C64>>> {
    if x.len() != conds.len() {
        return Err(Error::Shape("one condition set per sample is required".into()));
    }
    let lens: Vec<usize> = x.iter().map(Vec::len).collect();
    model.check(conds, &lens)?;
    let grids = conds.iter().map(|c| sampling_grid(c.t, n_steps)).collect::<Result<Vec<_>>>()?;
    let mut cur: Vec<Vec<C64>> = x
        .iter()
        .zip(conds)
        .map(|(v, c)| {
            let a = sched.alpha_bar(c.t).sqrt();
            v.iter().map(|z| z / a).collect()
        })
        .collect();
    for k in 0..n_steps {
        let active: Vec<usize> = (0..x.len()).filter(|&i| grids[i].len() > k + 1).collect();
        if active.is_empty() {
            break;
        }
        let step_conds: Vec<ConditionSet> =
            active.iter().map(|&i| ConditionSet { t: grids[i][k], ..conds[i].clone() }).collect();
        let refs: Vec<&ConditionSet> = step_conds.iter().collect();
        let xs: Vec<Vec<C64>> = active.iter().map(|&i| cur[i].clone()).collect();
        let eps = model.eps_ve(params, &xs, &refs, sched);
        for (&i, e) in active.iter().zip(eps) {
            let ds = sched.sigma(grids[i][k + 1]) - sched.sigma(grids[i][k]);
            for (v, ev) in cur[i].iter_mut().zip(e) {
                *v += ev * ds;
            }
        }
    }
    Ok(cur)
}
