//! Reusable layers built on [`Graph`] operations.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::graph::{AttnLayout, Graph, Segment, Var};
use crate::mat::Mat;
use crate::params::{ParamId, ParamStore};

/// Registers parameters under a name prefix with seeded initialization.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        Builder { store, rng, prefix: String::new() }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let saved = self.prefix.clone();
        self.prefix = if saved.is_empty() { name.to_string() } else { format!("{saved}.{name}") };
        let out = f(self);
        self.prefix = saved;
        out
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64) -> ParamId {
        let data = if bound > 0.0 {
            let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
            (0..rows * cols).map(|_| dist.sample(self.rng)).collect()
        } else {
            vec![0.0; rows * cols]
        };
        let full = self.full_name(name);
        self.store.add(full, Mat::from_vec(rows, cols, data))
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.uniform(name, rows, cols, 0.0)
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        self.scoped(name, |b| Linear { w: b.uniform("w", d_in, d_out, bound), b: b.zeros("b", 1, d_out) })
    }

    /// A linear layer whose weight and bias start at zero.
    pub fn linear_zero(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        self.scoped(name, |b| Linear { w: b.zeros("w", d_in, d_out), b: b.zeros("b", 1, d_out) })
    }

    pub fn mlp(&mut self, name: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Mlp {
        self.scoped(name, |b| Mlp { fc1: b.linear("fc1", d_in, d_hidden), fc2: b.linear("fc2", d_hidden, d_out) })
    }

    pub fn attention(&mut self, name: &str, d_model: usize, heads: usize) -> MultiHeadAttention {
        assert!(d_model % heads == 0, "width {d_model} not divisible by {heads} heads");
        self.scoped(name, |b| MultiHeadAttention {
            q: b.linear("q", d_model, d_model),
            k: b.linear("k", d_model, d_model),
            v: b.linear("v", d_model, d_model),
            o: b.linear("o", d_model, d_model),
            heads,
        })
    }

    pub fn gru(&mut self, name: &str, d_in: usize, d_hidden: usize) -> Gru {
        let bound = 1.0 / (d_hidden as f64).sqrt();
        self.scoped(name, |b| Gru {
            w_x: b.uniform("w_x", d_in, 3 * d_hidden, bound),
            b_x: b.uniform("b_x", 1, 3 * d_hidden, bound),
            w_h: b.uniform("w_h", d_hidden, 3 * d_hidden, bound),
            b_h: b.uniform("b_h", 1, 3 * d_hidden, bound),
            hidden: d_hidden,
        })
    }

    pub fn embedding(&mut self, name: &str, count: usize, dim: usize) -> Embedding {
        self.scoped(name, |b| Embedding { table: b.uniform("table", count, dim, 1.0 / (dim as f64).sqrt()), count })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, Some(b))
    }

    pub fn dims(&self, store: &ParamStore) -> (usize, usize) {
        store.get(self.w).shape()
    }
}

/// Two affine layers with a SiLU between them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.silu(h);
        self.fc2.forward(g, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    /// Self-attention within each row segment of `x`.
    pub fn self_attend(&self, g: &mut Graph, x: Var, segs: Vec<Segment>) -> Var {
        let layout = Rc::new(AttnLayout::self_attention(self.heads, segs));
        self.cross_attend(g, x, x, layout)
    }

    /// Queries from `xq`, keys and values from `xkv`, paired by `layout`.
    pub fn cross_attend(&self, g: &mut Graph, xq: Var, xkv: Var, layout: Rc<AttnLayout>) -> Var {
        let q = self.q.forward(g, xq);
        let k = self.k.forward(g, xkv);
        let v = self.v.forward(g, xkv);
        let a = g.attention(q, k, v, layout);
        self.o.forward(g, a)
    }
}

/// Gated recurrent unit (reset gate applied after the hidden projection).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gru {
    pub w_x: ParamId,
    pub b_x: ParamId,
    pub w_h: ParamId,
    pub b_h: ParamId,
    pub hidden: usize,
}

impl Gru {
    /// Runs the recurrence over each segment of `x` and returns the per-segment
    /// mean of the hidden states, one row per segment.
    ///
    /// Segments may have different lengths; those of equal length are advanced
    /// together.
    pub fn mean_states(&self, g: &mut Graph, x: Var, segs: &[Segment], reverse: bool) -> Var {
        let hsz = self.hidden;
        let (w_x, b_x, w_h, b_h) = (g.param(self.w_x), g.param(self.b_x), g.param(self.w_h), g.param(self.b_h));
        let xp = g.linear(x, w_x, Some(b_x));

        let mut lens: Vec<usize> = segs.iter().map(|s| s.len).collect();
        lens.sort_unstable();
        lens.dedup();

        let mut pieces = Vec::new();
        let mut order = Vec::new();
        for len in lens {
            let members: Vec<usize> = (0..segs.len()).filter(|&i| segs[i].len == len).collect();
            let n = members.len();
            let mut h = g.input(Mat::zeros(n, hsz));
            let mut acc: Option<Var> = None;
            for step in 0..len {
                let pos = if reverse { len - 1 - step } else { step };
                let idx: Vec<usize> = members.iter().map(|&m| segs[m].start + pos).collect();
                let xs = g.gather_rows(xp, idx);
                let hp = g.linear(h, w_h, Some(b_h));
                let xr = g.slice_cols(xs, 0, hsz);
                let xz = g.slice_cols(xs, hsz, hsz);
                let xn = g.slice_cols(xs, 2 * hsz, hsz);
                let hr = g.slice_cols(hp, 0, hsz);
                let hz = g.slice_cols(hp, hsz, hsz);
                let hn = g.slice_cols(hp, 2 * hsz, hsz);
                let r = g.add(xr, hr);
                let r = g.sigmoid(r);
                let z = g.add(xz, hz);
                let z = g.sigmoid(z);
                let rn = g.mul(r, hn);
                let nn = g.add(xn, rn);
                let nn = g.tanh(nn);
                // h' = n + z * (h - n)
                let diff = g.sub(h, nn);
                let zd = g.mul(z, diff);
                h = g.add(nn, zd);
                acc = Some(match acc {
                    Some(a) => g.add(a, h),
                    None => h,
                });
            }
            let mean = g.scale(acc.expect("segments are non-empty"), 1.0 / len as f64);
            pieces.push(mean);
            order.extend(members);
        }
        let stacked = if pieces.len() == 1 { pieces[0] } else { g.concat_rows(&pieces) };
        // restore original segment order
        let mut inv = vec![0; order.len()];
        for (row, &seg) in order.iter().enumerate() {
            inv[seg] = row;
        }
        if inv.iter().enumerate().all(|(i, &r)| i == r) {
            stacked
        } else {
            g.gather_rows(stacked, inv)
        }
    }
}

/// Forward and backward GRUs whose mean states are concatenated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiGru {
    pub fwd: Gru,
    pub bwd: Gru,
}

impl BiGru {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, d_in: usize, d_out: usize) -> Self {
        assert!(d_out % 2 == 0, "BiGru output width must be even");
        b.scoped(name, |b| BiGru { fwd: b.gru("fwd", d_in, d_out / 2), bwd: b.gru("bwd", d_in, d_out / 2) })
    }

    pub fn mean_states(&self, g: &mut Graph, x: Var, segs: &[Segment]) -> Var {
        let f = self.fwd.mean_states(g, x, segs, false);
        let b = self.bwd.mean_states(g, x, segs, true);
        g.concat_cols(&[f, b])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub table: ParamId,
    pub count: usize,
}

impl Embedding {
    /// Looks up rows; indices beyond the table are clamped to the last row.
    pub fn lookup(&self, g: &mut Graph, idx: &[usize]) -> Var {
        let t = g.param(self.table);
        let idx = idx.iter().map(|&i| i.min(self.count - 1)).collect();
        g.gather_rows(t, idx)
    }
}
