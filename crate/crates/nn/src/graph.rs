//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of a
//! scalar with respect to every parameter and every differentiable leaf.

use std::collections::HashMap;
use std::rc::Rc;

use crate::mat::{gemm, Mat};
use crate::params::{Grads, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A contiguous block of rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn new(start: usize, len: usize) -> Self {
        Segment { start, len }
    }

    /// Back-to-back segments with the given lengths, starting at row 0.
    pub fn consecutive(lens: impl IntoIterator<Item = usize>) -> Vec<Segment> {
        let mut start = 0;
        lens.into_iter()
            .map(|len| {
                let s = Segment { start, len };
                start += len;
                s
            })
            .collect()
    }

    #[inline]
    pub fn rows(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Pairing of query and key segments for batched multi-head attention.
///
/// Query segment `i` attends only over key segment `i`.
#[derive(Clone, Debug)]
pub struct AttnLayout {
    pub heads: usize,
    pub q_segs: Vec<Segment>,
    pub k_segs: Vec<Segment>,
}

impl AttnLayout {
    /// Self-attention within each segment.
    pub fn self_attention(heads: usize, segs: Vec<Segment>) -> Self {
        AttnLayout { heads, q_segs: segs.clone(), k_segs: segs }
    }

    fn prob_offsets(&self) -> (Vec<usize>, usize) {
        let mut offs = Vec::with_capacity(self.q_segs.len());
        let mut total = 0;
        for (q, k) in self.q_segs.iter().zip(&self.k_segs) {
            offs.push(total);
            total += self.heads * q.len * k.len;
        }
        (offs, total)
    }
}

enum Value {
    Owned(Mat),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var, Option<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Sqrt(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Rope { x: Var, pos: Vec<usize>, base: f64 },
    Attention { q: Var, k: Var, v: Var, layout: Rc<AttnLayout>, probs: Vec<f64> },
    Gather { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SegmentMean { x: Var, segs: Vec<Segment> },
    Sum(Var),
    SumSq(Var),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

const LN_EPS: f64 = 1e-6;

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph { params, nodes: Vec::with_capacity(256), param_vars: HashMap::new() }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Mat {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// A differentiable leaf whose gradient can be read back with [`Gradients::wrt`].
    pub fn variable(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: Value::Param(id), op: Op::Leaf, needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Mat::zeros(av.rows, bv.cols);
        gemm(1.0, av, false, bv, false, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `x · w + b` with `w` of shape `[in, out]` and `b` of shape `[1, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = Mat::zeros(xv.rows, wv.cols);
        gemm(1.0, xv, false, wv, false, 0.0, &mut out);
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.shape(), (1, out.cols), "linear bias shape");
            for r in 0..out.rows {
                for (o, bb) in out.row_mut(r).iter_mut().zip(&bv.data) {
                    *o += bb;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Linear(x, w, b), ng)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, what: &str) -> Mat {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "{what}: shape mismatch {:?} vs {:?}", av.shape(), bv.shape());
        Mat { rows: av.rows, cols: av.cols, data: av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect() }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y, "add");
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y, "sub");
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y, "mul");
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds the `[1, m]` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.shape(), (1, av.cols), "add_row: bias shape");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, bb) in out.row_mut(r).iter_mut().zip(&bv.data) {
                *o += bb;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::AddRow(a, b), ng)
    }

    /// Scales row `i` of `a` by `s[i, 0]`.
    pub fn mul_col(&mut self, a: Var, s: Var) -> Var {
        let (av, sv) = (self.value(a), self.value(s));
        assert_eq!(sv.shape(), (av.rows, 1), "mul_col: scale shape");
        let mut out = av.clone();
        for r in 0..out.rows {
            let k = sv.data[r];
            out.row_mut(r).iter_mut().for_each(|o| *o *= k);
        }
        let ng = self.ng(a) || self.ng(s);
        self.push(out, Op::MulCol(a, s), ng)
    }

    /// `mul * a + add`
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let out = self.value(a).map(|x| mul * x + add);
        let ng = self.ng(a);
        self.push(out, Op::Affine(a, mul), ng)
    }

    pub fn scale(&mut self, a: Var, mul: f64) -> Var {
        self.affine(a, mul, 0.0)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(out, Op::Silu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 0.5 * x * (1.0 + gelu_inner(x).tanh()));
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0).sqrt());
        let ng = self.ng(a);
        self.push(out, Op::Sqrt(a), ng)
    }

    /// Parameter-free layer normalization over each row.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.cols as f64;
        let mut out = xv.clone();
        let mut rstd = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * rs);
            rstd.push(rs);
        }
        let ng = self.ng(x);
        self.push(out, Op::LayerNorm { x, rstd }, ng)
    }

    /// Rotary position embedding: feature pair `(2i, 2i+1)` of row `r` is rotated
    /// by `pos[r] * base^(-2i/cols)`.
    pub fn rope(&mut self, x: Var, pos: Vec<usize>) -> Var {
        let base = 10000.0;
        let xv = self.value(x);
        assert_eq!(pos.len(), xv.rows, "rope: one position per row");
        let mut out = xv.clone();
        rope_rotate(&mut out, &pos, base, 1.0);
        let ng = self.ng(x);
        self.push(out, Op::Rope { x, pos, base }, ng)
    }

    /// Scaled dot-product multi-head attention (no projections).
    ///
    /// `q` is `[Nq, d]`, `k` is `[Nk, d]`, `v` is `[Nk, dv]`; `d` and `dv` must be
    /// divisible by the head count. The output has one row per query row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Rc<AttnLayout>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let h = layout.heads;
        assert_eq!(qv.cols, kv.cols, "attention: q/k width");
        assert_eq!(kv.rows, vv.rows, "attention: k/v rows");
        assert!(qv.cols % h == 0 && vv.cols % h == 0, "attention: width not divisible by heads");
        let dh = qv.cols / h;
        let dvh = vv.cols / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let (offs, total) = layout.prob_offsets();
        let mut probs = vec![0.0; total];
        let mut out = Mat::zeros(qv.rows, vv.cols);
        let mut scores = Vec::new();
        for (si, (qs, ks)) in layout.q_segs.iter().zip(&layout.k_segs).enumerate() {
            for head in 0..h {
                let base = offs[si] + head * qs.len * ks.len;
                for (qi, qr) in qs.rows().enumerate() {
                    let qrow = &qv.row(qr)[head * dh..(head + 1) * dh];
                    scores.clear();
                    let mut mx = f64::NEG_INFINITY;
                    for kr in ks.rows() {
                        let krow = &kv.row(kr)[head * dh..(head + 1) * dh];
                        let s = dot(qrow, krow) * scale;
                        mx = mx.max(s);
                        scores.push(s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - mx).exp();
                        z += *s;
                    }
                    let p = &mut probs[base + qi * ks.len..base + (qi + 1) * ks.len];
                    for (pj, s) in p.iter_mut().zip(&scores) {
                        *pj = s / z;
                    }
                    let orow = &mut out.data[qr * vv.cols + head * dvh..qr * vv.cols + (head + 1) * dvh];
                    for (j, kr) in ks.rows().enumerate() {
                        let vrow = &vv.row(kr)[head * dvh..(head + 1) * dvh];
                        let pj = p[j];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::Attention { q, k, v, layout, probs }, ng)
    }

    /// Attention probabilities recorded by an attention node, laid out per
    /// segment, then per head, as `q_len x k_len` row-major blocks.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `out[r] = x[idx[r]]`
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(idx.len(), xv.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(xv.row(i));
        }
        let ng = self.ng(x);
        self.push(out, Op::Gather { x, idx }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, cols, "concat_rows: width mismatch");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat_cols: row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols, "slice_cols out of range");
        let mut out = Mat::zeros(xv.rows, len);
        for r in 0..xv.rows {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        let ng = self.ng(x);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    /// Row-average within each segment; one output row per segment.
    pub fn segment_mean(&mut self, x: Var, segs: Vec<Segment>) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(segs.len(), xv.cols);
        for (s, seg) in segs.iter().enumerate() {
            assert!(seg.len > 0, "segment_mean: empty segment");
            let inv = 1.0 / seg.len as f64;
            let orow = out.row_mut(s);
            for r in seg.rows() {
                for (o, x) in orow.iter_mut().zip(xv.row(r)) {
                    *o += x * inv;
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::SegmentMean { x, segs }, ng)
    }

    /// Sum of all entries, as a `1 x 1` matrix.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Mat::filled(1, 1, s), Op::Sum(x), ng)
    }

    /// Sum of squared entries, as a `1 x 1` matrix.
    pub fn sum_sq(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_sq();
        let ng = self.ng(x);
        self.push(Mat::filled(1, 1, s), Op::SumSq(x), ng)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar(): not a 1x1 value");
        m.data[0]
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward: loss must be scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(i, &dy, &mut grads);
        }
        Gradients { grads, param_vars: self.param_vars.clone() }
    }

    fn backprop_node(&self, i: usize, dy: &Mat, grads: &mut [Option<Mat>]) {
        let y = match &self.nodes[i].value {
            Value::Owned(m) => m,
            Value::Param(_) => unreachable!("parameters are leaves"),
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut da = Mat::zeros(av.rows, av.cols);
                    gemm(1.0, dy, false, bv, true, 0.0, &mut da);
                    accumulate(grads, *a, da);
                }
                if self.ng(*b) {
                    let mut db = Mat::zeros(bv.rows, bv.cols);
                    gemm(1.0, av, true, dy, false, 0.0, &mut db);
                    accumulate(grads, *b, db);
                }
            }
            Op::Linear(x, w, b) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.ng(*x) {
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    gemm(1.0, dy, false, wv, true, 0.0, &mut dx);
                    accumulate(grads, *x, dx);
                }
                if self.ng(*w) {
                    let mut dw = Mat::zeros(wv.rows, wv.cols);
                    gemm(1.0, xv, true, dy, false, 0.0, &mut dw);
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        accumulate(grads, *b, col_sum(dy));
                    }
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, dy.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, dy.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    accumulate(grads, *a, hadamard(dy, bv));
                }
                if self.ng(*b) {
                    accumulate(grads, *b, hadamard(dy, av));
                }
            }
            Op::AddRow(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, col_sum(dy));
                }
            }
            Op::MulCol(a, s) => {
                let (av, sv) = (self.value(*a), self.value(*s));
                if self.ng(*a) {
                    let mut da = dy.clone();
                    for r in 0..da.rows {
                        let k = sv.data[r];
                        da.row_mut(r).iter_mut().for_each(|v| *v *= k);
                    }
                    accumulate(grads, *a, da);
                }
                if self.ng(*s) {
                    let mut ds = Mat::zeros(sv.rows, 1);
                    for r in 0..av.rows {
                        ds.data[r] = dot(dy.row(r), av.row(r));
                    }
                    accumulate(grads, *s, ds);
                }
            }
            Op::Affine(a, mul) => accumulate(grads, *a, dy.map(|v| v * mul)),
            Op::Silu(a) => {
                let av = self.value(*a);
                let d = zip_map(dy, av, |g, x| {
                    let s = sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                });
                accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => accumulate(grads, *a, zip_map(dy, y, |g, s| g * s * (1.0 - s))),
            Op::Tanh(a) => accumulate(grads, *a, zip_map(dy, y, |g, t| g * (1.0 - t * t))),
            Op::Gelu(a) => {
                let av = self.value(*a);
                let d = zip_map(dy, av, |g, x| {
                    let c = (2.0 / std::f64::consts::PI).sqrt();
                    let t = gelu_inner(x).tanh();
                    g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x))
                });
                accumulate(grads, *a, d);
            }
            Op::Sqrt(a) => {
                accumulate(grads, *a, zip_map(dy, y, |g, s| if s > 0.0 { g / (2.0 * s) } else { 0.0 }));
            }
            Op::LayerNorm { x, rstd } => {
                let n = y.cols as f64;
                let mut dx = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (g, yr) = (dy.row(r), y.row(r));
                    let mg = g.iter().sum::<f64>() / n;
                    let mgy = dot(g, yr) / n;
                    for ((d, gi), yi) in dx.row_mut(r).iter_mut().zip(g).zip(yr) {
                        *d = rstd[r] * (gi - mg - yi * mgy);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Rope { x, pos, base } => {
                let mut dx = dy.clone();
                rope_rotate(&mut dx, pos, *base, -1.0);
                accumulate(grads, *x, dx);
            }
            Op::Attention { q, k, v, layout, probs } => {
                self.attention_backward(*q, *k, *v, layout, probs, dy, grads);
            }
            Op::Gather { x, idx } => {
                let xv = self.value(*x);
                let mut dx = Mat::zeros(xv.rows, xv.cols);
                for (r, &src) in idx.iter().enumerate() {
                    for (d, g) in dx.row_mut(src).iter_mut().zip(dy.row(r)) {
                        *d += g;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows;
                    if self.ng(p) {
                        let slice = dy.data[off * dy.cols..(off + rows) * dy.cols].to_vec();
                        accumulate(grads, p, Mat::from_vec(rows, dy.cols, slice));
                    }
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.value(p).cols;
                    if self.ng(p) {
                        let mut d = Mat::zeros(dy.rows, cols);
                        for r in 0..dy.rows {
                            d.row_mut(r).copy_from_slice(&dy.row(r)[off..off + cols]);
                        }
                        accumulate(grads, p, d);
                    }
                    off += cols;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut dx = Mat::zeros(xv.rows, xv.cols);
                for r in 0..xv.rows {
                    dx.row_mut(r)[*start..*start + dy.cols].copy_from_slice(dy.row(r));
                }
                accumulate(grads, *x, dx);
            }
            Op::SegmentMean { x, segs } => {
                let xv = self.value(*x);
                let mut dx = Mat::zeros(xv.rows, xv.cols);
                for (s, seg) in segs.iter().enumerate() {
                    let inv = 1.0 / seg.len as f64;
                    for r in seg.rows() {
                        for (d, g) in dx.row_mut(r).iter_mut().zip(dy.row(s)) {
                            *d += g * inv;
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                accumulate(grads, *x, Mat::filled(xv.rows, xv.cols, dy.data[0]));
            }
            Op::SumSq(x) => {
                let g = 2.0 * dy.data[0];
                accumulate(grads, *x, self.value(*x).map(|v| g * v));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttnLayout,
        probs: &[f64],
        dy: &Mat,
        grads: &mut [Option<Mat>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let h = layout.heads;
        let dh = qv.cols / h;
        let dvh = vv.cols / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let (offs, _) = layout.prob_offsets();
        let mut dq = Mat::zeros(qv.rows, qv.cols);
        let mut dk = Mat::zeros(kv.rows, kv.cols);
        let mut dv = Mat::zeros(vv.rows, vv.cols);
        let mut ds = Vec::new();
        for (si, (qs, ks)) in layout.q_segs.iter().zip(&layout.k_segs).enumerate() {
            for head in 0..h {
                let base = offs[si] + head * qs.len * ks.len;
                for (qi, qr) in qs.rows().enumerate() {
                    let p = &probs[base + qi * ks.len..base + (qi + 1) * ks.len];
                    let gout = &dy.row(qr)[head * dvh..(head + 1) * dvh];
                    ds.clear();
                    let mut pdp = 0.0;
                    for (j, kr) in ks.rows().enumerate() {
                        let vrow = &vv.row(kr)[head * dvh..(head + 1) * dvh];
                        let dp = dot(gout, vrow);
                        pdp += p[j] * dp;
                        ds.push(dp);
                        let dvrow = &mut dv.data[kr * vv.cols + head * dvh..kr * vv.cols + (head + 1) * dvh];
                        for (d, g) in dvrow.iter_mut().zip(gout) {
                            *d += p[j] * g;
                        }
                    }
                    let qrow = &qv.row(qr)[head * dh..(head + 1) * dh];
                    for (j, kr) in ks.rows().enumerate() {
                        let s = p[j] * (ds[j] - pdp) * scale;
                        if s == 0.0 {
                            continue;
                        }
                        let krow = &kv.row(kr)[head * dh..(head + 1) * dh];
                        let dqrow = &mut dq.data[qr * qv.cols + head * dh..qr * qv.cols + (head + 1) * dh];
                        for (d, kk) in dqrow.iter_mut().zip(krow) {
                            *d += s * kk;
                        }
                        let dkrow = &mut dk.data[kr * kv.cols + head * dh..kr * kv.cols + (head + 1) * dh];
                        for (d, qq) in dkrow.iter_mut().zip(qrow) {
                            *d += s * qq;
                        }
                    }
                }
            }
        }
        if self.ng(q) {
            accumulate(grads, q, dq);
        }
        if self.ng(k) {
            accumulate(grads, k, dk);
        }
        if self.ng(v) {
            accumulate(grads, v, dv);
        }
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    param_vars: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Graph::variable`] or [`Graph::param`].
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Parameter gradients aligned with `store`; parameters not touched by the
    /// graph get zeros.
    pub fn param_grads(&self, store: &ParamStore) -> Grads {
        let mut out = Grads::zeros_like(store);
        self.accumulate_into(&mut out);
        out
    }

    pub fn accumulate_into(&self, out: &mut Grads) {
        for (id, var) in &self.param_vars {
            if let Some(g) = &self.grads[var.0] {
                out.tensors[id.0].axpy(1.0, g);
            }
        }
    }
}

#[inline]
fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn gelu_inner(x: f64) -> f64 {
    (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn col_sum(m: &Mat) -> Mat {
    let mut out = Mat::zeros(1, m.cols);
    for r in 0..m.rows {
        for (o, v) in out.data.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

fn hadamard(a: &Mat, b: &Mat) -> Mat {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    Mat { rows: a.rows, cols: a.cols, data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect() }
}

fn rope_rotate(m: &mut Mat, pos: &[usize], base: f64, sign: f64) {
    let half = m.cols / 2;
    let freqs: Vec<f64> = (0..half).map(|i| base.powf(-2.0 * i as f64 / m.cols as f64)).collect();
    for (r, &p) in pos.iter().enumerate() {
        if p == 0 {
            continue;
        }
        let row = m.row_mut(r);
        for (i, f) in freqs.iter().enumerate() {
            let (s, c) = (sign * p as f64 * f).sin_cos();
            let (a, b) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = a * c - b * s;
            row[2 * i + 1] = a * s + b * c;
        }
    }
}
