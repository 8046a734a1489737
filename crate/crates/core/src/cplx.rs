//! Complex-valued helpers and the real-valued layout used by the networks.
//!
//! Networks see a complex entry `z` as the pair `sqrt(2) * (Re z, Im z)`, so a
//! unit-power complex value has unit variance per real component and
//! `CN(0, s)` noise maps to `N(0, s)` per component.

use mudemod_nn::Mat;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

pub const SQRT2: f64 = std::f64::consts::SQRT_2;

/// Complex vector to `[len, 2]` network layout.
pub fn realify(z: &[C64]) -> Mat {
    let mut data = Vec::with_capacity(2 * z.len());
    for v in z {
        data.push(SQRT2 * v.re);
        data.push(SQRT2 * v.im);
    }
    Mat::from_vec(z.len(), 2, data)
}

/// Inverse of [`realify`] for rows `start..start + len`.
pub fn complexify_rows(m: &Mat, start: usize, len: usize) -> Vec<C64> {
    (start..start + len).map(|r| C64::new(m.get(r, 0), m.get(r, 1)) / SQRT2).collect()
}

pub fn complexify(m: &Mat) -> Vec<C64> {
    complexify_rows(m, 0, m.rows)
}

/// Squared Frobenius norm.
pub fn frob_sq(m: &CMatrix) -> f64 {
    m.iter().map(|v| v.norm_sqr()).sum()
}

pub fn norm_sq(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

/// Horizontal concatenation `[H_1, ..., H_k]`.
pub fn hstack(blocks: &[&CMatrix]) -> CMatrix {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = CMatrix::zeros(rows, cols);
    let mut off = 0;
    for b in blocks {
        assert_eq!(b.nrows(), rows, "hstack: row mismatch");
        out.columns_mut(off, b.ncols()).copy_from(b);
        off += b.ncols();
    }
    out
}

/// Splits a stacked vector into consecutive blocks of the given lengths.
pub fn split_blocks(x: &[C64], lens: &[usize]) -> Vec<Vec<C64>> {
    let mut off = 0;
    lens.iter()
        .map(|&n| {
            let v = x[off..off + n].to_vec();
            off += n;
            v
        })
        .collect()
}
