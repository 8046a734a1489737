//! LS and LMMSE coarse estimators and the equivalent noise power of the
//! per-user LMMSE error, averaged over a buffer of past channel realizations.

use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;

use nalgebra::{Cholesky, SymmetricEigen};

use crate::cplx::{hstack, split_blocks, CMatrix, CVector, C64};
use crate::error::{Error, Result};
use crate::sysmodel::ChannelSet;

pub const DEFAULT_BUFFER_CAPACITY: usize = 4096;

/// Relative singular-value floor below which a stacked channel counts as rank deficient.
const RANK_TOL: f64 = 1e-10;

pub fn stack_channels(h: &[CMatrix]) -> CMatrix {
    hstack(&h.iter().collect::<Vec<_>>())
}

fn gram(h: &CMatrix) -> CMatrix {
    h.adjoint() * h
}

fn check_dims(y: &[C64], h: &CMatrix) -> Result<()> {
    if y.len() != h.nrows() {
        return Err(Error::Shape(format!("received vector has {} entries, channel has {} rows", y.len(), h.nrows())));
    }
    Ok(())
}

fn full_column_rank(h: &CMatrix) -> bool {
    if h.ncols() > h.nrows() {
        return false;
    }
    let sv = h.singular_values();
    let max = sv.max();
    max > 0.0 && sv.min() > RANK_TOL * max
}

/// Least-squares estimate `(H^H H)^{-1} H^H y` of the stacked symbol vector.
pub fn ls_demod(y: &[C64], h: &CMatrix) -> Result<Vec<C64>> {
    check_dims(y, h)?;
    if !full_column_rank(h) {
        return Err(Error::Singular(format!(
            "stacked {}x{} channel estimate is rank deficient; regularize or regroup users",
            h.nrows(),
            h.ncols()
        )));
    }
    let rhs = h.adjoint() * CVector::from_column_slice(y);
    let chol = Cholesky::new(gram(h)).ok_or_else(|| Error::Singular("normal equations are not positive definite".into()))?;
    Ok(chol.solve(&rhs).iter().copied().collect())
}

/// LMMSE estimate `(H^H H + sigma_n^2 I)^{-1} H^H y` with identity symbol covariance.
pub fn lmmse_demod(y: &[C64], h: &CMatrix, sigma_n_sq: f64) -> Result<Vec<C64>> {
    if !(sigma_n_sq >= 0.0) {
        return Err(Error::Config(format!("noise variance {sigma_n_sq} must be non-negative")));
    }
    if sigma_n_sq == 0.0 {
        return ls_demod(y, h);
    }
    check_dims(y, h)?;
    let mut a = gram(h);
    for i in 0..a.nrows() {
        a[(i, i)] += C64::new(sigma_n_sq, 0.0);
    }
    let rhs = h.adjoint() * CVector::from_column_slice(y);
    let chol = Cholesky::new(a).ok_or_else(|| Error::Numeric("regularized normal matrix lost definiteness".into()))?;
    Ok(chol.solve(&rhs).iter().copied().collect())
}

/// Joint estimate sliced into per-user vectors.
pub fn split_users(x: &[C64], tx_antennas: &[usize]) -> Vec<Vec<C64>> {
    split_blocks(x, tx_antennas)
}

/// `A^{-1} [(sigma_n^2 + sigma_H^2 N_t) H^H H + sigma_n^4 I] A^{-1}` with `A = H^H H + sigma_n^2 I`.
pub fn error_covariance(h: &CMatrix, sigma_n_sq: f64, sigma_h_sq: f64, nt: usize) -> Result<CMatrix> {
    if !(sigma_n_sq >= 0.0) || !(sigma_h_sq >= 0.0) {
        return Err(Error::Config("variances must be non-negative".into()));
    }
    if h.ncols() != nt {
        return Err(Error::Shape(format!("channel has {} columns, expected {nt}", h.ncols())));
    }
    let g = gram(h);
    let n = g.nrows();
    let eye = CMatrix::identity(n, n);
    let a = &g + &eye * C64::new(sigma_n_sq, 0.0);
    let a_inv = a.try_inverse().ok_or_else(|| Error::Singular("H^H H is singular and sigma_n^2 = 0".into()))?;
    let middle = &g * C64::new(sigma_n_sq + sigma_h_sq * nt as f64, 0.0) + eye * C64::new(sigma_n_sq * sigma_n_sq, 0.0);
    let cov = &a_inv * middle * &a_inv;
    Ok((&cov + cov.adjoint()) * C64::new(0.5, 0.0))
}

/// Trace of [`error_covariance`] computed from the eigenvalues of `H^H H`.
fn error_trace(h: &CMatrix, sigma_n_sq: f64, sigma_h_sq: f64) -> Result<f64> {
    let nt = h.ncols();
    let signal_coef = sigma_n_sq + sigma_h_sq * nt as f64;
    let noise_coef = sigma_n_sq * sigma_n_sq;
    if signal_coef == 0.0 && noise_coef == 0.0 {
        return Ok(0.0);
    }
    let eig = SymmetricEigen::new(gram(h)).eigenvalues;
    let mut total = 0.0;
    for &lam in eig.iter() {
        let lam = lam.max(0.0);
        let d = lam + sigma_n_sq;
        if d <= 0.0 {
            return Err(Error::Singular("H^H H is singular and sigma_n^2 = 0".into()));
        }
        total += (signal_coef * lam + noise_coef) / (d * d);
    }
    Ok(total)
}

/// FIFO store of past channel realizations, one queue per user.
#[derive(Debug)]
pub struct MemoryBuffer {
    capacity: usize,
    users: Vec<VecDeque<CMatrix>>,
    cache: Mutex<HashMap<(usize, u64, u64), f64>>,
}

impl MemoryBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("memory buffer capacity must be positive".into()));
        }
        Ok(MemoryBuffer { capacity, users: Vec::new(), cache: Mutex::new(HashMap::new()) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self, user: usize) -> usize {
        self.users.get(user).map_or(0, VecDeque::len)
    }

    pub fn is_empty(&self, user: usize) -> bool {
        self.len(user) == 0
    }

    pub fn get(&self, user: usize, index: usize) -> Option<&CMatrix> {
        self.users.get(user)?.get(index)
    }

    pub fn entries(&self, user: usize) -> impl Iterator<Item = &CMatrix> {
        self.users.get(user).into_iter().flatten()
    }

    /// Appends one realization per user, evicting the oldest entries beyond capacity.
    pub fn update(&mut self, channels: &ChannelSet) -> Result<()> {
        for (u, h) in channels.h.iter().enumerate() {
            if let Some(first) = self.users.get(u).and_then(|q| q.front()) {
                if first.shape() != h.shape() {
                    return Err(Error::Shape(format!(
                        "user {u}: buffered channels are {:?}, new realization is {:?}",
                        first.shape(),
                        h.shape()
                    )));
                }
            }
        }
        if self.users.len() < channels.users() {
            self.users.resize_with(channels.users(), VecDeque::new);
        }
        for (q, h) in self.users.iter_mut().zip(&channels.h) {
            if q.len() == self.capacity {
                q.pop_front();
            }
            q.push_back(h.clone());
        }
        self.cache.lock().expect("cache lock").clear();
        Ok(())
    }

    /// Mean LMMSE error power of user `u` over the buffered realizations.
    pub fn equivalent_noise_power(&self, user: usize, sigma_n_sq: f64, sigma_h_sq: f64) -> Result<f64> {
        if !(sigma_n_sq >= 0.0) || !(sigma_h_sq >= 0.0) {
            return Err(Error::Config("variances must be non-negative".into()));
        }
        let key = (user, sigma_n_sq.to_bits(), sigma_h_sq.to_bits());
        if let Some(&v) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(v);
        }
        let n = self.len(user);
        if n == 0 {
            return Err(Error::State(format!("memory buffer holds no channels for user {user}")));
        }
        let mut total = 0.0;
        for h in self.entries(user) {
            total += error_trace(h, sigma_n_sq, sigma_h_sq)?;
        }
        let v = (total / n as f64).max(0.0);
        self.cache.lock().expect("cache lock").insert(key, v);
        Ok(v)
    }
}

impl Default for MemoryBuffer {
    fn default() -> Self {
        MemoryBuffer::new(DEFAULT_BUFFER_CAPACITY).expect("positive default capacity")
    }
}

pub fn equivalent_noise_power(buffer: &MemoryBuffer, user: usize, sigma_n_sq: f64, sigma_h_sq: f64) -> Result<f64> {
    buffer.equivalent_noise_power(user, sigma_n_sq, sigma_h_sq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn identity_channel_recovers_symbols() {
        let h = CMatrix::identity(3, 3);
        let x = vec![c(1.0, -1.0), c(0.5, 0.0), c(0.0, 2.0)];
        let got = ls_demod(&x, &h).unwrap();
        for (a, b) in got.iter().zip(&x) {
            assert!((a - b).norm() < 1e-14);
        }
    }

    #[test]
    fn rank_deficient_is_singular() {
        let mut h = CMatrix::zeros(4, 2);
        h[(0, 0)] = c(1.0, 0.0);
        h[(0, 1)] = c(2.0, 0.0);
        assert!(matches!(ls_demod(&[c(0.0, 0.0); 4], &h), Err(Error::Singular(_))));
        let wide = CMatrix::identity(2, 3);
        assert!(matches!(ls_demod(&[c(0.0, 0.0); 2], &wide), Err(Error::Singular(_))));
    }

    #[test]
    fn huge_noise_shrinks_to_zero() {
        let h = CMatrix::from_fn(4, 2, |r, k| c((r + k) as f64 * 0.3 + 0.1, r as f64 * 0.2));
        let y = vec![c(1.0, 1.0); 4];
        let x = lmmse_demod(&y, &h, 1e12).unwrap();
        assert!(x.iter().all(|v| v.norm() < 1e-10));
    }

    #[test]
    fn identity_error_covariance_closed_form() {
        let h = CMatrix::identity(3, 3);
        let s = 0.4;
        let cov = error_covariance(&h, s, 0.0, 3).unwrap();
        let want = (s + s * s) / ((1.0 + s) * (1.0 + s));
        for i in 0..3 {
            for k in 0..3 {
                let w = if i == k { want } else { 0.0 };
                assert!((cov[(i, k)] - c(w, 0.0)).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn buffer_fifo_and_validation() {
        assert!(MemoryBuffer::new(0).is_err());
        let mut b = MemoryBuffer::new(2).unwrap();
        let mk = |v: f64| ChannelSet { h: vec![CMatrix::from_element(2, 1, c(v, 0.0))] };
        for v in [1.0, 2.0, 3.0] {
            b.update(&mk(v)).unwrap();
        }
        assert_eq!(b.len(0), 2);
        assert_eq!(b.get(0, 0).unwrap()[(0, 0)], c(2.0, 0.0));
        assert_eq!(b.get(0, 1).unwrap(), &mk(3.0).h[0]);
        let bad = ChannelSet { h: vec![CMatrix::zeros(3, 1)] };
        assert!(matches!(b.update(&bad), Err(Error::Shape(_))));
        assert!(matches!(MemoryBuffer::new(4).unwrap().equivalent_noise_power(0, 1.0, 0.0), Err(Error::State(_))));
    }

    #[test]
    fn noiseless_equivalent_power_is_zero() {
        let mut b = MemoryBuffer::default();
        b.update(&ChannelSet { h: vec![CMatrix::zeros(2, 2)] }).unwrap();
        assert_eq!(b.equivalent_noise_power(0, 0.0, 0.0).unwrap(), 0.0);
    }
}
