//! Uplink system model: constellations, channels, estimation error and
//! received-signal synthesis.
//!
//! SNR is the ratio of expected received signal power to noise power per
//! receive antenna. With unit-power symbols and unit-variance channel entries
//! this gives `sigma_n^2 = (sum_u N_t,u) * 10^(-snr_db / 10)`.

pub mod constellation;
pub mod dataset;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

pub use constellation::{hard_demap, make_constellation, modulate, Constellation, Modulation};

use crate::cplx::{CMatrix, C64};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub users: usize,
    pub tx_antennas: Vec<usize>,
    pub rx_antennas: usize,
    pub constellation: Modulation,
    pub snr_db: f64,
    pub sigma_h_sq: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl SystemConfig {
    /// Equal antenna counts and estimation error for every user.
    pub fn uniform(users: usize, nt: usize, nr: usize, constellation: Modulation, snr_db: f64, sigma_h_sq: f64) -> Self {
        SystemConfig {
            users,
            tx_antennas: vec![nt; users],
            rx_antennas: nr,
            constellation,
            snr_db,
            sigma_h_sq: vec![sigma_h_sq; users],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.users == 0 {
            return Err(Error::Config("at least one user is required".into()));
        }
        if self.tx_antennas.len() != self.users {
            return Err(Error::Config(format!(
                "{} users but {} transmit-antenna entries",
                self.users,
                self.tx_antennas.len()
            )));
        }
        if self.tx_antennas.iter().any(|&n| n == 0) {
            return Err(Error::Config("every user needs at least one transmit antenna".into()));
        }
        if self.rx_antennas == 0 {
            return Err(Error::Config("at least one receive antenna is required".into()));
        }
        if self.sigma_h_sq.len() != self.users {
            return Err(Error::Config(format!(
                "{} users but {} estimation-error entries",
                self.users,
                self.sigma_h_sq.len()
            )));
        }
        if self.sigma_h_sq.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
            return Err(Error::Config("estimation-error variances must be finite and non-negative".into()));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::Config("snr_db must be finite".into()));
        }
        Ok(())
    }

    pub fn total_streams(&self) -> usize {
        self.tx_antennas.iter().sum()
    }

    pub fn noise_variance(&self) -> f64 {
        noise_variance(self.total_streams(), self.snr_db)
    }
}

pub fn noise_variance(total_streams: usize, snr_db: f64) -> f64 {
    total_streams as f64 * 10f64.powf(-snr_db / 10.0)
}

/// Random generator for sample `index` of a stream seeded by `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChannelModel {
    IidRayleigh,
    ExpCorrelated { rho: f64 },
}

impl Default for ChannelModel {
    fn default() -> Self {
        ChannelModel::IidRayleigh
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSet {
    pub h: Vec<CMatrix>,
}

impl ChannelSet {
    pub fn users(&self) -> usize {
        self.h.len()
    }

    pub fn check_against(&self, cfg: &SystemConfig) -> Result<()> {
        check_shapes(&self.h, cfg, "channel")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelEstimate {
    pub h_hat: Vec<CMatrix>,
    pub sigma_h_sq: Vec<f64>,
}

fn check_shapes(h: &[CMatrix], cfg: &SystemConfig, what: &str) -> Result<()> {
    if h.len() != cfg.users {
        return Err(Error::Shape(format!("{what} set has {} users, config has {}", h.len(), cfg.users)));
    }
    for (u, m) in h.iter().enumerate() {
        if m.shape() != (cfg.rx_antennas, cfg.tx_antennas[u]) {
            return Err(Error::Shape(format!(
                "{what} of user {u} is {}x{}, expected {}x{}",
                m.nrows(),
                m.ncols(),
                cfg.rx_antennas,
                cfg.tx_antennas[u]
            )));
        }
        if m.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::Numeric(format!("{what} of user {u} has non-finite entries")));
        }
    }
    Ok(())
}

/// One draw from `CN(0, variance)`.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> C64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(s * re, s * im)
}

fn correlation_sqrt(n: usize, rho: f64) -> DMatrix<f64> {
    let r = DMatrix::from_fn(n, n, |i, k| rho.powi((i as i32 - k as i32).abs()));
    let eig = SymmetricEigen::new(r);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

pub fn gen_channels<R: Rng + ?Sized>(cfg: &SystemConfig, model: ChannelModel, rng: &mut R) -> Result<ChannelSet> {
    cfg.validate()?;
    let root = match model {
        ChannelModel::IidRayleigh => None,
        ChannelModel::ExpCorrelated { rho } => {
            if !(0.0..1.0).contains(&rho) {
                return Err(Error::Config(format!("correlation coefficient {rho} outside [0, 1)")));
            }
            (rho != 0.0).then(|| correlation_sqrt(cfg.rx_antennas, rho).map(|v| C64::new(v, 0.0)))
        }
    };
    let h = cfg
        .tx_antennas
        .iter()
        .map(|&nt| {
            let w = CMatrix::from_fn(cfg.rx_antennas, nt, |_, _| complex_normal(rng, 1.0));
            match &root {
                Some(r) => r * w,
                None => w,
            }
        })
        .collect();
    Ok(ChannelSet { h })
}

/// Adds white `CN(0, sigma^2 / (N_r N_t))` error so that the expected squared
/// Frobenius error of user `u` is `sigma_h_sq[u]`.
pub fn add_estimation_error<R: Rng + ?Sized>(channels: &ChannelSet, sigma_h_sq: &[f64], rng: &mut R) -> Result<ChannelEstimate> {
    if sigma_h_sq.len() != channels.users() {
        return Err(Error::Config(format!(
            "{} estimation-error entries for {} users",
            sigma_h_sq.len(),
            channels.users()
        )));
    }
    if let Some(s) = sigma_h_sq.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::Config(format!("negative estimation-error variance {s}")));
    }
    let h_hat = channels
        .h
        .iter()
        .zip(sigma_h_sq)
        .map(|(h, &s)| {
            if s == 0.0 {
                return h.clone();
            }
            let var = s / (h.nrows() * h.ncols()) as f64;
            h.map(|v| v + complex_normal(rng, var))
        })
        .collect();
    Ok(ChannelEstimate { h_hat, sigma_h_sq: sigma_h_sq.to_vec() })
}

/// One uplink transmission.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemodSample {
    pub modulation: Modulation,
    pub bits: Vec<Vec<u8>>,
    pub x: Vec<Vec<C64>>,
    pub channels: ChannelSet,
    pub estimates: ChannelEstimate,
    pub y: Vec<C64>,
    pub sigma_n_sq: f64,
    pub snr_db: f64,
}

impl DemodSample {
    pub fn users(&self) -> usize {
        self.x.len()
    }

    pub fn rx_antennas(&self) -> usize {
        self.y.len()
    }

    pub fn tx_antennas(&self) -> Vec<usize> {
        self.x.iter().map(Vec::len).collect()
    }

    /// Noise-free part `sum_u H_u x_u` of the received vector.
    pub fn clean_signal(&self) -> Vec<C64> {
        let rows = self.channels.h.first().map_or(0, |h| h.nrows());
        let mut s = vec![C64::new(0.0, 0.0); rows];
        for (h, x) in self.channels.h.iter().zip(&self.x) {
            for (r, acc) in s.iter_mut().enumerate() {
                for (c, xv) in x.iter().enumerate() {
                    *acc += h[(r, c)] * xv;
                }
            }
        }
        s
    }

    pub fn total_bits(&self) -> usize {
        self.bits.iter().map(Vec::len).sum()
    }
}

pub fn synthesize_sample<R: Rng + ?Sized>(
    cfg: &SystemConfig,
    channels: &ChannelSet,
    estimates: &ChannelEstimate,
    rng: &mut R,
) -> Result<DemodSample> {
    cfg.validate()?;
    channels.check_against(cfg)?;
    check_shapes(&estimates.h_hat, cfg, "channel estimate")?;
    let c = Constellation::new(cfg.constellation);
    let mut bits = Vec::with_capacity(cfg.users);
    let mut x = Vec::with_capacity(cfg.users);
    for &nt in &cfg.tx_antennas {
        let b: Vec<u8> = (0..nt * c.bits_per_symbol).map(|_| rng.random_range(0..2u8)).collect();
        x.push(modulate(&b, &c)?);
        bits.push(b);
    }
    let sigma_n_sq = cfg.noise_variance();
    let mut sample = DemodSample {
        modulation: cfg.constellation,
        bits,
        x,
        channels: channels.clone(),
        estimates: estimates.clone(),
        y: Vec::new(),
        sigma_n_sq,
        snr_db: cfg.snr_db,
    };
    let mut y = sample.clean_signal();
    for v in &mut y {
        *v += complex_normal(rng, sigma_n_sq);
    }
    sample.y = y;
    Ok(sample)
}

/// Draws channels, estimation error and a transmission in one go.
pub fn draw_sample<R: Rng + ?Sized>(cfg: &SystemConfig, model: ChannelModel, rng: &mut R) -> Result<DemodSample> {
    let channels = gen_channels(cfg, model, rng)?;
    let estimates = add_estimation_error(&channels, &cfg.sigma_h_sq, rng)?;
    synthesize_sample(cfg, &channels, &estimates, rng)
}
