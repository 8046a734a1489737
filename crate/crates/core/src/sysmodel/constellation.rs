use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cplx::C64;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modulation {
    #[serde(rename = "QPSK")]
    Qpsk,
    #[serde(rename = "8PSK")]
    Psk8,
    #[serde(rename = "16QAM")]
    Qam16,
    #[serde(rename = "64QAM")]
    Qam64,
}

impl Modulation {
    pub const ALL: [Modulation; 4] = [Modulation::Qpsk, Modulation::Psk8, Modulation::Qam16, Modulation::Qam64];

    pub fn name(self) -> &'static str {
        match self {
            Modulation::Qpsk => "QPSK",
            Modulation::Psk8 => "8PSK",
            Modulation::Qam16 => "16QAM",
            Modulation::Qam64 => "64QAM",
        }
    }

    pub fn bits_per_symbol(self) -> usize {
        match self {
            Modulation::Qpsk => 2,
            Modulation::Psk8 => 3,
            Modulation::Qam16 => 4,
            Modulation::Qam64 => 6,
        }
    }
}

impl fmt::Display for Modulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modulation::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unsupported constellation '{s}' (expected QPSK, 8PSK, 16QAM or 64QAM)")))
    }
}

/// A Gray-mapped, unit-average-power symbol alphabet.
///
/// Point `i` carries the bit pattern of `i` written most-significant bit
/// first, so the bit map is implicit in the point ordering.
#[derive(Clone, Debug, PartialEq)]
pub struct Constellation {
    pub modulation: Modulation,
    pub points: Vec<C64>,
    pub bits_per_symbol: usize,
}

fn gray_inverse(mut g: usize) -> usize {
    let mut n = 0;
    while g != 0 {
        n ^= g;
        g >>= 1;
    }
    n
}

/// Amplitude of a Gray-labelled PAM level; label 0 sits at the largest positive level.
fn pam_level(label: usize, levels: usize) -> f64 {
    let l = gray_inverse(label);
    (levels as f64 - 1.0) - 2.0 * l as f64
}

impl Constellation {
    pub fn new(modulation: Modulation) -> Self {
        let bps = modulation.bits_per_symbol();
        let m = 1usize << bps;
        let points: Vec<C64> = match modulation {
            Modulation::Psk8 => (0..m)
                .map(|i| {
                    let k = gray_inverse(i) as f64;
                    C64::from_polar(1.0, std::f64::consts::FRAC_PI_4 * k)
                })
                .collect(),
            _ => {
                let half = bps / 2;
                let levels = 1usize << half;
                let mask = levels - 1;
                let raw: Vec<C64> = (0..m)
                    .map(|i| C64::new(pam_level(i >> half, levels), pam_level(i & mask, levels)))
                    .collect();
                let power = raw.iter().map(|p| p.norm_sqr()).sum::<f64>() / m as f64;
                raw.into_iter().map(|p| p / power.sqrt()).collect()
            }
        };
        Constellation { modulation, points, bits_per_symbol: bps }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bits_of(&self, index: usize) -> impl Iterator<Item = u8> + '_ {
        (0..self.bits_per_symbol).rev().map(move |b| ((index >> b) & 1) as u8)
    }

    pub fn index_of(&self, bits: &[u8]) -> usize {
        bits.iter().fold(0, |acc, &b| (acc << 1) | (b & 1) as usize)
    }

    /// Nearest point index; the lowest index wins ties.
    pub fn nearest(&self, z: C64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = (z - p).norm_sqr();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    pub fn min_distance(&self) -> f64 {
        let mut d = f64::INFINITY;
        for (i, a) in self.points.iter().enumerate() {
            for b in &self.points[i + 1..] {
                d = d.min((a - b).norm());
            }
        }
        d
    }
}

pub fn make_constellation(name: &str) -> Result<Constellation> {
    Ok(Constellation::new(name.parse()?))
}

pub fn modulate(bits: &[u8], c: &Constellation) -> Result<Vec<C64>> {
    if bits.len() % c.bits_per_symbol != 0 {
        return Err(Error::Shape(format!(
            "{} bits is not a multiple of {} bits per {} symbol",
            bits.len(),
            c.bits_per_symbol,
            c.modulation
        )));
    }
    Ok(bits.chunks(c.bits_per_symbol).map(|chunk| c.points[c.index_of(chunk)]).collect())
}

/// Maps each estimate to its nearest constellation point and returns the points and their bits.
pub fn hard_demap(x_hat: &[C64], c: &Constellation) -> Result<(Vec<C64>, Vec<u8>)> {
    if let Some(pos) = x_hat.iter().position(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Numeric(format!("non-finite symbol estimate at position {pos}")));
    }
    let mut symbols = Vec::with_capacity(x_hat.len());
    let mut bits = Vec::with_capacity(x_hat.len() * c.bits_per_symbol);
    for &z in x_hat {
        let i = c.nearest(z);
        symbols.push(c.points[i]);
        bits.extend(c.bits_of(i));
    }
    Ok((symbols, bits))
}
