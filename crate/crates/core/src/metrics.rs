//! Bit error rate, throughput and analytic multiply-accumulate counts.

use serde::{Deserialize, Serialize};

use crate::aligner::AlignerConfig;
use crate::error::{Error, Result};
use crate::preset::Preset;
use crate::dit::DitConfig;

/// Erroneous bits and total bits over all users.
pub fn bit_errors(decided: &[Vec<u8>], truth: &[Vec<u8>]) -> Result<(usize, usize)> {
    if decided.len() != truth.len() {
        return Err(Error::Shape(format!("{} decided users vs {} true users", decided.len(), truth.len())));
    }
    let mut errors = 0;
    let mut total = 0;
    for (u, (d, t)) in decided.iter().zip(truth).enumerate() {
        if d.len() != t.len() {
            return Err(Error::Shape(format!("user {u}: {} decided bits vs {} true bits", d.len(), t.len())));
        }
        errors += d.iter().zip(t).filter(|(a, b)| a != b).count();
        total += t.len();
    }
    Ok((errors, total))
}

/// Fraction of transmitted bits decided wrongly; 0 when nothing was sent.
pub fn ber(decided: &[Vec<u8>], truth: &[Vec<u8>]) -> Result<f64> {
    let (e, n) = bit_errors(decided, truth)?;
    Ok(if n == 0 { 0.0 } else { e as f64 / n as f64 })
}

/// Correctly delivered bits per unit of `duration` (channel uses or seconds).
pub fn throughput(decided: &[Vec<u8>], truth: &[Vec<u8>], duration: f64) -> Result<f64> {
    if !(duration > 0.0) {
        return Err(Error::Usage(format!("duration must be positive, got {duration}")));
    }
    let (e, n) = bit_errors(decided, truth)?;
    Ok((n - e) as f64 / duration)
}

/// Shape of one demodulation problem for cost accounting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemShape {
    pub tx_antennas: Vec<usize>,
    pub rx_antennas: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    /// LMMSE estimate and equivalent noise powers.
    pub coarse: f64,
    pub aligner: f64,
    /// One denoiser evaluation (conditions plus blocks).
    pub per_step: f64,
    pub total: f64,
}

fn attention_macs(len: usize, d: usize) -> f64 {
    let (l, d) = (len as f64, d as f64);
    2.0 * l * l * d + 4.0 * l * d * d
}

fn bigru_macs(len: usize, d: usize) -> f64 {
    let (l, d, h) = (len as f64, d as f64, d as f64 / 2.0);
    2.0 * l * (d * 3.0 * h + h * 3.0 * h)
}

/// Multiply-accumulate count of the MU-Aligner for one user with `nt` streams.
pub fn aligner_macs(cfg: &AlignerConfig, nt: usize) -> f64 {
    let d = cfg.width as f64;
    let l = nt + 2;
    let per_layer = attention_macs(l, cfg.width) + 8.0 * l as f64 * d * d;
    2.0 * nt as f64 * d + 2.0 * 2.0 * d * d + cfg.depth as f64 * per_layer + nt as f64 * (d * d + 2.0 * d)
}

/// Multiply-accumulate count of one denoiser evaluation.
pub fn dit_step_macs(cfg: &DitConfig, shape: &ProblemShape) -> f64 {
    let d = cfg.width as f64;
    let dd = d * d;
    let l: usize = shape.tx_antennas.iter().sum();
    let nr = shape.rx_antennas;
    let users = shape.tx_antennas.len() as f64;
    let (px, py) = cfg.patch;
    let mut macs = l as f64 * (2.0 * d + dd) + 2.0 * dd;
    for &nt in &shape.tx_antennas {
        let p = nr.div_ceil(px) * nt.div_ceil(py);
        macs += p as f64 * (2.0 * (px * py) as f64 * d + 2.0 * dd);
        macs += attention_macs(p + 1, cfg.width) + bigru_macs(p, cfg.width) + 4.0 * dd;
    }
    macs += nr as f64 * (2.0 * d + 2.0 * dd) + attention_macs(nr + 1, cfg.width) + bigru_macs(nr, cfg.width) + 3.0 * dd;
    macs += 2.0 * dd + 2.0 * users * dd + 2.0 * users * d + dd;
    let per_block = d * (4.0 * d + 1.0) + attention_macs(l, cfg.width) + 8.0 * l as f64 * dd;
    macs += cfg.depth as f64 * per_block;
    macs + l as f64 * (dd + 2.0 * d)
}

/// Complex multiply-accumulates of the stacked LMMSE solve, counted as four real ones.
fn coarse_macs(shape: &ProblemShape) -> f64 {
    let k: usize = shape.tx_antennas.iter().sum();
    let (k, nr) = (k as f64, shape.rx_antennas as f64);
    4.0 * (nr * k * k + k * k * k / 3.0 + 2.0 * nr * k)
}

/// Analytic cost of the full pipeline with `steps` denoiser evaluations.
pub fn flops_estimate(preset: Preset, shape: &ProblemShape, steps: usize) -> FlopsBreakdown {
    let dit = DitConfig::preset(preset);
    let al = AlignerConfig::preset(preset);
    let coarse = coarse_macs(shape);
    let aligner: f64 = shape.tx_antennas.iter().map(|&nt| aligner_macs(&al, nt)).sum();
    let per_step = dit_step_macs(&dit, shape);
    FlopsBreakdown { coarse, aligner, per_step, total: coarse + aligner + steps as f64 * per_step }
}
