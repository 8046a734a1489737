//! Grouped successive-interference-cancellation receiver.
//!
//! Users are ranked by channel strength and packed greedily into groups whose
//! stream count stays under a threshold. Groups are demodulated in order:
//! each one gets an LMMSE estimate against the current residual (later groups
//! count as extra noise), per-user timestep alignment, a diffusion refinement
//! and a hard decision, after which its contribution is subtracted.

use std::time::{Duration, Instant};

use mudemod_nn::ParamStore;
use serde::{Deserialize, Serialize};

use crate::aligner::{align_target, compute_source_timestep, Aligner};
use crate::cplx::{frob_sq, split_blocks, CMatrix, CVector, C64};
use crate::diffusion::NoiseSchedule;
use crate::distill::{student_single_step, Student};
use crate::dit::{teacher_sample, ConditionSet, WirelessDit};
use crate::error::{Error, Result};
use crate::linear::{lmmse_demod, ls_demod, stack_channels, MemoryBuffer};
use crate::sysmodel::constellation::{hard_demap, Constellation};
use crate::sysmodel::DemodSample;

/// `||H||_F^2 / (N_r N_t)`.
pub fn channel_strength(h: &CMatrix) -> f64 {
    let n = h.nrows() * h.ncols();
    if n == 0 {
        0.0
    } else {
        frob_sq(h) / n as f64
    }
}

/// User indices by descending strength; equal strengths keep index order.
pub fn rank_users(strengths: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..strengths.len()).collect();
    order.sort_by(|&a, &b| strengths[b].total_cmp(&strengths[a]));
    order
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingPlan {
    pub groups: Vec<Vec<usize>>,
    pub threshold: usize,
    /// Users whose own stream count exceeds the threshold; each sits alone in its group.
    pub oversize: Vec<usize>,
}

impl GroupingPlan {
    pub fn order(&self) -> impl Iterator<Item = usize> + '_ {
        self.groups.iter().flatten().copied()
    }
}

pub fn greedy_group(order: &[usize], tx_antennas: &[usize], threshold: usize) -> Result<GroupingPlan> {
    if threshold == 0 {
        return Err(Error::Config("stream threshold must be at least 1".into()));
    }
    let mut plan = GroupingPlan { groups: Vec::new(), threshold, oversize: Vec::new() };
    let mut current: Vec<usize> = Vec::new();
    let mut load = 0;
    for &u in order {
        let nt = *tx_antennas.get(u).ok_or_else(|| Error::Shape(format!("no antenna count for user {u}")))?;
        if nt > threshold {
            if !current.is_empty() {
                plan.groups.push(std::mem::take(&mut current));
                load = 0;
            }
            plan.groups.push(vec![u]);
            plan.oversize.push(u);
            continue;
        }
        if load + nt > threshold && !current.is_empty() {
            plan.groups.push(std::mem::take(&mut current));
            load = 0;
        }
        current.push(u);
        load += nt;
    }
    if !current.is_empty() {
        plan.groups.push(current);
    }
    Ok(plan)
}

/// `y - sum_u H_u x_u` over the given already-processed users.
pub fn sic_residual(y: &[C64], processed: &[(&CMatrix, &[C64])]) -> Result<Vec<C64>> {
    let mut r = CVector::from_column_slice(y);
    for (i, (h, x)) in processed.iter().enumerate() {
        if h.nrows() != y.len() || h.ncols() != x.len() {
            return Err(Error::Shape(format!(
                "processed user {i}: channel {}x{} with {} symbols against {} receive entries",
                h.nrows(),
                h.ncols(),
                x.len(),
                y.len()
            )));
        }
        r -= *h * CVector::from_column_slice(x);
    }
    Ok(r.iter().copied().collect())
}

/// Refinement stage applied after alignment.
#[derive(Clone, Copy, Debug)]
pub enum Refiner<'a> {
    /// Single network evaluation of a distilled student.
    Student(&'a Student),
    /// Multi-step probability-flow sampling with the teacher.
    Teacher { model: &'a WirelessDit, params: &'a ParamStore, steps: usize },
    /// Hard decision straight on the aligned estimate.
    None,
}

#[derive(Clone, Copy, Debug)]
pub struct Models<'a> {
    pub aligner: Option<(&'a Aligner, &'a ParamStore)>,
    pub refiner: Refiner<'a>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub coarse: Duration,
    pub align: Duration,
    pub refine: Duration,
    pub total: Duration,
}

impl Timing {
    fn scaled(&self, n: usize) -> Timing {
        let n = n.max(1) as u32;
        Timing { coarse: self.coarse / n, align: self.align / n, refine: self.refine / n, total: self.total / n }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemodResult {
    pub symbols: Vec<Vec<C64>>,
    pub bits: Vec<Vec<u8>>,
    /// Residual received vector seen by each group, first group first.
    pub residuals: Vec<Vec<C64>>,
    pub plan: GroupingPlan,
    /// Source timestep assigned to each user.
    pub source_steps: Vec<usize>,
    /// Per-sample share of the batch wall-clock time.
    pub timing: Timing,
}

#[derive(Clone, Copy, Debug)]
pub struct PipelineConfig<'a> {
    pub threshold: usize,
    /// Past channels used for the equivalent noise power; the sample's own
    /// estimate is used when absent.
    pub buffer: Option<&'a MemoryBuffer>,
}

fn equivalent_power(
    cfg: &PipelineConfig<'_>,
    user: usize,
    h_hat: &CMatrix,
    sigma_sq: f64,
    sigma_h_sq: f64,
) -> Result<f64> {
    match cfg.buffer {
        Some(b) => b.equivalent_noise_power(user, sigma_sq, sigma_h_sq),
        None => {
            let mut single = MemoryBuffer::new(1)?;
            single.update(&crate::sysmodel::ChannelSet { h: vec![h_hat.clone()] })?;
            single.equivalent_noise_power(0, sigma_sq, sigma_h_sq)
        }
    }
}

struct GroupJob {
    sample: usize,
    users: Vec<usize>,
    residual: Vec<C64>,
    aligned: Vec<Vec<C64>>,
    t_align: usize,
}

fn group_context(e: Error, group: usize) -> Error {
    Error::Group { group, source: Box::new(e) }
}

/// Demodulates a batch of samples; group `i` of every sample is processed
/// together so the networks see batched inputs.
pub fn demodulate_batch(
    samples: &[&DemodSample],
    models: &Models<'_>,
    sched: &NoiseSchedule,
    cfg: &PipelineConfig<'_>,
) -> Result<Vec<DemodResult>> {
    let start = Instant::now();
    let mut timing = Timing::default();
    let mut results = Vec::with_capacity(samples.len());
    for s in samples {
        let strengths: Vec<f64> = s.estimates.h_hat.iter().map(channel_strength).collect();
        let plan = greedy_group(&rank_users(&strengths), &s.tx_antennas(), cfg.threshold)?;
        results.push(DemodResult {
            symbols: s.x.iter().map(|x| vec![C64::new(0.0, 0.0); x.len()]).collect(),
            bits: s.bits.iter().map(|b| vec![0; b.len()]).collect(),
            residuals: Vec::new(),
            plan,
            source_steps: vec![0; s.users()],
            timing: Timing::default(),
        });
    }
    let max_groups = results.iter().map(|r| r.plan.groups.len()).max().unwrap_or(0);
    for gi in 0..max_groups {
        let t0 = Instant::now();
        let mut jobs = Vec::new();
        let mut align_in: Vec<(usize, Vec<C64>, usize)> = Vec::new();
        for (si, s) in samples.iter().enumerate() {
            let Some(users) = results[si].plan.groups.get(gi).cloned() else { continue };
            let processed: Vec<(&CMatrix, &[C64])> = results[si].plan.groups[..gi]
                .iter()
                .flatten()
                .map(|&u| (&s.estimates.h_hat[u], results[si].symbols[u].as_slice()))
                .collect();
            let residual = sic_residual(&s.y, &processed).map_err(|e| group_context(e, gi))?;
            let later: f64 = results[si].plan.groups[gi + 1..]
                .iter()
                .flatten()
                .map(|&u| frob_sq(&s.estimates.h_hat[u]))
                .sum();
            let sigma_eff = s.sigma_n_sq + later / s.rx_antennas() as f64;
            let hs: Vec<CMatrix> = users.iter().map(|&u| s.estimates.h_hat[u].clone()).collect();
            let coarse = lmmse_demod(&residual, &stack_channels(&hs), sigma_eff).map_err(|e| group_context(e, gi))?;
            let lens: Vec<usize> = hs.iter().map(|h| h.ncols()).collect();
            let per_user = split_blocks(&coarse, &lens);
            let mut steps = Vec::with_capacity(users.len());
            let mut scaled = Vec::with_capacity(users.len());
            for ((&u, h), x) in users.iter().zip(&hs).zip(per_user) {
                let sh = s.estimates.sigma_h_sq.get(u).copied().unwrap_or(0.0);
                let total = equivalent_power(cfg, u, h, sigma_eff, sh).map_err(|e| group_context(e, gi))?;
                let per_stream = total / h.ncols() as f64;
                let t = compute_source_timestep(per_stream, sched);
                let gain = sched.alpha_bar(t).sqrt() / (1.0 - per_stream).max(1e-6);
                let gain = if t == 0 { 1.0 } else { gain };
                scaled.push(x.iter().map(|v| v * gain).collect::<Vec<_>>());
                steps.push(t);
                results[si].source_steps[u] = t;
            }
            let t_align = align_target(&steps).map_err(|e| group_context(e, gi))?;
            for (x, &t) in scaled.iter().zip(&steps) {
                align_in.push((jobs.len(), x.clone(), t));
            }
            jobs.push(GroupJob { sample: si, users, residual, aligned: scaled, t_align });
        }
        let t1 = Instant::now();
        timing.coarse += t1 - t0;

        if let Some((aligner, params)) = models.aligner {
            let batch: Vec<(&[C64], usize, usize)> =
                align_in.iter().map(|(j, x, t)| (x.as_slice(), *t, jobs[*j].t_align)).collect();
            let out = aligner.align_batch(params, &batch).map_err(|e| group_context(e, gi))?;
            let mut it = out.into_iter();
            for job in &mut jobs {
                for a in job.aligned.iter_mut() {
                    *a = it.next().expect("one output per user");
                }
            }
        } else {
            let mut k = 0;
            for job in &mut jobs {
                for a in job.aligned.iter_mut() {
                    let t_src = align_in[k].2;
                    let r = (sched.alpha_bar(job.t_align) / sched.alpha_bar(t_src)).sqrt();
                    a.iter_mut().for_each(|v| *v *= r);
                    k += 1;
                }
            }
        }
        let t2 = Instant::now();
        timing.align += t2 - t1;

        let conds: Vec<ConditionSet> = jobs
            .iter()
            .map(|j| {
                let h = j.users.iter().map(|&u| samples[j.sample].estimates.h_hat[u].clone()).collect();
                ConditionSet::new(h, j.residual.clone(), j.t_align)
            })
            .collect();
        let refs: Vec<&ConditionSet> = conds.iter().collect();
        let inputs: Vec<Vec<C64>> = jobs.iter().map(|j| j.aligned.concat()).collect();
        let refined = match models.refiner {
            Refiner::Student(st) => student_single_step(&inputs, &refs, st, sched),
            Refiner::Teacher { model, params, steps } => teacher_sample_clamped(model, params, &inputs, &refs, sched, steps),
            Refiner::None => Ok(jobs
                .iter()
                .zip(&inputs)
                .map(|(j, x)| {
                    let a = sched.alpha_bar(j.t_align).sqrt();
                    x.iter().map(|v| v / a).collect()
                })
                .collect()),
        }
        .map_err(|e| group_context(e, gi))?;
        let t3 = Instant::now();
        timing.refine += t3 - t2;

        for (job, out) in jobs.into_iter().zip(refined) {
            let s = samples[job.sample];
            let c = Constellation::new(s.modulation);
            let lens: Vec<usize> = job.users.iter().map(|&u| s.x[u].len()).collect();
            for (&u, xu) in job.users.iter().zip(split_blocks(&out, &lens)) {
                let (_, bits) = hard_demap(&xu, &c).map_err(|e| group_context(e, gi))?;
                results[job.sample].bits[u] = bits;
                results[job.sample].symbols[u] = xu;
            }
            results[job.sample].residuals.push(job.residual);
        }
    }
    timing.total = start.elapsed();
    let share = timing.scaled(samples.len());
    for r in &mut results {
        r.timing = share;
    }
    Ok(results)
}

/// Teacher sampling with the step count reduced where the start step is
/// smaller than the requested number of steps.
fn teacher_sample_clamped(
    model: &WirelessDit,
    params: &ParamStore,
    x: &[Vec<C64>],
    conds: &[&ConditionSet],
    sched: &NoiseSchedule,
    steps: usize,
) -> Result<Vec<Vec<C64>>> {
    let mut out = vec![Vec::new(); x.len()];
    let mut by_steps: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, c) in conds.iter().enumerate() {
        by_steps.entry(steps.min(c.t).max(1)).or_default().push(i);
    }
    for (n, idx) in by_steps {
        let xs: Vec<Vec<C64>> = idx.iter().map(|&i| x[i].clone()).collect();
        let cs: Vec<&ConditionSet> = idx.iter().map(|&i| conds[i]).collect();
        for (i, v) in idx.into_iter().zip(teacher_sample(model, params, &xs, &cs, sched, n)?) {
            out[i] = v;
        }
    }
    Ok(out)
}

pub fn demodulate(
    sample: &DemodSample,
    models: &Models<'_>,
    sched: &NoiseSchedule,
    cfg: &PipelineConfig<'_>,
) -> Result<DemodResult> {
    Ok(demodulate_batch(&[sample], models, sched, cfg)?.remove(0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Baseline {
    #[serde(rename = "LS")]
    Ls,
    #[serde(rename = "LMMSE")]
    Lmmse,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::Ls => "LS",
            Baseline::Lmmse => "LMMSE",
        }
    }
}

/// Joint linear estimate of all users followed by a hard decision.
pub fn demodulate_baseline(sample: &DemodSample, method: Baseline) -> Result<DemodResult> {
    let start = Instant::now();
    let h = stack_channels(&sample.estimates.h_hat);
    let x = match method {
        Baseline::Ls => ls_demod(&sample.y, &h)?,
        Baseline::Lmmse => lmmse_demod(&sample.y, &h, sample.sigma_n_sq)?,
    };
    let coarse = start.elapsed();
    let c = Constellation::new(sample.modulation);
    let mut symbols = Vec::new();
    let mut bits = Vec::new();
    for xu in split_blocks(&x, &sample.tx_antennas()) {
        let (_, b) = hard_demap(&xu, &c)?;
        bits.push(b);
        symbols.push(xu);
    }
    let users = sample.users();
    Ok(DemodResult {
        symbols,
        bits,
        residuals: vec![sample.y.clone()],
        plan: GroupingPlan { groups: vec![(0..users).collect()], threshold: sample.tx_antennas().iter().sum(), oversize: Vec::new() },
        source_steps: vec![0; users],
        timing: Timing { coarse, total: start.elapsed(), ..Timing::default() },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strengths_and_ranking() {
        let ones = CMatrix::from_element(2, 2, C64::new(1.0, 0.0));
        assert_eq!(channel_strength(&ones), 1.0);
        assert_eq!(channel_strength(&CMatrix::zeros(3, 2)), 0.0);
        assert_eq!(channel_strength(&(ones * C64::new(0.0, 2.0))), 4.0);
        assert_eq!(rank_users(&[0.5, 2.0, 1.0]), vec![1, 2, 0]);
        assert_eq!(rank_users(&[1.0, 1.0, 1.0]), vec![0, 1, 2]);
    }

    #[test]
    fn packing_rules() {
        let p = greedy_group(&[0, 1, 2, 3], &[2, 2, 2, 2], 4).unwrap();
        assert_eq!(p.groups, vec![vec![0, 1], vec![2, 3]]);
        assert_eq!(greedy_group(&[0, 1, 2, 3], &[2, 2, 2, 2], 8).unwrap().groups.len(), 1);
        let p = greedy_group(&[0], &[3], 2).unwrap();
        assert_eq!(p.groups, vec![vec![0]]);
        assert_eq!(p.oversize, vec![0]);
        assert!(greedy_group(&[0], &[1], 0).is_err());
    }

    #[test]
    fn first_residual_is_received_vector() {
        let y = vec![C64::new(1.0, 2.0), C64::new(-1.0, 0.5)];
        assert_eq!(sic_residual(&y, &[]).unwrap(), y);
    }
}
