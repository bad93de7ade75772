//! Stationary estimates from simulated trajectories.
//!
//! Every time-average is a ratio of per-batch integrals; confidence half-widths
//! come from the batch-means ratio estimator with a Student-t quantile.

use rand::Rng;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::distributions::{labelled_stream, AUXILIARY_STREAM};
use crate::error::{Error, Result};
use crate::model::{LimitLaw, NetworkInstance};
use crate::simulator::{BatchStats, Trajectory};

/// Confidence level of every reported half-width.
pub const CONFIDENCE: f64 = 0.99;
pub const MIN_BATCHES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    /// `0` marks an exact value.
    pub half_width: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate { value, half_width: 0.0 }
    }

    pub fn contains(&self, x: f64) -> bool {
        (self.value - x).abs() <= self.half_width
    }

    pub fn scaled(&self, c: f64) -> Self {
        Estimate { value: self.value * c, half_width: self.half_width * c.abs() }
    }
}

fn t_quantile(batches: usize) -> f64 {
    let dof = (batches - 1) as f64;
    StudentsT::new(0.0, 1.0, dof)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.5 + 0.5 * CONFIDENCE)
}

/// Batch-means estimate of `sum(num) / sum(den)`.
pub fn ratio_estimate(num: &[f64], den: &[f64]) -> Result<Estimate> {
    let b = num.len();
    if b < MIN_BATCHES || den.len() != b {
        return Err(Error::InsufficientData(format!("{b} batches, at least {MIN_BATCHES} required")));
    }
    let total_den: f64 = den.iter().sum();
    if !(total_den > 0.0) {
        return Err(Error::InsufficientData("zero post-warmup time".into()));
    }
    let value = num.iter().sum::<f64>() / total_den;
    let mean_den = total_den / b as f64;
    let ss: f64 = num.iter().zip(den).map(|(n, d)| (n - value * d).powi(2)).sum();
    let var = ss / (b - 1) as f64 / (b as f64 * mean_den * mean_den);
    Ok(Estimate { value, half_width: t_quantile(b) * var.sqrt() })
}

fn time_average(batches: &[BatchStats], f: impl Fn(&BatchStats) -> f64) -> Result<Estimate> {
    let num: Vec<f64> = batches.iter().map(&f).collect();
    let den: Vec<f64> = batches.iter().map(|b| b.duration).collect();
    ratio_estimate(&num, &den)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationaryEstimate {
    pub r: f64,
    pub mean_z: [Estimate; 5],
    /// `(r Z1, r Z2, r Z3, r^2 Z4, r Z5)`.
    pub scaled_mean: [Estimate; 5],
    /// `E[(r Z1)^p]` for `p = 1, 2, 3`.
    pub moments_z1: [Estimate; 3],
    /// `E[(r^2 Z4)^p]` for `p = 1, 2, 3`.
    pub moments_z4: [Estimate; 3],
    /// `E[(Z2 + Z3 + Z5)^2]`.
    pub high_priority_sq: Estimate,
    /// Occupation fractions of the five idle events.
    pub beta_hat: [Estimate; 5],
    pub utilization: [Estimate; 2],
    /// Completions per unit time, per class.
    pub throughput: [Estimate; 5],
    pub time: f64,
    pub events: u64,
}

pub fn summarize(traj: &Trajectory, inst: &NetworkInstance) -> Result<StationaryEstimate> {
    let b = &traj.batches;
    if b.len() < MIN_BATCHES {
        return Err(Error::InsufficientData(format!("{} batches, at least {MIN_BATCHES} required", b.len())));
    }
    let r = inst.r;
    let scale = [r, r, r, r * r, r];
    let mut mean_z = [Estimate::exact(0.0); 5];
    let mut beta_hat = mean_z;
    let mut throughput = mean_z;
    for k in 0..5 {
        mean_z[k] = time_average(b, |x| x.z[k])?;
        beta_hat[k] = time_average(b, |x| x.idle[k])?;
        throughput[k] = time_average(b, |x| x.completions[k] as f64)?;
    }
    let mut moments_z1 = [Estimate::exact(0.0); 3];
    let mut moments_z4 = moments_z1;
    for p in 0..3 {
        moments_z1[p] = time_average(b, |x| x.z1_pow[p])?.scaled(r.powi(p as i32 + 1));
        moments_z4[p] = time_average(b, |x| x.z4_pow[p])?.scaled((r * r).powi(p as i32 + 1));
    }
    Ok(StationaryEstimate {
        r,
        scaled_mean: std::array::from_fn(|k| mean_z[k].scaled(scale[k])),
        mean_z,
        moments_z1,
        moments_z4,
        high_priority_sq: time_average(b, |x| x.high_sq)?,
        beta_hat,
        utilization: [time_average(b, |x| x.busy[0])?, time_average(b, |x| x.busy[1])?],
        throughput,
        time: traj.post_warmup_time(),
        events: b.iter().map(|x| x.events).sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MgfEstimate {
    pub theta: [f64; 5],
    pub phi: Estimate,
    /// Conditional MGFs on the five idle events; `None` when the event was
    /// not observed long enough.
    pub phi_k: [Option<Estimate>; 5],
    /// Residual-augmented test function, when the source tracks residuals.
    pub psi: Option<Estimate>,
    pub psi_k: [Option<Estimate>; 5],
    /// Occupation probabilities of the conditioning events.
    pub occupation: [f64; 5],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MgfOptions {
    /// Minimum occupation time (time units) of a conditioning event.
    pub min_conditioning_time: f64,
}

impl Default for MgfOptions {
    fn default() -> Self {
        MgfOptions { min_conditioning_time: 50.0 }
    }
}

pub fn empirical_mgf(
    traj: &Trajectory,
    thetas: &[[f64; 5]],
    opts: &MgfOptions,
) -> Result<Vec<MgfEstimate>> {
    let b = &traj.batches;
    let total = traj.total();
    if !(total.duration > 0.0) {
        return Err(Error::InsufficientData("zero post-warmup time".into()));
    }
    thetas
        .iter()
        .map(|theta| {
            let idx = traj
                .probes
                .iter()
                .position(|p| p.theta == *theta)
                .ok_or(Error::UnknownProbe(*theta))?;
            let phi = time_average(b, |x| x.probes[idx].phi)?;
            let psi = time_average(b, |x| x.probes[idx].psi)?;
            let mut phi_k = [None; 5];
            let mut psi_k = [None; 5];
            for k in 0..5 {
                if total.idle[k] < opts.min_conditioning_time || total.idle[k] <= 0.0 {
                    continue;
                }
                let den: Vec<f64> = b.iter().map(|x| x.idle[k]).collect();
                let num: Vec<f64> = b.iter().map(|x| x.probes[idx].phi_k[k]).collect();
                phi_k[k] = Some(ratio_estimate(&num, &den)?);
                let num: Vec<f64> = b.iter().map(|x| x.probes[idx].psi_k[k]).collect();
                psi_k[k] = Some(ratio_estimate(&num, &den)?);
            }
            Ok(MgfEstimate {
                theta: *theta,
                phi,
                phi_k,
                psi: Some(psi),
                psi_k,
                occupation: total.idle.map(|x| x / total.duration),
            })
        })
        .collect()
}

/// Scaled snapshot coordinates `r (Z1 + U)` and `r^2 (Z4 + U)`, with `U`
/// uniform on `[0, 1)` from the auxiliary stream of `seed`.
pub fn scaled_samples(traj: &Trajectory, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = labelled_stream(seed, AUXILIARY_STREAM);
    let r = traj.r;
    let mut x1 = Vec::with_capacity(traj.snapshots.len());
    let mut x4 = Vec::with_capacity(traj.snapshots.len());
    for (_, z) in &traj.snapshots {
        x1.push(r * (z[0] as f64 + rng.random::<f64>()));
        x4.push(r * r * (z[3] as f64 + rng.random::<f64>()));
    }
    (x1, x4)
}

/// Kolmogorov-Smirnov distance of `samples` from the exponential law with the given mean.
pub fn ks_exponential(samples: &[f64], mean: f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = if x <= 0.0 { 0.0 } else { -(-x / mean).exp_m1() };
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitReport {
    pub ks1: f64,
    pub ks4: f64,
    pub corr: f64,
    pub samples: usize,
}

pub fn fit_exponential(x1: &[f64], x4: &[f64], law: &LimitLaw, min_samples: usize) -> Result<FitReport> {
    if x1.len() != x4.len() {
        return Err(Error::InvalidParameter { field: "samples", reason: "coordinate lengths differ".into() });
    }
    if x1.len() < min_samples.max(2) {
        return Err(Error::InsufficientData(format!("{} samples, at least {min_samples} required", x1.len())));
    }
    Ok(FitReport {
        ks1: ks_exponential(x1, law.d1),
        ks4: ks_exponential(x4, law.d4),
        corr: pearson(x1, x4),
        samples: x1.len(),
    })
}

/// Default subsampling interval `100 / r^2`.
pub fn default_spacing(r: f64) -> f64 {
    100.0 / (r * r)
}
