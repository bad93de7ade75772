//! Polynomial Lyapunov functions for the scaled moment bounds, their drift
//! brackets, and the simulation sweep that checks the moments stay bounded.

use serde::Serialize;

use crate::distributions::derive_seed;
use crate::error::{Error, Result};
use crate::estimators::{summarize, Estimate};
use crate::model::{scale, BaseParams, NetworkInstance};
use crate::simulator::{run, RunConfig};

/// Tolerance of both drift checks.
pub const DRIFT_TOL: f64 = 1e-12;

/// Weights of the station-1 potential; the `z4` weight is zero.
pub fn station1_weights(base: &BaseParams) -> Result<[f64; 5]> {
    let d = base.denominator();
    if !(d > 0.0) {
        return Err(Error::OutsideRegime(d));
    }
    let [_, m2, m3, m4, m5] = base.m;
    Ok([1.0, (m3 - m5 * m2 / m4) / d, m3 / d, 0.0, m5 / d])
}

/// Weights of the station-2 potential.
pub fn station2_weights(base: &BaseParams) -> [f64; 5] {
    let [_, m2, _, m4, _] = base.m;
    let w = (m2 + m4) / m4;
    [w, w, 1.0, 1.0, 0.0]
}

fn dot(w: &[f64; 5], z: &[u32; 5]) -> f64 {
    (0..5).map(|k| w[k] * z[k] as f64).sum()
}

/// `f1(z) = r^(n-1) (w . z)^(n+1) / (n+1)`.
pub fn f1_value(z: &[u32; 5], r: f64, n: u32, base: &BaseParams) -> Result<f64> {
    let w = station1_weights(base)?;
    Ok(r.powi(n as i32 - 1) * dot(&w, z).powi(n as i32 + 1) / (n + 1) as f64)
}

/// `f2(z) = r^(2(n-1)) (w . z)^(n+1) / (n+1)`.
pub fn f2_value(z: &[u32; 5], r: f64, n: u32, base: &BaseParams) -> f64 {
    let w = station2_weights(base);
    r.powi(2 * (n as i32 - 1)) * dot(&w, z).powi(n as i32 + 1) / (n + 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DriftReport {
    pub z: [u32; 5],
    pub bracket1: f64,
    pub bound1: f64,
    pub satisfied1: bool,
    pub bracket2: f64,
    /// `(1/m4)(-r^2/(1-r^2) + 1{z2=z4=0})`.
    pub closed_form2: f64,
    pub satisfied2: bool,
    /// `(1/m4)(-r^2/(1-r^2) + 1{z2=z4=0}/(1-r^2))`, the value the generator
    /// actually produces; differs from `closed_form2` only when `z2=z4=0`.
    pub generator_form2: f64,
    pub matches_generator_form2: bool,
}

fn require_exponential(inst: &NetworkInstance) -> Result<()> {
    if inst.base.all_exponential() {
        Ok(())
    } else {
        Err(Error::NotExponential("drift brackets are evaluated for exponential primitives".into()))
    }
}

/// Station-1 bracket and its bound `-r/(1-r) + 1{z1=z3=z5=0} / (D (1-r))`.
pub fn drift_bracket_station1(z: &[u32; 5], inst: &NetworkInstance) -> Result<(f64, f64)> {
    require_exponential(inst)?;
    let base = &inst.base;
    let d = base.denominator();
    if !(d > 0.0) {
        return Err(Error::OutsideRegime(d));
    }
    let m = base.m;
    let mu = inst.mu_r;
    let ind = |b: bool| if b { 1.0 } else { 0.0 };
    let a1 = ind(z[0] > 0 && z[2] == 0 && z[4] == 0);
    let a3 = ind(z[2] > 0 && z[4] == 0);
    let a5 = ind(z[4] > 0);
    let a2 = ind(z[1] > 0);
    let a4 = ind(z[3] > 0 && z[1] == 0);
    let bracket = base.alpha1 - (mu[0] * m[0] * a1 + mu[2] * m[2] * a3 + mu[4] * m[4] * a5) / d
        + (m[4] / m[3]) / d * (mu[1] * m[1] * a2 + mu[3] * m[3] * a4);
    let r = inst.r;
    let empty = ind(z[0] == 0 && z[2] == 0 && z[4] == 0);
    let bound = -r / (1.0 - r) + empty / (d * (1.0 - r));
    Ok((bracket, bound))
}

/// Station-2 bracket and the closed form `(1/m4)(-r^2/(1-r^2) + 1{z2=z4=0})`.
pub fn drift_bracket_station2(z: &[u32; 5], inst: &NetworkInstance) -> Result<(f64, f64)> {
    require_exponential(inst)?;
    let [_, m2, _, m4, _] = inst.base.m;
    let mu = inst.mu_r;
    let b2 = if z[1] > 0 { 1.0 } else { 0.0 };
    let b4 = if z[3] > 0 && z[1] == 0 { 1.0 } else { 0.0 };
    let bracket = inst.base.alpha1 * (m2 + m4) / m4 - mu[1] * b2 * m2 / m4 - mu[3] * b4;
    let r = inst.r;
    let idle = if z[1] == 0 && z[3] == 0 { 1.0 } else { 0.0 };
    Ok((bracket, (-r * r / (1.0 - r * r) + idle) / m4))
}

pub fn drift_report(z: &[u32; 5], inst: &NetworkInstance) -> Result<DriftReport> {
    let (bracket1, bound1) = drift_bracket_station1(z, inst)?;
    let (bracket2, closed_form2) = drift_bracket_station2(z, inst)?;
    let r2 = inst.r * inst.r;
    let idle = if z[1] == 0 && z[3] == 0 { 1.0 } else { 0.0 };
    let generator_form2 = (-r2 + idle) / (1.0 - r2) / inst.base.m[3];
    Ok(DriftReport {
        z: *z,
        bracket1,
        bound1,
        satisfied1: bracket1 <= bound1 + DRIFT_TOL,
        bracket2,
        closed_form2,
        satisfied2: (bracket2 - closed_form2).abs() <= DRIFT_TOL,
        generator_form2,
        matches_generator_form2: (bracket2 - generator_form2).abs() <= DRIFT_TOL,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoxCheck {
    pub states: usize,
    pub violations1: usize,
    pub violations2: usize,
    /// States where the bracket differs from the generator-derived form.
    pub violations2_generator: usize,
    /// Largest `bracket1 - bound1` over the box.
    pub worst_gap1: f64,
    /// Largest `|bracket2 - closed_form2|` over the box.
    pub worst_gap2: f64,
}

impl BoxCheck {
    pub fn passed(&self) -> bool {
        self.violations1 == 0 && self.violations2 == 0
    }

    pub fn station1_passed(&self) -> bool {
        self.violations1 == 0
    }
}

/// Evaluates both drift checks on every state of `[0..side]^5`.
pub fn check_box(inst: &NetworkInstance, side: u32) -> Result<BoxCheck> {
    let mut check = BoxCheck {
        states: 0,
        violations1: 0,
        violations2: 0,
        violations2_generator: 0,
        worst_gap1: f64::NEG_INFINITY,
        worst_gap2: 0.0,
    };
    let mut z = [0u32; 5];
    loop {
        let rep = drift_report(&z, inst)?;
        check.states += 1;
        check.violations1 += usize::from(!rep.satisfied1);
        check.violations2 += usize::from(!rep.satisfied2);
        check.violations2_generator += usize::from(!rep.matches_generator_form2);
        check.worst_gap1 = check.worst_gap1.max(rep.bracket1 - rep.bound1);
        check.worst_gap2 = check.worst_gap2.max((rep.bracket2 - rep.closed_form2).abs());
        let mut k = 0;
        loop {
            if k == 5 {
                return Ok(check);
            }
            if z[k] < side {
                z[k] += 1;
                break;
            }
            z[k] = 0;
            k += 1;
        }
    }
}

/// Threshold on the fitted growth exponent of a moment against `1/r`.
pub const TREND_SLOPE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentRow {
    pub r: f64,
    pub order: u32,
    /// `E[(r Z1)^p]`.
    pub z1: Estimate,
    /// `E[(r^2 Z4)^p]`.
    pub z4: Estimate,
    /// `E[(Z2 + Z3 + Z5)^2]`, independent of the order.
    pub high_priority_sq: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendVerdict {
    pub label: String,
    /// Least-squares slope of `ln(estimate)` against `ln(1/r)`.
    pub growth_exponent: f64,
    /// Whether the last estimate exceeds the first beyond both CIs.
    pub significant_increase: bool,
    pub increasing_trend: bool,
}

/// Flags growth of `estimates` (ordered by decreasing `r`).
pub fn trend_verdict(label: &str, rs: &[f64], estimates: &[Estimate]) -> TrendVerdict {
    let pts: Vec<(f64, f64)> = rs
        .iter()
        .zip(estimates)
        .filter(|(_, e)| e.value > 0.0)
        .map(|(r, e)| ((1.0 / r).ln(), e.value.ln()))
        .collect();
    let growth_exponent = if pts.len() >= 2 {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    } else {
        0.0
    };
    let significant_increase = match (estimates.first(), estimates.last()) {
        (Some(a), Some(b)) if estimates.len() >= 2 => b.value - a.value > a.half_width + b.half_width,
        _ => false,
    };
    TrendVerdict {
        label: label.to_string(),
        growth_exponent,
        significant_increase,
        increasing_trend: significant_increase && growth_exponent > TREND_SLOPE,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentSweep {
    pub rows: Vec<MomentRow>,
    pub verdicts: Vec<TrendVerdict>,
}

/// Simulates every `r` once and tabulates scaled moments of orders `orders`.
pub fn moment_sweep(base: &BaseParams, rs: &[f64], orders: &[u32], horizon: u64, seed: u64) -> Result<MomentSweep> {
    if let Some(&p) = orders.iter().find(|&&p| !(1..=3).contains(&p)) {
        return Err(Error::MomentOrder(p));
    }
    if rs.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidParameter { field: "r", reason: "r-list must be strictly decreasing".into() });
    }
    let mut rows = Vec::new();
    let mut per_r = Vec::new();
    for (i, &r) in rs.iter().enumerate() {
        let inst = scale(base, r)?;
        let traj = run(&inst, &RunConfig::new(horizon, derive_seed(seed, &[i as u64])))?;
        let s = summarize(&traj, &inst)?;
        for &p in orders {
            let idx = p as usize - 1;
            rows.push(MomentRow {
                r,
                order: p,
                z1: s.moments_z1[idx],
                z4: s.moments_z4[idx],
                high_priority_sq: s.high_priority_sq,
            });
        }
        per_r.push(s);
    }
    let mut verdicts = Vec::new();
    for &p in orders {
        let idx = p as usize - 1;
        let z1: Vec<Estimate> = per_r.iter().map(|s| s.moments_z1[idx]).collect();
        let z4: Vec<Estimate> = per_r.iter().map(|s| s.moments_z4[idx]).collect();
        verdicts.push(trend_verdict(&format!("E[(rZ1)^{p}]"), rs, &z1));
        verdicts.push(trend_verdict(&format!("E[(r^2Z4)^{p}]"), rs, &z4));
    }
    let high: Vec<Estimate> = per_r.iter().map(|s| s.high_priority_sq).collect();
    verdicts.push(trend_verdict("E[(Z2+Z3+Z5)^2]", rs, &high));
    Ok(MomentSweep { rows, verdicts })
}
