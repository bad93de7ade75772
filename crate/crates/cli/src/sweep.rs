//! Replicated simulation sweeps over the heavy-traffic index.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::Result;
use reentrant_core::distributions::derive_seed;
use reentrant_core::estimators::{fit_exponential, scaled_samples, summarize, Estimate, FitReport};
use reentrant_core::lyapunov::{trend_verdict, TrendVerdict};
use reentrant_core::model::{limit_constants, scale, LimitLaw};
use reentrant_core::simulator::{run, RunConfig};
use serde::Serialize;

use crate::config::{ExperimentConfig, SweepConfig};

/// Runs `jobs` on up to `threads` workers; results come back in job order.
pub fn fan_out<T: Send, R: Send>(jobs: Vec<T>, threads: usize, work: impl Fn(T) -> R + Sync) -> Vec<R> {
    let n = jobs.len();
    let queue: Vec<Mutex<Option<T>>> = jobs.into_iter().map(|j| Mutex::new(Some(j))).collect();
    let results: Vec<Mutex<Option<R>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let job = queue[i].lock().unwrap().take().expect("each job is taken once");
                let out = work(job);
                *results[i].lock().unwrap() = Some(out);
            });
        }
    });
    results.into_iter().map(|m| m.into_inner().unwrap().expect("every job ran")).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicationRow {
    pub r: f64,
    pub replication: usize,
    pub seed: u64,
    pub scaled_mean: [Estimate; 5],
    pub d1: f64,
    pub d4: f64,
    pub rel_err_z1: Estimate,
    pub rel_err_z4: Estimate,
    pub beta_hat: [Estimate; 5],
    pub high_priority_sq: Estimate,
    pub moments_z1: [Estimate; 3],
    pub moments_z4: [Estimate; 3],
    pub fit: Option<FitReport>,
    #[serde(skip)]
    pub samples: (Vec<f64>, Vec<f64>),
}

#[derive(Debug, Clone, Serialize)]
pub struct PointSummary {
    pub r: f64,
    pub replications: usize,
    pub scaled_mean: [Estimate; 5],
    pub rel_err_z1: Estimate,
    pub rel_err_z4: Estimate,
    pub beta_hat: [Estimate; 5],
    pub beta_target: [f64; 5],
    pub high_priority_sq: Estimate,
    pub moments_z1: [Estimate; 3],
    pub moments_z4: [Estimate; 3],
    pub fit: Option<FitReport>,
    pub fit_error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Verdict {
    pub name: String,
    /// Whether the verdict counts toward the exit status.
    pub enabled: bool,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub d1: f64,
    pub d4: f64,
    pub points: Vec<PointSummary>,
    pub trends: Vec<TrendVerdict>,
    pub verdicts: Vec<Verdict>,
    pub passed: bool,
}

/// Mean of independent estimates; half-widths combine in quadrature.
pub fn pool(estimates: &[Estimate]) -> Estimate {
    let n = estimates.len() as f64;
    Estimate {
        value: estimates.iter().map(|e| e.value).sum::<f64>() / n,
        half_width: estimates.iter().map(|e| e.half_width * e.half_width).sum::<f64>().sqrt() / n,
    }
}

fn rel_err(e: Estimate, target: f64) -> Estimate {
    Estimate { value: e.value / target - 1.0, half_width: e.half_width / target }
}

struct Job {
    index: usize,
    replication: usize,
    r: f64,
}

fn run_job(cfg: &ExperimentConfig, sweep: &SweepConfig, law: &LimitLaw, job: Job) -> Result<ReplicationRow> {
    let inst = scale(&cfg.base(), job.r)?;
    let seed = derive_seed(sweep.seed, &[job.index as u64, job.replication as u64]);
    let horizon = sweep.horizon as u64;
    let warmup = sweep.warmup.map(|w| w as u64).unwrap_or(horizon / 10);
    let rc = RunConfig {
        horizon,
        warmup,
        batches: sweep.batches,
        seed,
        probes: Vec::new(),
        snapshot_spacing: cfg.analysis.fit.then(|| cfg.analysis.fit_spacing / (job.r * job.r)),
    };
    let traj = run(&inst, &rc)?;
    let s = summarize(&traj, &inst)?;
    let samples = scaled_samples(&traj, seed);
    let fit = fit_exponential(&samples.0, &samples.1, law, 2).ok();
    Ok(ReplicationRow {
        r: job.r,
        replication: job.replication,
        seed,
        scaled_mean: s.scaled_mean,
        d1: law.d1,
        d4: law.d4,
        rel_err_z1: rel_err(s.scaled_mean[0], law.d1),
        rel_err_z4: rel_err(s.scaled_mean[3], law.d4),
        beta_hat: s.beta_hat,
        high_priority_sq: s.high_priority_sq,
        moments_z1: s.moments_z1,
        moments_z4: s.moments_z4,
        fit,
        samples,
    })
}

/// Checks every index for stability before anything is simulated.
pub fn preflight(cfg: &ExperimentConfig) -> Result<()> {
    let base = cfg.base();
    base.validate()?;
    if let Some(s) = &cfg.sweep {
        for &r in &s.r {
            scale(&base, r)?;
        }
    }
    Ok(())
}

pub fn run_sweep(cfg: &ExperimentConfig, threads: usize) -> Result<(Vec<ReplicationRow>, SweepSummary)> {
    let sweep = cfg.sweep.as_ref().ok_or_else(|| anyhow::anyhow!("config has no sweep block"))?;
    preflight(cfg)?;
    let law = limit_constants(&cfg.base())?;
    let jobs: Vec<Job> = sweep
        .r
        .iter()
        .enumerate()
        .flat_map(|(index, &r)| (0..sweep.replications).map(move |replication| Job { index, replication, r }))
        .collect();
    let rows = fan_out(jobs, threads, |job| run_job(cfg, sweep, &law, job))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize_sweep(cfg, sweep, &law, &rows);
    Ok((rows, summary))
}

fn pooled<const N: usize>(rows: &[&ReplicationRow], f: impl Fn(&ReplicationRow) -> [Estimate; N]) -> [Estimate; N] {
    std::array::from_fn(|k| pool(&rows.iter().map(|r| f(r)[k]).collect::<Vec<_>>()))
}

fn summarize_sweep(cfg: &ExperimentConfig, sweep: &SweepConfig, law: &LimitLaw, rows: &[ReplicationRow]) -> SweepSummary {
    let a = &cfg.analysis;
    let mut points = Vec::new();
    for &r in &sweep.r {
        let at: Vec<&ReplicationRow> = rows.iter().filter(|x| x.r == r).collect();
        let scaled_mean = pooled(&at, |x| x.scaled_mean);
        let (mut x1, mut x4) = (Vec::new(), Vec::new());
        for row in &at {
            x1.extend_from_slice(&row.samples.0);
            x4.extend_from_slice(&row.samples.1);
        }
        let (fit, fit_error) = if a.fit {
            match fit_exponential(&x1, &x4, law, a.fit_min_samples) {
                Ok(f) => (Some(f), None),
                Err(e) => (None, Some(e.to_string())),
            }
        } else {
            (None, None)
        };
        let beta_target = scale(&cfg.base(), r).map(|i| i.beta).unwrap_or([f64::NAN; 5]);
        points.push(PointSummary {
            r,
            replications: at.len(),
            rel_err_z1: rel_err(scaled_mean[0], law.d1),
            rel_err_z4: rel_err(scaled_mean[3], law.d4),
            scaled_mean,
            beta_hat: pooled(&at, |x| x.beta_hat),
            beta_target,
            high_priority_sq: pool(&at.iter().map(|x| x.high_priority_sq).collect::<Vec<_>>()),
            moments_z1: pooled(&at, |x| x.moments_z1),
            moments_z4: pooled(&at, |x| x.moments_z4),
            fit,
            fit_error,
        });
    }

    let rs: Vec<f64> = points.iter().map(|p| p.r).collect();
    let last = points.last().expect("validated sweep has at least one r");
    let mut verdicts = Vec::new();
    for (name, errs) in [
        ("convergence_z1", points.iter().map(|p| p.rel_err_z1.value.abs()).collect::<Vec<_>>()),
        ("convergence_z4", points.iter().map(|p| p.rel_err_z4.value.abs()).collect::<Vec<_>>()),
    ] {
        let decreasing = errs.windows(2).all(|w| w[1] <= w[0]);
        let small = *errs.last().unwrap() <= a.max_rel_err;
        verdicts.push(Verdict {
            name: name.into(),
            enabled: true,
            passed: decreasing && small,
            detail: format!("|rel err| by r = {errs:?}; decreasing = {decreasing}; last <= {} = {small}", a.max_rel_err),
        });
    }

    let mut trends = Vec::new();
    let high: Vec<Estimate> = points.iter().map(|p| p.high_priority_sq).collect();
    let high_trend = trend_verdict("E[(Z2+Z3+Z5)^2]", &rs, &high);
    let hp = [1, 2, 4].map(|k| last.scaled_mean[k].value);
    verdicts.push(Verdict {
        name: "ssc_high_priority".into(),
        enabled: a.ssc,
        passed: hp.iter().all(|&v| v <= a.max_high_priority),
        detail: format!("r E[Z2], r E[Z3], r E[Z5] at r = {} : {hp:?} (limit {})", last.r, a.max_high_priority),
    });
    verdicts.push(Verdict {
        name: "ssc_second_moment_trend".into(),
        enabled: a.ssc,
        passed: !high_trend.increasing_trend,
        detail: format!(
            "growth exponent vs 1/r = {:.4}; significant increase = {}",
            high_trend.growth_exponent, high_trend.significant_increase
        ),
    });
    trends.push(high_trend);
    for p in 0..3 {
        let z1: Vec<Estimate> = points.iter().map(|x| x.moments_z1[p]).collect();
        let z4: Vec<Estimate> = points.iter().map(|x| x.moments_z4[p]).collect();
        trends.push(trend_verdict(&format!("E[(rZ1)^{}]", p + 1), &rs, &z1));
        trends.push(trend_verdict(&format!("E[(r^2Z4)^{}]", p + 1), &rs, &z4));
    }
    if a.lyapunov {
        for t in &trends[1..] {
            verdicts.push(Verdict {
                name: format!("moment_bound {}", t.label),
                enabled: true,
                passed: !t.increasing_trend,
                detail: format!("growth exponent vs 1/r = {:.4}", t.growth_exponent),
            });
        }
    }

    if a.fit {
        let (passed, detail) = match (&last.fit, &last.fit_error) {
            (Some(f), _) => (
                f.ks1 <= a.max_ks1 && f.ks4 <= a.max_ks4 && f.corr.abs() <= a.max_corr,
                format!(
                    "r = {}: ks1 = {:.4} (<= {}), ks4 = {:.4} (<= {}), corr = {:.4} (|.| <= {}), samples = {}",
                    last.r, f.ks1, a.max_ks1, f.ks4, a.max_ks4, f.corr, a.max_corr, f.samples
                ),
            ),
            (None, e) => (false, format!("r = {}: {}", last.r, e.clone().unwrap_or_default())),
        };
        verdicts.push(Verdict { name: "exponential_fit".into(), enabled: true, passed, detail });
        if let (Some(first), Some(lastfit)) = (&points[0].fit, &last.fit) {
            verdicts.push(Verdict {
                name: "fit_trend".into(),
                enabled: false,
                passed: lastfit.ks1 <= first.ks1 && lastfit.ks4 <= first.ks4,
                detail: format!(
                    "ks1 {:.4} -> {:.4}, ks4 {:.4} -> {:.4}",
                    first.ks1, lastfit.ks1, first.ks4, lastfit.ks4
                ),
            });
        }
    }
    let passed = verdicts.iter().filter(|v| v.enabled).all(|v| v.passed);
    SweepSummary { d1: law.d1, d4: law.d4, points, trends, verdicts, passed }
}

/// Column names of the per-replication CSV.
pub fn csv_header() -> Vec<String> {
    let mut h: Vec<String> = vec!["r".into(), "replication".into(), "seed".into()];
    for name in ["rz1", "rz2", "rz3", "r2z4", "rz5"] {
        h.push(name.into());
        h.push(format!("{name}_hw"));
    }
    h.extend(["d1", "d4", "rel_err_z1", "rel_err_z1_hw", "rel_err_z4", "rel_err_z4_hw"].map(String::from));
    for k in 1..=5 {
        h.push(format!("beta_hat{k}"));
        h.push(format!("beta_hat{k}_hw"));
    }
    h.extend(["high_sq", "high_sq_hw", "ks1", "ks4", "corr", "fit_samples"].map(String::from));
    h
}

pub fn csv_record(row: &ReplicationRow) -> Vec<String> {
    let mut v = vec![row.r.to_string(), row.replication.to_string(), row.seed.to_string()];
    for e in &row.scaled_mean {
        v.push(e.value.to_string());
        v.push(e.half_width.to_string());
    }
    v.push(row.d1.to_string());
    v.push(row.d4.to_string());
    for e in [row.rel_err_z1, row.rel_err_z4] {
        v.push(e.value.to_string());
        v.push(e.half_width.to_string());
    }
    for e in &row.beta_hat {
        v.push(e.value.to_string());
        v.push(e.half_width.to_string());
    }
    v.push(row.high_priority_sq.value.to_string());
    v.push(row.high_priority_sq.half_width.to_string());
    match &row.fit {
        Some(f) => v.extend([f.ks1.to_string(), f.ks4.to_string(), f.corr.to_string(), f.samples.to_string()]),
        None => v.extend([String::new(), String::new(), String::new(), "0".into()]),
    }
    v
}
