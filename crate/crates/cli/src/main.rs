mod config;
mod output;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::Rng;
use reentrant_core::ctmc::{solve_with_tail_target, TruncatedChain};
use reentrant_core::distributions::{derive_seed, labelled_stream, AUXILIARY_STREAM};
use reentrant_core::estimators::{empirical_mgf, summarize, MgfOptions};
use reentrant_core::lyapunov::{check_box, moment_sweep};
use reentrant_core::mgf_calculus::{asymptotic_bar_lhs, build_theta};
use reentrant_core::simulator::{run, RunConfig};
use reentrant_core::{limit_constants, scale, Error as CoreError, MgfEstimate, NetworkInstance, SolveOptions, Solver, Step};

use config::ExperimentConfig;
use output::{create_file, write_rows, CheckFailed, OutputError, Row};

#[derive(Parser)]
#[command(name = "reentrant", version, about = "Heavy-traffic experiments on a two-station five-class reentrant line")]
struct Cli {
    /// Worker threads for replication fan-out.
    #[arg(long, global = true, env = "REENTRANT_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print intensities, excess capacities and limit constants without simulating.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        /// Indices to tabulate; defaults to the sweep list.
        #[arg(long, value_delimiter = ',')]
        r: Vec<f64>,
    },
    /// Simulate one index and report stationary estimates.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        r: f64,
        /// Events, warmup included (accepts `1e7`).
        #[arg(long, value_parser = parse_count)]
        horizon: Option<u64>,
        #[arg(long, value_parser = parse_count)]
        warmup: Option<u64>,
        #[arg(long)]
        batches: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the configured replicated sweep.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output.dir`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Solve the truncated chain of an exponential instance.
    Ctmc {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        r: f64,
        /// Starting caps; defaults to `analysis.ctmc_caps`.
        #[arg(long, value_delimiter = ',')]
        caps: Option<Vec<u32>>,
        /// Grow caps until every boundary mass is at most this.
        #[arg(long)]
        tail_target: Option<f64>,
        /// State budget; defaults to `analysis.state_budget`.
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, value_enum, default_value_t = SolverArg::Gs)]
        solver: SolverArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the basic adjoint relationship.
    BarCheck {
        #[arg(long)]
        config: PathBuf,
        /// 1 or 3.
        #[arg(long)]
        step: u8,
        #[arg(long, value_delimiter = ',', default_value = "0.4")]
        r: Vec<f64>,
        #[arg(long, default_value_t = -1.0, allow_negative_numbers = true)]
        eta1: f64,
        #[arg(long, default_value_t = -1.0, allow_negative_numbers = true)]
        eta4: f64,
        /// `ctmc` uses exact stationary MGFs, `sim` residual-augmented estimates.
        #[arg(long, value_enum, default_value_t = Source::Ctmc)]
        source: Source,
        /// Random nonpositive theta vectors for the exact residual check (ctmc only).
        #[arg(long, default_value_t = 20)]
        random: usize,
        #[arg(long, default_value_t = 1e-6)]
        tail_target: f64,
        #[arg(long, value_parser = parse_count, default_value = "2e7")]
        horizon: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the drift brackets on a box and tabulate scaled moments.
    Lyapunov {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.3,0.1")]
        r: Vec<f64>,
        #[arg(long = "box", default_value_t = 10)]
        side: u32,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        orders: Vec<u32>,
        /// Simulate the moment table with this many events per index.
        #[arg(long, value_parser = parse_count)]
        horizon: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Gs,
    Power,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Source {
    Ctmc,
    Sim,
}

/// Parses event counts written as integers or in scientific notation.
fn parse_count(s: &str) -> Result<u64, String> {
    if let Ok(n) = s.parse::<u64>() {
        return Ok(n);
    }
    match s.parse::<f64>() {
        Ok(x) if x >= 0.0 && x.fract() == 0.0 && x < 1.8e19 => Ok(x as u64),
        _ => Err(format!("'{s}' is not a nonnegative whole number")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(64) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(CoreError::Unstable { .. }) = cause.downcast_ref::<CoreError>() {
            return 2;
        }
        if cause.downcast_ref::<OutputError>().is_some() {
            return 3;
        }
    }
    1
}

fn dispatch(cli: Cli) -> Result<()> {
    let threads = cli
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    match cli.command {
        Command::Analyze { config, r } => analyze(&ExperimentConfig::load(&config)?, r),
        Command::Simulate { config, r, horizon, warmup, batches, seed, out } => {
            simulate(&ExperimentConfig::load(&config)?, r, horizon, warmup, batches, seed, out)
        }
        Command::Sweep { config, out_dir } => run_sweep(&ExperimentConfig::load(&config)?, out_dir, threads),
        Command::Ctmc { config, r, caps, tail_target, budget, solver, out } => {
            ctmc(&ExperimentConfig::load(&config)?, r, caps, tail_target, budget, solver, out)
        }
        Command::BarCheck { config, step, r, eta1, eta4, source, random, tail_target, horizon, seed, out } => {
            let step = match step {
                1 => Step::One,
                3 => Step::Three,
                s => bail!("--step must be 1 or 3, got {s}"),
            };
            let cfg = ExperimentConfig::load(&config)?;
            let opts = BarOptions { step, eta1, eta4, source, random, tail_target, horizon, seed };
            bar_check(&cfg, &r, &opts, out)
        }
        Command::Lyapunov { config, r, side, orders, horizon, seed, out } => {
            lyapunov(&ExperimentConfig::load(&config)?, &r, side, &orders, horizon, seed, out)
        }
    }
}

fn indices(cfg: &ExperimentConfig, r: Vec<f64>) -> Vec<f64> {
    if r.is_empty() {
        cfg.sweep.as_ref().map(|s| s.r.clone()).unwrap_or_default()
    } else {
        r
    }
}

fn instance(cfg: &ExperimentConfig, r: f64) -> Result<NetworkInstance> {
    let base = cfg.base();
    base.validate()?;
    Ok(scale(&base, r)?)
}

fn analyze(cfg: &ExperimentConfig, r: Vec<f64>) -> Result<()> {
    let base = cfg.base();
    base.validate()?;
    let mut rows = Vec::new();
    match limit_constants(&base) {
        Ok(law) => {
            rows.push(Row::exact("denominator", None, law.denominator));
            rows.push(Row::exact("d1", None, law.d1));
            rows.push(Row::exact("d4", None, law.d4));
        }
        Err(e) => eprintln!("warning: {e}"),
    }
    for r in indices(cfg, r) {
        let inst = scale(&base, r)?;
        rows.push(Row::exact("rho1", Some(r), inst.rho1));
        rows.push(Row::exact("rho2", Some(r), inst.rho2));
        rows.push(Row::exact("rho_v", Some(r), inst.rho_v));
        for k in 0..5 {
            rows.push(Row::exact(format!("beta{}", k + 1), Some(r), inst.beta[k]));
        }
    }
    Ok(write_rows(&rows, None)?)
}

fn simulate(
    cfg: &ExperimentConfig,
    r: f64,
    horizon: Option<u64>,
    warmup: Option<u64>,
    batches: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let inst = instance(cfg, r)?;
    let sweep = cfg.sweep.as_ref();
    let horizon = horizon.or(sweep.map(|s| s.horizon as u64)).unwrap_or(1_000_000);
    let mut rc = RunConfig::new(horizon, seed.or(sweep.map(|s| s.seed)).unwrap_or(0));
    if let Some(w) = warmup {
        rc.warmup = w;
    }
    if let Some(b) = batches.or(sweep.map(|s| s.batches)) {
        rc.batches = b;
    }
    let traj = run(&inst, &rc)?;
    let s = summarize(&traj, &inst)?;
    let law = limit_constants(&inst.base).ok();
    let mut rows = vec![
        Row::estimate("utilization1", Some(r), s.utilization[0]).with_reference(inst.rho1),
        Row::estimate("utilization2", Some(r), s.utilization[1]).with_reference(inst.rho2),
    ];
    for k in 0..5 {
        rows.push(Row::estimate(format!("throughput{}", k + 1), Some(r), s.throughput[k]).with_reference(inst.base.alpha1));
    }
    for k in 0..5 {
        rows.push(Row::estimate(format!("mean_z{}", k + 1), Some(r), s.mean_z[k]));
    }
    for k in 0..5 {
        let row = Row::estimate(format!("scaled_mean_z{}", k + 1), Some(r), s.scaled_mean[k]);
        rows.push(match (k, law) {
            (0, Some(l)) => row.with_reference(l.d1),
            (3, Some(l)) => row.with_reference(l.d4),
            (0 | 3, None) => row,
            _ => row.with_reference(0.0),
        });
    }
    for k in 0..5 {
        rows.push(Row::estimate(format!("beta_hat{}", k + 1), Some(r), s.beta_hat[k]).with_reference(inst.beta[k]));
    }
    rows.push(Row::estimate("high_priority_sq", Some(r), s.high_priority_sq));
    let mut factorial = 1.0;
    for p in 0..3 {
        factorial *= (p + 1) as f64;
        let mut z1 = Row::estimate(format!("moment_rz1_{}", p + 1), Some(r), s.moments_z1[p]);
        let mut z4 = Row::estimate(format!("moment_r2z4_{}", p + 1), Some(r), s.moments_z4[p]);
        if let Some(l) = law {
            z1 = z1.with_reference(factorial * l.d1.powi(p as i32 + 1));
            z4 = z4.with_reference(factorial * l.d4.powi(p as i32 + 1));
        }
        rows.push(z1);
        rows.push(z4);
    }
    Ok(write_rows(&rows, out.as_ref())?)
}

fn run_sweep(cfg: &ExperimentConfig, out_dir: Option<PathBuf>, threads: usize) -> Result<()> {
    let dir = out_dir.unwrap_or_else(|| cfg.output.dir.clone());
    let (rows, summary) = sweep::run_sweep(cfg, threads)?;

    let csv_path = dir.join("sweep.csv");
    let name = csv_path.display().to_string();
    let wrap = |e: csv::Error| OutputError { path: name.clone(), source: e.into() };
    let mut w = csv::Writer::from_writer(create_file(&csv_path)?);
    w.write_record(sweep::csv_header()).map_err(wrap)?;
    for row in &rows {
        w.write_record(sweep::csv_record(row)).map_err(wrap)?;
    }
    w.flush().map_err(|source| OutputError { path: name.clone(), source })?;

    let json_path = dir.join("summary.json");
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    std::io::Write::write_all(&mut create_file(&json_path)?, text.as_bytes())
        .map_err(|source| OutputError { path: json_path.display().to_string(), source })?;

    for v in &summary.verdicts {
        let status = match (v.enabled, v.passed) {
            (true, true) => "PASS",
            (true, false) => "FAIL",
            (false, true) => "info pass",
            (false, false) => "info fail",
        };
        println!("{status:9} {}: {}", v.name, v.detail);
    }
    if !summary.passed {
        return Err(CheckFailed("sweep checks failed".into()).into());
    }
    Ok(())
}

fn ctmc(
    cfg: &ExperimentConfig,
    r: f64,
    caps: Option<Vec<u32>>,
    tail_target: Option<f64>,
    budget: Option<usize>,
    solver: SolverArg,
    out: Option<PathBuf>,
) -> Result<()> {
    let inst = instance(cfg, r)?;
    let caps: [u32; 5] = match caps {
        Some(c) => c.try_into().map_err(|_| anyhow::anyhow!("--caps needs five values"))?,
        None => cfg.analysis.ctmc_caps,
    };
    let budget = budget.unwrap_or(cfg.analysis.state_budget);
    let opts = SolveOptions {
        solver: match solver {
            SolverArg::Gs => Solver::AggregatedGaussSeidel,
            SolverArg::Power => Solver::Power,
        },
        ..Default::default()
    };
    let chain = solved_chain(&inst, caps, tail_target, budget, &opts)?;
    Ok(write_rows(&chain_rows(&chain, r)?, out.as_ref())?)
}

fn solved_chain(
    inst: &NetworkInstance,
    caps: [u32; 5],
    tail_target: Option<f64>,
    budget: usize,
    opts: &SolveOptions,
) -> Result<TruncatedChain> {
    Ok(match tail_target {
        Some(t) => solve_with_tail_target(inst, caps, t, budget, opts)?.0,
        None => {
            let mut chain = TruncatedChain::build(inst, caps, budget)?;
            chain.solve(opts)?;
            chain
        }
    })
}

fn chain_rows(chain: &TruncatedChain, r: f64) -> Result<Vec<Row>> {
    let report = chain.report.context("chain not solved")?;
    let tail = chain.tail_report()?;
    let mut rows = vec![
        Row::exact("states", Some(r), chain.len() as f64),
        Row::exact("iterations", Some(r), report.iterations as f64),
        Row::exact("residual", Some(r), report.residual),
    ];
    for k in 0..5 {
        rows.push(Row::exact(format!("cap{}", k + 1), Some(r), chain.caps[k] as f64));
    }
    let mean = chain.mean_z()?;
    for k in 0..5 {
        rows.push(Row::exact(format!("mean_z{}", k + 1), Some(r), mean[k]));
    }
    let idle = chain.idle_probabilities()?;
    for k in 0..5 {
        rows.push(Row::exact(format!("beta{}", k + 1), Some(r), idle[k]).with_reference(chain.inst.beta[k]));
    }
    for k in 0..5 {
        rows.push(Row::exact(format!("boundary_mass{}", k + 1), Some(r), tail.boundary_mass[k]));
    }
    rows.push(Row::exact("blocked_flux", Some(r), tail.blocked_flux));
    Ok(rows)
}

struct BarOptions {
    step: Step,
    eta1: f64,
    eta4: f64,
    source: Source,
    random: usize,
    tail_target: f64,
    horizon: u64,
    seed: Option<u64>,
}

/// Tolerance on `|LHS| / r^2` for step 3; step 1 is judged by its trend over `r`.
fn bar_threshold(o: &BarOptions) -> Option<f64> {
    match o.step {
        Step::One => None,
        Step::Three => Some(0.1 * o.eta4.abs()),
    }
}

/// Half-width bound of the asymptotic LHS, which is linear in the MGF values.
fn bar_half_width(inst: &NetworkInstance, theta: &reentrant_core::ThetaVector, mgf: &MgfEstimate) -> Result<f64> {
    let zero = reentrant_core::Estimate::exact(0.0);
    let unit = reentrant_core::Estimate::exact(1.0);
    let blank = MgfEstimate { psi: Some(zero), psi_k: [Some(zero); 5], ..mgf.clone() };
    let mut hw = 0.0;
    let mut probe = blank.clone();
    probe.psi = Some(unit);
    hw += asymptotic_bar_lhs(inst, theta, &probe)?.abs() * mgf.psi.map_or(0.0, |e| e.half_width);
    for k in 0..5 {
        let mut probe = blank.clone();
        probe.psi_k[k] = Some(unit);
        let c = asymptotic_bar_lhs(inst, theta, &probe)?;
        if c != 0.0 {
            hw += c.abs() * mgf.psi_k[k].map_or(f64::INFINITY, |e| e.half_width);
        }
    }
    Ok(hw)
}

fn bar_check(cfg: &ExperimentConfig, rs: &[f64], o: &BarOptions, out: Option<PathBuf>) -> Result<()> {
    if rs.windows(2).any(|w| w[1] >= w[0]) {
        bail!("--r must be strictly decreasing");
    }
    let insts = rs.iter().map(|&r| instance(cfg, r)).collect::<Result<Vec<_>>>()?;
    let seed = o.seed.or(cfg.sweep.as_ref().map(|s| s.seed)).unwrap_or(0);
    let threshold = bar_threshold(o);
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut scaled = Vec::new();
    for (i, (inst, &r)) in insts.iter().zip(rs).enumerate() {
        let theta = build_theta(o.step, o.eta1, o.eta4, r, &inst.base)?;
        for k in 0..5 {
            rows.push(Row::exact(format!("theta{}", k + 1), Some(r), theta.theta[k]));
        }
        let (lhs, hw) = match o.source {
            Source::Ctmc => {
                let opts = SolveOptions::default();
                let chain =
                    solved_chain(inst, cfg.analysis.ctmc_caps, Some(o.tail_target), cfg.analysis.state_budget, &opts)?;
                let constant = chain.bar_residual(|_| 1.0)?;
                rows.push(Row::exact("bar_residual_constant", Some(r), constant.residual));
                rows.push(Row::exact("bar_boundary_constant", Some(r), constant.boundary));
                if constant.residual.abs() > 1e-9 + constant.boundary {
                    failures.push(format!("r = {r}: constant residual {}", constant.residual));
                }
                let mut rng = labelled_stream(derive_seed(seed, &[i as u64]), AUXILIARY_STREAM);
                for j in 0..o.random {
                    let t: [f64; 5] = std::array::from_fn(|_| -rng.random::<f64>());
                    let res = chain.bar_residual(|z| (0..5).map(|k| t[k] * z[k] as f64).sum::<f64>().exp())?;
                    rows.push(Row::exact(format!("bar_residual_random{j}"), Some(r), res.residual));
                    rows.push(Row::exact(format!("bar_boundary_random{j}"), Some(r), res.boundary));
                    if res.residual.abs() > 1e-9 + res.boundary {
                        failures.push(format!("r = {r}: residual {} at theta {t:?}", res.residual));
                    }
                }
                let mgf = chain.exact_mgf(&theta.theta)?;
                (asymptotic_bar_lhs(inst, &theta, &mgf)?, 0.0)
            }
            Source::Sim => {
                let mut rc = RunConfig::new(o.horizon, derive_seed(seed, &[i as u64]));
                rc.probes = vec![theta.theta];
                let traj = run(inst, &rc)?;
                let opts = MgfOptions { min_conditioning_time: cfg.analysis.min_conditioning_time };
                let mgf = empirical_mgf(&traj, &[theta.theta], &opts)?.remove(0);
                (asymptotic_bar_lhs(inst, &theta, &mgf)?, bar_half_width(inst, &theta, &mgf)?)
            }
        };
        let tag = if o.source == Source::Ctmc { "exact" } else { "ci99_bound" };
        let r2 = r * r;
        rows.push(Row { quantity: "lhs".into(), r: Some(r), value: lhs, half_width: hw, tag, reference: None });
        rows.push(Row {
            quantity: "abs_lhs_over_r2".into(),
            r: Some(r),
            value: lhs.abs() / r2,
            half_width: hw / r2,
            tag,
            reference: None,
        });
        if let Some(t) = threshold {
            rows.push(Row::exact("threshold", Some(r), t));
            if lhs.abs() / r2 > t {
                failures.push(format!("r = {r}: |LHS|/r^2 = {} exceeds {t}", lhs.abs() / r2));
            }
        }
        scaled.push(lhs.abs() / r2);
    }
    write_rows(&rows, out.as_ref())?;
    if scaled.len() >= 2 && !scaled.windows(2).all(|w| w[1] < w[0]) {
        failures.push(format!("|LHS|/r^2 not decreasing over r = {rs:?}: {scaled:?}"));
    }
    if !failures.is_empty() {
        return Err(CheckFailed(failures.join("; ")).into());
    }
    Ok(())
}

fn lyapunov(
    cfg: &ExperimentConfig,
    rs: &[f64],
    side: u32,
    orders: &[u32],
    horizon: Option<u64>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &r in rs {
        let inst = instance(cfg, r)?;
        let check = check_box(&inst, side)?;
        rows.push(Row::exact("states", Some(r), check.states as f64));
        rows.push(Row::exact("violations_station1", Some(r), check.violations1 as f64));
        rows.push(Row::exact("worst_gap_station1", Some(r), check.worst_gap1));
        rows.push(Row::exact("mismatches_station2_closed_form", Some(r), check.violations2 as f64));
        rows.push(Row::exact("worst_gap_station2_closed_form", Some(r), check.worst_gap2));
        rows.push(Row::exact("mismatches_station2_generator_form", Some(r), check.violations2_generator as f64));
        if check.violations1 > 0 {
            failures.push(format!("r = {r}: station-1 bracket exceeds its bound at {} states", check.violations1));
        }
        if check.violations2 > 0 {
            failures.push(format!(
                "r = {r}: station-2 bracket differs from (1/m4)(-r^2/(1-r^2) + 1{{z2=z4=0}}) at {} states",
                check.violations2
            ));
        }
    }
    if let Some(h) = horizon {
        let seed = seed.or(cfg.sweep.as_ref().map(|s| s.seed)).unwrap_or(0);
        let sweep = moment_sweep(&cfg.base(), rs, orders, h, seed)?;
        for m in &sweep.rows {
            rows.push(Row::estimate(format!("moment_rz1_{}", m.order), Some(m.r), m.z1));
            rows.push(Row::estimate(format!("moment_r2z4_{}", m.order), Some(m.r), m.z4));
        }
        for m in sweep.rows.iter().filter(|m| m.order == orders[0]) {
            rows.push(Row::estimate("high_priority_sq", Some(m.r), m.high_priority_sq));
        }
        for v in &sweep.verdicts {
            rows.push(Row::exact(format!("growth_exponent {}", v.label), None, v.growth_exponent));
            if v.increasing_trend {
                failures.push(format!("{} increases as r decreases", v.label));
            }
        }
    }
    write_rows(&rows, out.as_ref())?;
    if !failures.is_empty() {
        return Err(CheckFailed(failures.join("; ")).into());
    }
    Ok(())
}
