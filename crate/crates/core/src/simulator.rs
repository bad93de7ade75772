//! Discrete-event simulation of the reentrant line under preemptive-resume
//! priority `(5, 3, 1)` at station 1 and `(2, 4)` at station 2.

use serde::Serialize;

use crate::distributions::Streams;
use crate::error::{Error, Result};
use crate::mgf_calculus::TransformValues;
use crate::model::{idle_events, served_classes, NetworkInstance};

/// Markov state: queue lengths plus residual clocks (in time units).
///
/// When `z[k] == 0`, `r_s[k]` holds the full requirement of the next class-k job.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimState {
    pub z: [u32; 5],
    pub r_e1: f64,
    pub r_s: [f64; 5],
    pub clock: f64,
}

impl SimState {
    /// Empty system with fresh interarrival and service draws.
    pub fn empty(inst: &NetworkInstance, streams: &mut Streams) -> Self {
        let base = &inst.base;
        SimState {
            z: [0; 5],
            r_e1: base.dist_e.sample(&mut streams.arrival) / base.alpha1,
            r_s: std::array::from_fn(|k| inst.m_r[k] * base.dist_s[k].sample(&mut streams.service[k])),
            clock: 0.0,
        }
    }

    pub fn total_jobs(&self) -> u64 {
        self.z.iter().map(|&x| x as u64).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EventKind {
    Arrival,
    /// Service completion of the 0-based class index.
    Completion(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EventRecord {
    pub kind: EventKind,
    /// Time elapsed since the previous event.
    pub dt: f64,
    /// Classes served during the elapsed interval.
    pub served: (Option<usize>, Option<usize>),
}

/// Advances `state` to its next event.
///
/// Ties are resolved as station-1 completion, station-2 completion, arrival.
pub fn step(state: &mut SimState, inst: &NetworkInstance, streams: &mut Streams) -> EventRecord {
    let served = served_classes(&state.z);
    let mut dt = state.r_e1;
    let mut kind = EventKind::Arrival;
    if let Some(k) = served.1 {
        if state.r_s[k] <= dt {
            dt = state.r_s[k];
            kind = EventKind::Completion(k);
        }
    }
    if let Some(k) = served.0 {
        if state.r_s[k] <= dt {
            dt = state.r_s[k];
            kind = EventKind::Completion(k);
        }
    }
    state.clock += dt;
    state.r_e1 -= dt;
    if let Some(k) = served.0 {
        state.r_s[k] -= dt;
    }
    if let Some(k) = served.1 {
        state.r_s[k] -= dt;
    }
    let base = &inst.base;
    match kind {
        EventKind::Arrival => {
            state.z[0] += 1;
            state.r_e1 = base.dist_e.sample(&mut streams.arrival) / base.alpha1;
        }
        EventKind::Completion(k) => {
            state.z[k] -= 1;
            if k < 4 {
                state.z[k + 1] += 1;
            }
            state.r_s[k] = inst.m_r[k] * base.dist_s[k].sample(&mut streams.service[k]);
        }
    }
    EventRecord { kind, dt, served }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    /// Total number of events, warmup included.
    pub horizon: u64,
    /// Events discarded before accumulation starts.
    pub warmup: u64,
    pub batches: usize,
    pub seed: u64,
    /// Nonpositive `theta` vectors whose MGFs are accumulated.
    pub probes: Vec<[f64; 5]>,
    /// Time between recorded `z` snapshots, if any.
    pub snapshot_spacing: Option<f64>,
}

impl RunConfig {
    /// Warmup of 10% and 32 batches.
    pub fn new(horizon: u64, seed: u64) -> Self {
        RunConfig { horizon, warmup: horizon / 10, batches: 32, seed, probes: Vec::new(), snapshot_spacing: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon <= self.warmup {
            return Err(Error::InvalidParameter {
                field: "horizon",
                reason: format!("horizon {} must exceed warmup {}", self.horizon, self.warmup),
            });
        }
        if self.batches == 0 || (self.horizon - self.warmup) < self.batches as u64 {
            return Err(Error::InvalidParameter {
                field: "batches",
                reason: format!("cannot split {} events into {} batches", self.horizon - self.warmup, self.batches),
            });
        }
        if let Some(p) = self.probes.iter().find(|p| p.iter().any(|&t| t > 0.0 || !t.is_finite())) {
            return Err(Error::InvalidParameter { field: "probes", reason: format!("theta {p:?} must be finite and nonpositive") });
        }
        if let Some(s) = self.snapshot_spacing {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidParameter { field: "snapshot_spacing", reason: format!("{s}") });
            }
        }
        Ok(())
    }
}

/// Time integrals of one probe over one batch.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ProbeIntegrals {
    pub phi: f64,
    pub phi_k: [f64; 5],
    pub psi: f64,
    pub psi_k: [f64; 5],
}

/// Accumulated time integrals for one batch.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BatchStats {
    pub duration: f64,
    pub events: u64,
    pub z: [f64; 5],
    /// Integrals of `z1^p` and `z4^p` for `p = 1, 2, 3`.
    pub z1_pow: [f64; 3],
    pub z4_pow: [f64; 3],
    /// Integral of `(z2 + z3 + z5)^2`.
    pub high_sq: f64,
    pub busy: [f64; 2],
    /// Occupation times of the five idle events.
    pub idle: [f64; 5],
    pub completions: [u64; 5],
    pub arrivals: u64,
    pub probes: Vec<ProbeIntegrals>,
}

impl BatchStats {
    fn with_probes(n: usize) -> Self {
        BatchStats { probes: vec![ProbeIntegrals::default(); n], ..Default::default() }
    }

    /// Adds an interval of length `dt` spent in `z` before the event of `state`.
    #[inline]
    fn accumulate(&mut self, z: &[u32; 5], dt: f64, served: (Option<usize>, Option<usize>)) {
        self.duration += dt;
        for k in 0..5 {
            self.z[k] += z[k] as f64 * dt;
        }
        let z1 = z[0] as f64;
        let z4 = z[3] as f64;
        self.z1_pow[0] += z1 * dt;
        self.z1_pow[1] += z1 * z1 * dt;
        self.z1_pow[2] += z1 * z1 * z1 * dt;
        self.z4_pow[0] += z4 * dt;
        self.z4_pow[1] += z4 * z4 * dt;
        self.z4_pow[2] += z4 * z4 * z4 * dt;
        let h = (z[1] + z[2] + z[4]) as f64;
        self.high_sq += h * h * dt;
        if served.0.is_some() {
            self.busy[0] += dt;
        }
        if served.1.is_some() {
            self.busy[1] += dt;
        }
        let idle = idle_events(z);
        for k in 0..5 {
            if idle[k] {
                self.idle[k] += dt;
            }
        }
    }
}

/// Precomputed transform data for one probe.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Probe {
    pub theta: [f64; 5],
    pub transforms: TransformValues,
    /// Exponent slope of the residual clocks: `gamma1 alpha1` for the arrival clock.
    gamma_rate: f64,
    /// `zeta_k mu_k` for every class.
    zeta_rate: [f64; 5],
}

impl Probe {
    pub fn new(inst: &NetworkInstance, theta: [f64; 5]) -> Result<Self> {
        let transforms = TransformValues::new(&inst.base, &theta)?;
        Ok(Probe {
            theta,
            gamma_rate: transforms.gamma1 * inst.base.alpha1,
            zeta_rate: std::array::from_fn(|k| transforms.zeta[k] * inst.mu_r[k]),
            transforms,
        })
    }

    /// Exponent of the residual-augmented test function at the start of an interval.
    #[inline]
    fn psi_exponent(&self, state_before: &SimState, lin: f64) -> f64 {
        let mut e = lin - self.gamma_rate * state_before.r_e1;
        for k in 0..5 {
            e += self.zeta_rate[k] * state_before.r_s[k];
        }
        e
    }

    #[inline]
    fn linear(&self, z: &[u32; 5]) -> f64 {
        (0..5).map(|k| self.theta[k] * z[k] as f64).sum()
    }
}

/// `int_0^dt exp(e0 + c t) dt`.
#[inline]
fn exp_integral(e0: f64, c: f64, dt: f64) -> f64 {
    let x = c * dt;
    let factor = if x.abs() < 1e-12 { 1.0 + 0.5 * x } else { x.exp_m1() / x };
    e0.exp() * dt * factor
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub r: f64,
    pub seed: u64,
    pub horizon: u64,
    pub warmup: u64,
    pub probes: Vec<Probe>,
    pub batches: Vec<BatchStats>,
    /// `(time, z)` samples taken every `snapshot_spacing` after warmup.
    pub snapshots: Vec<(f64, [u32; 5])>,
    pub snapshot_spacing: Option<f64>,
    pub final_state: SimState,
}

impl Trajectory {
    /// All batches merged into one accumulator.
    pub fn total(&self) -> BatchStats {
        let mut t = BatchStats::with_probes(self.probes.len());
        for b in &self.batches {
            t.duration += b.duration;
            t.events += b.events;
            for k in 0..5 {
                t.z[k] += b.z[k];
                t.idle[k] += b.idle[k];
                t.completions[k] += b.completions[k];
            }
            for p in 0..3 {
                t.z1_pow[p] += b.z1_pow[p];
                t.z4_pow[p] += b.z4_pow[p];
            }
            t.high_sq += b.high_sq;
            t.busy[0] += b.busy[0];
            t.busy[1] += b.busy[1];
            t.arrivals += b.arrivals;
            for (acc, p) in t.probes.iter_mut().zip(&b.probes) {
                acc.phi += p.phi;
                acc.psi += p.psi;
                for k in 0..5 {
                    acc.phi_k[k] += p.phi_k[k];
                    acc.psi_k[k] += p.psi_k[k];
                }
            }
        }
        t
    }

    pub fn post_warmup_time(&self) -> f64 {
        self.batches.iter().map(|b| b.duration).sum()
    }
}

/// Simulates `cfg.horizon` events from the empty state.
pub fn run(inst: &NetworkInstance, cfg: &RunConfig) -> Result<Trajectory> {
    cfg.validate()?;
    if let Some((name, value)) = inst.check_stability().violation() {
        return Err(Error::Unstable { name, value });
    }
    let probes = cfg.probes.iter().map(|&t| Probe::new(inst, t)).collect::<Result<Vec<_>>>()?;
    let mut streams = Streams::new(cfg.seed);
    let mut state = SimState::empty(inst, &mut streams);
    for _ in 0..cfg.warmup {
        step(&mut state, inst, &mut streams);
    }

    let measured = cfg.horizon - cfg.warmup;
    let per_batch = measured / cfg.batches as u64;
    let mut batches = Vec::with_capacity(cfg.batches);
    let mut current = BatchStats::with_probes(probes.len());
    let mut snapshots = Vec::new();
    let start = state.clock;
    let mut next_snapshot = cfg.snapshot_spacing.map(|s| start + s);

    for i in 0..measured {
        let z = state.z;
        let before_e1 = state.r_e1;
        let before_s = state.r_s;
        let clock = state.clock;
        let ev = step(&mut state, inst, &mut streams);
        current.accumulate(&z, ev.dt, ev.served);
        current.events += 1;
        match ev.kind {
            EventKind::Arrival => current.arrivals += 1,
            EventKind::Completion(k) => current.completions[k] += 1,
        }
        if !probes.is_empty() {
            let idle = idle_events(&z);
            let prior = SimState { z, r_e1: before_e1, r_s: before_s, clock };
            for (p, acc) in probes.iter().zip(current.probes.iter_mut()) {
                let lin = p.linear(&z);
                let phi = lin.exp() * ev.dt;
                let e0 = p.psi_exponent(&prior, lin);
                let mut c = p.gamma_rate;
                if let Some(k) = ev.served.0 {
                    c -= p.zeta_rate[k];
                }
                if let Some(k) = ev.served.1 {
                    c -= p.zeta_rate[k];
                }
                let psi = exp_integral(e0, c, ev.dt);
                acc.phi += phi;
                acc.psi += psi;
                for k in 0..5 {
                    if idle[k] {
                        acc.phi_k[k] += phi;
                        acc.psi_k[k] += psi;
                    }
                }
            }
        }
        if let (Some(spacing), Some(next)) = (cfg.snapshot_spacing, next_snapshot.as_mut()) {
            while *next < state.clock {
                snapshots.push((*next, z));
                *next += spacing;
            }
        }
        let done = i + 1;
        if done % per_batch == 0 && batches.len() + 1 < cfg.batches {
            batches.push(std::mem::replace(&mut current, BatchStats::with_probes(probes.len())));
        }
    }
    batches.push(current);

    Ok(Trajectory {
        r: inst.r,
        seed: cfg.seed,
        horizon: cfg.horizon,
        warmup: cfg.warmup,
        probes,
        batches,
        snapshots,
        snapshot_spacing: cfg.snapshot_spacing,
        final_state: state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::DistributionSpec;
    use crate::model::{scale, BaseParams};
    use proptest::prelude::*;

    fn symmetric(r: f64) -> NetworkInstance {
        scale(&BaseParams::symmetric_exponential(), r).unwrap()
    }

    fn forced(z: [u32; 5], r_e1: f64, r_s: [f64; 5]) -> SimState {
        SimState { z, r_e1, r_s, clock: 0.0 }
    }

    #[test]
    fn empty_system_only_admits_arrivals() {
        let inst = symmetric(0.5);
        let mut streams = Streams::new(1);
        let mut s = forced([0; 5], 0.7, [0.1; 5]);
        let ev = step(&mut s, &inst, &mut streams);
        assert_eq!(ev.kind, EventKind::Arrival);
        assert_eq!(s.z, [1, 0, 0, 0, 0]);
        assert_eq!(s.r_s, [0.1; 5]);
        assert!((s.clock - 0.7).abs() < 1e-15);
    }

    #[test]
    fn station1_serves_class5_first() {
        let inst = symmetric(0.5);
        let mut streams = Streams::new(1);
        let mut s = forced([1, 0, 1, 0, 1], 5.0, [0.2, 1.0, 0.1, 1.0, 0.3]);
        let ev = step(&mut s, &inst, &mut streams);
        assert_eq!(ev.kind, EventKind::Completion(4));
        assert_eq!(s.z, [1, 0, 1, 0, 0]);
        // preempted residuals are frozen
        assert_eq!(s.r_s[0], 0.2);
        assert_eq!(s.r_s[2], 0.1);
        assert!((s.r_e1 - 4.7).abs() < 1e-15);
    }

    #[test]
    fn station2_serves_class2_first() {
        let inst = symmetric(0.5);
        let mut streams = Streams::new(1);
        let mut s = forced([0, 1, 0, 2, 0], 5.0, [1.0, 0.4, 1.0, 0.05, 1.0]);
        let ev = step(&mut s, &inst, &mut streams);
        assert_eq!(ev.kind, EventKind::Completion(1));
        assert_eq!(s.z, [0, 0, 1, 2, 0]);
        assert_eq!(s.r_s[3], 0.05);
    }

    #[test]
    fn ties_follow_station_order() {
        let inst = symmetric(0.5);
        let mut streams = Streams::new(1);
        let mut s = forced([1, 1, 0, 0, 0], 0.5, [0.5, 0.5, 1.0, 1.0, 1.0]);
        assert_eq!(step(&mut s, &inst, &mut streams).kind, EventKind::Completion(0));
        let mut s = forced([0, 1, 0, 0, 0], 0.5, [0.5, 0.5, 1.0, 1.0, 1.0]);
        assert_eq!(step(&mut s, &inst, &mut streams).kind, EventKind::Completion(1));
    }

    #[test]
    fn runs_are_reproducible() {
        let inst = symmetric(0.5);
        let mut cfg = RunConfig::new(50_000, 9);
        cfg.probes = vec![[-0.1, 0.0, 0.0, -0.05, 0.0]];
        cfg.snapshot_spacing = Some(10.0);
        let a = run(&inst, &cfg).unwrap();
        let b = run(&inst, &cfg).unwrap();
        assert_eq!(a, b);
        cfg.seed = 10;
        assert_ne!(run(&inst, &cfg).unwrap().batches, a.batches);
    }

    #[test]
    fn batch_layout() {
        let inst = symmetric(0.5);
        let cfg = RunConfig { horizon: 10_007, warmup: 1_000, batches: 8, ..RunConfig::new(0, 3) };
        let t = run(&inst, &cfg).unwrap();
        assert_eq!(t.batches.len(), 8);
        assert_eq!(t.total().events, 9_007);
        assert!(t.batches.iter().all(|b| b.duration > 0.0));
    }

    #[test]
    fn rejects_bad_configs() {
        let inst = symmetric(0.5);
        assert!(run(&inst, &RunConfig { horizon: 10, warmup: 10, ..RunConfig::new(0, 1) }).is_err());
        let mut cfg = RunConfig::new(1000, 1);
        cfg.probes.push([0.1, 0.0, 0.0, 0.0, 0.0]);
        assert!(run(&inst, &cfg).is_err());
    }

    #[test]
    fn zero_probe_integrates_to_duration() {
        let inst = symmetric(0.5);
        let mut cfg = RunConfig::new(20_000, 5);
        cfg.probes = vec![[0.0; 5]];
        let t = run(&inst, &cfg).unwrap();
        for b in &t.batches {
            assert!((b.probes[0].phi - b.duration).abs() <= 1e-9 * b.duration);
            assert!((b.probes[0].psi - b.duration).abs() <= 1e-9 * b.duration);
            for k in 0..5 {
                assert!((b.probes[0].phi_k[k] - b.idle[k]).abs() <= 1e-9 * b.duration);
            }
        }
    }

    #[test]
    fn psi_integral_matches_fine_quadrature() {
        let (e0, c, dt) = (-0.3, 0.8, 0.37);
        let n = 200_000;
        let h = dt / n as f64;
        let quad: f64 = (0..n).map(|i| (e0 + c * (i as f64 + 0.5) * h).exp() * h).sum();
        assert!((exp_integral(e0, c, dt) - quad).abs() < 1e-10);
        assert!((exp_integral(e0, 0.0, dt) - e0.exp() * dt).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn event_invariants(seed in 0u64..1000, r in 0.2f64..0.9, family in 0usize..4) {
            let dist = [
                DistributionSpec::Exponential,
                DistributionSpec::Erlang { k: 3 },
                DistributionSpec::Deterministic,
                DistributionSpec::HyperExp2 { scv: 2.5 },
            ][family];
            let base = BaseParams { dist_e: dist, dist_s: [dist; 5], ..BaseParams::symmetric_exponential() };
            let inst = scale(&base, r).unwrap();
            let mut streams = Streams::new(seed);
            let mut s = SimState::empty(&inst, &mut streams);
            for _ in 0..2_000 {
                let before = s.clone();
                let ev = step(&mut s, &inst, &mut streams);
                prop_assert!(ev.dt >= 0.0 && s.clock >= before.clock);
                let delta = s.total_jobs() as i64 - before.total_jobs() as i64;
                match ev.kind {
                    EventKind::Arrival => prop_assert_eq!(delta, 1),
                    EventKind::Completion(4) => prop_assert_eq!(delta, -1),
                    EventKind::Completion(k) => {
                        prop_assert_eq!(delta, 0);
                        prop_assert!(before.z[k] > 0);
                    }
                }
                prop_assert_eq!(ev.served, served_classes(&before.z));
                prop_assert!(s.r_e1 >= 0.0 && s.r_s.iter().all(|&x| x >= 0.0));
            }
        }

        #[test]
        fn occupation_fractions_nested(seed in 0u64..1000) {
            let inst = symmetric(0.4);
            let t = run(&inst, &RunConfig::new(20_000, seed)).unwrap();
            let tot = t.total();
            let f = tot.idle.map(|x| x / tot.duration);
            prop_assert!(f.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!(f[4] >= f[2] && f[2] >= f[0]);
            prop_assert!(f[1] >= f[3]);
        }
    }
}
