//! Exact stationary analysis of the exponential network on a finite box.
//!
//! The generator is never stored: transitions are recomputed from the
//! priority rules, and incoming flow is enumerated over predecessor states.
//! Arrivals to a full class-1 buffer are suppressed; a completion whose
//! destination buffer is full removes the job from the network.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimators::{Estimate, MgfEstimate};
use crate::model::{idle_events, served_classes, NetworkInstance};

/// Default limit on the number of enumerated states.
pub const DEFAULT_STATE_BUDGET: usize = 60_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Solver {
    /// Uniformized power iteration.
    Power,
    /// Gauss-Seidel sweeps interleaved with exact birth-death aggregation
    /// along the slow `z4` coordinate.
    AggregatedGaussSeidel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolveOptions {
    pub solver: Solver,
    pub max_iterations: usize,
    /// Target for `max |(pi Q)_j|`.
    pub residual_tol: f64,
    /// Power iteration also stops when the relative change drops below this.
    pub change_tol: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            solver: Solver::AggregatedGaussSeidel,
            max_iterations: 20_000,
            residual_tol: 1e-11,
            change_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolveReport {
    pub solver: Solver,
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailReport {
    /// Stationary mass on `{z_k = cap_k}`.
    pub boundary_mass: [f64; 5],
    /// Stationary rate of suppressed arrivals and lost jobs.
    pub blocked_flux: f64,
}

impl TailReport {
    pub fn max_boundary_mass(&self) -> f64 {
        self.boundary_mass.iter().cloned().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BarResidual {
    /// `sum_z pi(z) (G f)(z)` under the truncated generator.
    pub residual: f64,
    /// `sum_z pi(z) sum_blocked rate |f(untruncated target) - f(actual target)|`.
    pub boundary: f64,
}

/// One enabled move out of a state.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Move {
    target: [u32; 5],
    /// Where the untruncated generator would have sent the chain.
    free_target: [u32; 5],
    rate: f64,
    blocked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruncatedChain {
    pub inst: NetworkInstance,
    pub caps: [u32; 5],
    strides: [usize; 5],
    len: usize,
    #[serde(skip)]
    pi: Vec<f64>,
    pub report: Option<SolveReport>,
}

impl TruncatedChain {
    pub fn build(inst: &NetworkInstance, caps: [u32; 5], budget: usize) -> Result<Self> {
        if !inst.base.all_exponential() {
            return Err(Error::NotExponential("the chain requires exponential interarrival and service times".into()));
        }
        if caps.iter().any(|&c| c < 1) {
            return Err(Error::InvalidParameter { field: "caps", reason: format!("{caps:?} must all be >= 1") });
        }
        let mut strides = [1usize; 5];
        let mut len: usize = 1;
        for k in 0..5 {
            strides[k] = len;
            len = len.saturating_mul(caps[k] as usize + 1);
        }
        if len > budget {
            return Err(Error::StateBudget { states: len, budget });
        }
        Ok(TruncatedChain { inst: inst.clone(), caps, strides, len, pi: Vec::new(), report: None })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_solved(&self) -> bool {
        !self.pi.is_empty()
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    #[inline]
    pub fn index(&self, z: &[u32; 5]) -> usize {
        (0..5).map(|k| z[k] as usize * self.strides[k]).sum()
    }

    pub fn state(&self, mut idx: usize) -> [u32; 5] {
        let mut z = [0; 5];
        for k in 0..5 {
            let base = self.caps[k] as usize + 1;
            z[k] = (idx % base) as u32;
            idx /= base;
        }
        z
    }

    #[inline]
    fn advance(&self, z: &mut [u32; 5]) {
        for k in 0..5 {
            if z[k] < self.caps[k] {
                z[k] += 1;
                return;
            }
            z[k] = 0;
        }
    }

    /// Enabled moves out of `z`, including blocked arrivals (which leave `z` unchanged).
    #[inline]
    fn moves(&self, z: &[u32; 5], out: &mut [Move; 3]) -> usize {
        let mut n = 0;
        let mut arrival = *z;
        arrival[0] += 1;
        let blocked = z[0] >= self.caps[0];
        out[n] = Move {
            target: if blocked { *z } else { arrival },
            free_target: arrival,
            rate: self.inst.base.alpha1,
            blocked,
        };
        n += 1;
        let (s1, s2) = served_classes(z);
        for k in [s1, s2].into_iter().flatten() {
            let mut free = *z;
            free[k] -= 1;
            let mut target = free;
            let mut blocked = false;
            if k < 4 {
                free[k + 1] += 1;
                if z[k + 1] < self.caps[k + 1] {
                    target = free;
                } else {
                    blocked = true;
                }
            }
            out[n] = Move { target, free_target: free, rate: self.inst.mu_r[k], blocked };
            n += 1;
        }
        n
    }

    /// Total rate of transitions that change the state.
    #[inline]
    fn out_rate(&self, z: &[u32; 5]) -> f64 {
        let (s1, s2) = served_classes(z);
        let mut q = if z[0] < self.caps[0] { self.inst.base.alpha1 } else { 0.0 };
        if let Some(k) = s1 {
            q += self.inst.mu_r[k];
        }
        if let Some(k) = s2 {
            q += self.inst.mu_r[k];
        }
        q
    }

    /// Sum of `pi(s) q(s, z)` over predecessors `s != z`.
    #[inline]
    fn inflow(&self, z: &[u32; 5], idx: usize, pi: &[f64]) -> f64 {
        let mut total = 0.0;
        if z[0] > 0 {
            total += self.inst.base.alpha1 * pi[idx - self.strides[0]];
        }
        for k in 0..5 {
            if z[k] >= self.caps[k] {
                continue;
            }
            // normal move k -> k+1 from z + e_k - e_{k+1}
            if k < 4 && z[k + 1] > 0 {
                let mut s = *z;
                s[k] += 1;
                s[k + 1] -= 1;
                if is_served(&s, k) {
                    total += self.inst.mu_r[k] * pi[idx + self.strides[k] - self.strides[k + 1]];
                }
            }
            // departure from class 5, or a lost job at a full buffer k+1
            if k == 4 || z[k + 1] == self.caps[k + 1] {
                let mut s = *z;
                s[k] += 1;
                if is_served(&s, k) {
                    total += self.inst.mu_r[k] * pi[idx + self.strides[k]];
                }
            }
        }
        total
    }

    /// Rows of the generator, diagonal included, as `(column, rate)` pairs.
    pub fn generator_row(&self, idx: usize) -> Vec<(usize, f64)> {
        let z = self.state(idx);
        let mut buf = [Move { target: z, free_target: z, rate: 0.0, blocked: false }; 3];
        let n = self.moves(&z, &mut buf);
        let mut row: Vec<(usize, f64)> = Vec::with_capacity(n + 1);
        let mut diag = 0.0;
        for m in &buf[..n] {
            let j = self.index(&m.target);
            if j != idx {
                row.push((j, m.rate));
                diag -= m.rate;
            }
        }
        row.push((idx, diag));
        row
    }

    /// `max_j |(pi Q)_j|`.
    pub fn residual_norm(&self, pi: &[f64]) -> f64 {
        let mut z = [0u32; 5];
        let mut worst: f64 = 0.0;
        for j in 0..self.len {
            let r = self.inflow(&z, j, pi) - pi[j] * self.out_rate(&z);
            worst = worst.max(r.abs());
            self.advance(&mut z);
        }
        worst
    }

    fn uniform_start(&self) -> Vec<f64> {
        vec![1.0 / self.len as f64; self.len]
    }

    pub fn solve(&mut self, opts: &SolveOptions) -> Result<SolveReport> {
        let report = match opts.solver {
            Solver::Power => self.solve_power(opts)?,
            Solver::AggregatedGaussSeidel => self.solve_gauss_seidel(opts)?,
        };
        self.report = Some(report);
        Ok(report)
    }

    fn solve_power(&mut self, opts: &SolveOptions) -> Result<SolveReport> {
        let max_mu1 = [0, 2, 4].iter().map(|&k| self.inst.mu_r[k]).fold(0.0, f64::max);
        let max_mu2 = self.inst.mu_r[1].max(self.inst.mu_r[3]);
        let lambda = 1.0001 * (self.inst.base.alpha1 + max_mu1 + max_mu2);
        let mut pi = self.uniform_start();
        let mut next = vec![0.0; self.len];
        let mut residual = f64::INFINITY;
        for it in 1..=opts.max_iterations {
            let mut z = [0u32; 5];
            let mut change: f64 = 0.0;
            let mut total = 0.0;
            for j in 0..self.len {
                let flow = self.inflow(&z, j, &pi) - pi[j] * self.out_rate(&z);
                next[j] = pi[j] + flow / lambda;
                total += next[j];
                self.advance(&mut z);
            }
            for j in 0..self.len {
                next[j] /= total;
                let rel = (next[j] - pi[j]).abs() / next[j].max(f64::MIN_POSITIVE);
                change = change.max(rel);
            }
            std::mem::swap(&mut pi, &mut next);
            if change <= opts.change_tol || it % 50 == 0 || it == opts.max_iterations {
                residual = self.residual_norm(&pi);
                if residual <= opts.residual_tol || change <= opts.change_tol {
                    self.pi = pi;
                    return Ok(SolveReport { solver: Solver::Power, iterations: it, residual });
                }
            }
        }
        Err(Error::NoConvergence { iterations: opts.max_iterations, residual })
    }

    fn gauss_seidel_sweep(&self, pi: &mut [f64]) {
        let mut z = [0u32; 5];
        for j in 0..self.len {
            let out = self.out_rate(&z);
            if out > 0.0 {
                pi[j] = self.inflow(&z, j, pi) / out;
            }
            self.advance(&mut z);
        }
        let total: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|p| *p /= total);
    }

    /// Rescales the levels of coordinate `c` (0 or 3) to the stationary law
    /// of the birth-death chain with the current conditional rates.
    fn aggregate(&self, pi: &mut [f64], c: usize) {
        let levels = self.caps[c] as usize + 1;
        let mut mass = vec![0.0; levels];
        let mut up = vec![0.0; levels];
        let mut down = vec![0.0; levels];
        let mut z = [0u32; 5];
        for &p in pi.iter() {
            let n = z[c] as usize;
            mass[n] += p;
            let (s1, s2) = served_classes(&z);
            match c {
                0 => {
                    if z[0] < self.caps[0] {
                        up[n] += p * self.inst.base.alpha1;
                    }
                    if s1 == Some(0) {
                        down[n] += p * self.inst.mu_r[0];
                    }
                }
                _ => {
                    if s1 == Some(2) && z[3] < self.caps[3] {
                        up[n] += p * self.inst.mu_r[2];
                    }
                    if s2 == Some(3) {
                        down[n] += p * self.inst.mu_r[3];
                    }
                }
            }
            self.advance(&mut z);
        }
        let mut target = vec![0.0; levels];
        target[0] = 1.0;
        for n in 0..levels - 1 {
            if mass[n] <= 0.0 || mass[n + 1] <= 0.0 || down[n + 1] <= 0.0 {
                return;
            }
            let birth = up[n] / mass[n];
            let death = down[n + 1] / mass[n + 1];
            target[n + 1] = target[n] * birth / death;
        }
        let total: f64 = target.iter().sum();
        let factor: Vec<f64> = (0..levels).map(|n| target[n] / total / mass[n]).collect();
        let mut z = [0u32; 5];
        for p in pi.iter_mut() {
            *p *= factor[z[c] as usize];
            self.advance(&mut z);
        }
    }

    fn solve_gauss_seidel(&mut self, opts: &SolveOptions) -> Result<SolveReport> {
        let mut pi = self.uniform_start();
        let mut residual = f64::INFINITY;
        for it in 1..=opts.max_iterations {
            self.aggregate(&mut pi, 3);
            self.gauss_seidel_sweep(&mut pi);
            self.gauss_seidel_sweep(&mut pi);
            if it % 5 == 0 || it == opts.max_iterations {
                residual = self.residual_norm(&pi);
                if residual <= opts.residual_tol {
                    self.pi = pi;
                    return Ok(SolveReport { solver: Solver::AggregatedGaussSeidel, iterations: it, residual });
                }
            }
        }
        Err(Error::NoConvergence { iterations: opts.max_iterations, residual })
    }

    fn require_solved(&self) -> Result<()> {
        if self.is_solved() {
            Ok(())
        } else {
            Err(Error::InsufficientData("chain has not been solved".into()))
        }
    }

    /// `sum_z pi(z) f(z)`.
    pub fn expect(&self, mut f: impl FnMut(&[u32; 5]) -> f64) -> Result<f64> {
        self.require_solved()?;
        let mut z = [0u32; 5];
        let mut total = 0.0;
        for &p in &self.pi {
            total += p * f(&z);
            self.advance(&mut z);
        }
        Ok(total)
    }

    pub fn mean_z(&self) -> Result<[f64; 5]> {
        self.require_solved()?;
        let mut m = [0.0; 5];
        let mut z = [0u32; 5];
        for &p in &self.pi {
            for k in 0..5 {
                m[k] += p * z[k] as f64;
            }
            self.advance(&mut z);
        }
        Ok(m)
    }

    /// Stationary probabilities of the five idle events.
    pub fn idle_probabilities(&self) -> Result<[f64; 5]> {
        self.require_solved()?;
        let mut m = [0.0; 5];
        let mut z = [0u32; 5];
        for &p in &self.pi {
            let idle = idle_events(&z);
            for k in 0..5 {
                if idle[k] {
                    m[k] += p;
                }
            }
            self.advance(&mut z);
        }
        Ok(m)
    }

    /// Stationary marginal law of `z_k` on `0..=cap_k`.
    pub fn marginal(&self, k: usize) -> Result<Vec<f64>> {
        self.require_solved()?;
        let mut m = vec![0.0; self.caps[k] as usize + 1];
        let mut z = [0u32; 5];
        for &p in &self.pi {
            m[z[k] as usize] += p;
            self.advance(&mut z);
        }
        Ok(m)
    }

    pub fn tail_report(&self) -> Result<TailReport> {
        self.require_solved()?;
        let mut boundary_mass = [0.0; 5];
        let mut blocked_flux = 0.0;
        let mut z = [0u32; 5];
        let mut buf = [Move { target: z, free_target: z, rate: 0.0, blocked: false }; 3];
        for &p in &self.pi {
            for k in 0..5 {
                if z[k] == self.caps[k] {
                    boundary_mass[k] += p;
                }
            }
            let n = self.moves(&z, &mut buf);
            blocked_flux += buf[..n].iter().filter(|m| m.blocked).map(|m| p * m.rate).sum::<f64>();
            self.advance(&mut z);
        }
        Ok(TailReport { boundary_mass, blocked_flux })
    }

    /// Exact `phi` and conditional `phi_k` at `theta`.
    pub fn exact_mgf(&self, theta: &[f64; 5]) -> Result<MgfEstimate> {
        self.require_solved()?;
        let mut phi = 0.0;
        let mut cond = [0.0; 5];
        let mut mass = [0.0; 5];
        let mut z = [0u32; 5];
        for &p in &self.pi {
            let g = p * (0..5).map(|k| theta[k] * z[k] as f64).sum::<f64>().exp();
            phi += g;
            let idle = idle_events(&z);
            for k in 0..5 {
                if idle[k] {
                    cond[k] += g;
                    mass[k] += p;
                }
            }
            self.advance(&mut z);
        }
        const NAMES: [&str; 5] = ["z1=z3=z5=0", "z2=0", "z3=z5=0", "z2=z4=0", "z5=0"];
        let mut phi_k = [None; 5];
        for k in 0..5 {
            if !(mass[k] > 0.0) {
                return Err(Error::EmptyConditioning(NAMES[k]));
            }
            phi_k[k] = Some(Estimate::exact(cond[k] / mass[k]));
        }
        Ok(MgfEstimate {
            theta: *theta,
            phi: Estimate::exact(phi),
            phi_k,
            psi: None,
            psi_k: [None; 5],
            occupation: mass,
        })
    }

    /// `E_pi[G f]` together with the truncation correction bound.
    pub fn bar_residual(&self, mut f: impl FnMut(&[u32; 5]) -> f64) -> Result<BarResidual> {
        self.require_solved()?;
        let mut residual = 0.0;
        let mut boundary = 0.0;
        let mut z = [0u32; 5];
        let mut buf = [Move { target: z, free_target: z, rate: 0.0, blocked: false }; 3];
        for &p in &self.pi {
            let here = f(&z);
            let n = self.moves(&z, &mut buf);
            for m in &buf[..n] {
                let there = f(&m.target);
                residual += p * m.rate * (there - here);
                if m.blocked {
                    boundary += p * m.rate * (f(&m.free_target) - there).abs();
                }
            }
            self.advance(&mut z);
        }
        Ok(BarResidual { residual, boundary })
    }
}

#[inline]
fn is_served(z: &[u32; 5], k: usize) -> bool {
    let (s1, s2) = served_classes(z);
    s1 == Some(k) || s2 == Some(k)
}

/// Next cap for a coordinate whose boundary mass `marginal[cap]` is too large.
///
/// Fits a geometric decay on the interior of the marginal and extends the cap
/// until the extrapolated boundary mass is a quarter of `tail_tol`; falls back
/// to doubling when no decay is visible.
fn next_cap(marginal: &[f64], tail_tol: f64) -> u32 {
    let c = marginal.len() - 1;
    let doubled = (2 * c).max(2) as u32;
    if c < 6 {
        return doubled;
    }
    let (hi, lo) = (marginal[c - 2], marginal[c - 6]);
    let q = (hi / lo).powf(0.25);
    if !(q > 0.0 && q < 0.98) {
        return doubled;
    }
    let extra = ((0.25 * tail_tol / marginal[c]).ln() / q.ln()).ceil();
    let grown = c as f64 + extra.max(2.0);
    (grown.min(2.0 * c as f64) as u32).max(c as u32 + 2)
}

/// Builds and solves chains, growing every cap whose boundary mass exceeds
/// `tail_tol`, until all pass.
pub fn solve_with_tail_target(
    inst: &NetworkInstance,
    start: [u32; 5],
    tail_tol: f64,
    budget: usize,
    opts: &SolveOptions,
) -> Result<(TruncatedChain, TailReport)> {
    let mut caps = start;
    loop {
        let mut chain = TruncatedChain::build(inst, caps, budget)?;
        chain.solve(opts)?;
        let tail = chain.tail_report()?;
        if tail.max_boundary_mass() <= tail_tol {
            return Ok((chain, tail));
        }
        for k in 0..5 {
            if tail.boundary_mass[k] > tail_tol {
                caps[k] = next_cap(&chain.marginal(k)?, tail_tol);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{scale, BaseParams};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn symmetric(r: f64) -> NetworkInstance {
        scale(&BaseParams::symmetric_exponential(), r).unwrap()
    }

    fn solved(r: f64, caps: [u32; 5], solver: Solver) -> TruncatedChain {
        let mut c = TruncatedChain::build(&symmetric(r), caps, DEFAULT_STATE_BUDGET).unwrap();
        c.solve(&SolveOptions { solver, ..Default::default() }).unwrap();
        c
    }

    /// Dense direct solve of `pi Q = 0`, `sum pi = 1` as an independent oracle.
    fn dense_oracle(chain: &TruncatedChain) -> Vec<f64> {
        let n = chain.len();
        let mut a = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for (j, q) in chain.generator_row(i) {
                a[(j, i)] += q;
            }
        }
        for i in 0..n {
            a[(n - 1, i)] = 1.0;
        }
        let mut b = nalgebra::DVector::<f64>::zeros(n);
        b[n - 1] = 1.0;
        a.lu().solve(&b).unwrap().iter().cloned().collect()
    }

    #[test]
    fn smallest_box() {
        let chain = TruncatedChain::build(&symmetric(0.5), [1; 5], 100).unwrap();
        assert_eq!(chain.len(), 32);
        for i in 0..32 {
            let row = chain.generator_row(i);
            assert!(row.len() <= 7);
            assert!(row.iter().map(|x| x.1).sum::<f64>().abs() < 1e-12);
            assert!(row.iter().filter(|x| x.0 != i).all(|x| x.1 >= 0.0));
            assert_eq!(chain.index(&chain.state(i)), i);
        }
    }

    #[test]
    fn outgoing_events_follow_priorities() {
        let inst = symmetric(0.5);
        let chain = TruncatedChain::build(&inst, [5; 5], 1_000_000).unwrap();
        let row = chain.generator_row(chain.index(&[1, 0, 1, 0, 1]));
        let targets: Vec<[u32; 5]> = row.iter().filter(|x| x.1 > 0.0).map(|x| chain.state(x.0)).collect();
        assert_eq!(targets, vec![[2, 0, 1, 0, 1], [1, 0, 1, 0, 0]]);
        let row = chain.generator_row(chain.index(&[0, 1, 0, 2, 0]));
        let off: Vec<([u32; 5], f64)> = row.iter().filter(|x| x.1 > 0.0).map(|x| (chain.state(x.0), x.1)).collect();
        assert_eq!(off.len(), 2);
        assert_eq!(off[1].0, [0, 0, 1, 2, 0]);
        assert!((off[1].1 - inst.mu_r[1]).abs() < 1e-15);
    }

    #[test]
    fn no_absorbing_states() {
        let chain = TruncatedChain::build(&symmetric(0.5), [2; 5], 10_000).unwrap();
        for i in 0..chain.len() {
            let z = chain.state(i);
            assert!(chain.out_rate(&z) > 0.0, "{z:?}");
        }
    }

    #[test]
    fn budget_is_enforced() {
        assert!(matches!(
            TruncatedChain::build(&symmetric(0.5), [9; 5], 1000),
            Err(Error::StateBudget { states: 100_000, budget: 1000 })
        ));
        let hyper = BaseParams {
            dist_e: crate::distributions::DistributionSpec::Uniform,
            ..BaseParams::symmetric_exponential()
        };
        assert!(TruncatedChain::build(&scale(&hyper, 0.5).unwrap(), [1; 5], 100).is_err());
    }

    #[test]
    fn solvers_agree_with_dense_oracle() {
        for caps in [[1; 5], [3, 2, 2, 3, 2]] {
            let oracle = dense_oracle(&solved(0.5, caps, Solver::Power));
            for solver in [Solver::Power, Solver::AggregatedGaussSeidel] {
                let c = solved(0.5, caps, solver);
                assert!((c.pi().iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(c.residual_norm(c.pi()) <= 1e-10);
                for (a, b) in c.pi().iter().zip(&oracle) {
                    assert!((a - b).abs() < 1e-9, "{solver:?}");
                    assert!(*a >= 0.0);
                }
            }
        }
    }

    #[test]
    fn exact_mgf_basics() {
        let c = solved(0.5, [12, 6, 6, 20, 6], Solver::AggregatedGaussSeidel);
        let m = c.exact_mgf(&[0.0; 5]).unwrap();
        assert!((m.phi.value - 1.0).abs() < 1e-12);
        assert!(m.phi_k.iter().all(|p| (p.unwrap().value - 1.0).abs() < 1e-12));
        let a = c.exact_mgf(&[-0.1, 0.0, 0.0, -0.1, 0.0]).unwrap();
        let b = c.exact_mgf(&[-0.2, 0.0, 0.0, -0.1, 0.0]).unwrap();
        assert!(a.phi.value > b.phi.value);
        assert_eq!(a.phi.half_width, 0.0);
    }

    #[test]
    fn bar_residuals() {
        let c = solved(0.5, [12, 6, 6, 20, 6], Solver::AggregatedGaussSeidel);
        let one = c.bar_residual(|_| 1.0).unwrap();
        assert_eq!(one.residual, 0.0);
        let theta = [-0.1, -0.05, -0.1, -0.02, -0.1];
        let g = c.bar_residual(|z| (0..5).map(|k| theta[k] * z[k] as f64).sum::<f64>().exp()).unwrap();
        assert!(g.residual.abs() <= 1e-9);
        // G z4 = mu3 1{z3>0, z5=0, z4<cap} - mu4 1{z4>0, z2=0}
        let inst = &c.inst;
        let caps = c.caps;
        let up = c.expect(|z| (z[2] > 0 && z[4] == 0 && z[3] < caps[3]) as u8 as f64).unwrap();
        let down = c.expect(|z| (z[3] > 0 && z[1] == 0) as u8 as f64).unwrap();
        let z4 = c.bar_residual(|z| z[3] as f64).unwrap();
        assert!((z4.residual - (inst.mu_r[2] * up - inst.mu_r[3] * down)).abs() < 1e-9);
        assert!(z4.residual.abs() < 1e-9);
    }

    #[test]
    fn tail_target_grows_caps() {
        let (chain, tail) =
            solve_with_tail_target(&symmetric(0.7), [2; 5], 1e-3, 10_000_000, &SolveOptions::default()).unwrap();
        assert!(tail.max_boundary_mass() <= 1e-3);
        assert!(chain.caps.iter().all(|&c| c >= 2));
        let m = chain.marginal(3).unwrap();
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cap_extrapolation() {
        // geometric marginal with ratio 1/2: boundary mass 2^-10 needs about 10 more levels for 2^-20/4
        let m: Vec<f64> = (0..=10).map(|i| 0.5f64.powi(i + 1)).collect();
        let c = next_cap(&m, 0.5f64.powi(20));
        assert_eq!(c, 20);
        assert_eq!(next_cap(&[0.5, 0.5], 1e-6), 2);
        assert_eq!(next_cap(&vec![0.1; 10], 1e-6), 18);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn incoming_flow_matches_explicit_rows(z in proptest::array::uniform5(0u32..4)) {
            // sum over explicit rows of pi(i) q(i, j) equals the predecessor enumeration
            let chain = TruncatedChain::build(&symmetric(0.5), [3; 5], 2000).unwrap();
            let pi: Vec<f64> = (0..chain.len()).map(|i| 1.0 + (i % 7) as f64).collect();
            let j = chain.index(&z);
            let mut explicit = 0.0;
            for i in 0..chain.len() {
                for (col, q) in chain.generator_row(i) {
                    if col == j && i != j {
                        explicit += pi[i] * q;
                    }
                }
            }
            prop_assert!((explicit - chain.inflow(&z, j, &pi)).abs() < 1e-9);
            let out: f64 = chain.generator_row(j).iter().filter(|x| x.0 != j).map(|x| x.1).sum();
            prop_assert!((out - chain.out_rate(&z)).abs() < 1e-12);
        }
    }
}
