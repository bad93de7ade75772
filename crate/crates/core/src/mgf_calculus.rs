//! Transform layer of the MGF analysis.
//!
//! For a test function `exp(<theta, z>)` augmented by the residual clocks, the
//! arrival and service transforms `gamma_1(theta_1)` and `zeta_k(theta)` are
//! the roots of
//!
//! ```text
//! exp(theta_1) E[exp(-gamma_1 T_e)] = 1
//! exp(theta_{k+1} 1{k<5} - theta_k) E[exp(-zeta_k T_{s,k})] = 1
//! ```
//!
//! Their second-order Taylor parts (`bar` = linear, `tilde` = quadratic) drive
//! the asymptotic BAR. The strategic directions make the linear boundary
//! coefficients cancel so only the idle terms at one station survive.

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;

use crate::distributions::DistributionSpec;
use crate::error::{Error, Result};
use crate::estimators::{Estimate, MgfEstimate};
use crate::model::{BaseParams, NetworkInstance};

/// Residual tolerance on the defining equation of `gamma` / `zeta`.
pub const ROOT_TOL: f64 = 1e-13;

/// `theta_{k+1} 1{k<5} - theta_k` for every class.
#[inline]
pub fn zeta_bar(theta: &[f64; 5]) -> [f64; 5] {
    std::array::from_fn(|k| if k < 4 { theta[k + 1] - theta[k] } else { -theta[k] })
}

/// Finds `s` with `ln E[exp(-s T)] = target`.
///
/// The log-transform is strictly decreasing, so the root is bracketed first
/// and then refined by safeguarded Newton steps.
fn solve_log_laplace(dist: &DistributionSpec, target: f64) -> Result<f64> {
    if target == 0.0 {
        return Ok(0.0);
    }
    let g = |s: f64| -> Result<f64> { Ok(dist.log_laplace(s)? - target) };
    let (mut lo, mut hi);
    if target > 0.0 {
        hi = 0.0;
        let bound = dist.laplace_lower_bound();
        lo = if bound.is_finite() { bound + 1e-9 * (1.0 - bound).abs().max(1.0) } else { -1.0 };
        let mut tries = 0;
        while g(lo)? <= 0.0 {
            tries += 1;
            if tries > 200 {
                return Err(Error::RootFinding(format!("no lower bracket for target {target}")));
            }
            lo = if bound.is_finite() { bound + (lo - bound) * 1e-3 } else { lo * 2.0 };
        }
    } else {
        lo = 0.0;
        hi = 10.0;
        let mut tries = 0;
        while g(hi)? >= 0.0 {
            tries += 1;
            if tries > 200 {
                return Err(Error::RootFinding(format!("no upper bracket for target {target}")));
            }
            hi *= 2.0;
        }
    }
    // g(lo) > 0 > g(hi)
    let mut s = 0.5 * (lo + hi);
    for _ in 0..200 {
        let value = g(s)?;
        if value == 0.0 {
            break;
        }
        if value > 0.0 {
            lo = s;
        } else {
            hi = s;
        }
        let slope = dist.dlog_laplace(s)?;
        let newton = s - value / slope;
        let next = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (next - s).abs() <= 1e-17 * (1.0 + s.abs()) || hi - lo <= f64::EPSILON * (1.0 + s.abs()) {
            s = next;
            break;
        }
        s = next;
    }
    let residual = g(s)?.exp_m1().abs();
    if residual > ROOT_TOL {
        return Err(Error::RootFinding(format!(
            "residual {residual:e} above tolerance for target {target}"
        )));
    }
    Ok(s)
}

/// Root of `exp(theta1) E[exp(-gamma T_e)] = 1`.
pub fn solve_gamma(dist_e: &DistributionSpec, theta1: f64) -> Result<f64> {
    solve_log_laplace(dist_e, -theta1)
}

/// Root of `exp(theta_{k+1} 1{k<5} - theta_k) E[exp(-zeta T_{s,k})] = 1` for class index `k` (0-based).
pub fn solve_zeta(dist_s_k: &DistributionSpec, theta: &[f64; 5], k: usize) -> Result<f64> {
    solve_log_laplace(dist_s_k, -zeta_bar(theta)[k])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TaylorParts {
    pub gamma_bar: f64,
    pub gamma_tilde: f64,
    pub gamma_star: f64,
    pub zeta_bar: [f64; 5],
    pub zeta_tilde: [f64; 5],
    pub zeta_star: [f64; 5],
}

/// Second-order Taylor parts of `gamma_1` and `zeta_k` for the given SCVs.
pub fn taylor_star(scv_e: f64, scv_s: &[f64; 5], theta: &[f64; 5]) -> TaylorParts {
    let gamma_bar = theta[0];
    let gamma_tilde = 0.5 * scv_e * theta[0] * theta[0];
    let zb = zeta_bar(theta);
    let zt: [f64; 5] = std::array::from_fn(|k| 0.5 * scv_s[k] * zb[k] * zb[k]);
    TaylorParts {
        gamma_bar,
        gamma_tilde,
        gamma_star: gamma_bar + gamma_tilde,
        zeta_bar: zb,
        zeta_tilde: zt,
        zeta_star: std::array::from_fn(|k| zb[k] + zt[k]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransformValues {
    pub gamma1: f64,
    pub zeta: [f64; 5],
    pub taylor: TaylorParts,
}

impl TransformValues {
    pub fn new(base: &BaseParams, theta: &[f64; 5]) -> Result<Self> {
        let gamma1 = solve_gamma(&base.dist_e, theta[0])?;
        let mut zeta = [0.0; 5];
        for (k, z) in zeta.iter_mut().enumerate() {
            *z = solve_zeta(&base.dist_s[k], theta, k)?;
        }
        Ok(TransformValues { gamma1, zeta, taylor: taylor_star(base.scv_e(), &base.scv_s(), theta) })
    }
}

/// Least-squares slope of `ln |remainder|` against `ln |theta|`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|p| p.0.abs().ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.abs().ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Outcome of the third-order remainder check for one distribution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RemainderFit {
    pub family: String,
    /// `(|theta|, |exact - star|)` pairs.
    pub points: Vec<(f64, f64)>,
    /// `None` when the remainder vanishes identically (at rounding level).
    pub slope: Option<f64>,
}

/// Remainder points below this are treated as rounding noise.
pub const REMAINDER_FLOOR: f64 = 1e-15;

/// Fits the decay of `|gamma_1 - gamma_1^*|` over `theta_1 = -0.2 * 2^-i`.
pub fn taylor_remainder_fit(dist: &DistributionSpec, levels: usize) -> Result<RemainderFit> {
    let mut points = Vec::with_capacity(levels);
    for i in 0..levels {
        let theta1 = -0.2 * 0.5f64.powi(i as i32);
        let exact = solve_gamma(dist, theta1)?;
        let star = theta1 + 0.5 * dist.scv() * theta1 * theta1;
        points.push((theta1.abs(), (exact - star).abs()));
    }
    let slope = if points.iter().all(|p| p.1 <= REMAINDER_FLOOR) {
        None
    } else {
        Some(loglog_slope(&points))
    };
    Ok(RemainderFit { family: dist.name(), points, slope })
}

/// Station-1 direction `a` with `a_1 = 1`, `a_4 = 0` solving the three
/// cancellation equations
/// `mu3 zb3 - mu1 zb1 = mu5 zb5 - mu3 zb3 = mu2 zb2 - mu4 zb4 = 0`.
pub fn direction_station1(base: &BaseParams) -> Result<[f64; 5]> {
    let d = base.denominator();
    if !(d > 0.0) {
        return Err(Error::OutsideRegime(d));
    }
    let mu = base.m.map(|x| 1.0 / x);
    // unknowns (a2, a3, a5); with a1 = 1, a4 = 0:
    // zb1 = a2 - 1, zb2 = a3 - a2, zb3 = -a3, zb4 = a5, zb5 = -a5
    let system = Matrix3::new(
        -mu[0], -mu[2], 0.0, //
        0.0, mu[2], -mu[4], //
        -mu[1], mu[1], -mu[3],
    );
    let rhs = Vector3::new(-mu[0], 0.0, 0.0);
    let det = system.determinant();
    let scale = mu.iter().fold(0.0f64, |a, &b| a.max(b)).powi(3);
    if det.abs() <= 1e-12 * scale {
        return Err(Error::Singular(det));
    }
    let sol = system.lu().solve(&rhs).ok_or(Error::Singular(det))?;
    Ok([1.0, sol[0], sol[1], 0.0, sol[2]])
}

/// Station-2 direction `b = (1/m4, 1/m4, 1, 1, 0)`.
pub fn direction_station2(base: &BaseParams) -> Result<[f64; 5]> {
    let [_, m2, _, m4, _] = base.m;
    if (m2 + m4 - 1.0).abs() > crate::model::NORMALIZATION_TOL {
        return Err(Error::Normalization(format!("m2 + m4 = {}, expected 1", m2 + m4)));
    }
    Ok([1.0 / m4, 1.0 / m4, 1.0, 1.0, 0.0])
}

/// The three cancellation residuals for rates `mu`.
pub fn cancellation_residuals(mu: &[f64; 5], theta: &[f64; 5]) -> [f64; 3] {
    let zb = zeta_bar(theta);
    [
        mu[2] * zb[2] - mu[0] * zb[0],
        mu[4] * zb[4] - mu[2] * zb[2],
        mu[1] * zb[1] - mu[3] * zb[3],
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum ThetaProvenance {
    Step1 { eta1: f64, eta4: f64, r: f64 },
    Step3 { eta4: f64, r: f64 },
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThetaVector {
    pub theta: [f64; 5],
    pub provenance: ThetaProvenance,
}

impl ThetaVector {
    pub fn raw(theta: [f64; 5]) -> Result<Self> {
        check_nonpositive(&theta)?;
        Ok(ThetaVector { theta, provenance: ThetaProvenance::Raw })
    }

    pub fn l1_norm(&self) -> f64 {
        self.theta.iter().map(|t| t.abs()).sum()
    }
}

fn check_nonpositive(theta: &[f64; 5]) -> Result<()> {
    match theta.iter().position(|&t| t > 0.0) {
        Some(index) => Err(Error::PositiveTheta { index, value: theta[index] }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Step {
    One,
    Three,
}

/// Step 1: `theta = r eta1 a + r^2 eta4 b`; step 3: `theta = r^2 eta4 b`.
pub fn build_theta(step: Step, eta1: f64, eta4: f64, r: f64, base: &BaseParams) -> Result<ThetaVector> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::IndexOutOfRange(r));
    }
    if eta1 > 0.0 || eta4 > 0.0 {
        return Err(Error::InvalidParameter {
            field: "eta",
            reason: format!("eta must be nonpositive, got ({eta1}, {eta4})"),
        });
    }
    let b = direction_station2(base)?;
    let (theta, provenance) = match step {
        Step::One => {
            let a = direction_station1(base)?;
            (
                std::array::from_fn(|k| r * eta1 * a[k] + r * r * eta4 * b[k]),
                ThetaProvenance::Step1 { eta1, eta4, r },
            )
        }
        Step::Three => (b.map(|bk| r * r * eta4 * bk), ThetaProvenance::Step3 { eta4, r }),
    };
    let theta = theta.map(|t: f64| if t == 0.0 { 0.0 } else { t });
    check_nonpositive(&theta)?;
    Ok(ThetaVector { theta, provenance })
}

/// The BAR inputs taken from an MGF estimate: residual-augmented values when
/// present, otherwise the plain queue-length MGFs.
fn bar_inputs(mgf: &MgfEstimate) -> (Estimate, [Option<Estimate>; 5]) {
    match mgf.psi {
        Some(psi) => (psi, mgf.psi_k),
        None => (mgf.phi, mgf.phi_k),
    }
}

/// Coefficients multiplying `psi - psi_k` in the asymptotic BAR.
fn boundary_coefficients(inst: &NetworkInstance, zb: &[f64; 5]) -> [f64; 5] {
    let mu = inst.mu_r;
    let beta = inst.beta;
    [
        beta[0] * mu[0] * zb[0],
        beta[1] * (mu[1] * zb[1] - mu[3] * zb[3]),
        beta[2] * (mu[2] * zb[2] - mu[0] * zb[0]),
        beta[3] * mu[3] * zb[3],
        beta[4] * (mu[4] * zb[4] - mu[2] * zb[2]),
    ]
}

fn assemble(
    inst: &NetworkInstance,
    interior: f64,
    coefficients: [f64; 5],
    mgf: &MgfEstimate,
    scale: f64,
) -> Result<f64> {
    let (psi, psi_k) = bar_inputs(mgf);
    let mut total = interior * psi.value;
    let mut missing = Vec::new();
    for k in 0..5 {
        let c = coefficients[k];
        if c.abs() <= 1e-13 * scale {
            continue;
        }
        match psi_k[k] {
            Some(cond) => total += c * (psi.value - cond.value),
            None => missing.push(format!("psi_{}", k + 1)),
        }
    }
    let _ = inst;
    if missing.is_empty() {
        Ok(total)
    } else {
        Err(Error::MissingConditional(missing.join(", ")))
    }
}

/// Left-hand side of the asymptotic BAR
///
/// ```text
/// a1 (gt1 + sum zt_k) psi + b1 mu1 zb1 (psi - psi1) + b4 mu4 zb4 (psi - psi4)
///   + b2 (mu2 zb2 - mu4 zb4)(psi - psi2) + b3 (mu3 zb3 - mu1 zb1)(psi - psi3)
///   + b5 (mu5 zb5 - mu3 zb3)(psi - psi5)
/// ```
///
/// with scaled rates and excess capacities of `inst`.
pub fn asymptotic_bar_lhs(inst: &NetworkInstance, theta: &ThetaVector, mgf: &MgfEstimate) -> Result<f64> {
    let t = taylor_star(inst.base.scv_e(), &inst.base.scv_s(), &theta.theta);
    let interior = inst.base.alpha1 * (t.gamma_tilde + t.zeta_tilde.iter().sum::<f64>());
    let coefficients = boundary_coefficients(inst, &t.zeta_bar);
    let scale = inst.mu_r.iter().cloned().fold(0.0, f64::max) * theta.l1_norm();
    assemble(inst, interior, coefficients, mgf, scale)
}

/// The exact BAR for exponential test functions,
/// `a1 (gamma1 + sum zeta_k) phi + sum_k c_k(zeta) (phi - phi_k)`, which
/// vanishes for the stationary law of the exponential network.
pub fn exact_bar_lhs(
    inst: &NetworkInstance,
    theta: &[f64; 5],
    mgf: &MgfEstimate,
    occupation: &[f64; 5],
) -> Result<f64> {
    let gamma1 = theta[0].exp_m1();
    let zeta: [f64; 5] = zeta_bar(theta).map(f64::exp_m1);
    let interior = inst.base.alpha1 * (gamma1 + zeta.iter().sum::<f64>());
    let with_beta = NetworkInstance { beta: *occupation, ..inst.clone() };
    let coefficients = boundary_coefficients(&with_beta, &zeta);
    let plain = MgfEstimate { psi: None, psi_k: [None; 5], ..mgf.clone() };
    assemble(inst, interior, coefficients, &plain, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::scale as scale_base;
    use proptest::prelude::*;

    const FAMILIES: [DistributionSpec; 6] = [
        DistributionSpec::Exponential,
        DistributionSpec::Erlang { k: 2 },
        DistributionSpec::Erlang { k: 5 },
        DistributionSpec::HyperExp2 { scv: 3.0 },
        DistributionSpec::Deterministic,
        DistributionSpec::Uniform,
    ];

    /// Plain bisection on `E[exp(-s T)] = exp(target)`, independent of the Newton path.
    fn bisection_oracle(dist: &DistributionSpec, target: f64) -> f64 {
        let bound = dist.laplace_lower_bound().max(-50.0);
        let (mut lo, mut hi) = (bound + 1e-12, 50.0);
        for _ in 0..400 {
            let mid = 0.5 * (lo + hi);
            if dist.laplace(mid).unwrap() > target.exp() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn gamma_examples() {
        let e = DistributionSpec::Exponential;
        let g = solve_gamma(&e, -0.1).unwrap();
        assert!((g - ((-0.1f64).exp() - 1.0)).abs() < 1e-15);
        assert!((g + 0.0951626).abs() < 1e-7);
        assert!((g - bisection_oracle(&e, 0.1)).abs() < 1e-12);
        assert_eq!(solve_gamma(&e, 0.0).unwrap(), 0.0);
        let d = solve_gamma(&DistributionSpec::Deterministic, -0.1).unwrap();
        assert!((d + 0.1).abs() < 1e-15);
    }

    #[test]
    fn zeta_examples() {
        let e = DistributionSpec::Exponential;
        assert_eq!(solve_zeta(&e, &[0.0; 5], 2).unwrap(), 0.0);
        let theta = [0.0, 0.0, 0.0, 0.0, -0.2];
        let z5 = solve_zeta(&e, &theta, 4).unwrap();
        assert!((z5 - (0.2f64.exp() - 1.0)).abs() < 1e-14);
        assert!((z5 - 0.221403).abs() < 1e-6);
        assert!((z5 - bisection_oracle(&e, -0.2)).abs() < 1e-12);
        let zd = solve_zeta(&DistributionSpec::Deterministic, &theta, 4).unwrap();
        assert!((zd - 0.2).abs() < 1e-15);
    }

    #[test]
    fn roots_match_bisection_for_all_families() {
        for dist in FAMILIES {
            for target in [-1.5, -0.3, -1e-3, 2e-4, 0.05, 0.8] {
                let root = solve_log_laplace(&dist, target).unwrap();
                let oracle = bisection_oracle(&dist, target);
                assert!((root - oracle).abs() < 1e-10, "{} target {target}", dist.name());
                let residual = ((-target).exp() * dist.laplace(root).unwrap() - 1.0).abs();
                assert!(residual <= 1e-12, "{}: {residual:e}", dist.name());
            }
        }
    }

    #[test]
    fn taylor_parts() {
        let zero = taylor_star(1.0, &[1.0; 5], &[0.0; 5]);
        assert_eq!(zero.gamma_star, 0.0);
        assert!(zero.zeta_star.iter().all(|&z| z == 0.0));
        let t = taylor_star(1.0, &[1.0; 5], &[-0.1, 0.0, 0.0, 0.0, 0.0]);
        assert!((t.gamma_star + 0.095).abs() < 1e-15);
        for k in 0..5 {
            assert_eq!(t.zeta_star[k], t.zeta_bar[k] + t.zeta_tilde[k]);
        }
    }

    #[test]
    fn taylor_remainder_is_third_order() {
        for dist in FAMILIES {
            let fit = taylor_remainder_fit(&dist, 8).unwrap();
            match fit.slope {
                Some(slope) => assert!(slope >= 2.7, "{}: slope {slope}", dist.name()),
                None => assert_eq!(dist, DistributionSpec::Deterministic),
            }
        }
    }

    #[test]
    fn symmetric_direction_station1() {
        let base = BaseParams::symmetric_exponential();
        let a = direction_station1(&base).unwrap();
        let expected = [1.0, 0.0, 1.0, 0.0, 1.0];
        for k in 0..5 {
            assert!((a[k] - expected[k]).abs() < 1e-12, "{a:?}");
        }
        let mu = base.m.map(|x| 1.0 / x);
        assert!(cancellation_residuals(&mu, &a).iter().all(|r| r.abs() <= 1e-12));
    }

    #[test]
    fn singular_direction_is_rejected() {
        let base = BaseParams {
            m: [1e-300, 0.25, 0.5, 0.75, 1.5],
            heavy_traffic: false,
            ..BaseParams::symmetric_exponential()
        };
        assert!(direction_station1(&base).is_err());
    }

    #[test]
    fn station2_direction() {
        let base = BaseParams::symmetric_exponential();
        let b = direction_station2(&base).unwrap();
        assert_eq!(b, [2.0, 2.0, 1.0, 1.0, 0.0]);
        let zb = zeta_bar(&b);
        assert_eq!((zb[0], zb[2], zb[4]), (0.0, 0.0, 0.0));
        let [_, m2, _, m4, _] = base.m;
        assert!(((1.0 / m2) * zb[1] - (1.0 / m4) * zb[3]).abs() < 1e-12);
        assert!(((1.0 / m2) * (1.0 - 1.0 / m4) + 1.0 / m4).abs() < 1e-12);
    }

    #[test]
    fn theta_constructions() {
        let base = BaseParams::symmetric_exponential();
        let t3 = build_theta(Step::Three, 0.0, -1.0, 0.1, &base).unwrap();
        let expected = [-0.02, -0.02, -0.01, -0.01, 0.0];
        for k in 0..5 {
            assert!((t3.theta[k] - expected[k]).abs() < 1e-15);
        }
        let t1 = build_theta(Step::One, -1.0, 0.0, 0.1, &base).unwrap();
        let expected = [-0.1, 0.0, -0.1, 0.0, -0.1];
        for k in 0..5 {
            assert!((t1.theta[k] - expected[k]).abs() < 1e-13);
        }
        let zero = build_theta(Step::One, 0.0, 0.0, 0.3, &base).unwrap();
        assert_eq!(zero.theta, [0.0; 5]);
        assert!(build_theta(Step::One, 1.0, 0.0, 0.3, &base).is_err());
    }

    fn exact_mgf_stub(theta: [f64; 5], value: f64) -> MgfEstimate {
        let est = Estimate::exact(value);
        MgfEstimate {
            theta,
            phi: est,
            phi_k: [Some(est); 5],
            psi: None,
            psi_k: [None; 5],
            occupation: [1.0; 5],
        }
    }

    #[test]
    fn asymptotic_bar_vanishes_at_zero_theta() {
        let inst = scale_base(&BaseParams::symmetric_exponential(), 0.3).unwrap();
        let theta = ThetaVector::raw([0.0; 5]).unwrap();
        let lhs = asymptotic_bar_lhs(&inst, &theta, &exact_mgf_stub([0.0; 5], 1.0)).unwrap();
        assert_eq!(lhs, 0.0);
    }

    #[test]
    fn asymptotic_bar_reports_missing_conditionals() {
        let inst = scale_base(&BaseParams::symmetric_exponential(), 0.3).unwrap();
        let theta = build_theta(Step::Three, 0.0, -1.0, 0.3, &inst.base).unwrap();
        let mut mgf = exact_mgf_stub(theta.theta, 0.9);
        mgf.phi_k[3] = None;
        match asymptotic_bar_lhs(&inst, &theta, &mgf) {
            Err(Error::MissingConditional(s)) => assert!(s.contains("psi_4")),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn valid_base() -> impl Strategy<Value = BaseParams> {
        (0.05f64..0.9, 0.05f64..0.9, 0.05f64..0.9, 0.05f64..0.45).prop_filter_map(
            "valid heavy-traffic base with positive denominator",
            |(x1, x3, m2, frac5)| {
                let m5 = frac5 * (1.0 - m2);
                let rest = 1.0 - m5;
                let m1 = rest * x1 / (x1 + x3);
                let base = BaseParams {
                    m: [m1, m2, rest - m1, 1.0 - m2, m5],
                    ..BaseParams::symmetric_exponential()
                };
                (base.validate().is_ok() && base.denominator() > 1e-3).then_some(base)
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn direction_station1_cancels(base in valid_base()) {
            let a = direction_station1(&base).unwrap();
            let mu = base.m.map(|x| 1.0 / x);
            for res in cancellation_residuals(&mu, &a) {
                prop_assert!(res.abs() <= 1e-12 * mu.iter().cloned().fold(1.0, f64::max));
            }
            // closed form from symbolic elimination
            let [m1, m2, m3, m4, m5] = base.m;
            let d = base.denominator();
            prop_assert!((zeta_bar(&a)[0] + m1 / d).abs() < 1e-12);
            prop_assert!((a[1] - (m3 - m5 * m2 / m4) / d).abs() < 1e-12);
            prop_assert!((a[2] - m3 / d).abs() < 1e-12);
            prop_assert!((a[4] - m5 / d).abs() < 1e-12);
        }

        #[test]
        fn cancellations_hold_with_scaled_rates(base in valid_base(), r in 0.01f64..0.9) {
            let inst = scale_base(&base, r).unwrap();
            let a = direction_station1(&base).unwrap();
            let b = direction_station2(&base).unwrap();
            for res in cancellation_residuals(&inst.mu_r, &a) {
                prop_assert!(res.abs() <= 1e-10);
            }
            prop_assert!(cancellation_residuals(&inst.mu_r, &b)[2].abs() <= 1e-10);
        }

        #[test]
        fn step1_theta_norm_bound(base in valid_base(), eta1 in -3.0f64..0.0, r in 0.01f64..0.9) {
            prop_assume!(base.m[2] - base.m[4] * base.m[1] / base.m[3] >= 0.0);
            let a = direction_station1(&base).unwrap();
            let t = build_theta(Step::One, eta1, 0.0, r, &base).unwrap();
            prop_assert!(t.l1_norm() <= a.iter().sum::<f64>() * r * eta1.abs() + 1e-12);
            prop_assert!(t.theta.iter().all(|&x| x <= 0.0));
        }

        #[test]
        fn exponential_closed_forms(t in proptest::array::uniform5(-1.0f64..0.0)) {
            let e = DistributionSpec::Exponential;
            let g = solve_gamma(&e, t[0]).unwrap();
            prop_assert!((g - t[0].exp_m1()).abs() <= 1e-10);
            let zb = zeta_bar(&t);
            for k in 0..5 {
                let z = solve_zeta(&e, &t, k).unwrap();
                prop_assert!((z - zb[k].exp_m1()).abs() <= 1e-10);
            }
        }
    }
}
