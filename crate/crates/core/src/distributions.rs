//! Unit-mean positive distribution families.
//!
//! Every family is normalized to mean 1; a class-k service time is drawn as
//! `m_k * T` and an interarrival time as `T / alpha1`. Besides sampling, each
//! family exposes its squared coefficient of variation, raw moments up to
//! order four, and the Laplace transform `E[exp(-s T)]` (with its logarithm
//! and log-derivative, which the transform root finders work on).

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A unit-mean distribution family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum DistributionSpec {
    Exponential,
    /// Sum of `k` exponentials with rate `k`.
    Erlang { k: u32 },
    /// Two-phase hyperexponential with balanced means, parameterized by its SCV (> 1).
    #[serde(rename = "hyperexp2")]
    HyperExp2 { scv: f64 },
    Deterministic,
    /// Uniform on `[0, 2]`.
    Uniform,
}

impl Default for DistributionSpec {
    fn default() -> Self {
        DistributionSpec::Exponential
    }
}

impl DistributionSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DistributionSpec::Erlang { k } if k == 0 => Err(Error::InvalidParameter {
                field: "erlang.k",
                reason: "must be at least 1".into(),
            }),
            DistributionSpec::HyperExp2 { scv } if !(scv > 1.0 && scv.is_finite()) => {
                Err(Error::InvalidParameter {
                    field: "hyperexp2.scv",
                    reason: format!("must be a finite value > 1, got {scv}"),
                })
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        match *self {
            DistributionSpec::Exponential => "exponential".into(),
            DistributionSpec::Erlang { k } => format!("erlang({k})"),
            DistributionSpec::HyperExp2 { scv } => format!("hyperexp2(scv={scv})"),
            DistributionSpec::Deterministic => "deterministic".into(),
            DistributionSpec::Uniform => "uniform(0,2)".into(),
        }
    }

    pub fn is_exponential(&self) -> bool {
        matches!(self, DistributionSpec::Exponential | DistributionSpec::Erlang { k: 1 })
    }

    /// Branch probability `p` and rates `(l1, l2)` of the balanced-means hyperexponential.
    pub fn hyperexp_params(scv: f64) -> (f64, f64, f64) {
        let p = 0.5 * (1.0 + ((scv - 1.0) / (scv + 1.0)).sqrt());
        (p, 2.0 * p, 2.0 * (1.0 - p))
    }

    /// Squared coefficient of variation (equal to the variance, since the mean is 1).
    pub fn scv(&self) -> f64 {
        match *self {
            DistributionSpec::Exponential => 1.0,
            DistributionSpec::Erlang { k } => 1.0 / k as f64,
            DistributionSpec::HyperExp2 { scv } => scv,
            DistributionSpec::Deterministic => 0.0,
            DistributionSpec::Uniform => 1.0 / 3.0,
        }
    }

    pub fn raw_moment(&self, order: u32) -> Result<f64> {
        if !(1..=4).contains(&order) {
            return Err(Error::MomentOrder(order));
        }
        let n = order as i32;
        let factorial = (1..=order).product::<u32>() as f64;
        Ok(match *self {
            DistributionSpec::Exponential => factorial,
            DistributionSpec::Erlang { k } => {
                let k = k as f64;
                (0..order).map(|i| (k + i as f64) / k).product()
            }
            DistributionSpec::HyperExp2 { scv } => {
                let (p, l1, l2) = Self::hyperexp_params(scv);
                factorial * (p / l1.powi(n) + (1.0 - p) / l2.powi(n))
            }
            DistributionSpec::Deterministic => 1.0,
            DistributionSpec::Uniform => 2f64.powi(n) / (n as f64 + 1.0),
        })
    }

    /// Infimum of the Laplace transform's domain; `-inf` for bounded support.
    pub fn laplace_lower_bound(&self) -> f64 {
        match *self {
            DistributionSpec::Exponential => -1.0,
            DistributionSpec::Erlang { k } => -(k as f64),
            DistributionSpec::HyperExp2 { scv } => {
                let (_, l1, l2) = Self::hyperexp_params(scv);
                -l1.min(l2)
            }
            DistributionSpec::Deterministic | DistributionSpec::Uniform => f64::NEG_INFINITY,
        }
    }

    fn check_domain(&self, s: f64) -> Result<()> {
        let lower = self.laplace_lower_bound();
        if s > lower && !s.is_nan() {
            Ok(())
        } else {
            Err(Error::TransformDomain { arg: s, lower })
        }
    }

    /// `E[exp(-s T)]`.
    pub fn laplace(&self, s: f64) -> Result<f64> {
        Ok(self.log_laplace(s)?.exp())
    }

    /// `ln E[exp(-s T)]`, evaluated without cancellation near `s = 0`.
    pub fn log_laplace(&self, s: f64) -> Result<f64> {
        self.check_domain(s)?;
        Ok(match *self {
            DistributionSpec::Exponential => -s.ln_1p(),
            DistributionSpec::Erlang { k } => {
                let k = k as f64;
                -k * (s / k).ln_1p()
            }
            DistributionSpec::HyperExp2 { scv } => {
                let (p, l1, l2) = Self::hyperexp_params(scv);
                // L(s) - 1 = -p s/(l1+s) - (1-p) s/(l2+s)
                (-p * s / (l1 + s) - (1.0 - p) * s / (l2 + s)).ln_1p()
            }
            DistributionSpec::Deterministic => -s,
            DistributionSpec::Uniform => ln_sinhc(s) - s,
        })
    }

    /// `d/ds ln E[exp(-s T)]`; equals `-1` at `s = 0`.
    pub fn dlog_laplace(&self, s: f64) -> Result<f64> {
        self.check_domain(s)?;
        Ok(match *self {
            DistributionSpec::Exponential => -1.0 / (1.0 + s),
            DistributionSpec::Erlang { k } => -1.0 / (1.0 + s / k as f64),
            DistributionSpec::HyperExp2 { scv } => {
                let (p, l1, l2) = Self::hyperexp_params(scv);
                let value = p * l1 / (l1 + s) + (1.0 - p) * l2 / (l2 + s);
                let slope = -p * l1 / (l1 + s).powi(2) - (1.0 - p) * l2 / (l2 + s).powi(2);
                slope / value
            }
            DistributionSpec::Deterministic => -1.0,
            DistributionSpec::Uniform => coth_minus_inv(s) - 1.0,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            DistributionSpec::Exponential => rng.sample::<f64, _>(Exp1),
            DistributionSpec::Erlang { k } => {
                let total: f64 = (0..k).map(|_| rng.sample::<f64, _>(Exp1)).sum();
                total / k as f64
            }
            DistributionSpec::HyperExp2 { scv } => {
                let (p, l1, l2) = Self::hyperexp_params(scv);
                let rate = if rng.random::<f64>() < p { l1 } else { l2 };
                rng.sample::<f64, _>(Exp1) / rate
            }
            DistributionSpec::Deterministic => 1.0,
            DistributionSpec::Uniform => 2.0 * rng.random::<f64>(),
        }
    }
}

/// `ln(sinh(s) / s)`, even in `s`.
fn ln_sinhc(s: f64) -> f64 {
    let a = s.abs();
    if a < 1e-2 {
        let s2 = a * a;
        s2 / 6.0 - s2 * s2 / 180.0 + s2 * s2 * s2 / 2835.0
    } else if a < 20.0 {
        (a.sinh() / a).ln()
    } else {
        // sinh(a) ~ exp(a)/2 with relative error exp(-2a)
        a - std::f64::consts::LN_2 - a.ln() + (-(-2.0 * a).exp()).ln_1p()
    }
}

/// `coth(s) - 1/s`, odd in `s`.
fn coth_minus_inv(s: f64) -> f64 {
    if s.abs() < 1e-2 {
        let s2 = s * s;
        s / 3.0 - s * s2 / 45.0 + 2.0 * s * s2 * s2 / 945.0
    } else {
        1.0 / s.tanh() - 1.0 / s
    }
}

/// Stream labels for the six primitive sequences.
pub const ARRIVAL_STREAM: u64 = 0;
pub const fn service_stream(class: usize) -> u64 {
    1 + class as u64
}
pub const AUXILIARY_STREAM: u64 = 16;

/// One independent random stream per primitive sequence: the arrival stream
/// and the five service streams, all derived from one seed by fixed labels.
#[derive(Debug, Clone)]
pub struct Streams {
    pub arrival: ChaCha8Rng,
    pub service: [ChaCha8Rng; 5],
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Streams {
            arrival: labelled_stream(seed, ARRIVAL_STREAM),
            service: std::array::from_fn(|k| labelled_stream(seed, service_stream(k))),
        }
    }
}

pub fn labelled_stream(seed: u64, label: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label);
    rng
}

/// Mixes a master seed with a sequence of labels into a child seed.
pub fn derive_seed(master: u64, labels: &[u64]) -> u64 {
    labels.iter().fold(splitmix(master), |acc, &l| splitmix(acc ^ splitmix(l.wrapping_add(0x632b_e59b_d9b4_e019))))
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FAMILIES: [DistributionSpec; 6] = [
        DistributionSpec::Exponential,
        DistributionSpec::Erlang { k: 2 },
        DistributionSpec::Erlang { k: 4 },
        DistributionSpec::HyperExp2 { scv: 4.0 },
        DistributionSpec::Deterministic,
        DistributionSpec::Uniform,
    ];

    /// Composite Simpson quadrature of `g` against the density of `spec` on [0, upper].
    fn quadrature(spec: DistributionSpec, g: impl Fn(f64) -> f64) -> f64 {
        let density = |t: f64| -> f64 {
            match spec {
                DistributionSpec::Exponential => (-t).exp(),
                DistributionSpec::Erlang { k } => {
                    let k = k as f64;
                    k.powf(k) * t.powf(k - 1.0) * (-k * t).exp() / statrs::function::gamma::gamma(k)
                }
                DistributionSpec::HyperExp2 { scv } => {
                    let (p, l1, l2) = DistributionSpec::hyperexp_params(scv);
                    p * l1 * (-l1 * t).exp() + (1.0 - p) * l2 * (-l2 * t).exp()
                }
                DistributionSpec::Uniform => {
                    if t <= 2.0 {
                        0.5
                    } else {
                        0.0
                    }
                }
                DistributionSpec::Deterministic => unreachable!(),
            }
        };
        let upper = match spec {
            DistributionSpec::Uniform => 2.0,
            _ => 80.0 / -spec.laplace_lower_bound().max(-1.0),
        };
        let n = 400_000;
        let h = upper / n as f64;
        let mut acc = density(0.0) * g(0.0) + density(upper) * g(upper);
        for i in 1..n {
            let t = i as f64 * h;
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * density(t) * g(t);
        }
        acc * h / 3.0
    }

    #[test]
    fn mean_is_one_and_scv_matches_second_moment() {
        for spec in FAMILIES {
            assert_eq!(spec.raw_moment(1).unwrap(), 1.0, "{}", spec.name());
            let m2 = spec.raw_moment(2).unwrap();
            assert!((spec.scv() - (m2 - 1.0)).abs() < 1e-12, "{}", spec.name());
            assert!(spec.raw_moment(4).unwrap().is_finite());
        }
    }

    #[test]
    fn closed_form_scvs() {
        assert_eq!(DistributionSpec::Exponential.scv(), 1.0);
        assert_eq!(DistributionSpec::Erlang { k: 2 }.scv(), 0.5);
        assert_eq!(DistributionSpec::Deterministic.scv(), 0.0);
        assert!((DistributionSpec::Uniform.scv() - 1.0 / 3.0).abs() < 1e-15);
        let h = DistributionSpec::HyperExp2 { scv: 4.0 };
        assert!((h.raw_moment(2).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn raw_moments_against_quadrature() {
        assert_eq!(DistributionSpec::Exponential.raw_moment(2).unwrap(), 2.0);
        assert!((DistributionSpec::Uniform.raw_moment(2).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(DistributionSpec::Deterministic.raw_moment(3).unwrap(), 1.0);
        for spec in FAMILIES.into_iter().filter(|s| *s != DistributionSpec::Deterministic) {
            for order in 1..=4 {
                let exact = spec.raw_moment(order).unwrap();
                let numeric = quadrature(spec, |t| t.powi(order as i32));
                assert!(
                    (exact - numeric).abs() < 1e-6 * exact,
                    "{} order {order}: {exact} vs {numeric}",
                    spec.name()
                );
            }
        }
        assert_eq!(DistributionSpec::Exponential.raw_moment(5), Err(Error::MomentOrder(5)));
        assert_eq!(DistributionSpec::Exponential.raw_moment(0), Err(Error::MomentOrder(0)));
    }

    #[test]
    fn laplace_against_quadrature() {
        for spec in FAMILIES.into_iter().filter(|s| *s != DistributionSpec::Deterministic) {
            for s in [-0.3, -0.15, -0.01, 0.0, 0.05, 0.5, 2.0] {
                if s <= spec.laplace_lower_bound() + 0.05 {
                    continue;
                }
                let exact = spec.laplace(s).unwrap();
                let numeric = quadrature(spec, |t| (-s * t).exp());
                assert!((exact - numeric).abs() < 1e-8, "{} s={s}", spec.name());
            }
        }
        for s in [-1.0, 0.0, 0.7] {
            let d = DistributionSpec::Deterministic.laplace(s).unwrap();
            assert!((d - (-s as f64).exp()).abs() < 1e-15);
        }
        let e = DistributionSpec::Exponential.laplace(0.25).unwrap();
        assert!((e - 1.0 / 1.25).abs() < 1e-15);
    }

    #[test]
    fn laplace_domain() {
        assert!(matches!(
            DistributionSpec::Exponential.laplace(-1.0),
            Err(Error::TransformDomain { .. })
        ));
        assert!(DistributionSpec::Exponential.laplace(-0.999).is_ok());
        assert!(DistributionSpec::Uniform.laplace(-30.0).is_ok());
        for spec in FAMILIES {
            assert_eq!(spec.laplace(0.0).unwrap(), 1.0);
        }
    }

    #[test]
    fn laplace_derivative_at_zero_is_minus_mean() {
        let h = 1e-6;
        for spec in FAMILIES {
            let d = (spec.laplace(h).unwrap() - spec.laplace(-h).unwrap()) / (2.0 * h);
            assert!((d + 1.0).abs() < 1e-8, "{}: {d}", spec.name());
            assert_eq!(spec.dlog_laplace(0.0).unwrap(), -1.0);
        }
    }

    #[test]
    fn log_derivative_matches_finite_difference() {
        for spec in FAMILIES {
            for s in [-0.4, -0.15, -0.02, 0.003, 0.3, 3.0] {
                if s <= spec.laplace_lower_bound() + 0.05 {
                    continue;
                }
                let h = 1e-5;
                let fd = (spec.log_laplace(s + h).unwrap() - spec.log_laplace(s - h).unwrap()) / (2.0 * h);
                assert!((fd - spec.dlog_laplace(s).unwrap()).abs() < 1e-7, "{} s={s}", spec.name());
            }
        }
    }

    #[test]
    fn laplace_is_decreasing_and_convex() {
        for spec in FAMILIES {
            let lower = spec.laplace_lower_bound().max(-2.0) + 0.05;
            let grid: Vec<f64> = (0..200).map(|i| lower + i as f64 * 0.03).collect();
            let vals: Vec<f64> = grid.iter().map(|&s| spec.laplace(s).unwrap()).collect();
            for w in vals.windows(3) {
                assert!(w[1] <= w[0], "{} not decreasing", spec.name());
                assert!(w[0] + w[2] - 2.0 * w[1] >= -1e-12, "{} not convex", spec.name());
            }
        }
    }

    #[test]
    fn sampler_moments() {
        let n = 1_000_000;
        let mut rng = labelled_stream(7, 3);
        let stats = |spec: DistributionSpec, rng: &mut ChaCha8Rng| {
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for _ in 0..n {
                let x = spec.sample(rng);
                assert!(x >= 0.0);
                s1 += x;
                s2 += x * x;
            }
            let mean = s1 / n as f64;
            (mean, (s2 / n as f64 - mean * mean) / (mean * mean))
        };
        let (mean, scv) = stats(DistributionSpec::Exponential, &mut rng);
        assert!((mean - 1.0).abs() < 0.01 && (scv - 1.0).abs() < 0.05);
        let (_, scv) = stats(DistributionSpec::Erlang { k: 2 }, &mut rng);
        assert!((scv - 0.5).abs() < 0.05);
        let (mean, scv) = stats(DistributionSpec::HyperExp2 { scv: 4.0 }, &mut rng);
        assert!((mean - 1.0).abs() < 0.02 && (scv - 4.0).abs() < 0.2);
        let (mean, scv) = stats(DistributionSpec::Uniform, &mut rng);
        assert!((mean - 1.0).abs() < 0.01 && (scv - 1.0 / 3.0).abs() < 0.02);
        assert_eq!(DistributionSpec::Deterministic.sample(&mut rng), 1.0);
    }

    #[test]
    fn parameter_validation() {
        assert!(DistributionSpec::HyperExp2 { scv: 0.5 }.validate().is_err());
        assert!(DistributionSpec::Erlang { k: 0 }.validate().is_err());
        assert!(DistributionSpec::HyperExp2 { scv: 2.0 }.validate().is_ok());
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = Streams::new(11);
        let mut b = Streams::new(11);
        let xa: Vec<u64> = (0..4).map(|_| a.service[2].random()).collect();
        let xb: Vec<u64> = (0..4).map(|_| b.service[2].random()).collect();
        assert_eq!(xa, xb);
        let other: u64 = a.service[3].random();
        assert_ne!(other, xa[0]);
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
    }
}
