//! Network parameters, the multi-scale heavy-traffic scaling and the
//! closed-form limit constants.
//!
//! Classes are indexed `0..5` in code (class `k` of the route is index
//! `k - 1`). Station 1 hosts classes 1, 3, 5 with priority 5 > 3 > 1; station
//! 2 hosts classes 2, 4 with priority 2 > 4.

use serde::{Deserialize, Serialize};

use crate::distributions::DistributionSpec;
use crate::error::{Error, Result};

/// Tolerance for the heavy-traffic normalization `m1+m3+m5 = m2+m4 = 1`.
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// Station of each class.
pub const STATION: [usize; 5] = [0, 1, 0, 1, 0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseParams {
    pub alpha1: f64,
    /// Base mean service times `m_1..m_5`.
    pub m: [f64; 5],
    pub dist_e: DistributionSpec,
    pub dist_s: [DistributionSpec; 5],
    /// When set, the base means must satisfy the heavy-traffic normalization.
    pub heavy_traffic: bool,
}

impl BaseParams {
    pub fn new(
        alpha1: f64,
        m: [f64; 5],
        dist_e: DistributionSpec,
        dist_s: [DistributionSpec; 5],
        heavy_traffic: bool,
    ) -> Result<Self> {
        let base = BaseParams { alpha1, m, dist_e, dist_s, heavy_traffic };
        base.validate()?;
        Ok(base)
    }

    /// All-exponential instance with the given means, `alpha1 = 1`, heavy-traffic mode on.
    pub fn exponential(m: [f64; 5]) -> Result<Self> {
        Self::new(1.0, m, DistributionSpec::Exponential, [DistributionSpec::Exponential; 5], true)
    }

    /// `m = (1/3, 1/2, 1/3, 1/2, 1/3)`, all exponential.
    pub fn symmetric_exponential() -> Self {
        Self::exponential([1.0 / 3.0, 0.5, 1.0 / 3.0, 0.5, 1.0 / 3.0])
            .expect("symmetric instance is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 > 0.0 && self.alpha1.is_finite()) {
            return Err(Error::InvalidParameter {
                field: "alpha1",
                reason: format!("must be positive, got {}", self.alpha1),
            });
        }
        if let Some(k) = self.m.iter().position(|&mk| !(mk > 0.0 && mk.is_finite())) {
            return Err(Error::InvalidParameter {
                field: "m",
                reason: format!("m{} = {} must be positive", k + 1, self.m[k]),
            });
        }
        self.dist_e.validate()?;
        for d in &self.dist_s {
            d.validate()?;
        }
        if self.heavy_traffic {
            let [m1, m2, m3, m4, m5] = self.m;
            let s1 = m1 + m3 + m5;
            let s2 = m2 + m4;
            if (s1 - 1.0).abs() > NORMALIZATION_TOL {
                return Err(Error::Normalization(format!("m1 + m3 + m5 = {s1}, expected 1")));
            }
            if (s2 - 1.0).abs() > NORMALIZATION_TOL {
                return Err(Error::Normalization(format!("m2 + m4 = {s2}, expected 1")));
            }
            if m2 + m5 >= 1.0 {
                return Err(Error::Unstable { name: "rho_v", value: self.alpha1 * (m2 + m5) });
            }
        }
        Ok(())
    }

    /// `m1 + m3 - m5 * m2 / m4`.
    pub fn denominator(&self) -> f64 {
        let [m1, m2, m3, m4, m5] = self.m;
        m1 + m3 - m5 * m2 / m4
    }

    pub fn scv_e(&self) -> f64 {
        self.dist_e.scv()
    }

    pub fn scv_s(&self) -> [f64; 5] {
        self.dist_s.map(|d| d.scv())
    }

    pub fn all_exponential(&self) -> bool {
        self.dist_e.is_exponential() && self.dist_s.iter().all(|d| d.is_exponential())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetworkInstance {
    pub base: BaseParams,
    /// Heavy-traffic index; `0` denotes the unscaled network.
    pub r: f64,
    pub m_r: [f64; 5],
    pub mu_r: [f64; 5],
    pub rho1: f64,
    pub rho2: f64,
    pub rho_v: f64,
    /// Excess capacities `beta_1..beta_5`.
    pub beta: [f64; 5],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityReport {
    pub rho1: f64,
    pub rho2: f64,
    pub rho_v: f64,
    pub stable: bool,
}

impl StabilityReport {
    /// Name and value of the first intensity that is not below 1.
    pub fn violation(&self) -> Option<(&'static str, f64)> {
        [("rho1", self.rho1), ("rho2", self.rho2), ("rho_v", self.rho_v)]
            .into_iter()
            .find(|&(_, v)| !(v < 1.0))
    }
}

impl NetworkInstance {
    /// Derived quantities at index `r` without any admissibility checks.
    fn derive(base: BaseParams, r: f64) -> Self {
        let a = base.alpha1;
        let m = base.m;
        let m_r = [
            (1.0 - r) * m[0],
            (1.0 - r * r) * m[1],
            (1.0 - r) * m[2],
            (1.0 - r * r) * m[3],
            (1.0 - r) * m[4],
        ];
        let mu_r = m_r.map(|x| 1.0 / x);
        let rho1 = a * (m_r[0] + m_r[2] + m_r[4]);
        let rho2 = a * (m_r[1] + m_r[3]);
        let rho_v = a * (m_r[1] + m_r[4]);
        let beta = [
            1.0 - rho1,
            1.0 - a * m_r[1],
            1.0 - a * (m_r[2] + m_r[4]),
            1.0 - rho2,
            1.0 - a * m_r[4],
        ];
        NetworkInstance { base, r, m_r, mu_r, rho1, rho2, rho_v, beta }
    }

    /// The unscaled network (`r = 0`); no stability requirement.
    pub fn unscaled(base: BaseParams) -> Result<Self> {
        base.validate()?;
        Ok(Self::derive(base, 0.0))
    }

    pub fn check_stability(&self) -> StabilityReport {
        StabilityReport {
            rho1: self.rho1,
            rho2: self.rho2,
            rho_v: self.rho_v,
            stable: self.rho1 < 1.0 && self.rho2 < 1.0 && self.rho_v < 1.0,
        }
    }

    /// Station-1 busy fraction target `rho1`, station-2 `rho2`.
    pub fn utilization(&self) -> [f64; 2] {
        [self.rho1, self.rho2]
    }
}

/// Applies the multi-scale heavy-traffic scaling: station-1 means shrink by
/// `1 - r`, station-2 means by `1 - r^2`.
pub fn scale(base: &BaseParams, r: f64) -> Result<NetworkInstance> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::IndexOutOfRange(r));
    }
    base.validate()?;
    let inst = NetworkInstance::derive(base.clone(), r);
    if let Some((name, value)) = inst.check_stability().violation() {
        return Err(Error::Unstable { name, value });
    }
    Ok(inst)
}

/// Indicators of the five idle events, in class order:
/// `{z1=z3=z5=0}`, `{z2=0}`, `{z3=z5=0}`, `{z2=z4=0}`, `{z5=0}`.
/// Their stationary probabilities are `beta_1..beta_5`.
#[inline]
pub fn idle_events(z: &[u32; 5]) -> [bool; 5] {
    let e5 = z[4] == 0;
    let e3 = e5 && z[2] == 0;
    let e2 = z[1] == 0;
    [e3 && z[0] == 0, e2, e3, e2 && z[3] == 0, e5]
}

/// Classes in service at stations 1 and 2 under the priority order
/// `(5, 3, 1)` and `(2, 4)`.
#[inline]
pub fn served_classes(z: &[u32; 5]) -> (Option<usize>, Option<usize>) {
    let s1 = if z[4] > 0 {
        Some(4)
    } else if z[2] > 0 {
        Some(2)
    } else if z[0] > 0 {
        Some(0)
    } else {
        None
    };
    let s2 = if z[1] > 0 {
        Some(1)
    } else if z[3] > 0 {
        Some(3)
    } else {
        None
    };
    (s1, s2)
}

pub fn check_stability(inst: &NetworkInstance) -> StabilityReport {
    inst.check_stability()
}

/// Means of the exponential limits of `r Z_1` and `r^2 Z_4`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LimitLaw {
    pub d1: f64,
    pub d4: f64,
    /// `m1 + m3 - m5 * m2 / m4`.
    pub denominator: f64,
}

pub fn limit_constants(base: &BaseParams) -> Result<LimitLaw> {
    let d = base.denominator();
    if !(d > 0.0) {
        return Err(Error::OutsideRegime(d));
    }
    let [m1, m2, m3, m4, m5] = base.m;
    let ce = base.scv_e();
    let cs = base.scv_s();
    let a = base.alpha1;
    let ratio = m5 / m4;
    let d1 = a / (2.0 * d)
        * (d * d * ce
            + m1 * m1 * cs[0]
            + m3 * m3 * cs[2]
            + m5 * m5 * cs[4]
            + ratio * ratio * (m2 * m2 * cs[1] + m4 * m4 * cs[3]));
    let d4 = a / (2.0 * m4) * ((m2 + m4).powi(2) * ce + m2 * m2 * cs[1] + m4 * m4 * cs[3]);
    Ok(LimitLaw { d1, d4, denominator: d })
}

impl LimitLaw {
    /// Joint MGF of the product-form limit at `(eta1, eta4) <= 0`.
    pub fn mgf(&self, eta1: f64, eta4: f64) -> f64 {
        limit_mgf(self, eta1, eta4)
    }
}

pub fn limit_mgf(law: &LimitLaw, eta1: f64, eta4: f64) -> f64 {
    1.0 / ((1.0 - law.d1 * eta1) * (1.0 - law.d4 * eta4))
}
