//! Collision kernels `B(z, dv, dtheta) = sigma(|v - z|) dv Q(dtheta)`.
//!
//! `sigma(r) = c r^gamma` and `Q` is either the hard-sphere angular measure
//! `sin(theta/2) cos(theta/2) dtheta` or the non-cutoff power law
//! `theta^(-1-nu) dtheta`, restricted to `[epsilon, pi]`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Angular {
    HardSphere,
    PowerLaw { nu: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKernel", into = "RawKernel")]
pub struct KernelSpec {
    gamma: f64,
    c: f64,
    angular: Angular,
    epsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum AngularTag {
    HardSphere,
    PowerLaw,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawKernel {
    gamma: f64,
    c: f64,
    angular: AngularTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nu: Option<f64>,
    #[serde(default)]
    epsilon: f64,
}

impl TryFrom<RawKernel> for KernelSpec {
    type Error = Error;

    fn try_from(r: RawKernel) -> Result<Self> {
        let angular = match (r.angular, r.nu) {
            (AngularTag::HardSphere, None) => Angular::HardSphere,
            (AngularTag::HardSphere, Some(_)) => {
                return Err(Error::InvalidConfig("nu: only meaningful for power_law".into()))
            }
            (AngularTag::PowerLaw, Some(nu)) => Angular::PowerLaw { nu },
            (AngularTag::PowerLaw, None) => {
                return Err(Error::InvalidConfig("nu: required for power_law".into()))
            }
        };
        KernelSpec::new(r.gamma, r.c, angular, r.epsilon)
    }
}

impl From<KernelSpec> for RawKernel {
    fn from(k: KernelSpec) -> Self {
        let (angular, nu) = match k.angular {
            Angular::HardSphere => (AngularTag::HardSphere, None),
            Angular::PowerLaw { nu } => (AngularTag::PowerLaw, Some(nu)),
        };
        RawKernel { gamma: k.gamma, c: k.c, angular, nu, epsilon: k.epsilon }
    }
}

impl KernelSpec {
    /// Validated constructor.
    ///
    /// `epsilon = pi` is accepted and switches collisions off. A power law with
    /// `epsilon = 0` is representable (its theta moment is finite) but has no
    /// finite mass, so it cannot be sampled.
    pub fn new(gamma: f64, c: f64, angular: Angular, epsilon: f64) -> Result<Self> {
        if !(gamma > -1.0 && gamma <= 1.0) {
            return Err(Error::InvalidConfig(format!("gamma: {gamma} outside (-1, 1]")));
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidConfig(format!("c: {c} must be positive")));
        }
        if let Angular::PowerLaw { nu } = angular {
            if !(nu > 0.0 && nu < 1.0) {
                return Err(Error::InvalidConfig(format!("nu: {nu} outside (0, 1)")));
            }
        }
        if !(0.0..=PI).contains(&epsilon) {
            return Err(Error::InvalidConfig(format!("epsilon: {epsilon} outside [0, pi]")));
        }
        Ok(KernelSpec { gamma, c, angular, epsilon })
    }

    pub fn hard_sphere(c: f64, epsilon: f64) -> Result<Self> {
        KernelSpec::new(1.0, c, Angular::HardSphere, epsilon)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn angular(&self) -> Angular {
        self.angular
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        KernelSpec::new(self.gamma, self.c, self.angular, epsilon)
    }

    pub fn with_c(&self, c: f64) -> Result<Self> {
        KernelSpec::new(self.gamma, c, self.angular, self.epsilon)
    }

    /// True when the angular window `[epsilon, pi]` carries no mass.
    pub fn collisionless(&self) -> bool {
        self.epsilon >= PI
    }

    /// Density of `Q` with respect to `dtheta`.
    pub fn q_density(&self, theta: f64) -> f64 {
        match self.angular {
            Angular::HardSphere => 0.5 * theta.sin(),
            Angular::PowerLaw { nu } => theta.powf(-1.0 - nu),
        }
    }

    /// `sigma` without argument checks.
    #[inline]
    pub fn sigma_unchecked(&self, r: f64) -> f64 {
        if self.gamma == 0.0 {
            self.c
        } else if self.gamma == 1.0 {
            self.c * r
        } else if r == 0.0 {
            if self.gamma > 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.c * r.powf(self.gamma)
        }
    }
}

/// `sigma(r) = c r^gamma`. Returns `+inf` for `gamma < 0` at `r = 0`.
pub fn sigma(spec: &KernelSpec, r: f64) -> Result<f64> {
    if r.is_nan() || r < 0.0 {
        return Err(Error::invalid(format!("sigma: r = {r} must be nonnegative")));
    }
    Ok(spec.sigma_unchecked(r))
}

/// `Q([epsilon, pi])`.
pub fn angular_mass(spec: &KernelSpec) -> Result<f64> {
    let e = spec.epsilon;
    match spec.angular {
        Angular::HardSphere => Ok(if e >= PI { 0.0 } else { 0.5 * (1.0 + e.cos()) }),
        Angular::PowerLaw { nu } => {
            if e == 0.0 {
                return Err(Error::InfiniteMass { epsilon: e });
            }
            if e >= PI {
                return Ok(0.0);
            }
            Ok((e.powf(-nu) - PI.powf(-nu)) / nu)
        }
    }
}

/// Inverse CDF of `Q` restricted to `[epsilon, pi]` and normalized.
pub fn sample_theta(spec: &KernelSpec, u: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::invalid(format!("sample_theta: u = {u} outside [0, 1]")));
    }
    let e = spec.epsilon;
    if e >= PI {
        return Ok(PI);
    }
    let theta = match spec.angular {
        Angular::HardSphere => {
            // CDF(theta) proportional to sin^2(theta/2) - sin^2(eps/2)
            let s0 = (0.5 * e).sin().powi(2);
            let c0 = (0.5 * e).cos().powi(2);
            2.0 * (s0 + u * c0).sqrt().min(1.0).asin()
        }
        Angular::PowerLaw { nu } => {
            if e == 0.0 {
                return Err(Error::InfiniteMass { epsilon: e });
            }
            let a = e.powf(-nu);
            let b = PI.powf(-nu);
            if u == 0.0 {
                e
            } else if u == 1.0 {
                PI
            } else {
                (a - u * (a - b)).powf(-1.0 / nu)
            }
        }
    };
    Ok(theta.clamp(e, PI))
}

/// `int_{[epsilon, pi]} theta Q(dtheta)`, finite for every admissible spec.
pub fn theta_first_moment(spec: &KernelSpec) -> f64 {
    let e = spec.epsilon;
    if e >= PI {
        return 0.0;
    }
    match spec.angular {
        Angular::HardSphere => 0.5 * (PI + e * e.cos() - e.sin()),
        Angular::PowerLaw { nu } => (PI.powf(1.0 - nu) - e.powf(1.0 - nu)) / (1.0 - nu),
    }
}

/// `int_{[epsilon, pi]} g(theta) Q(dtheta)` by adaptive quadrature.
///
/// `g` should vanish at least linearly at 0 when the mass is infinite.
pub fn angular_integral<G: Fn(f64) -> f64>(spec: &KernelSpec, g: G, rel_tol: f64) -> Result<f64> {
    let e = spec.epsilon;
    if e >= PI {
        return Ok(0.0);
    }
    match spec.angular {
        Angular::HardSphere => {
            quadrature::integrate(|t| g(t) * 0.5 * t.sin(), e, PI, rel_tol, 1e-300)
        }
        Angular::PowerLaw { nu } => {
            // theta = s^(1/(1-nu)) removes the endpoint singularity of theta^(-nu)
            let p = 1.0 / (1.0 - nu);
            let (sa, sb) = (e.powf(1.0 - nu), PI.powf(1.0 - nu));
            quadrature::integrate(
                |s| {
                    if s <= 0.0 {
                        return 0.0;
                    }
                    let t = s.powf(p);
                    // dtheta = p s^(p-1) ds, theta^(-1-nu) = s^(-p(1+nu))
                    g(t) / t * p
                },
                sa,
                sb,
                rel_tol,
                1e-300,
            )
        }
    }
}

/// `int sin^2(theta/2) Q(dtheta)`; the energy-exchange rate constant.
pub fn sin2_half_moment(spec: &KernelSpec) -> Result<f64> {
    let e = spec.epsilon;
    match spec.angular {
        Angular::HardSphere => Ok(if e >= PI { 0.0 } else { 0.5 * (1.0 - (0.5 * e).sin().powi(4)) }),
        Angular::PowerLaw { .. } => angular_integral(spec, |t| (0.5 * t).sin().powi(2), 1e-12),
    }
}

/// Gauss rule for `Q` on `[epsilon, pi]`: nodes `theta_i` with weights summing
/// to the angular mass.
pub fn angular_rule(spec: &KernelSpec, n: usize) -> Result<Vec<(f64, f64)>> {
    let e = spec.epsilon;
    if e >= PI {
        return Ok(Vec::new());
    }
    match spec.angular {
        Angular::HardSphere => Ok(quadrature::gauss_legendre_on(n, e, PI)
            .into_iter()
            .map(|(t, w)| (t, w * 0.5 * t.sin()))
            .collect()),
        Angular::PowerLaw { nu } => {
            if e == 0.0 {
                return Err(Error::InfiniteMass { epsilon: e });
            }
            // u = theta^(-nu) makes Q uniform with density 1/nu
            Ok(quadrature::gauss_legendre_on(n, PI.powf(-nu), e.powf(-nu))
                .into_iter()
                .map(|(u, w)| (u.powf(-1.0 / nu), w / nu))
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hs(eps: f64) -> KernelSpec {
        KernelSpec::new(1.0, 1.0, Angular::HardSphere, eps).unwrap()
    }

    fn pl(nu: f64, eps: f64) -> KernelSpec {
        KernelSpec::new(1.0, 1.0, Angular::PowerLaw { nu }, eps).unwrap()
    }

    #[test]
    fn sigma_examples() {
        assert_eq!(sigma(&hs(0.0), 2.0).unwrap(), 2.0);
        let maxwell = KernelSpec::new(0.0, 1.0, Angular::HardSphere, 0.0).unwrap();
        assert_eq!(sigma(&maxwell, 7.0).unwrap(), 1.0);
        assert_eq!(sigma(&hs(0.0).with_c(3.0).unwrap(), 0.0).unwrap(), 0.0);
        let soft = KernelSpec::new(-0.5, 1.0, Angular::HardSphere, 0.0).unwrap();
        assert_eq!(sigma(&soft, 0.0).unwrap(), f64::INFINITY);
        assert!(sigma(&hs(0.0), -1.0).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(KernelSpec::new(2.0, 1.0, Angular::HardSphere, 0.0).is_err());
        assert!(KernelSpec::new(-1.0, 1.0, Angular::HardSphere, 0.0).is_err());
        assert!(KernelSpec::new(1.0, 0.0, Angular::HardSphere, 0.0).is_err());
        assert!(KernelSpec::new(1.0, 1.0, Angular::PowerLaw { nu: 1.0 }, 0.1).is_err());
        assert!(KernelSpec::new(1.0, 1.0, Angular::HardSphere, -0.1).is_err());
    }

    #[test]
    fn mass_examples() {
        assert!((angular_mass(&hs(0.0)).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(angular_mass(&hs(PI)).unwrap(), 0.0);
        let m = angular_mass(&pl(0.5, 0.01)).unwrap();
        assert!((m - (10.0 - PI.powf(-0.5)) / 0.5).abs() < 1e-12);
        assert!((m - 18.8716).abs() < 1e-4);
        let q = angular_integral(&pl(0.5, 0.01), |_| 1.0, 1e-12).unwrap();
        assert!((q - m).abs() < 1e-9 * m);
        assert!(matches!(angular_mass(&pl(0.5, 0.0)), Err(Error::InfiniteMass { .. })));
    }

    #[test]
    fn mass_decreasing_in_epsilon() {
        for spec in [hs(0.0), pl(0.3, 1e-4)] {
            let mut prev = f64::INFINITY;
            for k in 1..50 {
                let e = PI * k as f64 / 50.0;
                let m = angular_mass(&spec.with_epsilon(e).unwrap()).unwrap();
                assert!(m < prev);
                prev = m;
            }
        }
    }

    #[test]
    fn inverse_cdf_examples() {
        assert!((sample_theta(&hs(0.0), 1.0).unwrap() - PI).abs() < 1e-15);
        assert!((sample_theta(&hs(0.0), 0.5).unwrap() - PI / 2.0).abs() < 1e-15);
        assert_eq!(sample_theta(&pl(0.5, 0.1), 0.0).unwrap(), 0.1);
        assert_eq!(sample_theta(&hs(0.2), 0.0).unwrap(), 0.2);
        assert!(sample_theta(&hs(0.0), 1.5).is_err());
    }

    #[test]
    fn first_moment_examples() {
        assert!((theta_first_moment(&hs(0.0)) - PI / 2.0).abs() < 1e-15);
        assert!((theta_first_moment(&pl(0.5, 0.0)) - 2.0 * PI.sqrt()).abs() < 1e-14);
        assert_eq!(theta_first_moment(&hs(PI)), 0.0);
        for spec in [hs(0.3), pl(0.7, 0.0), pl(0.2, 0.05)] {
            let q = angular_integral(&spec, |t| t, 1e-12).unwrap();
            assert!((q - theta_first_moment(&spec)).abs() < 1e-10 * q);
        }
    }

    #[test]
    fn sin2_moment_matches_quadrature() {
        let spec = hs(0.4);
        let q = angular_integral(&spec, |t| (0.5 * t).sin().powi(2), 1e-13).unwrap();
        assert!((q - sin2_half_moment(&spec).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn angular_rule_reproduces_moments() {
        for spec in [hs(0.0), hs(0.5), pl(0.5, 0.3)] {
            let rule = angular_rule(&spec, 40).unwrap();
            let m: f64 = rule.iter().map(|p| p.1).sum();
            assert!((m - angular_mass(&spec).unwrap()).abs() < 1e-12 * m);
            let t: f64 = rule.iter().map(|p| p.0 * p.1).sum();
            assert!((t - theta_first_moment(&spec)).abs() < 1e-8 * t);
        }
    }

    #[test]
    fn serde_round_trip() {
        let spec = pl(0.5, 0.001);
        let s = serde_json::to_string(&spec).unwrap();
        let back: KernelSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(spec, back);
        let bad = r#"{"gamma": 2.0, "c": 1.0, "angular": "hard_sphere"}"#;
        assert!(serde_json::from_str::<KernelSpec>(bad).is_err());
        let missing_nu = r#"{"gamma": 1.0, "c": 1.0, "angular": "power_law", "epsilon": 0.1}"#;
        assert!(serde_json::from_str::<KernelSpec>(missing_nu).is_err());
    }
}
