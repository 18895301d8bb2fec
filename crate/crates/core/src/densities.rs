//! Density families `f(t, x, v)` driving the SDE.
//!
//! Every model exposes the velocity marginal `m(t, v)`, the conditional
//! position density `f(t, x | v)`, exact samplers and the analytic bounds the
//! thinning sampler needs. Quadrature helpers supply Gaussian reference rules
//! in `v` and position rules in `x`.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::kernels::{self, KernelSpec};
use crate::quadrature;

/// Interface shared by all density families.
pub trait DensityModel: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &'static str;

    fn eval(&self, t: f64, x: Vec3, v: Vec3) -> f64;

    /// `m(t, v) = int f(t, x, v) dx`.
    fn marginal_m(&self, t: f64, v: Vec3) -> f64;

    /// `f(t, x | v)`; zero where the marginal vanishes.
    fn conditional(&self, t: f64, x: Vec3, v: Vec3) -> f64 {
        let m = self.marginal_m(t, v);
        if m > 1e-300 {
            self.eval(t, x, v) / m
        } else {
            0.0
        }
    }

    /// Draw `v ~ m(t, .)`.
    fn sample_velocity(&self, t: f64, rng: &mut dyn RngCore) -> Vec3;

    /// Draw `v` from the speed-biased marginal `|v| m(t, v) / E_m|v|`.
    fn sample_velocity_speed_biased(&self, t: f64, rng: &mut dyn RngCore) -> Vec3;

    /// `E_m|v|` at time `t`.
    fn mean_speed(&self, t: f64) -> f64;

    /// Upper bound on `E_m|v|` over `[0, horizon]`.
    fn mean_speed_sup(&self, horizon: f64) -> f64;

    /// Upper bound on `sup_{t <= horizon, x} f(t, x | v)`.
    fn conditional_sup(&self, v: Vec3, horizon: f64) -> f64;

    /// Bound uniform in `v`, when one exists. The thinning sampler requires it.
    fn conditional_sup_all(&self, horizon: f64) -> Option<f64>;

    /// Upper bound on `sup_{t <= horizon, x} int |v|^p f(t, x, v) dv`.
    fn moment_bound(&self, p: f64, horizon: f64) -> f64;

    /// Draw `(x, v)` from `f(t, ., .)`.
    fn sample_state(&self, t: f64, rng: &mut dyn RngCore) -> (Vec3, Vec3);

    /// Gaussian `(mean, std)` that the velocity profile at `(t, x)` resembles.
    fn velocity_reference(&self, t: f64, x: Vec3) -> (Vec3, f64);

    /// Nodes and weights approximating `int g(x) dx` for `g` shaped like the
    /// position density at time `t`.
    fn position_rule(&self, t: f64, n: usize) -> Vec<(Vec3, f64)>;

    /// `grad_x f(t, x, v)`.
    fn grad_x(&self, t: f64, x: Vec3, v: Vec3) -> Vec3 {
        let h = 1e-5;
        let mut g = [0.0; 3];
        for (k, gk) in g.iter_mut().enumerate() {
            let e = Vec3::axis(k) * h;
            *gk = (self.eval(t, x + e, v) - self.eval(t, x - e, v)) / (2.0 * h);
        }
        Vec3::from(g)
    }

    /// Side of the periodic box, for spatially homogeneous models.
    fn box_side(&self) -> Option<f64> {
        None
    }
}

/// Velocity rule for `int g(v) dv` at `(t, x)` built on the model's reference.
pub fn velocity_rule(model: &dyn DensityModel, t: f64, x: Vec3, n: usize) -> Vec<(Vec3, f64)> {
    let (mean, std) = model.velocity_reference(t, x);
    gaussian_measure_rule(mean, std, n)
}

/// Tensor Gauss-Hermite nodes for `int g(v) dv`, exact when `g` is a
/// polynomial times the `N(mean, std^2)` density.
pub fn gaussian_measure_rule(mean: Vec3, std: f64, n: usize) -> Vec<(Vec3, f64)> {
    let var = std * std;
    quadrature::gaussian_rule_3d(n, mean.to_array(), std)
        .into_iter()
        .map(|(p, w)| {
            let v = Vec3::from(p);
            (v, w / gaussian_density_3d(v - mean, var))
        })
        .collect()
}

/// Isotropic centered Gaussian density with per-component variance `var`.
#[inline]
pub fn gaussian_density_3d(v: Vec3, var: f64) -> f64 {
    (2.0 * PI * var).powf(-1.5) * (-0.5 * v.norm_sq() / var).exp()
}

/// `E|v|^p` for `v ~ N(0, var I_3)`.
pub fn gaussian_abs_moment(p: f64, var: f64) -> f64 {
    (2.0 * var).powf(0.5 * p) * (ln_gamma(0.5 * (3.0 + p)) - ln_gamma(1.5)).exp()
}

/// `E|v|` for `v ~ N(mu, h^2 I_3)`.
pub fn noncentral_mean_speed(mu: Vec3, h: f64) -> f64 {
    let m = mu.norm();
    if m == 0.0 {
        return h * (8.0 / PI).sqrt();
    }
    let l = m / h;
    h * ((2.0 / PI).sqrt() * (-0.5 * l * l).exp() + (l + 1.0 / l) * statrs::function::erf::erf(l / 2f64.sqrt()))
}

fn gaussian_vec(rng: &mut dyn RngCore, std: f64) -> Vec3 {
    let a: f64 = StandardNormal.sample(rng);
    let b: f64 = StandardNormal.sample(rng);
    let c: f64 = StandardNormal.sample(rng);
    Vec3::new(a, b, c) * std
}

fn uniform_direction(rng: &mut dyn RngCore) -> Vec3 {
    loop {
        let g = gaussian_vec(rng, 1.0);
        if let Some(u) = g.normalized() {
            return u;
        }
    }
}

/// Isotropic vector whose squared norm is `Gamma(shape, 2 var)`.
fn radial_gamma(rng: &mut dyn RngCore, shape: f64, var: f64) -> Vec3 {
    let g = Gamma::new(shape, 2.0 * var).expect("valid gamma parameters");
    let r2: f64 = g.sample(rng);
    uniform_direction(rng) * r2.sqrt()
}

/// Draw from `|v| N(v; mu, h^2) / E|v|` by rejection from `(|mu| + h|u|) N`.
fn noncentral_speed_biased(rng: &mut dyn RngCore, mu: Vec3, h: f64) -> Vec3 {
    let m = mu.norm();
    let e_u = (8.0 / PI).sqrt();
    loop {
        let u = if rng.random::<f64>() * (m + h * e_u) < m {
            gaussian_vec(rng, 1.0)
        } else {
            radial_gamma(rng, 2.0, 1.0)
        };
        let v = mu + u * h;
        let env = m + h * u.norm();
        if env <= 0.0 || rng.random::<f64>() * env <= v.norm() {
            return v;
        }
    }
}

fn uniform_in_box(rng: &mut dyn RngCore, l: f64) -> Vec3 {
    Vec3::new(rng.random::<f64>() * l, rng.random::<f64>() * l, rng.random::<f64>() * l)
}

/// Reduce a coordinate into the periodic cell `[0, l)`.
#[inline]
pub fn wrap_coordinate(a: f64, l: f64) -> f64 {
    let r = a.rem_euclid(l);
    if r >= l {
        0.0
    } else {
        r
    }
}

pub fn wrap_position(x: Vec3, l: f64) -> Vec3 {
    Vec3::new(wrap_coordinate(x.x, l), wrap_coordinate(x.y, l), wrap_coordinate(x.z, l))
}

/// Minimum-image displacement in a periodic box.
#[inline]
pub fn minimum_image(d: Vec3, l: f64) -> Vec3 {
    let f = |a: f64| a - l * (a / l).round();
    Vec3::new(f(d.x), f(d.y), f(d.z))
}

/// Gaussian kernel of width `h`, periodized on a box of side `l`.
///
/// Images beyond three cells are dropped; for `h <= l / 2` their weight is
/// below `exp(-12)` relative.
#[derive(Debug, Clone, Copy)]
pub struct PeriodicGaussian {
    h: f64,
    l: Option<f64>,
}

impl PeriodicGaussian {
    pub fn new(h: f64, l: Option<f64>) -> Self {
        PeriodicGaussian { h, l }
    }

    fn one_d(&self, a: f64) -> f64 {
        let c = 1.0 / (self.h * (2.0 * PI).sqrt());
        let s2 = 2.0 * self.h * self.h;
        match self.l {
            None => c * (-a * a / s2).exp(),
            Some(l) => {
                let a = a - l * (a / l).round();
                (-3..=3).map(|k| c * (-(a + k as f64 * l).powi(2) / s2).exp()).sum()
            }
        }
    }

    #[inline]
    pub fn eval(&self, d: Vec3) -> f64 {
        self.one_d(d.x) * self.one_d(d.y) * self.one_d(d.z)
    }

    /// Peak value, attained at zero displacement.
    pub fn max(&self) -> f64 {
        self.eval(Vec3::ZERO)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Drift {
    Static,
    FreeTransport,
}

/// Maxwellian velocities times a Gaussian position profile, optionally
/// carried by free transport: `f = N(v; a) N(x - v t; b)`.
///
/// The free-transport variant is an exact solution of the Boltzmann
/// equation: it solves free transport and is a local Maxwellian at each `x`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianProductModel {
    vel_var: f64,
    pos_var: f64,
    drift: Drift,
}

impl GaussianProductModel {
    pub fn new(vel_var: f64, pos_var: f64, drift: Drift) -> Result<Self> {
        if !(vel_var > 0.0 && vel_var.is_finite()) {
            return Err(Error::InvalidConfig(format!("vel_var: {vel_var} must be positive")));
        }
        if !(pos_var > 0.0 && pos_var.is_finite()) {
            return Err(Error::InvalidConfig(format!("pos_var: {pos_var} must be positive")));
        }
        Ok(GaussianProductModel { vel_var, pos_var, drift })
    }

    pub fn vel_var(&self) -> f64 {
        self.vel_var
    }

    pub fn pos_var(&self) -> f64 {
        self.pos_var
    }

    pub fn drift(&self) -> Drift {
        self.drift
    }

    fn shift(&self, t: f64, v: Vec3) -> Vec3 {
        match self.drift {
            Drift::Static => Vec3::ZERO,
            Drift::FreeTransport => v * t,
        }
    }

    /// Per-component variance of the position marginal at time `t`.
    pub fn position_var(&self, t: f64) -> f64 {
        match self.drift {
            Drift::Static => self.pos_var,
            Drift::FreeTransport => self.pos_var + self.vel_var * t * t,
        }
    }
}

impl DensityModel for GaussianProductModel {
    fn name(&self) -> &'static str {
        "gaussian_product"
    }

    fn eval(&self, t: f64, x: Vec3, v: Vec3) -> f64 {
        gaussian_density_3d(v, self.vel_var) * gaussian_density_3d(x - self.shift(t, v), self.pos_var)
    }

    fn marginal_m(&self, _t: f64, v: Vec3) -> f64 {
        gaussian_density_3d(v, self.vel_var)
    }

    fn conditional(&self, t: f64, x: Vec3, v: Vec3) -> f64 {
        gaussian_density_3d(x - self.shift(t, v), self.pos_var)
    }

    fn sample_velocity(&self, _t: f64, rng: &mut dyn RngCore) -> Vec3 {
        gaussian_vec(rng, self.vel_var.sqrt())
    }

    fn sample_velocity_speed_biased(&self, _t: f64, rng: &mut dyn RngCore) -> Vec3 {
        radial_gamma(rng, 2.0, self.vel_var)
    }

    fn mean_speed(&self, _t: f64) -> f64 {
        (8.0 * self.vel_var / PI).sqrt()
    }

    fn mean_speed_sup(&self, _horizon: f64) -> f64 {
        self.mean_speed(0.0)
    }

    fn conditional_sup(&self, _v: Vec3, _horizon: f64) -> f64 {
        (2.0 * PI * self.pos_var).powf(-1.5)
    }

    fn conditional_sup_all(&self, _horizon: f64) -> Option<f64> {
        Some((2.0 * PI * self.pos_var).powf(-1.5))
    }

    fn moment_bound(&self, p: f64, _horizon: f64) -> f64 {
        gaussian_abs_moment(p, self.vel_var) * (2.0 * PI * self.pos_var).powf(-1.5)
    }

    fn sample_state(&self, t: f64, rng: &mut dyn RngCore) -> (Vec3, Vec3) {
        let v = self.sample_velocity(t, rng);
        let x = self.shift(t, v) + gaussian_vec(rng, self.pos_var.sqrt());
        (x, v)
    }

    fn velocity_reference(&self, t: f64, x: Vec3) -> (Vec3, f64) {
        match self.drift {
            Drift::Static => (Vec3::ZERO, self.vel_var.sqrt()),
            Drift::FreeTransport => {
                let prec = 1.0 / self.vel_var + t * t / self.pos_var;
                (x * (t / self.pos_var / prec), prec.recip().sqrt())
            }
        }
    }

    fn position_rule(&self, t: f64, n: usize) -> Vec<(Vec3, f64)> {
        gaussian_measure_rule(Vec3::ZERO, self.position_var(t).sqrt(), n)
    }

    fn grad_x(&self, t: f64, x: Vec3, v: Vec3) -> Vec3 {
        let d = x - self.shift(t, v);
        d * (-self.eval(t, x, v) / self.pos_var)
    }
}

/// Uniform positions on the periodic box `[0, L)^3`, Maxwellian velocities.
#[derive(Debug, Clone, Copy)]
pub struct BoxMaxwellianModel {
    box_side: f64,
    vel_var: f64,
}

impl BoxMaxwellianModel {
    pub fn new(box_side: f64, vel_var: f64) -> Result<Self> {
        if !(box_side > 0.0 && box_side.is_finite()) {
            return Err(Error::InvalidConfig(format!("box_side: {box_side} must be positive")));
        }
        if !(vel_var > 0.0 && vel_var.is_finite()) {
            return Err(Error::InvalidConfig(format!("vel_var: {vel_var} must be positive")));
        }
        Ok(BoxMaxwellianModel { box_side, vel_var })
    }

    pub fn vel_var(&self) -> f64 {
        self.vel_var
    }

    fn volume(&self) -> f64 {
        self.box_side.powi(3)
    }
}

impl DensityModel for BoxMaxwellianModel {
    fn name(&self) -> &'static str {
        "box_maxwellian"
    }

    fn eval(&self, _t: f64, _x: Vec3, v: Vec3) -> f64 {
        gaussian_density_3d(v, self.vel_var) / self.volume()
    }

    fn marginal_m(&self, _t: f64, v: Vec3) -> f64 {
        gaussian_density_3d(v, self.vel_var)
    }

    fn conditional(&self, _t: f64, _x: Vec3, _v: Vec3) -> f64 {
        1.0 / self.volume()
    }

    fn sample_velocity(&self, _t: f64, rng: &mut dyn RngCore) -> Vec3 {
        gaussian_vec(rng, self.vel_var.sqrt())
    }

    fn sample_velocity_speed_biased(&self, _t: f64, rng: &mut dyn RngCore) -> Vec3 {
        radial_gamma(rng, 2.0, self.vel_var)
    }

    fn mean_speed(&self, _t: f64) -> f64 {
        (8.0 * self.vel_var / PI).sqrt()
    }

    fn mean_speed_sup(&self, _horizon: f64) -> f64 {
        self.mean_speed(0.0)
    }

    fn conditional_sup(&self, _v: Vec3, _horizon: f64) -> f64 {
        1.0 / self.volume()
    }

    fn conditional_sup_all(&self, _horizon: f64) -> Option<f64> {
        Some(1.0 / self.volume())
    }

    fn moment_bound(&self, p: f64, _horizon: f64) -> f64 {
        gaussian_abs_moment(p, self.vel_var) / self.volume()
    }

    fn sample_state(&self, t: f64, rng: &mut dyn RngCore) -> (Vec3, Vec3) {
        let x = uniform_in_box(rng, self.box_side);
        (x, self.sample_velocity(t, rng))
    }

    fn velocity_reference(&self, _t: f64, _x: Vec3) -> (Vec3, f64) {
        (Vec3::ZERO, self.vel_var.sqrt())
    }

    fn position_rule(&self, _t: f64, _n: usize) -> Vec<(Vec3, f64)> {
        // constant in x: one node is exact
        let c = 0.5 * self.box_side;
        vec![(Vec3::new(c, c, c), self.volume())]
    }

    fn grad_x(&self, _t: f64, _x: Vec3, _v: Vec3) -> Vec3 {
        Vec3::ZERO
    }

    fn box_side(&self) -> Option<f64> {
        Some(self.box_side)
    }
}

/// Spatially homogeneous BKW solution for Maxwell molecules on a periodic box.
///
/// With temperature `T` and `s = K T`, the velocity density is
/// `N(v; s) [ (5K - 3)/(2K) + (1 - K)/(2 K s) |v|^2 ]`, a mixture of a Gaussian
/// and a Gaussian weighted by `|v|^2`. `K(t) = 1 - (1 - K0) exp(-lambda t / 2)`
/// with `lambda = pi c int sin^2(theta) Q(dtheta)`.
#[derive(Debug, Clone, Copy)]
pub struct BkwBoxModel {
    box_side: f64,
    temperature: f64,
    k0: f64,
    lambda: f64,
}

impl BkwBoxModel {
    pub fn new(box_side: f64, temperature: f64, k0: f64, spec: &KernelSpec) -> Result<Self> {
        if spec.gamma() != 0.0 {
            return Err(Error::UnsupportedMode(format!(
                "BKW solution needs Maxwell molecules (gamma = 0), got gamma = {}",
                spec.gamma()
            )));
        }
        if !(box_side > 0.0 && box_side.is_finite()) {
            return Err(Error::InvalidConfig(format!("box_side: {box_side} must be positive")));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature: {temperature} must be positive")));
        }
        if !(0.6..=1.0).contains(&k0) {
            return Err(Error::InvalidConfig(format!("k0: {k0} outside [3/5, 1]")));
        }
        Ok(BkwBoxModel { box_side, temperature, k0, lambda: bkw_lambda(spec)? })
    }

    pub fn k_at(&self, t: f64) -> f64 {
        1.0 - (1.0 - self.k0) * (-0.5 * self.lambda * t).exp()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Mixture weights of the Gaussian and the `|v|^2`-weighted component.
    fn weights(k: f64) -> (f64, f64) {
        ((5.0 * k - 3.0) / (2.0 * k), 3.0 * (1.0 - k) / (2.0 * k))
    }

    fn volume(&self) -> f64 {
        self.box_side.powi(3)
    }

    fn abs_moment(&self, p: f64, t: f64) -> f64 {
        let k = self.k_at(t);
        let s = k * self.temperature;
        let (w1, w2) = Self::weights(k);
        let m2 = (2.0 * s).powf(0.5 * p) * (ln_gamma(0.5 * (5.0 + p)) - ln_gamma(2.5)).exp();
        w1 * gaussian_abs_moment(p, s) + w2 * m2
    }
}

/// Relaxation rate of the fourth moment for Maxwell molecules.
pub fn bkw_lambda(spec: &KernelSpec) -> Result<f64> {
    Ok(PI * spec.c() * kernels::angular_integral(spec, |t| t.sin().powi(2), 1e-13)?)
}

/// `E|Z_t|^4` for the BKW solution with temperature `temperature`, obtained by
/// integrating the closed moment equation
/// `dM4/dt = -lambda (M4 - 15 T^2)` from `M4(0) = 15 T^2 (2 K0 - K0^2)`.
pub fn bkw_fourth_moment(spec: &KernelSpec, temperature: f64, k0: f64, t: f64) -> Result<f64> {
    if spec.gamma() != 0.0 {
        return Err(Error::UnsupportedMode(format!(
            "fourth-moment equation is closed only for gamma = 0, got {}",
            spec.gamma()
        )));
    }
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::invalid(format!("time {t} must be nonnegative")));
    }
    let lambda = bkw_lambda(spec)?;
    let eq = 15.0 * temperature * temperature;
    let rhs = |m: f64| -lambda * (m - eq);
    let mut m = eq * (2.0 * k0 - k0 * k0);
    let steps = ((t * lambda.max(1.0)) / 1e-3).ceil().max(1.0) as usize;
    let h = t / steps as f64;
    for _ in 0..steps {
        let k1 = rhs(m);
        let k2 = rhs(m + 0.5 * h * k1);
        let k3 = rhs(m + 0.5 * h * k2);
        let k4 = rhs(m + h * k3);
        m += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    Ok(m)
}

impl DensityModel for BkwBoxModel {
    fn name(&self) -> &'static str {
        "bkw_box"
    }

    fn eval(&self, t: f64, _x: Vec3, v: Vec3) -> f64 {
        self.marginal_m(t, v) / self.volume()
    }

    fn marginal_m(&self, t: f64, v: Vec3) -> f64 {
        let k = self.k_at(t);
        let s = k * self.temperature;
        let (w1, w2) = Self::weights(k);
        gaussian_density_3d(v, s) * (w1 + w2 * v.norm_sq() / (3.0 * s))
    }

    fn conditional(&self, _t: f64, _x: Vec3, _v: Vec3) -> f64 {
        1.0 / self.volume()
    }

    fn sample_velocity(&self, t: f64, rng: &mut dyn RngCore) -> Vec3 {
        let k = self.k_at(t);
        let s = k * self.temperature;
        let (w1, _) = Self::weights(k);
        if rng.random::<f64>() < w1 {
            gaussian_vec(rng, s.sqrt())
        } else {
            radial_gamma(rng, 2.5, s)
        }
    }

    fn sample_velocity_speed_biased(&self, t: f64, rng: &mut dyn RngCore) -> Vec3 {
        let k = self.k_at(t);
        let s = k * self.temperature;
        let (w1, w2) = Self::weights(k);
        let e1 = w1 * gaussian_abs_moment(1.0, s);
        let e2 = w2 * (2.0 * s).sqrt() * 8.0 / (3.0 * PI.sqrt());
        if rng.random::<f64>() * (e1 + e2) < e1 {
            radial_gamma(rng, 2.0, s)
        } else {
            radial_gamma(rng, 3.0, s)
        }
    }

    fn mean_speed(&self, t: f64) -> f64 {
        self.abs_moment(1.0, t)
    }

    fn mean_speed_sup(&self, _horizon: f64) -> f64 {
        // E|v| = sqrt(2 T / pi) (K + 1) / sqrt(K) decreases as K grows to 1
        self.mean_speed(0.0)
    }

    fn conditional_sup(&self, _v: Vec3, _horizon: f64) -> f64 {
        1.0 / self.volume()
    }

    fn conditional_sup_all(&self, _horizon: f64) -> Option<f64> {
        Some(1.0 / self.volume())
    }

    fn moment_bound(&self, p: f64, horizon: f64) -> f64 {
        // monotone in t between the endpoints for the moments in use
        self.abs_moment(p, 0.0).max(self.abs_moment(p, horizon)) / self.volume()
    }

    fn sample_state(&self, t: f64, rng: &mut dyn RngCore) -> (Vec3, Vec3) {
        let x = uniform_in_box(rng, self.box_side);
        (x, self.sample_velocity(t, rng))
    }

    fn velocity_reference(&self, t: f64, _x: Vec3) -> (Vec3, f64) {
        (Vec3::ZERO, (self.k_at(t) * self.temperature).sqrt())
    }

    fn position_rule(&self, _t: f64, _n: usize) -> Vec<(Vec3, f64)> {
        let c = 0.5 * self.box_side;
        vec![(Vec3::new(c, c, c), self.volume())]
    }

    fn grad_x(&self, _t: f64, _x: Vec3, _v: Vec3) -> Vec3 {
        Vec3::ZERO
    }

    fn box_side(&self) -> Option<f64> {
        Some(self.box_side)
    }
}

/// Product-kernel density estimate built from a particle cloud.
#[derive(Debug, Clone)]
pub struct MollifiedEmpiricalModel {
    particles: Vec<(Vec3, Vec3)>,
    kx: PeriodicGaussian,
    hv: f64,
    box_side: Option<f64>,
    mean_speed: f64,
}

impl MollifiedEmpiricalModel {
    pub fn new(particles: Vec<(Vec3, Vec3)>, bandwidth_x: f64, bandwidth_v: f64, box_side: Option<f64>) -> Result<Self> {
        if particles.is_empty() {
            return Err(Error::InvalidConfig("particles: empty cloud".into()));
        }
        if !(bandwidth_x > 0.0 && bandwidth_x.is_finite()) {
            return Err(Error::InvalidConfig(format!("bandwidth_x: {bandwidth_x} must be positive")));
        }
        if !(bandwidth_v > 0.0 && bandwidth_v.is_finite()) {
            return Err(Error::InvalidConfig(format!("bandwidth_v: {bandwidth_v} must be positive")));
        }
        if let Some(l) = box_side {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::InvalidConfig(format!("box_side: {l} must be positive")));
            }
        }
        for (x, v) in &particles {
            x.ensure_finite()?;
            v.ensure_finite()?;
        }
        let mean_speed =
            particles.iter().map(|(_, v)| noncentral_mean_speed(*v, bandwidth_v)).sum::<f64>() / particles.len() as f64;
        Ok(MollifiedEmpiricalModel {
            particles,
            kx: PeriodicGaussian::new(bandwidth_x, box_side),
            hv: bandwidth_v,
            box_side,
            mean_speed,
        })
    }

    /// Load particles from a CSV with columns `x1,x2,x3,v1,v2,v3`.
    pub fn from_csv(path: &Path, bandwidth_x: f64, bandwidth_v: f64, box_side: Option<f64>) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        let want = ["x1", "x2", "x3", "v1", "v2", "v3"];
        let mut idx = [0usize; 6];
        for (k, name) in want.iter().enumerate() {
            idx[k] = headers
                .iter()
                .position(|h| h.trim() == *name)
                .ok_or_else(|| Error::InvalidConfig(format!("particles csv: missing column {name}")))?;
        }
        let mut particles = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let mut vals = [0.0; 6];
            for k in 0..6 {
                let field = rec.get(idx[k]).unwrap_or("");
                vals[k] = field.trim().parse().map_err(|_| {
                    Error::InvalidConfig(format!("particles csv: row {}: bad value {field:?}", line + 2))
                })?;
            }
            particles.push((Vec3::new(vals[0], vals[1], vals[2]), Vec3::new(vals[3], vals[4], vals[5])));
        }
        MollifiedEmpiricalModel::new(particles, bandwidth_x, bandwidth_v, box_side)
    }

    pub fn particles(&self) -> &[(Vec3, Vec3)] {
        &self.particles
    }

    fn kv(&self, d: Vec3) -> f64 {
        gaussian_density_3d(d, self.hv * self.hv)
    }
}

impl DensityModel for MollifiedEmpiricalModel {
    fn name(&self) -> &'static str {
        "mollified_empirical"
    }

    fn eval(&self, _t: f64, x: Vec3, v: Vec3) -> f64 {
        let s: f64 = self.particles.iter().map(|(xi, vi)| self.kx.eval(x - *xi) * self.kv(v - *vi)).sum();
        s / self.particles.len() as f64
    }

    fn marginal_m(&self, _t: f64, v: Vec3) -> f64 {
        let s: f64 = self.particles.iter().map(|(_, vi)| self.kv(v - *vi)).sum();
        s / self.particles.len() as f64
    }

    fn sample_velocity(&self, _t: f64, rng: &mut dyn RngCore) -> Vec3 {
        let i = rng.random_range(0..self.particles.len());
        self.particles[i].1 + gaussian_vec(rng, self.hv)
    }

    fn sample_velocity_speed_biased(&self, _t: f64, rng: &mut dyn RngCore) -> Vec3 {
        // particle chosen with probability proportional to its kernel's E|v|
        let total = self.mean_speed * self.particles.len() as f64;
        let mut u = rng.random::<f64>() * total;
        let mut pick = self.particles.len() - 1;
        for (i, (_, vi)) in self.particles.iter().enumerate() {
            let e = noncentral_mean_speed(*vi, self.hv);
            if u < e {
                pick = i;
                break;
            }
            u -= e;
        }
        noncentral_speed_biased(rng, self.particles[pick].1, self.hv)
    }

    fn mean_speed(&self, _t: f64) -> f64 {
        self.mean_speed
    }

    fn mean_speed_sup(&self, _horizon: f64) -> f64 {
        self.mean_speed
    }

    fn conditional_sup(&self, _v: Vec3, _horizon: f64) -> f64 {
        self.kx.max()
    }

    fn conditional_sup_all(&self, _horizon: f64) -> Option<f64> {
        Some(self.kx.max())
    }

    fn moment_bound(&self, p: f64, _horizon: f64) -> f64 {
        // |v|^p <= 2^(p-1)_+ (|v_i|^p + |hv u|^p)
        let c = 2f64.powf((p - 1.0).max(0.0));
        let s: f64 = self
            .particles
            .iter()
            .map(|(_, vi)| c * (vi.norm().powf(p) + gaussian_abs_moment(p, self.hv * self.hv)))
            .sum();
        self.kx.max() * s / self.particles.len() as f64
    }

    fn sample_state(&self, _t: f64, rng: &mut dyn RngCore) -> (Vec3, Vec3) {
        let i = rng.random_range(0..self.particles.len());
        let (xi, vi) = self.particles[i];
        let mut x = xi + gaussian_vec(rng, self.kx.h);
        if let Some(l) = self.box_side {
            x = wrap_position(x, l);
        }
        (x, vi + gaussian_vec(rng, self.hv))
    }

    fn velocity_reference(&self, _t: f64, _x: Vec3) -> (Vec3, f64) {
        let n = self.particles.len() as f64;
        let mean = self.particles.iter().fold(Vec3::ZERO, |a, (_, v)| a + *v) / n;
        let var = self.particles.iter().map(|(_, v)| (*v - mean).norm_sq()).sum::<f64>() / (3.0 * n);
        (mean, (var + self.hv * self.hv).sqrt())
    }

    fn position_rule(&self, _t: f64, n: usize) -> Vec<(Vec3, f64)> {
        match self.box_side {
            Some(l) => {
                // midpoint rule is spectrally accurate for smooth periodic integrands
                let h = l / n as f64;
                let mut out = Vec::with_capacity(n * n * n);
                for a in 0..n {
                    for b in 0..n {
                        for c in 0..n {
                            let p = Vec3::new(a as f64 + 0.5, b as f64 + 0.5, c as f64 + 0.5) * h;
                            out.push((p, h * h * h));
                        }
                    }
                }
                out
            }
            None => {
                let np = self.particles.len() as f64;
                let mean = self.particles.iter().fold(Vec3::ZERO, |a, (x, _)| a + *x) / np;
                let var = self.particles.iter().map(|(x, _)| (*x - mean).norm_sq()).sum::<f64>() / (3.0 * np);
                gaussian_measure_rule(mean, (var + self.kx.h * self.kx.h).sqrt(), n)
            }
        }
    }

    fn box_side(&self) -> Option<f64> {
        self.box_side
    }
}

/// One line of a hypothesis certification report.
#[derive(Debug, Clone, Serialize)]
pub struct HypothesisCheck {
    pub name: String,
    pub coarse: f64,
    pub fine: f64,
    pub model_bound: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct HypothesisReport {
    pub model: String,
    pub horizon: f64,
    pub time_slices: usize,
    pub checks: Vec<HypothesisCheck>,
    pub pass: bool,
}

/// Numerical suprema of the integrals bounded by the regularity hypotheses:
///
/// * `B2`: `sup_x int |v|^(1+gamma) f dv`,
/// * `B4`: `sup_x int f dv`,
/// * `B5`: `sup_{|x| <= 1} int max(1, |v|^2) |grad_x f| dv`,
/// * `B6`: `sup_x int |v|^3 f dv`,
///
/// each taken over a `(t, x)` grid at two resolutions. A check fails when the
/// value is not finite, moves by more than 5% on refinement, or exceeds the
/// model's own analytic bound.
pub fn certify_hypotheses(model: &dyn DensityModel, spec: &KernelSpec, horizon: f64) -> Result<HypothesisReport> {
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::invalid(format!("horizon {horizon} must be nonnegative")));
    }
    let p_b2 = 1.0 + spec.gamma();
    let slices = |n: usize| -> Vec<f64> {
        if horizon == 0.0 {
            vec![0.0]
        } else {
            (0..=n).map(|k| horizon * k as f64 / n as f64).collect()
        }
    };
    let sup_over = |nt: usize, nx: usize, nv: usize, g: &dyn Fn(f64, Vec3, Vec3) -> f64, near: bool| -> f64 {
        let mut best: f64 = 0.0;
        for t in slices(nt) {
            let mut xs: Vec<Vec3> = model.position_rule(t, nx).into_iter().map(|p| p.0).collect();
            xs.push(Vec3::ZERO);
            if let Some(l) = model.box_side() {
                xs.push(Vec3::new(0.5 * l, 0.5 * l, 0.5 * l));
            }
            for x in xs {
                if near && x.norm() > 1.0 && model.box_side().is_none() {
                    continue;
                }
                let val: f64 = velocity_rule(model, t, x, nv).iter().map(|(v, w)| w * g(t, x, *v)).sum();
                if val.is_finite() {
                    best = best.max(val);
                } else {
                    return f64::INFINITY;
                }
            }
        }
        best
    };
    let b2 = move |t: f64, x: Vec3, v: Vec3| v.norm().powf(p_b2) * model.eval(t, x, v);
    let b4 = |t: f64, x: Vec3, v: Vec3| model.eval(t, x, v);
    let b5 = |t: f64, x: Vec3, v: Vec3| v.norm_sq().max(1.0) * model.grad_x(t, x, v).norm();
    let b6 = |t: f64, x: Vec3, v: Vec3| v.norm().powi(3) * model.eval(t, x, v);
    let entries: [(&str, &dyn Fn(f64, Vec3, Vec3) -> f64, Option<f64>, bool); 4] = [
        ("B2", &b2, Some(model.moment_bound(p_b2, horizon)), false),
        ("B4", &b4, Some(model.moment_bound(0.0, horizon)), false),
        ("B5", &b5, None, true),
        ("B6", &b6, Some(model.moment_bound(3.0, horizon)), false),
    ];
    let mut checks = Vec::new();
    for (name, g, bound, near) in entries {
        let coarse = sup_over(4, 3, 16, g, near);
        let fine = sup_over(8, 5, 24, g, near);
        let stable = (fine - coarse).abs() <= 0.05 * fine.abs().max(1e-300);
        let within = bound.is_none_or(|b| fine <= b * (1.0 + 1e-6));
        checks.push(HypothesisCheck {
            name: name.to_string(),
            coarse,
            fine,
            model_bound: bound,
            pass: fine.is_finite() && stable && within,
        });
    }
    let pass = checks.iter().all(|c| c.pass);
    Ok(HypothesisReport {
        model: model.name().to_string(),
        horizon,
        time_slices: slices(8).len(),
        checks,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Angular;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn maxwell(eps: f64) -> KernelSpec {
        KernelSpec::new(0.0, 1.0, Angular::HardSphere, eps).unwrap()
    }

    fn total_mass(model: &dyn DensityModel, t: f64) -> f64 {
        model
            .position_rule(t, 10)
            .iter()
            .map(|(x, wx)| wx * velocity_rule(model, t, *x, 10).iter().map(|(v, wv)| wv * model.eval(t, *x, *v)).sum::<f64>())
            .sum()
    }

    #[test]
    fn models_are_normalized() {
        let k = maxwell(0.0);
        let models: Vec<Box<dyn DensityModel>> = vec![
            Box::new(GaussianProductModel::new(0.7, 1.3, Drift::Static).unwrap()),
            Box::new(GaussianProductModel::new(0.7, 1.3, Drift::FreeTransport).unwrap()),
            Box::new(BoxMaxwellianModel::new(2.0, 0.5).unwrap()),
            Box::new(BkwBoxModel::new(1.0, 1.0, 0.7, &k).unwrap()),
        ];
        for m in &models {
            for t in [0.0, 0.8] {
                let s = total_mass(m.as_ref(), t);
                assert!((s - 1.0).abs() < 1e-6, "{} t={t}: {s}", m.name());
            }
        }
    }

    #[test]
    fn conditional_times_marginal() {
        let m = GaussianProductModel::new(0.5, 2.0, Drift::FreeTransport).unwrap();
        let x = Vec3::new(0.3, -1.0, 0.2);
        let v = Vec3::new(1.0, 0.1, -0.4);
        let lhs = m.conditional(0.7, x, v) * m.marginal_m(0.7, v);
        let rhs = m.eval(0.7, x, v);
        assert!((lhs - rhs).abs() <= 1e-12 * rhs);
    }

    #[test]
    fn noncentral_speed_formula() {
        let mu = Vec3::new(1.0, 0.5, 0.0);
        let h = 0.7;
        let rule = gaussian_measure_rule(mu, h, 40);
        let q: f64 = rule.iter().map(|(v, w)| w * v.norm() * gaussian_density_3d(*v - mu, h * h)).sum();
        // |v| is not smooth at the origin, so the tensor rule converges slowly
        assert!((q - noncentral_mean_speed(mu, h)).abs() < 1e-3);
        assert!((noncentral_mean_speed(Vec3::ZERO, 1.0) - (8.0 / PI).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn abs_moments() {
        assert!((gaussian_abs_moment(2.0, 1.0) - 3.0).abs() < 1e-12);
        assert!((gaussian_abs_moment(4.0, 1.0) - 15.0).abs() < 1e-11);
        assert!((gaussian_abs_moment(3.0, 1.0) - 8.0 * (2.0 / PI).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn speed_biased_samplers_have_right_mean() {
        // E_biased|v| = E|v|^2 / E|v|
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let k = maxwell(0.0);
        let models: Vec<Box<dyn DensityModel>> = vec![
            Box::new(BoxMaxwellianModel::new(1.0, 0.5).unwrap()),
            Box::new(BkwBoxModel::new(1.0, 1.0, 0.65, &k).unwrap()),
            Box::new(
                MollifiedEmpiricalModel::new(
                    vec![(Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0)), (Vec3::ZERO, Vec3::new(0.0, -0.2, 0.1))],
                    0.3,
                    0.4,
                    Some(1.0),
                )
                .unwrap(),
            ),
        ];
        for m in &models {
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for _ in 0..n {
                s1 += m.sample_velocity_speed_biased(0.0, &mut rng).norm();
                let v = m.sample_velocity(0.0, &mut rng);
                s2 += v.norm_sq();
            }
            let biased = s1 / n as f64;
            let expect = (s2 / n as f64) / m.mean_speed(0.0);
            assert!((biased - expect).abs() < 0.02 * expect, "{}: {biased} vs {expect}", m.name());
        }
    }

    #[test]
    fn sampler_moments_match_marginal() {
        let k = maxwell(0.0);
        let m = BkwBoxModel::new(1.0, 1.0, 0.6, &k).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut m2 = 0.0;
        let mut m4 = 0.0;
        let mut mean = Vec3::ZERO;
        for _ in 0..n {
            let v = m.sample_velocity(0.0, &mut rng);
            mean += v;
            m2 += v.norm_sq();
            m4 += v.norm_sq().powi(2);
        }
        let nf = n as f64;
        assert!(mean.norm() / nf < 4.0 * (3.0 / nf).sqrt());
        assert!((m2 / nf - 3.0).abs() < 4.0 * (m.abs_moment(4.0, 0.0) / nf).sqrt());
        let exact = bkw_fourth_moment(&k, 1.0, 0.6, 0.0).unwrap();
        assert!((m.abs_moment(4.0, 0.0) - exact).abs() < 1e-10);
        assert!((m4 / nf - exact).abs() < 0.03 * exact);
    }

    #[test]
    fn bkw_fourth_moment_examples() {
        let k = maxwell(0.0);
        assert!((bkw_fourth_moment(&k, 1.0, 1.0, 0.0).unwrap() - 15.0).abs() < 1e-12);
        assert!((bkw_fourth_moment(&k, 2.0, 1.0, 0.0).unwrap() - 60.0).abs() < 1e-12);
        assert!((bkw_fourth_moment(&k, 1.0, 0.6, 200.0).unwrap() - 15.0).abs() < 1e-8);
        let lam = bkw_lambda(&k).unwrap();
        assert!((lam - 2.0 * PI / 3.0).abs() < 1e-12);
        let m = BkwBoxModel::new(1.0, 1.0, 0.6, &k).unwrap();
        for t in [0.1, 0.5, 2.0] {
            let ode = bkw_fourth_moment(&k, 1.0, 0.6, t).unwrap();
            assert!((ode - m.abs_moment(4.0, t)).abs() < 1e-8 * ode);
        }
        let hs = KernelSpec::new(1.0, 1.0, Angular::HardSphere, 0.0).unwrap();
        assert!(matches!(bkw_fourth_moment(&hs, 1.0, 0.6, 1.0), Err(Error::UnsupportedMode(_))));
    }

    #[test]
    fn bkw_mean_speed_closed_form() {
        let k = maxwell(0.0);
        let m = BkwBoxModel::new(1.0, 1.0, 0.65, &k).unwrap();
        let kk = m.k_at(0.4);
        let closed = (2.0 / PI).sqrt() * (kk + 1.0) / kk.sqrt();
        assert!((m.mean_speed(0.4) - closed).abs() < 1e-12);
        assert!(m.mean_speed_sup(3.0) >= m.mean_speed(3.0));
    }

    #[test]
    fn periodic_kernel_normalized() {
        let k = PeriodicGaussian::new(0.3, Some(1.0));
        let n = 24;
        let h = 1.0 / n as f64;
        let mut s = 0.0;
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    s += k.eval(Vec3::new(a as f64, b as f64, c as f64) * h) * h * h * h;
                }
            }
        }
        assert!((s - 1.0).abs() < 1e-10);
    }

    #[test]
    fn empirical_model_normalized_and_csv() {
        let parts = vec![
            (Vec3::new(0.1, 0.2, 0.3), Vec3::new(0.5, 0.0, -0.5)),
            (Vec3::new(0.8, 0.4, 0.9), Vec3::new(-0.3, 0.2, 0.1)),
        ];
        let m = MollifiedEmpiricalModel::new(parts.clone(), 0.2, 0.3, Some(1.0)).unwrap();
        let s: f64 = m
            .position_rule(0.0, 12)
            .iter()
            .map(|(x, wx)| wx * velocity_rule(&m, 0.0, *x, 16).iter().map(|(v, wv)| wv * m.eval(0.0, *x, *v)).sum::<f64>())
            .sum();
        assert!((s - 1.0).abs() < 1e-6, "{s}");
        let dir = std::env::temp_dir().join(format!("boltzsim-densities-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("p.csv");
        let mut body = String::from("x1,x2,x3,v1,v2,v3\n");
        for (x, v) in &parts {
            body += &format!("{},{},{},{},{},{}\n", x.x, x.y, x.z, v.x, v.y, v.z);
        }
        std::fs::write(&path, body).unwrap();
        let back = MollifiedEmpiricalModel::from_csv(&path, 0.2, 0.3, Some(1.0)).unwrap();
        assert_eq!(back.particles(), parts.as_slice());
        std::fs::write(&path, "x1,x2,x3,v1,v2\n0,0,0,0,0\n").unwrap();
        assert!(MollifiedEmpiricalModel::from_csv(&path, 0.2, 0.3, None).is_err());
        std::fs::remove_dir_all(&dir).ok();
        assert!(MollifiedEmpiricalModel::new(vec![], 0.1, 0.1, None).is_err());
        assert!(MollifiedEmpiricalModel::new(parts, 0.0, 0.1, None).is_err());
    }

    #[test]
    fn certification_examples() {
        let hs = KernelSpec::new(1.0, 1.0, Angular::HardSphere, 0.0).unwrap();
        let b = BoxMaxwellianModel::new(1.0, 1.0).unwrap();
        let r = certify_hypotheses(&b, &hs, 1.0).unwrap();
        assert!(r.pass, "{r:?}");
        let b4 = r.checks.iter().find(|c| c.name == "B4").unwrap();
        assert!((b4.fine - 1.0).abs() < 1e-9);
        let g = GaussianProductModel::new(1.0, 1.0, Drift::Static).unwrap();
        let r = certify_hypotheses(&g, &hs, 1.0).unwrap();
        assert!(r.pass, "{r:?}");
        let b6 = r.checks.iter().find(|c| c.name == "B6").unwrap();
        let closed = gaussian_abs_moment(3.0, 1.0) * (2.0 * PI).powf(-1.5);
        assert!((b6.fine - closed).abs() < 1e-3 * closed);
        let r = certify_hypotheses(&g, &hs, 0.0).unwrap();
        assert_eq!(r.time_slices, 1);
        assert!(r.pass);
    }
}
