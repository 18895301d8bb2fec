//! Numerical checks of the collision identities and of the weak form.
//!
//! Verdicts on Monte Carlo quantities are statistical contracts:
//! `|difference| <= 3 stderr + tolerance`.

use std::f64::consts::{PI, TAU};

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::Serialize;

use crate::densities::{gaussian_density_3d, velocity_rule, DensityModel};
use crate::error::{Error, Result};
use crate::geometry::{deflection_alpha, post_collision, Vec3};
use crate::kernels::{self, KernelSpec};
use crate::quadrature;
use crate::sde_engine::{stream_rng, Trajectory};
use crate::stats::MeanSe;
use crate::truncation::{alpha_j, sigma_j};

/// Test functions `psi(x, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestFunction {
    Constant { a: f64 },
    LinearMomentum { b: Vec3 },
    Energy,
    /// `(1 - r^2 / R^2)^4` on `r^2 = |x - cx|^2 + |z - cz|^2 < R^2`.
    CompactBump { cx: Vec3, cz: Vec3, radius: f64 },
    /// `sum_k a_k z_k^2 + (b, z)`.
    Quadratic { a: Vec3, b: Vec3 },
    /// `cos((k, x)) (1 + (b, z))`.
    PositionWave { k: Vec3, b: Vec3 },
}

impl TestFunction {
    /// Member of the collision-invariant family `a + (b, z) + c |z|^2`.
    pub fn is_invariant(&self) -> bool {
        match self {
            TestFunction::Constant { .. } | TestFunction::LinearMomentum { .. } | TestFunction::Energy => true,
            TestFunction::Quadratic { a, .. } => a.x == a.y && a.y == a.z,
            _ => false,
        }
    }

    pub fn value(&self, x: Vec3, z: Vec3) -> f64 {
        match *self {
            TestFunction::Constant { a } => a,
            TestFunction::LinearMomentum { b } => b.dot(&z),
            TestFunction::Energy => z.norm_sq(),
            TestFunction::CompactBump { cx, cz, radius } => {
                let r2 = ((x - cx).norm_sq() + (z - cz).norm_sq()) / (radius * radius);
                if r2 >= 1.0 {
                    0.0
                } else {
                    (1.0 - r2).powi(4)
                }
            }
            TestFunction::Quadratic { a, b } => a.x * z.x * z.x + a.y * z.y * z.y + a.z * z.z * z.z + b.dot(&z),
            TestFunction::PositionWave { k, b } => k.dot(&x).cos() * (1.0 + b.dot(&z)),
        }
    }

    pub fn grad_x(&self, x: Vec3, z: Vec3) -> Vec3 {
        match *self {
            TestFunction::CompactBump { cx, cz, radius } => {
                let r2 = ((x - cx).norm_sq() + (z - cz).norm_sq()) / (radius * radius);
                if r2 >= 1.0 {
                    Vec3::ZERO
                } else {
                    (x - cx) * (-8.0 * (1.0 - r2).powi(3) / (radius * radius))
                }
            }
            TestFunction::PositionWave { k, b } => k * (-k.dot(&x).sin() * (1.0 + b.dot(&z))),
            _ => Vec3::ZERO,
        }
    }

    pub fn grad_z(&self, x: Vec3, z: Vec3) -> Vec3 {
        match *self {
            TestFunction::Constant { .. } => Vec3::ZERO,
            TestFunction::LinearMomentum { b } => b,
            TestFunction::Energy => z * 2.0,
            TestFunction::CompactBump { cx, cz, radius } => {
                let r2 = ((x - cx).norm_sq() + (z - cz).norm_sq()) / (radius * radius);
                if r2 >= 1.0 {
                    Vec3::ZERO
                } else {
                    (z - cz) * (-8.0 * (1.0 - r2).powi(3) / (radius * radius))
                }
            }
            TestFunction::Quadratic { a, b } => Vec3::new(2.0 * a.x * z.x, 2.0 * a.y * z.y, 2.0 * a.z * z.z) + b,
            TestFunction::PositionWave { k, b } => b * k.dot(&x).cos(),
        }
    }
}

/// Resolution of the deterministic quadrature grids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadGrid {
    pub n_x: usize,
    pub n_v: usize,
    pub n_theta: usize,
    pub n_phi: usize,
}

impl Default for QuadGrid {
    fn default() -> Self {
        QuadGrid { n_x: 3, n_v: 6, n_theta: 6, n_phi: 8 }
    }
}

/// Value of a quadrature together with the change against a coarser grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadratureReport {
    pub value: f64,
    pub error_estimate: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualReport {
    pub lhs: f64,
    pub rhs: f64,
    pub difference: f64,
    pub stderr: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl ResidualReport {
    pub fn from_samples(lhs: &[f64], rhs: &[f64], tolerance: f64) -> ResidualReport {
        let d: Vec<f64> = lhs.iter().zip(rhs).map(|(a, b)| a - b).collect();
        let m = MeanSe::of(&d);
        ResidualReport {
            lhs: MeanSe::of(lhs).mean,
            rhs: MeanSe::of(rhs).mean,
            difference: m.mean,
            stderr: m.se,
            tolerance,
            pass: m.mean.abs() <= 3.0 * m.se + tolerance,
        }
    }
}

fn q_collision(model: &dyn DensityModel, spec: &KernelSpec, t: f64, psi: &TestFunction, g: QuadGrid) -> Result<f64> {
    if spec.collisionless() {
        return Ok(0.0);
    }
    let angles = kernels::angular_rule(spec, g.n_theta)?;
    let phis = quadrature::periodic_trapezoid(g.n_phi);
    let mut total = 0.0;
    for (x, wx) in model.position_rule(t, g.n_x) {
        // one grid for z and v: the double sum is then antisymmetric under z <-> v
        let rule: Vec<(Vec3, f64)> =
            velocity_rule(model, t, x, g.n_v).into_iter().map(|(v, w)| (v, w * model.eval(t, x, v))).collect();
        let inner: f64 = rule
            .par_iter()
            .map(|&(z, wz)| {
                let pz = psi.value(x, z);
                let mut acc = 0.0;
                for &(v, wv) in &rule {
                    let s = spec.sigma_unchecked((z - v).norm());
                    if s == 0.0 {
                        continue;
                    }
                    let mut part = 0.0;
                    for &(th, wt) in &angles {
                        for &(ph, wp) in &phis {
                            part += wt * wp * (psi.value(x, z + deflection_alpha(z, v, th, ph)) - pz);
                        }
                    }
                    acc += wv * s * part;
                }
                wz * acc
            })
            .collect::<Vec<f64>>()
            .iter()
            .sum();
        total += wx * inner;
    }
    Ok(total)
}

/// Quadrature of `Q_t(f, f)(psi) = int f(z) f(v) sigma [psi(z*) - psi(z)]`.
///
/// Vanishes for the collision invariants `a + (b, z) + c|z|^2`. The error
/// estimate is the change from a grid one step coarser.
pub fn collision_invariant_residual(model: &dyn DensityModel, spec: &KernelSpec, t: f64, psi: &TestFunction, grid: QuadGrid) -> Result<QuadratureReport> {
    let fine = q_collision(model, spec, t, psi, grid)?;
    let coarse_grid = QuadGrid {
        n_x: grid.n_x.saturating_sub(1).max(1),
        n_v: grid.n_v.saturating_sub(1).max(1),
        n_theta: grid.n_theta.saturating_sub(1).max(1),
        n_phi: grid.n_phi.saturating_sub(2).max(2),
    };
    let coarse = q_collision(model, spec, t, psi, coarse_grid)?;
    let tolerance = 1e-6;
    let error_estimate = (fine - coarse).abs();
    Ok(QuadratureReport { value: fine, error_estimate, tolerance, pass: fine.abs() <= tolerance && fine.is_finite() })
}

/// Per-sample integrand of the energy-exchange formula,
/// `-2 pi int sin^2(theta/2) Q(dtheta) int (|z|^2 - |v|^2) sigma(|z - v|) f(t, x, v) dv`.
pub fn energy_rhs_integrand(model: &dyn DensityModel, spec: &KernelSpec, t: f64, x: Vec3, z: Vec3, n_v: usize) -> Result<f64> {
    if spec.collisionless() {
        return Ok(0.0);
    }
    let s2 = kernels::sin2_half_moment(spec)?;
    let zz = z.norm_sq();
    let inner: f64 = velocity_rule(model, t, x, n_v)
        .iter()
        .map(|(v, w)| w * (zz - v.norm_sq()) * spec.sigma_unchecked((z - *v).norm()) * model.eval(t, x, *v))
        .sum();
    Ok(-TAU * s2 * inner)
}

/// Monte Carlo over `samples ~ mu_t` of [`energy_rhs_integrand`]; this is
/// `Q_t(f, mu)(|z|^2)`.
pub fn energy_rhs_lemma(model: &dyn DensityModel, samples: &[(Vec3, Vec3)], spec: &KernelSpec, t: f64) -> Result<MeanSe> {
    if samples.is_empty() {
        return Err(Error::invalid("energy_rhs_lemma: empty ensemble"));
    }
    let vals = samples
        .par_iter()
        .map(|&(x, z)| energy_rhs_integrand(model, spec, t, x, z, 12))
        .collect::<Result<Vec<f64>>>()?;
    Ok(MeanSe::of(&vals))
}

/// Options for [`weak_residuals`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakOptions {
    /// Gauss-Legendre nodes per inter-jump segment.
    pub n_time: usize,
    /// Antithetic pairs of `(v, theta, phi)` per node for the generator.
    pub n_mc: usize,
    pub seed: u64,
    /// Truncation level of the simulated dynamics, `None` when escalating.
    pub level: Option<f64>,
    pub tolerance: f64,
}

impl Default for WeakOptions {
    fn default() -> Self {
        WeakOptions { n_time: 4, n_mc: 8, seed: 0, level: None, tolerance: 1e-6 }
    }
}

/// Unbiased estimate of the collision generator
/// `L_f psi(x, z) = int [psi(x, z*) - psi(x, z)] sigma(|z - v|) f(s, x, v) dv Q(dtheta) dphi`
/// for several test functions at once.
///
/// `v` is drawn from the model's Gaussian reference and reweighted, `theta`
/// from the normalized `Q`, and `phi` in antithetic pairs `phi, phi + pi`.
#[allow(clippy::too_many_arguments)]
fn generator_mc(
    model: &dyn DensityModel,
    spec: &KernelSpec,
    psis: &[TestFunction],
    s: f64,
    x: Vec3,
    z: Vec3,
    opts: &WeakOptions,
    q_mass: f64,
    rng: &mut dyn RngCore,
    out: &mut [f64],
) -> Result<()> {
    out.iter_mut().for_each(|o| *o = 0.0);
    if q_mass == 0.0 {
        return Ok(());
    }
    let (mean, std) = model.velocity_reference(s, x);
    let base: Vec<f64> = psis.iter().map(|p| p.value(x, z)).collect();
    let n = opts.n_mc;
    for _ in 0..n {
        let a: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
        let b: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
        let c: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
        let v = mean + Vec3::new(a, b, c) * std;
        let dens = gaussian_density_3d(v - mean, std * std);
        let f = model.eval(s, x, v);
        if f == 0.0 {
            continue;
        }
        let theta = kernels::sample_theta(spec, rng.random::<f64>())?;
        let phi = rng.random::<f64>() * TAU;
        let (sig, a1, a2) = match opts.level {
            Some(j) => (
                sigma_j(spec, z, v, j),
                alpha_j(z, v, theta, phi, j),
                alpha_j(z, v, theta, (phi + PI) % TAU, j),
            ),
            None => (
                spec.sigma_unchecked((z - v).norm()),
                deflection_alpha(z, v, theta, phi),
                deflection_alpha(z, v, theta, (phi + PI) % TAU),
            ),
        };
        let w = sig * f / dens * q_mass * TAU / n as f64;
        for (k, p) in psis.iter().enumerate() {
            out[k] += w * 0.5 * (p.value(x, z + a1) + p.value(x, z + a2) - 2.0 * base[k]);
        }
    }
    Ok(())
}

/// Weak-form residuals for every `(psi, t)` pair on a simulated ensemble.
///
/// Per trajectory the residual is
/// `psi(X_t, Z_t) - psi(X_0, Z_0) - int_0^t [(Z_s, grad_x psi) + L_f psi](X_s, Z_s) ds`,
/// with the time integral split at the jump times and done by Gauss-Legendre
/// on each smooth piece. Output is indexed `[psi][time]`.
pub fn weak_residuals(
    paths: &[Trajectory],
    model: &dyn DensityModel,
    spec: &KernelSpec,
    psis: &[TestFunction],
    times: &[f64],
    opts: &WeakOptions,
) -> Result<Vec<Vec<ResidualReport>>> {
    if paths.is_empty() {
        return Err(Error::invalid("weak residual: empty ensemble"));
    }
    let horizon = paths[0].horizon;
    if times.iter().any(|&t| !(0.0..=horizon).contains(&t)) {
        return Err(Error::invalid("weak residual: output time outside the horizon"));
    }
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q_mass = if spec.collisionless() { 0.0 } else { kernels::angular_mass(spec)? };
    let gl = quadrature::gauss_legendre(opts.n_time);
    let np = psis.len();
    // per path: lhs[psi][t], rhs[psi][t]
    let per_path = paths
        .par_iter()
        .enumerate()
        .map(|(i, p)| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut rng = stream_rng(opts.seed, i as u64);
            let x0 = p.xs[0];
            let z0 = p.zs[0];
            let mut lhs = vec![0.0; np * sorted.len()];
            let mut rhs = vec![0.0; np * sorted.len()];
            let mut acc = vec![0.0; np];
            let mut gen = vec![0.0; np];
            let mut t_prev = 0.0;
            for (ti, &t) in sorted.iter().enumerate() {
                // segment breakpoints between t_prev and t
                let mut cuts = vec![t_prev];
                cuts.extend(p.times.iter().copied().filter(|&s| s > t_prev && s < t));
                cuts.push(t);
                for w in cuts.windows(2) {
                    let (a, b) = (w[0], w[1]);
                    if b <= a {
                        continue;
                    }
                    let z = p.z_at(a);
                    let xa = p.x_at(a);
                    let h = 0.5 * (b - a);
                    for (node, weight) in gl.0.iter().zip(&gl.1) {
                        let s = a + h * (1.0 + node);
                        let x = xa + z * (s - a);
                        generator_mc(model, spec, psis, s, x, z, opts, q_mass, &mut rng, &mut gen)?;
                        for k in 0..np {
                            acc[k] += h * weight * (z.dot(&psis[k].grad_x(x, z)) + gen[k]);
                        }
                    }
                }
                let xt = p.x_at(t);
                let zt = p.z_at(t);
                for k in 0..np {
                    lhs[k * sorted.len() + ti] = psis[k].value(xt, zt) - psis[k].value(x0, z0);
                    rhs[k * sorted.len() + ti] = acc[k];
                }
                t_prev = t;
            }
            Ok((lhs, rhs))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(np);
    for k in 0..np {
        let mut row = Vec::with_capacity(times.len());
        for &t in times {
            let ti = sorted.iter().position(|&s| s == t).expect("time present");
            let idx = k * sorted.len() + ti;
            let l: Vec<f64> = per_path.iter().map(|r| r.0[idx]).collect();
            let r: Vec<f64> = per_path.iter().map(|r| r.1[idx]).collect();
            row.push(ResidualReport::from_samples(&l, &r, opts.tolerance));
        }
        out.push(row);
    }
    Ok(out)
}

/// Single `(psi, t)` weak residual.
pub fn weak_residual(
    paths: &[Trajectory],
    model: &dyn DensityModel,
    spec: &KernelSpec,
    psi: &TestFunction,
    t: f64,
    opts: &WeakOptions,
) -> Result<ResidualReport> {
    Ok(weak_residuals(paths, model, spec, std::slice::from_ref(psi), &[t], opts)?[0][0])
}

/// Output of [`relative_entropy`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropyReport {
    pub value: f64,
    pub stderr: f64,
    /// Smoothing bias of the kernel estimate of `g`.
    pub smoothing_bias: f64,
    /// Downward bias from taking the log of a noisy density estimate.
    pub log_bias: f64,
    /// `smoothing_bias + log_bias + 3 stderr`.
    pub bias_budget: f64,
    pub excluded: usize,
    pub n: usize,
    pub pass_support: bool,
}

impl EntropyReport {
    /// `|value| <= bias_budget` with a finite budget and the support check passed.
    /// A degenerate sample (zero spread) has an infinite smoothing term and fails.
    pub fn within_budget(&self) -> bool {
        self.bias_budget.is_finite() && self.value.abs() <= self.bias_budget && self.pass_support
    }
}

/// Plug-in estimate of `R(g | f) = int g ln(g / f)` from samples of `g`.
///
/// `g` is estimated by a leave-one-out Gaussian kernel estimate with
/// bandwidth `h`. With `velocity_only`, samples are velocities and `f` is the
/// marginal `m(t, .)`, which is the whole story when positions are uniform on
/// a box. Samples where `f` vanishes are excluded and counted; more than 1%
/// exclusions fail the support check.
pub fn relative_entropy(samples: &[(Vec3, Vec3)], model: &dyn DensityModel, t: f64, h: f64, velocity_only: bool) -> Result<EntropyReport> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::invalid("relative entropy needs at least two samples"));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!("bandwidth {h} must be positive")));
    }
    let box_side = model.box_side();
    let d = if velocity_only { 3.0 } else { 6.0 };
    let disp = |a: &(Vec3, Vec3), b: &(Vec3, Vec3)| -> f64 {
        let dv = (a.1 - b.1).norm_sq();
        if velocity_only {
            dv
        } else {
            let dx = match box_side {
                Some(l) => crate::densities::minimum_image(a.0 - b.0, l),
                None => a.0 - b.0,
            };
            dv + dx.norm_sq()
        }
    };
    let norm = (2.0 * PI * h * h).powf(-0.5 * d);
    let rows: Vec<Option<(f64, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let fi = if velocity_only { model.marginal_m(t, samples[i].1) } else { model.eval(t, samples[i].0, samples[i].1) };
            if !(fi > 0.0) {
                return None;
            }
            let (mut s1, mut s2) = (0.0, 0.0);
            for (k, other) in samples.iter().enumerate() {
                if k != i {
                    let kv = (-0.5 * disp(&samples[i], other) / (h * h)).exp();
                    s1 += kv;
                    s2 += kv * kv;
                }
            }
            let m1 = (n - 1) as f64;
            let g = norm * s1 / m1;
            if g <= 0.0 {
                return Some((f64::NEG_INFINITY, 0.0));
            }
            // Jensen gap E ln g_hat - ln E g_hat ~ -Var(g_hat) / (2 g^2), with the
            // variance estimated from the kernel terms themselves
            let rel_var = ((s2 * m1 / (s1 * s1)) - 1.0).max(0.0) / m1;
            Some((g.ln() - fi.ln(), 0.5 * rel_var))
        })
        .collect();
    let kept: Vec<(f64, f64)> = rows.iter().flatten().copied().filter(|r| r.0.is_finite()).collect();
    let excluded = n - kept.len();
    let vals: Vec<f64> = kept.iter().map(|r| r.0).collect();
    let m = MeanSe::of(&vals);
    let log_bias = kept.iter().map(|r| r.1).sum::<f64>() / kept.len().max(1) as f64;
    // Gaussian smoothing term with the sample variance as scale
    let sample_var = {
        let pts: Vec<Vec3> = samples.iter().map(|s| s.1).collect();
        let mean = pts.iter().fold(Vec3::ZERO, |a, p| a + *p) / n as f64;
        pts.iter().map(|p| (*p - mean).norm_sq()).sum::<f64>() / (3.0 * (n - 1) as f64)
    };
    let r = h * h / sample_var;
    let smoothing_bias = 1.5 * ((1.0 + r).ln() + 1.0 / (1.0 + r) - 1.0);
    Ok(EntropyReport {
        value: m.mean,
        stderr: m.se,
        smoothing_bias,
        log_bias,
        bias_budget: smoothing_bias + log_bias + 3.0 * m.se,
        excluded,
        n,
        pass_support: (excluded as f64) <= 0.01 * n as f64,
    })
}

/// Closed-form `KL(N(0, a I_3) || N(0, b I_3))`.
pub fn gaussian_kl(var_g: f64, var_f: f64) -> f64 {
    let r = var_g / var_f;
    1.5 * (r - 1.0 - r.ln())
}

/// One row of [`moment_report`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentRow {
    pub t: f64,
    pub mean_z: [f64; 3],
    pub se_z: [f64; 3],
    pub mean_energy: f64,
    pub se_energy: f64,
    /// Paired drift against `t = 0`, within 4 standard errors.
    pub conserved: bool,
}

/// Momentum and energy of the ensemble at the given times, with drift tests
/// against the initial values.
pub fn moment_report(paths: &[Trajectory], times: &[f64]) -> Vec<MomentRow> {
    let z0: Vec<Vec3> = paths.iter().map(|p| p.z_at(0.0)).collect();
    times
        .iter()
        .map(|&t| {
            let zt: Vec<Vec3> = paths.iter().map(|p| p.z_at(t)).collect();
            let comp = |k: usize| MeanSe::of(&zt.iter().map(|z| z.component(k)).collect::<Vec<_>>());
            let e = MeanSe::of(&zt.iter().map(|z| z.norm_sq()).collect::<Vec<_>>());
            let mut ok = true;
            for k in 0..3 {
                let d: Vec<f64> = zt.iter().zip(&z0).map(|(a, b)| a.component(k) - b.component(k)).collect();
                let m = MeanSe::of(&d);
                ok &= m.mean.abs() <= 4.0 * m.se;
            }
            let de: Vec<f64> = zt.iter().zip(&z0).map(|(a, b)| a.norm_sq() - b.norm_sq()).collect();
            let m = MeanSe::of(&de);
            ok &= m.mean.abs() <= 4.0 * m.se;
            MomentRow {
                t,
                mean_z: [comp(0).mean, comp(1).mean, comp(2).mean],
                se_z: [comp(0).se, comp(1).se, comp(2).se],
                mean_energy: e.mean,
                se_energy: e.se,
                conserved: ok,
            }
        })
        .collect()
}

/// Domain of the outer integration for [`tanaka_symmetry`]: the center
/// `c = (u + v)/2` ranges over a cube and `|v - u|` over an interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TanakaDomain {
    pub center: Vec3,
    pub half_width: f64,
    pub rho_max: f64,
    pub n_c: usize,
    pub n_rho: usize,
    pub n_polar: usize,
    pub n_azimuth: usize,
    pub n_phi: usize,
}

/// Both sides of `int psi(u, v, u*, v*) dphi du dv = int psi(u*, v*, u, v) dphi du dv`
/// at fixed `theta`.
///
/// In coordinates `c = (u + v)/2`, `w = v - u` the collision keeps `c` and
/// `|w|` fixed and moves the direction of `w` on a circle, so both sides are
/// computed on the same outer `(c, |w|)` nodes with a product Gauss rule on
/// the sphere of directions and a periodic rule in `phi`.
pub fn tanaka_symmetry<F>(psi: F, theta: f64, dom: &TanakaDomain) -> Result<(f64, f64)>
where
    F: Fn(Vec3, Vec3, Vec3, Vec3) -> f64 + Sync,
{
    if !(theta > 0.0 && theta <= PI) {
        return Err(Error::invalid(format!("theta = {theta} outside (0, pi]")));
    }
    let h = dom.half_width;
    let c_rule = quadrature::gauss_legendre_on(dom.n_c, -h, h);
    let rho_rule = quadrature::gauss_legendre_on(dom.n_rho, 0.0, dom.rho_max);
    let polar = quadrature::gauss_legendre_on(dom.n_polar, -1.0, 1.0);
    let azim = quadrature::periodic_trapezoid(dom.n_azimuth);
    let phis = quadrature::periodic_trapezoid(dom.n_phi);
    let mut dirs = Vec::with_capacity(dom.n_polar * dom.n_azimuth);
    for &(ct, wt) in &polar {
        let st = (1.0 - ct * ct).max(0.0).sqrt();
        for &(az, wa) in &azim {
            dirs.push((Vec3::new(st * az.cos(), st * az.sin(), ct), wt * wa));
        }
    }
    let mut outer = Vec::new();
    for &(a, wa) in &c_rule {
        for &(b, wb) in &c_rule {
            for &(c, wc) in &c_rule {
                for &(r, wr) in &rho_rule {
                    outer.push((dom.center + Vec3::new(a, b, c), r, wa * wb * wc * wr * r * r));
                }
            }
        }
    }
    let parts: Vec<(f64, f64)> = outer
        .par_iter()
        .map(|&(c, rho, w)| {
            let mut l = 0.0;
            let mut r = 0.0;
            for &(d, wd) in &dirs {
                let half = d * (0.5 * rho);
                let u = c - half;
                let v = c + half;
                for &(ph, wp) in &phis {
                    let (us, vs) = post_collision(u, v, theta, ph);
                    l += wd * wp * psi(u, v, us, vs);
                    r += wd * wp * psi(us, vs, u, v);
                }
            }
            (w * l, w * r)
        })
        .collect();
    // summed in node order so the result does not depend on the thread count
    Ok(parts.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1)))
}

/// Smooth bump `exp(1 - 1/(1 - s^2))` on `s < 1`, zero outside.
pub fn smooth_bump(s: f64) -> f64 {
    if s >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - s * s)).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::{BoxMaxwellianModel, Drift, GaussianProductModel};
    use crate::kernels::Angular;
    use crate::sde_engine::{simulate_ensemble, SimConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hs(eps: f64) -> KernelSpec {
        KernelSpec::new(1.0, 1.0, Angular::HardSphere, eps).unwrap()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let psis = [
            TestFunction::CompactBump { cx: Vec3::new(0.1, 0.0, 0.2), cz: Vec3::new(0.3, -0.1, 0.0), radius: 1.5 },
            TestFunction::Quadratic { a: Vec3::new(1.0, 0.5, -0.2), b: Vec3::new(0.1, 0.2, 0.3) },
            TestFunction::PositionWave { k: Vec3::new(1.0, 2.0, 0.0), b: Vec3::new(0.3, 0.0, 0.1) },
        ];
        let x = Vec3::new(0.3, 0.2, -0.4);
        let z = Vec3::new(-0.2, 0.5, 0.1);
        let h = 1e-6;
        for p in &psis {
            for k in 0..3 {
                let e = Vec3::axis(k) * h;
                let gx = (p.value(x + e, z) - p.value(x - e, z)) / (2.0 * h);
                let gz = (p.value(x, z + e) - p.value(x, z - e)) / (2.0 * h);
                assert!((gx - p.grad_x(x, z).component(k)).abs() < 1e-7);
                assert!((gz - p.grad_z(x, z).component(k)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn constant_psi_has_zero_collision_term() {
        let model = BoxMaxwellianModel::new(1.0, 1.0).unwrap();
        let r = collision_invariant_residual(&model, &hs(0.0), 0.0, &TestFunction::Constant { a: 1.0 }, QuadGrid::default()).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.pass);
    }

    #[test]
    fn non_invariant_psi_has_nonzero_collision_term() {
        let model = BoxMaxwellianModel::new(1.0, 1.0).unwrap();
        let psi = TestFunction::Quadratic { a: Vec3::new(1.0, 0.0, 0.0), b: Vec3::ZERO };
        let r = collision_invariant_residual(&model, &hs(0.0), 0.0, &psi, QuadGrid::default()).unwrap();
        // stationary and isotropic: z1^2 still integrates to zero on the Maxwellian
        assert!(r.value.abs() < 1e-6);
        let model = GaussianProductModel::new(1.0, 1.0, Drift::Static).unwrap();
        let psi = TestFunction::CompactBump { cx: Vec3::ZERO, cz: Vec3::new(0.5, 0.0, 0.0), radius: 1.0 };
        let r = collision_invariant_residual(&model, &hs(0.0), 0.0, &psi, QuadGrid::default()).unwrap();
        assert!(r.value.abs() > 1e-4, "{r:?}");
    }

    #[test]
    fn energy_rhs_signs() {
        let model = BoxMaxwellianModel::new(1.0, 1.0).unwrap();
        let spec = hs(0.0);
        let cold = energy_rhs_integrand(&model, &spec, 0.0, Vec3::ZERO, Vec3::ZERO, 12).unwrap();
        assert!(cold > 0.0);
        let hot = energy_rhs_integrand(&model, &spec, 0.0, Vec3::ZERO, Vec3::new(4.0, 0.0, 0.0), 12).unwrap();
        assert!(hot < 0.0);
        // cold case in closed form: 2 pi * (1/2) * E|v|^3
        let exact = PI * crate::densities::gaussian_abs_moment(3.0, 1.0);
        assert!((cold - exact).abs() < 1e-3 * exact, "{cold} vs {exact}");
        assert!(energy_rhs_lemma(&model, &[], &spec, 0.0).is_err());
    }

    #[test]
    fn weak_residual_constant_and_free_transport() {
        let model = GaussianProductModel::new(1.0, 1.0, Drift::FreeTransport).unwrap();
        let spec = hs(PI);
        let cfg = SimConfig::new(1.0, 4.0, 3);
        let runs = simulate_ensemble(200, |r| model.sample_state(0.0, r), &model, &spec, &cfg).unwrap();
        let paths: Vec<Trajectory> = runs.into_iter().map(|r| r.0).collect();
        let opts = WeakOptions { n_time: 16, ..WeakOptions::default() };
        let one = weak_residual(&paths, &model, &spec, &TestFunction::Constant { a: 1.0 }, 1.0, &opts).unwrap();
        assert_eq!(one.difference, 0.0);
        let wave = TestFunction::PositionWave { k: Vec3::new(1.0, 0.5, 0.0), b: Vec3::new(0.2, 0.0, 0.0) };
        let r = weak_residual(&paths, &model, &spec, &wave, 0.7, &opts).unwrap();
        assert!(r.difference.abs() < 1e-10 && r.stderr < 1e-10, "{r:?}");
    }

    #[test]
    fn entropy_kl_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = BoxMaxwellianModel::new(1.0, 1.0).unwrap();
        let n = 1500;
        let mk = |var: f64, rng: &mut ChaCha8Rng| -> Vec<(Vec3, Vec3)> {
            let g = BoxMaxwellianModel::new(1.0, var).unwrap();
            (0..n).map(|_| g.sample_state(0.0, rng)).collect()
        };
        let same = mk(1.0, &mut rng);
        let r = relative_entropy(&same, &f, 0.0, 0.4, true).unwrap();
        assert!(r.value.abs() <= r.bias_budget, "{r:?}");
        let wide = mk(2.0, &mut rng);
        let r = relative_entropy(&wide, &f, 0.0, 0.5, true).unwrap();
        let kl = gaussian_kl(2.0, 1.0);
        assert!((kl - 1.5 * (1.0 - 2f64.ln())).abs() < 1e-15);
        assert!((r.value - kl).abs() <= r.bias_budget, "{r:?} vs {kl}");
    }

    #[test]
    fn tanaka_symmetry_small_grid() {
        let a = Vec3::new(0.2, 0.0, 0.1);
        let b = Vec3::new(-0.3, 0.4, 0.0);
        let psi = |u: Vec3, v: Vec3, y: Vec3, z: Vec3| {
            smooth_bump((u - a).norm() / 1.2)
                * smooth_bump((v - b).norm() / 1.0)
                * smooth_bump((y - a).norm() / 1.8)
                * (1.0 + 0.3 * y.x)
                * smooth_bump((z - b).norm() / 1.6)
        };
        let dom = TanakaDomain {
            center: (a + b) * 0.5,
            half_width: 1.1,
            rho_max: (b - a).norm() + 2.2,
            n_c: 4,
            n_rho: 4,
            n_polar: 32,
            n_azimuth: 64,
            n_phi: 64,
        };
        let (l, r) = tanaka_symmetry(psi, 1.0, &dom).unwrap();
        assert!(l.abs() > 1e-3);
        assert!((l - r).abs() < 1e-3 * l.abs(), "{l} {r}");
    }

    #[test]
    fn moment_report_collisionless_exact() {
        let model = BoxMaxwellianModel::new(1.0, 1.0).unwrap();
        let cfg = SimConfig::new(1.0, 4.0, 3);
        let runs = simulate_ensemble(50, |r| model.sample_state(0.0, r), &model, &hs(PI), &cfg).unwrap();
        let paths: Vec<Trajectory> = runs.into_iter().map(|r| r.0).collect();
        let rows = moment_report(&paths, &[0.0, 0.5, 1.0]);
        assert!(rows.iter().all(|r| r.conserved));
        assert_eq!(rows[0].mean_energy, rows[2].mean_energy);
    }
}
