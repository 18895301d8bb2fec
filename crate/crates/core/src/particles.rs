//! Mean-field particle system on a periodic box.
//!
//! Each particle collides against the leave-one-out mollified empirical
//! density of the others. In `OneSided` mode only the tagged particle is
//! deflected, mirroring the SDE where `f` is external; `SymmetricPair` also
//! updates the partner and conserves momentum and energy pathwise.
//!
//! Time stepping: per substep of length `tau`, particle `i` picks a partner
//! `k` uniformly, a partner velocity `v = v_k + h_v xi` (exactly `v_k` in
//! symmetric mode) and an angle `theta ~ Q`, and accepts with probability
//! `tau 2 pi Q([eps, pi]) K_x(x_i - x_k) sigma(|v_i - v|)`, halved in symmetric
//! mode. Substeps are chosen so this probability stays below 0.1.

use std::f64::consts::TAU;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::densities::{wrap_position, DensityModel, MollifiedEmpiricalModel, PeriodicGaussian};
use crate::error::{Error, Result};
use crate::geometry::{deflection_alpha, Vec3};
use crate::kernels::{self, KernelSpec};
use crate::truncation::alpha_j;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    OneSided,
    SymmetricPair,
}

#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    pub states: Vec<(Vec3, Vec3)>,
    pub t: f64,
    pub h_x: f64,
    pub h_v: f64,
    pub box_side: f64,
    pub mode: PairMode,
    /// Optional truncation level for the deflection.
    pub level: Option<f64>,
}

/// Counters from one call to [`step_ensemble`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StepStats {
    pub substeps: usize,
    pub proposals: usize,
    pub accepted: usize,
    /// Proposals whose acceptance probability exceeded one and was clamped.
    pub clamped: usize,
}

/// Bandwidth schedule `N^(-1/7)`.
pub fn default_bandwidth(n: usize) -> f64 {
    (n as f64).powf(-1.0 / 7.0)
}

impl ParticleEnsemble {
    pub fn new(states: Vec<(Vec3, Vec3)>, h_x: f64, h_v: f64, box_side: f64, mode: PairMode) -> Result<Self> {
        if states.len() < 2 {
            return Err(Error::InvalidConfig(format!("N: {} particles, need at least 2", states.len())));
        }
        if !(box_side > 0.0 && box_side.is_finite()) {
            return Err(Error::InvalidConfig(format!("box_side: {box_side} must be positive")));
        }
        if !(h_x > 0.0 && h_x.is_finite()) {
            return Err(Error::InvalidConfig(format!("h_x: {h_x} must be positive")));
        }
        if !(h_v >= 0.0 && h_v.is_finite()) || (mode == PairMode::OneSided && h_v == 0.0) {
            return Err(Error::InvalidConfig(format!("h_v: {h_v} must be positive")));
        }
        for (x, v) in &states {
            x.ensure_finite()?;
            v.ensure_finite()?;
        }
        let states = states.into_iter().map(|(x, v)| (wrap_position(x, box_side), v)).collect();
        Ok(ParticleEnsemble { states, t: 0.0, h_x, h_v, box_side, mode, level: None })
    }

    /// `n` particles drawn from `model` at time 0.
    pub fn sample(
        model: &dyn DensityModel,
        n: usize,
        h_x: f64,
        h_v: f64,
        box_side: f64,
        mode: PairMode,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let states = (0..n).map(|_| model.sample_state(0.0, rng)).collect();
        ParticleEnsemble::new(states, h_x, h_v, box_side, mode)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn total_momentum(&self) -> Vec3 {
        self.states.iter().fold(Vec3::ZERO, |a, (_, v)| a + *v)
    }

    pub fn total_energy(&self) -> f64 {
        self.states.iter().map(|(_, v)| v.norm_sq()).sum()
    }

    /// Mean `|v|^2` per particle.
    pub fn mean_energy(&self) -> f64 {
        self.total_energy() / self.len() as f64
    }

    /// Mollified empirical density of the current ensemble.
    pub fn empirical_model(&self) -> Result<MollifiedEmpiricalModel> {
        MollifiedEmpiricalModel::new(self.states.clone(), self.h_x, self.h_v.max(1e-12), Some(self.box_side))
    }

    fn deflect(&self, z: Vec3, v: Vec3, theta: f64, phi: f64) -> Vec3 {
        match self.level {
            Some(j) => alpha_j(z, v, theta, phi, j),
            None => deflection_alpha(z, v, theta, phi),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Proposal {
    partner: usize,
    theta: f64,
    phi: f64,
    v: Vec3,
    accept: bool,
    clamped: bool,
}

/// Advance the ensemble by `dt`.
pub fn step_ensemble(ens: &mut ParticleEnsemble, spec: &KernelSpec, dt: f64, rng: &mut dyn RngCore) -> Result<StepStats> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid(format!("dt = {dt} must be positive")));
    }
    if spec.gamma() < 0.0 {
        return Err(Error::UnsupportedModel(format!("gamma = {} not supported by the particle system", spec.gamma())));
    }
    let n = ens.len();
    let q_mass = if spec.collisionless() { 0.0 } else { kernels::angular_mass(spec)? };
    let kx = PeriodicGaussian::new(ens.h_x, Some(ens.box_side));
    let sym = ens.mode == PairMode::SymmetricPair;
    let factor = if sym { 0.5 } else { 1.0 };
    let vmax = ens.states.iter().map(|(_, v)| v.norm()).fold(0.0, f64::max);
    let sigma_max = spec.sigma_unchecked(2.0 * vmax + 4.0 * ens.h_v);
    let lambda_bound = factor * TAU * q_mass * kx.max() * sigma_max;
    let n_sub = ((dt * lambda_bound / 0.1).ceil() as usize).max(1);
    let tau = dt / n_sub as f64;
    let mut stats = StepStats { substeps: n_sub, ..StepStats::default() };
    for _ in 0..n_sub {
        for (x, v) in ens.states.iter_mut() {
            *x = wrap_position(*x + *v * tau, ens.box_side);
        }
        ens.t += tau;
        if q_mass == 0.0 {
            continue;
        }
        let sub_seed: u64 = rng.random();
        let snap = &ens.states;
        let h_v = if sym { 0.0 } else { ens.h_v };
        let proposals: Vec<Proposal> = (0..n)
            .into_par_iter()
            .map(|i| -> Result<Proposal> {
                let mut r = ChaCha8Rng::seed_from_u64(sub_seed);
                r.set_stream(i as u64);
                let mut k = r.random_range(0..n - 1);
                if k >= i {
                    k += 1;
                }
                let a: f64 = StandardNormal.sample(&mut r);
                let b: f64 = StandardNormal.sample(&mut r);
                let c: f64 = StandardNormal.sample(&mut r);
                let xi = Vec3::new(a, b, c);
                let theta = kernels::sample_theta(spec, r.random::<f64>())?;
                let phi = r.random::<f64>() * TAU;
                let (xi_pos, vi) = snap[i];
                let (xk, vk) = snap[k];
                let v = vk + xi * h_v;
                let q = tau * factor * TAU * q_mass * kx.eval(xi_pos - xk) * spec.sigma_unchecked((vi - v).norm());
                let u: f64 = r.random();
                Ok(Proposal { partner: k, theta, phi, v, accept: u < q, clamped: q > 1.0 })
            })
            .collect::<Result<Vec<_>>>()?;
        for (i, p) in proposals.iter().enumerate() {
            stats.proposals += 1;
            stats.clamped += p.clamped as usize;
            if !p.accept {
                continue;
            }
            stats.accepted += 1;
            let vi = ens.states[i].1;
            if sym {
                let vk = ens.states[p.partner].1;
                let a = ens.deflect(vi, vk, p.theta, p.phi);
                ens.states[i].1 = vi + a;
                ens.states[p.partner].1 = vk - a;
            } else {
                // partner velocity as proposed from the snapshot
                ens.states[i].1 = vi + ens.deflect(vi, p.v, p.theta, p.phi);
            }
        }
    }
    Ok(stats)
}

/// Run `n_steps` steps of size `dt`, calling `observe` after each.
pub fn run_particles<F>(
    ens: &mut ParticleEnsemble,
    spec: &KernelSpec,
    dt: f64,
    n_steps: usize,
    rng: &mut dyn RngCore,
    mut observe: F,
) -> Result<StepStats>
where
    F: FnMut(&ParticleEnsemble),
{
    let mut total = StepStats::default();
    for _ in 0..n_steps {
        let s = step_ensemble(ens, spec, dt, rng)?;
        total.substeps += s.substeps;
        total.proposals += s.proposals;
        total.accepted += s.accepted;
        total.clamped += s.clamped;
        observe(ens);
    }
    Ok(total)
}

/// Expected drift of the mean energy under one-sided collisions:
/// `-(1/N) sum_i (1/(N-1)) sum_{k != i} K_x(x_i - x_k) E_xi[(|v_i|^2 - |v|^2) sigma(|v_i - v|)] 2 pi int sin^2(theta/2) Q`,
/// with `v = v_k + h_v xi` and the Gaussian average done by tensor quadrature.
pub fn energy_drift_rate(ens: &ParticleEnsemble, spec: &KernelSpec, n_gh: usize) -> Result<f64> {
    if spec.collisionless() {
        return Ok(0.0);
    }
    let s2 = kernels::sin2_half_moment(spec)?;
    let kx = PeriodicGaussian::new(ens.h_x, Some(ens.box_side));
    let h_v = if ens.mode == PairMode::SymmetricPair { 0.0 } else { ens.h_v };
    let rule = crate::quadrature::gaussian_rule_3d(n_gh, [0.0; 3], 1.0);
    let n = ens.len();
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let (xi, vi) = ens.states[i];
            let mut acc = 0.0;
            for (k, &(xk, vk)) in ens.states.iter().enumerate() {
                if k == i {
                    continue;
                }
                let w = kx.eval(xi - xk);
                let inner: f64 = rule
                    .iter()
                    .map(|(p, wq)| {
                        let v = vk + Vec3::from(*p) * h_v;
                        wq * (vi.norm_sq() - v.norm_sq()) * spec.sigma_unchecked((vi - v).norm())
                    })
                    .sum();
                acc += w * inner;
            }
            acc / (n - 1) as f64
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    Ok(-TAU * s2 * total / n as f64)
}

/// Uniform positions on the box and `N(0, vel_var)` velocities.
pub fn maxwellian_states(n: usize, box_side: f64, vel_var: f64, rng: &mut dyn RngCore) -> Vec<(Vec3, Vec3)> {
    let sd = vel_var.sqrt();
    (0..n)
        .map(|_| {
            let x = Vec3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()) * box_side;
            let a: f64 = StandardNormal.sample(rng);
            let b: f64 = StandardNormal.sample(rng);
            let c: f64 = StandardNormal.sample(rng);
            (x, Vec3::new(a, b, c) * sd)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Angular;
    use std::f64::consts::PI;

    fn hs(eps: f64) -> KernelSpec {
        KernelSpec::new(1.0, 1.0, Angular::HardSphere, eps).unwrap()
    }

    #[test]
    fn collisionless_is_free_streaming() {
        let states = vec![
            (Vec3::new(0.1, 0.1, 0.1), Vec3::new(0.2, 0.0, 0.0)),
            (Vec3::new(0.5, 0.5, 0.5), Vec3::new(0.0, -0.3, 0.0)),
        ];
        let mut ens = ParticleEnsemble::new(states, 0.2, 0.1, 1.0, PairMode::OneSided).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = step_ensemble(&mut ens, &hs(PI), 1.0, &mut rng).unwrap();
        assert_eq!(s.accepted, 0);
        assert!((ens.states[0].0 - Vec3::new(0.3, 0.1, 0.1)).norm() < 1e-15);
        assert!((ens.states[1].0 - Vec3::new(0.5, 0.2, 0.5)).norm() < 1e-15);
        assert_eq!(ens.states[1].1, Vec3::new(0.0, -0.3, 0.0));
    }

    #[test]
    fn symmetric_mode_conserves() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let states = maxwellian_states(200, 1.0, 1.0, &mut rng);
        let mut ens = ParticleEnsemble::new(states, 0.3, 0.0, 1.0, PairMode::SymmetricPair).unwrap();
        let p0 = ens.total_momentum();
        let e0 = ens.total_energy();
        let stats = run_particles(&mut ens, &hs(0.0), 0.05, 40, &mut rng, |_| {}).unwrap();
        assert!(stats.accepted > 100);
        assert!((ens.total_momentum() - p0).norm() < 1e-12 * e0);
        assert!((ens.total_energy() - e0).abs() < 1e-12 * e0);
    }

    #[test]
    fn invalid_configs() {
        let s = vec![(Vec3::ZERO, Vec3::ZERO)];
        assert!(ParticleEnsemble::new(s.clone(), 0.1, 0.1, 1.0, PairMode::OneSided).is_err());
        let s2 = vec![(Vec3::ZERO, Vec3::ZERO); 2];
        assert!(ParticleEnsemble::new(s2.clone(), 0.0, 0.1, 1.0, PairMode::OneSided).is_err());
        assert!(ParticleEnsemble::new(s2, 0.1, 0.0, 1.0, PairMode::OneSided).is_err());
    }

    #[test]
    fn step_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let states = maxwellian_states(50, 1.0, 1.0, &mut rng);
        let mut a = ParticleEnsemble::new(states.clone(), 0.3, 0.1, 1.0, PairMode::OneSided).unwrap();
        let mut b = ParticleEnsemble::new(states, 0.3, 0.1, 1.0, PairMode::OneSided).unwrap();
        step_ensemble(&mut a, &hs(0.0), 0.2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        step_ensemble(&mut b, &hs(0.0), 0.2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.states, b.states);
        assert!(default_bandwidth(1000) > 0.37 && default_bandwidth(1000) < 0.38);
    }
}
