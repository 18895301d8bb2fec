//! Event-driven simulation of the truncated jump SDE.
//!
//! Candidate atoms `(s, v, theta, phi, r)` come from a dominating Poisson
//! measure restricted to `r <= R(v)`, where `R(v) >= sigma_j(Z, v) f(s, X | v)`
//! for every reachable state. An atom is accepted when
//! `r <= sigma_j(Z_{s-}, v) f(s, X_s | v)`, which realizes the compensator
//! `m(s, v) dv Q(dtheta) dphi ds dr` exactly.
//!
//! `R(v) = slack c F (k0 + k1 |v|)` with `F` a uniform bound on `f(s, x | v)`
//! and `k0 + k1 |v| >= |P_j z - v|^gamma`. Integrated against `m(s, v) dv`, the
//! candidate rate is `2 pi Q([eps, pi]) slack c F (k0 + k1 E_s|v|)`, so `v` is
//! drawn from a mixture of `m` and its speed-biased version.

use std::f64::consts::TAU;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::densities::DensityModel;
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::kernels::{self, KernelSpec};
use crate::truncation::{alpha_j, sigma_j};

/// How often the time-dependent part of the majorant is recomputed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateRefresh {
    /// After every accepted jump, over the remaining horizon.
    PerJump,
    /// On a fixed grid of windows of the given length.
    PerWindow(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub horizon: f64,
    pub j0: f64,
    /// Level increment on escalation; zero keeps the level fixed.
    pub j_step: f64,
    pub seed: u64,
    pub max_events: usize,
    pub rate_refresh: RateRefresh,
    /// Factor `>= 1` inflating the dominating measure.
    pub majorant_slack: f64,
    pub record_events: bool,
}

impl SimConfig {
    pub fn new(horizon: f64, j0: f64, seed: u64) -> Self {
        SimConfig {
            horizon,
            j0,
            j_step: 1.0,
            seed,
            max_events: 10_000_000,
            rate_refresh: RateRefresh::PerJump,
            majorant_slack: 1.0,
            record_events: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidConfig(format!("horizon: {} must be positive", self.horizon)));
        }
        if !(self.j0 > 0.0 && self.j0.is_finite()) {
            return Err(Error::InvalidConfig(format!("j0: {} must be positive", self.j0)));
        }
        if !(self.j_step >= 0.0 && self.j_step.is_finite()) {
            return Err(Error::InvalidConfig(format!("j_step: {} must be nonnegative", self.j_step)));
        }
        if self.max_events == 0 {
            return Err(Error::InvalidConfig("max_events: must be positive".into()));
        }
        if let RateRefresh::PerWindow(dt) = self.rate_refresh {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(Error::InvalidConfig(format!("rate_refresh: window {dt} must be positive")));
            }
        }
        if !(self.majorant_slack >= 1.0 && self.majorant_slack.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "majorant_slack: {} must be at least 1",
                self.majorant_slack
            )));
        }
        Ok(())
    }
}

/// One atom of the dominating Poisson measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub s: f64,
    pub v: Vec3,
    pub theta: f64,
    pub phi: f64,
    pub r: f64,
}

/// A proposed event and its thinning decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub s: f64,
    pub v: Vec3,
    pub theta: f64,
    pub phi: f64,
    pub r: f64,
    pub accepted: bool,
    pub level: f64,
}

/// Live state of a single trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryState {
    pub t: f64,
    pub x: Vec3,
    pub z: Vec3,
    pub level: f64,
    pub events_accepted: usize,
    pub events_proposed: usize,
}

/// Jump-time record of a path: `Z` is constant on `[times[k], times[k+1])`
/// and `X` is linear there.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub horizon: f64,
    pub times: Vec<f64>,
    pub xs: Vec<Vec3>,
    pub zs: Vec<Vec3>,
    /// `(time, new level)` at each escalation.
    pub escalations: Vec<(f64, f64)>,
    pub events_accepted: usize,
    pub events_proposed: usize,
    /// Set when `max_events` stopped the run early.
    pub truncated: bool,
}

impl Trajectory {
    fn segment(&self, t: f64) -> usize {
        match self.times.partition_point(|&s| s <= t) {
            0 => 0,
            k => k - 1,
        }
    }

    /// `Z_t` (right-continuous).
    pub fn z_at(&self, t: f64) -> Vec3 {
        self.zs[self.segment(t)]
    }

    /// `X_t` from the piecewise-linear path.
    pub fn x_at(&self, t: f64) -> Vec3 {
        let k = self.segment(t);
        self.xs[k] + self.zs[k] * (t - self.times[k])
    }

    pub fn x_final(&self) -> Vec3 {
        self.x_at(self.horizon)
    }

    pub fn z_final(&self) -> Vec3 {
        *self.zs.last().expect("non-empty path")
    }

    /// `sup_t |Z_t|`.
    pub fn sup_speed(&self) -> f64 {
        self.zs.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Jump times together with a uniform grid of `n + 1` points on `[0, T]`,
    /// sorted, with `(t, X_t, Z_t)`.
    pub fn sample_rows(&self, n: usize) -> Vec<(f64, Vec3, Vec3)> {
        let mut ts: Vec<f64> = (0..=n).map(|k| self.horizon * k as f64 / n.max(1) as f64).collect();
        ts.extend_from_slice(&self.times);
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        ts.into_iter().map(|t| (t, self.x_at(t), self.z_at(t))).collect()
    }
}

/// Dominating measure at a fixed truncation level.
#[derive(Debug, Clone, Copy)]
pub struct Majorant {
    level: f64,
    q_mass: f64,
    scale: f64,
    kappa0: f64,
    kappa1: f64,
    e_bar: f64,
}

impl Majorant {
    /// Majorant at `level` with `E|v|` bounded by `e_bar` on the flight window.
    pub fn new(model: &dyn DensityModel, spec: &KernelSpec, level: f64, horizon: f64, e_bar: f64, slack: f64) -> Result<Self> {
        let g = spec.gamma();
        if g < 0.0 {
            return Err(Error::UnsupportedModel(format!(
                "gamma = {g}: sigma is unbounded near zero relative velocity"
            )));
        }
        let q_mass = if spec.collisionless() { 0.0 } else { kernels::angular_mass(spec)? };
        let f_bar = model.conditional_sup_all(horizon).ok_or_else(|| {
            Error::UnsupportedModel(format!("{} has no uniform bound on f(t, x | v)", model.name()))
        })?;
        let (kappa0, kappa1) = if g == 0.0 {
            (1.0, 0.0)
        } else if g == 1.0 {
            (level, 1.0)
        } else {
            // (a + |v|)^g <= max(1, a + |v|) <= max(1, a) + |v|
            (level.max(1.0), 1.0)
        };
        let m = Majorant { level, q_mass, scale: slack * spec.c() * f_bar, kappa0, kappa1, e_bar };
        let rate = m.rate();
        if !rate.is_finite() {
            return Err(Error::ModelBound(format!("majorant rate {rate} is not finite")));
        }
        Ok(m)
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    /// Total candidate rate.
    pub fn rate(&self) -> f64 {
        TAU * self.q_mass * self.scale * (self.kappa0 + self.kappa1 * self.e_bar)
    }

    /// Height `R(v)` of the dominating region in the `r` coordinate.
    #[inline]
    pub fn bound_r(&self, v: Vec3) -> f64 {
        self.scale * (self.kappa0 + self.kappa1 * v.norm())
    }

    /// Next candidate atom after time `t`, or `None` past `until`.
    pub fn next_atom(&self, model: &dyn DensityModel, spec: &KernelSpec, mut t: f64, until: f64, rng: &mut dyn RngCore) -> Result<Option<Atom>> {
        let rate = self.rate();
        if rate <= 0.0 {
            return Ok(None);
        }
        let exp = Exp::new(rate).map_err(|e| Error::ModelBound(e.to_string()))?;
        loop {
            let dt: f64 = exp.sample(rng);
            t += dt;
            if t > until {
                return Ok(None);
            }
            let e_s = if self.kappa1 > 0.0 { model.mean_speed(t) } else { 0.0 };
            let full = self.kappa0 + self.kappa1 * e_s;
            let top = self.kappa0 + self.kappa1 * self.e_bar;
            if full > top * (1.0 + 1e-12) {
                return Err(Error::ModelBound(format!(
                    "mean speed {e_s} at t = {t} exceeds its bound {}",
                    self.e_bar
                )));
            }
            if full < top && rng.random::<f64>() * top >= full {
                continue;
            }
            let v = if self.kappa1 == 0.0 || rng.random::<f64>() * full < self.kappa0 {
                model.sample_velocity(t, rng)
            } else {
                model.sample_velocity_speed_biased(t, rng)
            };
            let theta = kernels::sample_theta(spec, rng.random::<f64>())?;
            let phi = rng.random::<f64>() * TAU;
            let r = rng.random::<f64>() * self.bound_r(v);
            return Ok(Some(Atom { s: t, v, theta, phi, r }));
        }
    }
}

/// Thinning threshold `sigma_j(z, v) f(s, x | v)`.
#[inline]
pub fn acceptance_threshold(model: &dyn DensityModel, spec: &KernelSpec, z: Vec3, x: Vec3, atom: &Atom, level: f64) -> f64 {
    sigma_j(spec, z, atom.v, level) * model.conditional(atom.s, x, atom.v)
}

/// Apply one atom to a state positioned at the atom time.
///
/// Returns whether the atom was accepted. The state's `x` must already be
/// `X_s`; on acceptance `z` jumps by `alpha_j(Z_{s-}, v, theta, phi)`.
pub fn process_atom(state: &mut TrajectoryState, atom: &Atom, model: &dyn DensityModel, spec: &KernelSpec) -> bool {
    state.events_proposed += 1;
    let threshold = acceptance_threshold(model, spec, state.z, state.x, atom, state.level);
    let accepted = atom.r <= threshold;
    if accepted {
        state.z += alpha_j(state.z, atom.v, atom.theta, atom.phi, state.level);
        state.events_accepted += 1;
    }
    accepted
}

/// `Lambda` at truncation level `j` for a flight window ending at `horizon`.
pub fn majorant_rate(model: &dyn DensityModel, spec: &KernelSpec, j: f64, horizon: f64) -> Result<f64> {
    if spec.collisionless() {
        return Ok(0.0);
    }
    Ok(Majorant::new(model, spec, j, horizon, model.mean_speed_sup(horizon), 1.0)?.rate())
}

fn window_end(cfg: &SimConfig, window: usize) -> f64 {
    match cfg.rate_refresh {
        RateRefresh::PerJump => cfg.horizon,
        RateRefresh::PerWindow(dt) => ((window + 1) as f64 * dt).min(cfg.horizon),
    }
}

/// Simulate one trajectory from `(x0, z0)` using `rng`.
pub fn simulate_with_rng(
    x0: Vec3,
    z0: Vec3,
    model: &dyn DensityModel,
    spec: &KernelSpec,
    cfg: &SimConfig,
    rng: &mut dyn RngCore,
) -> Result<(Trajectory, Vec<CollisionEvent>)> {
    cfg.validate()?;
    x0.ensure_finite()?;
    z0.ensure_finite()?;
    let mut st = TrajectoryState { t: 0.0, x: x0, z: z0, level: cfg.j0, events_accepted: 0, events_proposed: 0 };
    let mut path = Trajectory {
        horizon: cfg.horizon,
        times: vec![0.0],
        xs: vec![x0],
        zs: vec![z0],
        escalations: Vec::new(),
        events_accepted: 0,
        events_proposed: 0,
        truncated: false,
    };
    let mut log = Vec::new();
    escalate(&mut st, cfg, &mut path);
    if spec.collisionless() {
        return Ok((path, log));
    }
    let slack = cfg.majorant_slack;
    let mut window = 0;
    let mut until = window_end(cfg, window);
    let mut maj = Majorant::new(model, spec, st.level, cfg.horizon, model.mean_speed_sup(until), slack)?;
    loop {
        match maj.next_atom(model, spec, st.t, until, rng)? {
            None => {
                st.x += st.z * (until - st.t);
                st.t = until;
                if st.t >= cfg.horizon {
                    break;
                }
                window += 1;
                until = window_end(cfg, window);
                maj = Majorant::new(model, spec, st.level, cfg.horizon, model.mean_speed_sup(until), slack)?;
            }
            Some(atom) => {
                if st.events_proposed >= cfg.max_events {
                    path.truncated = true;
                    break;
                }
                st.x += st.z * (atom.s - st.t);
                st.t = atom.s;
                let bound = maj.bound_r(atom.v);
                let threshold = acceptance_threshold(model, spec, st.z, st.x, &atom, st.level);
                if threshold > bound * (1.0 + 1e-12) {
                    return Err(Error::ModelBound(format!(
                        "rate {threshold} above majorant {bound} at s = {}",
                        atom.s
                    )));
                }
                let level = st.level;
                let accepted = process_atom(&mut st, &atom, model, spec);
                if cfg.record_events {
                    log.push(CollisionEvent {
                        s: atom.s,
                        v: atom.v,
                        theta: atom.theta,
                        phi: atom.phi,
                        r: atom.r,
                        accepted,
                        level,
                    });
                }
                if accepted {
                    path.times.push(st.t);
                    path.xs.push(st.x);
                    path.zs.push(st.z);
                    let escalated = escalate(&mut st, cfg, &mut path);
                    if escalated || cfg.rate_refresh == RateRefresh::PerJump {
                        maj = Majorant::new(model, spec, st.level, cfg.horizon, model.mean_speed_sup(until), slack)?;
                    }
                }
            }
        }
    }
    if st.t < cfg.horizon && !path.truncated {
        st.x += st.z * (cfg.horizon - st.t);
    }
    path.events_accepted = st.events_accepted;
    path.events_proposed = st.events_proposed;
    Ok((path, log))
}

fn escalate(st: &mut TrajectoryState, cfg: &SimConfig, path: &mut Trajectory) -> bool {
    if cfg.j_step <= 0.0 {
        return false;
    }
    let norm = st.z.norm();
    if norm <= st.level {
        return false;
    }
    while st.level < norm {
        st.level += cfg.j_step;
    }
    path.escalations.push((st.t, st.level));
    true
}

/// RNG for trajectory `index` of an ensemble seeded by `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Simulate one trajectory; stream 0 of `cfg.seed`.
pub fn simulate(
    x0: Vec3,
    z0: Vec3,
    model: &dyn DensityModel,
    spec: &KernelSpec,
    cfg: &SimConfig,
) -> Result<(Trajectory, Vec<CollisionEvent>)> {
    let mut rng = stream_rng(cfg.seed, 0);
    simulate_with_rng(x0, z0, model, spec, cfg, &mut rng)
}

/// Simulate `n` independent trajectories in parallel.
///
/// Trajectory `i` draws its initial state with `init` and then runs on stream
/// `i` of `cfg.seed`; results come back in index order.
pub fn simulate_ensemble<F>(
    n: usize,
    init: F,
    model: &dyn DensityModel,
    spec: &KernelSpec,
    cfg: &SimConfig,
) -> Result<Vec<(Trajectory, Vec<CollisionEvent>)>>
where
    F: Fn(&mut dyn RngCore) -> (Vec3, Vec3) + Sync,
{
    cfg.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, i as u64);
            let (x0, z0) = init(&mut rng);
            simulate_with_rng(x0, z0, model, spec, cfg, &mut rng)
        })
        .collect()
}

/// Fraction of paths whose speed exceeds `j` before the horizon.
pub fn exit_fraction(paths: &[Trajectory], j: f64) -> f64 {
    if paths.is_empty() {
        return 0.0;
    }
    paths.iter().filter(|p| p.sup_speed() > j).count() as f64 / paths.len() as f64
}

/// Estimate `P(sup_{t <= T} |Z_t| > j)` from `n_runs` escalating runs.
pub fn exit_probability<F>(
    j: f64,
    cfg: &SimConfig,
    n_runs: usize,
    init: F,
    model: &dyn DensityModel,
    spec: &KernelSpec,
) -> Result<f64>
where
    F: Fn(&mut dyn RngCore) -> (Vec3, Vec3) + Sync,
{
    if n_runs == 0 {
        return Err(Error::invalid("n_runs must be at least 1"));
    }
    let mut c = *cfg;
    if c.j_step <= 0.0 {
        c.j_step = c.j0;
    }
    c.record_events = false;
    let runs = simulate_ensemble(n_runs, init, model, spec, &c)?;
    let paths: Vec<Trajectory> = runs.into_iter().map(|r| r.0).collect();
    Ok(exit_fraction(&paths, j))
}
