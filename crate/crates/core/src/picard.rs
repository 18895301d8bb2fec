//! Frozen-noise Picard iteration for the truncated SDE.
//!
//! All iterates are driven by the same realization of the dominating Poisson
//! measure. Iterate `n + 1` reads only iterate `n`:
//!
//! ```text
//! Z^{n+1}_t = Z_0 + sum_{s <= t} alpha_j(Z^n_{s-}, v, theta, phi + phi^n) 1[r <= sigma_j(Z^n_{s-}, v) f(s, X^n_s | v)]
//! X^{n+1}_t = X_0 + int_0^t Z^{n+1}_s ds
//! ```
//!
//! and the per-atom rotation accumulates as
//! `phi^{n+1} = phi^n + phi0(P Z^n_{s-}, v, P Z^{n+1}_{s-}, v)` with `phi^0 = 0`.

use rand::RngCore;
use rayon::prelude::*;
use serde::Serialize;

use crate::densities::DensityModel;
use crate::error::{Error, Result};
use crate::geometry::{tanaka_rotation, wrap_angle, Vec3};
use crate::kernels::KernelSpec;
use crate::sde_engine::{stream_rng, Atom, Majorant};
use crate::stats::MeanSe;
use crate::truncation::{alpha_j, project_j, sigma_j};

/// One realization of the dominating measure on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenNoise {
    atoms: Vec<Atom>,
    horizon: f64,
    level: f64,
    seed: u64,
}

impl FrozenNoise {
    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Noise from an explicit atom list, sorted by time.
    pub fn from_atoms(mut atoms: Vec<Atom>, horizon: f64, level: f64) -> Result<Self> {
        atoms.sort_by(|a, b| a.s.total_cmp(&b.s));
        if atoms.iter().any(|a| !(a.s >= 0.0 && a.s <= horizon)) {
            return Err(Error::invalid("atom outside [0, horizon]"));
        }
        Ok(FrozenNoise { atoms, horizon, level, seed: 0 })
    }
}

/// Draw the candidate atoms of the level-`j` majorant on `[0, horizon]`.
pub fn generate_noise(
    model: &dyn DensityModel,
    spec: &KernelSpec,
    j: f64,
    horizon: f64,
    seed: u64,
    rng: &mut dyn RngCore,
) -> Result<FrozenNoise> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::invalid(format!("horizon {horizon} must be positive")));
    }
    let mut atoms = Vec::new();
    if !spec.collisionless() {
        let maj = Majorant::new(model, spec, j, horizon, model.mean_speed_sup(horizon), 1.0)?;
        let mut t = 0.0;
        while let Some(a) = maj.next_atom(model, spec, t, horizon, rng)? {
            t = a.s;
            atoms.push(a);
        }
    }
    Ok(FrozenNoise { atoms, horizon, level: j, seed })
}

/// Iterate `n` evaluated along the atoms of its noise.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateTrajectory {
    pub n: usize,
    pub horizon: f64,
    pub x0: Vec3,
    /// `zs[0] = Z_0`; `zs[k + 1]` is the value right after atom `k`.
    pub zs: Vec<Vec3>,
    /// `X` at each atom time.
    pub xs: Vec<Vec3>,
    /// Rotation `phi^n` in use at each atom.
    pub phi_acc: Vec<f64>,
    pub accepted: Vec<bool>,
    pub atom_times: Vec<f64>,
}

impl IterateTrajectory {
    fn initial(noise: &FrozenNoise, x0: Vec3, z0: Vec3) -> Self {
        let k = noise.atoms.len();
        IterateTrajectory {
            n: 0,
            horizon: noise.horizon,
            x0,
            zs: vec![z0; k + 1],
            xs: noise.atoms.iter().map(|a| x0 + z0 * a.s).collect(),
            phi_acc: vec![0.0; k],
            accepted: vec![false; k],
            atom_times: noise.atoms.iter().map(|a| a.s).collect(),
        }
    }

    /// `X` at the horizon.
    pub fn x_final(&self) -> Vec3 {
        let (t, x) = match self.atom_times.last() {
            Some(&t) => (t, *self.xs.last().expect("xs matches atoms")),
            None => (0.0, self.x0),
        };
        x + *self.zs.last().expect("non-empty") * (self.horizon - t)
    }

    pub fn z_final(&self) -> Vec3 {
        *self.zs.last().expect("non-empty")
    }
}

/// Iterate `prev.n + 1` from `prev`.
pub fn next_iterate(
    prev: &IterateTrajectory,
    noise: &FrozenNoise,
    model: &dyn DensityModel,
    spec: &KernelSpec,
    rotate: bool,
) -> IterateTrajectory {
    let j = noise.level;
    let k_atoms = noise.atoms.len();
    let mut zs = Vec::with_capacity(k_atoms + 1);
    let mut xs = Vec::with_capacity(k_atoms);
    let mut phi_acc = Vec::with_capacity(k_atoms);
    let mut accepted = Vec::with_capacity(k_atoms);
    let mut z = prev.zs[0];
    let mut x = prev.x0;
    let mut t = 0.0;
    zs.push(z);
    for (k, a) in noise.atoms.iter().enumerate() {
        x += z * (a.s - t);
        t = a.s;
        xs.push(x);
        // acceptance and deflection read iterate n only
        let z_prev = prev.zs[k];
        let x_prev = prev.xs[k];
        let phi_n = prev.phi_acc[k];
        let acc = a.r <= sigma_j(spec, z_prev, a.v, j) * model.conditional(a.s, x_prev, a.v);
        // the rotation compares the two iterates' left limits at this atom
        let phi_next = if rotate {
            wrap_angle(phi_n + tanaka_rotation(project_j(z_prev, j), a.v, project_j(z, j), a.v))
        } else {
            0.0
        };
        if acc {
            z += alpha_j(z_prev, a.v, a.theta, wrap_angle(a.phi + phi_n), j);
        }
        zs.push(z);
        phi_acc.push(phi_next);
        accepted.push(acc);
    }
    IterateTrajectory {
        n: prev.n + 1,
        horizon: noise.horizon,
        x0: prev.x0,
        zs,
        xs,
        phi_acc,
        accepted,
        atom_times: prev.atom_times.clone(),
    }
}

/// Iterates `0..=n_iters` on one noise realization.
pub fn picard_iterate(
    noise: &FrozenNoise,
    n_iters: usize,
    model: &dyn DensityModel,
    spec: &KernelSpec,
    x0: Vec3,
    z0: Vec3,
    rotate: bool,
) -> Result<Vec<IterateTrajectory>> {
    if n_iters == 0 {
        return Err(Error::invalid("n_iters must be at least 1"));
    }
    let mut out = vec![IterateTrajectory::initial(noise, x0, z0)];
    for _ in 0..n_iters {
        let next = next_iterate(out.last().expect("non-empty"), noise, model, spec, rotate);
        out.push(next);
    }
    Ok(out)
}

/// `sup_t |Z^a_t - Z^b_t| + sup_t |X^a_t - X^b_t|` on one realization.
///
/// Both differences are piecewise constant or linear between atoms, so the
/// suprema are attained on the atom grid or at the ends.
pub fn path_distance(a: &IterateTrajectory, b: &IterateTrajectory) -> Result<f64> {
    if a.horizon != b.horizon || a.atom_times != b.atom_times {
        return Err(Error::invalid("iterates come from different noise or horizons"));
    }
    let dz = a.zs.iter().zip(&b.zs).map(|(p, q)| (*p - *q).norm()).fold(0.0, f64::max);
    let mut dx = (a.x0 - b.x0).norm();
    for (p, q) in a.xs.iter().zip(&b.xs) {
        dx = dx.max((*p - *q).norm());
    }
    dx = dx.max((a.x_final() - b.x_final()).norm());
    Ok(dz + dx)
}

/// Monte Carlo `S^1_T` distance over paired realizations.
pub fn st1_distance(pairs: &[(&IterateTrajectory, &IterateTrajectory)]) -> Result<MeanSe> {
    let d = pairs.iter().map(|(a, b)| path_distance(a, b)).collect::<Result<Vec<_>>>()?;
    Ok(MeanSe::of(&d))
}

/// Successive distances `d_n = dist(iterate n + 1, iterate n)` per realization.
#[derive(Debug, Clone, Serialize)]
pub struct PicardTable {
    /// `distances[i][n]` for realization `i`.
    pub distances: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PicardRow {
    pub n: usize,
    pub d_n: f64,
    pub stderr: f64,
}

impl PicardTable {
    pub fn rows(&self) -> Vec<PicardRow> {
        let n_cols = self.distances.first().map_or(0, |r| r.len());
        (0..n_cols)
            .map(|n| {
                let col: Vec<f64> = self.distances.iter().map(|r| r[n]).collect();
                let m = MeanSe::of(&col);
                PicardRow { n, d_n: m.mean, stderr: m.se }
            })
            .collect()
    }

    /// Paired estimate of `d_{n+1} - d_n`.
    pub fn increment(&self, n: usize) -> MeanSe {
        let diffs: Vec<f64> = self.distances.iter().map(|r| r[n + 1] - r[n]).collect();
        MeanSe::of(&diffs)
    }
}

/// Run the scheme on `n_real` independent noise realizations.
///
/// Realization `i` uses stream `i` of `seed`, first for the initial state and
/// then for the atoms.
#[allow(clippy::too_many_arguments)]
pub fn picard_ensemble<F>(
    n_real: usize,
    n_iters: usize,
    model: &dyn DensityModel,
    spec: &KernelSpec,
    j: f64,
    horizon: f64,
    seed: u64,
    rotate: bool,
    init: F,
) -> Result<PicardTable>
where
    F: Fn(&mut dyn RngCore) -> (Vec3, Vec3) + Sync,
{
    let distances = (0..n_real)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let (x0, z0) = init(&mut rng);
            let noise = generate_noise(model, spec, j, horizon, seed, &mut rng)?;
            let its = picard_iterate(&noise, n_iters, model, spec, x0, z0, rotate)?;
            its.windows(2).map(|w| path_distance(&w[1], &w[0])).collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PicardTable { distances })
}
