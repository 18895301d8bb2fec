//! Run configuration: TOML schema and semantic validation.

use std::path::{Path, PathBuf};

use boltzsim_core::densities::{
    BkwBoxModel, BoxMaxwellianModel, DensityModel, Drift, GaussianProductModel, MollifiedEmpiricalModel,
};
use boltzsim_core::diagnostics::QuadGrid;
use boltzsim_core::particles::PairMode;
use boltzsim_core::sde_engine::{RateRefresh, SimConfig};
use boltzsim_core::{Angular, Error, KernelSpec, Vec3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Simulate,
    Particles,
    Picard,
    CheckInvariants,
    Entropy,
    ExitProb,
    Certify,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Simulate => "simulate",
            Mode::Particles => "particles",
            Mode::Picard => "picard",
            Mode::CheckInvariants => "check_invariants",
            Mode::Entropy => "entropy",
            Mode::ExitProb => "exit_prob",
            Mode::Certify => "certify",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngularKind {
    HardSphere,
    PowerLaw,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelTable {
    pub gamma: f64,
    pub c: f64,
    pub angular: AngularKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
    #[serde(default)]
    pub epsilon: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelTable {
    GaussianProduct {
        vel_var: f64,
        pos_var: f64,
        #[serde(default = "default_drift")]
        drift: Drift,
    },
    BoxMaxwellian {
        box_side: f64,
        vel_var: f64,
    },
    Bkw {
        box_side: f64,
        temperature: f64,
        k0: f64,
    },
    Empirical {
        path: PathBuf,
        h_x: f64,
        h_v: f64,
        #[serde(default)]
        box_side: Option<f64>,
    },
}

fn default_drift() -> Drift {
    Drift::Static
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    pub x: [f64; 3],
    pub z: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimTable {
    pub horizon: f64,
    pub j0: f64,
    #[serde(default = "one")]
    pub j_step: f64,
    #[serde(default = "default_max_events")]
    pub max_events: usize,
    #[serde(default = "default_refresh")]
    pub rate_refresh: RateRefresh,
    #[serde(default = "one")]
    pub majorant_slack: f64,
    #[serde(default)]
    pub record_events: bool,
    #[serde(default = "one_usize")]
    pub trajectories: usize,
    /// Fixed initial state; drawn from the model at time 0 when absent.
    #[serde(default)]
    pub initial: Option<InitialState>,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

fn default_max_events() -> usize {
    10_000_000
}

fn default_refresh() -> RateRefresh {
    RateRefresh::PerJump
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticlesTable {
    #[serde(alias = "N")]
    pub n: usize,
    pub h_x: f64,
    /// Defaults to `n^(-1/7)`.
    #[serde(default)]
    pub h_v: Option<f64>,
    pub dt: f64,
    pub steps: usize,
    #[serde(default = "default_pair_mode")]
    pub mode: PairModeName,
    pub box_side: f64,
    #[serde(default = "one")]
    pub vel_var: f64,
    #[serde(default)]
    pub level: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairModeName {
    OneSided,
    SymmetricPair,
}

fn default_pair_mode() -> PairModeName {
    PairModeName::OneSided
}

impl From<PairModeName> for PairMode {
    fn from(m: PairModeName) -> Self {
        match m {
            PairModeName::OneSided => PairMode::OneSided,
            PairModeName::SymmetricPair => PairMode::SymmetricPair,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PicardTable {
    pub realizations: usize,
    pub iterations: usize,
    pub level: f64,
    #[serde(default = "yes")]
    pub rotate: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridTable {
    pub n_x: usize,
    pub n_v: usize,
    pub n_theta: usize,
    pub n_phi: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsTable {
    #[serde(default)]
    pub time: f64,
    #[serde(default)]
    pub grid: Option<GridTable>,
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default)]
    pub bandwidth: Option<f64>,
    #[serde(default)]
    pub velocity_only: Option<bool>,
    #[serde(default)]
    pub levels: Option<Vec<f64>>,
    #[serde(default)]
    pub runs: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub output_times: Option<Vec<f64>>,
    pub kernel: KernelTable,
    pub model: ModelTable,
    #[serde(default)]
    pub sim: Option<SimTable>,
    #[serde(default)]
    pub particles: Option<ParticlesTable>,
    #[serde(default)]
    pub picard: Option<PicardTable>,
    #[serde(default)]
    pub diagnostics: Option<DiagnosticsTable>,
}

/// A configuration that passed validation, with its objects built.
#[derive(Debug)]
pub struct Validated {
    pub config: RunConfig,
    pub kernel: KernelSpec,
    pub model: Box<dyn DensityModel>,
    pub sim: Option<SimConfig>,
}

fn field_error(prefix: &str, e: Error) -> String {
    match e {
        Error::InvalidConfig(m) => format!("{prefix}.{m}"),
        other => format!("{prefix}: {other}"),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<RunConfig, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        RunConfig::parse(&text)
    }

    pub fn kernel_spec(&self) -> Result<KernelSpec, String> {
        let k = &self.kernel;
        let angular = match (k.angular, k.nu) {
            (AngularKind::HardSphere, None) => Angular::HardSphere,
            (AngularKind::HardSphere, Some(_)) => return Err("kernel.nu: only meaningful for power_law".into()),
            (AngularKind::PowerLaw, Some(nu)) => Angular::PowerLaw { nu },
            (AngularKind::PowerLaw, None) => return Err("kernel.nu: required for power_law".into()),
        };
        KernelSpec::new(k.gamma, k.c, angular, k.epsilon).map_err(|e| field_error("kernel", e))
    }

    fn build_model(&self, spec: &KernelSpec) -> Result<Box<dyn DensityModel>, String> {
        let m: Box<dyn DensityModel> = match &self.model {
            ModelTable::GaussianProduct { vel_var, pos_var, drift } => {
                Box::new(GaussianProductModel::new(*vel_var, *pos_var, *drift).map_err(|e| field_error("model", e))?)
            }
            ModelTable::BoxMaxwellian { box_side, vel_var } => {
                Box::new(BoxMaxwellianModel::new(*box_side, *vel_var).map_err(|e| field_error("model", e))?)
            }
            ModelTable::Bkw { box_side, temperature, k0 } => {
                Box::new(BkwBoxModel::new(*box_side, *temperature, *k0, spec).map_err(|e| field_error("model", e))?)
            }
            ModelTable::Empirical { path, h_x, h_v, box_side } => Box::new(
                MollifiedEmpiricalModel::from_csv(path, *h_x, *h_v, *box_side).map_err(|e| field_error("model", e))?,
            ),
        };
        Ok(m)
    }

    fn sim_config(&self, s: &SimTable) -> Result<SimConfig, String> {
        let cfg = SimConfig {
            horizon: s.horizon,
            j0: s.j0,
            j_step: s.j_step,
            seed: self.seed,
            max_events: s.max_events,
            rate_refresh: s.rate_refresh,
            majorant_slack: s.majorant_slack,
            record_events: s.record_events,
        };
        cfg.validate().map_err(|e| field_error("sim", e))?;
        Ok(cfg)
    }

    /// Output times: the configured list, or 11 points over the horizon.
    pub fn times(&self, horizon: f64) -> Vec<f64> {
        match &self.output_times {
            Some(t) => t.clone(),
            None => (0..=10).map(|k| horizon * k as f64 / 10.0).collect(),
        }
    }

    pub fn quad_grid(&self) -> QuadGrid {
        match self.diagnostics.as_ref().and_then(|d| d.grid.as_ref()) {
            Some(g) => QuadGrid { n_x: g.n_x, n_v: g.n_v, n_theta: g.n_theta, n_phi: g.n_phi },
            None => QuadGrid::default(),
        }
    }

    /// Check every field and build the engine objects. All violations are
    /// reported together, each prefixed with its path in the file.
    pub fn validate(self) -> Result<Validated, Vec<String>> {
        let mut errs = Vec::new();
        let kernel = self.kernel_spec().map_err(|e| errs.push(e)).ok();
        let model = kernel.as_ref().and_then(|k| self.build_model(k).map_err(|e| errs.push(e)).ok());
        let sim = self.sim.as_ref().and_then(|s| self.sim_config(s).map_err(|e| errs.push(e)).ok());

        let needs_sim = matches!(
            self.mode,
            Mode::Simulate | Mode::Picard | Mode::Entropy | Mode::ExitProb | Mode::Certify
        );
        if needs_sim && self.sim.is_none() {
            errs.push(format!("sim: required for mode {}", self.mode.name()));
        }
        if let Some(s) = &self.sim {
            if s.trajectories == 0 {
                errs.push("sim.trajectories: must be at least 1".into());
            }
            if let Some(init) = &s.initial {
                if init.x.iter().chain(&init.z).any(|c| !c.is_finite()) {
                    errs.push("sim.initial: components must be finite".into());
                }
            }
        }
        let horizon = match self.mode {
            Mode::Particles => self.particles.as_ref().map(|p| p.dt * p.steps as f64),
            _ => self.sim.as_ref().map(|s| s.horizon),
        };
        if let (Some(times), Some(h)) = (&self.output_times, horizon) {
            if times.is_empty() {
                errs.push("output_times: must not be empty".into());
            }
            if times.iter().any(|t| !(0.0..=h).contains(t)) {
                errs.push(format!("output_times: every time must lie in [0, {h}]"));
            }
            if times.windows(2).any(|w| w[1] <= w[0]) {
                errs.push("output_times: must be strictly increasing".into());
            }
        }
        match self.mode {
            Mode::Particles => match &self.particles {
                None => errs.push("particles: required for mode particles".into()),
                Some(p) => {
                    if p.n < 2 {
                        errs.push(format!("particles.n: {} particles, need at least 2", p.n));
                    }
                    if !(p.dt > 0.0 && p.dt.is_finite()) {
                        errs.push(format!("particles.dt: {} must be positive", p.dt));
                    }
                    if p.steps == 0 {
                        errs.push("particles.steps: must be at least 1".into());
                    }
                    if !(p.box_side > 0.0 && p.box_side.is_finite()) {
                        errs.push(format!("particles.box_side: {} must be positive", p.box_side));
                    }
                    if !(p.h_x > 0.0 && p.h_x.is_finite()) {
                        errs.push(format!("particles.h_x: {} must be positive", p.h_x));
                    }
                    if let Some(h) = p.h_v {
                        if !(h >= 0.0 && h.is_finite()) || (p.mode == PairModeName::OneSided && h == 0.0) {
                            errs.push(format!("particles.h_v: {h} must be positive"));
                        }
                    }
                    if !(p.vel_var > 0.0 && p.vel_var.is_finite()) {
                        errs.push(format!("particles.vel_var: {} must be positive", p.vel_var));
                    }
                    if let Some(l) = p.level {
                        if !(l > 0.0 && l.is_finite()) {
                            errs.push(format!("particles.level: {l} must be positive"));
                        }
                    }
                    if kernel.is_some_and(|k| k.gamma() < 0.0) {
                        errs.push("kernel.gamma: the particle mode needs gamma >= 0".into());
                    }
                }
            },
            Mode::Picard => match &self.picard {
                None => errs.push("picard: required for mode picard".into()),
                Some(p) => {
                    if p.realizations < 2 {
                        errs.push("picard.realizations: need at least 2".into());
                    }
                    if p.iterations < 1 {
                        errs.push("picard.iterations: need at least 1".into());
                    }
                    if !(p.level > 0.0 && p.level.is_finite()) {
                        errs.push(format!("picard.level: {} must be positive", p.level));
                    }
                }
            },
            Mode::CheckInvariants => {
                let g = self.quad_grid();
                if g.n_x == 0 || g.n_v == 0 || g.n_theta == 0 || g.n_phi < 2 {
                    errs.push("diagnostics.grid: sizes must be positive (n_phi at least 2)".into());
                }
                let t = self.diagnostics.as_ref().map_or(0.0, |d| d.time);
                if !(t >= 0.0 && t.is_finite()) {
                    errs.push(format!("diagnostics.time: {t} must be nonnegative"));
                }
            }
            Mode::Entropy => {
                let d = self.diagnostics.clone().unwrap_or_default();
                if d.samples.is_some_and(|n| n < 2) {
                    errs.push("diagnostics.samples: need at least 2".into());
                }
                if d.bandwidth.is_some_and(|h| !(h > 0.0 && h.is_finite())) {
                    errs.push("diagnostics.bandwidth: must be positive".into());
                }
            }
            Mode::ExitProb => {
                let d = self.diagnostics.clone().unwrap_or_default();
                match &d.levels {
                    None => errs.push("diagnostics.levels: required for mode exit_prob".into()),
                    Some(l) if l.is_empty() || l.iter().any(|j| !(*j > 0.0 && j.is_finite())) => {
                        errs.push("diagnostics.levels: must be a nonempty list of positive levels".into())
                    }
                    _ => {}
                }
                if d.runs == Some(0) {
                    errs.push("diagnostics.runs: must be at least 1".into());
                }
            }
            Mode::Simulate | Mode::Certify => {}
        }
        match (errs.is_empty(), kernel, model) {
            (true, Some(kernel), Some(model)) => Ok(Validated { config: self, kernel, model, sim }),
            _ => Err(errs),
        }
    }
}

impl InitialState {
    pub fn vectors(&self) -> (Vec3, Vec3) {
        (Vec3::from(self.x), Vec3::from(self.z))
    }
}
