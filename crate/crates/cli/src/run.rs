//! Execution of each run mode.

use anyhow::{bail, Context, Result};
use boltzsim_core::densities::{certify_hypotheses, DensityModel};
use boltzsim_core::diagnostics::{collision_invariant_residual, moment_report, relative_entropy, TestFunction};
use boltzsim_core::particles::{default_bandwidth, maxwellian_states, run_particles, ParticleEnsemble};
use boltzsim_core::picard::picard_ensemble;
use boltzsim_core::sde_engine::{exit_fraction, simulate_ensemble, stream_rng, SimConfig, Trajectory};
use boltzsim_core::{KernelSpec, Vec3};
use serde::Serialize;
use serde_json::json;

use crate::config::{Mode, RunConfig, Validated};
use crate::output::{hex_digest, OutputDir};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    fn of(ok: bool) -> Verdict {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }
}

/// One entry of a JSON report.
#[derive(Debug, Serialize)]
pub struct Report {
    pub operation: String,
    pub inputs_digest: String,
    pub value: f64,
    pub stderr: f64,
    pub tolerance: Option<f64>,
    pub verdict: Verdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub details: Option<serde_json::Value>,
}

pub struct Outcome {
    pub verdict: Verdict,
}

fn config_digest(cfg: &RunConfig) -> Result<String> {
    Ok(hex_digest(&serde_json::to_vec(cfg)?))
}

fn report(digest: &str, operation: String, value: f64, stderr: f64, tolerance: Option<f64>, ok: bool) -> Report {
    let inputs_digest = hex_digest(format!("{digest}:{operation}").as_bytes());
    Report { operation, inputs_digest, value, stderr, tolerance, verdict: Verdict::of(ok), details: None }
}

fn sim_of(v: &Validated) -> Result<SimConfig> {
    v.sim.context("sim section missing")
}

fn ensemble(v: &Validated, cfg: &SimConfig, n: usize) -> Result<Vec<(Trajectory, Vec<boltzsim_core::sde_engine::CollisionEvent>)>> {
    let model: &dyn DensityModel = v.model.as_ref();
    let fixed = v.config.sim.as_ref().and_then(|s| s.initial.as_ref()).map(|i| i.vectors());
    let runs = simulate_ensemble(
        n,
        |rng| match fixed {
            Some(state) => state,
            None => model.sample_state(0.0, rng),
        },
        model,
        &v.kernel,
        cfg,
    )?;
    let truncated = runs.iter().filter(|r| r.0.truncated).count();
    if truncated > 0 {
        bail!("{truncated} trajectories hit sim.max_events before the horizon");
    }
    Ok(runs)
}

fn csv_bytes<F>(header: &[&str], fill: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<()>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    fill(&mut w)?;
    Ok(w.into_inner().map_err(|e| anyhow::anyhow!(e.to_string()))?)
}

fn vec_fields(v: Vec3) -> [String; 3] {
    [v.x.to_string(), v.y.to_string(), v.z.to_string()]
}

pub fn execute(v: &Validated, out: &mut OutputDir) -> Result<Outcome> {
    let digest = config_digest(&v.config)?;
    let verdict = match v.config.mode {
        Mode::Simulate => simulate(v, out)?,
        Mode::Particles => particles(v, out)?,
        Mode::Picard => picard(v, out, &digest)?,
        Mode::CheckInvariants => check_invariants(v, out, &digest)?,
        Mode::Entropy => entropy(v, out, &digest)?,
        Mode::ExitProb => exit_prob(v, out, &digest)?,
        Mode::Certify => certify(v, out, &digest)?,
    };
    Ok(Outcome { verdict })
}

pub fn digest_of(cfg: &RunConfig) -> Result<String> {
    config_digest(cfg)
}

fn simulate(v: &Validated, out: &mut OutputDir) -> Result<Verdict> {
    let cfg = sim_of(v)?;
    let n = v.config.sim.as_ref().map_or(1, |s| s.trajectories);
    let runs = ensemble(v, &cfg, n)?;
    let grid = v.config.output_times.as_ref().map_or(10, |t| t.len().saturating_sub(1).max(1));
    let traj = csv_bytes(&["path", "t", "X1", "X2", "X3", "Z1", "Z2", "Z3"], |w| {
        for (i, (p, _)) in runs.iter().enumerate() {
            let mut rows = p.sample_rows(grid);
            if let Some(times) = &v.config.output_times {
                rows.extend(times.iter().map(|&t| (t, p.x_at(t), p.z_at(t))));
                rows.sort_by(|a, b| a.0.total_cmp(&b.0));
                rows.dedup_by(|a, b| a.0 == b.0);
            }
            for (t, x, z) in rows {
                let mut rec = vec![i.to_string(), t.to_string()];
                rec.extend(vec_fields(x));
                rec.extend(vec_fields(z));
                w.write_record(&rec)?;
            }
        }
        Ok(())
    })?;
    out.write("trajectory.csv", &traj)?;
    if cfg.record_events {
        let mut buf = Vec::new();
        for (i, (_, events)) in runs.iter().enumerate() {
            for e in events {
                let line = json!({
                    "path": i,
                    "s": e.s,
                    "v": e.v,
                    "theta": e.theta,
                    "phi": e.phi,
                    "r": e.r,
                    "accepted": e.accepted,
                    "level": e.level,
                });
                buf.extend(serde_json::to_vec(&line)?);
                buf.push(b'\n');
            }
        }
        out.write("events.jsonl", &buf)?;
    }
    let paths: Vec<Trajectory> = runs.into_iter().map(|r| r.0).collect();
    let times = v.config.times(cfg.horizon);
    let summary = json!({
        "trajectories": paths.len(),
        "events_proposed": paths.iter().map(|p| p.events_proposed).sum::<usize>(),
        "events_accepted": paths.iter().map(|p| p.events_accepted).sum::<usize>(),
        "escalations": paths.iter().map(|p| p.escalations.len()).sum::<usize>(),
        "moments": moment_report(&paths, &times),
    });
    out.write_json("summary.json", &summary)?;
    Ok(Verdict::Pass)
}

fn particles(v: &Validated, out: &mut OutputDir) -> Result<Verdict> {
    let p = v.config.particles.as_ref().context("particles section missing")?;
    let mut rng = stream_rng(v.config.seed, 0);
    let states = maxwellian_states(p.n, p.box_side, p.vel_var, &mut rng);
    let h_v = p.h_v.unwrap_or_else(|| default_bandwidth(p.n));
    let mut ens = ParticleEnsemble::new(states, p.h_x, h_v, p.box_side, p.mode.into())?;
    ens.level = p.level;
    let horizon = p.dt * p.steps as f64;
    let snap_steps: Vec<usize> = v
        .config
        .times(horizon)
        .iter()
        .map(|t| ((t / p.dt).round() as usize).min(p.steps))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut history = Vec::new();
    let mut record = |ens: &ParticleEnsemble, step: usize, out: &mut OutputDir| -> Result<()> {
        let bytes = csv_bytes(&["x1", "x2", "x3", "v1", "v2", "v3"], |w| {
            for (x, z) in &ens.states {
                let mut rec: Vec<String> = vec_fields(*x).to_vec();
                rec.extend(vec_fields(*z));
                w.write_record(&rec)?;
            }
            Ok(())
        })?;
        out.write(&format!("snapshot_{step:06}.csv"), &bytes)?;
        history.push(json!({
            "step": step,
            "t": ens.t,
            "momentum": ens.total_momentum(),
            "mean_energy": ens.mean_energy(),
        }));
        Ok(())
    };
    let mut stats = boltzsim_core::particles::StepStats::default();
    let mut done = 0;
    for &target in &snap_steps {
        if target > done {
            let s = run_particles(&mut ens, &v.kernel, p.dt, target - done, &mut rng, |_| {})?;
            stats.substeps += s.substeps;
            stats.proposals += s.proposals;
            stats.accepted += s.accepted;
            stats.clamped += s.clamped;
            done = target;
        }
        record(&ens, target, out)?;
    }
    let summary = json!({ "n": ens.len(), "h_x": p.h_x, "h_v": h_v, "stats": stats, "snapshots": history });
    out.write_json("summary.json", &summary)?;
    Ok(Verdict::Pass)
}

fn picard(v: &Validated, out: &mut OutputDir, digest: &str) -> Result<Verdict> {
    let cfg = sim_of(v)?;
    let p = v.config.picard.as_ref().context("picard section missing")?;
    let model: &dyn DensityModel = v.model.as_ref();
    let table = picard_ensemble(p.realizations, p.iterations, model, &v.kernel, p.level, cfg.horizon, v.config.seed, p.rotate, |r| {
        model.sample_state(0.0, r)
    })?;
    let rows = table.rows();
    let bytes = csv_bytes(&["n", "d_n", "stderr"], |w| {
        for r in &rows {
            w.write_record([r.n.to_string(), r.d_n.to_string(), r.stderr.to_string()])?;
        }
        Ok(())
    })?;
    out.write("picard.csv", &bytes)?;
    let mut reports = Vec::new();
    for n in 2..rows.len().saturating_sub(1) {
        let inc = table.increment(n);
        // one-sided 95% test of d_{n+1} <= d_n
        reports.push(report(digest, format!("picard.increment.{n}"), inc.mean, inc.se, Some(1.645 * inc.se), inc.mean <= 1.645 * inc.se));
    }
    write_reports(out, reports)
}

fn write_reports(out: &mut OutputDir, reports: Vec<Report>) -> Result<Verdict> {
    let ok = reports.iter().all(|r| r.verdict == Verdict::Pass);
    out.write_json("report.json", &reports)?;
    Ok(Verdict::of(ok))
}

fn check_invariants(v: &Validated, out: &mut OutputDir, digest: &str) -> Result<Verdict> {
    let t = v.config.diagnostics.as_ref().map_or(0.0, |d| d.time);
    let grid = v.config.quad_grid();
    let psis = [
        ("one", TestFunction::Constant { a: 1.0 }),
        ("z1", TestFunction::LinearMomentum { b: Vec3::axis(0) }),
        ("z2", TestFunction::LinearMomentum { b: Vec3::axis(1) }),
        ("z3", TestFunction::LinearMomentum { b: Vec3::axis(2) }),
        ("energy", TestFunction::Energy),
    ];
    let mut reports = Vec::new();
    for (name, psi) in psis {
        let r = collision_invariant_residual(v.model.as_ref(), &v.kernel, t, &psi, grid)?;
        reports.push(report(digest, format!("collision_invariant.{name}"), r.value, r.error_estimate, Some(r.tolerance), r.pass));
    }
    write_reports(out, reports)
}

fn entropy(v: &Validated, out: &mut OutputDir, digest: &str) -> Result<Verdict> {
    let cfg = sim_of(v)?;
    let d = v.config.diagnostics.clone().unwrap_or_default();
    let n = d.samples.unwrap_or(2000);
    let velocity_only = d.velocity_only.unwrap_or(v.model.box_side().is_some());
    let runs = ensemble(v, &cfg, n)?;
    let paths: Vec<Trajectory> = runs.into_iter().map(|r| r.0).collect();
    let mut reports = Vec::new();
    for t in v.config.times(cfg.horizon) {
        let samples: Vec<(Vec3, Vec3)> = paths.iter().map(|p| (p.x_at(t), p.z_at(t))).collect();
        let h = match d.bandwidth {
            Some(h) => h,
            None => silverman(&samples, velocity_only),
        };
        let r = relative_entropy(&samples, v.model.as_ref(), t, h, velocity_only)?;
        let ok = r.within_budget();
        let mut rep = report(digest, format!("relative_entropy.t={t}"), r.value, r.stderr, Some(r.bias_budget), ok);
        rep.details = Some(serde_json::to_value(r)?);
        reports.push(rep);
    }
    write_reports(out, reports)
}

/// Normal-reference bandwidth from the sample spread.
fn silverman(samples: &[(Vec3, Vec3)], velocity_only: bool) -> f64 {
    let n = samples.len() as f64;
    let d: f64 = if velocity_only { 3.0 } else { 6.0 };
    let mean = samples.iter().fold(Vec3::ZERO, |a, s| a + s.1) / n;
    let var = samples.iter().map(|s| (s.1 - mean).norm_sq()).sum::<f64>() / (3.0 * n);
    var.sqrt() * (4.0 / (d + 2.0)).powf(1.0 / (d + 4.0)) * n.powf(-1.0 / (d + 4.0))
}

fn exit_prob(v: &Validated, out: &mut OutputDir, digest: &str) -> Result<Verdict> {
    let mut cfg = sim_of(v)?;
    if cfg.j_step <= 0.0 {
        cfg.j_step = cfg.j0;
    }
    let d = v.config.diagnostics.clone().unwrap_or_default();
    let n = d.runs.unwrap_or(1000);
    let mut levels = d.levels.unwrap_or_default();
    levels.sort_by(f64::total_cmp);
    let paths: Vec<Trajectory> = ensemble(v, &cfg, n)?.into_iter().map(|r| r.0).collect();
    let s1 = paths.iter().map(|p| p.sup_speed()).sum::<f64>() / n as f64;
    let probs: Vec<f64> = levels.iter().map(|&j| exit_fraction(&paths, j)).collect();
    let mut reports = Vec::new();
    for (k, (&j, &p)) in levels.iter().zip(&probs).enumerate() {
        let monotone = k == 0 || p <= probs[k - 1];
        let bound = s1 / j;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        let mut rep = report(digest, format!("exit_probability.j={j}"), p, se, Some(bound), monotone && p <= bound);
        rep.details = Some(json!({ "s1_norm": s1, "markov_bound": bound }));
        reports.push(rep);
    }
    write_reports(out, reports)
}

fn certify(v: &Validated, out: &mut OutputDir, digest: &str) -> Result<Verdict> {
    let cfg = sim_of(v)?;
    let spec: &KernelSpec = &v.kernel;
    let r = certify_hypotheses(v.model.as_ref(), spec, cfg.horizon)?;
    let reports = r
        .checks
        .iter()
        .map(|c| report(digest, format!("hypothesis.{}", c.name), c.fine, (c.fine - c.coarse).abs(), c.model_bound, c.pass))
        .collect();
    write_reports(out, reports)
}
