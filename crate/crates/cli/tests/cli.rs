use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn boltzsim(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_boltzsim"));
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("BOLTZ_THREADS", t),
        None => cmd.env_remove("BOLTZ_THREADS"),
    };
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run(cfg: &Path, out: &Path, threads: Option<&str>) -> Output {
    boltzsim(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], threads)
}

const KERNEL_HS: &str = r#"
[kernel]
gamma = 1.0
c = 1.0
angular = "hard_sphere"
"#;

#[test]
fn free_flight_is_a_straight_line() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "free.toml",
        r#"
mode = "simulate"
seed = 3
output_times = [0.0, 0.25, 0.5, 1.0]

[kernel]
gamma = 1.0
c = 1.0
angular = "hard_sphere"
epsilon = 3.141592653589793

[model]
kind = "box_maxwellian"
box_side = 1.0
vel_var = 1.0

[sim]
horizon = 1.0
j0 = 2.0
initial = { x = [0.1, 0.2, 0.3], z = [1.0, -2.0, 0.5] }
"#,
    );
    let out = tmp.path().join("out");
    let o = run(&cfg, &out, None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(out.join("trajectory.csv")).unwrap();
    let mut rows = 0;
    for rec in rdr.records() {
        let r: Vec<f64> = rec.unwrap().iter().map(|s| s.parse().unwrap()).collect();
        let t = r[1];
        assert_eq!(r[2], 0.1 + 1.0 * t);
        assert_eq!(r[3], 0.2 + -2.0 * t);
        assert_eq!(r[4], 0.3 + 0.5 * t);
        assert_eq!(&r[5..], &[1.0, -2.0, 0.5]);
        rows += 1;
    }
    assert!(rows >= 4);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    let files: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|f| f["path"].as_str().unwrap()).collect();
    assert_eq!(files, ["trajectory.csv", "summary.json"]);
    assert_eq!(manifest["seed"], 3);
}

#[test]
fn invariants_report_passes() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "inv.toml",
        &format!(
            r#"
mode = "check_invariants"
{KERNEL_HS}
[model]
kind = "box_maxwellian"
box_side = 1.0
vel_var = 1.0

[diagnostics]
grid = {{ n_x = 1, n_v = 5, n_theta = 4, n_phi = 6 }}
"#
        ),
    );
    let out = tmp.path().join("out");
    let o = run(&cfg, &out, None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let reports: Vec<serde_json::Value> = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(reports.len(), 5);
    for r in &reports {
        assert_eq!(r["verdict"], "PASS");
        for key in ["operation", "inputs_digest", "value", "stderr", "tolerance"] {
            assert!(r.get(key).is_some(), "missing {key}");
        }
    }
}

#[test]
fn schema_errors_name_the_field() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "bad.toml",
        r#"
mode = "simulate"
[kernel]
gamma = 2.0
c = 1.0
angular = "hard_sphere"
[model]
kind = "box_maxwellian"
box_side = 1.0
vel_var = 1.0
[sim]
horizon = -1.0
j0 = 2.0
"#,
    );
    let out = tmp.path().join("out");
    let o = run(&cfg, &out, None);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("kernel.gamma"), "{err}");
    assert!(!out.exists());
    let o = boltzsim(&["validate", "--config", cfg.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));

    let unknown = write_config(
        tmp.path(),
        "unknown.toml",
        &format!("mode = \"simulate\"\nspeed = 3\n{KERNEL_HS}\n[model]\nkind = \"box_maxwellian\"\nbox_side = 1.0\nvel_var = 1.0\n"),
    );
    let o = boltzsim(&["validate", "--config", unknown.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("speed"));
}

fn sim_config(extra: &str) -> String {
    format!(
        r#"
mode = "simulate"
seed = 11
{KERNEL_HS}
[model]
kind = "gaussian_product"
vel_var = 1.0
pos_var = 1.0
drift = "free_transport"

[sim]
horizon = 1.0
j0 = 2.0
trajectories = 40
record_events = true
{extra}
"#
    )
}

fn data_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "sim.toml", &sim_config(""));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(run(&cfg, &a, Some("1")).status.success());
    assert!(run(&cfg, &b, Some("3")).status.success());
    let (fa, fb) = (data_files(&a), data_files(&b));
    assert_eq!(fa.len(), 3);
    assert_eq!(fa, fb);
    let events = String::from_utf8(fa.iter().find(|f| f.0 == "events.jsonl").unwrap().1.clone()).unwrap();
    let first: serde_json::Value = serde_json::from_str(events.lines().next().unwrap()).unwrap();
    for key in ["s", "v", "theta", "phi", "r", "accepted", "level"] {
        assert!(first.get(key).is_some());
    }
    // a different seed gives a different run
    let c = tmp.path().join("c");
    let o = boltzsim(&["run", "--config", cfg.to_str().unwrap(), "--out", c.to_str().unwrap(), "--seed", "12"], None);
    assert!(o.status.success());
    assert_ne!(data_files(&c), fa);
}

#[test]
fn failed_runs_leave_nothing_behind() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "short.toml", &sim_config("max_events = 1"));
    let out = tmp.path().join("out");
    let o = run(&cfg, &out, None);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("max_events"));
    assert!(!out.exists());
}

#[test]
fn verdict_failure_exits_with_two() {
    // every sample starts at the same point, far from the reference density
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "ent.toml",
        &format!(
            r#"
mode = "entropy"
output_times = [0.0]
{KERNEL_HS}
[model]
kind = "box_maxwellian"
box_side = 1.0
vel_var = 1.0
[sim]
horizon = 0.1
j0 = 4.0
initial = {{ x = [0.0, 0.0, 0.0], z = [3.0, 0.0, 0.0] }}
[diagnostics]
samples = 200
bandwidth = 0.3
"#
        ),
    );
    let out = tmp.path().join("out");
    let o = run(&cfg, &out, None);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("manifest.json").exists());
}

#[test]
fn picard_and_particles_outputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "picard.toml",
        &format!(
            r#"
mode = "picard"
seed = 5
{KERNEL_HS}
[model]
kind = "box_maxwellian"
box_side = 1.0
vel_var = 1.0
[sim]
horizon = 0.1
j0 = 4.0
[picard]
realizations = 100
iterations = 5
level = 4.0
"#
        ),
    );
    let out = tmp.path().join("picard");
    let o = run(&cfg, &out, None);
    assert!(o.status.code() == Some(0) || o.status.code() == Some(2));
    let table = fs::read_to_string(out.join("picard.csv")).unwrap();
    assert!(table.starts_with("n,d_n,stderr\n"));
    assert_eq!(table.lines().count(), 6);

    let cfg = write_config(
        tmp.path(),
        "particles.toml",
        &format!(
            r#"
mode = "particles"
seed = 5
output_times = [0.0, 0.1]
{KERNEL_HS}
[model]
kind = "box_maxwellian"
box_side = 1.0
vel_var = 1.0
[particles]
N = 50
h_x = 0.5
dt = 0.05
steps = 2
box_side = 1.0
mode = "symmetric_pair"
"#
        ),
    );
    let out = tmp.path().join("particles");
    let o = run(&cfg, &out, None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let snap = fs::read_to_string(out.join("snapshot_000002.csv")).unwrap();
    assert!(snap.starts_with("x1,x2,x3,v1,v2,v3\n"));
    assert_eq!(snap.lines().count(), 51);
    assert!(out.join("snapshot_000000.csv").exists());
}

#[test]
fn exit_prob_and_certify() {
    let tmp = TempDir::new().unwrap();
    for (mode, extra) in [("exit_prob", "[diagnostics]\nlevels = [2.0, 4.0, 8.0]\nruns = 200\n"), ("certify", "")] {
        let cfg = write_config(
            tmp.path(),
            &format!("{mode}.toml"),
            &format!(
                "mode = \"{mode}\"\n{KERNEL_HS}\n[model]\nkind = \"gaussian_product\"\nvel_var = 1.0\npos_var = 1.0\n[sim]\nhorizon = 1.0\nj0 = 1.0\n{extra}"
            ),
        );
        let out = tmp.path().join(mode);
        let o = run(&cfg, &out, None);
        assert_eq!(o.status.code(), Some(0), "{mode}: {}", String::from_utf8_lossy(&o.stderr));
        let reports: Vec<serde_json::Value> = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
        assert!(!reports.is_empty());
    }
}
