use std::f64::consts::{PI, TAU};

use boltzsim_core::densities::{BoxMaxwellianModel, DensityModel};
use boltzsim_core::geometry::{deflection_alpha, post_collision, tanaka_rotation, Frame};
use boltzsim_core::kernels::{angular_mass, sample_theta, Angular};
use boltzsim_core::sde_engine::{simulate, SimConfig};
use boltzsim_core::truncation::{alpha_j, energy_defect, project_j};
use boltzsim_core::{KernelSpec, Vec3};
use proptest::prelude::*;

fn vec3(scale: f64) -> impl Strategy<Value = Vec3> {
    (-scale..scale, -scale..scale, -scale..scale).prop_map(|(a, b, c)| Vec3::new(a, b, c))
}

proptest! {
    #[test]
    fn collisions_conserve(z in vec3(10.0), v in vec3(10.0), theta in 1e-6..PI, phi in 0.0..TAU) {
        let (zs, vs) = post_collision(z, v, theta, phi);
        let e0 = z.norm_sq() + v.norm_sq();
        prop_assert!(((zs + vs) - (z + v)).norm() <= 1e-12 * (1.0 + z.norm() + v.norm()));
        prop_assert!((zs.norm_sq() + vs.norm_sq() - e0).abs() <= 1e-12 * (1.0 + e0));
    }

    #[test]
    fn alpha_is_antisymmetric(z in vec3(5.0), v in vec3(5.0), theta in 1e-6..PI, phi in 0.0..TAU) {
        let a = deflection_alpha(z, v, theta, phi);
        let b = deflection_alpha(v, z, theta, (TAU - phi) % TAU);
        prop_assert!((a + b).norm() <= 1e-12 * (1.0 + (v - z).norm()));
    }

    #[test]
    fn tanaka_bound(z in vec3(3.0), v in vec3(3.0), z2 in vec3(3.0), v2 in vec3(3.0), phi in 0.0..TAU) {
        let phi0 = tanaka_rotation(z, v, z2, v2);
        prop_assert!((0.0..TAU).contains(&phi0));
        let d = Frame::of(v - z).at(phi) - Frame::of(v2 - z2).at(phi + phi0);
        prop_assert!(d.norm() <= 3.0 * ((v - z) - (v2 - z2)).norm() + 1e-12);
    }

    #[test]
    fn truncated_energy_identity(z in vec3(20.0), v in vec3(5.0), j in 1.0..10.0f64, theta in 1e-6..PI, phi in 0.0..TAU) {
        let a = alpha_j(z, v, theta, phi, j);
        let lhs = (z + a).norm_sq() - z.norm_sq();
        let rhs = v.norm_sq() - (v - a).norm_sq() + energy_defect(z, v, theta, phi, j);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + z.norm_sq() + v.norm_sq()));
        prop_assert!(project_j(z, j).norm() <= j.min(z.norm()) * (1.0 + 1e-15));
    }

    #[test]
    fn power_law_theta_in_range(nu in 0.05..0.95f64, eps in 1e-3..1.0f64, u in 0.0..1.0f64) {
        let spec = KernelSpec::new(1.0, 1.0, Angular::PowerLaw { nu }, eps).unwrap();
        let th = sample_theta(&spec, u).unwrap();
        prop_assert!(th >= eps * (1.0 - 1e-12) && th <= PI * (1.0 + 1e-12));
        prop_assert!(angular_mass(&spec).unwrap() > 0.0);
    }
}

#[test]
fn kernel_spec_from_json() {
    let spec: KernelSpec = serde_json::from_str(r#"{"gamma": 1, "c": 2, "angular": "hard_sphere", "epsilon": 0.1}"#).unwrap();
    assert_eq!(spec.c(), 2.0);
    assert!(serde_json::from_str::<KernelSpec>(r#"{"gamma": 1, "c": 2, "angular": "hard_sphere", "speed": 3}"#).is_err());
    assert!(serde_json::from_str::<KernelSpec>(r#"{"gamma": 2, "c": 1, "angular": "hard_sphere"}"#).is_err());
}

#[test]
fn path_energy_matches_events() {
    let model = BoxMaxwellianModel::new(1.0, 1.0).unwrap();
    let spec = KernelSpec::hard_sphere(1.0, 0.0).unwrap();
    let mut cfg = SimConfig::new(2.0, 4.0, 21);
    cfg.record_events = true;
    let (path, events) = simulate(Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0), &model, &spec, &cfg).unwrap();
    assert_eq!(events.iter().filter(|e| e.accepted).count(), path.events_accepted);
    assert_eq!(events.len(), path.events_proposed);
    assert_eq!(path.zs.len(), path.events_accepted + 1);
    for w in path.times.windows(2) {
        assert!(w[0] < w[1]);
    }
    assert!(model.box_side().is_some());
}
