#![allow(dead_code)]

use std::io::Write;
use std::path::PathBuf;

use nalgebra::{Rotation3, Unit, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use soromorph::math::Matrix;
use soromorph::scenario::{load_scenario, LoadedScenario, Problem};
use soromorph::sim::ScatterMode;

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(format!("{name}.scenario"))
}

pub fn load(name: &str) -> LoadedScenario {
    load_scenario(&scenario_path(name)).expect("bundled scenario loads")
}

pub fn problem<const D: usize>(name: &str) -> (LoadedScenario, Problem<D>) {
    let ls = load(name);
    let pb = ls
        .scenario
        .build::<D>(&ls.base_dir(), ScatterMode::Deterministic)
        .expect("bundled scenario builds");
    (ls, pb)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random deformation gradient `R (I + E)` with a small-to-moderate
/// stretch part, so `det > 0`.
pub fn random_f3(rng: &mut ChaCha8Rng, amplitude: f64) -> Matrix<3> {
    let e = Matrix::<3>::from_fn(|_, _| rng.gen_range(-amplitude..amplitude));
    random_rotation(rng).into_inner() * (Matrix::<3>::identity() + e)
}

pub fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation3<f64> {
    let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let axis = if axis.norm() < 1e-3 { Vector3::z() } else { axis };
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), rng.gen_range(-3.0..3.0))
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// Print a criterion line straight to stdout so it shows even when the
/// harness captures test output.
pub fn report(criterion: usize, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "acceptance criterion {criterion}: {verdict} ({detail})");
    let _ = out.flush();
}
