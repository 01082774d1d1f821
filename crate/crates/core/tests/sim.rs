mod common;

use soromorph::constitutive::ActuationWaveform;
use soromorph::math::Vector;
use soromorph::sim::{run_forward, step, ForwardOptions, Workspace};

#[test]
fn unstressed_body_falls_freely() {
    let (_, mut pb) = common::problem::<2>("gradcheck_desk2d");
    pb.sim.waveform = ActuationWaveform::silent();
    pb.sim.gravity = Vector::<2>::new(0.0, -9.8);
    let sim = &pb.sim;
    let gamma = vec![1.0; sim.n_design()];
    let mut particles = sim.particles_for(&gamma).unwrap();
    let start = particles.state.position.clone();
    let mut grid = sim.new_grid();
    let mut ws = Workspace::new();
    let n = 200;
    for k in 0..n {
        step(&mut particles, &mut grid, &sim.params(k), &mut ws, k).unwrap();
    }
    // symplectic Euler: Δy = -g dt² n(n+1)/2
    let dt = sim.clock.dt;
    let drop = -9.8 * dt * dt * (n * (n + 1)) as f64 / 2.0;
    for (a, b) in particles.state.position.iter().zip(&start) {
        assert!((a[0] - b[0]).abs() < 1e-12);
        assert!(((a[1] - b[1]) - drop).abs() < 1e-13);
    }
    for f in &particles.state.deformation {
        assert!((f - nalgebra::Matrix2::identity()).norm() < 1e-12);
    }
}

#[test]
fn body_at_rest_stays_at_rest() {
    let (_, mut pb) = common::problem::<2>("gradcheck_desk2d");
    pb.sim.waveform = ActuationWaveform::silent();
    pb.sim.gravity = Vector::<2>::zeros();
    let out = run_forward(&pb.sim, &vec![0.7; pb.sim.n_design()], &ForwardOptions::default()).unwrap();
    assert_eq!(out.objective, 0.0);
    assert!(out.peak_kinetic_energy < 1e-20);
}

#[test]
fn dropped_body_settles_on_the_ground() {
    let (ls, mut pb) = common::problem::<2>("walker_desk2d");
    pb.sim.waveform = ActuationWaveform::silent();
    let ground = ls.scenario.environment.ground_m.unwrap();
    let out = run_forward(&pb.sim, &vec![1.0; pb.sim.n_design()], &ForwardOptions::default()).unwrap();
    let final_ke = out.final_state.kinetic_energy();
    assert!(out.peak_kinetic_energy > 0.0);
    assert!(final_ke < 0.01 * out.peak_kinetic_energy, "{final_ke} vs {}", out.peak_kinetic_energy);
    assert!(out.clamp_activations > 0);
    let lowest = out.final_state.state.position.iter().map(|x| x[1]).fold(f64::INFINITY, f64::min);
    assert!(lowest > ground - pb.sim.spacing, "{lowest} below {ground}");
}

#[test]
fn forward_runs_are_reproducible() {
    let (_, pb) = common::problem::<2>("gradcheck_desk2d");
    let gamma: Vec<f64> = (0..pb.sim.n_design()).map(|i| (i % 7) as f64 / 6.0).collect();
    let opts = ForwardOptions { snapshot_every: 100 };
    let a = run_forward(&pb.sim, &gamma, &opts).unwrap();
    let b = run_forward(&pb.sim, &gamma, &opts).unwrap();
    assert_eq!(a.objective.to_bits(), b.objective.to_bits());
    assert_eq!(a.final_state.state.position, b.final_state.state.position);
    assert_eq!(a.snapshots.len(), pb.sim.n_steps() / 100 + 1);
}

#[test]
fn actuation_deforms_the_body() {
    let (_, pb) = common::problem::<2>("gradcheck_desk2d");
    let out = run_forward(&pb.sim, &vec![1.0; pb.sim.n_design()], &ForwardOptions::default()).unwrap();
    assert!(out.peak_kinetic_energy > 0.0);
    assert!(out.final_state.state.is_finite());
}
