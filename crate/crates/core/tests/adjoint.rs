mod common;

use soromorph::adjoint::{gradient, gradient_gamma, objective_of, plan_checkpoints};
use soromorph::constitutive::ActuationWaveform;
use soromorph::design::{SymmetryMap, SymmetryPlane};
use soromorph::math::Vector;
use soromorph::Error;

#[test]
fn checkpoint_plans() {
    let p = plan_checkpoints(400, None).unwrap();
    assert_eq!((p.segment_len, p.checkpoints.len()), (20, 20));
    assert_eq!(p.peak_states(), 40);
    let p = plan_checkpoints(401, None).unwrap();
    assert_eq!((p.segment_len, p.checkpoints.len()), (21, 20));
    let p = plan_checkpoints(400, Some(5)).unwrap();
    assert_eq!((p.segment_len, p.checkpoints.len()), (80, 5));
    assert_eq!(p.checkpoints, vec![0, 80, 160, 240, 320]);
    assert!(matches!(plan_checkpoints(400, Some(0)), Err(Error::Capacity(_))));
}

#[test]
fn memory_stays_within_plan() {
    let (_, pb) = common::problem::<2>("gradcheck_desk2d");
    let plan = plan_checkpoints(pb.sim.n_steps(), Some(8)).unwrap();
    let g = gradient_gamma(&pb.sim, &vec![0.8; pb.sim.n_design()], &plan).unwrap();
    assert!(g.memory.peak_states <= plan.peak_states());
    assert!(g.memory.bytes_per_state > 0);
}

#[test]
fn checkpoint_budget_does_not_change_the_gradient() {
    let (_, pb) = common::problem::<2>("gradcheck_desk2d");
    let gamma: Vec<f64> = (0..pb.sim.n_design()).map(|i| 0.3 + 0.6 * ((i % 5) as f64 / 4.0)).collect();
    let a = gradient_gamma(&pb.sim, &gamma, &plan_checkpoints(pb.sim.n_steps(), None).unwrap()).unwrap();
    let b = gradient_gamma(&pb.sim, &gamma, &plan_checkpoints(pb.sim.n_steps(), Some(3)).unwrap()).unwrap();
    assert_eq!(a.objective.to_bits(), b.objective.to_bits());
    assert_eq!(a.dgamma, b.dgamma);
}

#[test]
fn sideways_free_fall_has_no_gradient() {
    let (_, mut pb) = common::problem::<2>("gradcheck_desk2d");
    pb.sim.waveform = ActuationWaveform::silent();
    pb.sim.gravity = Vector::<2>::new(0.0, -9.8);
    let phi: Vec<f64> = (0..pb.pipeline.n_design()).map(|i| ((i % 9) as f64 - 4.0) / 5.0).collect();
    let plan = plan_checkpoints(pb.sim.n_steps(), None).unwrap();
    let g = gradient(&pb.sim, &pb.pipeline, &phi, &plan).unwrap();
    assert!(g.objective.abs() < 1e-15);
    assert!(g.dphi.iter().all(|d| d.abs() < 1e-12), "{:?}", g.dphi.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs())));
}

#[test]
fn finite_difference_error_shrinks_with_step() {
    let (_, pb) = common::problem::<2>("gradcheck_desk2d");
    let n = pb.pipeline.n_design();
    let phi: Vec<f64> = (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0).collect();
    let plan = plan_checkpoints(pb.sim.n_steps(), None).unwrap();
    let i = n / 3;
    let adj = gradient(&pb.sim, &pb.pipeline, &phi, &plan).unwrap().dphi[i];
    let fd = |d: f64| {
        let mut a = phi.clone();
        let mut b = phi.clone();
        a[i] += d;
        b[i] -= d;
        (objective_of(&pb.sim, &pb.pipeline, &a).unwrap() - objective_of(&pb.sim, &pb.pipeline, &b).unwrap()) / (2.0 * d)
    };
    let coarse = (fd(1e-2) - adj).abs();
    let fine = (fd(1e-3) - adj).abs();
    assert!(fine < coarse, "{fine} !< {coarse}");
}

#[test]
fn mirrored_design_has_mirrored_gradient() {
    // clamp-free so round-off cannot flip a contact decision on one side only
    let (_, mut pb) = common::problem::<2>("gradcheck_desk2d");
    pb.sim.direction = Vector::<2>::new(0.0, 1.0);
    let center = 0.0595 + 0.5 * 0.035;
    let plane = SymmetryPlane { axis: 0, coordinate: center };
    let sym = SymmetryMap::build(&pb.design_positions, &[plane], 0.25 * pb.particle_spacing).unwrap();
    let mut gamma: Vec<f64> = (0..pb.sim.n_design()).map(|i| 0.2 + 0.8 * ((i * 7 % 13) as f64 / 12.0)).collect();
    sym.symmetrize(&mut gamma);
    let plan = plan_checkpoints(pb.sim.n_steps(), None).unwrap();
    let g = gradient_gamma(&pb.sim, &gamma, &plan).unwrap();
    let scale = g.dgamma.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    assert!(scale > 0.0);
    for i in 0..g.dgamma.len() {
        let j = sym.mirror(0, i);
        assert!((g.dgamma[i] - g.dgamma[j]).abs() <= 1e-8 * scale, "{i}/{j}: {} vs {}", g.dgamma[i], g.dgamma[j]);
    }
}
