mod common;

use proptest::prelude::*;

use soromorph::optimizer::{
    adam_update, gravity_schedule, optimize, AdamState, IterationRecord, OptimizationHistory, OptimizerCheckpoint,
};
use soromorph::scenario::GravityRamp;

#[test]
fn zero_iterations_return_the_start() {
    let (ls, mut pb) = common::problem::<2>("gradcheck_desk2d");
    let cfg = ls.scenario.optimizer.clone();
    let start = OptimizerCheckpoint::fresh(vec![0.25; pb.pipeline.n_design()], &cfg);
    let out = optimize(&mut pb, &cfg, 9.8, start.clone(), 0, &mut |_| Ok(())).unwrap();
    assert_eq!(out.state, start);
    assert!(out.failure.is_none());
}

#[test]
fn resumed_run_is_bitwise_identical() {
    let (ls, mut pb) = common::problem::<2>("gradcheck_desk2d");
    let cfg = ls.scenario.optimizer.clone();
    let g = ls.scenario.environment.gravity_m_s2;
    let n = pb.pipeline.n_design();
    let fresh = || OptimizerCheckpoint::fresh(ls.scenario.initial_phi(n), &cfg);
    let straight = optimize(&mut pb, &cfg, g, fresh(), 4, &mut |_| Ok(())).unwrap();

    let mut saved = None;
    let half = optimize(&mut pb, &cfg, g, fresh(), 2, &mut |c| {
        saved = Some(serde_json::to_string(c).unwrap());
        Ok(())
    })
    .unwrap();
    assert_eq!(half.state.history.len(), 2);
    let restored: OptimizerCheckpoint = serde_json::from_str(&saved.unwrap()).unwrap();
    let resumed = optimize(&mut pb, &cfg, g, restored, 4, &mut |_| Ok(())).unwrap();

    // records carry wall time, so compare everything else
    let (a, b) = (&resumed.state, &straight.state);
    assert_eq!(a.phi, b.phi);
    assert_eq!(a.adam, b.adam);
    assert_eq!(a.auglag, b.auglag);
    assert_eq!(a.best, b.best);
    assert_eq!(resumed.state.history.to_csv(true), straight.state.history.to_csv(true));
}

#[test]
fn history_objective_matches_a_fresh_forward_run() {
    let (ls, mut pb) = common::problem::<2>("gradcheck_desk2d");
    let cfg = ls.scenario.optimizer.clone();
    let phi0 = vec![0.1; pb.pipeline.n_design()];
    let out = optimize(&mut pb, &cfg, 9.8, OptimizerCheckpoint::fresh(phi0.clone(), &cfg), 1, &mut |_| Ok(())).unwrap();
    let l = soromorph::adjoint::objective_of(&pb.sim, &pb.pipeline, &phi0).unwrap();
    assert_eq!(out.state.history.records()[0].objective.to_bits(), l.to_bits());
    assert!(out.state.phi.iter().all(|p| (-1.0..=1.0).contains(p)));
}

#[test]
fn non_finite_gradient_leaves_state_untouched() {
    let mut phi = vec![0.1, 0.2, 0.3];
    let mut state = AdamState::new(3, 0.02, 0.9, 0.999, 1e-8);
    let before = (phi.clone(), state.clone());
    assert!(adam_update(&mut phi, &[1.0, f64::NAN, 0.0], &mut state).is_err());
    assert_eq!((phi, state), before);
}

#[test]
fn history_rejects_out_of_order_records() {
    let mut h = OptimizationHistory::default();
    let rec = |iter| IterationRecord {
        iter,
        objective: 0.0,
        constraint: 0.0,
        xg: [0.0; 3],
        mass: 1.0,
        gravity: 9.8,
        multiplier: 0.0,
        penalty: 1.0,
        seconds: 0.5,
    };
    h.push(rec(0)).unwrap();
    assert!(h.push(rec(2)).is_err());
    assert!(h.to_csv(true).ends_with(",0.000\n"));
    assert!(h.to_csv(false).ends_with(",0.500\n"));
}

proptest! {
    #[test]
    fn adam_keeps_design_in_bounds(
        grads in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 8), 1..60),
        lr in 1e-3f64..0.5,
    ) {
        let mut phi = vec![0.0; 8];
        let mut state = AdamState::new(8, lr, 0.9, 0.999, 1e-8);
        for g in &grads {
            adam_update(&mut phi, g, &mut state).unwrap();
            prop_assert!(phi.iter().all(|p| (-1.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn gravity_ramps_are_monotone_and_capped(k in 0usize..1000, every in 1usize..50, steps in 1usize..20) {
        for ramp in [GravityRamp::None, GravityRamp::Stair, GravityRamp::Linear] {
            let a = gravity_schedule(k, ramp, every, steps, 9.8);
            let b = gravity_schedule(k + 1, ramp, every, steps, 9.8);
            prop_assert!(a <= b && b <= 9.8 && a >= 0.0);
        }
        prop_assert_eq!(gravity_schedule(every * steps, GravityRamp::Stair, every, steps, 9.8), 9.8);
    }
}
