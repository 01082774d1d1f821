mod common;

use proptest::prelude::*;

use soromorph::design::{
    apply_filter, apply_filter_transpose, center_of_gravity, constraint_gradient, constraint_value, project,
    project_derivative, DesignPipeline, FilterKernel, SymmetryMap, SymmetryPlane,
};
use soromorph::math::Vector;

fn lattice(n: usize, h: f64) -> Vec<Vector<2>> {
    (0..n * n).map(|k| Vector::<2>::new((k % n) as f64 * h, (k / n) as f64 * h)).collect()
}

fn mirrored_pipeline() -> DesignPipeline {
    let pts = lattice(10, 1.0);
    let kernel = FilterKernel::build(&pts, 2.5).unwrap();
    let planes = [SymmetryPlane { axis: 0, coordinate: 4.5 }, SymmetryPlane { axis: 1, coordinate: 4.5 }];
    let sym = SymmetryMap::build(&pts, &planes, 0.25).unwrap();
    DesignPipeline::new(kernel, 8.0, sym).unwrap()
}

#[test]
fn pipeline_backward_matches_finite_differences() {
    let pipe = mirrored_pipeline();
    let n = pipe.n_design();
    let phi: Vec<f64> = (0..n).map(|i| ((i * 37 % 23) as f64 / 11.0) - 1.0).collect();
    let weights: Vec<f64> = (0..n).map(|i| ((i * 13 % 17) as f64 - 8.0) / 8.0).collect();
    let loss = |p: &[f64]| {
        let g = pipe.forward(p).unwrap().gamma;
        g.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>() + constraint_value(&g).unwrap()
    };
    let field = pipe.forward(&phi).unwrap();
    let mut dg = constraint_gradient(&field.gamma);
    for (d, w) in dg.iter_mut().zip(&weights) {
        *d += w;
    }
    let grad = pipe.backward(&field, &dg).unwrap();
    for i in [0, 17, 45, 99] {
        let eps = 1e-6;
        let mut a = phi.clone();
        let mut b = phi.clone();
        a[i] += eps;
        b[i] -= eps;
        let fd = (loss(&a) - loss(&b)) / (2.0 * eps);
        assert!((grad[i] - fd).abs() < 1e-7 * fd.abs().max(1.0), "{i}: {} vs {fd}", grad[i]);
    }
}

#[test]
fn symmetry_pairs_are_involutions() {
    let pipe = mirrored_pipeline();
    for p in 0..2 {
        for i in 0..pipe.n_design() {
            assert_eq!(pipe.symmetry.mirror(p, pipe.symmetry.mirror(p, i)), i);
        }
    }
    assert!(SymmetryMap::build(&lattice(10, 1.0), &[SymmetryPlane { axis: 0, coordinate: 4.0 }], 0.25).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn projection_is_odd_and_monotone(x in -1.0f64..1.0, dx in 0.0f64..0.5, beta in 0.5f64..32.0) {
        prop_assert!((project(-x, beta) - (1.0 - project(x, beta))).abs() < 1e-14);
        prop_assert!(project(x + dx, beta) >= project(x, beta));
        // the derivative may underflow deep in the saturated tails
        prop_assert!(project_derivative(x, beta) >= 0.0);
        if beta * x.abs() < 5.0 {
            prop_assert!(project_derivative(x, beta) > 0.0);
        }
    }

    #[test]
    fn filter_is_a_convex_average(phi in proptest::collection::vec(-1.0f64..1.0, 100)) {
        let pts = lattice(10, 1.0);
        let kernel = FilterKernel::build(&pts, 2.5).unwrap();
        let out = apply_filter(&kernel, &phi).unwrap();
        let lo = phi.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = phi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(out.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn filter_transpose_is_the_adjoint(
        x in proptest::collection::vec(-1.0f64..1.0, 100),
        y in proptest::collection::vec(-1.0f64..1.0, 100),
    ) {
        let kernel = FilterKernel::build(&lattice(10, 1.0), 2.5).unwrap();
        let kx = apply_filter(&kernel, &x).unwrap();
        let kty = apply_filter_transpose(&kernel, &y).unwrap();
        let lhs: f64 = kx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&kty).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn symmetrize_is_idempotent(v in proptest::collection::vec(-1.0f64..1.0, 100)) {
        let sym = mirrored_pipeline().symmetry;
        let mut once = v.clone();
        sym.symmetrize(&mut once);
        let mut twice = once.clone();
        sym.symmetrize(&mut twice);
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() < 1e-15);
        }
        for i in 0..v.len() {
            prop_assert!((once[i] - once[sym.mirror(0, i)]).abs() < 1e-15);
        }
    }

    #[test]
    fn center_of_gravity_ignores_mass_scale(
        masses in proptest::collection::vec(0.01f64..1.0, 1..40),
        scale in 1e-3f64..1e3,
    ) {
        let pts = lattice(7, 0.01);
        let a = center_of_gravity(pts.iter().zip(&masses).map(|(x, &m)| (*x, m))).unwrap();
        let b = center_of_gravity(pts.iter().zip(&masses).map(|(x, &m)| (*x, scale * m))).unwrap();
        prop_assert!((a - b).norm() < 1e-14);
    }
}

#[test]
fn massless_design_is_degenerate() {
    let pts = lattice(3, 1.0);
    assert!(center_of_gravity(pts.iter().map(|x| (*x, 0.0))).is_err());
}
