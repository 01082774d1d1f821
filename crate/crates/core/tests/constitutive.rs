mod common;

use proptest::prelude::*;
use rand::Rng;

use soromorph::constitutive::{
    advance_history, advance_history_vjp, fluid_kirchhoff, solid_kirchhoff, solid_kirchhoff_vjp, FluidMaterial,
    SolidMaterial,
};
use soromorph::math::{ddot, dev, Matrix};
use soromorph::prony::PronySeries;

fn solid() -> SolidMaterial {
    let prony = PronySeries::acrylate_elastomer().normalized_to_equilibrium().unwrap().first(3);
    SolidMaterial::from_youngs(0.44e6, 0.4, 1.07e3, prony, 1e-6).unwrap()
}

fn random_dev(r: &mut impl Rng, scale: f64) -> Matrix<3> {
    let m = Matrix::<3>::from_fn(|_, _| r.gen_range(-1.0..1.0));
    scale * dev(&(m + m.transpose()))
}

#[test]
fn kirchhoff_vjp_matches_finite_differences() {
    let m = solid();
    let mut r = common::rng(11);
    for _ in 0..20 {
        let f = common::random_f3(&mut r, 0.2);
        let hist: Vec<_> = (0..3).map(|_| random_dev(&mut r, 1e5)).collect();
        let w = Matrix::<3>::from_fn(|_, _| r.gen_range(-1.0..1.0));
        let mut f_bar = Matrix::zeros();
        let mut h_bar = vec![Matrix::zeros(); 3];
        solid_kirchhoff_vjp(&f, &hist, &m, &w, &mut f_bar, &mut h_bar);

        let dir = Matrix::<3>::from_fn(|_, _| r.gen_range(-1.0..1.0));
        let eps = 1e-6;
        let fd = (ddot(&solid_kirchhoff(&(f + eps * dir), &hist, &m), &w)
            - ddot(&solid_kirchhoff(&(f - eps * dir), &hist, &m), &w))
            / (2.0 * eps);
        assert!(common::rel(ddot(&f_bar, &dir), fd) < 1e-6, "{} vs {fd}", ddot(&f_bar, &dir));

        let hdir = random_dev(&mut r, 1.0);
        let mut bumped = hist.clone();
        bumped[1] += hdir;
        let exact = ddot(&(solid_kirchhoff(&f, &bumped, &m) - solid_kirchhoff(&f, &hist, &m)), &w);
        assert!(common::rel(ddot(&h_bar[1], &hdir), exact) < 1e-6);
    }
}

#[test]
fn history_vjp_matches_finite_differences() {
    let m = solid();
    let dt = 1e-4;
    let mut r = common::rng(12);
    for _ in 0..20 {
        let f0 = common::random_f3(&mut r, 0.2);
        let f1 = f0 + Matrix::<3>::from_fn(|_, _| r.gen_range(-0.01..0.01));
        let hist: Vec<_> = (0..3).map(|_| random_dev(&mut r, 1e5)).collect();
        let w: Vec<_> = (0..3).map(|_| Matrix::<3>::from_fn(|_, _| r.gen_range(-1.0..1.0))).collect();
        let loss = |a: &Matrix<3>, b: &Matrix<3>, h: &[Matrix<3>]| {
            let mut h = h.to_vec();
            advance_history(a, b, &mut h, &m, dt).unwrap();
            h.iter().zip(&w).map(|(x, y)| ddot(x, y)).sum::<f64>()
        };
        let (mut a_bar, mut b_bar) = (Matrix::zeros(), Matrix::zeros());
        let mut h_bar = vec![Matrix::zeros(); 3];
        advance_history_vjp(&f0, &f1, &hist, &m, dt, &w, &mut a_bar, &mut b_bar, &mut h_bar);

        let eps = 1e-6;
        let dir = Matrix::<3>::from_fn(|_, _| r.gen_range(-1.0..1.0));
        let fd_a = (loss(&(f0 + eps * dir), &f1, &hist) - loss(&(f0 - eps * dir), &f1, &hist)) / (2.0 * eps);
        let fd_b = (loss(&f0, &(f1 + eps * dir), &hist) - loss(&f0, &(f1 - eps * dir), &hist)) / (2.0 * eps);
        assert!(common::rel(ddot(&a_bar, &dir), fd_a) < 1e-5);
        assert!(common::rel(ddot(&b_bar, &dir), fd_b) < 1e-5);
    }
}

#[test]
fn elastic_kirchhoff_is_symmetric_and_zero_at_rest() {
    let m = solid();
    assert!(solid_kirchhoff(&Matrix::<3>::identity(), &[], &m).norm() < 1e-9);
    let mut r = common::rng(13);
    for _ in 0..50 {
        let t = solid_kirchhoff(&common::random_f3(&mut r, 0.3), &[], &m);
        assert!((t - t.transpose()).norm() <= 1e-10 * t.norm());
    }
}

#[test]
fn fluid_pressure_has_positive_bulk_stiffness() {
    let air = FluidMaterial {
        bulk_modulus: 0.14e6,
        shear_viscosity: 1.83e-5,
        volume_viscosity: 0.0,
        density: 100.0,
    };
    let l = Matrix::<3>::zeros();
    let squeezed = fluid_kirchhoff(&(0.98 * Matrix::<3>::identity()), &l, &air, 0.0);
    let stretched = fluid_kirchhoff(&(1.02 * Matrix::<3>::identity()), &l, &air, 0.0);
    // compressed air pushes outward (negative stress), expanded air pulls
    assert!(squeezed[(0, 0)] < 0.0 && stretched[(0, 0)] > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kirchhoff_is_objective(seed in any::<u64>()) {
        let m = solid();
        let mut r = common::rng(seed);
        let f = common::random_f3(&mut r, 0.25);
        let q = common::random_rotation(&mut r).into_inner();
        let hist: Vec<_> = (0..3).map(|_| random_dev(&mut r, 1e5)).collect();
        let rotated: Vec<_> = hist.iter().map(|h| q * h * q.transpose()).collect();
        let a = solid_kirchhoff(&(q * f), &rotated, &m);
        let b = q * solid_kirchhoff(&f, &hist, &m) * q.transpose();
        prop_assert!((a - b).norm() <= 1e-9 * b.norm().max(1.0));
    }

    #[test]
    fn history_stays_deviatoric_in_stress(seed in any::<u64>()) {
        let m = solid();
        let mut r = common::rng(seed);
        let mut hist = vec![Matrix::<3>::zeros(); 3];
        let mut f = Matrix::<3>::identity();
        for _ in 0..20 {
            let next = f + Matrix::<3>::from_fn(|_, _| r.gen_range(-0.01..0.01));
            advance_history(&f, &next, &mut hist, &m, 1e-4).unwrap();
            f = next;
        }
        let elastic_only = SolidMaterial { prony: PronySeries::new(m.prony.g_inf, m.prony.elements.iter().map(|e| soromorph::prony::PronyElement { g: 0.0, tau: e.tau }).collect()).unwrap(), ..m.clone() };
        let viscous = solid_kirchhoff(&f, &hist, &m) - solid_kirchhoff(&f, &hist, &elastic_only);
        prop_assert!(viscous.trace().abs() <= 1e-9 * viscous.norm().max(1.0));
    }
}
