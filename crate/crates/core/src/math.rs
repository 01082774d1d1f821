//! Small dense linear algebra over fixed spatial dimension `D` (2 or 3).
//!
//! nalgebra's generic `determinant`/`try_inverse` need dimension bounds that
//! do not compose well with plain const generics, so the handful of
//! operations the simulator needs are written out here for `D ∈ {2, 3}`.

use nalgebra::{SMatrix, SVector};

pub type Vector<const D: usize> = SVector<f64, D>;
pub type Matrix<const D: usize> = SMatrix<f64, D, D>;

pub fn det<const D: usize>(m: &Matrix<D>) -> f64 {
    match D {
        1 => m[(0, 0)],
        2 => m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)],
        3 => {
            m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
                - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
                + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)])
        }
        _ => panic!("unsupported dimension {D}"),
    }
}

/// Cofactor matrix, so that `inverse = cofactor^T / det` and
/// `d det / dM = cofactor`.
pub fn cofactor<const D: usize>(m: &Matrix<D>) -> Matrix<D> {
    let mut c = Matrix::<D>::zeros();
    match D {
        1 => c[(0, 0)] = 1.0,
        2 => {
            c[(0, 0)] = m[(1, 1)];
            c[(0, 1)] = -m[(1, 0)];
            c[(1, 0)] = -m[(0, 1)];
            c[(1, 1)] = m[(0, 0)];
        }
        3 => {
            for i in 0..3 {
                for j in 0..3 {
                    let (i1, i2) = ((i + 1) % 3, (i + 2) % 3);
                    let (j1, j2) = ((j + 1) % 3, (j + 2) % 3);
                    c[(i, j)] = m[(i1, j1)] * m[(i2, j2)] - m[(i1, j2)] * m[(i2, j1)];
                }
            }
        }
        _ => panic!("unsupported dimension {D}"),
    }
    c
}

/// Inverse, or `None` when the determinant is zero or not finite.
pub fn inverse<const D: usize>(m: &Matrix<D>) -> Option<Matrix<D>> {
    let d = det(m);
    if d == 0.0 || !d.is_finite() {
        return None;
    }
    Some(cofactor(m).transpose() / d)
}

/// Deviatoric part `A - tr(A)/D * I`.
pub fn dev<const D: usize>(m: &Matrix<D>) -> Matrix<D> {
    let mut out = *m;
    let mean = m.trace() / D as f64;
    for i in 0..D {
        out[(i, i)] -= mean;
    }
    out
}

/// Frobenius inner product `A : B`.
pub fn ddot<const D: usize>(a: &Matrix<D>, b: &Matrix<D>) -> f64 {
    a.component_mul(b).sum()
}

pub fn is_finite_mat<const D: usize>(m: &Matrix<D>) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn is_finite_vec<const D: usize>(v: &Vector<D>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Number of nodes in a quadratic B-spline stencil.
pub const fn stencil_len(d: usize) -> usize {
    let mut n = 1;
    let mut i = 0;
    while i < d {
        n *= 3;
        i += 1;
    }
    n
}

/// Offset `k` (0 ≤ k < 3^D) decoded as per-axis digits in {0,1,2}.
#[inline]
pub fn stencil_offset<const D: usize>(mut k: usize) -> [usize; D] {
    let mut o = [0usize; D];
    for item in o.iter_mut() {
        *item = k % 3;
        k /= 3;
    }
    o
}
