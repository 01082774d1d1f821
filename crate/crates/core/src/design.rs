//! Design parametrization: raw variables `φ` per design particle, a
//! linear-hat density filter, tanh projection to `γ ∈ [0, 1]`, the
//! grayness constraint, symmetry averaging, and the travel objective.
//!
//! ```text
//! φ̃_p = Σ_q W_pq φ_q,          W_pq ∝ (1 - r_pq/R)³, rows sum to 1
//! γ_p = ½ (tanh(β φ̃_p) / tanh β + 1)
//! C   = (1/N) Σ_p γ_p (1 - γ_p)
//! L   = (x_g(t_end) - x_g(t_start)) · e
//! ```

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vector;

/// Mass-weighted center of `(position, mass)` pairs.
pub fn center_of_gravity<const D: usize>(
    points: impl IntoIterator<Item = (Vector<D>, f64)>,
) -> Result<Vector<D>> {
    let (sum, mass) = points
        .into_iter()
        .fold((Vector::<D>::zeros(), 0.0), |(s, m), (x, w)| (s + w * x, m + w));
    if !(mass > 0.0) {
        return Err(Error::DegenerateDesign("total design mass is zero".into()));
    }
    Ok(sum / mass)
}

/// Displacement of the center of gravity along `direction`.
pub fn objective_value<const D: usize>(
    xg_start: &Vector<D>,
    xg_end: &Vector<D>,
    direction: &Vector<D>,
) -> f64 {
    (xg_end - xg_start).dot(direction)
}

/// Raw variables together with their filtered and projected images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignField {
    pub phi: Vec<f64>,
    pub filtered: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl DesignField {
    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }
}

/// Sparse row-normalized filter matrix over design particles.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterKernel {
    pub radius: f64,
    rows: Vec<Vec<(usize, f64)>>,
}

impl FilterKernel {
    /// Build from undeformed design-particle positions. Neighbor search
    /// uses cell hashing with cell size `radius`.
    pub fn build<const D: usize>(positions: &[Vector<D>], radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::Parameter(format!("filter radius must be > 0, got {radius}")));
        }
        let cell_of = |x: &Vector<D>| -> [i64; D] {
            let mut c = [0i64; D];
            for d in 0..D {
                c[d] = (x[d] / radius).floor() as i64;
            }
            c
        };
        let mut cells: HashMap<[i64; D], Vec<usize>> = HashMap::new();
        for (i, x) in positions.iter().enumerate() {
            cells.entry(cell_of(x)).or_default().push(i);
        }
        let n_nb = 3usize.pow(D as u32);
        let rows = positions
            .iter()
            .map(|x| {
                let c = cell_of(x);
                let mut row = Vec::new();
                for k in 0..n_nb {
                    let mut key = c;
                    let mut r = k;
                    for item in key.iter_mut() {
                        *item += (r % 3) as i64 - 1;
                        r /= 3;
                    }
                    if let Some(list) = cells.get(&key) {
                        for &j in list {
                            let dist = (positions[j] - x).norm();
                            if dist < radius {
                                row.push((j, (1.0 - dist / radius).powi(3)));
                            }
                        }
                    }
                }
                row.sort_by_key(|&(j, _)| j);
                let total: f64 = row.iter().map(|&(_, w)| w).sum();
                row.iter_mut().for_each(|(_, w)| *w /= total);
                row
            })
            .collect();
        Ok(FilterKernel { radius, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }
}

pub fn apply_filter(kernel: &FilterKernel, phi: &[f64]) -> Result<Vec<f64>> {
    check_len(kernel.len(), phi.len())?;
    Ok(kernel
        .rows
        .iter()
        .map(|row| row.iter().map(|&(j, w)| w * phi[j]).sum())
        .collect())
}

/// `W^T g`, the filter's vector-Jacobian product.
pub fn apply_filter_transpose(kernel: &FilterKernel, grad: &[f64]) -> Result<Vec<f64>> {
    check_len(kernel.len(), grad.len())?;
    let mut out = vec![0.0; grad.len()];
    for (i, row) in kernel.rows.iter().enumerate() {
        for &(j, w) in row {
            out[j] += w * grad[i];
        }
    }
    Ok(out)
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Validation(format!(
            "design vector has {got} entries, expected {expected}"
        )));
    }
    Ok(())
}

pub fn project(filtered: f64, beta: f64) -> f64 {
    0.5 * ((beta * filtered).tanh() / beta.tanh() + 1.0)
}

/// `dγ/dφ̃`.
pub fn project_derivative(filtered: f64, beta: f64) -> f64 {
    let t = (beta * filtered).tanh();
    0.5 * beta * (1.0 - t * t) / beta.tanh()
}

pub fn constraint_value(gamma: &[f64]) -> Result<f64> {
    if gamma.is_empty() {
        return Err(Error::DegenerateDesign("design has no particles".into()));
    }
    Ok(gamma.iter().map(|g| g * (1.0 - g)).sum::<f64>() / gamma.len() as f64)
}

/// `dC/dγ_p`.
pub fn constraint_gradient(gamma: &[f64]) -> Vec<f64> {
    let n = gamma.len() as f64;
    gamma.iter().map(|g| (1.0 - 2.0 * g) / n).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SymmetryPlane {
    /// Axis normal to the plane.
    pub axis: usize,
    pub coordinate: f64,
}

/// Mirror partner of every design particle for each symmetry plane.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetryMap {
    pub planes: Vec<SymmetryPlane>,
    mirrors: Vec<Vec<usize>>,
}

impl SymmetryMap {
    /// Pair particles by reflecting positions; `tolerance` is the matching
    /// distance, typically a fraction of the particle spacing.
    pub fn build<const D: usize>(
        positions: &[Vector<D>],
        planes: &[SymmetryPlane],
        tolerance: f64,
    ) -> Result<Self> {
        if !(tolerance > 0.0) {
            return Err(Error::Parameter("symmetry tolerance must be > 0".into()));
        }
        let key = |x: &Vector<D>| -> [i64; D] {
            let mut k = [0i64; D];
            for d in 0..D {
                k[d] = (x[d] / tolerance).round() as i64;
            }
            k
        };
        let lookup: HashMap<[i64; D], usize> =
            positions.iter().enumerate().map(|(i, x)| (key(x), i)).collect();
        let mut mirrors = Vec::with_capacity(planes.len());
        for plane in planes {
            if plane.axis >= D {
                return Err(Error::Parameter(format!(
                    "symmetry axis {} out of range for {D}D",
                    plane.axis
                )));
            }
            let map = positions
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let mut m = *x;
                    m[plane.axis] = 2.0 * plane.coordinate - x[plane.axis];
                    let k = key(&m);
                    // rounding can straddle a bin edge; probe neighbors
                    let found = lookup.get(&k).copied().or_else(|| {
                        (0..3usize.pow(D as u32)).find_map(|c| {
                            let mut kk = k;
                            let mut r = c;
                            for item in kk.iter_mut() {
                                *item += (r % 3) as i64 - 1;
                                r /= 3;
                            }
                            lookup
                                .get(&kk)
                                .copied()
                                .filter(|&j| (positions[j] - m).norm() <= tolerance)
                        })
                    });
                    found.ok_or_else(|| {
                        Error::Validation(format!(
                            "design particle {i} has no mirror across axis {} at {}",
                            plane.axis, plane.coordinate
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            mirrors.push(map);
        }
        Ok(SymmetryMap {
            planes: planes.to_vec(),
            mirrors,
        })
    }

    pub fn identity() -> Self {
        SymmetryMap {
            planes: Vec::new(),
            mirrors: Vec::new(),
        }
    }

    pub fn mirror(&self, plane: usize, i: usize) -> usize {
        self.mirrors[plane][i]
    }

    /// Average values with their mirrors, one plane after another.
    pub fn symmetrize(&self, values: &mut [f64]) {
        for map in &self.mirrors {
            let copy = values.to_vec();
            for (i, v) in values.iter_mut().enumerate() {
                *v = 0.5 * (copy[i] + copy[map[i]]);
            }
        }
    }
}

pub fn symmetrize_gradient(grad: &[f64], symmetry: &SymmetryMap) -> Vec<f64> {
    let mut out = grad.to_vec();
    symmetry.symmetrize(&mut out);
    out
}

/// Filter, projection and symmetry bundled for the optimizer.
#[derive(Debug, Clone)]
pub struct DesignPipeline {
    pub kernel: FilterKernel,
    pub beta: f64,
    pub symmetry: SymmetryMap,
}

impl DesignPipeline {
    pub fn new(kernel: FilterKernel, beta: f64, symmetry: SymmetryMap) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::Parameter(format!("projection sharpness must be > 0, got {beta}")));
        }
        Ok(DesignPipeline {
            kernel,
            beta,
            symmetry,
        })
    }

    pub fn n_design(&self) -> usize {
        self.kernel.len()
    }

    pub fn forward(&self, phi: &[f64]) -> Result<DesignField> {
        if let Some(i) = phi.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                what: format!("design variable {i}"),
                step: 0,
            });
        }
        let filtered = apply_filter(&self.kernel, phi)?;
        let gamma = filtered.iter().map(|&f| project(f, self.beta)).collect();
        Ok(DesignField {
            phi: phi.to_vec(),
            filtered,
            gamma,
        })
    }

    /// Pull `∂/∂γ` back to `∂/∂φ`. Symmetry averaging is left to the
    /// caller so the raw gradient stays comparable to finite differences.
    pub fn backward(&self, field: &DesignField, grad_gamma: &[f64]) -> Result<Vec<f64>> {
        check_len(field.len(), grad_gamma.len())?;
        let through_projection: Vec<f64> = field
            .filtered
            .iter()
            .zip(grad_gamma)
            .map(|(&f, &g)| g * project_derivative(f, self.beta))
            .collect();
        apply_filter_transpose(&self.kernel, &through_projection)
    }
}
