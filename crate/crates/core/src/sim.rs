//! MLS-MPM time integration shared by solids and chamber fluid.
//!
//! Quadratic B-spline weights on a uniform grid of spacing `h` with nodes at
//! `i·h`. For particle `p` and stencil node `i`, `w_ip` is the weight and
//! `d_ip = x_i - x_p`. With `D_p^{-1} = 4/h²` (quadratic kernel) one step is
//!
//! ```text
//! A_p   = -dt V0_p (4/h²) τ_p + m_p C_p          τ_p = J σ_p (Kirchhoff)
//! m_i   = Σ_p w_ip m_p
//! q_i   = Σ_p w_ip (m_p v_p + A_p d_ip)
//! v_i   = q_i / m_i + dt g,  then v_i = 0 at boundary nodes where v_i·n < 0
//! v_p'  = Σ_i w_ip v_i
//! C_p'  = (4/h²) Σ_i w_ip v_i ⊗ d_ip
//! x_p'  = x_p + dt v_p'
//! F_p'  = (I + dt C_p') F_p
//! ```
//!
//! after which the Maxwell histories of solid particles are advanced from
//! `F_p` to `F_p'`. `C_p` doubles as the APIC affine velocity and the
//! velocity gradient used by the viscous fluid stress.
//!
//! The scatter runs serially in [`ScatterMode::Deterministic`], which makes
//! every step bit-reproducible; the adjoint relies on that when it replays
//! forward segments.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constitutive::{
    advance_history, fluid_kirchhoff, interpolation_factor, sample_actuation, solid_kirchhoff,
    ActuationWaveform, FluidMaterial, SolidMaterial,
};
use crate::design::center_of_gravity;
use crate::error::{Error, Result};
use crate::math::{det, is_finite_mat, stencil_len, stencil_offset, Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    /// Solid inside the design domain; carries a design index.
    Design,
    /// Chamber wall, always full solid.
    Wall,
    /// Chamber air.
    Fluid,
}

/// Time-varying particle state. Also used, with the same layout, for the
/// adjoint of that state.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicState<const D: usize> {
    pub position: Vec<Vector<D>>,
    pub velocity: Vec<Vector<D>>,
    pub affine: Vec<Matrix<D>>,
    pub deformation: Vec<Matrix<D>>,
    /// `n_particles * n_elements` Maxwell histories, particle-major.
    pub history: Vec<Matrix<D>>,
    pub n_elements: usize,
}

impl<const D: usize> KinematicState<D> {
    pub fn zeros(n: usize, n_elements: usize) -> Self {
        KinematicState {
            position: vec![Vector::zeros(); n],
            velocity: vec![Vector::zeros(); n],
            affine: vec![Matrix::zeros(); n],
            deformation: vec![Matrix::zeros(); n],
            history: vec![Matrix::zeros(); n * n_elements],
            n_elements,
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    pub fn history_of(&self, p: usize) -> &[Matrix<D>] {
        &self.history[p * self.n_elements..(p + 1) * self.n_elements]
    }

    pub fn set_zero(&mut self) {
        self.position.iter_mut().for_each(|v| *v = Vector::zeros());
        self.velocity.iter_mut().for_each(|v| *v = Vector::zeros());
        self.affine.iter_mut().for_each(|m| *m = Matrix::zeros());
        self.deformation.iter_mut().for_each(|m| *m = Matrix::zeros());
        self.history.iter_mut().for_each(|m| *m = Matrix::zeros());
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(crate::math::is_finite_vec)
            && self.velocity.iter().all(crate::math::is_finite_vec)
            && self.affine.iter().all(is_finite_mat)
            && self.deformation.iter().all(is_finite_mat)
            && self.history.iter().all(is_finite_mat)
    }

    /// Approximate size in bytes, for checkpoint memory estimates.
    pub fn byte_size(&self) -> usize {
        let n = self.len();
        8 * (n * (2 * D + 2 * D * D) + self.history.len() * D * D)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet<const D: usize> {
    pub state: KinematicState<D>,
    /// Reference volume V0 (m³ in 3D, m² in 2D).
    pub volume0: Vec<f64>,
    pub mass: Vec<f64>,
    /// Multiplier on the solid stress from the fictitious density.
    pub modulus_scale: Vec<f64>,
    pub phase: Vec<Phase>,
    pub design_index: Vec<Option<usize>>,
}

impl<const D: usize> ParticleSet<D> {
    pub fn len(&self) -> usize {
        self.phase.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phase.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn total_momentum(&self) -> Vector<D> {
        self.mass
            .iter()
            .zip(&self.state.velocity)
            .fold(Vector::zeros(), |acc, (m, v)| acc + *m * v)
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.mass
            .iter()
            .zip(&self.state.velocity)
            .map(|(m, v)| 0.5 * m * v.norm_squared())
            .sum()
    }

    pub fn n_design(&self) -> usize {
        self.design_index.iter().filter(|d| d.is_some()).count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let s = &self.state;
        if [
            s.position.len(),
            s.velocity.len(),
            s.affine.len(),
            s.deformation.len(),
            self.volume0.len(),
            self.mass.len(),
            self.modulus_scale.len(),
            self.design_index.len(),
        ]
        .iter()
        .any(|&l| l != n)
            || s.history.len() != n * s.n_elements
        {
            return Err(Error::Validation("particle arrays have inconsistent lengths".into()));
        }
        for p in 0..n {
            if !(self.mass[p] > 0.0) {
                return Err(Error::Validation(format!("particle {p} has mass <= 0")));
            }
            match (self.phase[p], self.design_index[p]) {
                (Phase::Design, None) => {
                    return Err(Error::Validation(format!("design particle {p} has no design index")))
                }
                (Phase::Wall | Phase::Fluid, Some(_)) => {
                    return Err(Error::Validation(format!(
                        "non-design particle {p} carries a design index"
                    )))
                }
                _ => {}
            }
            if det(&s.deformation[p]) <= 0.0 {
                return Err(Error::Validation(format!("particle {p} has det F <= 0")));
            }
        }
        Ok(())
    }

    /// Positions and masses of design particles, for the center of gravity.
    pub fn design_mass_points(&self) -> impl Iterator<Item = (Vector<D>, f64)> + '_ {
        (0..self.len())
            .filter(|&p| self.phase[p] == Phase::Design)
            .map(|p| (self.state.position[p], self.mass[p]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridField<const D: usize> {
    pub resolution: [usize; D],
    pub spacing: f64,
    pub mass: Vec<f64>,
    pub momentum: Vec<Vector<D>>,
    /// Node velocity after gravity and boundary clamp.
    pub velocity: Vec<Vector<D>>,
    pub clamped: Vec<bool>,
    strides: [usize; D],
}

impl<const D: usize> GridField<D> {
    pub fn new(resolution: [usize; D], spacing: f64) -> Self {
        let mut strides = [1usize; D];
        for d in 1..D {
            strides[d] = strides[d - 1] * resolution[d - 1];
        }
        let n: usize = resolution.iter().product();
        GridField {
            resolution,
            spacing,
            mass: vec![0.0; n],
            momentum: vec![Vector::zeros(); n],
            velocity: vec![Vector::zeros(); n],
            clamped: vec![false; n],
            strides,
        }
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    pub fn clear(&mut self) {
        self.mass.iter_mut().for_each(|m| *m = 0.0);
        self.momentum.iter_mut().for_each(|v| *v = Vector::zeros());
        self.velocity.iter_mut().for_each(|v| *v = Vector::zeros());
        self.clamped.iter_mut().for_each(|c| *c = false);
    }

    pub fn index(&self, idx: &[usize; D]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn node_position(&self, flat: usize) -> Vector<D> {
        let mut rem = flat;
        let mut x = Vector::zeros();
        for d in (0..D).rev() {
            let i = rem / self.strides[d];
            rem %= self.strides[d];
            x[d] = i as f64 * self.spacing;
        }
        x
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn total_momentum(&self) -> Vector<D> {
        self.momentum.iter().fold(Vector::zeros(), |a, b| a + b)
    }

    pub fn extent(&self) -> Vector<D> {
        Vector::from_fn(|d, _| (self.resolution[d] - 1) as f64 * self.spacing)
    }
}

/// Quadratic B-spline stencil of one particle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil<const D: usize> {
    pub base: [usize; D],
    pub fx: Vector<D>,
    pub w: [[f64; 3]; D],
    pub dw: [[f64; 3]; D],
}

impl<const D: usize> Stencil<D> {
    /// `None` if the 3^D stencil does not fit inside the grid.
    pub fn new(x: &Vector<D>, inv_h: f64, resolution: &[usize; D]) -> Option<Self> {
        let mut base = [0usize; D];
        let mut fx = Vector::zeros();
        let mut w = [[0.0; 3]; D];
        let mut dw = [[0.0; 3]; D];
        for d in 0..D {
            let xs = x[d] * inv_h;
            let b = (xs - 0.5).floor();
            if !(b >= 0.0) || b as usize + 2 >= resolution[d] {
                return None;
            }
            base[d] = b as usize;
            let f = xs - b;
            fx[d] = f;
            w[d] = [
                0.5 * (1.5 - f) * (1.5 - f),
                0.75 - (f - 1.0) * (f - 1.0),
                0.5 * (f - 0.5) * (f - 0.5),
            ];
            dw[d] = [(f - 1.5) * inv_h, -2.0 * (f - 1.0) * inv_h, (f - 0.5) * inv_h];
        }
        Some(Stencil { base, fx, w, dw })
    }

    #[inline]
    pub fn weight(&self, o: &[usize; D]) -> f64 {
        (0..D).map(|d| self.w[d][o[d]]).product()
    }

    /// Spatial gradient `∂w/∂x_p`.
    #[inline]
    pub fn weight_grad(&self, o: &[usize; D]) -> Vector<D> {
        Vector::from_fn(|a, _| {
            (0..D)
                .map(|d| if d == a { self.dw[d][o[d]] } else { self.w[d][o[d]] })
                .product()
        })
    }

    /// `x_i - x_p`.
    #[inline]
    pub fn dpos(&self, o: &[usize; D], h: f64) -> Vector<D> {
        Vector::from_fn(|d, _| (o[d] as f64 - self.fx[d]) * h)
    }

    #[inline]
    pub fn node(&self, o: &[usize; D], grid: &GridField<D>) -> usize {
        (0..D).map(|d| (self.base[d] + o[d]) * grid.strides[d]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane<const D: usize> {
    pub point: Vector<D>,
    /// Unit normal pointing from the obstacle into the domain.
    pub normal: Vector<D>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BoundarySet<const D: usize> {
    pub planes: Vec<Plane<D>>,
}

impl<const D: usize> BoundarySet<D> {
    pub fn none() -> Self {
        BoundarySet { planes: Vec::new() }
    }

    pub fn add(&mut self, point: Vector<D>, normal: Vector<D>) -> Result<()> {
        let n = normal.norm();
        if !(n > 0.0) {
            return Err(Error::Parameter("boundary normal must be nonzero".into()));
        }
        self.planes.push(Plane {
            point,
            normal: normal / n,
        });
        Ok(())
    }

    /// Nodes on or behind any plane take part in the no-slip clamp.
    pub fn is_boundary_node(&self, x: &Vector<D>) -> Option<&Plane<D>> {
        self.planes.iter().find(|p| (x - p.point).dot(&p.normal) <= 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimClock {
    pub dt: f64,
    pub step: usize,
    pub t_start: f64,
    pub t_end: f64,
}

impl SimClock {
    pub fn new(dt: f64, t_start: f64, t_end: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Parameter(format!("dt must be > 0, got {dt}")));
        }
        if !(t_start >= 0.0 && t_start <= t_end) {
            return Err(Error::Parameter(format!(
                "need 0 <= t_start <= t_end, got {t_start}, {t_end}"
            )));
        }
        Ok(SimClock {
            dt,
            step: 0,
            t_start,
            t_end,
        })
    }

    pub fn n_steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    pub fn start_step(&self) -> usize {
        (self.t_start / self.dt).round() as usize
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.dt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ScatterMode {
    /// Serial scatter in particle order, bit-reproducible.
    #[default]
    Deterministic,
    /// Per-worker scratch grids reduced in completion order.
    Parallel,
}

pub struct StepParams<'a, const D: usize> {
    pub solid: &'a SolidMaterial,
    pub fluid: &'a FluidMaterial,
    pub dt: f64,
    pub gravity: Vector<D>,
    pub boundaries: &'a BoundarySet<D>,
    pub p_act: f64,
    pub scatter: ScatterMode,
}

/// Per-particle intermediates of the last step, reused by the adjoint.
#[derive(Debug, Clone, Default)]
pub struct Workspace<const D: usize> {
    pub stencils: Vec<Option<Stencil<D>>>,
    /// Kirchhoff stress including the fictitious-density factor.
    pub kirchhoff: Vec<Matrix<D>>,
    pub affine_momentum: Vec<Matrix<D>>,
}

impl<const D: usize> Workspace<D> {
    pub fn new() -> Self {
        Workspace {
            stencils: Vec::new(),
            kirchhoff: Vec::new(),
            affine_momentum: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepReport {
    /// Grid nodes with mass whose velocity was zeroed by the clamp.
    pub clamped_nodes: usize,
}

#[inline]
pub fn inv_d_factor(h: f64) -> f64 {
    4.0 / (h * h)
}

fn stencil_for<const D: usize>(x: &Vector<D>, grid: &GridField<D>, p: usize, step: usize) -> Result<Stencil<D>> {
    Stencil::new(x, 1.0 / grid.spacing, &grid.resolution)
        .ok_or(Error::OutOfDomain { particle: p, step })
}

/// Kirchhoff stress of particle `p` in its current state.
pub fn particle_kirchhoff<const D: usize>(
    particles: &ParticleSet<D>,
    p: usize,
    solid: &SolidMaterial,
    fluid: &FluidMaterial,
    p_act: f64,
) -> Matrix<D> {
    let s = &particles.state;
    match particles.phase[p] {
        Phase::Fluid => fluid_kirchhoff(&s.deformation[p], &s.affine[p], fluid, p_act),
        Phase::Design | Phase::Wall => {
            particles.modulus_scale[p] * solid_kirchhoff(&s.deformation[p], s.history_of(p), solid)
        }
    }
}

/// Scatter mass and momentum (including the stress force and affine
/// momentum) from particles to `grid`. `stresses` are Cauchy stresses.
pub fn particle_to_grid<const D: usize>(
    particles: &ParticleSet<D>,
    stresses: &[Matrix<D>],
    grid: &mut GridField<D>,
    dt: f64,
) -> Result<()> {
    let n = particles.len();
    if stresses.len() != n {
        return Err(Error::Validation("one stress per particle required".into()));
    }
    let inv_d = inv_d_factor(grid.spacing);
    let mut ws = Workspace::new();
    ws.stencils = Vec::with_capacity(n);
    ws.kirchhoff = Vec::with_capacity(n);
    ws.affine_momentum = Vec::with_capacity(n);
    for (p, stress) in stresses.iter().enumerate() {
        if !is_finite_mat(stress) {
            return Err(Error::Numeric {
                what: format!("stress of particle {p}"),
                step: 0,
            });
        }
        let st = stencil_for(&particles.state.position[p], grid, p, 0)?;
        let tau = det(&particles.state.deformation[p]) * stress;
        ws.affine_momentum.push(
            -dt * particles.volume0[p] * inv_d * tau + particles.mass[p] * particles.state.affine[p],
        );
        ws.kirchhoff.push(tau);
        ws.stencils.push(Some(st));
    }
    scatter(particles, &ws, grid, ScatterMode::Deterministic);
    Ok(())
}

pub(crate) fn scatter<const D: usize>(
    particles: &ParticleSet<D>,
    ws: &Workspace<D>,
    grid: &mut GridField<D>,
    mode: ScatterMode,
) {
    grid.clear();
    let h = grid.spacing;
    let n_sten = stencil_len(D);
    match mode {
        ScatterMode::Deterministic => {
            for p in 0..particles.len() {
                let st = ws.stencils[p].as_ref().expect("stencil computed");
                let m = particles.mass[p];
                let mv = m * particles.state.velocity[p];
                let a = &ws.affine_momentum[p];
                for k in 0..n_sten {
                    let o = stencil_offset::<D>(k);
                    let w = st.weight(&o);
                    let i = st.node(&o, grid);
                    grid.mass[i] += w * m;
                    grid.momentum[i] += w * (mv + a * st.dpos(&o, h));
                }
            }
        }
        ScatterMode::Parallel => {
            let len = grid.len();
            let grid_ref = &*grid;
            let (mass, momentum) = (0..particles.len())
                .into_par_iter()
                .fold(
                    || (vec![0.0; len], vec![Vector::<D>::zeros(); len]),
                    |(mut ms, mut qs), p| {
                        let st = ws.stencils[p].as_ref().expect("stencil computed");
                        let m = particles.mass[p];
                        let mv = m * particles.state.velocity[p];
                        let a = &ws.affine_momentum[p];
                        for k in 0..n_sten {
                            let o = stencil_offset::<D>(k);
                            let w = st.weight(&o);
                            let i = st.node(&o, grid_ref);
                            ms[i] += w * m;
                            qs[i] += w * (mv + a * st.dpos(&o, h));
                        }
                        (ms, qs)
                    },
                )
                .reduce(
                    || (vec![0.0; len], vec![Vector::<D>::zeros(); len]),
                    |(mut a, mut b), (c, e)| {
                        a.iter_mut().zip(c).for_each(|(x, y)| *x += y);
                        b.iter_mut().zip(e).for_each(|(x, y)| *x += y);
                        (a, b)
                    },
                );
            grid.mass = mass;
            grid.momentum = momentum;
        }
    }
}

/// Momentum to velocity, gravity, and the no-slip clamp (`v = 0` where
/// `v·n < 0` at boundary nodes). Returns the number of clamped nodes.
pub fn grid_update<const D: usize>(
    grid: &mut GridField<D>,
    gravity: &Vector<D>,
    boundaries: &BoundarySet<D>,
    dt: f64,
) -> usize {
    let h = grid.spacing;
    let strides = grid.strides;
    let GridField {
        mass,
        momentum,
        velocity,
        clamped,
        ..
    } = grid;
    velocity
        .par_iter_mut()
        .zip(clamped.par_iter_mut())
        .enumerate()
        .map(|(i, (v, c))| {
            *c = false;
            if mass[i] <= 0.0 {
                *v = Vector::zeros();
                return 0;
            }
            *v = momentum[i] / mass[i] + dt * gravity;
            if boundaries.planes.is_empty() {
                return 0;
            }
            let x = node_position(i, &strides, h);
            for plane in &boundaries.planes {
                if (x - plane.point).dot(&plane.normal) <= 0.0 && v.dot(&plane.normal) < 0.0 {
                    *v = Vector::zeros();
                    *c = true;
                    return 1;
                }
            }
            0
        })
        .sum()
}

fn node_position<const D: usize>(flat: usize, strides: &[usize; D], h: f64) -> Vector<D> {
    let mut rem = flat;
    let mut x = Vector::zeros();
    for d in (0..D).rev() {
        let i = rem / strides[d];
        rem %= strides[d];
        x[d] = i as f64 * h;
    }
    x
}

/// Gather velocities back to particles, advect, and update `F`.
/// Leaves Maxwell histories untouched.
pub fn grid_to_particle<const D: usize>(
    grid: &GridField<D>,
    particles: &mut ParticleSet<D>,
    dt: f64,
    step: usize,
) -> Result<()> {
    let stencils: Vec<Stencil<D>> = particles
        .state
        .position
        .iter()
        .enumerate()
        .map(|(p, x)| stencil_for(x, grid, p, step))
        .collect::<Result<_>>()?;
    gather(grid, &stencils, &mut particles.state, dt, step, None)
}

fn gather<const D: usize>(
    grid: &GridField<D>,
    stencils: &[Stencil<D>],
    state: &mut KinematicState<D>,
    dt: f64,
    step: usize,
    old_f: Option<&mut Vec<Matrix<D>>>,
) -> Result<()> {
    let h = grid.spacing;
    let inv_d = inv_d_factor(h);
    let n_sten = stencil_len(D);
    if let Some(old) = old_f {
        old.clone_from(&state.deformation);
    }
    let KinematicState {
        position,
        velocity,
        affine,
        deformation,
        ..
    } = state;
    position
        .par_iter_mut()
        .zip(velocity.par_iter_mut())
        .zip(affine.par_iter_mut())
        .zip(deformation.par_iter_mut())
        .enumerate()
        .try_for_each(|(p, (((x, v), c), f))| {
            let st = &stencils[p];
            let mut vn = Vector::<D>::zeros();
            let mut b = Matrix::<D>::zeros();
            for k in 0..n_sten {
                let o = stencil_offset::<D>(k);
                let w = st.weight(&o);
                let vi = grid.velocity[st.node(&o, grid)];
                vn += w * vi;
                b += w * vi * st.dpos(&o, h).transpose();
            }
            let cn = inv_d * b;
            let fnew = (Matrix::<D>::identity() + dt * cn) * *f;
            let j = det(&fnew);
            if !(j > 0.0) {
                return Err(if j.is_finite() {
                    Error::Inversion {
                        particle: p,
                        step,
                        det: j,
                    }
                } else {
                    Error::Numeric {
                        what: format!("deformation gradient of particle {p}"),
                        step,
                    }
                });
            }
            *v = vn;
            *c = cn;
            *f = fnew;
            *x += dt * vn;
            Ok(())
        })
}

/// Constitutive evaluation and affine momentum for every particle.
pub fn prepare<const D: usize>(
    particles: &ParticleSet<D>,
    grid: &GridField<D>,
    params: &StepParams<D>,
    ws: &mut Workspace<D>,
    step: usize,
) -> Result<()> {
    let n = particles.len();
    let inv_d = inv_d_factor(grid.spacing);
    let dt = params.dt;
    let results: Vec<(Option<Stencil<D>>, Matrix<D>, Matrix<D>)> = (0..n)
        .into_par_iter()
        .map(|p| {
            let st = Stencil::new(&particles.state.position[p], 1.0 / grid.spacing, &grid.resolution);
            let tau = particle_kirchhoff(particles, p, params.solid, params.fluid, params.p_act);
            let a = -dt * particles.volume0[p] * inv_d * tau + particles.mass[p] * particles.state.affine[p];
            (st, tau, a)
        })
        .collect();
    ws.stencils.clear();
    ws.kirchhoff.clear();
    ws.affine_momentum.clear();
    for (p, (st, tau, a)) in results.into_iter().enumerate() {
        if st.is_none() {
            return Err(Error::OutOfDomain { particle: p, step });
        }
        if !is_finite_mat(&a) {
            return Err(Error::Numeric {
                what: format!("stress of particle {p}"),
                step,
            });
        }
        ws.stencils.push(st);
        ws.kirchhoff.push(tau);
        ws.affine_momentum.push(a);
    }
    Ok(())
}

/// One full MPM step: stress, P2G, grid update, G2P, Maxwell advance.
pub fn step<const D: usize>(
    particles: &mut ParticleSet<D>,
    grid: &mut GridField<D>,
    params: &StepParams<D>,
    ws: &mut Workspace<D>,
    step_index: usize,
) -> Result<StepReport> {
    prepare(particles, grid, params, ws, step_index)?;
    scatter(particles, ws, grid, params.scatter);
    let clamped_nodes = grid_update(grid, &params.gravity, params.boundaries, params.dt);
    let stencils: Vec<Stencil<D>> = ws.stencils.iter().map(|s| s.unwrap()).collect();
    let mut old_f = Vec::new();
    gather(grid, &stencils, &mut particles.state, params.dt, step_index, Some(&mut old_f))?;
    advance_histories(particles, &old_f, params.solid, params.dt, step_index)?;
    Ok(StepReport { clamped_nodes })
}

fn advance_histories<const D: usize>(
    particles: &mut ParticleSet<D>,
    old_f: &[Matrix<D>],
    solid: &SolidMaterial,
    dt: f64,
    step: usize,
) -> Result<()> {
    let ne = particles.state.n_elements;
    if ne == 0 {
        return Ok(());
    }
    let phase = &particles.phase;
    let deformation = &particles.state.deformation;
    particles
        .state
        .history
        .par_chunks_mut(ne)
        .enumerate()
        .try_for_each(|(p, h)| {
            if phase[p] == Phase::Fluid {
                return Ok(());
            }
            advance_history(&old_f[p], &deformation[p], h, solid, dt).map_err(|_| Error::Inversion {
                particle: p,
                step,
                det: det(&deformation[p]),
            })
        })
}

/// Wave speeds and the largest CFL-admissible time step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CflReport {
    /// P-wave speed of the solid at its instantaneous (all Maxwell
    /// elements active) modulus (m/s).
    pub solid_speed: f64,
    /// Pressure-wave speed of the fluid (m/s).
    pub fluid_speed: f64,
    pub dt_max: f64,
}

impl CflReport {
    pub fn admits(&self, dt: f64) -> bool {
        dt <= self.dt_max
    }

    pub fn max_speed(&self) -> f64 {
        self.solid_speed.max(self.fluid_speed)
    }
}

pub const DEFAULT_CFL_SAFETY: f64 = 0.5;

/// `c = sqrt(K_eff/ρ)` per material and `dt_max = safety·h/max(c)`.
pub fn stable_dt(
    solid: &SolidMaterial,
    fluid: &FluidMaterial,
    dim: usize,
    spacing: f64,
    safety: f64,
) -> Result<CflReport> {
    if !(solid.density > 0.0 && fluid.density > 0.0) {
        return Err(Error::Parameter("densities must be > 0".into()));
    }
    let k = solid.bulk_modulus(dim);
    if !(k > 0.0 && solid.mu > 0.0 && fluid.bulk_modulus > 0.0) {
        return Err(Error::Parameter("moduli must be > 0".into()));
    }
    if !(spacing > 0.0 && safety > 0.0) {
        return Err(Error::Parameter("spacing and safety factor must be > 0".into()));
    }
    let d = dim as f64;
    let mu_inst = solid.mu * solid.prony.instantaneous();
    let p_modulus = k + 2.0 * mu_inst * (d - 1.0) / d;
    let solid_speed = (p_modulus / solid.density).sqrt();
    let fluid_speed = (fluid.bulk_modulus / fluid.density).sqrt();
    Ok(CflReport {
        solid_speed,
        fluid_speed,
        dt_max: safety * spacing / solid_speed.max(fluid_speed),
    })
}

/// Everything needed to run one forward simulation of a design.
#[derive(Debug, Clone)]
pub struct Simulation<const D: usize> {
    /// Initial particles; design particles are re-weighted per design.
    pub template: ParticleSet<D>,
    pub resolution: [usize; D],
    pub spacing: f64,
    pub solid: SolidMaterial,
    pub fluid: FluidMaterial,
    pub waveform: ActuationWaveform,
    pub boundaries: BoundarySet<D>,
    pub gravity: Vector<D>,
    pub clock: SimClock,
    /// Unit travel direction of the objective.
    pub direction: Vector<D>,
    pub scatter: ScatterMode,
}

impl<const D: usize> Simulation<D> {
    pub fn n_steps(&self) -> usize {
        self.clock.n_steps()
    }

    pub fn start_step(&self) -> usize {
        self.clock.start_step()
    }

    pub fn n_design(&self) -> usize {
        self.template.n_design()
    }

    pub fn params(&self, step: usize) -> StepParams<'_, D> {
        let t = step as f64 * self.clock.dt;
        StepParams {
            solid: &self.solid,
            fluid: &self.fluid,
            dt: self.clock.dt,
            gravity: self.gravity,
            boundaries: &self.boundaries,
            p_act: sample_actuation(&self.waveform, t),
            scatter: self.scatter,
        }
    }

    pub fn new_grid(&self) -> GridField<D> {
        GridField::new(self.resolution, self.spacing)
    }

    /// Initial particles with design densities `gamma` applied to mass and
    /// stiffness of design particles.
    pub fn particles_for(&self, gamma: &[f64]) -> Result<ParticleSet<D>> {
        let n_design = self.n_design();
        if gamma.len() != n_design {
            return Err(Error::Validation(format!(
                "design has {} values, scenario has {} design particles",
                gamma.len(),
                n_design
            )));
        }
        let mut ps = self.template.clone();
        for p in 0..ps.len() {
            if let Some(di) = ps.design_index[p] {
                let g = gamma[di];
                if !(0.0..=1.0).contains(&g) {
                    return Err(Error::Domain {
                        value: g,
                        domain: "[0, 1]",
                    });
                }
                let s = interpolation_factor(g, self.solid.void_floor);
                ps.modulus_scale[p] = s;
                ps.mass[p] = s * self.solid.density * ps.volume0[p];
            }
        }
        Ok(ps)
    }
}

#[derive(Debug, Clone)]
#[derive(Default)]
pub struct ForwardOptions {
    /// Record a particle snapshot every this many steps (0 = never).
    pub snapshot_every: usize,
}


#[derive(Debug, Clone)]
pub struct Snapshot<const D: usize> {
    pub step: usize,
    pub time: f64,
    pub positions: Vec<Vector<D>>,
}

#[derive(Debug, Clone)]
pub struct TrajectorySummary<const D: usize> {
    pub xg_start: Vector<D>,
    pub xg_end: Vector<D>,
    pub objective: f64,
    /// Total interpolated mass of design particles.
    pub design_mass: f64,
    pub final_state: ParticleSet<D>,
    pub snapshots: Vec<Snapshot<D>>,
    pub clamp_activations: usize,
    pub peak_kinetic_energy: f64,
}

/// Simulate `t ∈ [0, t_end]` for design densities `gamma`.
pub fn run_forward<const D: usize>(
    sim: &Simulation<D>,
    gamma: &[f64],
    options: &ForwardOptions,
) -> Result<TrajectorySummary<D>> {
    let started = std::time::Instant::now();
    let mut particles = sim.particles_for(gamma)?;
    let mut grid = sim.new_grid();
    let mut ws = Workspace::new();
    let n_steps = sim.n_steps();
    let n_start = sim.start_step();
    let mut xg_start = None;
    let mut snapshots = Vec::new();
    let mut clamp_activations = 0;
    let mut peak_ke: f64 = 0.0;
    let wrap = |step: usize, e: Error| Error::Forward {
        step,
        seconds: started.elapsed().as_secs_f64(),
        source: Box::new(e),
    };
    for n in 0..n_steps {
        if n == n_start {
            xg_start = Some(center_of_gravity(particles.design_mass_points()).map_err(|e| wrap(n, e))?);
        }
        if options.snapshot_every > 0 && n % options.snapshot_every == 0 {
            snapshots.push(Snapshot {
                step: n,
                time: n as f64 * sim.clock.dt,
                positions: particles.state.position.clone(),
            });
        }
        let report = step(&mut particles, &mut grid, &sim.params(n), &mut ws, n).map_err(|e| wrap(n, e))?;
        clamp_activations += report.clamped_nodes;
        peak_ke = peak_ke.max(particles.kinetic_energy());
    }
    let xg_end = center_of_gravity(particles.design_mass_points()).map_err(|e| wrap(n_steps, e))?;
    let xg_start = xg_start.unwrap_or(xg_end);
    let objective = crate::design::objective_value(&xg_start, &xg_end, &sim.direction);
    if options.snapshot_every > 0 {
        snapshots.push(Snapshot {
            step: n_steps,
            time: n_steps as f64 * sim.clock.dt,
            positions: particles.state.position.clone(),
        });
    }
    let design_mass = particles.design_mass_points().map(|(_, m)| m).sum();
    Ok(TrajectorySummary {
        xg_start,
        xg_end,
        objective,
        design_mass,
        final_state: particles,
        snapshots,
        clamp_activations,
        peak_kinetic_energy: peak_ke,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prony::PronySeries;

    fn single_particle(x: Vector<2>, m: f64) -> ParticleSet<2> {
        let mut state = KinematicState::zeros(1, 0);
        state.position[0] = x;
        state.deformation[0] = Matrix::identity();
        ParticleSet {
            state,
            volume0: vec![1e-6],
            mass: vec![m],
            modulus_scale: vec![1.0],
            phase: vec![Phase::Wall],
            design_index: vec![None],
        }
    }

    #[test]
    fn particle_on_node_partitions_mass() {
        let h = 0.01;
        let ps = single_particle(Vector::<2>::new(5.0 * h, 7.0 * h), 2.5);
        let mut grid = GridField::new([16, 16], h);
        particle_to_grid(&ps, &[Matrix::zeros()], &mut grid, 1e-4).unwrap();
        assert!((grid.total_mass() - 2.5).abs() < 1e-15);
        let centre = grid.index(&[5, 7]);
        assert!((grid.mass[centre] - 2.5 * 0.75 * 0.75).abs() < 1e-15);
        assert_eq!(grid.momentum.iter().map(|q| q.norm()).sum::<f64>(), 0.0);
    }

    #[test]
    fn out_of_domain_names_particle() {
        let h = 0.01;
        let ps = single_particle(Vector::<2>::new(0.3 * h, 7.0 * h), 1.0);
        let mut grid = GridField::new([16, 16], h);
        let err = particle_to_grid(&ps, &[Matrix::zeros()], &mut grid, 1e-4).unwrap_err();
        assert!(matches!(err, Error::OutOfDomain { particle: 0, .. }));
        let err = particle_to_grid(&ps, &[Matrix::from_element(f64::NAN)], &mut grid, 1e-4).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
    }

    #[test]
    fn grid_update_gravity_and_clamp() {
        let h = 0.01;
        let mut grid = GridField::<3>::new([8, 8, 8], h);
        let interior = grid.index(&[4, 4, 4]);
        let ground_down = grid.index(&[4, 4, 1]);
        let ground_up = grid.index(&[5, 4, 1]);
        for &i in &[interior, ground_down, ground_up] {
            grid.mass[i] = 2.0;
        }
        grid.momentum[interior] = Vector::<3>::new(2.0, 0.0, 0.0);
        grid.momentum[ground_down] = Vector::<3>::new(0.4, 0.0, -0.2);
        grid.momentum[ground_up] = Vector::<3>::new(0.4, 0.0, 0.2);
        let mut b = BoundarySet::none();
        b.add(Vector::<3>::new(0.0, 0.0, 1.5 * h), Vector::<3>::new(0.0, 0.0, 1.0)).unwrap();
        let dt = 1e-5;
        let n = grid_update(&mut grid, &Vector::<3>::new(0.0, 0.0, -9.8), &b, dt);
        assert_eq!(n, 1);
        let v = grid.velocity[interior];
        assert!((v - Vector::<3>::new(1.0, 0.0, -9.8e-5)).norm() < 1e-15);
        assert_eq!(grid.velocity[ground_down], Vector::<3>::zeros());
        assert!((grid.velocity[ground_up] - Vector::<3>::new(0.2, 0.0, 0.1 - 9.8e-5)).norm() < 1e-15);
        // zero-mass nodes stay at rest
        assert_eq!(grid.velocity[grid.index(&[2, 2, 2])], Vector::<3>::zeros());
    }

    #[test]
    fn cfl_air_density() {
        let solid = SolidMaterial::from_youngs(0.44e6, 0.4, 1070.0, PronySeries::elastic(), 1e-6).unwrap();
        let mut air = FluidMaterial {
            bulk_modulus: 0.14e6,
            shear_viscosity: 1.83e-5,
            volume_viscosity: 0.0,
            density: 100.0,
        };
        let r = stable_dt(&solid, &air, 3, 1.75e-3, 0.5).unwrap();
        assert!((r.fluid_speed - 37.4166).abs() < 1e-3);
        assert!(r.admits(1e-5));
        air.density = 1.2;
        let r = stable_dt(&solid, &air, 3, 1.75e-3, 0.5).unwrap();
        assert!((r.fluid_speed - 341.565).abs() < 1e-2);
        assert!(!r.admits(1e-5));
        assert!(r.fluid_speed * 1e-5 > 1.75e-3);
        let mut bad = solid.clone();
        bad.lambda = -2.0 * bad.mu / 3.0;
        assert!(stable_dt(&bad, &air, 3, 1.75e-3, 0.5).is_err());
    }
}
