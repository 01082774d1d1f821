//! Reverse-mode gradient of the travel objective through the MPM
//! simulation, written out by hand step by step.
//!
//! Each backward step replays the forward step from its stored input state
//! (so grid quantities and stencils are bit-identical) and then runs the
//! vector-Jacobian products in reverse order: Maxwell history, `F` update,
//! advection, G2P, grid update, P2G, constitutive stress. Design variables
//! enter through particle mass `m_p = s(γ) ρ V0` and the stress scale
//! `s(γ)` only, so the backward sweep accumulates `∂L/∂m_p` and `∂L/∂s_p`
//! per particle and converts them to `∂L/∂γ` at the end.
//!
//! Memory follows a two-level scheme: the forward pass stores a checkpoint
//! every `segment_len` steps and the reverse sweep recomputes one segment at
//! a time.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constitutive::{
    advance_history_vjp, fluid_kirchhoff_vjp, interpolation_factor_derivative, solid_kirchhoff,
    solid_kirchhoff_vjp,
};
use crate::design::{center_of_gravity, objective_value, DesignField, DesignPipeline};
use crate::error::{Error, Result};
use crate::math::{ddot, stencil_len, stencil_offset, Matrix, Vector};
use crate::sim::{
    inv_d_factor, run_forward, step, ForwardOptions, GridField, KinematicState, ParticleSet, Phase,
    Simulation, Workspace,
};

/// Per-particle adjoints of one step: position, velocity, affine,
/// deformation, histories, mass and design factor.
type ParticleBar<const D: usize> = (Vector<D>, Vector<D>, Matrix<D>, Matrix<D>, Vec<Matrix<D>>, f64, f64);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointPlan {
    pub total_steps: usize,
    pub segment_len: usize,
    /// Step indices whose input state is stored during the forward pass.
    pub checkpoints: Vec<usize>,
}

impl CheckpointPlan {
    /// Worst-case number of full particle states held at once.
    pub fn peak_states(&self) -> usize {
        self.checkpoints.len() + self.segment_len
    }
}

/// Segment length `ceil(√N)`, lengthened when at most `max_checkpoints`
/// stored states are allowed.
pub fn plan_checkpoints(total_steps: usize, max_checkpoints: Option<usize>) -> Result<CheckpointPlan> {
    if max_checkpoints == Some(0) {
        return Err(Error::Capacity(
            "at least one stored state is needed to replay the first segment".into(),
        ));
    }
    let mut segment_len = ((total_steps as f64).sqrt().ceil() as usize).max(1);
    if let Some(b) = max_checkpoints {
        segment_len = segment_len.max(total_steps.div_ceil(b));
    }
    let checkpoints = (0..total_steps).step_by(segment_len).collect();
    Ok(CheckpointPlan {
        total_steps,
        segment_len,
        checkpoints,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryStats {
    /// Largest number of full particle states alive during the sweep.
    pub peak_states: usize,
    pub bytes_per_state: usize,
}

#[derive(Debug, Clone)]
pub struct GammaGradient<const D: usize> {
    pub objective: f64,
    pub xg_start: Vector<D>,
    pub xg_end: Vector<D>,
    /// `∂L/∂γ` per design variable.
    pub dgamma: Vec<f64>,
    /// Boundary clamp activations seen during the replayed steps.
    pub clamp_activations: usize,
    pub memory: MemoryStats,
}

/// Adjoint accumulators for the design-dependent particle attributes.
struct AttributeAdjoint {
    mass: Vec<f64>,
    scale: Vec<f64>,
}

fn inject_objective<const D: usize>(
    particles: &ParticleSet<D>,
    state: &KinematicState<D>,
    xg: &Vector<D>,
    direction: &Vector<D>,
    sign: f64,
    adj: &mut KinematicState<D>,
    attr: &mut AttributeAdjoint,
) {
    let total: f64 = (0..particles.len())
        .filter(|&p| particles.phase[p] == Phase::Design)
        .map(|p| particles.mass[p])
        .sum();
    for p in 0..particles.len() {
        if particles.phase[p] != Phase::Design {
            continue;
        }
        adj.position[p] += sign * particles.mass[p] / total * direction;
        attr.mass[p] += sign * (state.position[p] - xg).dot(direction) / total;
    }
}

struct PartialAdjoint<const D: usize> {
    position: Vector<D>,
    deformation: Matrix<D>,
    history: Vec<Matrix<D>>,
}

/// Reverse one step. `particles` holds the input state of step `n`;
/// `scratch` is overwritten with its replayed output. Returns the number of
/// clamped nodes.
#[allow(clippy::too_many_arguments)]
fn backward_step<const D: usize>(
    sim: &Simulation<D>,
    particles: &ParticleSet<D>,
    scratch: &mut ParticleSet<D>,
    grid: &mut GridField<D>,
    ws: &mut Workspace<D>,
    n: usize,
    adj_next: &KinematicState<D>,
    adj: &mut KinematicState<D>,
    attr: &mut AttributeAdjoint,
) -> Result<usize> {
    let params = sim.params(n);
    scratch.state.clone_from(&particles.state);
    let report = step(scratch, grid, &params, ws, n)?;

    let dt = params.dt;
    let h = grid.spacing;
    let inv_d = inv_d_factor(h);
    let ns = stencil_len(D);
    let ne = particles.state.n_elements;
    let old = &particles.state;
    let new = &scratch.state;
    let grid_ro = &*grid;
    let ws_ro = &*ws;

    // G2P, advection, F update and Maxwell history in reverse.
    let mut node_contrib = vec![Vector::<D>::zeros(); particles.len() * ns];
    let partials: Vec<PartialAdjoint<D>> = node_contrib
        .par_chunks_mut(ns)
        .enumerate()
        .map(|(p, contrib)| {
            let f_old = &old.deformation[p];
            let f_new = &new.deformation[p];
            let mut f_new_bar = adj_next.deformation[p];
            let mut f_old_bar = Matrix::<D>::zeros();
            let mut history_bar = vec![Matrix::<D>::zeros(); ne];
            if particles.phase[p] != Phase::Fluid && ne > 0 {
                advance_history_vjp(
                    f_old,
                    f_new,
                    old.history_of(p),
                    &sim.solid,
                    dt,
                    adj_next.history_of(p),
                    &mut f_old_bar,
                    &mut f_new_bar,
                    &mut history_bar,
                );
            }
            let c_new = &new.affine[p];
            let c_bar = adj_next.affine[p] + dt * f_new_bar * f_old.transpose();
            f_old_bar += (Matrix::<D>::identity() + dt * c_new).transpose() * f_new_bar;

            let mut x_bar = adj_next.position[p];
            let v_bar = adj_next.velocity[p] + dt * adj_next.position[p];
            let st = ws_ro.stencils[p].as_ref().expect("stencil replayed");
            for (k, slot) in contrib.iter_mut().enumerate() {
                let o = stencil_offset::<D>(k);
                let w = st.weight(&o);
                let dpos = st.dpos(&o, h);
                let vi = grid_ro.velocity[st.node(&o, grid_ro)];
                let c_dpos = c_bar * dpos;
                *slot = w * (v_bar + inv_d * c_dpos);
                let w_bar = v_bar.dot(&vi) + inv_d * vi.dot(&c_dpos);
                x_bar -= inv_d * w * (c_bar.transpose() * vi);
                x_bar += w_bar * st.weight_grad(&o);
            }
            PartialAdjoint {
                position: x_bar,
                deformation: f_old_bar,
                history: history_bar,
            }
        })
        .collect();

    // Deterministic accumulation of node velocity adjoints.
    let mut v_node_bar = vec![Vector::<D>::zeros(); grid.len()];
    for p in 0..particles.len() {
        let st = ws.stencils[p].as_ref().expect("stencil replayed");
        for k in 0..ns {
            let o = stencil_offset::<D>(k);
            v_node_bar[st.node(&o, grid)] += node_contrib[p * ns + k];
        }
    }

    // Grid update in reverse: clamped nodes pass no adjoint.
    let (q_bar, m_bar): (Vec<Vector<D>>, Vec<f64>) = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let m = grid_ro.mass[i];
            if m <= 0.0 || grid_ro.clamped[i] {
                return (Vector::<D>::zeros(), 0.0);
            }
            let vb = v_node_bar[i];
            let q = grid_ro.momentum[i];
            (vb / m, -vb.dot(&q) / (m * m))
        })
        .unzip();

    // P2G and stress in reverse.
    let results: Vec<ParticleBar<D>> = partials
        .into_par_iter()
        .enumerate()
        .map(|(p, part)| {
            let st = ws_ro.stencils[p].as_ref().expect("stencil replayed");
            let m = particles.mass[p];
            let vp = old.velocity[p];
            let a = &ws_ro.affine_momentum[p];
            let mut x_bar = part.position;
            let mut v_bar = Vector::<D>::zeros();
            let mut a_bar = Matrix::<D>::zeros();
            let mut mass_bar = 0.0;
            for k in 0..ns {
                let o = stencil_offset::<D>(k);
                let i = st.node(&o, grid_ro);
                let (qb, mb) = (q_bar[i], m_bar[i]);
                if mb == 0.0 && qb == Vector::<D>::zeros() {
                    continue;
                }
                let w = st.weight(&o);
                let dpos = st.dpos(&o, h);
                let w_bar = m * mb + qb.dot(&(m * vp + a * dpos));
                mass_bar += w * (mb + qb.dot(&vp));
                v_bar += w * m * qb;
                a_bar += w * qb * dpos.transpose();
                x_bar -= w * (a.transpose() * qb);
                x_bar += w_bar * st.weight_grad(&o);
            }
            let tau_bar = -dt * particles.volume0[p] * inv_d * a_bar;
            let mut c_bar = m * a_bar;
            mass_bar += ddot(&a_bar, &old.affine[p]);
            let mut f_bar = part.deformation;
            let mut history_bar = part.history;
            let mut scale_bar = 0.0;
            match particles.phase[p] {
                Phase::Fluid => fluid_kirchhoff_vjp(
                    &old.deformation[p],
                    &old.affine[p],
                    &sim.fluid,
                    params.p_act,
                    &tau_bar,
                    &mut f_bar,
                    &mut c_bar,
                ),
                Phase::Design | Phase::Wall => {
                    let s = particles.modulus_scale[p];
                    let hist = old.history_of(p);
                    scale_bar = ddot(&tau_bar, &solid_kirchhoff(&old.deformation[p], hist, &sim.solid));
                    solid_kirchhoff_vjp(
                        &old.deformation[p],
                        hist,
                        &sim.solid,
                        &(s * tau_bar),
                        &mut f_bar,
                        &mut history_bar,
                    );
                }
            }
            (x_bar, v_bar, c_bar, f_bar, history_bar, mass_bar, scale_bar)
        })
        .collect();

    for (p, (x, v, c, f, hist, mb, sb)) in results.into_iter().enumerate() {
        adj.position[p] = x;
        adj.velocity[p] = v;
        adj.affine[p] = c;
        adj.deformation[p] = f;
        adj.history[p * ne..(p + 1) * ne].copy_from_slice(&hist);
        attr.mass[p] += mb;
        attr.scale[p] += sb;
    }
    Ok(report.clamped_nodes)
}

/// `∂L/∂γ` for design densities `gamma` by a checkpointed reverse sweep.
pub fn gradient_gamma<const D: usize>(
    sim: &Simulation<D>,
    gamma: &[f64],
    plan: &CheckpointPlan,
) -> Result<GammaGradient<D>> {
    let started = std::time::Instant::now();
    let wrap = |step: usize, e: Error| match e {
        Error::Forward { .. } => e,
        other => Error::Forward {
            step,
            seconds: started.elapsed().as_secs_f64(),
            source: Box::new(other),
        },
    };
    let n_steps = sim.n_steps();
    if plan.total_steps != n_steps {
        return Err(Error::Validation(format!(
            "checkpoint plan covers {} steps, simulation has {n_steps}",
            plan.total_steps
        )));
    }
    let n_start = sim.start_step();
    let base = sim.particles_for(gamma)?;
    let mut grid = sim.new_grid();
    let mut ws = Workspace::new();
    let bytes_per_state = base.state.byte_size();

    // Forward pass storing checkpoints.
    let mut current = base.clone();
    let mut stored: Vec<KinematicState<D>> = Vec::with_capacity(plan.checkpoints.len());
    let mut xg_start = None;
    for n in 0..n_steps {
        if n % plan.segment_len == 0 {
            stored.push(current.state.clone());
        }
        if n == n_start {
            xg_start = Some(center_of_gravity(current.design_mass_points()).map_err(|e| wrap(n, e))?);
        }
        step(&mut current, &mut grid, &sim.params(n), &mut ws, n).map_err(|e| wrap(n, e))?;
    }
    let xg_end = center_of_gravity(current.design_mass_points()).map_err(|e| wrap(n_steps, e))?;
    let xg_start = xg_start.unwrap_or(xg_end);
    let objective = objective_value(&xg_start, &xg_end, &sim.direction);

    let np = base.len();
    let ne = base.state.n_elements;
    let mut adj = KinematicState::<D>::zeros(np, ne);
    let mut adj_prev = KinematicState::<D>::zeros(np, ne);
    let mut attr = AttributeAdjoint {
        mass: vec![0.0; np],
        scale: vec![0.0; np],
    };
    inject_objective(&base, &current.state, &xg_end, &sim.direction, 1.0, &mut adj, &mut attr);
    if n_start >= n_steps {
        inject_objective(&base, &current.state, &xg_start, &sim.direction, -1.0, &mut adj, &mut attr);
    }

    let mut clamp_activations = 0;
    let mut peak_states = stored.len();
    let mut scratch = base.clone();
    let mut replay = base.clone();
    let mut tape: Vec<KinematicState<D>> = Vec::with_capacity(plan.segment_len);
    for (seg, checkpoint) in stored.iter().enumerate().rev() {
        let first = seg * plan.segment_len;
        let last = (first + plan.segment_len).min(n_steps);
        tape.clear();
        replay.state.clone_from(checkpoint);
        for n in first..last {
            tape.push(replay.state.clone());
            if n + 1 < last {
                step(&mut replay, &mut grid, &sim.params(n), &mut ws, n).map_err(|e| wrap(n, e))?;
            }
        }
        peak_states = peak_states.max(stored.len() + tape.len());
        for n in (first..last).rev() {
            replay.state.clone_from(&tape[n - first]);
            clamp_activations += backward_step(
                sim,
                &replay,
                &mut scratch,
                &mut grid,
                &mut ws,
                n,
                &adj,
                &mut adj_prev,
                &mut attr,
            )
            .map_err(|e| wrap(n, e))?;
            std::mem::swap(&mut adj, &mut adj_prev);
            if n == n_start {
                inject_objective(&base, &replay.state, &xg_start, &sim.direction, -1.0, &mut adj, &mut attr);
            }
            if !adj.is_finite() {
                return Err(Error::Numeric {
                    what: "adjoint state".into(),
                    step: n,
                });
            }
        }
    }

    let mut dgamma = vec![0.0; sim.n_design()];
    for p in 0..np {
        if let Some(di) = base.design_index[p] {
            let ds = interpolation_factor_derivative(gamma[di], sim.solid.void_floor);
            dgamma[di] = (attr.mass[p] * sim.solid.density * base.volume0[p] + attr.scale[p]) * ds;
        }
    }
    if let Some(i) = dgamma.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric {
            what: format!("gradient entry {i}"),
            step: 0,
        });
    }
    Ok(GammaGradient {
        objective,
        xg_start,
        xg_end,
        dgamma,
        clamp_activations,
        memory: MemoryStats {
            peak_states,
            bytes_per_state,
        },
    })
}

#[derive(Debug, Clone)]
pub struct GradientResult<const D: usize> {
    pub field: DesignField,
    pub objective: f64,
    pub xg_start: Vector<D>,
    pub xg_end: Vector<D>,
    pub dgamma: Vec<f64>,
    /// `∂L/∂φ` before symmetry averaging.
    pub dphi: Vec<f64>,
    pub clamp_activations: usize,
    pub memory: MemoryStats,
}

/// Objective and `∂L/∂φ` for raw design variables `phi`.
pub fn gradient<const D: usize>(
    sim: &Simulation<D>,
    pipeline: &DesignPipeline,
    phi: &[f64],
    plan: &CheckpointPlan,
) -> Result<GradientResult<D>> {
    let field = pipeline.forward(phi)?;
    let g = gradient_gamma(sim, &field.gamma, plan)?;
    let dphi = pipeline.backward(&field, &g.dgamma)?;
    Ok(GradientResult {
        field,
        objective: g.objective,
        xg_start: g.xg_start,
        xg_end: g.xg_end,
        dgamma: g.dgamma,
        dphi,
        clamp_activations: g.clamp_activations,
        memory: g.memory,
    })
}

/// Objective of a design given in raw variables.
pub fn objective_of<const D: usize>(sim: &Simulation<D>, pipeline: &DesignPipeline, phi: &[f64]) -> Result<f64> {
    let field = pipeline.forward(phi)?;
    Ok(run_forward(sim, &field.gamma, &ForwardOptions::default())?.objective)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdProbe {
    pub index: usize,
    pub adjoint: f64,
    pub finite_difference: f64,
    /// `|adjoint - fd| / max(|adjoint|, eps_abs)`.
    pub relative_error: f64,
}

/// Central differences `(L(φ + δ e_i) - L(φ - δ e_i)) / 2δ` against the
/// adjoint gradient for each requested index.
pub fn finite_difference_check<const D: usize>(
    sim: &Simulation<D>,
    pipeline: &DesignPipeline,
    phi: &[f64],
    indices: &[usize],
    delta: f64,
    eps_abs: f64,
) -> Result<Vec<FdProbe>> {
    if !(delta > 0.0) {
        return Err(Error::Parameter(format!("finite-difference step must be > 0, got {delta}")));
    }
    if let Some(&i) = indices.iter().find(|&&i| i >= phi.len()) {
        return Err(Error::Parameter(format!(
            "design index {i} out of range ({} variables)",
            phi.len()
        )));
    }
    let plan = plan_checkpoints(sim.n_steps(), None)?;
    let adjoint = gradient(sim, pipeline, phi, &plan)?;
    indices
        .iter()
        .map(|&i| {
            let mut plus = phi.to_vec();
            plus[i] += delta;
            let mut minus = phi.to_vec();
            minus[i] -= delta;
            let fd = (objective_of(sim, pipeline, &plus)? - objective_of(sim, pipeline, &minus)?) / (2.0 * delta);
            let a = adjoint.dphi[i];
            Ok(FdProbe {
                index: i,
                adjoint: a,
                finite_difference: fd,
                relative_error: (a - fd).abs() / a.abs().max(eps_abs),
            })
        })
        .collect()
}
