//! Outer optimization loop: augmented Lagrangian on the grayness
//! constraint, Adam ascent with box clamp, penalty and gravity schedules,
//! convergence detection, and resumable state.
//!
//! ```text
//! v     = max(0, C - C_max)
//! L_aug = L - λ v - ρ/2 v²
//! λ    <- max(0, λ + ρ v)
//! ```

use serde::{Deserialize, Serialize};

use crate::adjoint::{gradient, plan_checkpoints};
use crate::design::{constraint_gradient, constraint_value, DesignField};
use crate::error::{Error, Result};
use crate::math::Vector;
use crate::scenario::{GravityRamp, OptimizerConfig, Problem};

/// Slack on `C ≤ C_max` used when judging feasibility.
pub const FEASIBILITY_SLACK: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(n: usize, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            learning_rate,
            beta1,
            beta2,
            epsilon,
        }
    }

    pub fn from_config(n: usize, cfg: &OptimizerConfig) -> Self {
        Self::new(n, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    }
}

/// One Adam ascent step on `phi`, clamped to `[-1, 1]`. A non-finite
/// gradient leaves both `phi` and `state` untouched.
pub fn adam_update(phi: &mut [f64], grad: &[f64], state: &mut AdamState) -> Result<()> {
    if phi.len() != grad.len() || phi.len() != state.m.len() {
        return Err(Error::Validation("Adam state, gradient and design sizes differ".into()));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric {
            what: format!("gradient entry {i}"),
            step: state.step as usize,
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..phi.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        phi[i] = (phi[i] + state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon)).clamp(-1.0, 1.0);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugLagState {
    pub multiplier: f64,
    pub penalty: f64,
    pub growth: f64,
    /// Penalty grows every `every` iterations once `after` is reached.
    pub every: usize,
    pub after: usize,
    pub max_penalty: f64,
}

impl AugLagState {
    pub fn from_config(cfg: &OptimizerConfig) -> Self {
        AugLagState {
            multiplier: cfg.multiplier_initial,
            penalty: cfg.penalty_initial,
            growth: cfg.penalty_growth,
            every: cfg.penalty_every,
            after: cfg.penalty_after,
            max_penalty: cfg.penalty_max,
        }
    }
}

pub fn violation(constraint: f64, constraint_max: f64) -> f64 {
    (constraint - constraint_max).max(0.0)
}

pub fn augmented_objective(objective: f64, constraint: f64, state: &AugLagState, constraint_max: f64) -> f64 {
    let v = violation(constraint, constraint_max);
    objective - state.multiplier * v - 0.5 * state.penalty * v * v
}

/// `∂L_aug/∂γ` from `∂L/∂γ`.
pub fn augmented_gradient(
    dobjective: &[f64],
    gamma: &[f64],
    constraint: f64,
    state: &AugLagState,
    constraint_max: f64,
) -> Vec<f64> {
    let v = violation(constraint, constraint_max);
    if v <= 0.0 {
        return dobjective.to_vec();
    }
    let w = state.multiplier + state.penalty * v;
    dobjective
        .iter()
        .zip(constraint_gradient(gamma))
        .map(|(dl, dc)| dl - w * dc)
        .collect()
}

/// Multiplier step after iteration `iteration` (0-based), then the penalty
/// schedule.
pub fn update_multipliers(constraint: f64, constraint_max: f64, state: &AugLagState, iteration: usize) -> AugLagState {
    let mut next = state.clone();
    next.multiplier = (state.multiplier + state.penalty * violation(constraint, constraint_max)).max(0.0);
    let done = iteration + 1;
    if done >= state.after.max(1) && (done - state.after).is_multiple_of(state.every) {
        next.penalty = (state.penalty * state.growth).min(state.max_penalty.max(state.penalty));
    }
    next
}

/// Gravity magnitude at `iteration`. The stair ramp holds
/// `g·floor(k/every)/steps`, the linear ramp interpolates `g·k/(every·steps)`,
/// both capped at `g`.
pub fn gravity_schedule(iteration: usize, ramp: GravityRamp, every: usize, steps: usize, full: f64) -> f64 {
    match ramp {
        GravityRamp::None => full,
        GravityRamp::Stair => full * ((iteration / every) as f64 / steps as f64).min(1.0),
        GravityRamp::Linear => full * (iteration as f64 / (every * steps) as f64).min(1.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// Objective (m).
    pub objective: f64,
    pub constraint: f64,
    /// Center of gravity of the design domain at the window start (m).
    pub xg: [f64; 3],
    /// Total interpolated design mass (kg, or kg/m in 2D).
    pub mass: f64,
    pub gravity: f64,
    pub multiplier: f64,
    pub penalty: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizationHistory {
    records: Vec<IterationRecord>,
}

pub const HISTORY_HEADER: &str = "iter,L_m,C,xg_x,xg_y,xg_z,mass_kg,gravity,lambda_c,rho_p,seconds";

impl OptimizationHistory {
    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, record: IterationRecord) -> Result<()> {
        if record.iter != self.records.len() {
            return Err(Error::Validation(format!(
                "history expects iteration {}, got {}",
                self.records.len(),
                record.iter
            )));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn objectives(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.objective).collect()
    }

    /// CSV text; wall time is written as 0 when `deterministic` so that
    /// reruns are byte-identical.
    pub fn to_csv(&self, deterministic: bool) -> String {
        let mut s = String::from(HISTORY_HEADER);
        s.push('\n');
        for r in &self.records {
            let secs = if deterministic { 0.0 } else { r.seconds };
            s.push_str(&format!(
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:.3}\n",
                r.iter, r.objective, r.constraint, r.xg[0], r.xg[1], r.xg[2], r.mass, r.gravity, r.multiplier, r.penalty, secs
            ));
        }
        s
    }
}

/// Converged when the mean objective of the last four iterations differs
/// from the four before by less than `tol` (relative) and the constraint
/// is feasible.
pub fn convergence_check(history: &OptimizationHistory, tol: f64, eps_abs: f64, constraint_max: f64) -> bool {
    let r = history.records();
    if r.len() < 8 {
        return false;
    }
    let n = r.len();
    let mean = |s: &[IterationRecord]| s.iter().map(|x| x.objective).sum::<f64>() / s.len() as f64;
    let recent = mean(&r[n - 4..]);
    let before = mean(&r[n - 8..n - 4]);
    let rate = (recent - before).abs() / before.abs().max(eps_abs);
    rate < tol && r[n - 1].constraint <= constraint_max + FEASIBILITY_SLACK
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestDesign {
    pub iter: usize,
    pub phi: Vec<f64>,
    pub objective: f64,
    pub constraint: f64,
    pub feasible: bool,
}

impl BestDesign {
    /// Feasible designs beat infeasible ones; then higher objective wins.
    fn improves_on(&self, other: &BestDesign) -> bool {
        match (self.feasible, other.feasible) {
            (true, false) => true,
            (false, true) => false,
            _ => self.objective > other.objective,
        }
    }
}

/// Everything needed to continue an interrupted run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerCheckpoint {
    pub phi: Vec<f64>,
    pub adam: AdamState,
    pub auglag: AugLagState,
    pub history: OptimizationHistory,
    pub best: Option<BestDesign>,
}

impl OptimizerCheckpoint {
    pub fn fresh(phi: Vec<f64>, cfg: &OptimizerConfig) -> Self {
        OptimizerCheckpoint {
            adam: AdamState::from_config(phi.len(), cfg),
            auglag: AugLagState::from_config(cfg),
            phi,
            history: OptimizationHistory::default(),
            best: None,
        }
    }

    pub fn next_iteration(&self) -> usize {
        self.history.len()
    }
}

#[derive(Debug)]
pub struct OptimizationOutcome {
    pub state: OptimizerCheckpoint,
    pub converged: bool,
    /// Error that stopped the loop early; the state holds the partial run.
    pub failure: Option<Error>,
}

impl OptimizationOutcome {
    pub fn final_field(&self, problem_pipeline: &crate::design::DesignPipeline) -> Result<DesignField> {
        problem_pipeline.forward(&self.state.phi)
    }
}

/// Called after every completed iteration, e.g. to persist progress.
pub type IterationHook<'a> = dyn FnMut(&OptimizerCheckpoint) -> Result<()> + 'a;

/// Run the optimization loop from `start` until convergence or
/// `max_iters` total iterations.
pub fn optimize<const D: usize>(
    problem: &mut Problem<D>,
    cfg: &OptimizerConfig,
    full_gravity: f64,
    start: OptimizerCheckpoint,
    max_iters: usize,
    hook: &mut IterationHook<'_>,
) -> Result<OptimizationOutcome> {
    let n_design = problem.pipeline.n_design();
    if start.phi.len() != n_design || start.adam.m.len() != n_design {
        return Err(Error::Validation(format!(
            "resume state has {} design variables, problem has {n_design}",
            start.phi.len()
        )));
    }
    let base_gravity: Vector<D> = problem.sim.gravity;
    let base_norm = base_gravity.norm();
    let plan = plan_checkpoints(
        problem.sim.n_steps(),
        (cfg.max_checkpoints > 0).then_some(cfg.max_checkpoints),
    )?;
    let mut state = start;
    // while gravity is still ramping the problem itself keeps changing, so
    // only windows run entirely at full gravity may declare convergence
    let settled = |h: &OptimizationHistory| {
        let r = h.records();
        r.len() >= 8 && r[r.len() - 8..].iter().all(|x| x.gravity == full_gravity)
    };
    let check = |h: &OptimizationHistory| {
        settled(h) && convergence_check(h, cfg.convergence_tol, cfg.convergence_abs, cfg.constraint_max)
    };
    let mut converged = check(&state.history);
    let mut failure = None;
    while !converged && state.next_iteration() < max_iters {
        let k = state.next_iteration();
        let started = std::time::Instant::now();
        let g = gravity_schedule(k, cfg.gravity_ramp, cfg.ramp_every, cfg.ramp_steps, full_gravity);
        problem.sim.gravity = if base_norm > 0.0 {
            base_gravity * (g / base_norm)
        } else {
            base_gravity
        };
        let step = (|| -> Result<(IterationRecord, Vec<f64>)> {
            let res = gradient(&problem.sim, &problem.pipeline, &state.phi, &plan)?;
            let gamma = &res.field.gamma;
            let c = constraint_value(gamma)?;
            let daug = augmented_gradient(&res.dgamma, gamma, c, &state.auglag, cfg.constraint_max);
            let mut dphi = problem.pipeline.backward(&res.field, &daug)?;
            problem.pipeline.symmetry.symmetrize(&mut dphi);
            let mass: f64 = problem
                .sim
                .particles_for(gamma)?
                .design_mass_points()
                .map(|(_, m)| m)
                .sum();
            let mut xg = [0.0; 3];
            xg[..D].copy_from_slice(res.xg_start.as_slice());
            let record = IterationRecord {
                iter: k,
                objective: res.objective,
                constraint: c,
                xg,
                mass,
                gravity: g,
                multiplier: state.auglag.multiplier,
                penalty: state.auglag.penalty,
                seconds: 0.0,
            };
            Ok((record, dphi))
        })();
        let (mut record, dphi) = match step {
            Ok(v) => v,
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        let candidate = BestDesign {
            iter: k,
            phi: state.phi.clone(),
            objective: record.objective,
            constraint: record.constraint,
            feasible: record.constraint <= cfg.constraint_max + FEASIBILITY_SLACK,
        };
        if state.best.as_ref().is_none_or(|b| candidate.improves_on(b)) {
            state.best = Some(candidate);
        }
        if let Err(e) = adam_update(&mut state.phi, &dphi, &mut state.adam) {
            failure = Some(e);
            break;
        }
        state.auglag = update_multipliers(record.constraint, cfg.constraint_max, &state.auglag, k);
        record.seconds = started.elapsed().as_secs_f64();
        log::info!(
            "iter {k}: L = {:.6e} m, C = {:.5}, lambda = {:.3e}, rho = {:.3e}, g = {:.2}",
            record.objective,
            record.constraint,
            record.multiplier,
            record.penalty,
            g
        );
        state.history.push(record)?;
        hook(&state)?;
        converged = check(&state.history);
    }
    problem.sim.gravity = base_gravity;
    Ok(OptimizationOutcome {
        state,
        converged,
        failure,
    })
}
