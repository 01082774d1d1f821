//! Visco-hyperelastic solid stress, pressurized viscous fluid stress,
//! fictitious-density property interpolation and actuation sampling.
//!
//! Solid (dimension `D`, `J = det F`, `F̄ = J^{-1/D} F`):
//!
//! ```text
//! Ψ^H(J) = K/4 ((J-1)^2 + ln^2 J)          K = λ + 2μ/D
//! Ψ^D(F̄) = μ/2 (tr(F̄^T F̄) - D)
//! σ      = Ψ^H'(J) I + g_∞ dev(μ/J F̄F̄^T) + dev(Σ_i g_i h_i)
//! ```
//!
//! `h_i` is the spatial hereditary state of Maxwell element `i`. It is
//! advanced with an exponential integrator that is exact when the
//! pulled-back deviatoric input `F̄^{-1} dev(σ_0^D) F̄^{-T}` varies linearly
//! within a step:
//!
//! ```text
//! R       = F̄_{n+1} F̄_n^{-1}
//! h_{n+1} = R (e h_n - c s_n) R^T + c s_{n+1}
//! e       = exp(-dt/τ),  c = (1 - e) τ/dt,  s = dev(μ/J F̄F̄^T)
//! ```
//!
//! The simulator works with Kirchhoff stress `τ = J σ` and keeps the history
//! at the base (γ = 1) modulus; the fictitious-density factor multiplies the
//! whole solid stress.
//!
//! Fluid: `σ = -p I + μ_v (L + L^T) + (ζ - 2μ_v/D) tr(L) I` with
//! `p = k(1 - J) + p_act`, so a positive actuation pressure compresses the
//! air and pushes the chamber walls outward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{cofactor, ddot, det, dev, inverse, Matrix};
use crate::prony::{PronyElement, PronySeries};

pub const DEFAULT_VOID_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolidMaterial {
    /// ρ₀ (kg/m³).
    pub density: f64,
    /// λ₀ (Pa).
    pub lambda: f64,
    /// μ₀ (Pa).
    pub mu: f64,
    pub prony: PronySeries,
    /// ε in the density interpolation.
    pub void_floor: f64,
}

impl SolidMaterial {
    pub fn from_youngs(
        youngs: f64,
        poisson: f64,
        density: f64,
        prony: PronySeries,
        void_floor: f64,
    ) -> Result<Self> {
        if !(youngs > 0.0) {
            return Err(Error::Parameter(format!("Young's modulus must be > 0, got {youngs}")));
        }
        if !(poisson > -1.0 && poisson < 0.5) {
            return Err(Error::Parameter(format!(
                "Poisson's ratio must lie in (-1, 0.5), got {poisson}"
            )));
        }
        let lambda = youngs * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson));
        let mu = youngs / (2.0 * (1.0 + poisson));
        let m = SolidMaterial {
            density,
            lambda,
            mu,
            prony,
            void_floor,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0) {
            return Err(Error::Parameter(format!("solid density must be > 0, got {}", self.density)));
        }
        if !(self.mu > 0.0) {
            return Err(Error::Parameter(format!("shear modulus must be > 0, got {}", self.mu)));
        }
        if !(self.void_floor > 0.0 && self.void_floor < 1e-2) {
            return Err(Error::Parameter(format!(
                "void floor must satisfy 0 < eps << 1, got {}",
                self.void_floor
            )));
        }
        self.prony.validate()?;
        if self.bulk_modulus(3) <= 0.0 {
            return Err(Error::Parameter("bulk modulus must be > 0".into()));
        }
        Ok(())
    }

    /// `K = λ + 2μ/D`; for `D = 3` this is `(3λ + 2μ)/3`.
    pub fn bulk_modulus(&self, dim: usize) -> f64 {
        self.lambda + 2.0 * self.mu / dim as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluidMaterial {
    /// k (Pa).
    pub bulk_modulus: f64,
    /// μ_v (Pa·s).
    pub shear_viscosity: f64,
    /// ζ (Pa·s).
    pub volume_viscosity: f64,
    /// Artificial density (kg/m³).
    pub density: f64,
}

impl FluidMaterial {
    pub fn validate(&self) -> Result<()> {
        if !(self.bulk_modulus > 0.0) {
            return Err(Error::Parameter(format!(
                "fluid bulk modulus must be > 0, got {}",
                self.bulk_modulus
            )));
        }
        if !(self.shear_viscosity >= 0.0 && self.volume_viscosity >= 0.0) {
            return Err(Error::Parameter("fluid viscosities must be >= 0".into()));
        }
        if !(self.density > 0.0) {
            return Err(Error::Parameter(format!("fluid density must be > 0, got {}", self.density)));
        }
        Ok(())
    }
}

/// `(1 - ε) γ³ + ε`.
#[inline]
pub fn interpolation_factor(gamma: f64, void_floor: f64) -> f64 {
    (1.0 - void_floor) * gamma * gamma * gamma + void_floor
}

#[inline]
pub fn interpolation_factor_derivative(gamma: f64, void_floor: f64) -> f64 {
    3.0 * (1.0 - void_floor) * gamma * gamma
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpolatedSolid {
    pub density: f64,
    pub lambda: f64,
    pub mu: f64,
}

pub fn interpolate_properties(gamma: f64, base: &SolidMaterial) -> Result<InterpolatedSolid> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Domain {
            value: gamma,
            domain: "[0, 1]",
        });
    }
    let s = interpolation_factor(gamma, base.void_floor);
    Ok(InterpolatedSolid {
        density: base.density * s,
        lambda: base.lambda * s,
        mu: base.mu * s,
    })
}

/// `j^(-1/D)` without a general `powf`.
fn inv_root<const D: usize>(j: f64) -> f64 {
    match D {
        1 => 1.0 / j,
        2 => 1.0 / j.sqrt(),
        3 => 1.0 / j.cbrt(),
        _ => j.powf(-1.0 / D as f64),
    }
}

/// `j^(-2/D)`.
fn inv_root_sq<const D: usize>(j: f64) -> f64 {
    let r = inv_root::<D>(j);
    r * r
}

fn check_det<const D: usize>(f: &Matrix<D>) -> Result<f64> {
    let j = det(f);
    if !j.is_finite() {
        return Err(Error::Numeric {
            what: "deformation gradient".into(),
            step: 0,
        });
    }
    if j <= 0.0 {
        return Err(Error::Inversion {
            particle: 0,
            step: 0,
            det: j,
        });
    }
    Ok(j)
}

/// `dev(σ_0^D) = μ J^{-1-2/D} dev(F F^T)`, the equilibrium deviatoric
/// Cauchy stress that drives the Maxwell elements.
pub fn equilibrium_deviatoric<const D: usize>(f: &Matrix<D>, j: f64, mu: f64) -> Matrix<D> {
    mu * inv_root_sq::<D>(j) / j * dev(&(f * f.transpose()))
}

/// Adds the vector-Jacobian product of [`equilibrium_deviatoric`] with
/// adjoint `g` to `f_bar`.
pub fn equilibrium_deviatoric_vjp<const D: usize>(
    f: &Matrix<D>,
    j: f64,
    mu: f64,
    g: &Matrix<D>,
    f_bar: &mut Matrix<D>,
) {
    let d = D as f64;
    let c = mu * inv_root_sq::<D>(j) / j;
    let dc = -(1.0 + 2.0 / d) * c / j;
    let b = dev(&(f * f.transpose()));
    let q = c * dev(g);
    *f_bar += ddot(g, &b) * dc * cofactor(f) + (q + q.transpose()) * f;
}

/// Stored energy `Ψ^H + g_∞ Ψ^D` (per unit reference volume, base moduli).
pub fn solid_energy<const D: usize>(f: &Matrix<D>, material: &SolidMaterial) -> f64 {
    let d = D as f64;
    let j = det(f);
    let k = material.bulk_modulus(D);
    let ln_j = j.ln();
    let fbar = inv_root::<D>(j) * f;
    let hydro = 0.25 * k * ((j - 1.0).powi(2) + ln_j * ln_j);
    let devi = 0.5 * material.mu * ((fbar.transpose() * fbar).trace() - d);
    hydro + material.prony.g_inf * devi
}

/// Kirchhoff stress `J σ` at the base modulus (γ = 1). `history[i]` is the
/// hereditary state of Maxwell element `i`.
pub fn solid_kirchhoff<const D: usize>(
    f: &Matrix<D>,
    history: &[Matrix<D>],
    material: &SolidMaterial,
) -> Matrix<D> {
    let j = det(f);
    let k = material.bulk_modulus(D);
    let hydro = 0.5 * k * (j * j - j + j.ln());
    let b = material.prony.g_inf * material.mu * inv_root_sq::<D>(j);
    let mut tau = b * dev(&(f * f.transpose()));
    for i in 0..D {
        tau[(i, i)] += hydro;
    }
    if !history.is_empty() {
        tau += j * dev(&maxwell_sum(history, &material.prony.elements));
    }
    tau
}

fn maxwell_sum<const D: usize>(history: &[Matrix<D>], elements: &[PronyElement]) -> Matrix<D> {
    history
        .iter()
        .zip(elements)
        .fold(Matrix::<D>::zeros(), |acc, (h, e)| acc + e.g * h)
}

/// Vector-Jacobian product of [`solid_kirchhoff`]: accumulates into
/// `f_bar` and `history_bar` given the stress adjoint `tau_bar`.
pub fn solid_kirchhoff_vjp<const D: usize>(
    f: &Matrix<D>,
    history: &[Matrix<D>],
    material: &SolidMaterial,
    tau_bar: &Matrix<D>,
    f_bar: &mut Matrix<D>,
    history_bar: &mut [Matrix<D>],
) {
    let d = D as f64;
    let j = det(f);
    let cof = cofactor(f);
    let k = material.bulk_modulus(D);
    let da = 0.5 * k * (2.0 * j - 1.0 + 1.0 / j);
    let b = material.prony.g_inf * material.mu * inv_root_sq::<D>(j);
    let db = -(2.0 / d) * b / j;
    let bb = dev(&(f * f.transpose()));
    let g = b * dev(tau_bar);

    let mut dj = tau_bar.trace() * da + ddot(tau_bar, &bb) * db;
    *f_bar += (g + g.transpose()) * f;
    if !history.is_empty() {
        let hs = dev(&maxwell_sum(history, &material.prony.elements));
        dj += ddot(tau_bar, &hs);
        let dt = dev(tau_bar);
        for (hb, e) in history_bar.iter_mut().zip(&material.prony.elements) {
            *hb += e.g * j * dt;
        }
    }
    *f_bar += dj * cof;
}

/// Cauchy stress of a solid particle with fictitious density `gamma`.
pub fn solid_stress<const D: usize>(
    f: &Matrix<D>,
    history: &[Matrix<D>],
    material: &SolidMaterial,
    gamma: f64,
) -> Result<Matrix<D>> {
    let j = check_det(f)?;
    let s = interpolate_properties(gamma, material)?.mu / material.mu;
    let sigma = s * solid_kirchhoff(f, history, material) / j;
    if !crate::math::is_finite_mat(&sigma) {
        return Err(Error::Numeric {
            what: "solid stress".into(),
            step: 0,
        });
    }
    Ok(sigma)
}

/// One exponential-integrator step for a single Maxwell element.
///
/// `push` is `F̄_{n+1} F̄_n^{-1}`, `prev_input`/`next_input` the spatial
/// deviatoric inputs `dev(σ_0^D)` at the start and end of the step. Returns
/// the new hereditary state and the element's stress contribution
/// `g_i h_{n+1}`.
pub fn maxwell_advance<const D: usize>(
    history: &Matrix<D>,
    push: &Matrix<D>,
    prev_input: &Matrix<D>,
    next_input: &Matrix<D>,
    dt: f64,
    element: PronyElement,
) -> (Matrix<D>, Matrix<D>) {
    let (e, c) = relaxation_coefficients(dt, element.tau);
    let m = e * history - c * prev_input;
    let h = push * m * push.transpose() + c * next_input;
    (h, element.g * h)
}

/// `(exp(-dt/τ), (1 - exp(-dt/τ)) τ/dt)`.
pub fn relaxation_coefficients(dt: f64, tau: f64) -> (f64, f64) {
    let x = dt / tau;
    let e = (-x).exp();
    // (1 - e^-x)/x, accurate for small x
    let c = if x < 1e-8 { 1.0 - 0.5 * x } else { -(-x).exp_m1() / x };
    (e, c)
}

/// Isochoric push `F̄_new F̄_old^{-1}`.
fn isochoric_push<const D: usize>(f_old: &Matrix<D>, f_new: &Matrix<D>) -> Result<Matrix<D>> {
    let j_old = check_det(f_old)?;
    let j_new = check_det(f_new)?;
    let inv = inverse(f_old).ok_or(Error::Inversion {
        particle: 0,
        step: 0,
        det: j_old,
    })?;
    Ok(inv_root::<D>(j_new / j_old) * f_new * inv)
}

/// Advance all Maxwell histories of one particle from `f_old` to `f_new`.
pub fn advance_history<const D: usize>(
    f_old: &Matrix<D>,
    f_new: &Matrix<D>,
    history: &mut [Matrix<D>],
    material: &SolidMaterial,
    dt: f64,
) -> Result<()> {
    if history.is_empty() {
        return Ok(());
    }
    let push = isochoric_push(f_old, f_new)?;
    let prev = equilibrium_deviatoric(f_old, det(f_old), material.mu);
    let next = equilibrium_deviatoric(f_new, det(f_new), material.mu);
    for (h, &el) in history.iter_mut().zip(&material.prony.elements) {
        *h = maxwell_advance(h, &push, &prev, &next, dt, el).0;
    }
    Ok(())
}

/// Vector-Jacobian product of [`advance_history`]. `history_old` is the
/// state before the step; `history_new_bar` the adjoint of the state after.
/// Accumulates into `f_old_bar`, `f_new_bar` and `history_old_bar`.
#[allow(clippy::too_many_arguments)]
pub fn advance_history_vjp<const D: usize>(
    f_old: &Matrix<D>,
    f_new: &Matrix<D>,
    history_old: &[Matrix<D>],
    material: &SolidMaterial,
    dt: f64,
    history_new_bar: &[Matrix<D>],
    f_old_bar: &mut Matrix<D>,
    f_new_bar: &mut Matrix<D>,
    history_old_bar: &mut [Matrix<D>],
) {
    if history_old.is_empty() {
        return;
    }
    let d = D as f64;
    let j_old = det(f_old);
    let j_new = det(f_new);
    let inv_old = cofactor(f_old).transpose() / j_old;
    let p = f_new * inv_old;
    let psi = inv_root::<D>(j_new / j_old);
    let r = psi * p;
    let prev = equilibrium_deviatoric(f_old, j_old, material.mu);

    let mut r_bar = Matrix::<D>::zeros();
    let mut prev_bar = Matrix::<D>::zeros();
    let mut next_bar = Matrix::<D>::zeros();
    for (i, el) in material.prony.elements.iter().enumerate().take(history_old.len()) {
        let (e, c) = relaxation_coefficients(dt, el.tau);
        let m = e * history_old[i] - c * prev;
        let g = history_new_bar[i];
        let m_bar = r.transpose() * g * r;
        r_bar += g * r * m.transpose() + g.transpose() * r * m;
        history_old_bar[i] += e * m_bar;
        prev_bar -= c * m_bar;
        next_bar += c * history_new_bar[i];
    }
    equilibrium_deviatoric_vjp(f_old, j_old, material.mu, &prev_bar, f_old_bar);
    equilibrium_deviatoric_vjp(f_new, j_new, material.mu, &next_bar, f_new_bar);

    let rp = ddot(&r_bar, &p);
    let inv_new_t = cofactor(f_new) / j_new;
    let inv_old_t = inv_old.transpose();
    *f_new_bar += -(psi / d) * rp * inv_new_t + psi * r_bar * inv_old_t;
    *f_old_bar += (psi / d) * rp * inv_old_t - psi * p.transpose() * r_bar * inv_old_t;
}

/// Cauchy stress of the chamber fluid.
pub fn fluid_stress<const D: usize>(
    j: f64,
    velocity_gradient: &Matrix<D>,
    material: &FluidMaterial,
    p_act: f64,
) -> Result<Matrix<D>> {
    if !(j > 0.0) {
        return Err(Error::Inversion {
            particle: 0,
            step: 0,
            det: j,
        });
    }
    Ok(fluid_kirchhoff_from_j(j, velocity_gradient, material, p_act) / j)
}

/// `p = k(1 - J) + p_act`.
pub fn fluid_pressure(j: f64, material: &FluidMaterial, p_act: f64) -> f64 {
    material.bulk_modulus * (1.0 - j) + p_act
}

fn viscous<const D: usize>(l: &Matrix<D>, material: &FluidMaterial) -> Matrix<D> {
    let lv = material.volume_viscosity - 2.0 / D as f64 * material.shear_viscosity;
    material.shear_viscosity * (l + l.transpose()) + lv * l.trace() * Matrix::<D>::identity()
}

fn fluid_kirchhoff_from_j<const D: usize>(
    j: f64,
    l: &Matrix<D>,
    material: &FluidMaterial,
    p_act: f64,
) -> Matrix<D> {
    let p = fluid_pressure(j, material, p_act);
    j * (viscous(l, material) - p * Matrix::<D>::identity())
}

/// Kirchhoff stress of a fluid particle with deformation gradient `f`.
pub fn fluid_kirchhoff<const D: usize>(
    f: &Matrix<D>,
    l: &Matrix<D>,
    material: &FluidMaterial,
    p_act: f64,
) -> Matrix<D> {
    fluid_kirchhoff_from_j(det(f), l, material, p_act)
}

/// Vector-Jacobian product of [`fluid_kirchhoff`].
pub fn fluid_kirchhoff_vjp<const D: usize>(
    f: &Matrix<D>,
    l: &Matrix<D>,
    material: &FluidMaterial,
    p_act: f64,
    tau_bar: &Matrix<D>,
    f_bar: &mut Matrix<D>,
    l_bar: &mut Matrix<D>,
) {
    let j = det(f);
    let k = material.bulk_modulus;
    let dp_term = 2.0 * k * j - k - p_act;
    let dj = tau_bar.trace() * dp_term + ddot(tau_bar, &viscous(l, material));
    *f_bar += dj * cofactor(f);
    let lv = material.volume_viscosity - 2.0 / D as f64 * material.shear_viscosity;
    *l_bar += j
        * (material.shear_viscosity * (tau_bar + tau_bar.transpose())
            + lv * tau_bar.trace() * Matrix::<D>::identity());
}

/// Periodic pressure table, silent before `t_start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuationWaveform {
    /// `(phase time s, pressure Pa)`, strictly increasing in time, all
    /// times within `[0, period)`.
    samples: Vec<(f64, f64)>,
    period: f64,
    t_start: f64,
}

impl ActuationWaveform {
    pub fn new(samples: Vec<(f64, f64)>, period: f64, t_start: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("actuation waveform has no samples".into()));
        }
        if !(period > 0.0 && period.is_finite()) {
            return Err(Error::Config(format!("waveform period must be > 0, got {period}")));
        }
        if !(t_start >= 0.0) {
            return Err(Error::Config(format!("t_start must be >= 0, got {t_start}")));
        }
        for w in samples.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::Config("waveform times must be strictly increasing".into()));
            }
        }
        let first = samples[0].0;
        let last = samples[samples.len() - 1].0;
        if first < 0.0 || last - first >= period {
            return Err(Error::Config(
                "waveform samples must span less than one period".into(),
            ));
        }
        if samples.iter().any(|s| !s.1.is_finite()) {
            return Err(Error::Config("waveform pressure must be finite".into()));
        }
        Ok(ActuationWaveform {
            samples,
            period,
            t_start,
        })
    }

    /// Square wave between 0 and `p_high` with exponential rise and decay of
    /// time constant `rise_tau`, tabulated at `samples_per_period` points.
    pub fn synthetic_square(
        p_high: f64,
        frequency: f64,
        duty: f64,
        rise_tau: f64,
        samples_per_period: usize,
        t_start: f64,
    ) -> Result<Self> {
        if !(frequency > 0.0) || !(duty > 0.0 && duty < 1.0) || !(rise_tau > 0.0) {
            return Err(Error::Config(
                "square waveform needs frequency > 0, duty in (0,1), rise constant > 0".into(),
            ));
        }
        let period = 1.0 / frequency;
        let t_on = duty * period;
        let peak = p_high * (1.0 - (-t_on / rise_tau).exp());
        let n = samples_per_period.max(2);
        let samples = (0..n)
            .map(|k| {
                let t = period * k as f64 / n as f64;
                let p = if t < t_on {
                    p_high * (1.0 - (-t / rise_tau).exp())
                } else {
                    peak * (-(t - t_on) / rise_tau).exp()
                };
                (t, p)
            })
            .collect();
        ActuationWaveform::new(samples, period, t_start)
    }

    /// Constant pressure from `t_start` on.
    pub fn constant(p: f64, t_start: f64) -> Self {
        ActuationWaveform {
            samples: vec![(0.0, p)],
            period: 1.0,
            t_start,
        }
    }

    pub fn silent() -> Self {
        Self::constant(0.0, 0.0)
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn with_t_start(mut self, t_start: f64) -> Self {
        self.t_start = t_start;
        self
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().map(|s| s.1).fold(f64::MIN, f64::max)
    }
}

/// Actuation pressure at time `t`: zero before `t_start`, otherwise linear
/// interpolation of the periodic table at phase `(t - t_start) mod period`.
pub fn sample_actuation(waveform: &ActuationWaveform, t: f64) -> f64 {
    if t < waveform.t_start {
        return 0.0;
    }
    let s = &waveform.samples;
    if s.len() == 1 {
        return s[0].1;
    }
    let period = waveform.period;
    let phase = (t - waveform.t_start).rem_euclid(period);
    let (first, last) = (s[0], s[s.len() - 1]);
    let lerp = |a: (f64, f64), b: (f64, f64), x: f64| {
        if b.0 == a.0 {
            a.1
        } else {
            a.1 + (b.1 - a.1) * (x - a.0) / (b.0 - a.0)
        }
    };
    if phase < first.0 {
        return lerp((last.0 - period, last.1), first, phase);
    }
    if phase >= last.0 {
        return lerp(last, (first.0 + period, first.1), phase);
    }
    let idx = s.partition_point(|p| p.0 <= phase);
    lerp(s[idx - 1], s[idx], phase)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn acrylate_solid(prony: PronySeries) -> SolidMaterial {
        SolidMaterial::from_youngs(0.44e6, 0.4, 1.07e3, prony, DEFAULT_VOID_FLOOR).unwrap()
    }

    fn air() -> FluidMaterial {
        FluidMaterial {
            bulk_modulus: 0.14e6,
            shear_viscosity: 1.83e-5,
            volume_viscosity: 0.0,
            density: 100.0,
        }
    }

    #[test]
    fn interpolation_endpoints() {
        let m = acrylate_solid(PronySeries::elastic());
        assert_eq!(interpolate_properties(1.0, &m).unwrap().density, m.density);
        let v = interpolate_properties(0.0, &m).unwrap();
        assert!((v.density - m.void_floor * m.density).abs() < 1e-15);
        let mut m0 = m.clone();
        m0.void_floor = 0.0;
        assert_eq!(interpolate_properties(0.5, &m0).unwrap().density, 0.125 * m.density);
        assert!(matches!(interpolate_properties(1.2, &m), Err(Error::Domain { .. })));
        assert!(interpolate_properties(-0.1, &m).is_err());
    }

    #[test]
    fn identity_is_stress_free() {
        let m = acrylate_solid(PronySeries::elastic());
        let s = solid_stress::<3>(&Matrix::identity(), &[], &m, 1.0).unwrap();
        assert_eq!(s, Matrix::<3>::zeros());
    }

    #[test]
    fn pure_dilation() {
        let m = acrylate_solid(PronySeries::elastic());
        assert!((m.bulk_modulus(3) - 0.733_333_333e6).abs() < 1.0);
        let j: f64 = 1.1;
        let f = j.powf(1.0 / 3.0) * Matrix::<3>::identity();
        let s = solid_stress::<3>(&f, &[], &m, 1.0).unwrap();
        // (K/2)((J-1) + ln J / J) evaluated independently
        let expected = 0.5 * (0.44e6 / (3.0 * (1.0 - 0.8))) * (0.1 + 1.1f64.ln() / 1.1);
        assert!((s[(0, 0)] - expected).abs() < 1e-6 * expected);
        assert!((expected - 68.4e3).abs() < 0.1e3);
        assert!(dev(&s).norm() < 1e-9 * expected);
    }

    #[test]
    fn inverted_gradient_rejected() {
        let m = acrylate_solid(PronySeries::elastic());
        let mut f = Matrix::<2>::identity();
        f[(0, 0)] = -1.0;
        assert!(matches!(solid_stress(&f, &[], &m, 1.0), Err(Error::Inversion { .. })));
    }

    #[test]
    fn maxwell_without_moduli_is_elastic() {
        let prony = PronySeries::new(
            0.8,
            vec![PronyElement { g: 0.0, tau: 1e-2 }, PronyElement { g: 0.0, tau: 1e-3 }],
        )
        .unwrap();
        let m = acrylate_solid(prony);
        let f = Matrix::<3>::new(1.1, 0.2, 0.0, 0.05, 0.95, 0.1, 0.0, -0.1, 1.02);
        let h = [
            dev(&Matrix::<3>::new(0.3, 0.1, 0.0, 0.1, -0.2, 0.4, 0.0, 0.4, 0.5)),
            dev(&Matrix::<3>::new(-0.1, 0.0, 0.2, 0.0, 0.6, 0.1, 0.2, 0.1, 0.0)),
        ];
        let with = solid_kirchhoff(&f, &h, &m);
        let without = solid_kirchhoff(&f, &[], &m);
        assert_eq!(with, without);
    }

    #[test]
    fn maxwell_step_relaxation() {
        let el = PronyElement { g: 0.4, tau: 0.01 };
        let s = dev(&Matrix::<3>::new(1.0, 0.3, 0.0, 0.3, -0.5, 0.2, 0.0, 0.2, 0.1));
        let id = Matrix::<3>::identity();
        let jump = 1e-9 * el.tau;
        let (h, sigma0) = maxwell_advance(&Matrix::zeros(), &id, &Matrix::zeros(), &s, jump, el);
        assert!((sigma0 - el.g * s).norm() < 1e-8 * s.norm());
        let (_, sigma_tau) = maxwell_advance(&h, &id, &s, &s, el.tau - jump, el);
        let expected = el.g * s * (-1.0f64).exp();
        assert!((sigma_tau - expected).norm() < 1e-6 * expected.norm());
    }

    #[test]
    fn fluid_cases() {
        let a = air();
        let z = Matrix::<3>::zeros();
        assert_eq!(fluid_stress(1.0, &z, &a, 0.0).unwrap(), z);
        let s = fluid_stress(1.0, &z, &a, 50e3).unwrap();
        assert!((s - (-50e3) * Matrix::<3>::identity()).norm() < 1e-9);
        let s = fluid_stress(0.95, &z, &a, 0.0).unwrap();
        assert!((fluid_pressure(0.95, &a, 0.0) - 7e3).abs() < 1e-6);
        assert!((s + 7e3 * Matrix::<3>::identity()).norm() < 1e-6);
        assert!(fluid_stress(0.0, &z, &a, 0.0).is_err());
    }

    #[test]
    fn fluid_linear_in_actuation() {
        let a = air();
        let l = Matrix::<3>::new(0.1, 2.0, 0.0, -1.0, 0.3, 0.5, 0.2, 0.0, -0.4);
        let s0 = fluid_stress(0.97, &l, &a, 0.0).unwrap();
        let s1 = fluid_stress(0.97, &l, &a, 1e4).unwrap();
        assert!((s1 - s0 + 1e4 * Matrix::<3>::identity()).norm() < 1e-8);
    }

    #[test]
    fn actuation_sampling() {
        let w = ActuationWaveform::synthetic_square(80e3, 5.0, 0.5, 0.01, 200, 0.25).unwrap();
        assert_eq!(sample_actuation(&w, 0.1), 0.0);
        for &t in &[0.25, 0.31, 0.4499, 0.5123, 0.7] {
            let a = sample_actuation(&w, t);
            let b = sample_actuation(&w, t + 0.2);
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{t}: {a} vs {b}");
        }
        let (ts, ps) = w.samples()[37];
        assert!((sample_actuation(&w, 0.25 + ts) - ps).abs() < 1e-9);
        assert!(w.peak() < 80e3 && w.peak() > 79e3);
        assert!(ActuationWaveform::new(vec![], 0.2, 0.0).is_err());
        assert!(ActuationWaveform::new(vec![(0.0, 1.0), (0.0, 2.0)], 0.2, 0.0).is_err());
    }
}
