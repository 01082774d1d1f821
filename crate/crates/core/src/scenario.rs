//! Scenario files: a sectioned key-value (TOML) description of geometry,
//! materials, actuation, environment and optimizer settings, with units in
//! the key names. [`Scenario::build`] turns one into a runnable problem.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::constitutive::{ActuationWaveform, FluidMaterial, SolidMaterial, DEFAULT_VOID_FLOOR};
use crate::design::{DesignPipeline, FilterKernel, SymmetryMap, SymmetryPlane};
use crate::error::{Error, Result};
use crate::math::{Matrix, Vector};
use crate::prony::{truncate_for_dt, PronyElement, PronySeries};
use crate::sim::{
    stable_dt, BoundarySet, KinematicState, ParticleSet, Phase, ScatterMode, SimClock, Simulation,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// 2 or 3.
    pub dimension: usize,
    pub grid: GridConfig,
    pub body: BodyConfig,
    pub solid: SolidConfig,
    pub fluid: FluidConfig,
    pub actuation: ActuationConfig,
    pub time: TimeConfig,
    pub environment: EnvironmentConfig,
    pub design: DesignConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Nodes per axis.
    pub resolution: usize,
    pub spacing_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyConfig {
    /// Lower corner of the body box.
    pub origin_m: Vec<f64>,
    pub size_m: Vec<f64>,
    /// Chamber box, relative to the body origin.
    pub chamber_offset_m: Vec<f64>,
    pub chamber_size_m: Vec<f64>,
    pub wall_thickness_m: f64,
    pub particle_spacing_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolidConfig {
    pub youngs_modulus_pa: f64,
    pub poisson_ratio: f64,
    pub density_kg_m3: f64,
    #[serde(default = "default_void_floor")]
    pub void_floor: f64,
    #[serde(default = "one")]
    pub prony_g_inf: f64,
    #[serde(default)]
    pub prony_g: Vec<f64>,
    #[serde(default)]
    pub prony_tau_s: Vec<f64>,
    /// Scale relative moduli so `g_∞ = 1` (the Young's modulus is then the
    /// equilibrium modulus).
    #[serde(default = "yes")]
    pub prony_normalize: bool,
    /// Drop elements with `τ < factor·dt`.
    #[serde(default = "default_cutoff")]
    pub prony_cutoff_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluidConfig {
    pub bulk_modulus_pa: f64,
    pub shear_viscosity_pa_s: f64,
    #[serde(default)]
    pub volume_viscosity_pa_s: f64,
    pub density_kg_m3: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaveformKind {
    Square,
    File,
    Constant,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActuationConfig {
    pub kind: WaveformKind,
    #[serde(default)]
    pub pressure_pa: f64,
    #[serde(default = "default_frequency")]
    pub frequency_hz: f64,
    #[serde(default = "half")]
    pub duty: f64,
    #[serde(default = "default_rise")]
    pub rise_time_s: f64,
    /// Actuation onset; defaults to the objective window start.
    #[serde(default)]
    pub onset_s: Option<f64>,
    /// CSV `time_s,pressure_pa`, relative to the scenario file.
    #[serde(default)]
    pub file: Option<String>,
    /// Waveform period for `kind = "file"`; inferred from the samples when
    /// absent.
    #[serde(default)]
    pub period_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub dt_s: f64,
    pub t_start_s: f64,
    pub t_end_s: f64,
    #[serde(default = "half")]
    pub cfl_safety: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    #[serde(default = "default_gravity")]
    pub gravity_m_s2: f64,
    /// Incline as rise over run; rotates gravity against the travel axis.
    #[serde(default)]
    pub slope: f64,
    /// Ground plane height along the vertical (last) axis.
    #[serde(default)]
    pub ground_m: Option<f64>,
    /// Two walls normal to the first axis at these coordinates.
    #[serde(default)]
    pub walls_m: Option<[f64; 2]>,
    /// Axis of travel for the objective.
    pub travel_axis: usize,
    #[serde(default = "default_sign")]
    pub travel_sign: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    pub filter_radius_m: f64,
    #[serde(default = "default_beta")]
    pub projection_beta: f64,
    #[serde(default)]
    pub initial_phi: f64,
    /// Axes normal to mirror planes through the body center.
    #[serde(default)]
    pub symmetry_axes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GravityRamp {
    #[default]
    None,
    Stair,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_iters: usize,
    pub constraint_max: f64,
    pub penalty_initial: f64,
    pub penalty_growth: f64,
    pub penalty_every: usize,
    pub penalty_after: usize,
    pub penalty_max: f64,
    pub multiplier_initial: f64,
    pub gravity_ramp: GravityRamp,
    pub ramp_every: usize,
    pub ramp_steps: usize,
    pub convergence_tol: f64,
    pub convergence_abs: f64,
    /// Largest number of stored checkpoint states (0 = unlimited).
    pub max_checkpoints: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_iters: 400,
            constraint_max: 0.0125,
            penalty_initial: 1.0,
            penalty_growth: 2.0,
            penalty_every: 50,
            penalty_after: 50,
            penalty_max: 1e6,
            multiplier_initial: 0.0,
            gravity_ramp: GravityRamp::None,
            ramp_every: 20,
            ramp_steps: 10,
            convergence_tol: 1e-3,
            convergence_abs: 1e-6,
            max_checkpoints: 0,
        }
    }
}

fn default_void_floor() -> f64 {
    DEFAULT_VOID_FLOOR
}
fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn half() -> f64 {
    0.5
}
fn default_cutoff() -> f64 {
    10.0
}
fn default_frequency() -> f64 {
    5.0
}
fn default_rise() -> f64 {
    5e-3
}
fn default_gravity() -> f64 {
    9.8
}
fn default_sign() -> f64 {
    1.0
}
fn default_beta() -> f64 {
    8.0
}

/// 1-based line of a byte offset.
fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl Scenario {
    /// Parse scenario text. `path` is used for messages and to resolve
    /// relative file references.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0),
            message: e.message().to_string(),
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize scenario: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dimension;
        if d != 2 && d != 3 {
            return Err(Error::Validation(format!("dimension must be 2 or 3, got {d}")));
        }
        let b = &self.body;
        for (key, v) in [
            ("body.origin_m", &b.origin_m),
            ("body.size_m", &b.size_m),
            ("body.chamber_offset_m", &b.chamber_offset_m),
            ("body.chamber_size_m", &b.chamber_size_m),
        ] {
            if v.len() != d {
                return Err(Error::Validation(format!("{key} needs {d} components, got {}", v.len())));
            }
        }
        if !(self.grid.spacing_m > 0.0) || self.grid.resolution < 5 {
            return Err(Error::Validation("grid needs spacing > 0 and at least 5 nodes per axis".into()));
        }
        if !(b.particle_spacing_m > 0.0) {
            return Err(Error::Validation("body.particle_spacing_m must be > 0".into()));
        }
        if b.wall_thickness_m < b.particle_spacing_m * (1.0 - 1e-9) {
            return Err(Error::Validation(
                "chamber wall must be at least one particle spacing thick".into(),
            ));
        }
        let extent = (self.grid.resolution - 1) as f64 * self.grid.spacing_m;
        let margin = 2.0 * self.grid.spacing_m;
        for a in 0..d {
            if !(b.size_m[a] > 0.0 && b.chamber_size_m[a] > 0.0) {
                return Err(Error::Validation("body and chamber sizes must be > 0".into()));
            }
            let lo = b.chamber_offset_m[a] - b.wall_thickness_m;
            let hi = b.chamber_offset_m[a] + b.chamber_size_m[a] + b.wall_thickness_m;
            if !(lo > -1e-12 && hi < b.size_m[a] + 1e-12) || b.chamber_offset_m[a] <= 0.0 {
                return Err(Error::Validation(format!(
                    "chamber and its wall must lie strictly inside the body (axis {a})"
                )));
            }
            if b.origin_m[a] < margin || b.origin_m[a] + b.size_m[a] > extent - margin {
                return Err(Error::Validation(format!(
                    "body must keep a two-cell margin inside the grid (axis {a})"
                )));
            }
        }
        if self.environment.travel_axis >= d {
            return Err(Error::Validation("environment.travel_axis out of range".into()));
        }
        if self.environment.travel_sign.abs() != 1.0 {
            return Err(Error::Validation("environment.travel_sign must be 1 or -1".into()));
        }
        if let Some([lo, hi]) = self.environment.walls_m {
            if !(lo < hi) {
                return Err(Error::Validation("walls_m must be increasing".into()));
            }
        }
        if self.design.symmetry_axes.iter().any(|&a| a >= d) {
            return Err(Error::Validation("design.symmetry_axes out of range".into()));
        }
        if !(-1.0..=1.0).contains(&self.design.initial_phi) {
            return Err(Error::Validation("design.initial_phi must lie in [-1, 1]".into()));
        }
        if self.solid.prony_g.len() != self.solid.prony_tau_s.len() {
            return Err(Error::Validation("prony_g and prony_tau_s lengths differ".into()));
        }
        if self.actuation.kind == WaveformKind::File && self.actuation.file.is_none() {
            return Err(Error::Validation("actuation.kind = \"file\" needs actuation.file".into()));
        }
        SimClock::new(self.time.dt_s, self.time.t_start_s, self.time.t_end_s)?;
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.penalty_initial > 0.0 && o.penalty_growth >= 1.0) {
            return Err(Error::Validation(
                "optimizer needs learning_rate > 0, penalty_initial > 0, penalty_growth >= 1".into(),
            ));
        }
        if o.penalty_every == 0 || o.ramp_every == 0 || o.ramp_steps == 0 {
            return Err(Error::Validation("schedule periods must be > 0".into()));
        }
        Ok(())
    }

    pub fn prony(&self) -> Result<PronySeries> {
        let s = &self.solid;
        let elements = s
            .prony_g
            .iter()
            .zip(&s.prony_tau_s)
            .map(|(&g, &tau)| PronyElement { g, tau })
            .collect();
        let mut series = PronySeries::new(s.prony_g_inf, elements)?;
        if s.prony_normalize {
            series = series.normalized_to_equilibrium()?;
        }
        truncate_for_dt(&series, self.time.dt_s, s.prony_cutoff_factor)
    }

    pub fn solid_material(&self) -> Result<SolidMaterial> {
        let s = &self.solid;
        SolidMaterial::from_youngs(
            s.youngs_modulus_pa,
            s.poisson_ratio,
            s.density_kg_m3,
            self.prony()?,
            s.void_floor,
        )
    }

    pub fn fluid_material(&self) -> Result<FluidMaterial> {
        let f = &self.fluid;
        let m = FluidMaterial {
            bulk_modulus: f.bulk_modulus_pa,
            shear_viscosity: f.shear_viscosity_pa_s,
            volume_viscosity: f.volume_viscosity_pa_s,
            density: f.density_kg_m3,
        };
        m.validate()?;
        Ok(m)
    }

    /// Actuation waveform; `base_dir` resolves a relative waveform file.
    pub fn waveform(&self, base_dir: &Path) -> Result<ActuationWaveform> {
        let a = &self.actuation;
        let onset = a.onset_s.unwrap_or(self.time.t_start_s);
        match a.kind {
            WaveformKind::None => Ok(ActuationWaveform::silent()),
            WaveformKind::Constant => Ok(ActuationWaveform::constant(a.pressure_pa, onset)),
            WaveformKind::Square => {
                ActuationWaveform::synthetic_square(a.pressure_pa, a.frequency_hz, a.duty, a.rise_time_s, 400, onset)
            }
            WaveformKind::File => {
                let rel = a.file.as_deref().unwrap_or_default();
                let path = resolve(base_dir, rel);
                let w = crate::io::load_waveform(&path, a.period_s)?;
                Ok(w.with_t_start(onset))
            }
        }
    }

    pub fn gravity_vector<const D: usize>(&self, magnitude: f64) -> Vector<D> {
        let env = &self.environment;
        let up = D - 1;
        let mut g = Vector::<D>::zeros();
        let theta = env.slope.atan();
        g[up] = -magnitude * theta.cos();
        if env.travel_axis != up {
            g[env.travel_axis] -= env.travel_sign * magnitude * theta.sin();
        }
        g
    }

    pub fn direction<const D: usize>(&self) -> Vector<D> {
        let mut e = Vector::<D>::zeros();
        e[self.environment.travel_axis] = self.environment.travel_sign;
        e
    }

    fn boundaries<const D: usize>(&self) -> Result<BoundarySet<D>> {
        let mut set = BoundarySet::none();
        let env = &self.environment;
        if let Some(z) = env.ground_m {
            let mut p = Vector::<D>::zeros();
            p[D - 1] = z;
            let mut n = Vector::<D>::zeros();
            n[D - 1] = 1.0;
            set.add(p, n)?;
        }
        if let Some([lo, hi]) = env.walls_m {
            let mut p = Vector::<D>::zeros();
            let mut n = Vector::<D>::zeros();
            p[0] = lo;
            n[0] = 1.0;
            set.add(p, n)?;
            p[0] = hi;
            n[0] = -1.0;
            set.add(p, n)?;
        }
        Ok(set)
    }

    /// Lattice of particles seeded at cell centers of the body box.
    pub fn seed<const D: usize>(&self) -> Result<(Vec<Vector<D>>, Vec<Phase>)> {
        self.check_dim::<D>()?;
        let b = &self.body;
        let s = b.particle_spacing_m;
        let counts: Vec<usize> = (0..D).map(|a| (b.size_m[a] / s).round() as usize).collect();
        let total: usize = counts.iter().product();
        let mut positions = Vec::with_capacity(total);
        let mut phases = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let mut local = Vector::<D>::zeros();
            for a in 0..D {
                local[a] = (rem % counts[a]) as f64 * s + 0.5 * s;
                rem /= counts[a];
            }
            let in_box = |pad: f64| {
                (0..D).all(|a| {
                    local[a] > b.chamber_offset_m[a] - pad
                        && local[a] < b.chamber_offset_m[a] + b.chamber_size_m[a] + pad
                })
            };
            let phase = if in_box(0.0) {
                Phase::Fluid
            } else if in_box(b.wall_thickness_m) {
                Phase::Wall
            } else {
                Phase::Design
            };
            positions.push(Vector::<D>::from_fn(|a, _| b.origin_m[a] + local[a]));
            phases.push(phase);
        }
        Ok((positions, phases))
    }

    fn check_dim<const D: usize>(&self) -> Result<()> {
        if self.dimension != D {
            return Err(Error::Validation(format!(
                "scenario is {}D, requested {D}D",
                self.dimension
            )));
        }
        Ok(())
    }

    /// Assemble simulation and design pipeline. `base_dir` resolves
    /// relative file references.
    pub fn build<const D: usize>(&self, base_dir: &Path, scatter: ScatterMode) -> Result<Problem<D>> {
        self.validate()?;
        self.check_dim::<D>()?;
        let solid = self.solid_material()?;
        let fluid = self.fluid_material()?;
        let cfl = stable_dt(&solid, &fluid, D, self.grid.spacing_m, self.time.cfl_safety)?;
        if !cfl.admits(self.time.dt_s) {
            return Err(Error::Validation(format!(
                "dt = {} s exceeds the CFL limit {:.3e} s (wave speed {:.1} m/s)",
                self.time.dt_s,
                cfl.dt_max,
                cfl.max_speed()
            )));
        }
        let (positions, phases) = self.seed::<D>()?;
        let n = positions.len();
        let ne = solid.prony.elements.len();
        let v0 = self.body.particle_spacing_m.powi(D as i32);
        let mut state = KinematicState::zeros(n, ne);
        state.position = positions.clone();
        state.deformation = vec![Matrix::<D>::identity(); n];
        let mut design_index = Vec::with_capacity(n);
        let mut design_positions = Vec::new();
        let mut mass = Vec::with_capacity(n);
        for (p, phase) in phases.iter().enumerate() {
            match phase {
                Phase::Design => {
                    design_index.push(Some(design_positions.len()));
                    design_positions.push(positions[p]);
                    mass.push(solid.density * v0);
                }
                Phase::Wall => {
                    design_index.push(None);
                    mass.push(solid.density * v0);
                }
                Phase::Fluid => {
                    design_index.push(None);
                    mass.push(fluid.density * v0);
                }
            }
        }
        if design_positions.is_empty() {
            return Err(Error::Validation("scenario has no design particles".into()));
        }
        let template = ParticleSet {
            state,
            volume0: vec![v0; n],
            mass,
            modulus_scale: vec![1.0; n],
            phase: phases,
            design_index,
        };
        template.validate()?;

        let resolution = [self.grid.resolution; D];
        let sim = Simulation {
            template,
            resolution,
            spacing: self.grid.spacing_m,
            solid,
            fluid,
            waveform: self.waveform(base_dir)?,
            boundaries: self.boundaries()?,
            gravity: self.gravity_vector(self.environment.gravity_m_s2),
            clock: SimClock::new(self.time.dt_s, self.time.t_start_s, self.time.t_end_s)?,
            direction: self.direction(),
            scatter,
        };
        let kernel = FilterKernel::build(&design_positions, self.design.filter_radius_m)?;
        let center: Vec<f64> = (0..D)
            .map(|a| self.body.origin_m[a] + 0.5 * self.body.size_m[a])
            .collect();
        let planes: Vec<SymmetryPlane> = self
            .design
            .symmetry_axes
            .iter()
            .map(|&axis| SymmetryPlane {
                axis,
                coordinate: center[axis],
            })
            .collect();
        let symmetry =
            SymmetryMap::build(&design_positions, &planes, 0.25 * self.body.particle_spacing_m)?;
        let pipeline = DesignPipeline::new(kernel, self.design.projection_beta, symmetry)?;
        Ok(Problem {
            sim,
            pipeline,
            design_positions,
            particle_spacing: self.body.particle_spacing_m,
        })
    }

    pub fn initial_phi(&self, n_design: usize) -> Vec<f64> {
        vec![self.design.initial_phi; n_design]
    }
}

/// A scenario assembled for dimension `D`.
#[derive(Debug, Clone)]
pub struct Problem<const D: usize> {
    pub sim: Simulation<D>,
    pub pipeline: DesignPipeline,
    /// Undeformed design-particle positions, indexed like the design vector.
    pub design_positions: Vec<Vector<D>>,
    pub particle_spacing: f64,
}

/// A scenario file read from disk.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub scenario: Scenario,
    pub text: String,
    pub path: PathBuf,
}

impl LoadedScenario {
    pub fn base_dir(&self) -> PathBuf {
        self.path.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

pub fn load_scenario(path: &Path) -> Result<LoadedScenario> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let scenario = Scenario::parse(&text, path)?;
    if let (WaveformKind::File, Some(f)) = (scenario.actuation.kind, &scenario.actuation.file) {
        let wf = resolve(&path.parent().map(Path::to_path_buf).unwrap_or_default(), f);
        if !wf.exists() {
            return Err(Error::Validation(format!(
                "waveform file {} does not exist",
                wf.display()
            )));
        }
    }
    Ok(LoadedScenario {
        scenario,
        text,
        path: path.to_path_buf(),
    })
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
