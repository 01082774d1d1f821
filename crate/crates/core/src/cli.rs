//! Command-line entry points. `main` only parses arguments and maps
//! errors to exit codes; everything else lives here so tests can drive
//! the commands in-process.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::adjoint::{finite_difference_check, plan_checkpoints, gradient};
use crate::error::{Error, Result};
use crate::io::{
    atomic_write, default_out_dir, density_volume, ensure_writable_dir, gradient_csv, load_curve, read_volume,
    snapshot_csv, write_volume,
};
use crate::optimizer::{optimize, OptimizerCheckpoint};
use crate::prony::fit_prony;
use crate::scenario::{load_scenario, LoadedScenario, Problem, Scenario};
use crate::sim::{run_forward, ForwardOptions, ScatterMode};
use crate::surface::{extract_isosurface, to_ascii_stl, to_polyline_csv, SurfaceMesh};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Debug, Parser)]
#[command(name = "soromorph", version, about = "Topology optimization of pneumatic soft robots")]
pub struct Cli {
    /// Serial particle-to-grid scatter and timing-free logs, so reruns are
    /// bitwise identical.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Output directory (default: $SOROMORPH_OUT or ./out).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize the body layout of a scenario (or rerun a manifest).
    Optimize(OptimizeArgs),
    /// Run one forward simulation of a design.
    Simulate(SimulateArgs),
    /// Compare adjoint gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Fit a Prony series to a storage/loss master curve.
    FitProny(FitPronyArgs),
    /// Extract the density level set of a volume.
    Surface(SurfaceArgs),
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// Scenario file, or a manifest.json written by an earlier run.
    pub scenario: PathBuf,
    #[arg(long, value_name = "N")]
    pub max_iters: Option<usize>,
    /// Continue from a checkpoint.json.
    #[arg(long, value_name = "CHECKPOINT")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    pub scenario: PathBuf,
    /// Density volume sampled at the design particles (default: the
    /// scenario's initial design).
    #[arg(long, value_name = "VOLUME")]
    pub design: Option<PathBuf>,
    /// Write a particle snapshot every N steps.
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub snapshot_every: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    pub scenario: PathBuf,
    /// Design indices to probe (default: ten spread over the design).
    #[arg(long, value_delimiter = ',', value_name = "I,J,...")]
    pub indices: Vec<usize>,
    #[arg(long, default_value_t = 1e-4)]
    pub delta: f64,
    /// Floor of the relative-error denominator.
    #[arg(long, default_value_t = 1e-12)]
    pub eps_abs: f64,
    /// Relative error counted as agreement.
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct FitPronyArgs {
    /// CSV with columns omega_rad_s, storage_pa, loss_pa.
    pub curve: PathBuf,
    #[arg(long, value_name = "N")]
    pub terms: usize,
    /// Relaxation-time range; defaults to the inverse frequency span.
    #[arg(long, num_args = 2, value_names = ["TAU_MIN", "TAU_MAX"])]
    pub tau_range: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct SurfaceArgs {
    pub volume: PathBuf,
    #[arg(long, default_value_t = 0.5, value_parser = parse_level)]
    pub level: f64,
}

fn parse_level(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("level must lie in (0, 1), got {v}"))
    }
}

/// Everything needed to rerun an optimization: the fully resolved scenario
/// text and the run settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    /// Original scenario location; relative file references resolve here.
    pub scenario_path: PathBuf,
    pub scenario: String,
    pub deterministic: bool,
    pub max_iters: usize,
    pub resumed_from: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub objective_m: f64,
    pub xg_start_m: Vec<f64>,
    pub xg_end_m: Vec<f64>,
    pub design_mass_kg: f64,
    pub clamp_activations: usize,
    pub peak_kinetic_energy_j: f64,
    pub steps: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    let out = cli.out.clone().unwrap_or_else(default_out_dir);
    let scatter = if cli.deterministic {
        ScatterMode::Deterministic
    } else {
        ScatterMode::Parallel
    };
    match cli.command {
        Command::Optimize(args) => run_optimize(&args, &out, cli.deterministic),
        Command::Simulate(args) => {
            let ls = load_scenario(&args.scenario)?;
            dispatch(&ls, |d| match d {
                2 => simulate::<2>(&ls, &args, &out, scatter),
                _ => simulate::<3>(&ls, &args, &out, scatter),
            })
        }
        Command::Gradcheck(args) => {
            let ls = load_scenario(&args.scenario)?;
            dispatch(&ls, |d| match d {
                2 => gradcheck::<2>(&ls, &args, &out, scatter),
                _ => gradcheck::<3>(&ls, &args, &out, scatter),
            })
        }
        Command::FitProny(args) => run_fit_prony(&args),
        Command::Surface(args) => run_surface(&args, &out),
    }
}

fn dispatch(ls: &LoadedScenario, f: impl FnOnce(usize) -> Result<()>) -> Result<()> {
    match ls.scenario.dimension {
        2 | 3 => f(ls.scenario.dimension),
        d => Err(Error::Validation(format!("dimension must be 2 or 3, got {d}"))),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("cannot serialize {}: {e}", path.display())))?;
    atomic_write(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn run_optimize(args: &OptimizeArgs, out: &Path, deterministic_flag: bool) -> Result<()> {
    let is_manifest = args.scenario.extension().is_some_and(|e| e == "json");
    let (ls, deterministic, max_iters) = if is_manifest {
        let m: Manifest = read_json(&args.scenario)?;
        let scenario = Scenario::parse(&m.scenario, &args.scenario)?;
        let ls = LoadedScenario {
            scenario,
            text: m.scenario.clone(),
            path: m.scenario_path.clone(),
        };
        (ls, m.deterministic || deterministic_flag, args.max_iters.unwrap_or(m.max_iters))
    } else {
        let ls = load_scenario(&args.scenario)?;
        let iters = args.max_iters.unwrap_or(ls.scenario.optimizer.max_iters);
        (ls, deterministic_flag, iters)
    };
    ensure_writable_dir(out)?;
    info!("resolved scenario:\n{}", ls.scenario.to_text()?);
    let manifest = Manifest {
        tool: "soromorph".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        scenario_path: std::fs::canonicalize(&ls.path).unwrap_or_else(|_| ls.path.clone()),
        scenario: ls.scenario.to_text()?,
        deterministic,
        max_iters,
        resumed_from: args.resume.clone(),
    };
    let scatter = if deterministic {
        ScatterMode::Deterministic
    } else {
        ScatterMode::Parallel
    };
    let resume = args.resume.as_deref();
    dispatch(&ls, |d| match d {
        2 => optimize_in::<2>(&ls, &manifest, resume, out, scatter),
        _ => optimize_in::<3>(&ls, &manifest, resume, out, scatter),
    })
}

fn optimize_in<const D: usize>(
    ls: &LoadedScenario,
    manifest: &Manifest,
    resume: Option<&Path>,
    out: &Path,
    scatter: ScatterMode,
) -> Result<()> {
    let sc = &ls.scenario;
    let mut problem = sc.build::<D>(&ls.base_dir(), scatter)?;
    let cfg = &sc.optimizer;
    let start = match resume {
        Some(p) => read_json::<OptimizerCheckpoint>(p)?,
        None => OptimizerCheckpoint::fresh(sc.initial_phi(problem.pipeline.n_design()), cfg),
    };
    write_json(&out.join(MANIFEST_FILE), manifest)?;
    let deterministic = manifest.deterministic;
    let mut hook = |state: &OptimizerCheckpoint| -> Result<()> {
        if let Some(r) = state.history.records().last() {
            info!(
                "iter {} L = {:.6e} m, C = {:.4e}, g = {:.3} m/s^2",
                r.iter, r.objective, r.constraint, r.gravity
            );
        }
        write_json(&out.join(CHECKPOINT_FILE), state)?;
        atomic_write(&out.join(HISTORY_FILE), state.history.to_csv(deterministic).as_bytes())
    };
    let outcome = optimize(
        &mut problem,
        cfg,
        sc.environment.gravity_m_s2,
        start,
        manifest.max_iters,
        &mut hook,
    )?;
    let state = &outcome.state;
    atomic_write(&out.join(HISTORY_FILE), state.history.to_csv(deterministic).as_bytes())?;
    write_json(&out.join(CHECKPOINT_FILE), state)?;
    let final_field = problem.pipeline.forward(&state.phi)?;
    write_volume(&out.join("final.vol"), &density_volume(&problem, &final_field.gamma)?)?;
    let best_phi = state.best.as_ref().map(|b| b.phi.as_slice()).unwrap_or(&state.phi);
    let best_field = problem.pipeline.forward(best_phi)?;
    let best_volume = density_volume(&problem, &best_field.gamma)?;
    write_volume(&out.join("best.vol"), &best_volume)?;
    let mesh = extract_isosurface(&best_volume, 0.5)?;
    write_mesh(&mesh, out, "best", D)?;

    let last = state.history.records().last();
    println!(
        "iterations={} best_objective_m={:e} final_constraint={:e} converged={}",
        state.history.len(),
        state.best.as_ref().map_or(f64::NAN, |b| b.objective),
        last.map_or(f64::NAN, |r| r.constraint),
        outcome.converged
    );
    match outcome.failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn write_mesh(mesh: &SurfaceMesh, out: &Path, stem: &str, dim: usize) -> Result<PathBuf> {
    let path = if dim == 2 {
        out.join(format!("{stem}_contour.csv"))
    } else {
        out.join(format!("{stem}.stl"))
    };
    let text = if dim == 2 {
        to_polyline_csv(mesh)
    } else {
        to_ascii_stl(mesh, stem)
    };
    atomic_write(&path, text.as_bytes())?;
    Ok(path)
}

/// Design densities sampled from `volume` at the design particles.
pub fn gamma_from_volume<const D: usize>(problem: &Problem<D>, volume: &crate::io::DensityVolume) -> Vec<f64> {
    problem
        .design_positions
        .iter()
        .map(|x| {
            let mut p = [0.0; 3];
            for a in 0..D {
                p[a] = x[a];
            }
            volume.sample(p).clamp(0.0, 1.0)
        })
        .collect()
}

fn simulate<const D: usize>(ls: &LoadedScenario, args: &SimulateArgs, out: &Path, scatter: ScatterMode) -> Result<()> {
    let problem = ls.scenario.build::<D>(&ls.base_dir(), scatter)?;
    let gamma = match &args.design {
        Some(p) => gamma_from_volume(&problem, &read_volume(p)?),
        None => {
            let phi = ls.scenario.initial_phi(problem.pipeline.n_design());
            problem.pipeline.forward(&phi)?.gamma
        }
    };
    ensure_writable_dir(out)?;
    let summary = run_forward(
        &problem.sim,
        &gamma,
        &ForwardOptions {
            snapshot_every: args.snapshot_every,
        },
    )?;
    for snap in &summary.snapshots {
        let csv = snapshot_csv(&snap.positions, &problem.sim.template, &gamma);
        atomic_write(&out.join(format!("snapshot_{:06}.csv", snap.step)), csv.as_bytes())?;
    }
    let report = SimulationReport {
        objective_m: summary.objective,
        xg_start_m: summary.xg_start.iter().copied().collect(),
        xg_end_m: summary.xg_end.iter().copied().collect(),
        design_mass_kg: summary.design_mass,
        clamp_activations: summary.clamp_activations,
        peak_kinetic_energy_j: summary.peak_kinetic_energy,
        steps: problem.sim.n_steps(),
    };
    write_json(&out.join("simulation.json"), &report)?;
    println!(
        "objective_m={:e} design_mass_kg={:e} snapshots={}",
        report.objective_m,
        report.design_mass_kg,
        summary.snapshots.len()
    );
    Ok(())
}

/// Ten (or fewer) indices spread evenly over `n` design variables.
pub fn default_probe_indices(n: usize) -> Vec<usize> {
    let k = n.min(10);
    (0..k).map(|i| i * n / k.max(1)).collect()
}

fn gradcheck<const D: usize>(ls: &LoadedScenario, args: &GradcheckArgs, out: &Path, scatter: ScatterMode) -> Result<()> {
    let problem = ls.scenario.build::<D>(&ls.base_dir(), scatter)?;
    let n = problem.pipeline.n_design();
    let phi = ls.scenario.initial_phi(n);
    let indices = if args.indices.is_empty() {
        default_probe_indices(n)
    } else {
        args.indices.clone()
    };
    let probes = finite_difference_check(&problem.sim, &problem.pipeline, &phi, &indices, args.delta, args.eps_abs)?;
    println!("index,adjoint,finite_difference,relative_error");
    for p in &probes {
        println!("{},{:e},{:e},{:e}", p.index, p.adjoint, p.finite_difference, p.relative_error);
    }
    let passed = probes.iter().filter(|p| p.relative_error < args.tolerance).count();
    println!("passed={passed}/{}", probes.len());

    ensure_writable_dir(out)?;
    let plan = plan_checkpoints(problem.sim.n_steps(), None)?;
    let g = gradient(&problem.sim, &problem.pipeline, &phi, &plan)?;
    let csv = gradient_csv(&problem.design_positions, &g.field.gamma, &g.dgamma, &g.dphi);
    atomic_write(&out.join("gradient.csv"), csv.as_bytes())
}

fn run_fit_prony(args: &FitPronyArgs) -> Result<()> {
    let curve = load_curve(&args.curve)?;
    let range = match &args.tau_range {
        Some(r) => (r[0], r[1]),
        None => {
            let (lo, hi) = curve
                .samples
                .iter()
                .fold((f64::INFINITY, 0.0f64), |(lo, hi), s| (lo.min(s.omega), hi.max(s.omega)));
            (1.0 / hi, 1.0 / lo)
        }
    };
    let fit = fit_prony(&curve, args.terms, range)?;
    print!("{}", fit.series.to_scenario_block());
    println!("residual={:e} samples_used={}", fit.residual, fit.samples_used);
    Ok(())
}

fn run_surface(args: &SurfaceArgs, out: &Path) -> Result<()> {
    let volume = read_volume(&args.volume)?;
    let mesh = extract_isosurface(&volume, args.level)?;
    ensure_writable_dir(out)?;
    let dim = if volume.dims[2] == 1 { 2 } else { 3 };
    let path = write_mesh(&mesh, out, "surface", dim)?;
    println!(
        "vertices={} faces={} components={} watertight={} measure={:e} path={}",
        mesh.vertices.len(),
        if dim == 2 { mesh.segments.len() } else { mesh.triangles.len() },
        mesh.components,
        mesh.watertight,
        mesh.enclosed_measure(),
        path.display()
    );
    Ok(())
}
