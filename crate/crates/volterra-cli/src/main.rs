//! `volterra`: batch verification of optimality conditions for registry
//! problems. Every command prints one JSON document; exit codes are 0 when
//! the requested checks pass, 1 when a check fails and 2 on usage errors.

use std::fs;
use std::path::{Path as FsPath, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use volterra_ocp::adjoint::Multiplier;
use volterra_ocp::bv::Measure;
use volterra_ocp::dynamics::{cost, solve_state, SolveOptions, Trajectory};
use volterra_ocp::grid::Path;
use volterra_ocp::multipliers::{
    certification_tol, check_pi_injectivity, check_qualification, estimate_polytope, multiplier_residuals,
    MultiplierPolytope,
};
use volterra_ocp::problem::{fd_tol, verify_order, Problem};
use volterra_ocp::registry::{self, RegistryEntry};
use volterra_ocp::second_order::{
    necessary_verdict, no_gap_report, sample_strict_directions, sufficient_verdict,
};
use volterra_ocp::structure::{detect_structure, StructureConfig, StructureReport};
use volterra_ocp::synthesis::{synthesize_control, synthesized_directions, SynthesisOptions, TargetProfile};
use volterra_ocp::Error;

#[derive(Parser)]
#[command(name = "volterra", version, about = "Optimality checks for state-constrained Volterra control problems")]
struct Cli {
    /// Write the report here instead of stdout.
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Registry entries.
    List,
    /// Solve the state equation for the registry candidate.
    Solve {
        #[arg(long)]
        problem: String,
        #[arg(long)]
        grid: Option<usize>,
        /// Picard tolerance.
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
        #[arg(long, default_value_t = 200)]
        max_iter: usize,
    },
    /// Active sets, junctions, touch points and assumption checks.
    Structure {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        structure: StructureArgs,
    },
    /// Multiplier polytope and residuals, or the residuals of a given multiplier.
    CheckFirstOrder {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        structure: StructureArgs,
        #[command(flatten)]
        multipliers: MultiplierArgs,
        /// Check this multiplier instead of estimating the polytope.
        #[arg(long)]
        multiplier: Option<PathBuf>,
        /// Save the first vertex in the format read by --multiplier.
        #[arg(long)]
        emit_multiplier: Option<PathBuf>,
    },
    /// Necessary and sufficient second-order checks and the no-gap summary.
    CheckSecondOrder {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        structure: StructureArgs,
        #[command(flatten)]
        multipliers: MultiplierArgs,
        #[command(flatten)]
        second: SecondOrderArgs,
    },
    /// Control v with g'(ȳ)z[v] equal to a target on the ε-neighbourhoods.
    Synthesize {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        structure: StructureArgs,
        /// TargetProfile JSON file, or `zero`.
        #[arg(long)]
        target: String,
        /// Initial direction z0 (comma separated); zero by default.
        #[arg(long, value_delimiter = ',')]
        z0: Option<Vec<f64>>,
    },
    /// Runs a registry entry end to end on its candidate.
    Demo {
        name: String,
        #[arg(long)]
        grid: Option<usize>,
        #[command(flatten)]
        structure: StructureArgs,
        /// Write t, u, y and g columns here for external plotting.
        #[arg(long)]
        plot: Option<PathBuf>,
        #[command(flatten)]
        multipliers: MultiplierArgs,
        #[command(flatten)]
        second: SecondOrderArgs,
    },
    /// Repeats a demo from the configuration recorded in its report.
    Rerun {
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Deserialize)]
struct DemoConfig {
    problem: String,
    cells: usize,
    structure: StructureArgs,
    multipliers: MultiplierArgs,
    second_order: SecondOrderArgs,
}

#[derive(Args)]
struct Input {
    #[arg(long)]
    problem: String,
    /// Trajectory file written by `solve`.
    #[arg(long)]
    trajectory: PathBuf,
}

#[derive(Args, Clone, Default, Serialize, Deserialize)]
struct StructureArgs {
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    eps0: Option<f64>,
    #[arg(long)]
    tol_active: Option<f64>,
}

impl StructureArgs {
    fn config(&self) -> StructureConfig {
        StructureConfig {
            tol_active: self.tol_active,
            eps: self.eps,
            eps0: self.eps0,
            ..Default::default()
        }
    }
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct MultiplierArgs {
    /// Random objectives used to find polytope vertices.
    #[arg(long, default_value_t = 8)]
    objectives: usize,
    #[arg(long, default_value_t = 3)]
    seed: u64,
    /// Certification tolerance; max(1e-6, 10Δt²)·scale by default.
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct SecondOrderArgs {
    /// Sampled strict critical directions for the necessary check; as many
    /// synthesized ones are added.
    #[arg(long, default_value_t = 20)]
    directions: usize,
    /// Directions and perturbations for the sufficient check.
    #[arg(long, default_value_t = 20)]
    samples: usize,
    /// Perturbation radius of the growth probe.
    #[arg(long, default_value_t = 1e-2)]
    radius: f64,
    /// Threshold of the necessary check: J ≥ -necessary_tol.
    #[arg(long, default_value_t = 1e-6)]
    necessary_tol: f64,
    /// Also require the sufficient conditions for exit code 0.
    #[arg(long)]
    require_sufficient: bool,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryFile {
    problem: String,
    cells: usize,
    y0: Vec<f64>,
    cost: f64,
    trajectory: Trajectory,
}

#[derive(Serialize, Deserialize)]
struct MultiplierFile {
    eta: Measure,
    psi: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DirectionFile {
    problem: String,
    v: Path,
    z0: Vec<f64>,
    residual: f64,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Check(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(
                Error::InvalidArgument(_)
                | Error::InvalidConfiguration(_)
                | Error::GridMismatch(_)
                | Error::InvalidTarget(_)
                | Error::NotFound(_),
            ) => Failure::Usage(e),
            Some(_) => Failure::Check(e),
            None => Failure::Usage(e),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::from(anyhow::Error::new(e))
    }
}

type Outcome = std::result::Result<(Value, bool), Failure>;

fn load_entry(name: &str) -> anyhow::Result<RegistryEntry> {
    // a file naming a registry entry, or the name itself
    let name = if FsPath::new(name).is_file() {
        let v: Value = serde_json::from_str(&fs::read_to_string(name)?).with_context(|| format!("parsing {name}"))?;
        v.get("name")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| anyhow::anyhow!("problem file {name} lacks a \"name\" field"))?
    } else {
        name.to_owned()
    };
    Ok(registry::load(&name)?)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &FsPath) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_trajectory(entry: &RegistryEntry, path: &FsPath) -> anyhow::Result<Trajectory> {
    let file: TrajectoryFile = read_json(path)?;
    anyhow::ensure!(
        file.problem == entry.name,
        "trajectory is for {} but the problem is {}",
        file.problem,
        entry.name
    );
    Ok(file.trajectory)
}

fn solve_candidate(entry: &RegistryEntry, cells: usize, opts: SolveOptions) -> anyhow::Result<(Trajectory, Vec<f64>)> {
    if cells < 2 {
        return Err(Error::InvalidArgument(format!("grid needs at least 2 cells, got {cells}")).into());
    }
    let g = entry.grid(cells)?;
    let (u, y0) = entry.candidate_on(&g);
    Ok((solve_state(entry.problem.as_ref(), &u, &y0, opts)?, y0))
}

fn structure_section(problem: &dyn Problem, traj: &Trajectory, report: &StructureReport) -> (Value, bool) {
    let lip = problem.lipschitz();
    // The finite-difference chain check assumes a smooth control, so a
    // mismatch there is reported without failing A2.
    let order = match verify_order(problem, traj, 64, fd_tol(traj), 1) {
        Ok(v) => json!({"holds": true, "fd_tolerance": fd_tol(traj), "constraints": v}),
        Err(e @ Error::ChainInconsistent { .. }) => json!({"holds": true, "chain_fd_diagnostic": e.to_string()}),
        Err(e) => json!({"holds": false, "diagnostic": e.to_string()}),
    };
    let touch: Vec<Value> = report
        .touch_points()
        .map(|t| json!({"constraint": t.constraint, "time": t.time, "reducible": t.reducible, "g2": t.g2}))
        .collect();
    let ok = lip.is_finite() && lip > 0.0 && order["holds"] == json!(true) && structure_ok(report);
    let section = json!({
        "problem": problem.name(),
        "cells": traj.grid().cells(),
        "eps": report.eps,
        "eps0": report.eps0,
        "tol_active": report.tol_active,
        "junction_times": report.junction_times,
        "touch_points": touch,
        "touch_count": report.touch_count(),
        "assumptions": {
            "A0": {"holds": lip.is_finite() && lip > 0.0, "lipschitz": lip},
            "A1": {"holds": report.a1_holds, "junction_cap": report.junction_cap},
            "A2": order,
            // no boundary arcs: nothing to check
            "A3": {"holds": report.a3_gamma.is_none_or(|g| g > 0.0), "gamma": report.a3_gamma, "vacuous": report.a3_gamma.is_none()},
            "A4": report.a4,
        },
        "report": report,
    });
    (section, ok)
}

/// Grid and tolerance provenance of a report.
fn tolerances(traj: &Trajectory, report: &StructureReport, margs: &MultiplierArgs, sargs: &SecondOrderArgs) -> Value {
    let g = traj.grid();
    json!({
        "cells": g.cells(),
        "dt_max": g.dt_max(),
        "picard_residual": traj.residual,
        "tol_active": report.tol_active,
        "eps": report.eps,
        "eps0": report.eps0,
        "certification": margs.tol.unwrap_or_else(|| certification_tol(traj)),
        "chain_fd": fd_tol(traj),
        "necessary": sargs.necessary_tol,
    })
}

/// Columnar text: t, u components, y components, g components.
fn write_plot(problem: &dyn Problem, traj: &Trajectory, path: &FsPath) -> anyhow::Result<()> {
    let d = problem.dims();
    let mut head = vec!["t".to_owned()];
    head.extend((0..d.m).map(|i| format!("u{i}")));
    head.extend((0..d.n).map(|i| format!("y{i}")));
    head.extend((0..d.r).map(|i| format!("g{i}")));
    let mut text = format!("# {}\n", head.join(" "));
    let g = traj.grid();
    for k in 0..g.len() {
        let mut row = vec![g.t(k)];
        row.extend_from_slice(traj.u.at(k));
        row.extend_from_slice(traj.y.at(k));
        if d.r > 0 {
            row.extend(problem.g(traj.y.at(k)).iter());
        }
        let cols: Vec<String> = row.iter().map(|x| format!("{x:.12e}")).collect();
        text.push_str(&cols.join(" "));
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn structure_ok(report: &StructureReport) -> bool {
    report.a1_holds && report.a4.holds && report.a3_gamma.is_none_or(|g| g > 0.0)
}

fn polytope_section(poly: &MultiplierPolytope) -> anyhow::Result<Value> {
    let inj = check_pi_injectivity(poly, 8, 1)?;
    let vertices: Vec<Value> = poly
        .vertices
        .iter()
        .map(|v| json!({"pi": v.pi, "psi": v.multiplier.psi, "residuals": v.residuals}))
        .collect();
    Ok(json!({
        "vertex_count": poly.vertices.len(),
        "min_residual": poly.min_residual,
        "tol": poly.tol,
        "certified": poly.all_certified(),
        "pi_injectivity": inj,
        "vertices": vertices,
    }))
}

fn second_order_section(
    problem: &dyn Problem,
    traj: &Trajectory,
    report: &StructureReport,
    poly: &MultiplierPolytope,
    args: &SecondOrderArgs,
    seed: u64,
) -> anyhow::Result<(Value, bool)> {
    let lam = poly.centre(problem, traj)?;
    let mut dirs = sample_strict_directions(problem, traj, &lam, report, args.directions, seed)?;
    let synthesized = synthesized_directions(problem, traj, report, &dirs, 2)?;
    let n_synth = synthesized.len();
    dirs.extend(synthesized);
    let nec = necessary_verdict(problem, traj, poly, report, &dirs, args.necessary_tol)?;
    let suff = sufficient_verdict(problem, traj, poly, report, args.samples, args.radius, seed)?;
    let gap = no_gap_report(problem, traj, poly, report)?;
    let table: Vec<Value> = nec
        .results
        .iter()
        .map(|r| json!({"index": r.index, "max_value": r.max_value, "vertex": r.argmax_vertex, "passed": r.passed}))
        .collect();
    let ok = nec.holds && (!args.require_sufficient || suff.holds);
    Ok((
        json!({
            "necessary": {
                "holds": nec.holds,
                "vacuous": nec.vacuous,
                "tol": nec.tol,
                "sampled": dirs.len() - n_synth,
                "synthesized": n_synth,
                "skipped": nec.skipped,
                "directions": table,
            },
            "sufficient": {
                "holds": suff.holds,
                "alpha": suff.alpha,
                "alpha_vertex": suff.alpha_vertex,
                "min_form": suff.min_form,
                "sampled": suff.sampled,
                "positivity": suff.positivity,
                "growth": suff.growth,
            },
            "no_gap": gap,
        }),
        ok,
    ))
}

fn write_or_print(out: Option<&FsPath>, v: &Value) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    match out {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display())),
        None => {
            use std::io::Write;
            let mut out = std::io::stdout().lock();
            match writeln!(out, "{text}") {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
                r => r.context("writing stdout"),
            }
        }
    }
}

fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::List => {
            let entries: Vec<Value> = registry::NAMES
                .iter()
                .map(|n| {
                    let e = registry::load(n).expect("registry names load");
                    json!({"name": n, "recommended_cells": e.recommended_cells, "reference": e.reference})
                })
                .collect();
            Ok((json!({"registry": entries}), true))
        }
        Command::Solve {
            problem,
            grid,
            tol,
            max_iter,
        } => {
            let entry = load_entry(problem)?;
            let cells = grid.unwrap_or(entry.recommended_cells);
            let opts = SolveOptions {
                tol: *tol,
                max_iter: *max_iter,
            };
            let (traj, y0) = solve_candidate(&entry, cells, opts)?;
            let file = TrajectoryFile {
                problem: entry.name.into(),
                cells,
                y0,
                cost: cost(entry.problem.as_ref(), &traj),
                trajectory: traj,
            };
            Ok((serde_json::to_value(file).map_err(anyhow::Error::from)?, true))
        }
        Command::Structure { input, structure } => {
            let entry = load_entry(&input.problem)?;
            let traj = load_trajectory(&entry, &input.trajectory)?;
            let report = detect_structure(entry.problem.as_ref(), &traj, &structure.config())?;
            let (section, ok) = structure_section(entry.problem.as_ref(), &traj, &report);
            Ok((json!({"config": structure, "structure": section}), ok))
        }
        Command::CheckFirstOrder {
            input,
            structure,
            multipliers,
            multiplier,
            emit_multiplier,
        } => {
            let entry = load_entry(&input.problem)?;
            let p = entry.problem.as_ref();
            let traj = load_trajectory(&entry, &input.trajectory)?;
            let tol = multipliers.tol.unwrap_or_else(|| certification_tol(&traj));
            if let Some(path) = multiplier {
                let file: MultiplierFile = read_json(path)?;
                let lam = Multiplier::new(p, &traj, file.eta, file.psi)?;
                let res = multiplier_residuals(p, &traj, &lam, tol)?;
                let flagged: Vec<&str> = [
                    ("adjoint", res.adjoint),
                    ("eta_negativity", res.eta_negativity),
                    ("complementarity", res.complementarity),
                    ("psi_cone", res.psi_cone),
                    ("stationarity", res.stationarity),
                    ("transversality", res.transversality),
                ]
                .into_iter()
                .filter(|(_, x)| *x > tol)
                .map(|(n, _)| n)
                .collect();
                let ok = res.certified;
                return Ok((json!({"first_order": {"residuals": res, "flagged": flagged}}), ok));
            }
            let report = detect_structure(p, &traj, &structure.config())?;
            let qual = check_qualification(p, &traj, &report, multipliers.seed)?;
            let mut poly = estimate_polytope(p, &traj, &report, multipliers.objectives, multipliers.seed)?;
            if let Some(t) = multipliers.tol {
                for v in &mut poly.vertices {
                    v.residuals = multiplier_residuals(p, &traj, &v.multiplier, t)?;
                }
                poly.tol = t;
            }
            if let Some(path) = emit_multiplier {
                let v = &poly.vertices[0].multiplier;
                let file = MultiplierFile {
                    eta: v.eta.clone(),
                    psi: v.psi.clone(),
                };
                fs::write(path, serde_json::to_string(&file).map_err(anyhow::Error::from)?)
                    .map_err(anyhow::Error::from)?;
            }
            let section = polytope_section(&poly)?;
            let ok = poly.all_certified();
            Ok((
                json!({
                    "config": {"structure": structure, "multipliers": multipliers},
                    "qualification": {"qualified": qual.qualified, "surjective": qual.surjective, "margin": qual.margin},
                    "first_order": section,
                }),
                ok,
            ))
        }
        Command::CheckSecondOrder {
            input,
            structure,
            multipliers,
            second,
        } => {
            let entry = load_entry(&input.problem)?;
            let p = entry.problem.as_ref();
            let traj = load_trajectory(&entry, &input.trajectory)?;
            let report = detect_structure(p, &traj, &structure.config())?;
            let poly = estimate_polytope(p, &traj, &report, multipliers.objectives, multipliers.seed)?;
            let (section, ok) = second_order_section(p, &traj, &report, &poly, second, multipliers.seed)?;
            Ok((
                json!({"config": {"structure": structure, "multipliers": multipliers, "second_order": second}, "second_order": section}),
                ok,
            ))
        }
        Command::Synthesize {
            input,
            structure,
            target,
            z0,
        } => {
            let entry = load_entry(&input.problem)?;
            let p = entry.problem.as_ref();
            let traj = load_trajectory(&entry, &input.trajectory)?;
            let report = detect_structure(p, &traj, &structure.config())?;
            let profile = if target == "zero" {
                TargetProfile::zero(traj.grid(), &report)
            } else {
                read_json(FsPath::new(target))?
            };
            let z0 = z0.clone().unwrap_or_else(|| vec![0.0; p.dims().n]);
            let r = synthesize_control(p, &traj, &report, &profile, &z0, &SynthesisOptions::default())?;
            let ok = r.residual <= 0.05 * traj.grid().dt_max() * (1.0 + r.v.sup_norm());
            Ok((
                json!({
                    "synthesis": {
                        "residual": r.residual,
                        "per_constraint": r.per_constraint,
                        "sweeps": r.sweeps,
                        "defect_iterations": r.defect_iterations,
                        "jet_mismatch": r.jet_mismatch,
                        "pinv_bound": r.pinv_bound,
                    },
                    "direction": DirectionFile { problem: entry.name.into(), v: r.v, z0, residual: r.residual },
                }),
                ok,
            ))
        }
        Command::Demo {
            name,
            grid,
            structure,
            plot,
            multipliers,
            second,
        } => demo(name, *grid, structure, plot.as_deref(), multipliers, second),
        Command::Rerun { report } => {
            let v: Value = read_json(report)?;
            let c: DemoConfig = serde_json::from_value(v["config"].clone())
                .with_context(|| format!("{} has no demo configuration", report.display()))?;
            demo(&c.problem, Some(c.cells), &c.structure, None, &c.multipliers, &c.second_order)
        }
    }
}

fn demo(
    name: &str,
    grid: Option<usize>,
    sconf: &StructureArgs,
    plot: Option<&FsPath>,
    margs: &MultiplierArgs,
    sargs: &SecondOrderArgs,
) -> Outcome {
    let entry = load_entry(name)?;
    let problem: Arc<dyn Problem> = entry.problem.clone();
    let p = problem.as_ref();
    let cells = grid.unwrap_or(entry.recommended_cells);
    let (traj, _) = solve_candidate(&entry, cells, SolveOptions::default())?;
    let report = detect_structure(p, &traj, &sconf.config())?;
    if let Some(path) = plot {
        write_plot(p, &traj, path)?;
    }
    let mut out = json!({
        "config": {"problem": entry.name, "cells": cells, "structure": sconf, "multipliers": margs, "second_order": sargs},
        "tolerances": tolerances(&traj, &report, margs, sargs),
        "reference": entry.reference,
        "cost": cost(p, &traj),
    });
    let (section, structure_passed) = structure_section(p, &traj, &report);
    out["structure"] = section;
    let qual = check_qualification(p, &traj, &report, margs.seed)?;
    out["qualification"] = json!({"qualified": qual.qualified, "surjective": qual.surjective, "margin": qual.margin});
    let poly = match estimate_polytope(p, &traj, &report, margs.objectives, margs.seed) {
        Ok(poly) => poly,
        Err(e @ Error::NoMultiplier(_)) => {
            out["first_order"] = json!({"certified": false, "diagnostic": e.to_string()});
            return Ok((out, false));
        }
        Err(e) => return Err(e.into()),
    };
    out["first_order"] = polytope_section(&poly)?;
    let certified = poly.all_certified();
    let (section, second_ok) = second_order_section(p, &traj, &report, &poly, sargs, margs.seed)?;
    out["second_order"] = section;
    Ok((out, certified && second_ok && structure_passed))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok((report, ok)) => {
            let mut report = report;
            report["passed"] = json!(ok);
            if let Err(e) = write_or_print(cli.output.as_deref(), &report) {
                eprintln!("error: {e:#}");
                return ExitCode::from(2);
            }
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(Failure::Usage(e)) => {
            eprintln!("usage error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Check(e)) => {
            let report = json!({"passed": false, "diagnostic": format!("{e:#}")});
            let _ = write_or_print(cli.output.as_deref(), &report);
            eprintln!("check failed: {e:#}");
            ExitCode::from(1)
        }
    }
}
