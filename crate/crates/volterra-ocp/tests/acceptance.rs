//! One PASS/FAIL line per acceptance criterion. Built without the libtest
//! harness so the table always prints; exits nonzero if any criterion fails.

mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use common::oracles::{least_squares_oracle, smooth_direction, trig_target, window_max_oracle};
use common::transcription;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volterra_ocp::adjoint::{duality_residual, Multiplier};
use volterra_ocp::bv::{ipp_residual, stieltjes, BVPath, Measure};
use volterra_ocp::dynamics::{cost, solve_linearized, solve_state, SolveOptions, Trajectory};
use volterra_ocp::grid::{Path, PathKind, TimeGrid};
use volterra_ocp::multipliers::{
    check_pi_injectivity, estimate_polytope, multiplier_residuals, reduced_from_eta,
    MultiplierPolytope,
};
use volterra_ocp::problem::{verify_commutation, verify_order, Problem};
use volterra_ocp::registry::{self, exp_memory_junction, EXP_MEMORY_CAP};
use volterra_ocp::second_order::{
    cone_membership, hessian_form, mu_d2_chain, necessary_verdict, sample_strict_directions, sufficient_verdict,
    touch_slope_curvature, Direction,
};
use volterra_ocp::structure::{detect_structure, StructureConfig, StructureReport};
use volterra_ocp::synthesis::{
    approximate_strict_direction, connect, connection_gram, synthesize_control, synthesized_directions, Jet,
    SynthesisOptions, TargetProfile,
};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

struct Case {
    problem: Arc<dyn Problem>,
    traj: Trajectory,
    report: StructureReport,
    poly: MultiplierPolytope,
}

fn candidate_case(name: &str, cells: usize) -> Case {
    let e = registry::load(name).unwrap();
    let g = e.grid(cells).unwrap();
    let (u, y0) = e.candidate_on(&g);
    let traj = solve_state(e.problem.as_ref(), &u, &y0, SolveOptions::default()).unwrap();
    let report = detect_structure(e.problem.as_ref(), &traj, &StructureConfig::default()).unwrap();
    let poly = estimate_polytope(e.problem.as_ref(), &traj, &report, 8, 3).unwrap();
    Case {
        problem: e.problem.clone(),
        traj,
        report,
        poly,
    }
}

/// Discrete optimum from the transcription oracle, contact read at 1e-5.
fn oracle_case(name: &str, cells: usize) -> (Case, transcription::Transcription) {
    let e = registry::load(name).unwrap();
    let g = e.grid(cells).unwrap();
    let o = transcription::solve(e.problem.as_ref(), &g);
    let traj = solve_state(e.problem.as_ref(), &o.u, &o.y0, SolveOptions::default()).unwrap();
    let cfg = StructureConfig {
        tol_active: Some(1e-5),
        ..Default::default()
    };
    let report = detect_structure(e.problem.as_ref(), &traj, &cfg).unwrap();
    let poly = estimate_polytope(e.problem.as_ref(), &traj, &report, 8, 3).unwrap();
    (
        Case {
            problem: e.problem.clone(),
            traj,
            report,
            poly,
        },
        o,
    )
}

/// Registry optima with certified multipliers: closed-form candidates where
/// they are discretely certifiable, the transcription oracle otherwise.
fn optima(cells: usize) -> Vec<(&'static str, Case)> {
    vec![
        ("lq_free", candidate_case("lq_free", cells)),
        ("exp_memory", oracle_case("exp_memory", cells).0),
        ("bryson_denham_touch", candidate_case("bryson_denham_touch", cells)),
        ("bryson_denham_arc", oracle_case("bryson_denham_arc", cells).0),
        ("degenerate_endpoint", candidate_case("degenerate_endpoint", cells)),
    ]
}

fn sup_error(traj: &Trajectory, exact: impl Fn(f64) -> f64) -> f64 {
    let g = traj.grid();
    (0..g.len()).map(|k| (traj.y.get(k, 0) - exact(g.t(k))).abs()).fold(0.0, f64::max)
}

/// Closed-form exp_memory state: 1 - e^{-t} - B sinh t before the junction,
/// the cap after it.
fn exp_memory_state(t: f64) -> f64 {
    let (t1, b) = exp_memory_junction();
    if t < t1 {
        1.0 - (-t).exp() - b * t.sinh()
    } else {
        EXP_MEMORY_CAP
    }
}

fn criterion_1() -> Verdict {
    let mut ok = true;
    let mut notes = Vec::new();
    let mut slowest = Duration::ZERO;
    let studies: [(&str, Box<dyn Fn(&TimeGrid) -> (Path, Vec<f64>)>, Box<dyn Fn(f64) -> f64>); 3] = [
        (
            "exp_memory",
            Box::new(|g| registry::load("exp_memory").unwrap().candidate_on(g)),
            Box::new(exp_memory_state),
        ),
        (
            "lq_free",
            Box::new(|g| registry::load("lq_free").unwrap().candidate_on(g)),
            Box::new(|t| 0.5 * t),
        ),
        // the lq_free candidate is linear, which the trapezoid rule integrates
        // exactly; the rate is measured on u = cos πt instead
        (
            "lq_free cos",
            Box::new(|g| (Path::scalar(g, PathKind::Control, |t| (std::f64::consts::PI * t).cos()), vec![0.0])),
            Box::new(|t| (std::f64::consts::PI * t).sin() / std::f64::consts::PI),
        ),
    ];
    for (label, cand, exact) in &studies {
        let name = label.split(' ').next().unwrap();
        let e = registry::load(name).unwrap();
        let mut errs = Vec::new();
        for cells in [200, 400, 800] {
            let g = e.grid(cells).unwrap();
            let (u, y0) = cand(&g);
            let t0 = Instant::now();
            let tr = solve_state(e.problem.as_ref(), &u, &y0, SolveOptions::default()).unwrap();
            slowest = slowest.max(t0.elapsed());
            errs.push(sup_error(&tr, exact));
        }
        ok &= errs[1] <= 1e-3;
        let ratios: Vec<f64> = errs.windows(2).map(|w| w[0] / w[1]).collect();
        if errs[0] > 1e-13 {
            ok &= ratios.iter().all(|r| (3.2..=4.8).contains(r));
        }
        notes.push(format!("{label}: err(N=400) {:.2e}, ratios {:.2?}", errs[1], ratios));
    }
    ok &= slowest <= Duration::from_secs(5);
    notes.push(format!("slowest solve {slowest:.2?}"));
    verdict(ok, notes.join("; "))
}

fn random_multiplier(problem: &dyn Problem, g: &TimeGrid, rng: &mut ChaCha8Rng) -> (Measure, Vec<f64>) {
    let d = problem.dims();
    let mut eta = Measure::zero(g, d.r);
    for i in 0..d.r {
        for _ in 0..3 {
            eta.add_atom_component(rng.gen_range(0..g.len()), i, rng.gen_range(0.0..1.0));
        }
        for j in 0..g.cells() {
            if rng.gen_bool(0.2) {
                eta.set_density_component(j, i, rng.gen_range(0.0..1.0));
            }
        }
    }
    (eta, (0..d.s()).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for name in registry::list() {
        let e = registry::load(name).unwrap();
        let p = e.problem.as_ref();
        let g = e.grid(400).unwrap();
        let (u, y0) = e.candidate_on(&g);
        let tr = solve_state(p, &u, &y0, SolveOptions::default()).unwrap();
        let (eta, psi) = random_multiplier(p, &g, &mut rng);
        let lam = Multiplier::new(p, &tr, eta, psi).unwrap();
        for s in 0..20 {
            let d = smooth_direction(&g, p.dims().m, p.dims().n, 1000 + s);
            let r = duality_residual(p, &tr, &lam, &d.v, &d.z0).unwrap();
            worst = worst.max(r / tr.scale());
        }
    }
    verdict(worst <= 1e-6, format!("max residual / scale {worst:.2e} over 20 directions per entry"))
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // integer atoms keep every product exact, so any nonzero value is a
    // formula error rather than rounding
    let mut atomic_worst = 0.0f64;
    for _ in 0..20 {
        let g = TimeGrid::uniform(1.0, 16).unwrap();
        let mut mh = Measure::zero(&g, 1);
        let mut mk = Measure::zero(&g, 1);
        for _ in 0..4 {
            mh.add_atom_component(rng.gen_range(0..g.len()), 0, rng.gen_range(-4..=4) as f64);
            mk.add_atom_component(rng.gen_range(0..g.len()), 0, rng.gen_range(-4..=4) as f64);
        }
        let h = BVPath::from_measure(&[rng.gen_range(-4..=4) as f64], mh).unwrap();
        let k = BVPath::from_measure(&[rng.gen_range(-4..=4) as f64], mk).unwrap();
        atomic_worst = atomic_worst.max(ipp_residual(&h, &k).unwrap());
    }
    let g = TimeGrid::uniform(1.0, 400).unwrap();
    let mut smooth_worst = 0.0f64;
    for s in 0..5 {
        let (a, b) = (1.0 + s as f64, 0.5 + 0.3 * s as f64);
        let mut mh = Measure::zero(&g, 1);
        let mut mk = Measure::zero(&g, 1);
        for j in 0..g.cells() {
            let t = 0.5 * (g.t(j) + g.t(j + 1));
            mh.set_density_component(j, 0, (a * t).cos());
            mk.set_density_component(j, 0, (b * t).sin() * 2.0);
        }
        let h = BVPath::from_measure(&[0.3], mh).unwrap();
        let k = BVPath::from_measure(&[-0.2], mk).unwrap();
        smooth_worst = smooth_worst.max(ipp_residual(&h, &k).unwrap());
    }
    verdict(
        atomic_worst == 0.0 && smooth_worst <= 1e-4,
        format!("atomic max {atomic_worst:e}, smooth max {smooth_worst:.2e} at N=400"),
    )
}

fn criterion_4() -> Verdict {
    let mut ok = true;
    let mut notes = Vec::new();
    // smooth controls: the finite-difference chain check needs them
    for (name, expect, u) in [
        ("exp_memory", 1usize, (|t: f64| 0.5 + 0.3 * t.sin()) as fn(f64) -> f64),
        ("bryson_denham_touch", 2, |_| -2.0),
        ("bryson_denham_arc", 2, |t| (3.0 * t).cos() - 1.0),
    ] {
        let e = registry::load(name).unwrap();
        let g = e.grid(400).unwrap();
        let (_, y0) = e.candidate_on(&g);
        let tr = solve_state(e.problem.as_ref(), &Path::scalar(&g, PathKind::Control, u), &y0, SolveOptions::default())
            .unwrap();
        let v = verify_order(e.problem.as_ref(), &tr, 64, volterra_ocp::problem::fd_tol(&tr), 1);
        let got = v.as_ref().map(|v| v[0].order).ok();
        ok &= got == Some(expect);
        notes.push(format!("{name}: q = {got:?}"));
    }
    let mut worst = 0.0f64;
    for name in ["bryson_denham_arc", "bryson_denham_touch", "exp_memory"] {
        let e = registry::load(name).unwrap();
        let cells = (e.problem.horizon() / 1e-3).round() as usize;
        let g = e.grid(cells).unwrap();
        let (u, y0) = e.candidate_on(&g);
        let p = e.problem.as_ref();
        let tr = solve_state(p, &u, &y0, SolveOptions::default()).unwrap();
        // the central difference itself errs by Δt²/6·|v''|, so the
        // directions are kept to low frequencies
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for v in [|_: f64| 1.0, |t: f64| t, |t: f64| (std::f64::consts::PI * t).sin(), |t: f64| (2.0 * t).cos() + 0.5] {
            let v = Path::scalar(&g, PathKind::Control, v);
            let z0: Vec<f64> = (0..p.dims().n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            worst = worst.max(verify_commutation(p, &tr, &v, &z0).unwrap());
        }
    }
    ok &= worst <= 1e-5;
    notes.push(format!("commutation max {worst:.2e} at Δt = 1e-3"));
    verdict(ok, notes.join("; "))
}

fn criterion_5() -> Verdict {
    let c = candidate_case("bryson_denham_touch", 400);
    let p = c.problem.as_ref();
    let g = c.traj.grid();
    let tp = c.report.constraints[0].touch_points[0].clone();
    let gbar: Vec<f64> = (0..g.len()).map(|k| p.g(c.traj.y.at(k))[0]).collect();
    let h = 1e-3;
    let mut worst = 0.0f64;
    for s in 0..5 {
        let d = smooth_direction(g, 1, 2, 50 + s);
        let z = solve_linearized(p, &c.traj, &d.v, &[0.0, 0.0]).unwrap();
        let d2 = mu_d2_chain(p, &c.traj, &tp, &d.v, &z).unwrap();
        let x: Vec<f64> = (0..g.len()).map(|k| z.get(k, 0)).collect();
        let mu = |s: f64| {
            let y: Vec<f64> = gbar.iter().zip(&x).map(|(a, b)| a + s * b).collect();
            window_max_oracle(&y, g, tp.time, 0.1)
        };
        let fd = (mu(h) - 2.0 * mu(0.0) + mu(-h)) / (h * h);
        worst = worst.max((fd - d2).abs() / d2.abs().max(1e-12));
        let (_, g2) = touch_slope_curvature(p, &c.traj, 0, tp.node, &d.v, &z).unwrap();
        worst = worst.max(if (g2 + 2.0).abs() <= 1e-6 { 0.0 } else { f64::INFINITY });
    }
    let ok = worst <= 0.05 && (tp.g2 + 2.0).abs() <= 1e-6;
    verdict(ok, format!("g2(τ) = {:.9}, worst relative mu_d2 gap {worst:.2e}", tp.g2))
}

fn criterion_6() -> Verdict {
    let (c, o) = oracle_case("bryson_denham_arc", 200);
    let p = c.problem.as_ref();
    let dt = c.traj.grid().dt_max();
    let tol = 10.0 * dt * dt * c.traj.scale();
    let lam = Multiplier::new(p, &c.traj, o.eta.clone(), o.psi.clone()).unwrap();
    let res = multiplier_residuals(p, &c.traj, &lam, tol).unwrap();
    let single = c.poly.vertices.len() == 1 && c.poly.vertices[0].multiplier.eta.sup_diff(&o.eta) < 1e-6;
    let d = candidate_case("degenerate_endpoint", 100);
    let dp = estimate_polytope(d.problem.as_ref(), &d.traj, &d.report, 10, 4).unwrap();
    let ok = res.certified && single && dp.vertices.len() >= 2 && dp.all_certified();
    verdict(
        ok,
        format!(
            "arc oracle worst residual {:.2e} (tol {tol:.2e}), {} vertex; degenerate_endpoint {} vertices, all certified {}",
            res.worst(),
            c.poly.vertices.len(),
            dp.vertices.len(),
            dp.all_certified()
        ),
    )
}

fn criterion_7() -> Verdict {
    let mut ok = true;
    let mut notes = Vec::new();
    let mut cases = optima(200);
    cases.push(("lq_saddle", candidate_case("lq_saddle", 200)));
    for (name, c) in &cases {
        let inj = check_pi_injectivity(&c.poly, 8, 1).unwrap();
        ok &= inj.passed;
        notes.push(format!("{name} {:.1e}", inj.max_eta_spread));
    }
    verdict(ok, format!("max dη spread: {}", notes.join(", ")))
}

/// J(u, y0) + Σ ∫ g dρ + Σ ν μ_τ(g) + Ψ·Φ straight from the state.
fn reduced_lagrangian(p: &dyn Problem, lam: &Multiplier, report: &StructureReport, u: &Path, y0: &[f64]) -> f64 {
    let tr = solve_state(p, u, y0, SolveOptions::default()).unwrap();
    let g = tr.grid();
    let red = reduced_from_eta(&lam.eta, report, 1e-12).unwrap();
    let mut s = cost(p, &tr);
    let mut nu = red.nu.iter();
    for c in &report.constraints {
        let gi: Vec<f64> = (0..g.len()).map(|k| p.g(tr.y.at(k))[c.index]).collect();
        let path = Path::from_fn(g, 1, PathKind::State, |k, _| vec![gi[k]]);
        s += stieltjes(&path, &red.rho, c.index).unwrap();
        for tp in &c.touch_points {
            let w = nu.next().unwrap();
            if *w != 0.0 {
                s += w * window_max_oracle(&gi, g, tp.time, report.eps);
            }
        }
    }
    let phi = p.big_phi(tr.y0(), tr.yt());
    s + lam.psi.iter().zip(phi.iter()).map(|(a, b)| a * b).sum::<f64>()
}

fn criterion_8() -> Verdict {
    let mut assembly = 0.0f64;
    let mut fd_worst = 0.0f64;
    let mut fd_ok = true;
    for (_, c) in optima(200) {
        let p = c.problem.as_ref();
        let d = p.dims();
        for s in 0..50 {
            let dir = smooth_direction(c.traj.grid(), d.m, d.n, s);
            for vx in &c.poly.vertices {
                let hf = hessian_form(p, &c.traj, &vx.multiplier, &c.report, &dir.v, &dir.z0).unwrap();
                assembly = assembly.max((hf.new - hf.old).abs() / c.traj.scale());
            }
        }
        let rel = 0.02f64.max(10.0 * c.traj.grid().dt_max());
        for s in 0..3 {
            let dir = smooth_direction(c.traj.grid(), d.m, d.n, 100 + s);
            for vx in &c.poly.vertices {
                let h = 1e-3;
                let l = |s: f64| {
                    let u = c.traj.u.axpy(s, &dir.v);
                    let y0: Vec<f64> = c.traj.y0().iter().zip(&dir.z0).map(|(a, b)| a + s * b).collect();
                    reduced_lagrangian(p, &vx.multiplier, &c.report, &u, &y0)
                };
                let fd = (l(h) - 2.0 * l(0.0) + l(-h)) / (h * h);
                let j = hessian_form(p, &c.traj, &vx.multiplier, &c.report, &dir.v, &dir.z0).unwrap().new;
                let gap = (fd - j).abs() / j.abs().max(1e-3);
                fd_worst = fd_worst.max(gap);
                fd_ok &= gap <= rel;
            }
        }
    }
    verdict(
        assembly <= 1e-8 && fd_ok,
        format!("new/old max gap / scale {assembly:.2e}; finite-difference max relative gap {fd_worst:.2e}"),
    )
}

/// Sampled strict directions plus their synthesized counterparts, 100 in all.
fn mixed_directions(c: &Case, seed: u64) -> (Vec<Direction>, usize) {
    let p = c.problem.as_ref();
    let lam = c.poly.centre(p, &c.traj).unwrap();
    let mut dirs = sample_strict_directions(p, &c.traj, &lam, &c.report, 50, seed).unwrap();
    let synth = synthesized_directions(p, &c.traj, &c.report, &dirs, 2).unwrap();
    let n = synth.len();
    dirs.extend(synth);
    let extra = 100usize.saturating_sub(dirs.len());
    dirs.extend(sample_strict_directions(p, &c.traj, &lam, &c.report, extra, seed + 1).unwrap());
    (dirs, n)
}

fn criterion_9() -> Verdict {
    let mut ok = true;
    let mut notes = Vec::new();
    for (name, c) in optima(200) {
        let (dirs, n_synth) = mixed_directions(&c, 9);
        let nec = necessary_verdict(c.problem.as_ref(), &c.traj, &c.poly, &c.report, &dirs, 1e-6).unwrap();
        let min = nec.results.iter().map(|r| r.max_value).fold(f64::INFINITY, f64::min);
        ok &= nec.holds && !nec.vacuous && dirs.len() >= 100;
        notes.push(format!("{name} min {min:.1e} ({} dirs, {n_synth} synthesized)", dirs.len()));
    }
    let c = candidate_case("lq_saddle", 200);
    let (dirs, _) = mixed_directions(&c, 9);
    let nec = necessary_verdict(c.problem.as_ref(), &c.traj, &c.poly, &c.report, &dirs, 1e-6).unwrap();
    let violated = nec.results.iter().filter(|r| !r.passed).count();
    ok &= violated >= 1;
    notes.push(format!("lq_saddle: {violated} violating directions"));
    verdict(ok, notes.join("; "))
}

fn criterion_10() -> Verdict {
    let mut ok = true;
    let mut notes = Vec::new();
    for name in ["exp_memory", "bryson_denham_arc"] {
        let cells = [200, 400, 800];
        let cases: Vec<Bare> = cells.iter().map(|&n| bare_case(name, n)).collect();
        let mut fine = Duration::ZERO;
        let mut worst_ratio = 0.0f64;
        let mut worst_c = 0.0f64;
        for seed in 0..10 {
            let mut res = Vec::new();
            for (c, &n) in cases.iter().zip(&cells) {
                let tp = TargetProfile::on_eps(c.traj.grid(), &c.report, trig_target(seed, &c.report));
                let z0 = vec![0.0; c.problem.dims().n];
                let t0 = Instant::now();
                let r = synthesize_control(c.problem.as_ref(), &c.traj, &c.report, &tp, &z0, &SynthesisOptions::default())
                    .unwrap();
                if n == 800 {
                    fine += t0.elapsed();
                }
                worst_c = worst_c.max(r.residual / c.traj.grid().dt_max());
                res.push(r.residual);
            }
            for w in res.windows(2) {
                worst_ratio = worst_ratio.max(w[1] / w[0]);
            }
        }
        ok &= worst_c <= 0.05 && worst_ratio <= 0.65 && fine <= Duration::from_secs(30);
        notes.push(format!(
            "{name}: max residual/Δt {worst_c:.2e}, max refinement ratio {worst_ratio:.2}, N=800 time {fine:.2?}"
        ));
    }
    verdict(ok, notes.join("; "))
}

/// Candidate trajectory with structure only; synthesis needs no multiplier.
struct Bare {
    problem: Arc<dyn Problem>,
    traj: Trajectory,
    report: StructureReport,
}

fn bare_case(name: &str, cells: usize) -> Bare {
    let e = registry::load(name).unwrap();
    let g = e.grid(cells).unwrap();
    let (u, y0) = e.candidate_on(&g);
    let traj = solve_state(e.problem.as_ref(), &u, &y0, SolveOptions::default()).unwrap();
    let report = detect_structure(e.problem.as_ref(), &traj, &StructureConfig::default()).unwrap();
    Bare {
        problem: e.problem.clone(),
        traj,
        report,
    }
}

fn criterion_11() -> Verdict {
    let mut ok = true;
    let mut notes = Vec::new();
    for name in registry::NAMES {
        let e = registry::load(name).unwrap();
        let g = e.grid(200).unwrap();
        let oracle = matches!(name, "exp_memory" | "bryson_denham_arc");
        let (u, y0) = if oracle {
            let o = transcription::solve(e.problem.as_ref(), &g);
            (o.u, o.y0)
        } else {
            e.candidate_on(&g)
        };
        let p = e.problem.as_ref();
        let traj = solve_state(p, &u, &y0, SolveOptions::default()).unwrap();
        let cfg = StructureConfig {
            tol_active: oracle.then_some(1e-5),
            eps: Some(0.04),
            eps0: Some(0.12),
            ..Default::default()
        };
        let report = detect_structure(p, &traj, &cfg).unwrap();
        let poly = estimate_polytope(p, &traj, &report, 8, 3).unwrap();
        let lam = poly.centre(p, &traj).unwrap();
        let dirs = sample_strict_directions(p, &traj, &lam, &report, 5, 7).unwrap();
        let mut good = dirs.len() == 5;
        for d in &dirs {
            let l = approximate_strict_direction(p, &traj, &report, &d.v, &d.z0, &[0, 1, 2, 3]).unwrap();
            good &= l.improving && l.steps.len() == 4;
            for s in &l.steps {
                let m = cone_membership(p, &traj, &lam, &report, &s.v, &d.z0, l.tol).unwrap();
                good &= s.radial && m.radial;
            }
        }
        ok &= good;
        notes.push(format!("{name} {}", if good { "ok" } else { "FAIL" }));
    }
    verdict(ok, format!("5 directions, 4 rungs each: {}", notes.join(", ")))
}

fn criterion_12() -> Verdict {
    let c = candidate_case("lq_free", 200);
    let v = sufficient_verdict(c.problem.as_ref(), &c.traj, &c.poly, &c.report, 50, 1e-2, 4).unwrap();
    let beta = v.growth.beta.unwrap_or(f64::NAN);
    let ok = v.alpha >= 0.99 && v.legendre_clebsch && v.positivity && v.growth.accepted == 50 && beta > 0.0;
    verdict(
        ok,
        format!(
            "ᾱ = {:.4}, positivity {}, β = {beta:.3e} over {} perturbations",
            v.alpha, v.positivity, v.growth.accepted
        ),
    )
}

fn criterion_13() -> Verdict {
    let g = connection_gram(2, 1.0);
    let expect = [[1.0 / 3.0, 0.5], [0.5, 1.0]];
    let mut gram = 0.0f64;
    for r in 0..2 {
        for c in 0..2 {
            gram = gram.max((g[(r, c)] - expect[r][c]).abs());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (mut jet, mut norm) = (0.0f64, 0.0f64);
    for q in 1..=4 {
        for _ in 0..5 {
            let t1 = rng.gen_range(-1.0..1.0);
            let t2 = t1 + rng.gen_range(0.2..2.0);
            let left = Jet::new(t1, (0..q).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let right = Jet::new(t2, (0..q).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let c = connect(q, &left, &right).unwrap();
            for j in 0..q {
                jet = jet.max((c.eval(t1, j) - left.derivs[j]).abs());
                jet = jet.max((c.eval(t2, j) - right.derivs[j]).abs());
            }
            let (s, u) = least_squares_oracle(q, &left, &right, 12);
            for (sk, uk) in s.iter().zip(&u) {
                norm = norm.max((c.correction(*sk) - uk).abs() / (1.0 + uk.abs()));
            }
        }
    }
    verdict(
        gram <= 1e-12 && jet <= 1e-10 && norm <= 1e-8,
        format!("Gram {gram:.1e}, jets {jet:.1e}, vs least squares {norm:.1e}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 13] = [
        ("solver accuracy", criterion_1),
        ("adjoint duality", criterion_2),
        ("integration by parts", criterion_3),
        ("order calculus", criterion_4),
        ("touch-point reduction", criterion_5),
        ("multiplier certification", criterion_6),
        ("π-injectivity", criterion_7),
        ("Hessian form", criterion_8),
        ("second-order necessary", criterion_9),
        ("synthesis", criterion_10),
        ("density ladder", criterion_11),
        ("sufficient conditions", criterion_12),
        ("connection algebra", criterion_13),
    ];
    let mut failed = Vec::new();
    for (i, (label, f)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let v = f();
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {tag} {label} ({:.1?}): {}", i + 1, t0.elapsed(), v.detail);
        if !v.pass {
            failed.push(i + 1);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
