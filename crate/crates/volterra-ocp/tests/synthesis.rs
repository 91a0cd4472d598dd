mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use common::oracles::{least_squares_oracle, trig_target};
use common::{toy, transcription};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use volterra_ocp::dynamics::{solve_linearized, solve_state, SolveOptions, Trajectory};
use volterra_ocp::grid::{Path, PathKind, TimeGrid};
use volterra_ocp::multipliers::estimate_polytope;
use volterra_ocp::problem::Problem;
use volterra_ocp::registry;
use volterra_ocp::second_order::{cone_membership, sample_strict_directions};
use volterra_ocp::structure::{detect_structure, NodeRange, StructureConfig, StructureReport, Window};
use volterra_ocp::synthesis::{
    approximate_strict_direction, connect, connection_gram, sobolev_distance, strict_tol, synthesize_control, track,
    truncate, vanish_extension, ConstraintTarget, Jet, SynthesisOptions, TargetProfile, TrackOptions,
};
use volterra_ocp::Error;

struct Case {
    problem: Arc<dyn Problem>,
    traj: Trajectory,
    report: StructureReport,
}

fn case(name: &str, cells: usize, cfg: &StructureConfig) -> Case {
    let e = registry::load(name).unwrap();
    let g = e.grid(cells).unwrap();
    let (u, y0) = e.candidate_on(&g);
    let traj = solve_state(e.problem.as_ref(), &u, &y0, SolveOptions::default()).unwrap();
    let report = detect_structure(e.problem.as_ref(), &traj, cfg).unwrap();
    Case {
        problem: e.problem.clone(),
        traj,
        report,
    }
}

fn zeros(case: &Case) -> Vec<f64> {
    vec![0.0; case.problem.dims().n]
}

#[test]
fn truncate_examples() {
    let g = TimeGrid::uniform(1.0, 100).unwrap();
    let bounded = Path::scalar(&g, PathKind::Control, |t| (3.0 * t).sin());
    assert_eq!(truncate(&bounded, 1.0).raw(), bounded.raw());

    let h = g.h(0);
    let spiky = Path::scalar(&g, PathKind::Control, |t| 1.0 / t.max(h / 4.0).sqrt());
    let cut = truncate(&spiky, 2.0);
    for k in 0..g.len() {
        let expect = if g.t(k) < 0.25 { 2.0 } else { spiky.get(k, 0) };
        assert!((cut.get(k, 0) - expect).abs() < 1e-12, "t = {}", g.t(k));
    }
    assert_eq!(truncate(&spiky, 0.0).sup_norm(), 0.0);

    // radial, not componentwise
    let v = Path::from_fn(&g, 2, PathKind::Control, |_, _| vec![3.0, 4.0]);
    let c = truncate(&v, 1.0);
    assert!((c.get(7, 0) - 0.6).abs() < 1e-15 && (c.get(7, 1) - 0.8).abs() < 1e-15);

    // converges in the 2-norm as the bound grows
    let dists: Vec<f64> = [2.0, 4.0, 8.0, 16.0]
        .iter()
        .map(|&k| truncate(&spiky, k).axpy(-1.0, &spiky).l2_norm())
        .collect();
    assert!(dists.windows(2).all(|w| w[1] < w[0]), "{dists:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn truncation_keeps_the_kernel(seed in 0u64..10_000, k in 0.0f64..3.0) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(2, 4, |_, _| rng.gen_range(-1.0..1.0));
        let proj = DMatrix::identity(4, 4) - m.clone().pseudo_inverse(1e-12).unwrap() * &m;
        let g = TimeGrid::uniform(1.0, 20).unwrap();
        let w = Path::from_fn(&g, 4, PathKind::Control, |_, _| {
            let x = DVector::from_fn(4, |_, _| rng.gen_range(-5.0..5.0));
            (&proj * x).iter().copied().collect()
        });
        let t = truncate(&w, k);
        for j in 0..g.len() {
            let mw = &m * DVector::from_column_slice(t.at(j));
            prop_assert!(mw.amax() < 1e-12, "{}", mw.amax());
            prop_assert!(t.pointwise_norm(j) <= k + 1e-12);
        }
    }
}

#[test]
fn linear_connection_for_order_one() {
    let c = connect(1, &Jet::new(0.0, vec![0.0]), &Jet::new(1.0, vec![1.0])).unwrap();
    for t in [0.0, 0.25, 0.7, 1.0] {
        assert!((c.eval(t, 0) - t).abs() < 1e-14);
        assert!((c.eval(t, 1) - 1.0).abs() < 1e-14);
    }
}

#[test]
fn order_two_gram() {
    let g = connection_gram(2, 1.0);
    let expect = [[1.0 / 3.0, 0.5], [0.5, 1.0]];
    for r in 0..2 {
        for c in 0..2 {
            assert!((g[(r, c)] - expect[r][c]).abs() < 1e-12);
        }
    }
    assert!((g.determinant() - 1.0 / 12.0).abs() < 1e-12);
}

#[test]
fn identical_zero_jets_give_zero() {
    let c = connect(3, &Jet::zero(0.2, 3), &Jet::zero(0.9, 3)).unwrap();
    for t in [0.2, 0.4, 0.9] {
        for j in 0..=3 {
            assert_eq!(c.eval(t, j), 0.0);
        }
    }
}

#[test]
fn connection_errors() {
    let a = Jet::zero(0.0, 7);
    let b = Jet::zero(1.0, 7);
    assert!(matches!(connect(7, &a, &b), Err(Error::IllConditioned(_))));
    assert!(matches!(connect(0, &Jet::zero(0.0, 0), &Jet::zero(1.0, 0)), Err(Error::InvalidArgument(_))));
    assert!(matches!(connect(2, &Jet::zero(1.0, 2), &Jet::zero(1.0, 2)), Err(Error::InvalidArgument(_))));
    assert!(matches!(connect(2, &Jet::zero(0.0, 3), &Jet::zero(1.0, 2)), Err(Error::InvalidArgument(_))));
}

#[test]
fn connection_is_the_minimum_norm_correction() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for q in 1..=4 {
        for _ in 0..5 {
            let t1 = rng.gen_range(-1.0..1.0);
            let t2 = t1 + rng.gen_range(0.2..2.0);
            let left = Jet::new(t1, (0..q).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let right = Jet::new(t2, (0..q).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let c = connect(q, &left, &right).unwrap();
            for j in 0..q {
                assert!((c.eval(t1, j) - left.derivs[j]).abs() < 1e-10, "q={q} j={j} left");
                assert!((c.eval(t2, j) - right.derivs[j]).abs() < 1e-10, "q={q} j={j} right");
            }
            let (s, u) = least_squares_oracle(q, &left, &right, 12);
            for (sk, uk) in s.iter().zip(&u) {
                assert!((c.correction(*sk) - uk).abs() < 1e-8 * (1.0 + uk.abs()), "q={q}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn connection_matches_both_jets(
        q in 1usize..=6,
        t1 in -1.0f64..1.0,
        len in 0.1f64..3.0,
        l in proptest::collection::vec(-3.0f64..3.0, 6),
        r in proptest::collection::vec(-3.0f64..3.0, 6),
    ) {
        let left = Jet::new(t1, l[..q].to_vec());
        let right = Jet::new(t1 + len, r[..q].to_vec());
        let c = connect(q, &left, &right).unwrap();
        // rounding in ∫ a_j u is bounded by ‖u‖ ‖a_j‖ times a few ulps
        let unorm = c.coef.iter().map(|x| x * x).sum::<f64>().sqrt();
        let gram = c.gram();
        for j in 0..q {
            let tol = 1e-10 + 1e-14 * unorm * gram[(j, j)].sqrt();
            prop_assert!((c.eval(left.t, j) - left.derivs[j]).abs() < 1e-10);
            prop_assert!((c.eval(right.t, j) - right.derivs[j]).abs() < tol);
        }
    }
}

fn point_contact(g: &TimeGrid, k: usize) -> Vec<NodeRange> {
    vec![NodeRange {
        start: k,
        end: k,
        t_start: g.t(k),
        t_end: g.t(k),
    }]
}

#[test]
fn vanish_extension_examples() {
    let g = TimeGrid::uniform(1.0, 400).unwrap();
    let contact = point_contact(&g, 0);

    let zero = Path::zeros(&g, 3, PathKind::State);
    assert_eq!(vanish_extension(&zero, &contact, 0.05, 1e-12).unwrap().sup_norm(), 0.0);

    let sq = Path::from_fn(&g, 3, PathKind::State, |_, t| vec![t * t, 2.0 * t, 2.0]);
    let delta = 0.05;
    let out = vanish_extension(&sq, &contact, delta, 1e-12).unwrap();
    for k in 0..g.len() {
        let t = g.t(k);
        if t <= delta {
            assert!(out.at(k).iter().all(|x| *x == 0.0), "t = {t}");
        } else if t >= 2.0 * delta {
            assert_eq!(out.at(k), sq.at(k));
        }
    }
    // the blend is a W^{2,∞} connection: values and slopes stay continuous
    for k in 1..g.len() {
        let h = g.h(k - 1);
        assert!((out.get(k, 0) - out.get(k - 1, 0)).abs() < 2.0 * h * (1.0 + out.get(k, 1).abs()));
        assert!((out.get(k, 1) - out.get(k - 1, 1)).abs() < 20.0 * h * (1.0 + out.get(k, 2).abs()));
    }

    let line = Path::from_fn(&g, 3, PathKind::State, |_, t| vec![t, 1.0, 0.0]);
    assert!(matches!(vanish_extension(&line, &contact, delta, 1e-9), Err(Error::InvalidArgument(_))));
}

#[test]
fn vanish_extension_converges() {
    let g = TimeGrid::uniform(1.0, 1600).unwrap();
    let contact = vec![NodeRange {
        start: 480,
        end: 800,
        t_start: g.t(480),
        t_end: g.t(800),
    }];
    let (a, b) = (g.t(480), g.t(800));
    // vanishes to second order at both ends of the contact interval
    let x = Path::from_fn(&g, 3, PathKind::State, |_, t| {
        let d = if t < a { t - a } else if t > b { t - b } else { 0.0 };
        vec![-d * d, -2.0 * d, if d == 0.0 { 0.0 } else { -2.0 }]
    });
    let eps = 0.2;
    let errs: Vec<f64> = [eps / 2.0, eps / 4.0, eps / 8.0]
        .iter()
        .map(|&delta| sobolev_distance(&vanish_extension(&x, &contact, delta, 1e-12).unwrap(), &x))
        .collect();
    assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
}

#[test]
fn tracking_an_integrator_returns_h() {
    let p = toy::integrator().with_cap(10.0);
    let g = TimeGrid::uniform(1.0, 50).unwrap();
    let u = Path::scalar(&g, PathKind::Control, |t| t.cos());
    let traj = solve_state(&p, &u, &[0.0], SolveOptions::default()).unwrap();
    let window = Window {
        start: 20,
        end: 35,
        t_start: g.t(20),
        t_end: g.t(35),
        active: vec![0],
    };
    let h: Vec<f64> = (20..=35).map(|k| (g.t(k) * 5.0).sin()).collect();
    let prefix = Path::scalar(&g, PathKind::Control, |t| 0.3 - t);
    let r = track(&p, &traj, &window, &[0], &[h.clone()], None, &prefix, &[0.4], TrackOptions::default()).unwrap();
    for k in 0..g.len() {
        if (20..=35).contains(&k) {
            assert!((r.v.get(k, 0) - h[k - 20]).abs() < 1e-12);
        } else {
            assert_eq!(r.v.get(k, 0), prefix.get(k, 0));
        }
    }
    // the state before the window is that of the prefix
    let z_prefix = solve_linearized(&p, &traj, &prefix, &[0.4]).unwrap();
    for k in 0..20 {
        assert_eq!(r.z.get(k, 0), z_prefix.get(k, 0));
    }

    let zero = Path::zeros(&g, 1, PathKind::Control);
    let r = track(&p, &traj, &window, &[0], &[vec![0.0; 16]], None, &zero, &[0.0], TrackOptions::default()).unwrap();
    assert_eq!(r.v.sup_norm(), 0.0);
}

#[test]
fn tracking_the_double_integrator_returns_h() {
    let c = case("bryson_denham_arc", 200, &StructureConfig::default());
    let w = c.report.windows.iter().find(|w| !w.active.is_empty()).unwrap().clone();
    let len = w.end - w.start + 1;
    let h: Vec<f64> = (0..len).map(|i| (i as f64 * 0.1).cos()).collect();
    let prefix = Path::zeros(c.traj.grid(), 1, PathKind::Control);
    let r = track(c.problem.as_ref(), &c.traj, &w, &[0], &[h.clone()], None, &prefix, &[0.0, 0.0], TrackOptions::default())
        .unwrap();
    for i in 0..len {
        assert!((r.v.get(w.start + i, 0) - h[i]).abs() < 1e-12);
    }
    assert!(r.pinv_norm * c.report.a3_gamma.unwrap().powi(2) <= 1.0 + 1e-9);
}

#[test]
fn pseudo_inverse_bound_on_a_memory_kernel() {
    let c = case("exp_memory", 200, &StructureConfig::default());
    let gamma = c.report.a3_gamma.unwrap();
    for w in c.report.windows.iter().filter(|w| !w.active.is_empty()) {
        let len = w.end - w.start + 1;
        let prefix = Path::zeros(c.traj.grid(), c.problem.dims().m, PathKind::Control);
        let h = vec![vec![0.1; len]; w.active.len()];
        let r = track(c.problem.as_ref(), &c.traj, w, &w.active, &h, None, &prefix, &zeros(&c), TrackOptions::default())
            .unwrap();
        assert!(r.pinv_norm * gamma * gamma <= 1.0 + 1e-9, "{}", r.pinv_norm * gamma * gamma);
        assert!(r.residual <= 1e-9);
    }
}

#[test]
fn zero_target_is_met() {
    for name in ["exp_memory", "bryson_denham_arc", "bryson_denham_touch"] {
        let c = case(name, 200, &StructureConfig::default());
        let tp = TargetProfile::zero(c.traj.grid(), &c.report);
        let r = synthesize_control(c.problem.as_ref(), &c.traj, &c.report, &tp, &zeros(&c), &SynthesisOptions::default())
            .unwrap();
        assert!(r.residual <= 1e-12, "{name}: {}", r.residual);
        assert!(r.pinv_bound <= 1.0 + 1e-9);
    }
}

#[test]
fn bryson_denham_arc_extension_is_flat() {
    let c = case("bryson_denham_arc", 800, &StructureConfig::default());
    let tp = TargetProfile::zero(c.traj.grid(), &c.report);
    let r = synthesize_control(c.problem.as_ref(), &c.traj, &c.report, &tp, &[0.0, 0.0], &SynthesisOptions::default())
        .unwrap();
    let eps = &c.report.constraints[0].eps_nodes;
    assert!(!eps.is_empty());
    let worst = eps.iter().map(|&k| r.z.get(k, 0).abs()).fold(0.0, f64::max);
    assert!(worst <= 5e-3, "{worst}");
}

/// Self-residual under refinement for 10 trigonometric targets; returns
/// the N = 800 wall time.
fn refinement_study(name: &str) -> Duration {
    let cells = [200, 400, 800];
    let cases: Vec<Case> = cells.iter().map(|&n| case(name, n, &StructureConfig::default())).collect();
    let mut fine_time = Duration::ZERO;
    for seed in 0..10 {
        let mut res = Vec::new();
        for (c, &n) in cases.iter().zip(&cells) {
            let tp = TargetProfile::on_eps(c.traj.grid(), &c.report, trig_target(seed, &c.report));
            let t0 = Instant::now();
            let r = synthesize_control(c.problem.as_ref(), &c.traj, &c.report, &tp, &zeros(c), &SynthesisOptions::default())
                .unwrap();
            if n == 800 {
                fine_time += t0.elapsed();
            }
            let dt = c.traj.grid().dt_max();
            assert!(r.residual <= 0.05 * dt, "{name} seed {seed} N={n}: {:.3e} > 0.05 Δt", r.residual);
            assert!(r.jet_mismatch <= 1e-9, "{name}: jets {:.3e}", r.jet_mismatch);
            res.push(r.residual);
        }
        for w in res.windows(2) {
            assert!(w[1] <= 0.65 * w[0], "{name} seed {seed}: {res:?}");
        }
    }
    fine_time
}

#[test]
fn trig_targets_converge_on_exp_memory() {
    let t = refinement_study("exp_memory");
    assert!(t <= Duration::from_secs(30), "{t:?}");
}

#[test]
fn trig_targets_converge_on_bryson_denham_arc() {
    let t = refinement_study("bryson_denham_arc");
    assert!(t <= Duration::from_secs(30), "{t:?}");
}

#[test]
fn synthesis_keeps_the_prefix() {
    let c = case("exp_memory", 200, &StructureConfig::default());
    let tp = TargetProfile::on_eps(c.traj.grid(), &c.report, trig_target(3, &c.report));
    let z0 = vec![0.25; c.problem.dims().n];
    let r = synthesize_control(c.problem.as_ref(), &c.traj, &c.report, &tp, &z0, &SynthesisOptions::default()).unwrap();
    let first = c.report.windows.iter().find(|w| !w.active.is_empty()).unwrap().start;
    let zero = Path::zeros(c.traj.grid(), c.problem.dims().m, PathKind::Control);
    let z_free = solve_linearized(c.problem.as_ref(), &c.traj, &zero, &z0).unwrap();
    for k in 0..first {
        assert_eq!(r.v.at(k), zero.at(k));
        assert_eq!(r.z.at(k), z_free.at(k));
    }
}

#[test]
fn invalid_targets() {
    let c = case("bryson_denham_arc", 200, &StructureConfig::default());
    let g = c.traj.grid();
    let opts = SynthesisOptions::default();

    let mut tp = TargetProfile::zero(g, &c.report);
    tp.targets[0].nodes = vec![0, 1, 2];
    let r = synthesize_control(c.problem.as_ref(), &c.traj, &c.report, &tp, &[0.0, 0.0], &opts);
    assert!(matches!(r, Err(Error::InvalidTarget(_))), "{r:?}");

    let mut tp = TargetProfile::zero(g, &c.report);
    tp.targets[0].samples = Path::zeros(g, 2, PathKind::State);
    tp.targets[0].order = 1;
    let r = synthesize_control(c.problem.as_ref(), &c.traj, &c.report, &tp, &[0.0, 0.0], &opts);
    assert!(matches!(r, Err(Error::InvalidTarget(_))), "{r:?}");

    // derivative samples that do not belong to the values
    let tp = TargetProfile::on_eps(g, &c.report, |_, t| vec![t.sin(), 5.0, 0.0]);
    let r = synthesize_control(c.problem.as_ref(), &c.traj, &c.report, &tp, &[0.0, 0.0], &opts);
    assert!(matches!(r, Err(Error::InvalidTarget(_))), "{r:?}");

    // prescribing at the entry of the ε₀-neighbourhood leaves no gap
    let cst = &c.report.constraints[0];
    let tp = TargetProfile {
        targets: vec![ConstraintTarget {
            constraint: 0,
            order: 2,
            samples: Path::from_fn(g, 3, PathKind::State, |_, _| vec![1.0, 0.0, 0.0]),
            nodes: cst.eps0_nodes.clone(),
            base_outside: false,
        }],
    };
    let r = synthesize_control(c.problem.as_ref(), &c.traj, &c.report, &tp, &[0.0, 0.0], &opts);
    assert!(matches!(r, Err(Error::InvalidTarget(_))), "{r:?}");
}

/// Strict directions and their density ladders on a registry entry; the
/// neighbourhoods are widened so that the connection gaps are not a handful
/// of nodes.
fn ladder_case(name: &str) -> (Case, Vec<volterra_ocp::second_order::Direction>, volterra_ocp::adjoint::Multiplier) {
    let e = registry::load(name).unwrap();
    let g = e.grid(200).unwrap();
    let oracle = matches!(name, "exp_memory" | "bryson_denham_arc");
    let (u, y0) = if oracle {
        let o = transcription::solve(e.problem.as_ref(), &g);
        (o.u, o.y0)
    } else {
        e.candidate_on(&g)
    };
    let traj = solve_state(e.problem.as_ref(), &u, &y0, SolveOptions::default()).unwrap();
    let cfg = StructureConfig {
        tol_active: oracle.then_some(1e-5),
        eps: Some(0.04),
        eps0: Some(0.12),
        ..Default::default()
    };
    let report = detect_structure(e.problem.as_ref(), &traj, &cfg).unwrap();
    let poly = estimate_polytope(e.problem.as_ref(), &traj, &report, 8, 3).unwrap();
    let lam = poly.centre(e.problem.as_ref(), &traj).unwrap();
    let dirs = sample_strict_directions(e.problem.as_ref(), &traj, &lam, &report, 5, 7).unwrap();
    (
        Case {
            problem: e.problem.clone(),
            traj,
            report,
        },
        dirs,
        lam,
    )
}

#[test]
fn density_ladders_improve_and_stay_radial() {
    for name in registry::NAMES {
        let (c, dirs, lam) = ladder_case(name);
        assert_eq!(dirs.len(), 5);
        for d in &dirs {
            let l = approximate_strict_direction(c.problem.as_ref(), &c.traj, &c.report, &d.v, &d.z0, &[0, 1, 2, 3])
                .unwrap();
            let dist: Vec<f64> = l.steps.iter().map(|s| s.distance).collect();
            assert!(l.improving, "{name}: {dist:?}");
            for s in &l.steps {
                assert!(s.radial, "{name} level {}: collar {:.3e}", s.level, s.collar_max);
                let m = cone_membership(c.problem.as_ref(), &c.traj, &lam, &c.report, &s.v, &d.z0, l.tol).unwrap();
                assert!(m.radial, "{name} level {}: {:?}", s.level, m.violations);
            }
        }
    }
}

#[test]
fn ladder_on_an_unconstrained_problem_reaches_the_direction() {
    let c = case("lq_free", 200, &StructureConfig::default());
    let g = c.traj.grid();
    let h = g.h(0);
    let spiky = Path::scalar(g, PathKind::Control, |t| 1.0 / (t - 0.5).abs().max(h / 2.0).powf(0.4));
    let l = approximate_strict_direction(c.problem.as_ref(), &c.traj, &c.report, &spiky, &zeros(&c), &[0, 1, 2, 8]).unwrap();
    assert!(l.steps[0].truncation_active && !l.steps[3].truncation_active);
    assert!(l.improving);
    assert_eq!(l.steps[3].distance, 0.0);
    assert_eq!(l.steps[3].v.raw(), spiky.raw());
}

#[test]
fn non_strict_direction_is_refused() {
    let c = case("bryson_denham_arc", 200, &StructureConfig::default());
    let v = Path::scalar(c.traj.grid(), PathKind::Control, |_| 1.0);
    let r = approximate_strict_direction(c.problem.as_ref(), &c.traj, &c.report, &v, &[0.0, 0.0], &[0]);
    assert!(matches!(r, Err(Error::InvalidArgument(_))), "{r:?}");
    assert!(strict_tol(&c.traj) > 0.0);
}
