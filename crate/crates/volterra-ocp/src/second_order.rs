//! Second-order analysis: the touch-point reduction μ_τ, the quadratic form
//! J[λ] in its two assemblies, critical-cone membership and the necessary,
//! sufficient and no-gap verdicts.
//!
//! J carries no ½ factors: it is the second derivative of the reduced
//! Lagrangian along (v, z0), so J(αv, αz0) = α² J(v, z0).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjoint::{endpoint_lagrangian_hess, hamiltonian_hessians, Multiplier};
use crate::bv::stieltjes;
use crate::dynamics::{cost, solve_linearized, solve_state, SolveOptions, Trajectory};
use crate::error::{Error, Result};
use crate::grid::{Path, PathKind, TimeGrid};
use crate::multipliers::{reduced_from_eta, MultiplierPolytope};
use crate::problem::{dot, Problem};
use crate::structure::{StructureReport, TouchPoint};

/// μ_τ(x) = max of x over [τ - ε, τ + ε] ∩ [0, T]. An interior grid maximum
/// is refined by the parabola through its neighbours, which makes the value
/// exact for quadratics.
pub fn mu_eval(x: &Path, comp: usize, tau: f64, eps: f64) -> f64 {
    let g = x.grid();
    let nodes: Vec<usize> = (0..g.len())
        .filter(|&k| (g.t(k) - tau).abs() <= eps + 1e-12 * (1.0 + tau.abs()))
        .collect();
    let Some(&best) = nodes.iter().max_by(|&&a, &&b| x.get(a, comp).total_cmp(&x.get(b, comp))) else {
        return x.eval(tau)[comp];
    };
    let top = x.get(best, comp);
    if best == nodes[0] || best == *nodes.last().unwrap() {
        return top;
    }
    let (hl, hr) = (g.h(best - 1), g.h(best));
    let (a, c) = (x.get(best - 1, comp), x.get(best + 1, comp));
    // parabola through (-hl, a), (0, top), (hr, c)
    let d1 = (c - top) / hr;
    let d0 = (top - a) / hl;
    let curv = 2.0 * (d1 - d0) / (hl + hr);
    if curv >= 0.0 {
        return top;
    }
    let slope = d0 + 0.5 * curv * hl;
    let s = (-slope / curv).clamp(-hl, hr);
    top + slope * s + 0.5 * curv * s * s
}

/// Dμ_τ(x̄) x = x_τ.
pub fn mu_d1(x: &Path, comp: usize, tau: f64) -> f64 {
    x.eval(tau)[comp]
}

fn central_slope(x: &Path, k: usize) -> f64 {
    let g = x.grid();
    let n = g.cells();
    let (a, b) = (k.saturating_sub(1), (k + 1).min(n));
    (x.get(b, 0) - x.get(a, 0)) / (g.t(b) - g.t(a))
}

fn central_curvature(x: &Path, k: usize) -> Result<f64> {
    let g = x.grid();
    if k == 0 || k == g.cells() {
        return Err(Error::NotApplicable("curvature at the end of the horizon".into()));
    }
    let (hl, hr) = (g.h(k - 1), g.h(k));
    let d1 = (x.get(k + 1, 0) - x.get(k, 0)) / hr;
    let d0 = (x.get(k, 0) - x.get(k - 1, 0)) / hl;
    Ok(2.0 * (d1 - d0) / (hl + hr))
}

/// D²μ_τ(x̄)(x)² = -(ẋ_τ)² / ẍ̄_τ from scalar grid paths, with central
/// differences at the node nearest τ.
pub fn mu_d2(xbar: &Path, x: &Path, tau: f64) -> Result<f64> {
    let k = xbar.grid().nearest(tau);
    let curv = central_curvature(xbar, k)?;
    if !(curv < 0.0) {
        return Err(Error::NotApplicable(format!(
            "curvature {curv:.3e} at t = {tau} is not negative; the touch point is not reducible"
        )));
    }
    let s = central_slope(x, k);
    Ok(-s * s / curv)
}

/// Slope D̂g_i^(1)(z_τ, v, z) and curvature g_i^(2) at a touch node, from the
/// derivative chain.
pub fn touch_slope_curvature(problem: &dyn Problem, traj: &Trajectory, i: usize, k: usize, v: &Path, z: &Path) -> Result<(f64, f64)> {
    let chain = problem
        .chain()
        .constraints
        .get(i)
        .filter(|c| c.levels.len() > 2)
        .ok_or_else(|| Error::IncompleteProblem(format!("constraint {i} needs g^(1) and g^(2) in its chain")))?;
    Ok((chain.levels[1].hat(traj, k, v, z), chain.levels[2].along(traj, k)))
}

/// D²μ_τ(g_i(ȳ))(g_i'(ȳ)z)² through the chain: -(D̂g^(1))² / g^(2).
pub fn mu_d2_chain(problem: &dyn Problem, traj: &Trajectory, tp: &TouchPoint, v: &Path, z: &Path) -> Result<f64> {
    if !tp.reducible {
        return Err(Error::NotApplicable(format!("touch point at t = {} is not reducible", tp.time)));
    }
    let (s, g2) = touch_slope_curvature(problem, traj, tp.constraint, tp.node, v, z)?;
    if !(g2 < 0.0) {
        return Err(Error::NotApplicable(format!("g^(2) = {g2:.3e} at t = {}", tp.time)));
    }
    Ok(-s * s / g2)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TouchContribution {
    pub constraint: usize,
    pub time: f64,
    pub atom: f64,
    pub slope: f64,
    pub curvature: f64,
    /// -[η] (D̂g^(1))² / g^(2)
    pub correction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HessianForm {
    /// Reduced assembly: ∫ g'' dρ plus ν (g'' + D²μ) per touch point.
    pub new: f64,
    /// Full assembly: ∫ g'' dη minus the explicit touch corrections.
    pub old: f64,
    pub touch: Vec<TouchContribution>,
}

impl HessianForm {
    pub fn value(&self) -> f64 {
        self.new
    }
}

fn g_second_path(problem: &dyn Problem, traj: &Trajectory, i: usize, z: &Path) -> Path {
    Path::from_fn(traj.grid(), 1, PathKind::State, |k, _| {
        let h = &problem.g_hess(traj.y.at(k))[i];
        let zk = DVector::from_column_slice(z.at(k));
        vec![zk.dot(&(h * &zk))]
    })
}

/// Terms of J that do not involve the running constraints.
fn smooth_part(problem: &dyn Problem, traj: &Trajectory, lam: &Multiplier, v: &Path, z: &Path) -> f64 {
    let g = traj.grid();
    let w = g.weights();
    let hh = hamiltonian_hessians(problem, traj, &lam.adjoint);
    let mut s = 0.0;
    for j in 0..g.len() {
        let xi = DVector::from_vec([v.at(j), z.at(j)].concat());
        s += w[j] * xi.dot(&(&hh[j] * &xi));
    }
    let e = endpoint_lagrangian_hess(problem, traj.y0(), traj.yt(), &lam.psi);
    let zz = DVector::from_vec([z.at(0), z.at(g.cells())].concat());
    s + zz.dot(&(&e * &zz))
}

/// J[λ](v, z0) in both assemblies.
pub fn hessian_form(
    problem: &dyn Problem,
    traj: &Trajectory,
    lam: &Multiplier,
    report: &StructureReport,
    v: &Path,
    z0: &[f64],
) -> Result<HessianForm> {
    let z = solve_linearized(problem, traj, v, z0)?;
    hessian_form_with(problem, traj, lam, report, v, &z)
}

/// As [`hessian_form`] with z = z[v, z0] already computed.
pub fn hessian_form_with(
    problem: &dyn Problem,
    traj: &Trajectory,
    lam: &Multiplier,
    report: &StructureReport,
    v: &Path,
    z: &Path,
) -> Result<HessianForm> {
    let base = smooth_part(problem, traj, lam, v, z);
    let tv = lam.eta.total_variation();
    let red = reduced_from_eta(&lam.eta, report, 1e-12 * (1.0 + tv))?;

    // reduced assembly
    let mut new = base;
    let mut nu_iter = red.nu.iter();
    for c in &report.constraints {
        let gpp = g_second_path(problem, traj, c.index, z);
        new += stieltjes(&gpp, &red.rho, c.index)?;
        for tp in &c.touch_points {
            let nu = *nu_iter.next().expect("one weight per touch point");
            if nu != 0.0 {
                new += nu * (gpp.get(tp.node, 0) + mu_d2_chain(problem, traj, tp, v, z)?);
            }
        }
    }

    // full assembly
    let mut old = base;
    let mut touch = Vec::new();
    for c in &report.constraints {
        let gpp = g_second_path(problem, traj, c.index, z);
        old += stieltjes(&gpp, &lam.eta, c.index)?;
        for tp in &c.touch_points {
            let atom = lam.eta.atom_component(tp.node, c.index);
            let (slope, curvature) = if atom != 0.0 {
                touch_slope_curvature(problem, traj, c.index, tp.node, v, z)?
            } else {
                (0.0, tp.g2)
            };
            let correction = if atom != 0.0 { -atom * slope * slope / curvature } else { 0.0 };
            old += correction;
            touch.push(TouchContribution {
                constraint: c.index,
                time: tp.time,
                atom,
                slope,
                curvature,
                correction,
            });
        }
    }
    Ok(HessianForm { new, old, touch })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConeMembership {
    /// Critical L² cone.
    pub c2: bool,
    /// Strict critical cone: g'z = 0 on every contact set.
    pub strict: bool,
    /// Radial critical directions, with the witness σ̄.
    pub radial: bool,
    pub sigma: Option<f64>,
    /// max over contact nodes of g'z
    pub sign_violation: f64,
    /// max |g'z| over the support of dη̄ in the contact set
    pub support_violation: f64,
    pub touch_violation: f64,
    pub endpoint_violation: f64,
    /// max |g'z| over the contact sets
    pub strict_gap: f64,
    pub violations: Vec<String>,
}

/// Largest σ̄ tried for radiality; the ladder is 2^-k below it.
const SIGMA_LADDER: usize = 40;

/// Membership of (v, z0) in C₂, C₂^S and C_∞^R for the reference multiplier λ̄.
pub fn cone_membership(
    problem: &dyn Problem,
    traj: &Trajectory,
    lam_bar: &Multiplier,
    report: &StructureReport,
    v: &Path,
    z0: &[f64],
    tol: f64,
) -> Result<ConeMembership> {
    let z = solve_linearized(problem, traj, v, z0)?;
    Ok(cone_membership_with(problem, traj, lam_bar, report, &z, tol))
}

pub fn cone_membership_with(
    problem: &dyn Problem,
    traj: &Trajectory,
    lam_bar: &Multiplier,
    report: &StructureReport,
    z: &Path,
    tol: f64,
) -> ConeMembership {
    let d = problem.dims();
    let g = traj.grid();
    let n = g.cells();
    let gz = |i: usize, k: usize| dot(&problem.g_jac(traj.y.at(k)).row(i).iter().copied().collect::<Vec<_>>(), z.at(k));
    let atom_tol = 1e-10 * (1.0 + lam_bar.eta.total_variation());
    let mut violations = Vec::new();
    let (mut sign, mut supp, mut touch, mut strict_gap) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for c in &report.constraints {
        let i = c.index;
        let support = lam_bar.eta.support_nodes(i, atom_tol);
        for r in &c.contact {
            for k in r.start..=r.end {
                let x = gz(i, k);
                sign = sign.max(x);
                strict_gap = strict_gap.max(x.abs());
                if support.binary_search(&k).is_ok() {
                    supp = supp.max(x.abs());
                }
                if x > tol && violations.len() < 8 {
                    violations.push(format!("g_{i}'z = {x:.3e} > 0 at t = {}", g.t(k)));
                }
            }
        }
        for tp in &c.touch_points {
            let x = gz(i, tp.node);
            let atom = lam_bar.eta.atom_component(tp.node, i);
            touch = touch.max(x).max(if atom.abs() > atom_tol { x.abs() } else { 0.0 });
        }
    }
    // endpoint tangent cone and Ψ̄-orthogonality
    let jac = problem.big_phi_jac(traj.y0(), traj.yt());
    let phi = problem.big_phi(traj.y0(), traj.yt());
    let zz: Vec<f64> = [z.at(0), z.at(n)].concat();
    let dphi: Vec<f64> = (0..d.s()).map(|r| (0..2 * d.n).map(|c| jac[(r, c)] * zz[c]).sum()).collect();
    let mut endpoint = 0.0f64;
    for r in 0..d.s() {
        if r < d.s_e {
            endpoint = endpoint.max(dphi[r].abs());
        } else if phi[r] >= -report.tol_active {
            endpoint = endpoint.max(dphi[r]);
        }
    }
    endpoint = endpoint.max(dot(&lam_bar.psi, &dphi).abs());
    if endpoint > tol {
        violations.push(format!("endpoint condition violated by {endpoint:.3e}"));
    }
    if supp > tol {
        violations.push(format!("g'z = {supp:.3e} on the support of the multiplier"));
    }
    if touch > tol {
        violations.push(format!("touch-point condition violated by {touch:.3e}"));
    }
    let c2 = sign <= tol && supp <= tol && touch <= tol && endpoint <= tol;
    let strict = c2 && strict_gap <= tol;

    let sigma = if c2 { radial_witness(problem, traj, report, z, tol) } else { None };
    ConeMembership {
        c2,
        strict,
        radial: sigma.is_some(),
        sigma,
        sign_violation: sign,
        support_violation: supp,
        touch_violation: touch,
        endpoint_violation: endpoint,
        strict_gap,
        violations,
    }
}

/// Largest σ̄ = 2^-k (k < 40) with g(ȳ) + σ̄ g'(ȳ)z ≤ σ̄ tol on every
/// ε-neighbourhood.
pub fn radial_witness(problem: &dyn Problem, traj: &Trajectory, report: &StructureReport, z: &Path, tol: f64) -> Option<f64> {
    let rows: Vec<(usize, usize, f64, f64)> = report
        .constraints
        .iter()
        .flat_map(|c| {
            c.eps_nodes.iter().map(move |&k| {
                let y = traj.y.at(k);
                let gj: Vec<f64> = problem.g_jac(y).row(c.index).iter().copied().collect();
                (c.index, k, problem.g(y)[c.index], dot(&gj, z.at(k)))
            })
        })
        .collect();
    let mut s = 1.0;
    for _ in 0..SIGMA_LADDER {
        if rows.iter().all(|&(_, _, g, x)| g + s * x <= s * tol) {
            return Some(s);
        }
        s *= 0.5;
    }
    None
}

/// Hat functions on a coarse mesh of at most `blocks` cells, per control
/// component.
fn hat_basis(g: &TimeGrid, m: usize, blocks: usize) -> Vec<Path> {
    let n = g.cells();
    let blocks = blocks.min(n).max(1);
    let knots: Vec<usize> = (0..=blocks).map(|b| b * n / blocks).collect();
    let mut out = Vec::new();
    for (b, &kb) in knots.iter().enumerate() {
        for c in 0..m {
            out.push(Path::from_fn(g, m, PathKind::Control, |k, _| {
                let mut val = vec![0.0; m];
                let left = if b > 0 { knots[b - 1] } else { kb };
                let right = if b < blocks { knots[b + 1] } else { kb };
                val[c] = if k == kb {
                    1.0
                } else if k > left && k < kb {
                    (k - left) as f64 / (kb - left) as f64
                } else if k > kb && k < right {
                    (right - k) as f64 / (right - kb) as f64
                } else {
                    0.0
                };
                val
            }));
        }
    }
    out
}

/// A direction (v, z0) normalized to ‖v‖₂ + |z0| = 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Direction {
    pub v: Path,
    pub z0: Vec<f64>,
}

impl Direction {
    pub fn norm(&self) -> f64 {
        self.v.l2_norm() + self.z0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn normalized(self) -> Direction {
        let s = self.norm();
        if s == 0.0 {
            return self;
        }
        Direction {
            v: self.v.scaled(1.0 / s),
            z0: self.z0.iter().map(|x| x / s).collect(),
        }
    }
}

/// Random members of the strict critical cone: random combinations in the
/// null space of its equality conditions over a hat basis, with the
/// remaining inequalities enforced by rejection. Returns fewer than
/// `count` directions when rejection starves, and none when the cone is
/// {0} on this basis.
pub fn sample_strict_directions(
    problem: &dyn Problem,
    traj: &Trajectory,
    lam_bar: &Multiplier,
    report: &StructureReport,
    count: usize,
    seed: u64,
) -> Result<Vec<Direction>> {
    let d = problem.dims();
    let g = traj.grid();
    let n = g.cells();
    let basis = hat_basis(g, d.m, 48);
    let nb = basis.len() + d.n;
    let mut zs = Vec::with_capacity(nb);
    for phi in &basis {
        zs.push(solve_linearized(problem, traj, phi, &vec![0.0; d.n])?);
    }
    let zero = Path::zeros(g, d.m, PathKind::Control);
    for i in 0..d.n {
        let mut e = vec![0.0; d.n];
        e[i] = 1.0;
        zs.push(solve_linearized(problem, traj, &zero, &e)?);
    }
    let atom_tol = 1e-10 * (1.0 + lam_bar.eta.total_variation());
    let row_at = |i: usize, k: usize| -> Vec<f64> {
        let gj: Vec<f64> = problem.g_jac(traj.y.at(k)).row(i).iter().copied().collect();
        zs.iter().map(|z| dot(&gj, z.at(k))).collect()
    };
    let mut eq: Vec<Vec<f64>> = Vec::new();
    let mut ineq: Vec<Vec<f64>> = Vec::new();
    for c in &report.constraints {
        for r in &c.contact {
            for k in r.start..=r.end {
                eq.push(row_at(c.index, k));
            }
        }
        for tp in &c.touch_points {
            if lam_bar.eta.atom_component(tp.node, c.index).abs() > atom_tol {
                eq.push(row_at(c.index, tp.node));
            } else {
                ineq.push(row_at(c.index, tp.node));
            }
        }
    }
    let jac = problem.big_phi_jac(traj.y0(), traj.yt());
    let phi = problem.big_phi(traj.y0(), traj.yt());
    let endpoint_row = |r: usize| -> Vec<f64> {
        zs.iter()
            .map(|z| {
                let zz: Vec<f64> = [z.at(0), z.at(n)].concat();
                (0..2 * d.n).map(|c| jac[(r, c)] * zz[c]).sum()
            })
            .collect()
    };
    for r in 0..d.s() {
        if r < d.s_e || (phi[r] >= -report.tol_active && lam_bar.psi[r] > atom_tol) {
            eq.push(endpoint_row(r));
        } else if phi[r] >= -report.tol_active {
            ineq.push(endpoint_row(r));
        }
    }
    let null = if eq.is_empty() {
        DMatrix::identity(nb, nb)
    } else {
        let e = DMatrix::from_fn(eq.len().max(nb), nb, |r, c| if r < eq.len() { eq[r][c] } else { 0.0 });
        let svd = e.svd(false, true);
        let vt = svd.v_t.expect("requested");
        let top = svd.singular_values.iter().fold(0.0f64, |m, x| m.max(*x));
        let cols: Vec<usize> = (0..nb).filter(|&i| svd.singular_values[i] <= 1e-9 * top).collect();
        DMatrix::from_fn(nb, cols.len(), |r, c| vt[(cols[c], r)])
    };
    let mut out = Vec::new();
    if null.ncols() == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ineq_tol = 1e-10;
    // Raw coefficients are smooth random profiles (a few cosine modes with
    // decaying amplitude) so that low-frequency directions, where
    // indefiniteness usually shows, are not drowned by white noise.
    let nodes_per_comp = basis.len() / d.m;
    for _ in 0..count * 20 {
        if out.len() == count {
            break;
        }
        let mut raw = DVector::zeros(nb);
        for c in 0..d.m {
            let modes: Vec<(f64, f64)> = (0..6)
                .map(|f| (rng.gen_range(-1.0..1.0) / (1.0 + f as f64), rng.gen_range(0.0..std::f64::consts::TAU)))
                .collect();
            for b in 0..nodes_per_comp {
                let s = b as f64 / (nodes_per_comp - 1).max(1) as f64;
                raw[b * d.m + c] = modes
                    .iter()
                    .enumerate()
                    .map(|(f, (a, ph))| a * (std::f64::consts::PI * f as f64 * s + ph).cos())
                    .sum();
            }
        }
        for i in basis.len()..nb {
            raw[i] = rng.gen_range(-1.0..1.0);
        }
        let mut coef = &null * (null.transpose() * raw);
        if coef.amax() < 1e-12 {
            continue;
        }
        let val = |coef: &DVector<f64>| ineq.iter().map(|r| dot(r, coef.as_slice())).fold(f64::NEG_INFINITY, f64::max);
        if !ineq.is_empty() && val(&coef) > ineq_tol {
            coef = -coef;
            if val(&coef) > ineq_tol {
                continue;
            }
        }
        let mut v = Path::zeros(g, d.m, PathKind::Control);
        for (j, b) in basis.iter().enumerate() {
            v = v.axpy(coef[j], b);
        }
        let z0 = coef.as_slice()[basis.len()..].to_vec();
        out.push(Direction { v, z0 }.normalized());
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectionResult {
    pub index: usize,
    pub membership: ConeMembership,
    /// J per polytope vertex (reduced assembly).
    pub values: Vec<f64>,
    pub max_value: f64,
    pub argmax_vertex: usize,
    /// max over vertices of |J_new - J_old|
    pub assembly_gap: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NecessaryVerdict {
    pub results: Vec<DirectionResult>,
    /// Directions outside the strict critical cone, skipped.
    pub skipped: Vec<usize>,
    pub vacuous: bool,
    pub tol: f64,
    pub holds: bool,
}

/// For each direction of the strict critical cone, max over vertices of
/// J[λ] ≥ -tol. J is affine in λ, so the max over the multiplier set sits
/// at a vertex.
pub fn necessary_verdict(
    problem: &dyn Problem,
    traj: &Trajectory,
    polytope: &MultiplierPolytope,
    report: &StructureReport,
    directions: &[Direction],
    tol: f64,
) -> Result<NecessaryVerdict> {
    let lam_bar = polytope.centre(problem, traj)?;
    let member_tol = polytope.tol;
    let mut results = Vec::new();
    let mut skipped = Vec::new();
    for (idx, dir) in directions.iter().enumerate() {
        let z = solve_linearized(problem, traj, &dir.v, &dir.z0)?;
        let membership = cone_membership_with(problem, traj, &lam_bar, report, &z, member_tol);
        if !membership.strict {
            skipped.push(idx);
            continue;
        }
        let mut values = Vec::new();
        let mut gap = 0.0f64;
        for vx in &polytope.vertices {
            let hf = hessian_form_with(problem, traj, &vx.multiplier, report, &dir.v, &z)?;
            gap = gap.max((hf.new - hf.old).abs());
            values.push(hf.new);
        }
        let (argmax, max_value) = values
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |a, (i, x)| if x > a.1 { (i, x) } else { a });
        results.push(DirectionResult {
            index: idx,
            membership,
            values,
            max_value,
            argmax_vertex: argmax,
            assembly_gap: gap,
            passed: max_value >= -tol,
        });
    }
    let holds = results.iter().all(|r| r.passed);
    Ok(NecessaryVerdict {
        vacuous: results.is_empty(),
        results,
        skipped,
        tol,
        holds,
    })
}

/// min over nodes of the smallest eigenvalue of D²_uu H for one multiplier.
pub fn legendre_clebsch(problem: &dyn Problem, traj: &Trajectory, lam: &Multiplier) -> f64 {
    let m = problem.dims().m;
    hamiltonian_hessians(problem, traj, &lam.adjoint)
        .iter()
        .map(|h| {
            let huu = h.view((0, 0), (m, m)).into_owned();
            SymmetricEigen::new(huu).eigenvalues.min()
        })
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrowthProbe {
    pub radius: f64,
    pub accepted: usize,
    pub rejected: usize,
    /// min of 2 (J(u) - J(ū)) / (‖u - ū‖₂ + |y0 - ȳ0|)² over accepted probes
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SufficientVerdict {
    /// Best Legendre–Clebsch constant ᾱ over the vertices.
    pub alpha: f64,
    pub alpha_vertex: usize,
    pub legendre_clebsch: bool,
    /// min over sampled normalized strict critical directions of max_λ J.
    pub min_form: Option<f64>,
    pub sampled: usize,
    pub positivity: bool,
    pub growth: GrowthProbe,
    pub holds: bool,
}

/// Feasibility of a perturbed trajectory for the running and endpoint
/// constraints.
fn feasible(problem: &dyn Problem, traj: &Trajectory, tol: f64) -> bool {
    let d = problem.dims();
    let phi = problem.big_phi(traj.y0(), traj.yt());
    let ends = (0..d.s()).all(|r| if r < d.s_e { phi[r].abs() <= tol } else { phi[r] <= tol });
    ends && (0..traj.grid().len()).all(|k| problem.g(traj.y.at(k)).iter().all(|x| *x <= tol))
}

/// Legendre–Clebsch plus sampled positivity of J on the strict critical
/// cone, with an empirical quadratic-growth probe at `radius`.
pub fn sufficient_verdict(
    problem: &dyn Problem,
    traj: &Trajectory,
    polytope: &MultiplierPolytope,
    report: &StructureReport,
    sample_size: usize,
    radius: f64,
    seed: u64,
) -> Result<SufficientVerdict> {
    let (alpha_vertex, alpha) = polytope
        .vertices
        .iter()
        .enumerate()
        .map(|(i, v)| (i, legendre_clebsch(problem, traj, &v.multiplier)))
        .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    let lam_bar = polytope.centre(problem, traj)?;
    let dirs = sample_strict_directions(problem, traj, &lam_bar, report, sample_size, seed)?;
    let nec = necessary_verdict(problem, traj, polytope, report, &dirs, 0.0)?;
    let min_form = nec.results.iter().map(|r| r.max_value).reduce(f64::min);
    let positivity = min_form.is_none_or(|m| m > 0.0);

    let j0 = cost(problem, traj);
    let opts = SolveOptions::default();
    let ftol = 1e-9 * traj.scale();
    let mut growth = GrowthProbe {
        radius,
        accepted: 0,
        rejected: 0,
        beta: None,
    };
    for dir in &dirs {
        let u = traj.u.axpy(radius, &dir.v);
        let y0: Vec<f64> = traj.y0().iter().zip(&dir.z0).map(|(a, b)| a + radius * b).collect();
        let Ok(tr) = solve_state(problem, &u, &y0, opts) else {
            growth.rejected += 1;
            continue;
        };
        if !feasible(problem, &tr, ftol) {
            growth.rejected += 1;
            continue;
        }
        growth.accepted += 1;
        let dist = u.axpy(-1.0, &traj.u).l2_norm()
            + y0.iter().zip(traj.y0()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let b = 2.0 * (cost(problem, &tr) - j0) / (dist * dist);
        growth.beta = Some(growth.beta.map_or(b, |x: f64| x.min(b)));
    }
    let legendre_clebsch = alpha > 0.0;
    Ok(SufficientVerdict {
        alpha,
        alpha_vertex,
        legendre_clebsch,
        min_form,
        sampled: nec.results.len(),
        positivity,
        holds: legendre_clebsch && positivity,
        growth,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupportCheck {
    pub constraint: usize,
    /// Contact nodes carrying no multiplier mass.
    pub uncovered_nodes: usize,
    /// Support nodes outside the contact set.
    pub stray_nodes: usize,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoGapSummary {
    /// Some vertex has supp(dη_i) = 𝓘_i for every i.
    pub support_condition: bool,
    pub support_vertex: Option<usize>,
    pub per_constraint: Vec<Vec<SupportCheck>>,
    /// Legendre–Clebsch constant at the barycentre of the vertices.
    pub centre_alpha: f64,
    pub no_active_constraints: bool,
    pub verdict: String,
}

fn support_checks(lam: &Multiplier, report: &StructureReport) -> Vec<SupportCheck> {
    let tol = 1e-10 * (1.0 + lam.eta.total_variation());
    report
        .constraints
        .iter()
        .map(|c| {
            let supp = lam.eta.support_nodes(c.index, tol);
            let uncovered = c
                .contact
                .iter()
                .flat_map(|r| r.start..=r.end)
                .filter(|k| supp.binary_search(k).is_err())
                .count();
            let stray = supp.iter().filter(|&&k| !c.in_contact(k)).count();
            SupportCheck {
                constraint: c.index,
                uncovered_nodes: uncovered,
                stray_nodes: stray,
                holds: uncovered == 0 && stray == 0,
            }
        })
        .collect()
}

/// Whether the no-gap statement applies: the support condition (which gives
/// C₂^S = C₂) for some vertex, and Legendre–Clebsch in the relative
/// interior.
pub fn no_gap_report(
    problem: &dyn Problem,
    traj: &Trajectory,
    polytope: &MultiplierPolytope,
    report: &StructureReport,
) -> Result<NoGapSummary> {
    let per: Vec<Vec<SupportCheck>> = polytope
        .vertices
        .iter()
        .map(|v| support_checks(&v.multiplier, report))
        .collect();
    let support_vertex = per.iter().position(|c| c.iter().all(|s| s.holds));
    let centre = polytope.centre(problem, traj)?;
    let centre_alpha = legendre_clebsch(problem, traj, &centre);
    let no_active = !report.has_contact();
    let support_condition = support_vertex.is_some();
    let verdict = match (support_condition || no_active, centre_alpha > 0.0) {
        (true, true) => "no-gap: necessary and sufficient conditions coincide on the critical cone",
        (true, false) => "critical cones coincide but Legendre-Clebsch fails at the barycentre",
        (false, true) => "support condition fails; conditions are stated on the strict critical cone only",
        (false, false) => "support condition and Legendre-Clebsch both fail",
    }
    .to_string();
    Ok(NoGapSummary {
        support_condition: support_condition || no_active,
        support_vertex,
        per_constraint: per,
        centre_alpha,
        no_active_constraints: no_active,
        verdict,
    })
}
