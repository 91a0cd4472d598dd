//! Lagrange multipliers: residuals of the first-order conditions, the
//! reduced identification (dρ, ν) ↔ dη, the qualification check, and the
//! numerical description of the multiplier set through its image under
//! π(dη, Ψ) = (touch-point weights, Ψ).
//!
//! Discrete multipliers are purely atomic at grid nodes. The unknowns of the
//! multiplier system are the nodal weights of dη on the contact sets, the
//! touch-point weights ν, and Ψ (free on equalities, nonnegative on active
//! inequalities). The residual is affine in these unknowns and is assembled
//! by superposition, one adjoint solve per unknown.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjoint::{endpoint_lagrangian_grad, solve_adjoint_default, stationarity_gradient, Multiplier};
use crate::bv::{stieltjes, Measure};
use crate::dynamics::{solve_linearized, Trajectory};
use crate::error::{Error, Result};
use crate::grid::{Path, PathKind, TimeGrid};
use crate::lp::{self, LpOutcome};
use crate::problem::{dot, Problem};
use crate::structure::StructureReport;

pub const DEFAULT_DEDUP_TOL: f64 = 1e-8;

/// max(1e-6, 10 Δt²) · (1 + |u|_∞ + |y|_∞)
pub fn certification_tol(traj: &Trajectory) -> f64 {
    let dt = traj.grid().dt_max();
    (1e-6f64).max(10.0 * dt * dt) * traj.scale()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiplierResiduals {
    /// Distance between the stored adjoint and a fresh solve.
    pub adjoint: f64,
    pub eta_negativity: f64,
    /// Σ_i |∫ g_i(ȳ) dη_i|
    pub complementarity: f64,
    pub psi_cone: f64,
    /// max_t |D_uH[p](t)|
    pub stationarity: f64,
    /// |p(0-) + D_y0 Φ[Ψ]|
    pub transversality: f64,
    pub tol: f64,
    pub certified: bool,
}

impl MultiplierResiduals {
    pub fn worst(&self) -> f64 {
        [
            self.adjoint,
            self.eta_negativity,
            self.complementarity,
            self.psi_cone,
            self.stationarity,
            self.transversality,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

fn endpoint_values(problem: &dyn Problem, traj: &Trajectory) -> (usize, Vec<f64>) {
    let d = problem.dims();
    (d.s_e, problem.big_phi(traj.y0(), traj.yt()).iter().copied().collect())
}

fn transversality_vec(problem: &dyn Problem, traj: &Trajectory, lam: &Multiplier) -> Vec<f64> {
    let n = problem.dims().n;
    let p0 = lam.adjoint.start_value();
    let e = endpoint_lagrangian_grad(problem, traj.y0(), traj.yt(), &lam.psi);
    (0..n).map(|i| p0[i] + e[i]).collect()
}

/// Residuals of the multiplier conditions; certified iff all are ≤ `tol`.
pub fn multiplier_residuals(problem: &dyn Problem, traj: &Trajectory, lam: &Multiplier, tol: f64) -> Result<MultiplierResiduals> {
    let d = problem.dims();
    let g = traj.grid();
    g.same(lam.eta.grid())?;
    let fresh = solve_adjoint_default(problem, traj, &lam.eta, &lam.psi)?;
    let adjoint = fresh.sup_diff(&lam.adjoint);

    let mut neg = 0.0f64;
    for w in lam.eta.atoms().values() {
        neg = w.iter().fold(neg, |m, x| m.max(-x));
    }
    for j in 0..g.cells() {
        neg = lam.eta.density(j).iter().fold(neg, |m, x| m.max(-x));
    }

    let mut comp = 0.0;
    for i in 0..d.r {
        let gi = Path::from_fn(g, 1, PathKind::State, |k, _| vec![problem.g(traj.y.at(k))[i]]);
        comp += stieltjes(&gi, &lam.eta, i)?.abs();
    }

    let (s_e, phi) = endpoint_values(problem, traj);
    let mut cone = 0.0f64;
    for (i, (&psi, &val)) in lam.psi.iter().zip(&phi).enumerate().skip(s_e) {
        let _ = i;
        cone = cone.max(-psi).max((psi * val).abs());
    }

    let stationarity = stationarity_gradient(problem, traj, &lam.adjoint).sup_norm();
    let transversality = transversality_vec(problem, traj, lam)
        .iter()
        .fold(0.0f64, |m, x| m.max(x.abs()));
    let mut out = MultiplierResiduals {
        adjoint,
        eta_negativity: neg,
        complementarity: comp,
        psi_cone: cone,
        stationarity,
        transversality,
        tol,
        certified: false,
    };
    out.certified = out.worst() <= tol;
    Ok(out)
}

/// Multiplier of the reduced problem: dρ_i lives on 𝓘_i^ε, ν on touch points.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReducedMultiplier {
    pub rho: Measure,
    /// One weight per touch point, in report order.
    pub nu: Vec<f64>,
}

/// dη = dρ on 𝓘^ε plus the touch-point atoms ν.
pub fn eta_from_reduced(report: &StructureReport, red: &ReducedMultiplier) -> Result<Measure> {
    let touches: Vec<_> = report.touch_points().collect();
    if touches.len() != red.nu.len() {
        return Err(Error::InvalidArgument(format!(
            "{} touch weights for {} touch points",
            red.nu.len(),
            touches.len()
        )));
    }
    let mut eta = red.rho.clone();
    for (tp, &nu) in touches.iter().zip(&red.nu) {
        eta.add_atom_component(tp.node, tp.constraint, nu);
    }
    Ok(eta)
}

/// Inverse identification; rejects mass outside 𝓘_i ∪ 𝓣_i.
pub fn reduced_from_eta(eta: &Measure, report: &StructureReport, tol: f64) -> Result<ReducedMultiplier> {
    let g = eta.grid();
    let mut rho = Measure::zero(g, eta.dim());
    let mut nu = Vec::new();
    for c in &report.constraints {
        let i = c.index;
        for (&k, w) in eta.atoms() {
            let x = w[i];
            if x == 0.0 {
                continue;
            }
            if c.in_contact(k) {
                rho.add_atom_component(k, i, x);
            } else if !c.touch_points.iter().any(|t| t.node == k) && x.abs() > tol {
                return Err(Error::SupportViolation(format!(
                    "constraint {i}: atom {x:.3e} at t = {} outside the contact set",
                    g.t(k)
                )));
            }
        }
        for j in 0..g.cells() {
            let x = eta.density_component(j, i);
            if x == 0.0 {
                continue;
            }
            if c.in_contact(j) && c.in_contact(j + 1) {
                rho.set_density_component(j, i, x);
            } else if x.abs() > tol {
                return Err(Error::SupportViolation(format!(
                    "constraint {i}: density {x:.3e} on cell [{}, {}] outside the contact set",
                    g.t(j),
                    g.t(j + 1)
                )));
            }
        }
        for tp in &c.touch_points {
            nu.push(eta.atom_component(tp.node, i));
        }
    }
    Ok(ReducedMultiplier { rho, nu })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Unknown {
    /// Nodal weight of dη_i at a contact node.
    Eta { constraint: usize, node: usize },
    /// Touch-point weight.
    Nu { constraint: usize, node: usize },
    /// Endpoint multiplier; free for equalities.
    Psi { index: usize, free: bool },
}

impl Unknown {
    fn is_pi(&self) -> bool {
        !matches!(self, Unknown::Eta { .. })
    }

    fn free(&self) -> bool {
        matches!(self, Unknown::Psi { free: true, .. })
    }
}

/// Affine residual map x ↦ r0 + C x of the stationarity and transversality
/// conditions.
#[derive(Debug, Clone)]
pub struct MultiplierSystem {
    pub unknowns: Vec<Unknown>,
    pub r0: DVector<f64>,
    pub columns: DMatrix<f64>,
    grid: TimeGrid,
    r: usize,
    s: usize,
}

fn residual_vector(problem: &dyn Problem, traj: &Trajectory, lam: &Multiplier) -> DVector<f64> {
    let duh = stationarity_gradient(problem, traj, &lam.adjoint);
    let mut v: Vec<f64> = duh.raw().to_vec();
    v.extend(transversality_vec(problem, traj, lam));
    DVector::from_vec(v)
}

impl MultiplierSystem {
    pub fn build(problem: &dyn Problem, traj: &Trajectory, report: &StructureReport) -> Result<Self> {
        let d = problem.dims();
        let g = traj.grid();
        let mut unknowns = Vec::new();
        for c in &report.constraints {
            for r in &c.contact {
                for k in r.start..=r.end {
                    unknowns.push(Unknown::Eta { constraint: c.index, node: k });
                }
            }
            for t in &c.touch_points {
                unknowns.push(Unknown::Nu { constraint: c.index, node: t.node });
            }
        }
        let (s_e, phi) = endpoint_values(problem, traj);
        for i in 0..d.s() {
            if i < s_e {
                unknowns.push(Unknown::Psi { index: i, free: true });
            } else if phi[i] >= -report.tol_active {
                unknowns.push(Unknown::Psi { index: i, free: false });
            }
        }
        let mut sys = MultiplierSystem {
            unknowns,
            r0: DVector::zeros(0),
            columns: DMatrix::zeros(0, 0),
            grid: g.clone(),
            r: d.r,
            s: d.s(),
        };
        let zero = Multiplier::new(problem, traj, Measure::zero(g, d.r), vec![0.0; d.s()])?;
        sys.r0 = residual_vector(problem, traj, &zero);
        let mut cols = DMatrix::zeros(sys.r0.len(), sys.unknowns.len());
        for j in 0..sys.unknowns.len() {
            let mut x = vec![0.0; sys.unknowns.len()];
            x[j] = 1.0;
            let (eta, psi) = sys.assemble(&x);
            let lam = Multiplier::new(problem, traj, eta, psi)?;
            let col = residual_vector(problem, traj, &lam) - &sys.r0;
            cols.set_column(j, &col);
        }
        sys.columns = cols;
        Ok(sys)
    }

    /// (dη, Ψ) for an unknown vector.
    pub fn assemble(&self, x: &[f64]) -> (Measure, Vec<f64>) {
        let mut eta = Measure::zero(&self.grid, self.r);
        let mut psi = vec![0.0; self.s];
        for (u, &v) in self.unknowns.iter().zip(x) {
            match *u {
                Unknown::Eta { constraint, node } | Unknown::Nu { constraint, node } => {
                    if v != 0.0 {
                        eta.add_atom_component(node, constraint, v)
                    }
                }
                Unknown::Psi { index, .. } => psi[index] = v,
            }
        }
        eta.prune();
        (eta, psi)
    }

    pub fn residual(&self, x: &[f64]) -> DVector<f64> {
        &self.r0 + &self.columns * DVector::from_column_slice(x)
    }

    pub fn pi_indices(&self) -> Vec<usize> {
        (0..self.unknowns.len()).filter(|&j| self.unknowns[j].is_pi()).collect()
    }

    pub fn eta_indices(&self) -> Vec<usize> {
        (0..self.unknowns.len()).filter(|&j| !self.unknowns[j].is_pi()).collect()
    }

    /// Least L1 residual over the sign constraints.
    fn least_residual(&self) -> Result<(Vec<f64>, f64)> {
        let rows = self.r0.len();
        let nu = self.unknowns.len();
        // column layout: unknown parts, r+, r-
        let mut map: Vec<(usize, f64)> = Vec::new();
        for j in 0..nu {
            map.push((j, 1.0));
            if self.unknowns[j].free() {
                map.push((j, -1.0));
            }
        }
        let nv = map.len();
        let mut a = DMatrix::zeros(rows, nv + 2 * rows);
        let mut b = vec![0.0; rows];
        for r in 0..rows {
            b[r] = -self.r0[r];
            for (c, &(j, s)) in map.iter().enumerate() {
                a[(r, c)] = s * self.columns[(r, j)];
            }
            a[(r, nv + r)] = -1.0;
            a[(r, nv + rows + r)] = 1.0;
        }
        let mut cost = vec![0.0; nv + 2 * rows];
        cost[nv..].iter_mut().for_each(|x| *x = 1.0);
        match lp::solve(&a, &b, &cost)? {
            LpOutcome::Optimal { x, .. } => {
                let mut out = vec![0.0; nu];
                for (c, &(j, s)) in map.iter().enumerate() {
                    out[j] += s * x[c];
                }
                Ok((out, x[nv..].iter().sum()))
            }
            _ => Err(Error::Lp("L1 residual problem is feasible and bounded by construction".into())),
        }
    }

    /// Orthonormal basis of the numerical null space of the residual map.
    fn null_basis(&self) -> DMatrix<f64> {
        null_space(&self.columns)
    }

    /// Maximizes `objective · Z w` over `{w : base + Z w` sign-feasible}`.
    fn face_lp(&self, base: &[f64], z: &DMatrix<f64>, objective: &[f64]) -> Result<Vec<f64>> {
        let nz = z.ncols();
        let signed: Vec<usize> = (0..self.unknowns.len()).filter(|&j| !self.unknowns[j].free()).collect();
        // variables w+, w-, slacks; rows: (Z w)_j - s_j = -base_j
        let mut a = DMatrix::zeros(signed.len(), 2 * nz + signed.len());
        let mut b = vec![0.0; signed.len()];
        for (r, &j) in signed.iter().enumerate() {
            for c in 0..nz {
                a[(r, c)] = z[(j, c)];
                a[(r, nz + c)] = -z[(j, c)];
            }
            a[(r, 2 * nz + r)] = -1.0;
            b[r] = -base[j].max(0.0);
        }
        let mut cost = vec![0.0; 2 * nz + signed.len()];
        for c in 0..nz {
            let g: f64 = (0..self.unknowns.len()).map(|j| objective[j] * z[(j, c)]).sum();
            cost[c] = -g;
            cost[nz + c] = g;
        }
        match lp::solve(&a, &b, &cost)? {
            LpOutcome::Optimal { x, .. } => {
                let w = DVector::from_fn(nz, |c, _| x[c] - x[nz + c]);
                let step = z * w;
                Ok((0..base.len()).map(|j| base[j] + step[j]).collect())
            }
            LpOutcome::Unbounded => Err(Error::NoMultiplier(
                "multiplier set unbounded along a random objective; qualification fails".into(),
            )),
            LpOutcome::Infeasible { .. } => Err(Error::Lp("sign-feasible base point rejected".into())),
        }
    }
}

/// Singular values below this fraction of the largest count as zero.
const NULL_RTOL: f64 = 1e-10;

fn null_space(c: &DMatrix<f64>) -> DMatrix<f64> {
    let n = c.ncols();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    // pad to at least n rows so V is square
    let mut cc = DMatrix::zeros(c.nrows().max(n), n);
    cc.view_mut((0, 0), (c.nrows(), n)).copy_from(c);
    let svd = cc.svd(false, true);
    let vt = svd.v_t.expect("requested");
    let top = svd.singular_values.iter().fold(0.0f64, |m, x| m.max(*x));
    let cols: Vec<usize> = (0..n)
        .filter(|&i| svd.singular_values[i] <= NULL_RTOL * top.max(1e-300))
        .collect();
    DMatrix::from_fn(n, cols.len(), |r, c| vt[(cols[c], r)])
}

/// Affine map m: π-image ↦ full multiplier, realized as a least-squares
/// solve for the dη weights given (ν, Ψ).
#[derive(Debug, Clone)]
pub struct AffineMap {
    pub pi_indices: Vec<usize>,
    pub eta_indices: Vec<usize>,
    /// η = offset + slope · π
    pub offset: DVector<f64>,
    pub slope: DMatrix<f64>,
}

impl AffineMap {
    fn new(sys: &MultiplierSystem) -> Result<Self> {
        let pi = sys.pi_indices();
        let et = sys.eta_indices();
        let rows = sys.r0.len();
        let ce = DMatrix::from_fn(rows, et.len(), |r, c| sys.columns[(r, et[c])]);
        let cp = DMatrix::from_fn(rows, pi.len(), |r, c| sys.columns[(r, pi[c])]);
        let pinv = if et.is_empty() {
            DMatrix::zeros(0, rows)
        } else {
            let tol = 1e-10 * ce.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
            ce.pseudo_inverse(tol).map_err(|e| Error::IllConditioned(e.to_string()))?
        };
        Ok(AffineMap {
            offset: -(&pinv * &sys.r0),
            slope: -(&pinv * cp),
            pi_indices: pi,
            eta_indices: et,
        })
    }

    /// Full unknown vector for a π-image.
    pub fn unknowns(&self, pi: &[f64]) -> Vec<f64> {
        let eta = &self.offset + &self.slope * DVector::from_column_slice(pi);
        let mut x = vec![0.0; self.pi_indices.len() + self.eta_indices.len()];
        for (c, &j) in self.pi_indices.iter().enumerate() {
            x[j] = pi[c];
        }
        for (c, &j) in self.eta_indices.iter().enumerate() {
            x[j] = eta[c];
        }
        x
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolytopeVertex {
    /// (ν, Ψ) restricted to the π unknowns, in system order.
    pub pi: Vec<f64>,
    pub multiplier: Multiplier,
    pub residuals: MultiplierResiduals,
}

#[derive(Debug, Clone)]
pub struct MultiplierPolytope {
    pub system: MultiplierSystem,
    pub map: AffineMap,
    pub vertices: Vec<PolytopeVertex>,
    /// Minimal L1 residual of the discrete multiplier system.
    pub min_residual: f64,
    pub tol: f64,
}

impl MultiplierPolytope {
    /// m(π): reconstructs a multiplier from a π-image.
    pub fn reconstruct(&self, problem: &dyn Problem, traj: &Trajectory, pi: &[f64]) -> Result<Multiplier> {
        let x = self.map.unknowns(pi);
        let (eta, psi) = self.system.assemble(&x);
        Multiplier::new(problem, traj, eta, psi)
    }

    /// Barycentre of the vertices' π-images mapped through m.
    pub fn centre(&self, problem: &dyn Problem, traj: &Trajectory) -> Result<Multiplier> {
        let k = self.vertices.len().max(1) as f64;
        let mut pi = vec![0.0; self.map.pi_indices.len()];
        for v in &self.vertices {
            pi.iter_mut().zip(&v.pi).for_each(|(a, b)| *a += b / k);
        }
        self.reconstruct(problem, traj, &pi)
    }

    pub fn all_certified(&self) -> bool {
        self.vertices.iter().all(|v| v.residuals.certified)
    }
}

/// Vertices of the π-image of the multiplier set, from `n_objectives`
/// random linear objectives. A least-L1-residual point anchors the set; the
/// remaining freedom is the numerical null space of the residual map, cut
/// down by the sign constraints.
pub fn estimate_polytope(
    problem: &dyn Problem,
    traj: &Trajectory,
    report: &StructureReport,
    n_objectives: usize,
    seed: u64,
) -> Result<MultiplierPolytope> {
    let tol = certification_tol(traj);
    let sys = MultiplierSystem::build(problem, traj, report)?;
    let map = AffineMap::new(&sys)?;
    let (x1, l1) = sys.least_residual()?;
    let worst = sys.residual(&x1).amax();
    if worst > tol {
        return Err(Error::NoMultiplier(format!(
            "least residual {worst:.3e} of the multiplier system exceeds {tol:.3e}"
        )));
    }
    let pi_idx = sys.pi_indices();
    let z = sys.null_basis();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images: Vec<Vec<f64>> = Vec::new();
    let mut push = |pi: Vec<f64>| {
        let dup = images.iter().any(|q| {
            let scale = 1.0 + q.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            q.iter().zip(&pi).all(|(a, b)| (a - b).abs() <= DEFAULT_DEDUP_TOL * scale)
        });
        if !dup {
            images.push(pi);
        }
    };
    push(pi_idx.iter().map(|&j| x1[j]).collect());
    if z.ncols() > 0 {
        for _ in 0..n_objectives {
            let mut obj = vec![0.0; sys.unknowns.len()];
            for &j in &pi_idx {
                obj[j] = rng.gen_range(-1.0..1.0);
            }
            let x = sys.face_lp(&x1, &z, &obj)?;
            push(pi_idx.iter().map(|&j| x[j]).collect());
        }
    }
    let mut vertices = Vec::new();
    for pi in images {
        let x = map.unknowns(&pi);
        let (eta, psi) = sys.assemble(&x);
        let lam = Multiplier::new(problem, traj, eta, psi)?;
        let residuals = multiplier_residuals(problem, traj, &lam, tol)?;
        vertices.push(PolytopeVertex {
            pi,
            multiplier: lam,
            residuals,
        });
    }
    Ok(MultiplierPolytope {
        system: sys,
        map,
        vertices,
        min_residual: l1,
        tol,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InjectivityCheck {
    /// Largest sup-difference of dη between multipliers sharing a π-image.
    pub max_eta_spread: f64,
    /// Dimension of the dη freedom left once π is pinned.
    pub fiber_dim: usize,
    pub tol: f64,
    pub passed: bool,
}

/// For each vertex, pins π and pushes the dη weights in random opposite
/// directions; multipliers with equal π-images must have equal dη.
pub fn check_pi_injectivity(polytope: &MultiplierPolytope, probes: usize, seed: u64) -> Result<InjectivityCheck> {
    let sys = &polytope.system;
    let pi_idx = sys.pi_indices();
    let eta_idx = sys.eta_indices();
    let z = sys.null_basis();
    // directions of the null space with zero π-component
    let zp = DMatrix::from_fn(pi_idx.len(), z.ncols(), |r, c| z[(pi_idx[r], c)]);
    let fiber = if z.ncols() == 0 {
        DMatrix::zeros(sys.unknowns.len(), 0)
    } else {
        &z * null_space(&zp)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spread = 0.0f64;
    if fiber.ncols() > 0 {
        for v in &polytope.vertices {
            let base = polytope.map.unknowns(&v.pi);
            for _ in 0..probes {
                let mut obj = vec![0.0; sys.unknowns.len()];
                for &j in &eta_idx {
                    obj[j] = rng.gen_range(-1.0..1.0);
                }
                let a = match sys.face_lp(&base, &fiber, &obj) {
                    Ok(a) => a,
                    Err(Error::NoMultiplier(_)) => {
                        spread = f64::INFINITY;
                        break;
                    }
                    Err(e) => return Err(e),
                };
                obj.iter_mut().for_each(|x| *x = -*x);
                let b = sys.face_lp(&base, &fiber, &obj)?;
                for &j in &eta_idx {
                    spread = spread.max((a[j] - b[j]).abs());
                }
            }
        }
    }
    Ok(InjectivityCheck {
        max_eta_spread: spread,
        fiber_dim: fiber.ncols(),
        tol: polytope.tol,
        passed: spread <= polytope.tol,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QualificationVerdict {
    pub equality_rank: usize,
    pub equality_count: usize,
    pub surjective: bool,
    /// Best common slack over active inequalities; `None` when there is
    /// nothing to make strictly feasible.
    pub margin: Option<f64>,
    pub witness_v: Option<Path>,
    pub witness_z0: Option<Vec<f64>>,
    /// LP duals when no strictly feasible direction was found.
    pub certificate: Option<Vec<f64>>,
    pub qualified: bool,
}

/// Piecewise-constant block basis for directions.
fn block_basis(g: &TimeGrid, m: usize, blocks: usize) -> Vec<Path> {
    let n = g.cells();
    let blocks = blocks.min(n).max(1);
    let mut out = Vec::new();
    for b in 0..blocks {
        let lo = b * n / blocks;
        let hi = if b + 1 == blocks { n + 1 } else { (b + 1) * n / blocks };
        for c in 0..m {
            out.push(Path::from_fn(g, m, PathKind::Control, |k, _| {
                let mut v = vec![0.0; m];
                if k >= lo && k < hi {
                    v[c] = 1.0;
                }
                v
            }));
        }
    }
    out
}

/// Robinson qualification: surjectivity of the endpoint equalities and a
/// direction that is strictly feasible for every active inequality.
pub fn check_qualification(
    problem: &dyn Problem,
    traj: &Trajectory,
    report: &StructureReport,
    seed: u64,
) -> Result<QualificationVerdict> {
    let d = problem.dims();
    let g = traj.grid();
    let n = g.cells();
    let basis = block_basis(g, d.m, 32);
    let nb = basis.len() + d.n;
    // responses z[φ_j, 0] and z[0, e_i]
    let mut zs = Vec::with_capacity(nb);
    for phi in &basis {
        zs.push(solve_linearized(problem, traj, phi, &vec![0.0; d.n])?);
    }
    let zero_v = Path::zeros(g, d.m, PathKind::Control);
    for i in 0..d.n {
        let mut e = vec![0.0; d.n];
        e[i] = 1.0;
        zs.push(solve_linearized(problem, traj, &zero_v, &e)?);
    }
    let jac = problem.big_phi_jac(traj.y0(), traj.yt());
    let endpoint_row = |r: usize, z: &Path| -> f64 {
        let zz: Vec<f64> = [z.at(0), z.at(n)].concat();
        (0..2 * d.n).map(|c| jac[(r, c)] * zz[c]).sum()
    };
    let e_mat = DMatrix::from_fn(d.s_e, nb, |r, c| endpoint_row(r, &zs[c]));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes = DMatrix::from_fn(nb, d.s_e + d.n, |_, _| rng.gen_range(-1.0..1.0));
    let probed = &e_mat * probes;
    let rank = if d.s_e == 0 {
        0
    } else {
        let sv = probed.svd(false, false).singular_values;
        let top = sv.iter().fold(0.0f64, |m, x| m.max(*x));
        sv.iter().filter(|&&x| x > 1e-8 * top.max(1e-300)).count()
    };
    let surjective = rank == d.s_e;

    // inequality rows: active Φ^I and g_i' z on the active nodes
    let (s_e, phi) = endpoint_values(problem, traj);
    let mut ineq: Vec<Vec<f64>> = Vec::new();
    for i in s_e..d.s() {
        if phi[i] >= -report.tol_active {
            ineq.push((0..nb).map(|c| endpoint_row(i, &zs[c])).collect());
        }
    }
    for c in &report.constraints {
        for &k in &c.active_nodes {
            let row = problem.g_jac(traj.y.at(k)).row(c.index).iter().copied().collect::<Vec<_>>();
            ineq.push((0..nb).map(|col| dot(&row, zs[col].at(k))).collect());
        }
    }
    if ineq.is_empty() {
        return Ok(QualificationVerdict {
            equality_rank: rank,
            equality_count: d.s_e,
            surjective,
            margin: None,
            witness_v: None,
            witness_z0: None,
            certificate: None,
            qualified: surjective,
        });
    }

    // variables: a (nb), b (nb), δ, slacks s (ni), sa (nb), sb (nb)
    let ni = ineq.len();
    let ncols = 4 * nb + 1 + ni;
    let nrows = d.s_e + ni + 2 * nb;
    let mut a = DMatrix::zeros(nrows, ncols);
    let mut bvec = vec![0.0; nrows];
    for r in 0..d.s_e {
        for c in 0..nb {
            a[(r, c)] = e_mat[(r, c)];
            a[(r, nb + c)] = -e_mat[(r, c)];
        }
    }
    let delta = 2 * nb;
    for (q, row) in ineq.iter().enumerate() {
        let r = d.s_e + q;
        for c in 0..nb {
            a[(r, c)] = row[c];
            a[(r, nb + c)] = -row[c];
        }
        a[(r, delta)] = 1.0;
        a[(r, delta + 1 + q)] = 1.0;
    }
    for c in 0..nb {
        let r = d.s_e + ni + c;
        a[(r, c)] = 1.0;
        a[(r, delta + 1 + ni + c)] = 1.0;
        bvec[r] = 1.0;
        let r2 = d.s_e + ni + nb + c;
        a[(r2, nb + c)] = 1.0;
        a[(r2, delta + 1 + ni + nb + c)] = 1.0;
        bvec[r2] = 1.0;
    }
    let mut cost = vec![0.0; ncols];
    cost[delta] = -1.0;
    let scale = ineq.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    let margin_tol = 1e-8 * (1.0 + scale);
    match lp::solve(&a, &bvec, &cost)? {
        LpOutcome::Optimal { x, duals, .. } => {
            let margin = x[delta];
            let coef: Vec<f64> = (0..nb).map(|c| x[c] - x[nb + c]).collect();
            let mut v = Path::zeros(g, d.m, PathKind::Control);
            for (j, phi) in basis.iter().enumerate() {
                v = v.axpy(coef[j], phi);
            }
            let z0 = coef[basis.len()..].to_vec();
            let ok = margin > margin_tol;
            Ok(QualificationVerdict {
                equality_rank: rank,
                equality_count: d.s_e,
                surjective,
                margin: Some(margin),
                witness_v: ok.then_some(v),
                witness_z0: ok.then_some(z0),
                certificate: (!ok).then_some(duals),
                qualified: surjective && ok,
            })
        }
        LpOutcome::Infeasible { certificate, .. } => Ok(QualificationVerdict {
            equality_rank: rank,
            equality_count: d.s_e,
            surjective,
            margin: Some(0.0),
            witness_v: None,
            witness_z0: None,
            certificate: Some(certificate),
            qualified: false,
        }),
        LpOutcome::Unbounded => Err(Error::Lp("qualification LP unbounded despite box bounds".into())),
    }
}
