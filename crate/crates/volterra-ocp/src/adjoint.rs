//! Hamiltonian, endpoint Lagrangian and the backward adjoint equation.
//!
//! The discrete adjoint is the exact transpose of the discrete linearized
//! state equation. With nodal weights `W_k` and Volterra weights `w^k_j`,
//! the node masses `π_k` solve
//!
//! ```text
//! π_k = W_k ℓ_y(k) + η̂_k g'(y_k) + [k = N] D_yT Φ[Ψ] + Σ_{k' ≥ k} w^{k'}_k π_{k'} D_y f(t_k', t_k)
//! ```
//!
//! where `η̂_k` are the nodal weights of dη. The adjoint path is
//! `p^l(t_k) = Σ_{j ≥ k} π_j`, so `p(0-) = Σ π_k` and `p(T+) = D_yT Φ[Ψ]`.
//! The stationarity gradient uses the summed-by-parts Hamiltonian
//! `D_uH_j = ℓ_u(j) + Σ_{k ≥ j} (w^k_j / W_j) π_k D_u f(t_k, t_j)`, which is
//! what makes the duality identity hold to rounding error.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bv::{stieltjes, BVPath, Measure};
use crate::dynamics::{solve_linearized, Trajectory, DEFAULT_MAX_ITER};
use crate::error::{Error, Result};
use crate::grid::{tail_quad, Path, PathKind};
use crate::problem::{dot, Problem};

#[derive(Debug, Clone)]
pub struct HamiltonianEval {
    pub h: f64,
    pub du: DVector<f64>,
    pub dy: DVector<f64>,
    /// ordered (u, y)
    pub d2: DMatrix<f64>,
}

/// H[p](t_k, ũ, ỹ) = ℓ(ũ, ỹ) + p_t f(t, t, ũ, ỹ) + ∫_t^T p_s D_τ f(s, t, ũ, ỹ) ds,
/// with p read through its right-continuous representative.
pub fn hamiltonian(problem: &dyn Problem, p: &BVPath, k: usize, ut: &[f64], yt: &[f64]) -> HamiltonianEval {
    let d = problem.dims();
    let g = p.grid();
    let (_, pr) = p.node_values();
    let t = g.t(k);
    let l = problem.l(ut, yt);
    let lg = problem.l_grad(ut, yt);
    let mut d2 = problem.l_hess(ut, yt);
    let pt = pr.at(k);
    let f = problem.f(t, t, ut, yt);
    let mut h = l + dot(pt, f.as_slice());
    let fu = problem.f_u(t, t, ut, yt);
    let fy = problem.f_y(t, t, ut, yt);
    let prow = DVector::from_column_slice(pt);
    let mut du = lg.rows(0, d.m).into_owned() + fu.transpose() * &prow;
    let mut dy = lg.rows(d.m, d.n).into_owned() + fy.transpose() * &prow;
    for (c, hc) in problem.f_hess(t, t, ut, yt).iter().enumerate() {
        d2 += hc * pt[c];
    }
    let n_nodes = g.len();
    let mut s_h = vec![0.0; n_nodes];
    let mut s_du = vec![vec![0.0; n_nodes]; d.m];
    let mut s_dy = vec![vec![0.0; n_nodes]; d.n];
    let mut s_d2 = vec![DMatrix::<f64>::zeros(d.m + d.n, d.m + d.n); n_nodes];
    for s in k..n_nodes {
        let ts = g.t(s);
        let ps = DVector::from_column_slice(pr.at(s));
        s_h[s] = ps.dot(&problem.f_tau(ts, t, ut, yt));
        let a = problem.f_tau_u(ts, t, ut, yt).transpose() * &ps;
        let b = problem.f_tau_y(ts, t, ut, yt).transpose() * &ps;
        (0..d.m).for_each(|i| s_du[i][s] = a[i]);
        (0..d.n).for_each(|i| s_dy[i][s] = b[i]);
        for (c, hc) in problem.f_tau_hess(ts, t, ut, yt).iter().enumerate() {
            s_d2[s] += hc * ps[c];
        }
    }
    h += tail_quad(&s_h, g, k);
    (0..d.m).for_each(|i| du[i] += tail_quad(&s_du[i], g, k));
    (0..d.n).for_each(|i| dy[i] += tail_quad(&s_dy[i], g, k));
    for a in 0..d.m + d.n {
        for b in 0..d.m + d.n {
            let col: Vec<f64> = s_d2.iter().map(|m| m[(a, b)]).collect();
            d2[(a, b)] += tail_quad(&col, g, k);
        }
    }
    HamiltonianEval { h, du, dy, d2 }
}

/// Φ[Ψ](y0, yT) = φ(y0, yT) + Ψ·Φ(y0, yT), gradient ordered (y0, yT).
pub fn endpoint_lagrangian_grad(problem: &dyn Problem, y0: &[f64], yt: &[f64], psi: &[f64]) -> DVector<f64> {
    let mut g = problem.phi_grad(y0, yt);
    if !psi.is_empty() {
        g += problem.big_phi_jac(y0, yt).transpose() * DVector::from_column_slice(psi);
    }
    g
}

pub fn endpoint_lagrangian_hess(problem: &dyn Problem, y0: &[f64], yt: &[f64], psi: &[f64]) -> DMatrix<f64> {
    let mut h = problem.phi_hess(y0, yt);
    for (c, hc) in problem.big_phi_hess(y0, yt).iter().enumerate() {
        h += hc * psi[c];
    }
    h
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdjointState {
    /// The adjoint as a BV path: atoms from dη, densities from the smooth part.
    pub p: BVPath,
    /// Discrete node masses π_k, terminal value included at k = N.
    pub pi: Path,
}

impl AdjointState {
    /// p(0-).
    pub fn start_value(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.pi.dim()];
        for k in 0..self.pi.grid().len() {
            s.iter_mut().zip(self.pi.at(k)).for_each(|(a, b)| *a += b);
        }
        s
    }

    /// Adds a constant to the adjoint (used to build corrupted copies).
    pub fn shifted(&self, c: &[f64]) -> AdjointState {
        let mut pi = self.pi.clone();
        let n = pi.grid().cells();
        for (i, x) in c.iter().enumerate() {
            pi.set(n, i, pi.get(n, i) + x);
        }
        AdjointState {
            p: self.p.shifted(c),
            pi,
        }
    }

    pub fn sup_diff(&self, other: &AdjointState) -> f64 {
        let end = self
            .p
            .end_value()
            .iter()
            .zip(other.p.end_value())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        end.max(self.pi.sup_diff(&other.pi))
    }
}

/// Measure-driven backward fixed point for the adjoint.
pub fn solve_adjoint(
    problem: &dyn Problem,
    traj: &Trajectory,
    eta: &Measure,
    psi: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<AdjointState> {
    let d = problem.dims();
    let g = traj.grid();
    g.same(eta.grid())?;
    if eta.dim() != d.r || psi.len() != d.s() {
        return Err(Error::InvalidArgument(format!(
            "multiplier dims ({}, {}) for r = {}, s = {}",
            eta.dim(),
            psi.len(),
            d.r,
            d.s()
        )));
    }
    let n = g.cells();
    let w = g.weights();
    let lin = traj.linearization(problem);
    let eta_hat = eta.nodal_weights();
    let p_end = endpoint_lagrangian_grad(problem, traj.y0(), traj.yt(), psi)
        .rows(d.n, d.n)
        .iter()
        .copied()
        .collect::<Vec<f64>>();

    // source terms: smooth part and atomic part kept apart
    let mut smooth = vec![vec![0.0; d.n]; n + 1];
    let mut atomic = vec![vec![0.0; d.n]; n + 1];
    for k in 0..=n {
        let (u, y) = (traj.u.at(k), traj.y.at(k));
        let lg = problem.l_grad(u, y);
        for i in 0..d.n {
            smooth[k][i] = w[k] * lg[d.m + i];
        }
        if d.r > 0 {
            let gj = problem.g_jac(y);
            for c in 0..d.r {
                let a = eta.atom_component(k, c);
                let dens = eta_hat.get(k, c) - a;
                for i in 0..d.n {
                    smooth[k][i] += dens * gj[(c, i)];
                    atomic[k][i] += a * gj[(c, i)];
                }
            }
        }
    }
    let mut source: Vec<Vec<f64>> = (0..=n)
        .map(|k| smooth[k].iter().zip(&atomic[k]).map(|(a, b)| a + b).collect())
        .collect();
    source[n].iter_mut().zip(&p_end).for_each(|(a, b)| *a += b);

    let mut pi = source.clone();
    let mut change = f64::INFINITY;
    let mut converged = false;
    for _ in 0..max_iter {
        let mut next = source.clone();
        for k in 0..=n {
            for kp in k..=n {
                let wk = g.volterra_weight(kp, k);
                if wk != 0.0 {
                    lin.add_bt(kp, k, wk, &pi[kp], &mut next[k]);
                }
            }
        }
        change = next
            .iter()
            .flatten()
            .zip(pi.iter().flatten())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        pi = next;
        if change <= tol || !change.is_finite() {
            converged = change.is_finite();
            break;
        }
    }
    if !converged {
        return Err(Error::Divergence {
            what: "adjoint equation",
            iterations: max_iter,
            residual: change,
        });
    }

    // BV representation: dp = -(atoms) - (smooth densities)
    let mut dp = Measure::zero(g, d.n);
    for k in 0..=n {
        if atomic[k].iter().any(|x| *x != 0.0) {
            let neg: Vec<f64> = atomic[k].iter().map(|x| -x).collect();
            dp.add_atom(k, &neg);
        }
    }
    let sigma: Vec<Vec<f64>> = (0..=n)
        .map(|k| {
            (0..d.n)
                .map(|i| {
                    let terminal = if k == n { p_end[i] } else { 0.0 };
                    (pi[k][i] - atomic[k][i] - terminal) / w[k]
                })
                .collect()
        })
        .collect();
    for j in 0..n {
        let dens: Vec<f64> = (0..d.n).map(|i| -0.5 * (sigma[j][i] + sigma[j + 1][i])).collect();
        dp.set_density(j, &dens);
    }
    let p = BVPath::from_measure(&p_end, dp)?;
    let pi = Path::from_rows(g.clone(), PathKind::State, &pi)?;
    Ok(AdjointState { p, pi })
}

pub fn solve_adjoint_default(problem: &dyn Problem, traj: &Trajectory, eta: &Measure, psi: &[f64]) -> Result<AdjointState> {
    solve_adjoint(problem, traj, eta, psi, 1e-13 * (1.0 + traj.scale()), DEFAULT_MAX_ITER)
}

/// D_uH at every node, in the discrete-adjoint form.
pub fn stationarity_gradient(problem: &dyn Problem, traj: &Trajectory, adj: &AdjointState) -> Path {
    let d = problem.dims();
    let g = traj.grid();
    let w = g.weights();
    let lin = traj.linearization(problem);
    let mut out = Path::zeros(g, d.m, PathKind::Control);
    for j in 0..g.len() {
        let lg = problem.l_grad(traj.u.at(j), traj.y.at(j));
        let mut acc: Vec<f64> = (0..d.m).map(|i| lg[i]).collect();
        for k in j..g.len() {
            let wk = g.volterra_weight(k, j);
            if wk != 0.0 {
                lin.add_at(k, j, wk / w[j], adj.pi.at(k), &mut acc);
            }
        }
        out.at_mut(j).copy_from_slice(&acc);
    }
    out
}

/// D²_(u,y)² H at every node, in the discrete-adjoint form.
pub fn hamiltonian_hessians(problem: &dyn Problem, traj: &Trajectory, adj: &AdjointState) -> Vec<DMatrix<f64>> {
    let g = traj.grid();
    let w = g.weights();
    (0..g.len())
        .map(|j| {
            let (u, y) = (traj.u.at(j), traj.y.at(j));
            let mut h = problem.l_hess(u, y);
            for k in j..g.len() {
                let wk = g.volterra_weight(k, j);
                if wk == 0.0 {
                    continue;
                }
                let pk = adj.pi.at(k);
                if pk.iter().all(|x| *x == 0.0) {
                    continue;
                }
                for (c, hc) in problem.f_hess(g.t(k), g.t(j), u, y).iter().enumerate() {
                    if pk[c] != 0.0 {
                        h += hc * (wk / w[j] * pk[c]);
                    }
                }
            }
            h
        })
        .collect()
}

/// A Lagrange multiplier (dη, Ψ, p).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Multiplier {
    pub eta: Measure,
    pub psi: Vec<f64>,
    pub adjoint: AdjointState,
}

impl Multiplier {
    pub fn new(problem: &dyn Problem, traj: &Trajectory, eta: Measure, psi: Vec<f64>) -> Result<Self> {
        let adjoint = solve_adjoint_default(problem, traj, &eta, &psi)?;
        Ok(Multiplier { eta, psi, adjoint })
    }
}

/// |D_(u,y0) L(v, z0) - ∫ D_uH v - (p(0-) + D_y0 Φ[Ψ]) z0|, where the first
/// term is assembled from raw derivatives of cost and constraints along
/// (v, z[v, z0]).
pub fn duality_residual(problem: &dyn Problem, traj: &Trajectory, lambda: &Multiplier, v: &Path, z0: &[f64]) -> Result<f64> {
    let d = problem.dims();
    let g = traj.grid();
    let n = g.cells();
    let z = solve_linearized(problem, traj, v, z0)?;
    let w = g.weights();
    let mut lhs = 0.0;
    for k in 0..=n {
        let lg = problem.l_grad(traj.u.at(k), traj.y.at(k));
        lhs += w[k] * (dot(&lg.as_slice()[..d.m], v.at(k)) + dot(&lg.as_slice()[d.m..], z.at(k)));
    }
    let zz: Vec<f64> = [z0, z.at(n)].concat();
    lhs += dot(problem.phi_grad(traj.y0(), traj.yt()).as_slice(), &zz);
    if d.s() > 0 {
        let dphi = problem.big_phi_jac(traj.y0(), traj.yt()) * DVector::from_column_slice(&zz);
        lhs += dot(&lambda.psi, dphi.as_slice());
    }
    for i in 0..d.r {
        let gz = Path::from_fn(g, 1, PathKind::State, |k, _| {
            let row = problem.g_jac(traj.y.at(k)).row(i).iter().copied().collect::<Vec<_>>();
            vec![dot(&row, z.at(k))]
        });
        lhs += stieltjes(&gz, &lambda.eta, i)?;
    }
    let duh = stationarity_gradient(problem, traj, &lambda.adjoint);
    let mut rhs: f64 = (0..=n).map(|k| w[k] * dot(duh.at(k), v.at(k))).sum();
    let p0 = lambda.adjoint.p.start_value();
    let e = endpoint_lagrangian_grad(problem, traj.y0(), traj.yt(), &lambda.psi);
    rhs += (0..d.n).map(|i| (p0[i] + e[i]) * z0[i]).sum::<f64>();
    Ok((lhs - rhs).abs())
}
