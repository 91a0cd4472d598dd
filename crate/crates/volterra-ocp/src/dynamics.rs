//! Picard solvers for the state equation and its first and second
//! linearizations on a trapezoid grid.

use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Path, PathKind, TimeGrid};
use crate::problem::Problem;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 200;
/// Relative stopping tolerance for the linear fixed points.
const LINEAR_TOL: f64 = 1e-14;

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Trajectory {
    pub u: Path,
    pub y: Path,
    pub residual: f64,
    #[serde(skip)]
    cache: Mutex<Option<(usize, Arc<Linearization>)>>,
}

impl Clone for Trajectory {
    fn clone(&self) -> Self {
        Trajectory {
            u: self.u.clone(),
            y: self.y.clone(),
            residual: self.residual,
            cache: Mutex::new(None),
        }
    }
}

impl Trajectory {
    pub fn new(u: Path, y: Path, residual: f64) -> Self {
        Trajectory {
            u,
            y,
            residual,
            cache: Mutex::new(None),
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        self.u.grid()
    }

    pub fn y0(&self) -> &[f64] {
        self.y.at(0)
    }

    pub fn yt(&self) -> &[f64] {
        self.y.at(self.grid().cells())
    }

    /// 1 + |u|_∞ + |y|_∞, the scale used by relative tolerances.
    pub fn scale(&self) -> f64 {
        1.0 + self.u.sup_norm() + self.y.sup_norm()
    }

    /// Jacobians of the kernel at every node pair, computed once per problem.
    pub fn linearization(&self, problem: &dyn Problem) -> Arc<Linearization> {
        let key = problem as *const dyn Problem as *const () as usize;
        let mut c = self.cache.lock().unwrap();
        if let Some((k, lin)) = c.as_ref() {
            if *k == key {
                return lin.clone();
            }
        }
        let lin = Arc::new(Linearization::new(problem, self));
        *c = Some((key, lin.clone()));
        lin
    }

    /// Residual of the discrete state equation.
    pub fn state_residual(&self, problem: &dyn Problem) -> f64 {
        let next = picard_map(problem, &self.u, self.y0(), &self.y);
        next.sup_diff(&self.y)
    }
}

/// `D_u f(t_k, t_j)` and `D_y f(t_k, t_j)` for all j ≤ k.
#[derive(Debug)]
pub struct Linearization {
    m: usize,
    n: usize,
    a: Vec<f64>,
    b: Vec<f64>,
}

fn pair(k: usize, j: usize) -> usize {
    k * (k + 1) / 2 + j
}

impl Linearization {
    fn new(problem: &dyn Problem, traj: &Trajectory) -> Self {
        let d = problem.dims();
        let g = traj.grid();
        let np = g.len() * (g.len() + 1) / 2;
        let mut a = vec![0.0; np * d.n * d.m];
        let mut b = vec![0.0; np * d.n * d.n];
        for k in 0..g.len() {
            for j in 0..=k {
                let (u, y) = (traj.u.at(j), traj.y.at(j));
                let p = pair(k, j);
                let fu = problem.f_u(g.t(k), g.t(j), u, y);
                let fy = problem.f_y(g.t(k), g.t(j), u, y);
                a[p * d.n * d.m..(p + 1) * d.n * d.m].copy_from_slice(fu.as_slice());
                b[p * d.n * d.n..(p + 1) * d.n * d.n].copy_from_slice(fy.as_slice());
            }
        }
        Linearization { m: d.m, n: d.n, a, b }
    }

    /// Column-major n x m block.
    pub fn a(&self, k: usize, j: usize) -> &[f64] {
        let s = self.n * self.m;
        &self.a[pair(k, j) * s..(pair(k, j) + 1) * s]
    }

    /// Column-major n x n block.
    pub fn b(&self, k: usize, j: usize) -> &[f64] {
        let s = self.n * self.n;
        &self.b[pair(k, j) * s..(pair(k, j) + 1) * s]
    }

    /// out += w * A_kj x
    pub fn add_a(&self, k: usize, j: usize, w: f64, x: &[f64], out: &mut [f64]) {
        let blk = self.a(k, j);
        for c in 0..self.m {
            let s = w * x[c];
            if s != 0.0 {
                for r in 0..self.n {
                    out[r] += blk[c * self.n + r] * s;
                }
            }
        }
    }

    /// out += w * B_kj x
    pub fn add_b(&self, k: usize, j: usize, w: f64, x: &[f64], out: &mut [f64]) {
        let blk = self.b(k, j);
        for c in 0..self.n {
            let s = w * x[c];
            if s != 0.0 {
                for r in 0..self.n {
                    out[r] += blk[c * self.n + r] * s;
                }
            }
        }
    }

    /// out += w * row A_kj (row vector times matrix, length m)
    pub fn add_at(&self, k: usize, j: usize, w: f64, row: &[f64], out: &mut [f64]) {
        let blk = self.a(k, j);
        for c in 0..self.m {
            let mut s = 0.0;
            for r in 0..self.n {
                s += row[r] * blk[c * self.n + r];
            }
            out[c] += w * s;
        }
    }

    /// out += w * row B_kj (length n)
    pub fn add_bt(&self, k: usize, j: usize, w: f64, row: &[f64], out: &mut [f64]) {
        let blk = self.b(k, j);
        for c in 0..self.n {
            let mut s = 0.0;
            for r in 0..self.n {
                s += row[r] * blk[c * self.n + r];
            }
            out[c] += w * s;
        }
    }
}

fn picard_map(problem: &dyn Problem, u: &Path, y0: &[f64], y: &Path) -> Path {
    let g = u.grid();
    let mut out = Path::zeros(g, y0.len(), PathKind::State);
    for k in 0..g.len() {
        let tk = g.t(k);
        let mut acc = y0.to_vec();
        for j in 0..=k {
            let w = g.volterra_weight(k, j);
            if w == 0.0 {
                continue;
            }
            let fv = problem.f(tk, g.t(j), u.at(j), y.at(j));
            acc.iter_mut().zip(fv.iter()).for_each(|(a, b)| *a += w * b);
        }
        out.at_mut(k).copy_from_slice(&acc);
    }
    out
}

/// Picard iteration y <- y0 + ∫_0^t f(t, s, u_s, y_s) ds on the grid of `u`.
/// The returned trajectory satisfies the discrete equation to `opts.tol`.
pub fn solve_state(problem: &dyn Problem, u: &Path, y0: &[f64], opts: SolveOptions) -> Result<Trajectory> {
    let d = problem.dims();
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    if u.dim() != d.m || y0.len() != d.n {
        return Err(Error::InvalidArgument(format!(
            "expected control dim {} and state dim {}, got {} and {}",
            d.m,
            d.n,
            u.dim(),
            y0.len()
        )));
    }
    let mut uc = u.clone();
    if uc.kind() != PathKind::Control {
        uc = Path::from_fn(u.grid(), d.m, PathKind::Control, |k, _| u.at(k).to_vec());
    }
    let mut y = Path::from_fn(u.grid(), d.n, PathKind::State, |_, _| y0.to_vec());
    let mut change = f64::INFINITY;
    for _ in 0..opts.max_iter {
        let next = picard_map(problem, &uc, y0, &y);
        change = next.sup_diff(&y);
        if !change.is_finite() {
            break;
        }
        if change <= opts.tol {
            return Ok(Trajectory::new(uc, y, change));
        }
        y = next;
    }
    Err(Error::Divergence {
        what: "state equation",
        iterations: opts.max_iter,
        residual: change,
    })
}

fn linear_fixed_point(
    lin: &Linearization,
    grid: &TimeGrid,
    base: Vec<Vec<f64>>,
    what: &'static str,
) -> Result<Path> {
    let n = base[0].len();
    let mut z = Path::zeros(grid, n, PathKind::State);
    for (k, b) in base.iter().enumerate() {
        z.at_mut(k).copy_from_slice(b);
    }
    let mut change = f64::INFINITY;
    for _ in 0..DEFAULT_MAX_ITER {
        let mut next = Path::zeros(grid, n, PathKind::State);
        for k in 0..grid.len() {
            let mut acc = base[k].clone();
            for j in 0..=k {
                let w = grid.volterra_weight(k, j);
                if w != 0.0 {
                    lin.add_b(k, j, w, z.at(j), &mut acc);
                }
            }
            next.at_mut(k).copy_from_slice(&acc);
        }
        change = next.sup_diff(&z);
        let size = next.sup_norm();
        z = next;
        if change <= LINEAR_TOL * size || change == 0.0 {
            return Ok(z);
        }
        if !change.is_finite() {
            break;
        }
    }
    Err(Error::Divergence {
        what,
        iterations: DEFAULT_MAX_ITER,
        residual: change,
    })
}

/// z_t = z0 + ∫_0^t D_(u,y) f(t, s, u_s, y_s)(v_s, z_s) ds.
pub fn solve_linearized(problem: &dyn Problem, traj: &Trajectory, v: &Path, z0: &[f64]) -> Result<Path> {
    let d = problem.dims();
    traj.grid().same(v.grid())?;
    if v.dim() != d.m || z0.len() != d.n {
        return Err(Error::InvalidArgument("direction dimensions".into()));
    }
    let lin = traj.linearization(problem);
    let g = traj.grid();
    let base: Vec<Vec<f64>> = (0..g.len())
        .map(|k| {
            let mut acc = z0.to_vec();
            for j in 0..=k {
                let w = g.volterra_weight(k, j);
                if w != 0.0 {
                    lin.add_a(k, j, w, v.at(j), &mut acc);
                }
            }
            acc
        })
        .collect();
    linear_fixed_point(&lin, g, base, "linearized state")
}

fn quad_form(h: &DMatrix<f64>, xi: &[f64]) -> f64 {
    let x = DVector::from_column_slice(xi);
    x.dot(&(h * &x))
}

/// z²_t = ∫_0^t (D_y f z²_s + D²_(u,y)² f (v_s, z_s)²) ds.
pub fn solve_second_linearized(problem: &dyn Problem, traj: &Trajectory, v: &Path, z0: &[f64]) -> Result<Path> {
    let d = problem.dims();
    let z = solve_linearized(problem, traj, v, z0)?;
    let g = traj.grid();
    let lin = traj.linearization(problem);
    let xi: Vec<Vec<f64>> = (0..g.len()).map(|j| [v.at(j), z.at(j)].concat()).collect();
    let base: Vec<Vec<f64>> = (0..g.len())
        .map(|k| {
            let mut acc = vec![0.0; d.n];
            for j in 0..=k {
                let w = g.volterra_weight(k, j);
                if w == 0.0 {
                    continue;
                }
                let hs = problem.f_hess(g.t(k), g.t(j), traj.u.at(j), traj.y.at(j));
                for (c, h) in hs.iter().enumerate() {
                    acc[c] += w * quad_form(h, &xi[j]);
                }
            }
            acc
        })
        .collect();
    linear_fixed_point(&lin, g, base, "second-order linearized state")
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FdConsistency {
    pub first: f64,
    pub second: f64,
}

/// Compares z and z² with forward and central differences of the state map.
pub fn fd_consistency(
    problem: &dyn Problem,
    u: &Path,
    y0: &[f64],
    v: &Path,
    z0: &[f64],
    h: f64,
) -> Result<FdConsistency> {
    let opts = SolveOptions {
        tol: 1e-14,
        max_iter: 400,
    };
    let base = solve_state(problem, u, y0, opts)?;
    let z = solve_linearized(problem, &base, v, z0)?;
    let z2 = solve_second_linearized(problem, &base, v, z0)?;
    let shift = |s: f64| -> Result<Path> {
        let up = u.axpy(s, v);
        let y0p: Vec<f64> = y0.iter().zip(z0).map(|(a, b)| a + s * b).collect();
        Ok(solve_state(problem, &up, &y0p, opts)?.y)
    };
    let plus = shift(h)?;
    let minus = shift(-h)?;
    let mut first = 0.0f64;
    let mut second = 0.0f64;
    for k in 0..u.grid().len() {
        for i in 0..z.dim() {
            let y = base.y.get(k, i);
            first = first.max(((plus.get(k, i) - y) / h - z.get(k, i)).abs());
            let sd = (plus.get(k, i) - 2.0 * y + minus.get(k, i)) / (h * h);
            second = second.max((sd - z2.get(k, i)).abs());
        }
    }
    Ok(FdConsistency { first, second })
}

/// Discrete cost Σ W_k ℓ(u_k, y_k) + φ(y0, yT).
pub fn cost(problem: &dyn Problem, traj: &Trajectory) -> f64 {
    let w = traj.grid().weights();
    let run: f64 = (0..w.len()).map(|k| w[k] * problem.l(traj.u.at(k), traj.y.at(k))).sum();
    run + problem.phi(traj.y0(), traj.yt())
}
