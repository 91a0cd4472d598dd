//! Problem data: dynamics kernel, costs, constraints and their analytic
//! derivatives, plus the derivative chains g^(0), ..., g^(q) of each running
//! state constraint.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{solve_linearized, Trajectory};
use crate::error::{Error, Result};
use crate::grid::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// control dimension
    pub m: usize,
    /// state dimension
    pub n: usize,
    /// running state constraints
    pub r: usize,
    pub s_e: usize,
    pub s_i: usize,
}

impl Dims {
    pub fn s(&self) -> usize {
        self.s_e + self.s_i
    }
}

/// A problem
///
/// ```text
/// min  ∫ ℓ(u, y) dt + φ(y0, yT)
/// s.t. y_t = y0 + ∫_0^t f(t, s, u_s, y_s) ds
///      g(y_t) ≤ 0,  Φ^E(y0, yT) = 0,  Φ^I(y0, yT) ≤ 0
/// ```
///
/// Hessians of `f` are returned per state component as `(m+n) x (m+n)`
/// matrices ordered `(u, y)`. Endpoint functions take `(y0, yT)` and their
/// derivatives are ordered the same way. Methods with default bodies return
/// zero and must be overridden whenever the true derivative is not zero.
pub trait Problem: Send + Sync {
    fn name(&self) -> &str;
    fn dims(&self) -> Dims;
    fn horizon(&self) -> f64;
    /// Lipschitz bound on f and D_(u,y) f.
    fn lipschitz(&self) -> f64;

    fn f(&self, t: f64, s: f64, u: &[f64], y: &[f64]) -> DVector<f64>;
    fn f_u(&self, t: f64, s: f64, u: &[f64], y: &[f64]) -> DMatrix<f64>;
    fn f_y(&self, t: f64, s: f64, u: &[f64], y: &[f64]) -> DMatrix<f64>;
    fn f_hess(&self, _t: f64, _s: f64, _u: &[f64], _y: &[f64]) -> Vec<DMatrix<f64>> {
        let d = self.dims();
        vec![DMatrix::zeros(d.m + d.n, d.m + d.n); d.n]
    }
    /// Derivative of f in its first argument.
    fn f_tau(&self, _t: f64, _s: f64, _u: &[f64], _y: &[f64]) -> DVector<f64> {
        DVector::zeros(self.dims().n)
    }
    fn f_tau_u(&self, _t: f64, _s: f64, _u: &[f64], _y: &[f64]) -> DMatrix<f64> {
        let d = self.dims();
        DMatrix::zeros(d.n, d.m)
    }
    fn f_tau_y(&self, _t: f64, _s: f64, _u: &[f64], _y: &[f64]) -> DMatrix<f64> {
        let d = self.dims();
        DMatrix::zeros(d.n, d.n)
    }
    fn f_tau_hess(&self, _t: f64, _s: f64, _u: &[f64], _y: &[f64]) -> Vec<DMatrix<f64>> {
        let d = self.dims();
        vec![DMatrix::zeros(d.m + d.n, d.m + d.n); d.n]
    }

    fn l(&self, u: &[f64], y: &[f64]) -> f64;
    /// Gradient ordered `(u, y)`.
    fn l_grad(&self, u: &[f64], y: &[f64]) -> DVector<f64>;
    fn l_hess(&self, u: &[f64], y: &[f64]) -> DMatrix<f64>;

    fn phi(&self, y0: &[f64], yt: &[f64]) -> f64;
    fn phi_grad(&self, y0: &[f64], yt: &[f64]) -> DVector<f64>;
    fn phi_hess(&self, y0: &[f64], yt: &[f64]) -> DMatrix<f64>;

    fn g(&self, _y: &[f64]) -> DVector<f64> {
        DVector::zeros(0)
    }
    fn g_jac(&self, _y: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(0, self.dims().n)
    }
    fn g_hess(&self, _y: &[f64]) -> Vec<DMatrix<f64>> {
        let d = self.dims();
        vec![DMatrix::zeros(d.n, d.n); d.r]
    }

    /// Endpoint constraints, equalities first.
    fn big_phi(&self, _y0: &[f64], _yt: &[f64]) -> DVector<f64> {
        DVector::zeros(0)
    }
    fn big_phi_jac(&self, _y0: &[f64], _yt: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(0, 2 * self.dims().n)
    }
    fn big_phi_hess(&self, _y0: &[f64], _yt: &[f64]) -> Vec<DMatrix<f64>> {
        let d = self.dims();
        vec![DMatrix::zeros(2 * d.n, 2 * d.n); d.s()]
    }

    fn chain(&self) -> &DerivativeChain;
}

type EvalFn = dyn Fn(&Trajectory, usize, &[f64], &[f64]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&Trajectory, usize, &[f64], &[f64]) -> Vec<f64> + Send + Sync;
type PathFn = dyn Fn(&Trajectory, usize, &[f64], &[f64], &Path, &Path) -> f64 + Send + Sync;

/// An element h(t, ũ, ỹ, u, y) of the ring of time functions, evaluated at a
/// grid node `k`. The path arguments enter through the trajectory; their
/// derivative acts on direction paths `(v, z)` and must only read samples at
/// nodes `0..=k`.
pub struct ChainElement {
    eval: Box<EvalFn>,
    d_ut: Box<GradFn>,
    d_yt: Box<GradFn>,
    d_paths: Box<PathFn>,
}

impl ChainElement {
    pub fn new(
        eval: impl Fn(&Trajectory, usize, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
        d_ut: impl Fn(&Trajectory, usize, &[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
        d_yt: impl Fn(&Trajectory, usize, &[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
        d_paths: impl Fn(&Trajectory, usize, &[f64], &[f64], &Path, &Path) -> f64 + Send + Sync + 'static,
    ) -> Self {
        ChainElement {
            eval: Box::new(eval),
            d_ut: Box::new(d_ut),
            d_yt: Box::new(d_yt),
            d_paths: Box::new(d_paths),
        }
    }

    /// An element depending only on the pointwise arguments (ũ, ỹ).
    pub fn pointwise(
        eval: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
        d_ut: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
        d_yt: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        ChainElement::new(
            move |_, _, u, y| eval(u, y),
            move |_, _, u, y| d_ut(u, y),
            move |_, _, u, y| d_yt(u, y),
            |_, _, _, _, _, _| 0.0,
        )
    }

    pub fn eval(&self, traj: &Trajectory, k: usize, ut: &[f64], yt: &[f64]) -> f64 {
        (self.eval)(traj, k, ut, yt)
    }

    pub fn d_ut(&self, traj: &Trajectory, k: usize, ut: &[f64], yt: &[f64]) -> Vec<f64> {
        (self.d_ut)(traj, k, ut, yt)
    }

    pub fn d_yt(&self, traj: &Trajectory, k: usize, ut: &[f64], yt: &[f64]) -> Vec<f64> {
        (self.d_yt)(traj, k, ut, yt)
    }

    pub fn d_paths(&self, traj: &Trajectory, k: usize, ut: &[f64], yt: &[f64], v: &Path, z: &Path) -> f64 {
        (self.d_paths)(traj, k, ut, yt, v, z)
    }

    /// Value along the trajectory, ũ = u_k and ỹ = y_k.
    pub fn along(&self, traj: &Trajectory, k: usize) -> f64 {
        self.eval(traj, k, traj.u.at(k), traj.y.at(k))
    }

    /// D̂h = D_(ỹ,u,y) h applied to (z_k, v, z).
    pub fn hat(&self, traj: &Trajectory, k: usize, v: &Path, z: &Path) -> f64 {
        let (ut, yt) = (traj.u.at(k), traj.y.at(k));
        dot(&self.d_yt(traj, k, ut, yt), z.at(k)) + self.d_paths(traj, k, ut, yt, v, z)
    }

    /// D_(ũ,ỹ,u,y) h applied to (v_k, z_k, v, z).
    pub fn full(&self, traj: &Trajectory, k: usize, v: &Path, z: &Path) -> f64 {
        let (ut, yt) = (traj.u.at(k), traj.y.at(k));
        dot(&self.d_ut(traj, k, ut, yt), v.at(k)) + self.hat(traj, k, v, z)
    }

    /// D_ũ h along the trajectory.
    pub fn m_row(&self, traj: &Trajectory, k: usize) -> Vec<f64> {
        self.d_ut(traj, k, traj.u.at(k), traj.y.at(k))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Chain g_i^(0), ..., g_i^(q_i) for one running constraint.
pub struct ConstraintChain {
    pub order: usize,
    pub levels: Vec<ChainElement>,
}

#[derive(Default)]
pub struct DerivativeChain {
    pub constraints: Vec<ConstraintChain>,
}

impl DerivativeChain {
    pub fn order(&self, i: usize) -> usize {
        self.constraints[i].order
    }

    pub fn top(&self, i: usize) -> &ChainElement {
        let c = &self.constraints[i];
        &c.levels[c.order]
    }
}

pub const MAX_ORDER_DEPTH: usize = 4;

/// Default finite-difference tolerance, 10 Δt².
pub fn fd_tol(traj: &Trajectory) -> f64 {
    let dt = traj.grid().dt_max();
    10.0 * dt * dt
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderVerdict {
    pub constraint: usize,
    pub order: usize,
    /// max |D_ũ g^(j)| over probes, j < q
    pub max_lower_control_sensitivity: f64,
    /// min |D_ũ g^(q)| over probes
    pub min_top_control_sensitivity: f64,
    /// central-difference mismatch per level j < q
    pub fd_residuals: Vec<f64>,
    pub fd_tolerance: f64,
}

fn central_diff(vals: &[f64], traj: &Trajectory, k: usize) -> f64 {
    let g = traj.grid();
    (vals[k + 1] - vals[k - 1]) / (g.t(k + 1) - g.t(k - 1))
}

/// Confirms the declared order of every constraint chain: the control slot
/// is absent below the top level at `samples` random probes, and each level
/// is the time derivative of the one below along `traj`.
pub fn verify_order(
    problem: &dyn Problem,
    traj: &Trajectory,
    samples: usize,
    tol: f64,
    seed: u64,
) -> Result<Vec<OrderVerdict>> {
    let chain = problem.chain();
    let d = problem.dims();
    if chain.constraints.len() != d.r {
        return Err(Error::IncompleteProblem(format!(
            "{} chains for {} constraints",
            chain.constraints.len(),
            d.r
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_nodes = traj.grid().len();
    let mut out = Vec::new();
    for (i, c) in chain.constraints.iter().enumerate() {
        if c.order == 0 || c.order > MAX_ORDER_DEPTH || c.levels.len() != c.order + 1 {
            return Err(Error::InfiniteOrder {
                constraint: i,
                depth: MAX_ORDER_DEPTH,
            });
        }
        let mut lower = 0.0f64;
        let mut top = f64::INFINITY;
        for _ in 0..samples {
            let k = rng.gen_range(0..n_nodes);
            let ut: Vec<f64> = (0..d.m).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let yt = traj.y.at(k);
            for (j, lev) in c.levels.iter().enumerate() {
                let s = norm(&lev.d_ut(traj, k, &ut, yt));
                if j < c.order {
                    lower = lower.max(s);
                } else {
                    top = top.min(s);
                }
            }
        }
        if lower > tol {
            let level = (0..c.order)
                .find(|&j| {
                    (0..n_nodes).any(|k| norm(&c.levels[j].d_ut(traj, k, traj.u.at(k), traj.y.at(k))) > tol)
                })
                .unwrap_or(0);
            return Err(Error::OrderOverstated {
                constraint: i,
                declared: c.order,
                level,
            });
        }
        if top <= tol {
            return Err(Error::InfiniteOrder {
                constraint: i,
                depth: c.order,
            });
        }
        let mut fd = Vec::new();
        for j in 0..c.order {
            let vals: Vec<f64> = (0..n_nodes).map(|k| c.levels[j].along(traj, k)).collect();
            let next: Vec<f64> = (0..n_nodes).map(|k| c.levels[j + 1].along(traj, k)).collect();
            let scale = next.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let res = (1..n_nodes - 1)
                .map(|k| (central_diff(&vals, traj, k) - next[k]).abs())
                .fold(0.0, f64::max);
            let bound = tol * (1.0 + scale);
            if res > bound {
                return Err(Error::ChainInconsistent {
                    constraint: i,
                    level: j,
                    residual: res,
                    tol: bound,
                });
            }
            fd.push(res);
        }
        out.push(OrderVerdict {
            constraint: i,
            order: c.order,
            max_lower_control_sensitivity: lower,
            min_top_control_sensitivity: top,
            fd_residuals: fd,
            fd_tolerance: tol,
        });
    }
    Ok(out)
}

/// Max over constraints, levels j < q and interior nodes of
/// |d/dt D̂g^(j)(z_t, v, z) - D g^(j+1)(v_t, z_t, v, z)|.
pub fn verify_commutation(problem: &dyn Problem, traj: &Trajectory, v: &Path, z0: &[f64]) -> Result<f64> {
    let z = solve_linearized(problem, traj, v, z0)?;
    Ok(commutation_residual(problem.chain(), traj, v, &z))
}

pub fn commutation_residual(chain: &DerivativeChain, traj: &Trajectory, v: &Path, z: &Path) -> f64 {
    let n_nodes = traj.grid().len();
    let mut worst = 0.0f64;
    for c in &chain.constraints {
        for j in 0..c.order {
            let vals: Vec<f64> = (0..n_nodes).map(|k| c.levels[j].hat(traj, k, v, z)).collect();
            for k in 1..n_nodes - 1 {
                let rhs = c.levels[j + 1].full(traj, k, v, z);
                worst = worst.max((central_diff(&vals, traj, k) - rhs).abs());
            }
        }
    }
    worst
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}
