//! Built-in problems with closed-form candidates.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{volterra_quad, Path, PathKind, TimeGrid};
use crate::problem::{ChainElement, ConstraintChain, DerivativeChain, Dims, Problem};

/// Scalar problems with kernel `f = u_s` (integrator) or
/// `f = e^{-δ(t-s)} u_s` (exponential memory), quadratic running cost
/// `½ a_uu u² + b_u u + ½ a_yy y² + c0`, terminal cost `½ w (yT - target)²`,
/// fixed initial state, optional constraint `y ≤ cap`, and endpoint
/// inequalities `a_i (1 - yT) ≤ 0`.
pub struct ScalarProblem {
    name: String,
    horizon: f64,
    delta: Option<f64>,
    a_uu: f64,
    b_u: f64,
    a_yy: f64,
    c0: f64,
    terminal_weight: f64,
    terminal_target: f64,
    y0: f64,
    cap: Option<f64>,
    endpoint_ineq: Vec<f64>,
    chain: DerivativeChain,
}

impl ScalarProblem {
    fn finish(mut self) -> Self {
        if let Some(cap) = self.cap {
            let delta = self.delta;
            let g0 = ChainElement::pointwise(move |_, y| y[0] - cap, |_, _| vec![0.0], |_, _| vec![1.0]);
            let g1 = match delta {
                None => ChainElement::pointwise(|u, _| u[0], |_, _| vec![1.0], |_, _| vec![0.0]),
                Some(d) => {
                    let mem = move |traj: &crate::dynamics::Trajectory, k: usize, x: &Path| {
                        let g = traj.grid();
                        let tk = g.t(k);
                        let s: Vec<f64> = (0..=k).map(|j| (-d * (tk - g.t(j))).exp() * x.get(j, 0)).collect();
                        d * volterra_quad(&s, g, k)
                    };
                    ChainElement::new(
                        move |traj, k, u, _| u[0] - mem(traj, k, &traj.u),
                        |_, _, _, _| vec![1.0],
                        |_, _, _, _| vec![0.0],
                        move |traj, k, _, _, v, _| -mem(traj, k, v),
                    )
                }
            };
            self.chain = DerivativeChain {
                constraints: vec![ConstraintChain {
                    order: 1,
                    levels: vec![g0, g1],
                }],
            };
        }
        self
    }

    fn kernel(&self, t: f64, s: f64) -> f64 {
        match self.delta {
            None => 1.0,
            Some(d) => (-d * (t - s)).exp(),
        }
    }
}

impl Problem for ScalarProblem {
    fn name(&self) -> &str {
        &self.name
    }

    fn dims(&self) -> Dims {
        Dims {
            m: 1,
            n: 1,
            r: usize::from(self.cap.is_some()),
            s_e: 1,
            s_i: self.endpoint_ineq.len(),
        }
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn lipschitz(&self) -> f64 {
        1.0 + self.delta.unwrap_or(0.0)
    }

    fn f(&self, t: f64, s: f64, u: &[f64], _y: &[f64]) -> DVector<f64> {
        DVector::from_element(1, self.kernel(t, s) * u[0])
    }

    fn f_u(&self, t: f64, s: f64, _u: &[f64], _y: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.kernel(t, s))
    }

    fn f_y(&self, _t: f64, _s: f64, _u: &[f64], _y: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(1, 1)
    }

    fn f_tau(&self, t: f64, s: f64, u: &[f64], _y: &[f64]) -> DVector<f64> {
        let d = self.delta.unwrap_or(0.0);
        DVector::from_element(1, -d * self.kernel(t, s) * u[0])
    }

    fn f_tau_u(&self, t: f64, s: f64, _u: &[f64], _y: &[f64]) -> DMatrix<f64> {
        let d = self.delta.unwrap_or(0.0);
        DMatrix::from_element(1, 1, -d * self.kernel(t, s))
    }

    fn l(&self, u: &[f64], y: &[f64]) -> f64 {
        0.5 * self.a_uu * u[0] * u[0] + self.b_u * u[0] + 0.5 * self.a_yy * y[0] * y[0] + self.c0
    }

    fn l_grad(&self, u: &[f64], y: &[f64]) -> DVector<f64> {
        DVector::from_vec(vec![self.a_uu * u[0] + self.b_u, self.a_yy * y[0]])
    }

    fn l_hess(&self, _u: &[f64], _y: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[self.a_uu, 0.0, 0.0, self.a_yy])
    }

    fn phi(&self, _y0: &[f64], yt: &[f64]) -> f64 {
        0.5 * self.terminal_weight * (yt[0] - self.terminal_target).powi(2)
    }

    fn phi_grad(&self, _y0: &[f64], yt: &[f64]) -> DVector<f64> {
        DVector::from_vec(vec![0.0, self.terminal_weight * (yt[0] - self.terminal_target)])
    }

    fn phi_hess(&self, _y0: &[f64], _yt: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, self.terminal_weight])
    }

    fn g(&self, y: &[f64]) -> DVector<f64> {
        match self.cap {
            Some(c) => DVector::from_element(1, y[0] - c),
            None => DVector::zeros(0),
        }
    }

    fn g_jac(&self, _y: &[f64]) -> DMatrix<f64> {
        match self.cap {
            Some(_) => DMatrix::from_element(1, 1, 1.0),
            None => DMatrix::zeros(0, 1),
        }
    }

    fn big_phi(&self, y0: &[f64], yt: &[f64]) -> DVector<f64> {
        let mut v = vec![y0[0] - self.y0];
        v.extend(self.endpoint_ineq.iter().map(|a| a * (1.0 - yt[0])));
        DVector::from_vec(v)
    }

    fn big_phi_jac(&self, _y0: &[f64], _yt: &[f64]) -> DMatrix<f64> {
        let s = 1 + self.endpoint_ineq.len();
        let mut j = DMatrix::zeros(s, 2);
        j[(0, 0)] = 1.0;
        for (i, a) in self.endpoint_ineq.iter().enumerate() {
            j[(1 + i, 1)] = -a;
        }
        j
    }

    fn chain(&self) -> &DerivativeChain {
        &self.chain
    }
}

/// y1' = y2, y2' = u written as a Volterra equation with a t-independent
/// kernel; cost ½∫u², y(0) = (0, 1), y(1) = (0, -1), constraint y1 ≤ L.
pub struct DoubleIntegrator {
    name: String,
    bound: f64,
    chain: DerivativeChain,
}

impl DoubleIntegrator {
    pub fn new(name: &str, bound: f64) -> Self {
        let g0 = ChainElement::pointwise(move |_, y| y[0] - bound, |_, _| vec![0.0], |_, _| vec![1.0, 0.0]);
        let g1 = ChainElement::pointwise(|_, y| y[1], |_, _| vec![0.0], |_, _| vec![0.0, 1.0]);
        let g2 = ChainElement::pointwise(|u, _| u[0], |_, _| vec![1.0], |_, _| vec![0.0, 0.0]);
        DoubleIntegrator {
            name: name.into(),
            bound,
            chain: DerivativeChain {
                constraints: vec![ConstraintChain {
                    order: 2,
                    levels: vec![g0, g1, g2],
                }],
            },
        }
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// Replaces the derivative chain, e.g. to exercise the consistency checks.
    pub fn with_chain(mut self, chain: DerivativeChain) -> Self {
        self.chain = chain;
        self
    }
}

impl Problem for DoubleIntegrator {
    fn name(&self) -> &str {
        &self.name
    }

    fn dims(&self) -> Dims {
        Dims {
            m: 1,
            n: 2,
            r: 1,
            s_e: 4,
            s_i: 0,
        }
    }

    fn horizon(&self) -> f64 {
        1.0
    }

    fn lipschitz(&self) -> f64 {
        1.0
    }

    fn f(&self, _t: f64, _s: f64, u: &[f64], y: &[f64]) -> DVector<f64> {
        DVector::from_vec(vec![y[1], u[0]])
    }

    fn f_u(&self, _t: f64, _s: f64, _u: &[f64], _y: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(2, 1, &[0.0, 1.0])
    }

    fn f_y(&self, _t: f64, _s: f64, _u: &[f64], _y: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])
    }

    fn l(&self, u: &[f64], _y: &[f64]) -> f64 {
        0.5 * u[0] * u[0]
    }

    fn l_grad(&self, u: &[f64], _y: &[f64]) -> DVector<f64> {
        DVector::from_vec(vec![u[0], 0.0, 0.0])
    }

    fn l_hess(&self, _u: &[f64], _y: &[f64]) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(3, 3);
        h[(0, 0)] = 1.0;
        h
    }

    fn phi(&self, _y0: &[f64], _yt: &[f64]) -> f64 {
        0.0
    }

    fn phi_grad(&self, _y0: &[f64], _yt: &[f64]) -> DVector<f64> {
        DVector::zeros(4)
    }

    fn phi_hess(&self, _y0: &[f64], _yt: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(4, 4)
    }

    fn g(&self, y: &[f64]) -> DVector<f64> {
        DVector::from_element(1, y[0] - self.bound)
    }

    fn g_jac(&self, _y: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0])
    }

    fn big_phi(&self, y0: &[f64], yt: &[f64]) -> DVector<f64> {
        DVector::from_vec(vec![y0[0], y0[1] - 1.0, yt[0], yt[1] + 1.0])
    }

    fn big_phi_jac(&self, _y0: &[f64], _yt: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(4, 4)
    }

    fn chain(&self) -> &DerivativeChain {
        &self.chain
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Reference {
    pub optimal_cost: f64,
    pub cost_source: &'static str,
    pub multiplier_structure: &'static str,
    pub is_optimal: bool,
}

pub struct RegistryEntry {
    pub name: &'static str,
    pub problem: Arc<dyn Problem>,
    pub candidate: fn(&TimeGrid) -> (Path, Vec<f64>),
    pub reference: Reference,
    pub recommended_cells: usize,
}

impl RegistryEntry {
    pub fn grid(&self, cells: usize) -> Result<TimeGrid> {
        TimeGrid::uniform(self.problem.horizon(), cells)
    }

    pub fn candidate_on(&self, grid: &TimeGrid) -> (Path, Vec<f64>) {
        (self.candidate)(grid)
    }
}

pub const NAMES: [&str; 6] = [
    "lq_free",
    "exp_memory",
    "bryson_denham_touch",
    "bryson_denham_arc",
    "degenerate_endpoint",
    "lq_saddle",
];

pub fn list() -> Vec<&'static str> {
    NAMES.to_vec()
}

/// Constraint level of the exponential-memory problem.
pub const EXP_MEMORY_CAP: f64 = 0.4;
pub const EXP_MEMORY_HORIZON: f64 = 2.0;

/// Entry time of the boundary arc of `exp_memory` and the coefficient B of
/// the unconstrained-arc control `u = 1 - B e^t`.
pub fn exp_memory_junction() -> (f64, f64) {
    let c = EXP_MEMORY_CAP;
    let a = 1.0 / (1.0 - c);
    let e = a - (a * a - 1.0).sqrt();
    (-e.ln(), (1.0 - c) * e)
}

fn scalar(name: &str) -> ScalarProblem {
    ScalarProblem {
        name: name.into(),
        horizon: 1.0,
        delta: None,
        a_uu: 1.0,
        b_u: 0.0,
        a_yy: 0.0,
        c0: 0.0,
        terminal_weight: 0.0,
        terminal_target: 0.0,
        y0: 0.0,
        cap: None,
        endpoint_ineq: vec![],
        chain: DerivativeChain::default(),
    }
}

fn constant_control(grid: &TimeGrid, c: f64) -> Path {
    Path::scalar(grid, PathKind::Control, |_| c)
}

/// Bryson–Denham optimal control for bound `l`; `None` in the intermediate
/// regime 1/6 < l < 1/4, which is not shipped.
pub fn bryson_denham_control(l: f64, t: f64) -> Option<f64> {
    if l >= 0.25 {
        return Some(-2.0);
    }
    if l > 1.0 / 6.0 {
        return None;
    }
    let e = 3.0 * l;
    let s = if t <= 0.5 { t } else { 1.0 - t };
    Some(if s < e { -(2.0 / e) * (1.0 - s / e) } else { 0.0 })
}

/// Bryson–Denham control for L = 1/8 plus a correction of order Δt² on the
/// entry and exit arcs, chosen so that the discrete state lies exactly on the
/// bound along the arc. Grids without a node at 3L get the plain closed form.
pub fn bryson_denham_arc_candidate(g: &TimeGrid) -> (Path, Vec<f64>) {
    let l = 0.125;
    let e = 3.0 * l;
    let y0 = vec![0.0, 1.0];
    let base = |t: f64| bryson_denham_control(l, t).unwrap_or(0.0);
    let bump = |t: f64| {
        let s = t.min(1.0 - t);
        if s < e {
            (2.0 * std::f64::consts::PI * s / e).sin()
        } else {
            0.0
        }
    };
    let Some(ke) = g.node_index(e) else {
        return (Path::scalar(g, PathKind::Control, base), y0);
    };
    // discrete y1 at the entry node for y2 = y2(0) + ∫u
    let entry_height = |u: &dyn Fn(f64) -> f64, y20: f64| {
        let y2: Vec<f64> = (0..=ke)
            .map(|k| y20 + (0..=k).map(|j| g.volterra_weight(k, j) * u(g.t(j))).sum::<f64>())
            .collect();
        (0..=ke).map(|j| g.volterra_weight(ke, j) * y2[j]).sum::<f64>()
    };
    let alpha = (l - entry_height(&base, 1.0)) / entry_height(&bump, 0.0);
    (Path::scalar(g, PathKind::Control, |t| base(t) + alpha * bump(t)), y0)
}

pub fn load(name: &str) -> Result<RegistryEntry> {
    let entry = match name {
        "lq_free" => {
            let mut p = scalar("lq_free");
            p.terminal_weight = 1.0;
            p.terminal_target = 1.0;
            RegistryEntry {
                name: "lq_free",
                problem: Arc::new(p.finish()),
                candidate: |g| (constant_control(g, 0.5), vec![0.0]),
                reference: Reference {
                    optimal_cost: 0.25,
                    cost_source: "closed form u = 1/2",
                    multiplier_structure: "no running constraint; unique endpoint multiplier",
                    is_optimal: true,
                },
                recommended_cells: 400,
            }
        }
        "exp_memory" => {
            let mut p = scalar("exp_memory");
            p.horizon = EXP_MEMORY_HORIZON;
            p.delta = Some(1.0);
            p.b_u = -1.0;
            p.c0 = 0.5;
            p.cap = Some(EXP_MEMORY_CAP);
            let (t1, b) = exp_memory_junction();
            let c = EXP_MEMORY_CAP;
            let cost = 0.25 * b * b * ((2.0 * t1).exp() - 1.0) + 0.5 * (1.0 - c).powi(2) * (EXP_MEMORY_HORIZON - t1);
            RegistryEntry {
                name: "exp_memory",
                problem: Arc::new(p.finish()),
                candidate: |g| {
                    let (t1, b) = exp_memory_junction();
                    (
                        Path::scalar(g, PathKind::Control, |t| if t < t1 { 1.0 - b * t.exp() } else { EXP_MEMORY_CAP }),
                        vec![0.0],
                    )
                },
                reference: Reference {
                    optimal_cost: cost,
                    cost_source: "closed form, boundary arc [ln 3, 2]",
                    multiplier_structure: "density 1 - cap on the terminal arc plus an atom 1 - cap at T",
                    is_optimal: true,
                },
                recommended_cells: 400,
            }
        }
        "bryson_denham_touch" => RegistryEntry {
            name: "bryson_denham_touch",
            problem: Arc::new(DoubleIntegrator::new("bryson_denham_touch", 0.25)),
            candidate: |g| (constant_control(g, -2.0), vec![0.0, 1.0]),
            reference: Reference {
                optimal_cost: 2.0,
                cost_source: "closed form u = -2, y1 = t(1 - t)",
                multiplier_structure: "touch point at t = 1/2 with zero atom",
                is_optimal: true,
            },
            recommended_cells: 400,
        },
        "bryson_denham_arc" => RegistryEntry {
            name: "bryson_denham_arc",
            problem: Arc::new(DoubleIntegrator::new("bryson_denham_arc", 0.125)),
            candidate: bryson_denham_arc_candidate,
            reference: Reference {
                optimal_cost: 4.0 / (9.0 * 0.125),
                cost_source: "closed form 4/(9L), arc [3L, 1 - 3L]",
                multiplier_structure: "atoms 2/(9L^2) at both junctions, no density on the arc",
                is_optimal: true,
            },
            recommended_cells: 400,
        },
        "degenerate_endpoint" => {
            let mut p = scalar("degenerate_endpoint");
            p.endpoint_ineq = vec![1.0, 2.0];
            RegistryEntry {
                name: "degenerate_endpoint",
                problem: Arc::new(p.finish()),
                candidate: |g| (constant_control(g, 1.0), vec![0.0]),
                reference: Reference {
                    optimal_cost: 0.5,
                    cost_source: "closed form u = 1",
                    multiplier_structure: "Ψ1 + 2Ψ2 = 1, a segment of endpoint multipliers",
                    is_optimal: true,
                },
                recommended_cells: 400,
            }
        }
        "lq_saddle" => {
            let mut p = scalar("lq_saddle");
            p.a_yy = -4.0;
            RegistryEntry {
                name: "lq_saddle",
                problem: Arc::new(p.finish()),
                candidate: |g| (constant_control(g, 0.0), vec![0.0]),
                reference: Reference {
                    optimal_cost: f64::NEG_INFINITY,
                    cost_source: "u = 0 is stationary; y = a sin(πt/2) lowers the cost",
                    multiplier_structure: "zero multiplier",
                    is_optimal: false,
                },
                recommended_cells: 400,
            }
        }
        _ => return Err(Error::NotFound(format!("registry entry '{name}'"))),
    };
    Ok(entry)
}

