//! Constructive direction synthesis: truncation, minimum-norm connections
//! between jets, vanish-near-contact extensions, pseudo-inverse tracking of
//! the top chain level, and the density ladder that approximates a strict
//! critical direction by bounded radial ones.
//!
//! All function-space norms are grid norms: trapezoid L², sup over nodes.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dynamics::{solve_linearized, Trajectory};
use crate::error::{Error, Result};
use crate::grid::{Path, PathKind, TimeGrid};
use crate::problem::Problem;
use crate::second_order::{radial_witness, Direction};
use crate::structure::{m_matrix, NodeRange, StructureReport, Window};

/// Largest connection order accepted by [`connect`].
pub const MAX_CONNECTION_ORDER: usize = 6;

/// Pointwise radial clamp to norm `k`.
pub fn truncate(phi: &Path, k: f64) -> Path {
    let mut out = phi.clone();
    for j in 0..phi.grid().len() {
        let n = phi.pointwise_norm(j);
        if n > k {
            let s = if n > 0.0 { k / n } else { 0.0 };
            for x in out.at_mut(j) {
                *x *= s;
            }
        }
    }
    out
}

/// Derivatives of orders 0..q-1 at a point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Jet {
    pub t: f64,
    pub derivs: Vec<f64>,
}

impl Jet {
    pub fn new(t: f64, derivs: Vec<f64>) -> Self {
        Jet { t, derivs }
    }

    pub fn zero(t: f64, q: usize) -> Self {
        Jet { t, derivs: vec![0.0; q] }
    }

    pub fn order(&self) -> usize {
        self.derivs.len()
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Gauss–Legendre nodes and weights on [-1, 1] (Golub–Welsch).
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let jac = DMatrix::from_fn(n, n, |i, j| {
        if i.abs_diff(j) == 1 {
            let k = i.max(j) as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], 2.0 * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Gram matrix ∫ a_j a_k over an interval of length `len`, with
/// a_j(s) = (t₂ - s)^{q-1-j} / (q-1-j)!.
pub fn connection_gram(q: usize, len: f64) -> DMatrix<f64> {
    DMatrix::from_fn(q, q, |j, k| {
        let (p, r) = (q - 1 - j, q - 1 - k);
        len.powi((p + r + 1) as i32) / ((p + r + 1) as f64 * factorial(p) * factorial(r))
    })
}

/// Orthonormal Legendre polynomials on [t₁, t₂], orders 0..q-1, at s.
fn legendre(q: usize, t1: f64, t2: f64, s: f64) -> Vec<f64> {
    let len = t2 - t1;
    let x = 2.0 * (s - t1) / len - 1.0;
    let mut p = vec![0.0; q];
    for k in 0..q {
        p[k] = match k {
            0 => 1.0,
            1 => x,
            _ => ((2 * k - 1) as f64 * x * p[k - 1] - (k - 1) as f64 * p[k - 2]) / k as f64,
        };
    }
    p.iter().enumerate().map(|(k, v)| v * ((2 * k + 1) as f64 / len).sqrt()).collect()
}

/// ⟨a_j, φ_k⟩ for the orthonormal Legendre basis φ_k of [t₁, t₂].
fn moment_matrix(q: usize, t1: f64, t2: f64) -> DMatrix<f64> {
    let (xs, ws) = gauss_legendre(q + 1);
    let len = t2 - t1;
    let mut a = DMatrix::zeros(q, q);
    for (x, w) in xs.iter().zip(&ws) {
        let s = t1 + 0.5 * len * (x + 1.0);
        let phi = legendre(q, t1, t2, s);
        for j in 0..q {
            let p = q - 1 - j;
            let aj = (t2 - s).powi(p as i32) / factorial(p);
            for k in 0..q {
                a[(j, k)] += 0.5 * len * w * aj * phi[k];
            }
        }
    }
    a
}

/// A W^{q,∞} connection on [t₁, t₂]: x^(q) = û + Σ c_j a_j with the jets of
/// x prescribed at both ends. The correction lives in span{a_j}, the
/// polynomials of degree below q, and is stored in the orthonormal Legendre
/// basis of [t₁, t₂], which keeps the q×q solve well conditioned. Values
/// returned by [`Connection::eval`] leave out the base û, which is zero for
/// [`connect`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Connection {
    pub q: usize,
    pub t1: f64,
    pub t2: f64,
    pub left: Vec<f64>,
    /// Legendre coefficients of the correction.
    pub coef: Vec<f64>,
}

impl Connection {
    /// The minimum-norm correction of the q-th derivative at t.
    pub fn correction(&self, t: f64) -> f64 {
        legendre(self.q, self.t1, self.t2, t).iter().zip(&self.coef).map(|(p, c)| p * c).sum()
    }

    /// x^(j)(t) for j ≤ q.
    pub fn eval(&self, t: f64, j: usize) -> f64 {
        let q = self.q;
        if j == q {
            return self.correction(t);
        }
        let dt = t - self.t1;
        let poly: f64 = (j..q).map(|i| self.left[i] * dt.powi((i - j) as i32) / factorial(i - j)).sum();
        if dt <= 0.0 {
            return poly;
        }
        // ∫_{t₁}^t (t-s)^{q-1-j}/(q-1-j)! u(s) ds, exact for the polynomial u
        let (xs, ws) = gauss_legendre(q + 1);
        let p = q - 1 - j;
        let integral: f64 = xs
            .iter()
            .zip(&ws)
            .map(|(x, w)| {
                let s = self.t1 + 0.5 * dt * (x + 1.0);
                0.5 * dt * w * (t - s).powi(p as i32) / factorial(p) * self.correction(s)
            })
            .sum();
        poly + integral
    }

    pub fn gram(&self) -> DMatrix<f64> {
        connection_gram(self.q, self.t2 - self.t1)
    }

    /// Adds the minimum-norm correction that moves the right jet by `delta`.
    pub fn adjust(&mut self, delta: &[f64]) -> Result<()> {
        let d = solve_moments(self.q, self.t1, self.t2, DVector::from_column_slice(delta))?;
        for (c, x) in self.coef.iter_mut().zip(d.iter()) {
            *c += x;
        }
        Ok(())
    }
}

fn solve_moments(q: usize, t1: f64, t2: f64, gamma: DVector<f64>) -> Result<DVector<f64>> {
    moment_matrix(q, t1, t2)
        .lu()
        .solve(&gamma)
        .filter(|d| d.iter().all(|x| x.is_finite()))
        .ok_or_else(|| Error::IllConditioned(format!("connection of order {q} on length {:e}", t2 - t1)))
}

/// Minimum-norm connection with zero base: the q-th derivative is the
/// smallest L² function whose integral carries `left` into `right`.
pub fn connect(q: usize, left: &Jet, right: &Jet) -> Result<Connection> {
    connect_with_base_moments(q, left, right, &vec![0.0; q])
}

/// As [`connect`] with a base û given through its moments ⟨a_j, û⟩: the
/// correction is A(A*A)^{-1}(γ - A*û).
pub fn connect_with_base_moments(q: usize, left: &Jet, right: &Jet, moments: &[f64]) -> Result<Connection> {
    if q == 0 {
        return Err(Error::InvalidArgument("connection order must be positive".into()));
    }
    if q > MAX_CONNECTION_ORDER {
        let g = connection_gram(q, 1.0);
        let sv = g.singular_values();
        let cond = sv.max() / sv.min();
        return Err(Error::IllConditioned(format!(
            "connection order {q} exceeds {MAX_CONNECTION_ORDER}; unit Gram condition number {cond:.3e}"
        )));
    }
    if left.order() != q || right.order() != q || moments.len() != q {
        return Err(Error::InvalidArgument(format!("jets must carry {q} derivatives")));
    }
    if !(right.t > left.t) {
        return Err(Error::InvalidArgument(format!("empty connection interval [{}, {}]", left.t, right.t)));
    }
    if left.derivs.iter().chain(&right.derivs).any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("non-finite jet".into()));
    }
    let len = right.t - left.t;
    let gamma = DVector::from_fn(q, |j, _| {
        let carried: f64 = (j..q).map(|i| left.derivs[i] * len.powi((i - j) as i32) / factorial(i - j)).sum();
        right.derivs[j] - carried - moments[j]
    });
    let coef = solve_moments(q, left.t, right.t, gamma)?;
    Ok(Connection {
        q,
        t1: left.t,
        t2: right.t,
        left: left.derivs.clone(),
        coef: coef.iter().copied().collect(),
    })
}

/// Sum over derivative orders of the L² norms of `a - b`, for profiles
/// carrying derivative samples as components.
pub fn sobolev_distance(a: &Path, b: &Path) -> f64 {
    let w = a.grid().weights();
    (0..a.dim())
        .map(|j| (0..w.len()).map(|k| w[k] * (a.get(k, j) - b.get(k, j)).powi(2)).sum::<f64>().sqrt())
        .sum()
}

fn distance_to(ranges: &[NodeRange], t: f64) -> f64 {
    ranges
        .iter()
        .map(|r| {
            if t < r.t_start {
                r.t_start - t
            } else if t > r.t_end {
                t - r.t_end
            } else {
                0.0
            }
        })
        .fold(f64::INFINITY, f64::min)
}

/// Replaces the profile `x` (derivative samples 0..=q as components) by zero
/// within `delta` of `contact`, reconnects it to `x` over the next `delta`
/// band, and keeps it elsewhere. The jets of `x` at the contact boundary
/// must vanish.
pub fn vanish_extension(x: &Path, contact: &[NodeRange], delta: f64, tol: f64) -> Result<Path> {
    let g = x.grid();
    let q = x.dim().checked_sub(1).filter(|q| *q > 0).ok_or_else(|| {
        Error::InvalidArgument("profile needs derivative samples of orders 0..=q with q ≥ 1".into())
    })?;
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("collar width {delta} must be positive")));
    }
    let scale = 1.0 + x.sup_norm();
    for r in contact {
        for k in [r.start, r.end] {
            if let Some(j) = (0..q).find(|&j| x.get(k, j).abs() > tol * scale) {
                return Err(Error::InvalidArgument(format!(
                    "jet of order {j} is {:.3e} at the contact boundary t = {}",
                    x.get(k, j),
                    g.t(k)
                )));
            }
        }
    }
    if contact.is_empty() {
        return Ok(x.clone());
    }
    #[derive(Clone, Copy, PartialEq)]
    enum Class {
        Keep,
        Zero,
        Blend,
    }
    let class: Vec<Class> = (0..g.len())
        .map(|k| {
            let d = distance_to(contact, g.t(k));
            if d <= delta * (1.0 + 1e-12) {
                Class::Zero
            } else if d >= 2.0 * delta {
                Class::Keep
            } else {
                Class::Blend
            }
        })
        .collect();
    let jet = |k: usize| -> Jet {
        match class[k] {
            Class::Zero => Jet::zero(g.t(k), q),
            _ => Jet::new(g.t(k), (0..q).map(|j| x.get(k, j)).collect()),
        }
    };
    let mut out = Path::from_fn(g, q + 1, x.kind(), |k, _| match class[k] {
        Class::Zero => vec![0.0; q + 1],
        _ => x.at(k).to_vec(),
    });
    let mut k = 0;
    while k < g.len() {
        if class[k] != Class::Blend {
            k += 1;
            continue;
        }
        let a = k;
        while k < g.len() && class[k] == Class::Blend {
            k += 1;
        }
        let b = k - 1;
        let left = (a > 0).then(|| jet(a - 1));
        let right = (b + 1 < g.len()).then(|| jet(b + 1));
        match (left, right) {
            (Some(l), Some(r)) => {
                let c = connect(q, &l, &r)?;
                for n in a..=b {
                    for j in 0..=q {
                        out.set(n, j, c.eval(g.t(n), j));
                    }
                }
            }
            // one-sided band at the end of the horizon: Taylor continuation
            (Some(anchor), None) | (None, Some(anchor)) => {
                for n in a..=b {
                    let dt = g.t(n) - anchor.t;
                    for j in 0..q {
                        let v: f64 = (j..q).map(|i| anchor.derivs[i] * dt.powi((i - j) as i32) / factorial(i - j)).sum();
                        out.set(n, j, v);
                    }
                    out.set(n, q, 0.0);
                }
            }
            (None, None) => unreachable!("a grid has at least two nodes"),
        }
    }
    Ok(out)
}

/// Target for one constraint: samples of b_i and its derivatives up to
/// order q_i (components 0..=q_i) on the grid, prescribed on `nodes`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintTarget {
    pub constraint: usize,
    pub order: usize,
    pub samples: Path,
    /// Sorted node indices where g_i'(ȳ)z must equal b_i.
    pub nodes: Vec<usize>,
    /// Use the samples outside `nodes` as the base guess of connections.
    #[serde(default)]
    pub base_outside: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TargetProfile {
    pub targets: Vec<ConstraintTarget>,
}

impl TargetProfile {
    /// b_i(t) with derivatives from `f(i, t)` (orders 0..=q_i), prescribed on
    /// the ε-neighbourhood of each constraint in contact.
    pub fn on_eps(grid: &TimeGrid, report: &StructureReport, f: impl Fn(usize, f64) -> Vec<f64>) -> Self {
        let targets = report
            .constraints
            .iter()
            .filter(|c| !c.eps_nodes.is_empty())
            .map(|c| ConstraintTarget {
                constraint: c.index,
                order: c.order,
                samples: Path::from_fn(grid, c.order + 1, PathKind::State, |_, t| f(c.index, t)),
                nodes: c.eps_nodes.clone(),
                base_outside: false,
            })
            .collect();
        TargetProfile { targets }
    }

    pub fn zero(grid: &TimeGrid, report: &StructureReport) -> Self {
        Self::on_eps(grid, report, |i, _| vec![0.0; report.constraints[i].order + 1])
    }

    /// Largest mismatch between a central difference of derivative j and
    /// the sample of derivative j + 1, over interior runs of prescribed nodes.
    pub fn consistency(&self) -> f64 {
        let mut worst = 0.0f64;
        for tg in &self.targets {
            let g = tg.samples.grid();
            for w in tg.nodes.windows(3) {
                if w[2] != w[0] + 2 {
                    continue;
                }
                let k = w[1];
                let span = g.t(k + 1) - g.t(k - 1);
                for j in 0..tg.order {
                    let fd = (tg.samples.get(k + 1, j) - tg.samples.get(k - 1, j)) / span;
                    worst = worst.max((fd - tg.samples.get(k, j + 1)).abs());
                }
            }
        }
        worst
    }

    /// Checks shapes, grids and finite-difference consistency to `c_dt`·Δt.
    pub fn validate(&self, grid: &TimeGrid, report: &StructureReport, c_dt: f64) -> Result<()> {
        let mut scale = 1.0f64;
        for tg in &self.targets {
            tg.samples.grid().same(grid)?;
            let Some(c) = report.constraints.get(tg.constraint) else {
                return Err(Error::InvalidTarget(format!("no running constraint {}", tg.constraint)));
            };
            if tg.order != c.order || tg.samples.dim() != c.order + 1 {
                return Err(Error::InvalidTarget(format!(
                    "constraint {} has order {} but the target carries {} derivative samples",
                    tg.constraint,
                    c.order,
                    tg.samples.dim()
                )));
            }
            if tg.samples.raw().iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidTarget(format!("non-finite samples for constraint {}", tg.constraint)));
            }
            scale = scale.max(tg.samples.sup_norm());
        }
        let mismatch = self.consistency();
        if mismatch > c_dt * grid.dt_max() * scale {
            return Err(Error::InvalidTarget(format!(
                "derivative samples disagree with finite differences by {mismatch:.3e}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrackOptions {
    pub max_sweeps: usize,
    /// Residual tolerance relative to 1 + max |h|.
    pub rtol: f64,
}

impl Default for TrackOptions {
    fn default() -> Self {
        TrackOptions {
            max_sweeps: 200,
            rtol: 1e-11,
        }
    }
}

/// Prescribed top-level values at one node.
#[derive(Debug, Clone)]
struct NodePlan {
    k: usize,
    rows: Vec<usize>,
    h: Vec<f64>,
    w: Vec<f64>,
    pinv: DMatrix<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackResult {
    pub v: Path,
    pub z: Path,
    pub sweeps: usize,
    pub damped: bool,
    /// max |M_t v_t + N_t - h_t| over tracked nodes
    pub residual: f64,
    /// max over tracked nodes of ‖(M_t M_tᵀ)^{-1}‖
    pub pinv_norm: f64,
}

fn pseudo_inverse(problem: &dyn Problem, traj: &Trajectory, rows: &[usize], k: usize) -> Result<(DMatrix<f64>, f64)> {
    let m = m_matrix(problem, traj, rows, k);
    let mmt = &m * m.transpose();
    let inv = mmt
        .clone()
        .try_inverse()
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::IllConditioned(format!("M_t M_tᵀ is singular at t = {}", traj.grid().t(k))))?;
    let norm = SymmetricEigen::new(inv.clone()).eigenvalues.amax();
    Ok((m.transpose() * inv, norm))
}

fn top_hat(problem: &dyn Problem, traj: &Trajectory, i: usize, k: usize, v: &Path, z: &Path) -> f64 {
    problem.chain().top(i).hat(traj, k, v, z)
}

fn top_full(problem: &dyn Problem, traj: &Trajectory, i: usize, k: usize, v: &Path, z: &Path) -> f64 {
    problem.chain().top(i).full(traj, k, v, z)
}

/// Picard sweeps v_t ← M_t⁺(h_t - N_t(z[v], v)) + w_t on the planned nodes.
fn sweep(problem: &dyn Problem, traj: &Trajectory, plan: &[NodePlan], v0: Path, z0: &[f64], opts: TrackOptions) -> Result<TrackResult> {
    let mut v = v0;
    let hmax = plan.iter().flat_map(|p| p.h.iter()).fold(0.0f64, |a, x| a.max(x.abs()));
    let tol = opts.rtol * (1.0 + hmax);
    let pinv_norm = 0.0;
    let mut theta = 1.0;
    let mut prev = f64::INFINITY;
    let mut sweeps = 0;
    loop {
        let z = solve_linearized(problem, traj, &v, z0)?;
        let mut residual = 0.0f64;
        let mut updates = Vec::with_capacity(plan.len());
        for p in plan {
            let nvec: Vec<f64> = p.rows.iter().map(|&i| top_hat(problem, traj, i, p.k, &v, &z)).collect();
            for (r, &i) in p.rows.iter().enumerate() {
                let full = top_full(problem, traj, i, p.k, &v, &z);
                residual = residual.max((full - p.h[r]).abs());
            }
            let rhs = DVector::from_fn(p.rows.len(), |r, _| p.h[r] - nvec[r]);
            let vk = &p.pinv * rhs;
            updates.push(vk.iter().zip(&p.w).map(|(a, b)| a + b).collect::<Vec<f64>>());
        }
        if residual <= tol || plan.is_empty() {
            return Ok(TrackResult {
                v,
                z,
                sweeps,
                damped: theta < 1.0,
                residual,
                pinv_norm,
            });
        }
        if sweeps >= opts.max_sweeps {
            return Err(Error::Divergence {
                what: "pseudo-inverse tracking",
                iterations: sweeps,
                residual,
            });
        }
        if sweeps == 1 && residual > prev && theta == 1.0 {
            theta = 0.5;
        }
        prev = residual;
        for (p, upd) in plan.iter().zip(updates) {
            for (x, u) in v.at_mut(p.k).iter_mut().zip(upd) {
                *x += theta * (u - *x);
            }
        }
        sweeps += 1;
    }
}

fn build_plan(
    problem: &dyn Problem,
    traj: &Trajectory,
    nodes: &[(usize, Vec<usize>, Vec<f64>)],
    kernel: Option<(&Path, f64)>,
) -> Result<(Vec<NodePlan>, f64)> {
    let m = problem.dims().m;
    let mut pinv_max = 0.0f64;
    let mut plan = Vec::with_capacity(nodes.len());
    for (k, rows, h) in nodes {
        let (pinv, norm) = pseudo_inverse(problem, traj, rows, *k)?;
        pinv_max = pinv_max.max(norm);
        let w = match kernel {
            Some((src, bound)) => {
                let mm = m_matrix(problem, traj, rows, *k);
                let s = DVector::from_column_slice(src.at(*k));
                let mut w = &s - &pinv * (&mm * &s);
                let n = w.norm();
                if n > bound {
                    w *= if n > 0.0 { bound / n } else { 0.0 };
                }
                w.iter().copied().collect()
            }
            None => vec![0.0; m],
        };
        plan.push(NodePlan {
            k: *k,
            rows: rows.clone(),
            h: h.clone(),
            w,
            pinv,
        });
    }
    Ok((plan, pinv_max))
}

/// Solves M_t v_t + N_t(z[v]_t, v, z[v]) = h_t on the window for the
/// constraints `rows`, with v = v_prefix outside it. `h[r]` holds one value
/// per window node; `w`, if given, is added at every node and must lie in
/// ker M_t.
pub fn track(
    problem: &dyn Problem,
    traj: &Trajectory,
    window: &Window,
    rows: &[usize],
    h: &[Vec<f64>],
    w: Option<&Path>,
    v_prefix: &Path,
    z0: &[f64],
    opts: TrackOptions,
) -> Result<TrackResult> {
    let len = window.end - window.start + 1;
    if h.len() != rows.len() || h.iter().any(|x| x.len() != len) {
        return Err(Error::InvalidArgument(format!("h needs {} rows of {len} samples", rows.len())));
    }
    let nodes: Vec<(usize, Vec<usize>, Vec<f64>)> = (window.start..=window.end)
        .map(|k| (k, rows.to_vec(), h.iter().map(|r| r[k - window.start]).collect()))
        .collect();
    let (mut plan, pinv_max) = build_plan(problem, traj, &nodes, None)?;
    if let Some(w) = w {
        for p in &mut plan {
            p.w = w.at(p.k).to_vec();
        }
    }
    let mut r = sweep(problem, traj, &plan, v_prefix.clone(), z0, opts)?;
    r.pinv_norm = pinv_max;
    Ok(r)
}

/// Discrete jet (g_i^(j) linearized, j < q) of g_i'(ȳ)z at node k.
fn discrete_jet(problem: &dyn Problem, traj: &Trajectory, i: usize, q: usize, k: usize, v: &Path, z: &Path) -> Vec<f64> {
    let levels = &problem.chain().constraints[i].levels;
    (0..q).map(|j| levels[j].full(traj, k, v, z)).collect()
}

/// A connection gap of one constraint: nodes a..=b with anchors a-1 and,
/// unless trailing, b+1.
#[derive(Debug, Clone)]
struct Gap {
    target: usize,
    a: usize,
    b: usize,
    right: Option<Vec<f64>>,
    conn: Option<Connection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesisOptions {
    pub track: TrackOptions,
    pub max_defect_iterations: usize,
    /// Jet-matching tolerance relative to 1 + max |target|.
    pub jet_rtol: f64,
    /// Finite-difference consistency constant for target validation.
    pub consistency_c: f64,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions {
            track: TrackOptions::default(),
            max_defect_iterations: 40,
            jet_rtol: 1e-10,
            consistency_c: 50.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintResidual {
    pub constraint: usize,
    /// max |g_i'(ȳ)z - b_i| over the prescribed nodes
    pub residual: f64,
    pub nodes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesisResult {
    pub v: Path,
    pub z: Path,
    pub residual: f64,
    pub per_constraint: Vec<ConstraintResidual>,
    pub tracked_nodes: usize,
    pub gaps: usize,
    pub sweeps: usize,
    pub damped: bool,
    pub defect_iterations: usize,
    /// Largest jet mismatch left at a gap end.
    pub jet_mismatch: f64,
    pub gamma: Option<f64>,
    /// max over tracked nodes of ‖(M_t M_tᵀ)^{-1}‖ γ², at most 1.
    pub pinv_bound: f64,
}

/// v with g_i'(ȳ)z[v, z0] = b_i on the prescribed nodes, built window by
/// window: gaps inside each ε₀-neighbourhood are bridged by minimum-norm
/// connections, and the top chain level is tracked through the
/// pseudo-inverse of M_t.
pub fn synthesize_control(
    problem: &dyn Problem,
    traj: &Trajectory,
    report: &StructureReport,
    target: &TargetProfile,
    z0: &[f64],
    opts: &SynthesisOptions,
) -> Result<SynthesisResult> {
    target.validate(traj.grid(), report, opts.consistency_c)?;
    synthesize_inner(problem, traj, report, target, z0, None, None, opts)
}

#[allow(clippy::too_many_arguments)]
fn synthesize_inner(
    problem: &dyn Problem,
    traj: &Trajectory,
    report: &StructureReport,
    target: &TargetProfile,
    z0: &[f64],
    fill: Option<&Path>,
    kernel: Option<(&Path, f64)>,
    opts: &SynthesisOptions,
) -> Result<SynthesisResult> {
    let d = problem.dims();
    let g = traj.grid();
    let nn = g.len();
    if z0.len() != d.n {
        return Err(Error::InvalidArgument(format!("z0 has length {}, expected {}", z0.len(), d.n)));
    }
    let targeted: Vec<&ConstraintTarget> = target.targets.iter().filter(|t| !t.nodes.is_empty()).collect();
    if !targeted.is_empty() {
        if !report.a4.holds {
            return Err(Error::NotApplicable(format!(
                "synthesis needs a strictly feasible initial state and no entry at T ({})",
                report.a4.diagnostic.clone().unwrap_or_default()
            )));
        }
        if !report.a1_holds {
            return Err(Error::NotApplicable("finitely many junctions and reducible touch points required".into()));
        }
        if report.a3_gamma.is_none_or(|x| !(x > 0.0)) {
            return Err(Error::NotApplicable(format!("M_t is not surjective (gamma = {:?})", report.a3_gamma)));
        }
    }

    // which targets act at each node, and where gaps sit
    let mut active: Vec<Vec<usize>> = vec![Vec::new(); nn];
    let mut prescribed: Vec<Vec<bool>> = Vec::new();
    for (ti, tg) in targeted.iter().enumerate() {
        let c = report
            .constraints
            .get(tg.constraint)
            .ok_or_else(|| Error::InvalidTarget(format!("no running constraint {}", tg.constraint)))?;
        if tg.order != c.order || tg.samples.dim() != c.order + 1 {
            return Err(Error::InvalidTarget(format!("order mismatch for constraint {}", tg.constraint)));
        }
        if let Some(&k) = tg.nodes.iter().find(|&&k| !c.in_eps0(k)) {
            return Err(Error::InvalidTarget(format!(
                "constraint {} is prescribed at t = {} outside its ε₀-neighbourhood",
                tg.constraint,
                g.t(k)
            )));
        }
        let mut mask = vec![false; nn];
        for &k in &tg.nodes {
            mask[k] = true;
        }
        for &k in &c.eps0_nodes {
            active[k].push(ti);
        }
        prescribed.push(mask);
    }

    let mut gaps: Vec<Gap> = Vec::new();
    for (ti, tg) in targeted.iter().enumerate() {
        let c = &report.constraints[tg.constraint];
        let q = tg.order;
        let comps: Vec<(usize, usize)> = runs(&c.eps0_nodes);
        for (s, e) in comps {
            if s == 0 {
                return Err(Error::NotApplicable(format!("constraint {} is near its boundary at t = 0", tg.constraint)));
            }
            let mut k = s;
            while k <= e {
                if prescribed[ti][k] {
                    k += 1;
                    continue;
                }
                let a = k;
                while k <= e && !prescribed[ti][k] {
                    k += 1;
                }
                let b = k - 1;
                let right = (b < e).then(|| (0..q).map(|j| tg.samples.get(b + 1, j)).collect());
                gaps.push(Gap {
                    target: ti,
                    a,
                    b,
                    right,
                    conn: None,
                });
            }
        }
    }

    let base_at = |ti: usize, k: usize| -> f64 {
        let tg = targeted[ti];
        if prescribed[ti][k] || tg.base_outside {
            tg.samples.get(k, tg.order)
        } else {
            0.0
        }
    };
    let gap_of = |ti: usize, k: usize, gaps: &[Gap]| -> Option<usize> {
        gaps.iter().position(|gp| gp.target == ti && gp.a <= k && k <= gp.b)
    };

    let mut v = fill.cloned().unwrap_or_else(|| Path::zeros(g, d.m, PathKind::Control));
    let gamma = report.a3_gamma;
    let mut sweeps = 0;
    let mut damped = false;
    let mut defect_iterations = 0;
    let mut jet_mismatch = 0.0f64;
    let jet_scale = 1.0 + targeted.iter().map(|t| t.samples.sup_norm()).fold(0.0, f64::max);
    let mut pinv_max = 0.0f64;
    let mut result: Option<TrackResult> = None;

    for iter in 0..=opts.max_defect_iterations {
        let nodes: Vec<(usize, Vec<usize>, Vec<f64>)> = (0..nn)
            .filter(|&k| !active[k].is_empty())
            .map(|k| {
                let rows: Vec<usize> = active[k].iter().map(|&ti| targeted[ti].constraint).collect();
                let h = active[k]
                    .iter()
                    .map(|&ti| {
                        let base = base_at(ti, k);
                        match gap_of(ti, k, &gaps).and_then(|gi| gaps[gi].conn.as_ref()) {
                            Some(conn) => base + conn.correction(g.t(k)),
                            None => base,
                        }
                    })
                    .collect();
                (k, rows, h)
            })
            .collect();
        let (plan, pm) = build_plan(problem, traj, &nodes, kernel)?;
        pinv_max = pm;
        let r = sweep(problem, traj, &plan, v.clone(), z0, opts.track)?;
        sweeps += r.sweeps;
        damped |= r.damped;
        v = r.v.clone();

        // jet defects at gap ends
        jet_mismatch = 0.0;
        let mut updates: Vec<(usize, Connection)> = Vec::new();
        for (gi, gp) in gaps.iter().enumerate() {
            let Some(right) = &gp.right else { continue };
            let tg = targeted[gp.target];
            let q = tg.order;
            let jet = discrete_jet(problem, traj, tg.constraint, q, gp.b + 1, &r.v, &r.z);
            let defect: Vec<f64> = right.iter().zip(&jet).map(|(a, b)| a - b).collect();
            jet_mismatch = jet_mismatch.max(defect.iter().fold(0.0, |m, x| m.max(x.abs())));
            let conn = match &gp.conn {
                None => {
                    // first pass: the connection from the realized left jet
                    let left = Jet::new(
                        g.t(gp.a - 1),
                        discrete_jet(problem, traj, tg.constraint, q, gp.a - 1, &r.v, &r.z),
                    );
                    let right_jet = Jet::new(g.t(gp.b + 1), right.clone());
                    let moments = base_moments(g, gp, q, |k| base_at(gp.target, k));
                    connect_with_base_moments(q, &left, &right_jet, &moments)?
                }
                Some(c) => {
                    let mut c = c.clone();
                    c.adjust(&defect)?;
                    c
                }
            };
            updates.push((gi, conn));
        }
        let first = gaps.iter().any(|gp| gp.right.is_some() && gp.conn.is_none());
        result = Some(r);
        if !first && jet_mismatch <= opts.jet_rtol * jet_scale {
            break;
        }
        if iter == opts.max_defect_iterations || updates.is_empty() {
            break;
        }
        for (gi, c) in updates {
            gaps[gi].conn = Some(c);
        }
        defect_iterations += 1;
    }
    let r = result.expect("at least one tracking pass");

    // a target prescribed right at the entry of its ε₀-neighbourhood must
    // agree with the prefix there
    for (ti, tg) in targeted.iter().enumerate() {
        let c = &report.constraints[tg.constraint];
        for (s, _) in runs(&c.eps0_nodes) {
            if prescribed[ti][s] {
                let jet = discrete_jet(problem, traj, tg.constraint, tg.order, s, &r.v, &r.z);
                let worst = (0..tg.order).map(|j| (jet[j] - tg.samples.get(s, j)).abs()).fold(0.0, f64::max);
                if worst > 1e-6 * jet_scale {
                    return Err(Error::InvalidTarget(format!(
                        "constraint {} is prescribed at the entry t = {} where the prefix jet differs by {worst:.3e}",
                        tg.constraint,
                        g.t(s)
                    )));
                }
            }
        }
    }

    let mut per = Vec::new();
    let mut residual = 0.0f64;
    for tg in &targeted {
        let i = tg.constraint;
        let res = tg
            .nodes
            .iter()
            .map(|&k| (gz(problem, traj, i, k, &r.z) - tg.samples.get(k, 0)).abs())
            .fold(0.0, f64::max);
        residual = residual.max(res);
        per.push(ConstraintResidual {
            constraint: i,
            residual: res,
            nodes: tg.nodes.len(),
        });
    }
    Ok(SynthesisResult {
        tracked_nodes: active.iter().filter(|a| !a.is_empty()).count(),
        gaps: gaps.len(),
        v: r.v,
        z: r.z,
        residual,
        per_constraint: per,
        sweeps,
        damped,
        defect_iterations,
        jet_mismatch,
        gamma,
        pinv_bound: gamma.map_or(0.0, |x| pinv_max * x * x),
    })
}

/// ⟨a_j, û⟩ by the trapezoid rule over the anchors and the gap nodes.
fn base_moments(g: &TimeGrid, gp: &Gap, q: usize, base: impl Fn(usize) -> f64) -> Vec<f64> {
    let t2 = g.t(gp.b + 1);
    (0..q)
        .map(|j| {
            let p = q - 1 - j;
            let a = |k: usize| (t2 - g.t(k)).powi(p as i32) / factorial(p) * base(k);
            (gp.a - 1..=gp.b).map(|k| 0.5 * g.h(k) * (a(k) + a(k + 1))).sum()
        })
        .collect()
}

fn gz(problem: &dyn Problem, traj: &Trajectory, i: usize, k: usize, z: &Path) -> f64 {
    let row = problem.g_jac(traj.y.at(k));
    (0..z.dim()).map(|c| row[(i, c)] * z.get(k, c)).sum()
}

fn runs(nodes: &[usize]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &k in nodes {
        match out.last_mut() {
            Some((_, e)) if *e + 1 == k => *e = k,
            _ => out.push((k, k)),
        }
    }
    out
}

/// Linearized values of the equality and active inequality endpoint rows.
fn endpoint_values(problem: &dyn Problem, traj: &Trajectory, report: &StructureReport, z: &Path) -> Vec<f64> {
    let d = problem.dims();
    let jac = problem.big_phi_jac(traj.y0(), traj.yt());
    let phi = problem.big_phi(traj.y0(), traj.yt());
    let zz: Vec<f64> = [z.at(0), z.at(z.grid().len() - 1)].concat();
    (0..d.s())
        .filter(|&r| r < d.s_e || phi[r] >= -report.tol_active)
        .map(|r| (0..2 * d.n).map(|c| jac[(r, c)] * zz[c]).sum())
        .collect()
}

/// Cosine modes per control component, zero off `free`.
fn endpoint_modes(g: &TimeGrid, m: usize, per_component: usize, free: &[usize]) -> Vec<Path> {
    let (a, b) = (g.t(free[0]), g.t(*free.last().expect("nonempty")));
    let span = (b - a).max(g.dt_max());
    let mut mask = vec![false; g.len()];
    for &k in free {
        mask[k] = true;
    }
    let mut out = Vec::new();
    for comp in 0..m {
        for f in 0..per_component {
            out.push(Path::from_fn(g, m, PathKind::Control, |k, t| {
                let mut x = vec![0.0; m];
                if mask[k] {
                    x[comp] = (PI * f as f64 * (t - a) / span).cos();
                }
                x
            }));
        }
    }
    out
}

/// Profile of x̄_i = g_i'(ȳ)z̄ with its chain derivatives, orders 0..=q_i.
pub fn direction_profile(problem: &dyn Problem, traj: &Trajectory, i: usize, v: &Path, z: &Path) -> Result<Path> {
    let chain = problem
        .chain()
        .constraints
        .get(i)
        .ok_or_else(|| Error::IncompleteProblem(format!("no derivative chain for constraint {i}")))?;
    let q = chain.order;
    Ok(Path::from_fn(traj.grid(), q + 1, PathKind::State, |k, _| {
        (0..=q).map(|j| chain.levels[j].full(traj, k, v, z)).collect()
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LadderStep {
    pub level: usize,
    /// Truncation bound.
    pub bound: f64,
    /// Collar width δ on which g'(ȳ)z[v] vanishes.
    pub delta: f64,
    pub v: Path,
    /// ‖v - v̄‖₂
    pub distance: f64,
    pub truncation_active: bool,
    pub sup_norm: f64,
    /// max |g'(ȳ)z[v]| within δ of the contact sets
    pub collar_max: f64,
    pub radial: bool,
    pub sigma: Option<f64>,
    pub synthesis_residual: f64,
    /// max |Φ'(z[v]) - Φ'(z̄)| over the active endpoint rows
    pub endpoint_defect: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityLadder {
    pub steps: Vec<LadderStep>,
    /// Each step improves on the last or the ladder has stabilized.
    pub improving: bool,
    pub tol: f64,
}

/// Tolerance for "g'(ȳ)z = 0" on a grid, max(1e-6, 10Δt²) scaled.
pub fn strict_tol(traj: &Trajectory) -> f64 {
    let dt = traj.grid().dt_max();
    1e-6f64.max(10.0 * dt * dt) * traj.scale()
}

/// Bounded radial approximations of a strict critical direction: at level
/// l the target g'(ȳ)z̄ is cut to zero on a collar of width ε 2^-(l+2), v̄
/// is truncated at 2^(l+1) times its RMS value outside the tracked windows and
/// in ker M_t inside them.
pub fn approximate_strict_direction(
    problem: &dyn Problem,
    traj: &Trajectory,
    report: &StructureReport,
    vbar: &Path,
    zbar0: &[f64],
    ladder: &[usize],
) -> Result<DensityLadder> {
    let g = traj.grid();
    let zbar = solve_linearized(problem, traj, vbar, zbar0)?;
    let tol = strict_tol(traj);
    let mut profiles = Vec::new();
    for c in report.constraints.iter().filter(|c| !c.contact.is_empty()) {
        let x = direction_profile(problem, traj, c.index, vbar, &zbar)?;
        let worst = c.contact.iter().flat_map(|r| r.start..=r.end).map(|k| x.get(k, 0).abs()).fold(0.0, f64::max);
        if worst > tol {
            return Err(Error::InvalidArgument(format!(
                "direction is not in the strict critical cone: |g'z| = {worst:.3e} on the contact set of constraint {}",
                c.index
            )));
        }
        profiles.push((c, x));
    }
    let free: Vec<usize> = (0..g.len())
        .filter(|&k| !profiles.iter().any(|(c, _)| c.in_eps0(k)))
        .collect();
    let rms = vbar.l2_norm() / g.horizon().sqrt();
    let dt = g.dt_max();
    let opts = SynthesisOptions::default();
    let mut steps = Vec::new();
    for &level in ladder {
        let bound = rms * 2f64.powi(level as i32 + 1);
        let delta = (report.eps * 0.5f64.powi(level as i32 + 2)).max(2.0 * dt);
        let mut targets = Vec::new();
        for (c, x) in &profiles {
            let samples = vanish_extension(x, &c.contact, delta, tol.max(1e-9))?;
            let nodes = c.eps_nodes.clone();
            targets.push(ConstraintTarget {
                constraint: c.index,
                order: c.order,
                samples,
                nodes,
                base_outside: true,
            });
        }
        let profile = TargetProfile { targets };
        let fill = truncate(vbar, bound);
        let run = |fill: &Path| synthesize_inner(problem, traj, report, &profile, zbar0, Some(fill), Some((vbar, bound)), &opts);
        let mut syn = run(&fill)?;
        // truncation moves the linearized endpoint; restore it with smooth
        // modes supported away from the tracked neighbourhoods
        let defect: Vec<f64> = endpoint_values(problem, traj, report, &zbar)
            .iter()
            .zip(endpoint_values(problem, traj, report, &syn.z))
            .map(|(a, b)| a - b)
            .collect();
        let mut endpoint_defect = defect.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if endpoint_defect > 0.0 && !free.is_empty() {
            let modes = endpoint_modes(g, problem.dims().m, defect.len() + 1, &free);
            let base = endpoint_values(problem, traj, report, &syn.z);
            let mut cols = Vec::with_capacity(modes.len());
            for b in &modes {
                let r = run(&fill.axpy(1.0, b))?;
                let e = endpoint_values(problem, traj, report, &r.z);
                cols.push(e.iter().zip(&base).map(|(a, b)| a - b).collect::<Vec<f64>>());
            }
            let dmat = DMatrix::from_fn(defect.len(), modes.len(), |r, c| cols[c][r]);
            let cut = 1e-10 * dmat.amax().max(f64::MIN_POSITIVE);
            let coef = dmat
                .pseudo_inverse(cut)
                .map_err(|e| Error::IllConditioned(e.into()))?
                * DVector::from_column_slice(&defect);
            let mut corrected = fill.clone();
            for (b, c) in modes.iter().zip(coef.iter()) {
                corrected = corrected.axpy(*c, b);
            }
            syn = run(&corrected)?;
            endpoint_defect = endpoint_values(problem, traj, report, &zbar)
                .iter()
                .zip(endpoint_values(problem, traj, report, &syn.z))
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        }
        let collar_max = profiles
            .iter()
            .flat_map(|(c, _)| {
                let contact = c.contact.clone();
                (0..g.len())
                    .filter(move |&k| distance_to(&contact, g.t(k)) <= delta)
                    .map(|k| gz(problem, traj, c.index, k, &syn.z).abs())
                    .collect::<Vec<_>>()
            })
            .fold(0.0, f64::max);
        let sigma = radial_witness(problem, traj, report, &syn.z, tol);
        steps.push(LadderStep {
            level,
            bound,
            delta,
            distance: syn.v.axpy(-1.0, vbar).l2_norm(),
            truncation_active: (0..g.len()).any(|k| vbar.pointwise_norm(k) > bound),
            sup_norm: syn.v.sup_norm(),
            collar_max,
            radial: sigma.is_some(),
            sigma,
            synthesis_residual: syn.residual,
            endpoint_defect,
            v: syn.v,
        });
    }
    let floor = 1e-9 * (1.0 + vbar.l2_norm());
    let improving = steps.windows(2).all(|w| w[1].distance < w[0].distance || w[1].distance <= w[0].distance + floor);
    Ok(DensityLadder { steps, improving, tol })
}

/// Bounded radial companions of strict directions: the level-`level` rung
/// of each direction's density ladder. Directions that fail the strict-cone
/// precondition are skipped.
pub fn synthesized_directions(
    problem: &dyn Problem,
    traj: &Trajectory,
    report: &StructureReport,
    base: &[Direction],
    level: usize,
) -> Result<Vec<Direction>> {
    let mut out = Vec::with_capacity(base.len());
    for d in base {
        match approximate_strict_direction(problem, traj, report, &d.v, &d.z0, &[level]) {
            Ok(mut ladder) => {
                let step = ladder.steps.pop().expect("one rung requested");
                out.push(Direction { v: step.v, z0: d.z0.clone() }.normalized());
            }
            Err(Error::InvalidArgument(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}
