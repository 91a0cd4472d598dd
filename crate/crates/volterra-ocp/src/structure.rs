//! Contact geometry of the running constraints along a trajectory: contact
//! sets, boundary arcs, touch points, junction times, ε-neighbourhoods, the
//! window decomposition J_0..J_κ, and the checkable assumptions A1, A3, A4.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::problem::Problem;

/// Slack added to distance comparisons so node-aligned ε's are inclusive.
const DIST_SLACK: f64 = 1e-12;
pub const DEFAULT_JUNCTION_CAP: usize = 64;

#[derive(Debug, Clone, Default)]
pub struct StructureConfig {
    pub tol_active: Option<f64>,
    pub eps: Option<f64>,
    pub eps0: Option<f64>,
    pub junction_cap: Option<usize>,
}

/// Closed node range `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeRange {
    pub start: usize,
    pub end: usize,
    pub t_start: f64,
    pub t_end: f64,
}

impl NodeRange {
    fn new(g: &TimeGrid, start: usize, end: usize) -> Self {
        NodeRange {
            start,
            end,
            t_start: g.t(start),
            t_end: g.t(end),
        }
    }

    pub fn contains(&self, k: usize) -> bool {
        self.start <= k && k <= self.end
    }

    fn dist(&self, t: f64) -> f64 {
        if t < self.t_start {
            self.t_start - t
        } else if t > self.t_end {
            t - self.t_end
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TouchPoint {
    pub constraint: usize,
    pub node: usize,
    pub time: f64,
    pub g_value: f64,
    pub reducible: bool,
    /// g^(2) at the touch point along the trajectory.
    pub g2: f64,
    /// |g^(2)(t_{k+1}) - g^(2)(t_{k-1})|, the continuity probe.
    pub g2_jump: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintStructure {
    pub index: usize,
    pub order: usize,
    pub active_nodes: Vec<usize>,
    /// Components of the contact set, touch points of order > 1 removed.
    pub contact: Vec<NodeRange>,
    /// Active runs of at least two cells.
    pub boundary_arcs: Vec<NodeRange>,
    pub touch_points: Vec<TouchPoint>,
    /// Nodes within ε of the contact set.
    pub eps_nodes: Vec<usize>,
    pub eps0_nodes: Vec<usize>,
}

impl ConstraintStructure {
    pub fn in_contact(&self, k: usize) -> bool {
        self.contact.iter().any(|r| r.contains(k))
    }

    pub fn in_eps(&self, k: usize) -> bool {
        self.eps_nodes.binary_search(&k).is_ok()
    }

    pub fn in_eps0(&self, k: usize) -> bool {
        self.eps0_nodes.binary_search(&k).is_ok()
    }

    /// Maximal runs of consecutive nodes in the ε-neighbourhood.
    pub fn eps_components(&self, g: &TimeGrid) -> Vec<NodeRange> {
        runs(&self.eps_nodes).into_iter().map(|(a, b)| NodeRange::new(g, a, b)).collect()
    }
}

/// Open interval between consecutive junction times with its active set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArcSegment {
    pub t_start: f64,
    pub t_end: f64,
    pub active: Vec<usize>,
}

/// A window J_l: maximal node run on which I^{ε₀} is constant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub active: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct A4Verdict {
    pub holds: bool,
    /// min_i -g_i(ȳ_0); `None` without running constraints.
    pub initial_margin: Option<f64>,
    pub entry_at_final_time: bool,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StructureReport {
    pub tol_active: f64,
    pub eps: f64,
    pub eps0: f64,
    pub constraints: Vec<ConstraintStructure>,
    pub junction_times: Vec<f64>,
    pub junction_nodes: Vec<usize>,
    pub arcs: Vec<ArcSegment>,
    pub windows: Vec<Window>,
    pub a1_holds: bool,
    pub junction_cap: usize,
    /// Smallest singular value of the stacked control rows; `None` when no
    /// constraint is ever in its ε₀-neighbourhood.
    pub a3_gamma: Option<f64>,
    pub a4: A4Verdict,
}

impl StructureReport {
    /// Number of touch points of constraints of order > 1.
    pub fn touch_count(&self) -> usize {
        self.constraints.iter().map(|c| c.touch_points.len()).sum()
    }

    pub fn touch_points(&self) -> impl Iterator<Item = &TouchPoint> {
        self.constraints.iter().flat_map(|c| c.touch_points.iter())
    }

    /// I^ε at node k.
    pub fn active_eps(&self, k: usize) -> Vec<usize> {
        self.constraints.iter().filter(|c| c.in_eps(k)).map(|c| c.index).collect()
    }

    pub fn has_contact(&self) -> bool {
        self.constraints.iter().any(|c| !c.contact.is_empty() || !c.touch_points.is_empty())
    }
}

fn runs(nodes: &[usize]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &k in nodes {
        match out.last_mut() {
            Some((_, b)) if *b + 1 == k => *b = k,
            _ => out.push((k, k)),
        }
    }
    out
}

/// g(ȳ_k) for every node, one row per constraint.
fn g_values(problem: &dyn Problem, traj: &Trajectory) -> Vec<Vec<f64>> {
    let r = problem.dims().r;
    let mut out = vec![Vec::with_capacity(traj.grid().len()); r];
    for k in 0..traj.grid().len() {
        let gk = problem.g(traj.y.at(k));
        for (i, row) in out.iter_mut().enumerate() {
            row.push(gk[i]);
        }
    }
    out
}

pub fn default_tol_active(problem: &dyn Problem, traj: &Trajectory) -> f64 {
    let gmax = g_values(problem, traj)
        .iter()
        .flatten()
        .fold(0.0f64, |m, x| m.max(x.abs()));
    1e-6 * (1.0 + gmax)
}

/// g^(2) at node `k` and the jump between its neighbours.
pub fn check_reducible(problem: &dyn Problem, traj: &Trajectory, i: usize, k: usize) -> Result<(bool, f64, f64)> {
    let chain = problem.chain();
    let c = chain
        .constraints
        .get(i)
        .ok_or_else(|| Error::IncompleteProblem(format!("no chain for constraint {i}")))?;
    if c.order < 2 {
        return Err(Error::NotApplicable(format!(
            "constraint {i} has order {}; touch points are only reduced for order > 1",
            c.order
        )));
    }
    let g = traj.grid();
    let g2 = c.levels[2].along(traj, k);
    let lo = k.saturating_sub(1);
    let hi = (k + 1).min(g.cells());
    let jump = (c.levels[2].along(traj, hi) - c.levels[2].along(traj, lo)).abs();
    let tol = 1e-6 * (1.0 + g2.abs());
    let cont_tol = 10.0 * g.dt_max() * (1.0 + g2.abs());
    Ok((g2 < -tol && jump <= cont_tol, g2, jump))
}

struct Raw {
    active: Vec<usize>,
    contact: Vec<NodeRange>,
    arcs: Vec<NodeRange>,
    touches: Vec<TouchPoint>,
    junctions: Vec<usize>,
}

fn classify(problem: &dyn Problem, traj: &Trajectory, i: usize, gv: &[f64], tol: f64) -> Result<Raw> {
    let g = traj.grid();
    let n = g.cells();
    let order = problem.chain().constraints.get(i).map(|c| c.order).unwrap_or(1);
    let active: Vec<usize> = (0..=n).filter(|&k| gv[k] >= -tol).collect();
    let mut raw = Raw {
        active: active.clone(),
        contact: vec![],
        arcs: vec![],
        touches: vec![],
        junctions: vec![],
    };
    for (a, b) in runs(&active) {
        if b - a >= 2 {
            let r = NodeRange::new(g, a, b);
            raw.contact.push(r);
            raw.arcs.push(r);
            if a > 0 {
                raw.junctions.push(a);
            }
            if b < n {
                raw.junctions.push(b);
            }
            continue;
        }
        let k = if b > a && gv[b] > gv[a] { b } else { a };
        if order > 1 {
            let (reducible, g2, jump) = check_reducible(problem, traj, i, k)?;
            raw.touches.push(TouchPoint {
                constraint: i,
                node: k,
                time: g.t(k),
                g_value: gv[k],
                reducible,
                g2,
                g2_jump: jump,
            });
        } else {
            raw.contact.push(NodeRange::new(g, a, b));
        }
        if k > 0 && k < n {
            raw.junctions.push(k);
        }
    }
    Ok(raw)
}

fn neighbourhood(g: &TimeGrid, contact: &[NodeRange], eps: f64) -> Vec<usize> {
    (0..g.len())
        .filter(|&k| contact.iter().any(|r| r.dist(g.t(k)) <= eps + DIST_SLACK))
        .collect()
}

/// Default ε = 2Δt and ε₀ = min(4ε, gap/3), gap being the smaller of the
/// first junction time and the least spacing between junction times.
fn default_eps(g: &TimeGrid, junctions: &[f64]) -> (f64, f64) {
    let eps = 2.0 * g.dt_max();
    let gap = junction_gap(junctions);
    (eps, (4.0 * eps).min(gap / 3.0))
}

fn junction_gap(junctions: &[f64]) -> f64 {
    let mut gap = junctions.first().copied().unwrap_or(f64::INFINITY);
    for w in junctions.windows(2) {
        gap = gap.min(w[1] - w[0]);
    }
    gap
}

fn validate_eps(eps: f64, eps0: f64, junctions: &[f64]) -> Result<()> {
    if !(eps > 0.0) || !(eps0 > eps) {
        return Err(Error::InvalidConfiguration(format!(
            "need 0 < eps < eps0, got eps = {eps}, eps0 = {eps0}"
        )));
    }
    if let Some(&first) = junctions.first() {
        if eps0 >= first {
            return Err(Error::InvalidConfiguration(format!(
                "eps0 = {eps0} must stay below the first junction time {first}"
            )));
        }
    }
    for w in junctions.windows(2) {
        if 2.0 * eps0 >= w[1] - w[0] {
            return Err(Error::InvalidConfiguration(format!(
                "2 eps0 = {} must stay below the junction spacing {} (at {} and {})",
                2.0 * eps0,
                w[1] - w[0],
                w[0],
                w[1]
            )));
        }
    }
    Ok(())
}

/// Detects the contact structure of every running constraint along `traj`.
pub fn detect_structure(problem: &dyn Problem, traj: &Trajectory, cfg: &StructureConfig) -> Result<StructureReport> {
    let d = problem.dims();
    let g = traj.grid();
    let n = g.cells();
    let tol = cfg.tol_active.unwrap_or_else(|| default_tol_active(problem, traj));
    let cap = cfg.junction_cap.unwrap_or(DEFAULT_JUNCTION_CAP);
    let gv = g_values(problem, traj);

    let mut raws = Vec::with_capacity(d.r);
    for i in 0..d.r {
        raws.push(classify(problem, traj, i, &gv[i], tol)?);
    }
    let mut junction_nodes: Vec<usize> = raws.iter().flat_map(|r| r.junctions.iter().copied()).collect();
    junction_nodes.sort_unstable();
    junction_nodes.dedup();
    let junction_times: Vec<f64> = junction_nodes.iter().map(|&k| g.t(k)).collect();

    let (de, de0) = default_eps(g, &junction_times);
    let eps = cfg.eps.unwrap_or(de);
    let eps0 = cfg.eps0.unwrap_or(if cfg.eps.is_some() {
        (4.0 * eps).min(junction_gap(&junction_times) / 3.0)
    } else {
        de0
    });
    validate_eps(eps, eps0, &junction_times)?;

    let constraints: Vec<ConstraintStructure> = raws
        .into_iter()
        .enumerate()
        .map(|(i, r)| ConstraintStructure {
            index: i,
            order: problem.chain().constraints.get(i).map(|c| c.order).unwrap_or(1),
            eps_nodes: neighbourhood(g, &r.contact, eps),
            eps0_nodes: neighbourhood(g, &r.contact, eps0),
            active_nodes: r.active,
            contact: r.contact,
            boundary_arcs: r.arcs,
            touch_points: r.touches,
        })
        .collect();

    // arcs between consecutive junction times
    let mut cuts = vec![0.0];
    cuts.extend(&junction_times);
    cuts.push(g.horizon());
    let arcs = cuts
        .windows(2)
        .map(|w| {
            let k = g.nearest(0.5 * (w[0] + w[1]));
            ArcSegment {
                t_start: w[0],
                t_end: w[1],
                active: (0..d.r).filter(|&i| gv[i][k] >= -tol).collect(),
            }
        })
        .collect();

    let mut windows: Vec<Window> = Vec::new();
    for k in 0..=n {
        let set: Vec<usize> = constraints.iter().filter(|c| c.in_eps0(k)).map(|c| c.index).collect();
        match windows.last_mut() {
            Some(w) if w.active == set => {
                w.end = k;
                w.t_end = g.t(k);
            }
            _ => windows.push(Window {
                start: k,
                end: k,
                t_start: g.t(k),
                t_end: g.t(k),
                active: set,
            }),
        }
    }

    let all_reducible = constraints.iter().flat_map(|c| &c.touch_points).all(|t| t.reducible);
    let mut report = StructureReport {
        tol_active: tol,
        eps,
        eps0,
        constraints,
        a1_holds: junction_nodes.len() <= cap && all_reducible,
        junction_times,
        junction_nodes,
        arcs,
        windows,
        junction_cap: cap,
        a3_gamma: None,
        a4: A4Verdict {
            holds: true,
            initial_margin: None,
            entry_at_final_time: false,
            diagnostic: None,
        },
    };
    report.a3_gamma = verify_a3(problem, traj, &report)?;
    report.a4 = verify_a4(problem, traj, &report);
    Ok(report)
}

/// Smallest singular value of the stacked rows D_ũ g_i^(q_i), i ∈ I^{ε₀}_t,
/// minimized over the nodes; `None` when every I^{ε₀}_t is empty.
pub fn verify_a3(problem: &dyn Problem, traj: &Trajectory, report: &StructureReport) -> Result<Option<f64>> {
    let m = problem.dims().m;
    let chain = problem.chain();
    let mut gamma: Option<f64> = None;
    for w in &report.windows {
        if w.active.is_empty() {
            continue;
        }
        if w.active.iter().any(|&i| i >= chain.constraints.len()) {
            return Err(Error::IncompleteProblem("missing derivative chain".into()));
        }
        for k in w.start..=w.end {
            let s = smallest_singular(&m_matrix(problem, traj, &w.active, k), m);
            gamma = Some(gamma.map_or(s, |x: f64| x.min(s)));
        }
    }
    Ok(gamma)
}

/// M_t = D_ũ G^(q)_I along the trajectory at node k.
pub fn m_matrix(problem: &dyn Problem, traj: &Trajectory, set: &[usize], k: usize) -> DMatrix<f64> {
    let m = problem.dims().m;
    let chain = problem.chain();
    let mut mat = DMatrix::zeros(set.len(), m);
    for (row, &i) in set.iter().enumerate() {
        for (c, x) in chain.top(i).m_row(traj, k).into_iter().enumerate() {
            mat[(row, c)] = x;
        }
    }
    mat
}

fn smallest_singular(mat: &DMatrix<f64>, m: usize) -> f64 {
    if mat.nrows() > m {
        return 0.0;
    }
    let sv = mat.clone().svd(false, false).singular_values;
    sv.iter().fold(f64::INFINITY, |a, &b| a.min(b))
}

/// g(ȳ_0) < 0 and the final time is not an entry point.
pub fn verify_a4(problem: &dyn Problem, traj: &Trajectory, report: &StructureReport) -> A4Verdict {
    let n = traj.grid().cells();
    let g0 = problem.g(traj.y0());
    let margin = g0.iter().map(|x| -x).reduce(f64::min);
    let mut diagnostic = None;
    let initial_ok = margin.map_or(true, |m| m > report.tol_active);
    if let (false, Some(m)) = (initial_ok, margin) {
        diagnostic = Some(format!("initial state on or beyond the boundary, margin {m:.3e}"));
    }
    let mut entry = false;
    for c in &report.constraints {
        let at_n = c.active_nodes.last() == Some(&n);
        let at_prev = c.active_nodes.binary_search(&(n - 1)).is_ok();
        if at_n && !at_prev {
            entry = true;
            diagnostic = Some(format!("constraint {} enters its boundary at the final time", c.index));
        }
    }
    A4Verdict {
        holds: initial_ok && !entry,
        initial_margin: margin,
        entry_at_final_time: entry,
        diagnostic,
    }
}
