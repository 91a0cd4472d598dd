//! Time grids, sampled paths and trapezoid quadrature.
//!
//! Every integral in the crate goes through the composite trapezoid rule on
//! the grid nodes. Controls are sampled at nodes and read as piecewise
//! constant (left value) when evaluated between nodes; states are read as
//! piecewise linear.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub struct TimeGrid {
    nodes: Arc<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct GridRepr {
    nodes: Vec<f64>,
}

impl TryFrom<GridRepr> for TimeGrid {
    type Error = Error;
    fn try_from(r: GridRepr) -> Result<Self> {
        TimeGrid::from_nodes(r.nodes)
    }
}

impl From<TimeGrid> for GridRepr {
    fn from(g: TimeGrid) -> Self {
        GridRepr {
            nodes: g.nodes.as_ref().clone(),
        }
    }
}

impl PartialEq for TimeGrid {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.nodes, &other.nodes) || self.nodes == other.nodes
    }
}

impl TimeGrid {
    pub fn uniform(horizon: f64, cells: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
        }
        if cells < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 cells, got {cells}")));
        }
        let nodes = (0..=cells)
            .map(|k| if k == cells { horizon } else { k as f64 * horizon / cells as f64 })
            .collect();
        Ok(TimeGrid { nodes: Arc::new(nodes) })
    }

    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 3 {
            return Err(Error::InvalidArgument("need at least 2 cells".into()));
        }
        if nodes[0] != 0.0 {
            return Err(Error::InvalidArgument("first node must be 0".into()));
        }
        if nodes.iter().any(|t| !t.is_finite()) || nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("nodes must be finite and strictly increasing".into()));
        }
        Ok(TimeGrid { nodes: Arc::new(nodes) })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn t(&self, k: usize) -> f64 {
        self.nodes[k]
    }

    pub fn horizon(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    /// Number of cells N; there are N + 1 nodes.
    pub fn cells(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn h(&self, j: usize) -> f64 {
        self.nodes[j + 1] - self.nodes[j]
    }

    pub fn dt_max(&self) -> f64 {
        (0..self.cells()).map(|j| self.h(j)).fold(0.0, f64::max)
    }

    /// Composite trapezoid weights for an integral over all of [0, T].
    pub fn weights(&self) -> Vec<f64> {
        let n = self.cells();
        (0..=n)
            .map(|k| {
                let left = if k > 0 { self.h(k - 1) } else { 0.0 };
                let right = if k < n { self.h(k) } else { 0.0 };
                0.5 * (left + right)
            })
            .collect()
    }

    /// Weight of node `j` in the trapezoid rule on [0, t_k].
    pub fn volterra_weight(&self, k: usize, j: usize) -> f64 {
        debug_assert!(j <= k);
        if k == 0 {
            return 0.0;
        }
        let left = if j > 0 { self.h(j - 1) } else { 0.0 };
        let right = if j < k { self.h(j) } else { 0.0 };
        0.5 * (left + right)
    }

    /// Node index closest to `t`.
    pub fn nearest(&self, t: f64) -> usize {
        match self.nodes.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
            Ok(k) => k,
            Err(0) => 0,
            Err(k) if k >= self.nodes.len() => self.nodes.len() - 1,
            Err(k) => {
                if t - self.nodes[k - 1] <= self.nodes[k] - t {
                    k - 1
                } else {
                    k
                }
            }
        }
    }

    /// Index of a node equal to `t` up to a relative 1e-9 of the horizon.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let k = self.nearest(t);
        ((self.nodes[k] - t).abs() <= 1e-9 * self.horizon()).then_some(k)
    }

    /// Cell containing `t` (the last cell for t = T).
    pub fn cell_of(&self, t: f64) -> usize {
        let n = self.cells();
        match self.nodes.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
            Ok(k) => k.min(n - 1),
            Err(0) => 0,
            Err(k) => (k - 1).min(n - 1),
        }
    }

    pub fn same(&self, other: &TimeGrid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "grids with {} and {} cells",
                self.cells(),
                other.cells()
            )))
        }
    }
}

/// Trapezoid approximation of the Volterra integral over [0, t_k].
/// `samples[j]` holds b(t_k, t_j) for j = 0..=k.
pub fn volterra_quad(samples: &[f64], grid: &TimeGrid, k: usize) -> f64 {
    assert!(k <= grid.cells() && samples.len() > k, "node index out of range");
    (0..k).map(|j| 0.5 * grid.h(j) * (samples[j] + samples[j + 1])).sum()
}

/// Trapezoid approximation of the tail integral over [t_k, T].
/// `samples` is indexed by absolute node; entries below `k` are ignored.
pub fn tail_quad(samples: &[f64], grid: &TimeGrid, k: usize) -> f64 {
    let n = grid.cells();
    assert!(k <= n && samples.len() == n + 1, "node index out of range");
    (k..n).map(|j| 0.5 * grid.h(j) * (samples[j] + samples[j + 1])).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    Control,
    State,
}

/// Vector-valued samples at the grid nodes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "PathRepr", into = "PathRepr")]
pub struct Path {
    grid: TimeGrid,
    dim: usize,
    kind: PathKind,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PathRepr {
    kind: PathKind,
    grid: TimeGrid,
    values: Vec<Vec<f64>>,
}

impl TryFrom<PathRepr> for Path {
    type Error = Error;
    fn try_from(r: PathRepr) -> Result<Self> {
        Path::from_rows(r.grid, r.kind, &r.values)
    }
}

impl From<Path> for PathRepr {
    fn from(p: Path) -> Self {
        PathRepr {
            kind: p.kind,
            values: (0..p.grid.len()).map(|k| p.at(k).to_vec()).collect(),
            grid: p.grid,
        }
    }
}

impl Path {
    pub fn zeros(grid: &TimeGrid, dim: usize, kind: PathKind) -> Self {
        Path {
            grid: grid.clone(),
            dim,
            kind,
            data: vec![0.0; dim * grid.len()],
        }
    }

    pub fn from_fn(grid: &TimeGrid, dim: usize, kind: PathKind, mut f: impl FnMut(usize, f64) -> Vec<f64>) -> Self {
        let mut p = Path::zeros(grid, dim, kind);
        for k in 0..grid.len() {
            let v = f(k, grid.t(k));
            assert_eq!(v.len(), dim, "sample dimension");
            p.at_mut(k).copy_from_slice(&v);
        }
        p
    }

    pub fn scalar(grid: &TimeGrid, kind: PathKind, f: impl Fn(f64) -> f64) -> Self {
        Path::from_fn(grid, 1, kind, |_, t| vec![f(t)])
    }

    pub fn from_rows(grid: TimeGrid, kind: PathKind, rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "path has {} samples for {} nodes",
                rows.len(),
                grid.len()
            )));
        }
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidArgument("ragged path samples".into()));
        }
        if rows.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite path sample".into()));
        }
        Ok(Path {
            grid,
            dim,
            kind,
            data: rows.concat(),
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> PathKind {
        self.kind
    }

    pub fn at(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn at_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn get(&self, k: usize, i: usize) -> f64 {
        self.data[k * self.dim + i]
    }

    pub fn set(&mut self, k: usize, i: usize, x: f64) {
        self.data[k * self.dim + i] = x;
    }

    pub fn component(&self, i: usize) -> Vec<f64> {
        (0..self.grid.len()).map(|k| self.get(k, i)).collect()
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    /// Value at an arbitrary time, following the path kind.
    pub fn eval(&self, t: f64) -> Vec<f64> {
        let j = self.grid.cell_of(t);
        match self.kind {
            PathKind::Control => {
                if t >= self.grid.horizon() {
                    self.at(self.grid.cells()).to_vec()
                } else {
                    self.at(j).to_vec()
                }
            }
            PathKind::State => {
                let a = ((t - self.grid.t(j)) / self.grid.h(j)).clamp(0.0, 1.0);
                self.at(j)
                    .iter()
                    .zip(self.at(j + 1))
                    .map(|(x, y)| (1.0 - a) * x + a * y)
                    .collect()
            }
        }
    }

    pub fn scaled(&self, a: f64) -> Path {
        let mut p = self.clone();
        p.data.iter_mut().for_each(|x| *x *= a);
        p
    }

    /// `self + a * other`.
    pub fn axpy(&self, a: f64, other: &Path) -> Path {
        assert_eq!(self.dim, other.dim);
        let mut p = self.clone();
        p.data.iter_mut().zip(&other.data).for_each(|(x, y)| *x += a * y);
        p
    }

    pub fn sup_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Euclidean norm of each sample.
    pub fn pointwise_norm(&self, k: usize) -> f64 {
        self.at(k).iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Composite trapezoid L2 norm.
    pub fn l2_norm(&self) -> f64 {
        let w = self.grid.weights();
        (0..self.grid.len())
            .map(|k| w[k] * self.pointwise_norm(k).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn sup_diff(&self, other: &Path) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}
