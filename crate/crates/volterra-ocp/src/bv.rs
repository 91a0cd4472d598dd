//! Finite signed measures on [0, T] made of node atoms plus cell-constant
//! densities, and the bounded-variation paths they generate.
//!
//! A [`BVPath`] is stored as its endpoint value `h(T+)` and its measure `dh`;
//! the one-sided values are `h^l(t) = h(T+) - dh([t, T])` and
//! `h^r(t) = h(T+) - dh((t, T])`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Path, PathKind, TimeGrid};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Measure {
    grid: TimeGrid,
    dim: usize,
    atoms: BTreeMap<usize, Vec<f64>>,
    /// Row-major `cells x dim`, mass per unit time.
    density: Vec<f64>,
}

impl Measure {
    pub fn zero(grid: &TimeGrid, dim: usize) -> Self {
        Measure {
            grid: grid.clone(),
            dim,
            atoms: BTreeMap::new(),
            density: vec![0.0; dim * grid.cells()],
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn atoms(&self) -> &BTreeMap<usize, Vec<f64>> {
        &self.atoms
    }

    pub fn atom(&self, k: usize) -> Option<&[f64]> {
        self.atoms.get(&k).map(|v| v.as_slice())
    }

    pub fn atom_component(&self, k: usize, i: usize) -> f64 {
        self.atoms.get(&k).map_or(0.0, |v| v[i])
    }

    pub fn density(&self, j: usize) -> &[f64] {
        &self.density[j * self.dim..(j + 1) * self.dim]
    }

    pub fn density_component(&self, j: usize, i: usize) -> f64 {
        self.density[j * self.dim + i]
    }

    /// Adds `w` to the atom at node `k`.
    pub fn add_atom(&mut self, k: usize, w: &[f64]) {
        assert_eq!(w.len(), self.dim);
        assert!(k < self.grid.len());
        let e = self.atoms.entry(k).or_insert_with(|| vec![0.0; self.dim]);
        e.iter_mut().zip(w).for_each(|(a, b)| *a += b);
    }

    pub fn add_atom_component(&mut self, k: usize, i: usize, w: f64) {
        let mut v = vec![0.0; self.dim];
        v[i] = w;
        self.add_atom(k, &v);
    }

    pub fn set_density(&mut self, j: usize, d: &[f64]) {
        assert_eq!(d.len(), self.dim);
        self.density[j * self.dim..(j + 1) * self.dim].copy_from_slice(d);
    }

    pub fn set_density_component(&mut self, j: usize, i: usize, d: f64) {
        self.density[j * self.dim + i] = d;
    }

    /// Removes zero atoms so that supports compare cleanly.
    pub fn prune(&mut self) {
        self.atoms.retain(|_, w| w.iter().any(|x| *x != 0.0));
    }

    pub fn is_purely_atomic(&self) -> bool {
        self.density.iter().all(|d| *d == 0.0)
    }

    pub fn total_variation(&self) -> f64 {
        let atoms: f64 = self.atoms.values().flatten().map(|x| x.abs()).sum();
        let dens: f64 = (0..self.grid.cells())
            .map(|j| self.grid.h(j) * self.density(j).iter().map(|x| x.abs()).sum::<f64>())
            .sum();
        atoms + dens
    }

    /// Mass of `[t, T]` (closed) or `(t, T]` (open) for every component.
    pub fn tail_mass(&self, t: f64, closed: bool) -> Vec<f64> {
        let g = &self.grid;
        let mut out = vec![0.0; self.dim];
        let k_exact = g.node_index(t);
        let j0 = g.cell_of(t);
        for (&k, w) in &self.atoms {
            let inside = match k_exact {
                Some(ke) => k > ke || (closed && k == ke),
                None => g.t(k) > t,
            };
            if inside {
                out.iter_mut().zip(w).for_each(|(o, x)| *o += x);
            }
        }
        for j in 0..g.cells() {
            let len = if let Some(ke) = k_exact {
                if j >= ke {
                    g.h(j)
                } else {
                    0.0
                }
            } else if j > j0 {
                g.h(j)
            } else if j == j0 {
                g.t(j + 1) - t
            } else {
                0.0
            };
            if len > 0.0 {
                out.iter_mut().zip(self.density(j)).for_each(|(o, d)| *o += len * d);
            }
        }
        out
    }

    /// Effective nodal weights when the measure is paired with a piecewise
    /// linear integrand: atoms plus half of each adjacent cell's mass.
    pub fn nodal_weights(&self) -> Path {
        let g = &self.grid;
        let mut p = Path::zeros(g, self.dim, PathKind::State);
        for (&k, w) in &self.atoms {
            p.at_mut(k).iter_mut().zip(w).for_each(|(o, x)| *o += x);
        }
        for j in 0..g.cells() {
            let half = 0.5 * g.h(j);
            for i in 0..self.dim {
                let m = half * self.density_component(j, i);
                p.set(j, i, p.get(j, i) + m);
                p.set(j + 1, i, p.get(j + 1, i) + m);
            }
        }
        p
    }

    /// Nodes carrying mass above `tol` in component `i`, counting both
    /// atoms and the endpoints of cells with nonzero density.
    pub fn support_nodes(&self, i: usize, tol: f64) -> Vec<usize> {
        let mut s = std::collections::BTreeSet::new();
        for (&k, w) in &self.atoms {
            if w[i].abs() > tol {
                s.insert(k);
            }
        }
        for j in 0..self.grid.cells() {
            if self.density_component(j, i).abs() > tol {
                s.insert(j);
                s.insert(j + 1);
            }
        }
        s.into_iter().collect()
    }

    pub fn scaled(&self, a: f64) -> Measure {
        let mut m = self.clone();
        m.atoms.values_mut().flatten().for_each(|x| *x *= a);
        m.density.iter_mut().for_each(|x| *x *= a);
        m
    }

    pub fn add(&self, other: &Measure) -> Result<Measure> {
        self.grid.same(&other.grid)?;
        if self.dim != other.dim {
            return Err(Error::InvalidArgument("measure dimensions differ".into()));
        }
        let mut m = self.clone();
        for (&k, w) in &other.atoms {
            m.add_atom(k, w);
        }
        m.density.iter_mut().zip(&other.density).for_each(|(a, b)| *a += b);
        Ok(m)
    }

    /// Largest absolute difference over atoms and densities.
    pub fn sup_diff(&self, other: &Measure) -> f64 {
        let keys: std::collections::BTreeSet<usize> =
            self.atoms.keys().chain(other.atoms.keys()).copied().collect();
        let mut d: f64 = 0.0;
        for k in keys {
            for i in 0..self.dim {
                d = d.max((self.atom_component(k, i) - other.atom_component(k, i)).abs());
            }
        }
        self.density
            .iter()
            .zip(&other.density)
            .fold(d, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Pairing of a scalar path with component `i` of a measure.
pub fn stieltjes(phi: &Path, mu: &Measure, i: usize) -> Result<f64> {
    phi.grid().same(mu.grid())?;
    if phi.dim() != 1 {
        return Err(Error::InvalidArgument("stieltjes expects a scalar path".into()));
    }
    let g = mu.grid();
    let mut s: f64 = mu.atoms.iter().map(|(&k, w)| phi.get(k, 0) * w[i]).sum();
    for j in 0..g.cells() {
        let d = mu.density_component(j, i);
        if d != 0.0 {
            let cell = match phi.kind() {
                PathKind::State => 0.5 * (phi.get(j, 0) + phi.get(j + 1, 0)),
                PathKind::Control => phi.get(j, 0),
            };
            s += d * g.h(j) * cell;
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BVPath {
    measure: Measure,
    end: Vec<f64>,
}

impl BVPath {
    /// The path `t -> c - mu([t, T])`.
    pub fn from_measure(c: &[f64], mu: Measure) -> Result<Self> {
        if c.len() != mu.dim() {
            return Err(Error::InvalidArgument("endpoint and measure dimensions differ".into()));
        }
        Ok(BVPath { measure: mu, end: c.to_vec() })
    }

    pub fn constant(grid: &TimeGrid, c: &[f64]) -> Self {
        BVPath {
            measure: Measure::zero(grid, c.len()),
            end: c.to_vec(),
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        self.measure.grid()
    }

    pub fn dim(&self) -> usize {
        self.end.len()
    }

    pub fn measure(&self) -> &Measure {
        &self.measure
    }

    /// h(T+).
    pub fn end_value(&self) -> &[f64] {
        &self.end
    }

    /// h(0-) = h(T+) - dh([0, T]).
    pub fn start_value(&self) -> Vec<f64> {
        self.left_value(0.0)
    }

    pub fn left_value(&self, t: f64) -> Vec<f64> {
        let m = self.measure.tail_mass(t, true);
        self.end.iter().zip(m).map(|(c, x)| c - x).collect()
    }

    pub fn right_value(&self, t: f64) -> Vec<f64> {
        let m = self.measure.tail_mass(t, false);
        self.end.iter().zip(m).map(|(c, x)| c - x).collect()
    }

    /// Left and right values at every node, computed in one backward sweep.
    pub fn node_values(&self) -> (Path, Path) {
        let g = self.grid();
        let n = g.cells();
        let d = self.dim();
        let mut left = Path::zeros(g, d, PathKind::State);
        let mut right = Path::zeros(g, d, PathKind::State);
        let mut cur = self.end.clone();
        for k in (0..=n).rev() {
            right.at_mut(k).copy_from_slice(&cur);
            if let Some(a) = self.measure.atom(k) {
                cur.iter_mut().zip(a).for_each(|(c, x)| *c -= x);
            }
            left.at_mut(k).copy_from_slice(&cur);
            if k > 0 {
                let h = g.h(k - 1);
                cur.iter_mut()
                    .zip(self.measure.density(k - 1))
                    .for_each(|(c, x)| *c -= h * x);
            }
        }
        (left, right)
    }

    /// Recovers `(h(T+), dh)` from one-sided node values.
    pub fn to_measure(&self) -> (Vec<f64>, Measure) {
        let g = self.grid();
        let (left, right) = self.node_values();
        let mut mu = Measure::zero(g, self.dim());
        for k in 0..g.len() {
            let jump: Vec<f64> = right.at(k).iter().zip(left.at(k)).map(|(r, l)| r - l).collect();
            if jump.iter().any(|x| *x != 0.0) {
                mu.add_atom(k, &jump);
            }
        }
        for j in 0..g.cells() {
            let d: Vec<f64> = left
                .at(j + 1)
                .iter()
                .zip(right.at(j))
                .map(|(l, r)| (l - r) / g.h(j))
                .collect();
            mu.set_density(j, &d);
        }
        (self.end.clone(), mu)
    }

    pub fn shifted(&self, c: &[f64]) -> BVPath {
        let mut p = self.clone();
        p.end.iter_mut().zip(c).for_each(|(a, b)| *a += b);
        p
    }
}

/// `|∫ h^l dk + ∫ k^r dh - (h(T+)k(T+) - h(0-)k(0-))|`, summed over
/// components. Cell integrals are exact for the piecewise linear interiors.
pub fn ipp_residual(h: &BVPath, k: &BVPath) -> Result<f64> {
    h.grid().same(k.grid())?;
    if h.dim() != k.dim() {
        return Err(Error::InvalidArgument("bv dimensions differ".into()));
    }
    let g = h.grid();
    let (hl, hr) = h.node_values();
    let (_, kr) = k.node_values();
    let dim = h.dim();
    let mut lhs = 0.0;
    for node in 0..g.len() {
        for i in 0..dim {
            lhs += hl.get(node, i) * k.measure().atom_component(node, i);
            lhs += kr.get(node, i) * h.measure().atom_component(node, i);
        }
    }
    for j in 0..g.cells() {
        let len = g.h(j);
        for i in 0..dim {
            let dh = h.measure().density_component(j, i);
            let dk = k.measure().density_component(j, i);
            // on the open cell, h = h^r(t_j) + dh (t - t_j)
            lhs += dk * len * (hr.get(j, i) + 0.5 * dh * len);
            lhs += dh * len * (kr.get(j, i) + 0.5 * dk * len);
        }
    }
    let h0 = h.start_value();
    let k0 = k.start_value();
    let rhs: f64 = (0..dim)
        .map(|i| h.end[i] * k.end[i] - h0[i] * k0[i])
        .sum();
    Ok((lhs - rhs).abs())
}
