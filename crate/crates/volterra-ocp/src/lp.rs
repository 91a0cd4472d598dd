//! Dense two-phase primal simplex with Bland's rule, for the small linear
//! programs of multiplier estimation and qualification checks.
//!
//! Problems are in standard form: minimize `c·x` subject to `A x = b`,
//! `x ≥ 0`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAX_VARIABLES: usize = 5000;
const PIVOT_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub enum LpOutcome {
    Optimal {
        x: Vec<f64>,
        objective: f64,
        /// y with c - Aᵀy ≥ 0 on the optimal basis.
        duals: Vec<f64>,
    },
    /// Farkas certificate y with yᵀA ≤ 0 and yᵀb > 0.
    Infeasible { certificate: Vec<f64>, infeasibility: f64 },
    Unbounded,
}

impl LpOutcome {
    pub fn optimal(&self) -> Option<(&[f64], f64)> {
        match self {
            LpOutcome::Optimal { x, objective, .. } => Some((x, *objective)),
            _ => None,
        }
    }
}

struct Tableau {
    rows: usize,
    /// structural + artificial columns
    cols: usize,
    n_struct: usize,
    t: Vec<f64>,
    rhs: Vec<f64>,
    basis: Vec<usize>,
    scale: f64,
    /// Row-signed `[A | I]` and `b`, kept for reinversion.
    orig: DMatrix<f64>,
    orig_b: Vec<f64>,
}

const REINVERT_EVERY: usize = 64;

impl Tableau {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.t[i * self.cols + j]
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let cols = self.cols;
        let p = self.t[r * cols + c];
        for j in 0..cols {
            self.t[r * cols + j] /= p;
        }
        self.rhs[r] /= p;
        let prow: Vec<f64> = self.t[r * cols..(r + 1) * cols].to_vec();
        let prhs = self.rhs[r];
        for i in 0..self.rows {
            if i == r {
                continue;
            }
            let f = self.t[i * cols + c];
            if f == 0.0 {
                continue;
            }
            let row = &mut self.t[i * cols..(i + 1) * cols];
            for (a, b) in row.iter_mut().zip(&prow) {
                *a -= f * b;
            }
            self.rhs[i] -= f * prhs;
        }
        self.basis[r] = c;
    }

    /// Recomputes the tableau from the original data and the current basis.
    fn reinvert(&mut self) {
        let m = self.rows;
        let bmat = DMatrix::from_fn(m, m, |i, j| self.orig[(i, self.basis[j])]);
        let lu = bmat.lu();
        let Some(t) = lu.solve(&self.orig) else {
            return;
        };
        let Some(rhs) = lu.solve(&nalgebra::DVector::from_column_slice(&self.orig_b)) else {
            return;
        };
        if !t.iter().all(|x| x.is_finite()) {
            return;
        }
        for i in 0..m {
            for j in 0..self.cols {
                self.t[i * self.cols + j] = t[(i, j)];
            }
            self.rhs[i] = rhs[i];
        }
    }

    /// Reduced costs for costs `cost` over all columns.
    fn reduced(&self, cost: &[f64]) -> Vec<f64> {
        let mut d = cost.to_vec();
        for i in 0..self.rows {
            let cb = cost[self.basis[i]];
            if cb == 0.0 {
                continue;
            }
            for (j, dj) in d.iter_mut().enumerate() {
                *dj -= cb * self.at(i, j);
            }
        }
        d
    }

    /// Dantzig pricing with a Harris ratio test, falling back to Bland's rule
    /// when the objective stalls; returns false if unbounded.
    fn optimize(&mut self, cost: &[f64], allowed: usize, max_pivots: usize) -> Result<bool> {
        let tol = PIVOT_TOL * self.scale;
        let feas = 1e-9 * self.scale;
        let mut bland = false;
        let mut stalled = 0usize;
        let objective = |tab: &Tableau| -> f64 { (0..tab.rows).map(|i| cost[tab.basis[i]] * tab.rhs[i]).sum() };
        let mut last = objective(self);
        for it in 0..max_pivots {
            if it > 0 && it % REINVERT_EVERY == 0 {
                self.reinvert();
            }
            let d = self.reduced(cost);
            let enter = if bland {
                (0..allowed).find(|&j| d[j] < -tol)
            } else {
                (0..allowed)
                    .filter(|&j| d[j] < -tol)
                    .min_by(|&a, &b| d[a].total_cmp(&d[b]))
            };
            let Some(enter) = enter else {
                self.reinvert();
                return Ok(true);
            };
            let colmax = (0..self.rows).fold(0.0f64, |m, i| m.max(self.at(i, enter).abs()));
            let piv_min = PIVOT_TOL.max(1e-9 * colmax);
            // pass one: largest step allowed with relaxed bounds
            let mut theta = f64::INFINITY;
            for i in 0..self.rows {
                let a = self.at(i, enter);
                if a > piv_min {
                    theta = theta.min((self.rhs[i].max(0.0) + feas) / a);
                }
            }
            if !theta.is_finite() {
                return Ok(false);
            }
            // pass two: largest pivot among rows within that step
            let mut leave: Option<usize> = None;
            for i in 0..self.rows {
                let a = self.at(i, enter);
                if a > piv_min && self.rhs[i].max(0.0) / a <= theta {
                    leave = match leave {
                        None => Some(i),
                        Some(l) => {
                            let better = if bland {
                                self.basis[i] < self.basis[l]
                            } else {
                                a > self.at(l, enter)
                            };
                            Some(if better { i } else { l })
                        }
                    };
                }
            }
            let r = leave.expect("a row attains the Harris bound");
            self.pivot(r, enter);
            for x in self.rhs.iter_mut() {
                if *x < 0.0 && *x > -feas {
                    *x = 0.0;
                }
            }
            let now = objective(self);
            if now < last - 1e-12 * (1.0 + last.abs()) {
                stalled = 0;
            } else {
                stalled += 1;
                if stalled > 50 {
                    bland = true;
                }
            }
            last = now;
        }
        Err(Error::Lp(format!("simplex exceeded {max_pivots} pivots")))
    }
}

/// Minimizes `c·x` subject to `A x = b`, `x ≥ 0`.
pub fn solve(a: &DMatrix<f64>, b: &[f64], c: &[f64]) -> Result<LpOutcome> {
    let (m, n) = (a.nrows(), a.ncols());
    if b.len() != m || c.len() != n {
        return Err(Error::InvalidArgument("LP dimensions".into()));
    }
    if n > MAX_VARIABLES {
        return Err(Error::InvalidArgument(format!(
            "{n} LP variables exceed the dense limit {MAX_VARIABLES}"
        )));
    }
    let cols = n + m;
    let scale = 1.0 + a.iter().chain(b).fold(0.0f64, |s, x| s.max(x.abs()));
    let mut sign = vec![1.0; m];
    let mut orig = DMatrix::zeros(m, cols);
    let mut orig_b = vec![0.0; m];
    for i in 0..m {
        if b[i] < 0.0 {
            sign[i] = -1.0;
        }
        for j in 0..n {
            orig[(i, j)] = sign[i] * a[(i, j)];
        }
        orig[(i, n + i)] = 1.0;
        orig_b[i] = sign[i] * b[i];
    }
    let mut tab = Tableau {
        rows: m,
        cols,
        n_struct: n,
        t: (0..m * cols).map(|q| orig[(q / cols, q % cols)]).collect(),
        rhs: orig_b.clone(),
        basis: (n..n + m).collect(),
        scale,
        orig,
        orig_b,
    };
    let max_pivots = 50 * (m + n) + 1000;

    let mut phase1 = vec![0.0; cols];
    phase1[n..].iter_mut().for_each(|x| *x = 1.0);
    tab.optimize(&phase1, n, max_pivots)?;
    let infeas: f64 = (0..m).filter(|&i| tab.basis[i] >= n).map(|i| tab.rhs[i]).sum();
    if infeas > 1e-9 * scale {
        // y_i = 1 - reduced cost of artificial i, undoing the row sign flips
        let d = tab.reduced(&phase1);
        let certificate = (0..m).map(|i| sign[i] * (1.0 - d[n + i])).collect();
        return Ok(LpOutcome::Infeasible {
            certificate,
            infeasibility: infeas,
        });
    }
    // drive remaining artificials out of the basis
    for i in 0..m {
        if tab.basis[i] >= n {
            let best = (0..n).max_by(|&x, &y| tab.at(i, x).abs().total_cmp(&tab.at(i, y).abs()));
            if let Some(j) = best.filter(|&j| tab.at(i, j).abs() > 1e-9) {
                tab.pivot(i, j);
            }
        }
    }
    let mut cost = c.to_vec();
    cost.extend(std::iter::repeat(0.0).take(m));
    // an artificial left in the basis sits on a redundant row and stays at zero
    if !tab.optimize(&cost, n, max_pivots)? {
        return Ok(LpOutcome::Unbounded);
    }
    let mut x = vec![0.0; n];
    for i in 0..m {
        if tab.basis[i] < tab.n_struct {
            x[tab.basis[i]] = tab.rhs[i].max(0.0);
        }
    }
    let d = tab.reduced(&cost);
    let duals = (0..m).map(|i| -sign[i] * d[n + i]).collect();
    let objective = x.iter().zip(c).map(|(a, b)| a * b).sum();
    Ok(LpOutcome::Optimal { x, objective, duals })
}
