//! Independent oracles shared by several test targets.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use volterra_ocp::grid::{Path, PathKind, TimeGrid};
use volterra_ocp::second_order::Direction;
use volterra_ocp::structure::StructureReport;
use volterra_ocp::synthesis::Jet;

pub fn smooth_direction(g: &TimeGrid, m: usize, n: usize, seed: u64) -> Direction {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let coef: Vec<Vec<f64>> = (0..m).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let v = Path::from_fn(g, m, PathKind::Control, |_, t| {
        coef.iter()
            .map(|c| c.iter().enumerate().map(|(f, a)| a * (PI * f as f64 * t).cos()).sum())
            .collect()
    });
    let z0 = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Direction { v, z0 }
}

/// Window maximum from a least-squares parabola through the five nodes
/// around the discrete argmax.
pub fn window_max_oracle(x: &[f64], g: &TimeGrid, tau: f64, eps: f64) -> f64 {
    let nodes: Vec<usize> = (0..g.len()).filter(|&k| (g.t(k) - tau).abs() <= eps + 1e-12).collect();
    let &k = nodes.iter().max_by(|&&a, &&b| x[a].total_cmp(&x[b])).unwrap();
    let lo = k.saturating_sub(2).max(nodes[0]);
    let hi = (lo + 4).min(*nodes.last().unwrap());
    let lo = hi - 4;
    let a = DMatrix::from_fn(5, 3, |r, c| (g.t(lo + r) - g.t(k)).powi(c as i32));
    let b = DVector::from_fn(5, |r, _| x[lo + r]);
    let coef = a.svd(true, true).solve(&b, 1e-14).unwrap();
    let (c0, c1, c2) = (coef[0], coef[1], coef[2]);
    if c2 >= 0.0 {
        return x[k];
    }
    c0 - c1 * c1 / (4.0 * c2)
}

/// b(t) = Σ a_f sin(ω_f t + φ_f) with its derivatives.
pub fn trig_target(seed: u64, report: &StructureReport) -> impl Fn(usize, f64) -> Vec<f64> + '_ {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let modes: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.gen_range(-0.2..0.2), rng.gen_range(1.0..6.0), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    move |i, t| {
        (0..=report.constraints[i].order)
            .map(|j| {
                modes
                    .iter()
                    .map(|(a, w, p)| a * w.powi(j as i32) * (w * t + p + j as f64 * PI / 2.0).sin())
                    .sum()
            })
            .collect()
    }
}

/// Minimum weighted-norm u on Gauss nodes subject to the moment conditions
/// ∫ (t₂-s)^p/p! u = γ, with γ from Taylor's formula, via a dense SVD solve.
pub fn least_squares_oracle(q: usize, left: &Jet, right: &Jet, nodes: usize) -> (Vec<f64>, Vec<f64>) {
    let (t1, t2) = (left.t, right.t);
    let len = t2 - t1;
    let fact = |n: usize| (1..=n).product::<usize>() as f64;
    // Gauss nodes on [t1, t2] from the Legendre recurrence and Newton's method
    let mut s = Vec::new();
    let mut w = Vec::new();
    let legendre = |x: f64| {
        let (mut p0, mut p1) = (1.0, x);
        for k in 2..=nodes {
            let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
            p0 = p1;
            p1 = p2;
        }
        (p1, nodes as f64 * (x * p1 - p0) / (x * x - 1.0))
    };
    for i in 0..nodes {
        let mut x = (PI * (i as f64 + 0.75) / (nodes as f64 + 0.5)).cos();
        for _ in 0..50 {
            let (p, dp) = legendre(x);
            x -= p / dp;
        }
        let (_, dp) = legendre(x);
        s.push(t1 + 0.5 * len * (x + 1.0));
        w.push(len / ((1.0 - x * x) * dp * dp));
    }
    let gamma = DVector::from_fn(q, |j, _| {
        right.derivs[j] - (j..q).map(|i| left.derivs[i] * len.powi((i - j) as i32) / fact(i - j)).sum::<f64>()
    });
    let b = DMatrix::from_fn(q, s.len(), |j, k| w[k].sqrt() * (t2 - s[k]).powi((q - 1 - j) as i32) / fact(q - 1 - j));
    let y = b.pseudo_inverse(1e-14).unwrap() * gamma;
    let u = (0..s.len()).map(|k| y[k] / w[k].sqrt()).collect();
    (s, u)
}
