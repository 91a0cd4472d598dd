//! Direct transcription oracle for linear-quadratic problems: the discrete
//! problem in x = (u_0..u_N, y0) is a QP, solved here by a semismooth Newton
//! (primal-dual active set) iteration on its KKT system. The state map is
//! assembled by forward substitution, independently of the library's Picard
//! solver, and the multipliers come straight out of the KKT solve.

use nalgebra::{DMatrix, DVector};
use volterra_ocp::bv::Measure;
use volterra_ocp::grid::{Path, PathKind, TimeGrid};
use volterra_ocp::problem::Problem;

pub struct Transcription {
    pub u: Path,
    pub y0: Vec<f64>,
    /// Oracle states, node-major.
    pub y: Vec<Vec<f64>>,
    pub cost: f64,
    pub eta: Measure,
    pub psi: Vec<f64>,
    pub iterations: usize,
}

fn weight(k: usize, j: usize, h: f64) -> f64 {
    if k == 0 || j > k {
        0.0
    } else if j == 0 || j == k {
        0.5 * h
    } else {
        h
    }
}

/// y_k = s0_k + S_k x for the linear kernel on a uniform grid.
fn state_map(p: &dyn Problem, g: &TimeGrid) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>) {
    let d = p.dims();
    let (m, n) = (d.m, d.n);
    let nn = g.len();
    let h = g.h(0);
    let nx = nn * m + n;
    let zu = vec![0.0; m];
    let zy = vec![0.0; n];
    let mut s0: Vec<DVector<f64>> = Vec::with_capacity(nn);
    let mut s: Vec<DMatrix<f64>> = Vec::with_capacity(nn);
    for k in 0..nn {
        let tk = g.t(k);
        // y_k - w_kk B_kk y_k = y0 + Σ_{j<k} w (A u_j + B y_j + f0) + w_kk (A u_k + f0)
        let mut rhs0 = DVector::zeros(n);
        let mut rhs = DMatrix::zeros(n, nx);
        for i in 0..n {
            rhs[(i, nn * m + i)] = 1.0;
        }
        for j in 0..=k {
            let w = weight(k, j, h);
            if w == 0.0 {
                continue;
            }
            let tj = g.t(j);
            let f0 = p.f(tk, tj, &zu, &zy);
            let a = p.f_u(tk, tj, &zu, &zy);
            rhs0 += w * f0;
            for c in 0..m {
                for r in 0..n {
                    rhs[(r, j * m + c)] += w * a[(r, c)];
                }
            }
            if j < k {
                let b = p.f_y(tk, tj, &zu, &zy);
                rhs0 += w * &b * &s0[j];
                rhs += w * &b * &s[j];
            }
        }
        let bkk = p.f_y(tk, tk, &zu, &zy) * weight(k, k, h);
        let lhs = DMatrix::identity(n, n) - bkk;
        let lu = lhs.lu();
        s0.push(lu.solve(&rhs0).unwrap());
        s.push(lu.solve(&rhs).unwrap());
    }
    (s0, s)
}

/// Solves the transcribed problem on a uniform grid.
pub fn solve(p: &dyn Problem, g: &TimeGrid) -> Transcription {
    let d = p.dims();
    let (m, n) = (d.m, d.n);
    let nn = g.len();
    let nx = nn * m + n;
    let h = g.h(0);
    let (s0, s) = state_map(p, g);
    let zu = vec![0.0; m];
    let zy = vec![0.0; n];

    // cost ½ xᵀ H x + c·x + c0
    let mut hm = DMatrix::zeros(nx, nx);
    let mut cv = DVector::zeros(nx);
    let lg = p.l_grad(&zu, &zy);
    let lh = p.l_hess(&zu, &zy);
    for k in 0..nn {
        let w = if k == 0 || k == nn - 1 { 0.5 * h } else { h };
        // (u_k, y_k) = P_k x + (0, s0_k)
        let mut pk = DMatrix::zeros(m + n, nx);
        for c in 0..m {
            pk[(c, k * m + c)] = 1.0;
        }
        pk.view_mut((m, 0), (n, nx)).copy_from(&s[k]);
        let mut off = DVector::zeros(m + n);
        off.rows_mut(m, n).copy_from(&s0[k]);
        hm += w * pk.transpose() * &lh * &pk;
        cv += w * pk.transpose() * (&lg + &lh * &off);
    }
    let mut pe = DMatrix::zeros(2 * n, nx);
    pe.view_mut((0, 0), (n, nx)).copy_from(&s[0]);
    pe.view_mut((n, 0), (n, nx)).copy_from(&s[nn - 1]);
    let mut offe = DVector::zeros(2 * n);
    offe.rows_mut(0, n).copy_from(&s0[0]);
    offe.rows_mut(n, n).copy_from(&s0[nn - 1]);
    let ph = p.phi_hess(&zy, &zy);
    hm += pe.transpose() * &ph * &pe;
    cv += pe.transpose() * (p.phi_grad(&zy, &zy) + &ph * &offe);

    // constraints: equalities E x = e, inequalities G x ≤ hv
    let jac = p.big_phi_jac(&zy, &zy);
    let phi0 = p.big_phi(&zy, &zy);
    let lin = &jac * &pe;
    let base = &phi0 + &jac * &offe;
    let e_mat = lin.rows(0, d.s_e).into_owned();
    let e_rhs = -base.rows(0, d.s_e).into_owned();
    let mut g_rows: Vec<DVector<f64>> = Vec::new();
    let mut g_rhs: Vec<f64> = Vec::new();
    // (kind, node or index, constraint)
    let mut tags: Vec<(bool, usize, usize)> = Vec::new();
    for i in d.s_e..d.s() {
        g_rows.push(lin.row(i).transpose());
        g_rhs.push(-base[i]);
        tags.push((false, i, 0));
    }
    let gj = p.g_jac(&zy);
    let g0 = p.g(&zy);
    for k in 0..nn {
        for i in 0..d.r {
            let row = (gj.row(i) * &s[k]).transpose();
            g_rows.push(row);
            g_rhs.push(-(g0[i] + (gj.row(i) * &s0[k])[0]));
            tags.push((true, k, i));
        }
    }
    let ni = g_rows.len();

    let mut x = DVector::zeros(nx);
    let mut lam = DVector::zeros(ni);
    let mut mu = DVector::zeros(d.s_e);
    let mut active: Vec<bool> = vec![false; ni];
    let mut iterations = 0;
    for it in 0..200 {
        iterations = it + 1;
        let act: Vec<usize> = (0..ni).filter(|&q| active[q]).collect();
        let dim = nx + d.s_e + act.len();
        let mut kkt = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        kkt.view_mut((0, 0), (nx, nx)).copy_from(&hm);
        rhs.rows_mut(0, nx).copy_from(&(-&cv));
        for r in 0..d.s_e {
            for c in 0..nx {
                kkt[(nx + r, c)] = e_mat[(r, c)];
                kkt[(c, nx + r)] = e_mat[(r, c)];
            }
            rhs[nx + r] = e_rhs[r];
        }
        for (a, &q) in act.iter().enumerate() {
            let r = nx + d.s_e + a;
            for c in 0..nx {
                kkt[(r, c)] = g_rows[q][c];
                kkt[(c, r)] = g_rows[q][c];
            }
            rhs[r] = g_rhs[q];
        }
        let sol = match kkt.clone().lu().solve(&rhs) {
            Some(s) if s.iter().all(|v| v.is_finite()) && (&kkt * &s - &rhs).amax() < 1e-9 * (1.0 + rhs.amax()) => s,
            _ => kkt.svd(true, true).solve(&rhs, 1e-12).unwrap(),
        };
        x = sol.rows(0, nx).into_owned();
        mu = sol.rows(nx, d.s_e).into_owned();
        lam.fill(0.0);
        for (a, &q) in act.iter().enumerate() {
            lam[q] = sol[nx + d.s_e + a];
        }
        let next: Vec<bool> = (0..ni)
            .map(|q| lam[q] + (g_rows[q].dot(&x) - g_rhs[q]) > 1e-12)
            .collect();
        if next == active {
            break;
        }
        active = next;
    }

    let u = Path::from_fn(g, m, PathKind::Control, |k, _| (0..m).map(|c| x[k * m + c]).collect());
    let y: Vec<Vec<f64>> = (0..nn).map(|k| (&s0[k] + &s[k] * &x).iter().copied().collect()).collect();
    let y0 = y[0].clone();
    let cost = 0.5 * x.dot(&(&hm * &x)) + cv.dot(&x) + {
        let mut c0 = 0.0;
        for k in 0..nn {
            let w = if k == 0 || k == nn - 1 { 0.5 * h } else { h };
            c0 += w * p.l(&zu, s0[k].as_slice());
        }
        c0 + p.phi(s0[0].as_slice(), s0[nn - 1].as_slice())
    };
    let mut eta = Measure::zero(g, d.r);
    let mut psi: Vec<f64> = mu.iter().copied().collect();
    psi.resize(d.s(), 0.0);
    for (q, &(path, a, i)) in tags.iter().enumerate() {
        if path {
            if lam[q] != 0.0 {
                eta.add_atom_component(a, i, lam[q]);
            }
        } else {
            psi[a] = lam[q];
        }
    }
    Transcription {
        u,
        y0,
        y,
        cost,
        eta,
        psi,
        iterations,
    }
}
