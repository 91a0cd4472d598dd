//! Small scalar problems built from plain function pointers.

use nalgebra::{DMatrix, DVector};
use volterra_ocp::problem::{ChainElement, ConstraintChain, DerivativeChain, Dims, Problem};

type Kernel = fn(f64, f64, f64, f64) -> f64;

fn zero(_: f64, _: f64, _: f64, _: f64) -> f64 {
    0.0
}

/// m = n = 1; running cost ½ a u² + b u + c y; terminal cost d yT + ½ e yT².
pub struct Toy {
    pub f: Kernel,
    pub fu: Kernel,
    pub fy: Kernel,
    pub fuu: Kernel,
    pub fuy: Kernel,
    pub fyy: Kernel,
    pub ftau: Kernel,
    pub ftau_u: Kernel,
    pub ftau_y: Kernel,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub cap: Option<f64>,
    /// Endpoint equality y0 = value.
    pub fixed_y0: Option<f64>,
    pub horizon: f64,
    pub chain: DerivativeChain,
}

impl Toy {
    pub fn new(f: Kernel, fu: Kernel, fy: Kernel) -> Self {
        Toy {
            f,
            fu,
            fy,
            fuu: zero,
            fuy: zero,
            fyy: zero,
            ftau: zero,
            ftau_u: zero,
            ftau_y: zero,
            a: 0.0,
            b: 0.0,
            c: 0.0,
            d: 0.0,
            e: 0.0,
            cap: None,
            fixed_y0: None,
            horizon: 1.0,
            chain: DerivativeChain::default(),
        }
    }

    /// Adds g = y - cap with the trivial order-1 chain valid for f = u.
    pub fn with_cap(mut self, cap: f64) -> Self {
        self.cap = Some(cap);
        self.chain = DerivativeChain {
            constraints: vec![ConstraintChain {
                order: 1,
                levels: vec![
                    ChainElement::pointwise(move |_, y| y[0] - cap, |_, _| vec![0.0], |_, _| vec![1.0]),
                    ChainElement::pointwise(|u, _| u[0], |_, _| vec![1.0], |_, _| vec![0.0]),
                ],
            }],
        };
        self
    }
}

/// f = u_s
pub fn integrator() -> Toy {
    Toy::new(|_, _, u, _| u, |_, _, _, _| 1.0, zero)
}

/// f = y_s
pub fn growth() -> Toy {
    Toy::new(|_, _, _, y| y, zero, |_, _, _, _| 1.0)
}

/// f = u_s y_s
pub fn bilinear() -> Toy {
    let mut p = Toy::new(|_, _, u, y| u * y, |_, _, _, y| y, |_, _, u, _| u);
    p.fuy = |_, _, _, _| 1.0;
    p
}

/// f = e^{-(t-s)} u_s
pub fn exp_kernel() -> Toy {
    let mut p = Toy::new(|t, s, u, _| (s - t).exp() * u, |t, s, _, _| (s - t).exp(), zero);
    p.ftau = |t, s, u, _| -(s - t).exp() * u;
    p.ftau_u = |t, s, _, _| -(s - t).exp();
    p
}

fn m11(x: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, x)
}

impl Problem for Toy {
    fn name(&self) -> &str {
        "toy"
    }

    fn dims(&self) -> Dims {
        Dims {
            m: 1,
            n: 1,
            r: usize::from(self.cap.is_some()),
            s_e: usize::from(self.fixed_y0.is_some()),
            s_i: 0,
        }
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn lipschitz(&self) -> f64 {
        1.0
    }

    fn f(&self, t: f64, s: f64, u: &[f64], y: &[f64]) -> DVector<f64> {
        DVector::from_element(1, (self.f)(t, s, u[0], y[0]))
    }

    fn f_u(&self, t: f64, s: f64, u: &[f64], y: &[f64]) -> DMatrix<f64> {
        m11((self.fu)(t, s, u[0], y[0]))
    }

    fn f_y(&self, t: f64, s: f64, u: &[f64], y: &[f64]) -> DMatrix<f64> {
        m11((self.fy)(t, s, u[0], y[0]))
    }

    fn f_hess(&self, t: f64, s: f64, u: &[f64], y: &[f64]) -> Vec<DMatrix<f64>> {
        let (uu, uy, yy) = (
            (self.fuu)(t, s, u[0], y[0]),
            (self.fuy)(t, s, u[0], y[0]),
            (self.fyy)(t, s, u[0], y[0]),
        );
        vec![DMatrix::from_row_slice(2, 2, &[uu, uy, uy, yy])]
    }

    fn f_tau(&self, t: f64, s: f64, u: &[f64], y: &[f64]) -> DVector<f64> {
        DVector::from_element(1, (self.ftau)(t, s, u[0], y[0]))
    }

    fn f_tau_u(&self, t: f64, s: f64, u: &[f64], y: &[f64]) -> DMatrix<f64> {
        m11((self.ftau_u)(t, s, u[0], y[0]))
    }

    fn f_tau_y(&self, t: f64, s: f64, u: &[f64], y: &[f64]) -> DMatrix<f64> {
        m11((self.ftau_y)(t, s, u[0], y[0]))
    }

    fn l(&self, u: &[f64], y: &[f64]) -> f64 {
        0.5 * self.a * u[0] * u[0] + self.b * u[0] + self.c * y[0]
    }

    fn l_grad(&self, u: &[f64], _y: &[f64]) -> DVector<f64> {
        DVector::from_vec(vec![self.a * u[0] + self.b, self.c])
    }

    fn l_hess(&self, _u: &[f64], _y: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[self.a, 0.0, 0.0, 0.0])
    }

    fn phi(&self, _y0: &[f64], yt: &[f64]) -> f64 {
        self.d * yt[0] + 0.5 * self.e * yt[0] * yt[0]
    }

    fn phi_grad(&self, _y0: &[f64], yt: &[f64]) -> DVector<f64> {
        DVector::from_vec(vec![0.0, self.d + self.e * yt[0]])
    }

    fn phi_hess(&self, _y0: &[f64], _yt: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, self.e])
    }

    fn g(&self, y: &[f64]) -> DVector<f64> {
        match self.cap {
            Some(c) => DVector::from_element(1, y[0] - c),
            None => DVector::zeros(0),
        }
    }

    fn g_jac(&self, _y: &[f64]) -> DMatrix<f64> {
        match self.cap {
            Some(_) => m11(1.0),
            None => DMatrix::zeros(0, 1),
        }
    }

    fn big_phi(&self, y0: &[f64], _yt: &[f64]) -> DVector<f64> {
        DVector::from_iterator(usize::from(self.fixed_y0.is_some()), self.fixed_y0.map(|v| y0[0] - v))
    }

    fn big_phi_jac(&self, _y0: &[f64], _yt: &[f64]) -> DMatrix<f64> {
        let s = usize::from(self.fixed_y0.is_some());
        DMatrix::from_fn(s, 2, |_, c| if c == 0 { 1.0 } else { 0.0 })
    }

    fn chain(&self) -> &DerivativeChain {
        &self.chain
    }
}
