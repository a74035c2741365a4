//! Control-affine systems `xdot = f(x) + g(x) u` with cost `q(x) + 1/2 u^T D u`,
//! their linearizations and the associated Hamiltonian flow.

mod builtin;
mod hamiltonian;
mod polynomial;

pub use builtin::{Example1, Pendulum, PendulumParams};
pub use hamiltonian::{hj_residual, HamiltonianSystem, NominalHamiltonianField};
pub use polynomial::{Polynomial, PolynomialSystem, Term};

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

pub type SystemRef = Arc<dyn ControlAffineSystem>;

/// Relative finite-difference step used whenever an analytic derivative is absent.
pub const FD_STEP: f64 = 1e-6;

fn fd_step(xi: f64) -> f64 {
    FD_STEP * xi.abs().max(1.0)
}

/// Central-difference Jacobian of `map` at `x`.
pub fn fd_jacobian(map: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    let mut xp = x.clone();
    for j in 0..n {
        let h = fd_step(x[j]);
        xp[j] = x[j] + h;
        let fp = map(&xp);
        xp[j] = x[j] - h;
        let fm = map(&xp);
        xp[j] = x[j];
        cols.push((fp - fm) / (2.0 * h));
    }
    DMatrix::from_columns(&cols)
}

/// Central-difference gradient of a scalar map.
pub fn fd_gradient(map: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>) -> DVector<f64> {
    let mut xp = x.clone();
    DVector::from_fn(x.len(), |j, _| {
        let h = fd_step(x[j]);
        xp[j] = x[j] + h;
        let fp = map(&xp);
        xp[j] = x[j] - h;
        let fm = map(&xp);
        xp[j] = x[j];
        (fp - fm) / (2.0 * h)
    })
}

/// A vector field on R^dim.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, z: &DVector<f64>) -> DVector<f64>;
}

/// Wraps a closure as a [`VectorField`].
pub struct FnField<F> {
    dim: usize,
    map: F,
}

impl<F: Fn(&DVector<f64>) -> DVector<f64> + Sync> FnField<F> {
    pub fn new(dim: usize, map: F) -> Self {
        Self { dim, map }
    }
}

impl<F: Fn(&DVector<f64>) -> DVector<f64> + Sync> VectorField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, z: &DVector<f64>) -> DVector<f64> {
        (self.map)(z)
    }
}

/// The uncontrolled drift `xdot = f(x)` of a system.
pub struct Drift(pub SystemRef);

impl VectorField for Drift {
    fn dim(&self) -> usize {
        self.0.n()
    }
    fn eval(&self, z: &DVector<f64>) -> DVector<f64> {
        self.0.f(z)
    }
}

/// Control-affine plant with running cost. Derivatives default to central
/// finite differences with step `1e-6 * max(1, |x_i|)`.
pub trait ControlAffineSystem: Send + Sync {
    /// State dimension.
    fn n(&self) -> usize;
    /// Input dimension.
    fn m(&self) -> usize;
    fn f(&self, x: &DVector<f64>) -> DVector<f64>;
    fn g(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// Control weight `D`.
    fn d(&self) -> &DMatrix<f64>;
    /// Inverse of `D`; implementations should cache it.
    fn d_inv(&self) -> &DMatrix<f64>;
    fn q(&self, x: &DVector<f64>) -> f64;

    fn jacobian_f(&self, x: &DVector<f64>) -> DMatrix<f64> {
        fd_jacobian(|y| self.f(y), x)
    }

    fn grad_q(&self, x: &DVector<f64>) -> DVector<f64> {
        fd_gradient(|y| self.q(y), x)
    }

    /// `Q0 = d^2 q / dx^2 (0)`. The fallback differentiates `grad_q` with a
    /// coarser step (1e-4) since it may itself be a finite difference.
    fn hess_q0(&self) -> DMatrix<f64> {
        let n = self.n();
        let zero = DVector::zeros(n);
        let h = 1e-4;
        let mut cols = Vec::with_capacity(n);
        for j in 0..n {
            let mut e = zero.clone();
            e[j] = h;
            let gp = self.grad_q(&e);
            e[j] = -h;
            let gm = self.grad_q(&e);
            cols.push((gp - gm) / (2.0 * h));
        }
        let h = DMatrix::from_columns(&cols);
        (&h + h.transpose()) * 0.5
    }

    /// `R(x) = g(x) D^{-1} g(x)^T`.
    fn r(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let g = self.g(x);
        &g * self.d_inv() * g.transpose()
    }

    /// Gradient in `x` of `p^T R(x) p`.
    fn grad_rform(&self, x: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        fd_gradient(|y| (self.r(y) * p).dot(p), x)
    }
}

/// Linearization at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub A: DMatrix<f64>,
    pub B: DMatrix<f64>,
    pub R0: DMatrix<f64>,
    pub Q0: DMatrix<f64>,
    pub D: DMatrix<f64>,
}

pub fn linearize(sys: &dyn ControlAffineSystem) -> Result<Linearization> {
    let n = sys.n();
    let zero = DVector::zeros(n);
    let D = sys.d().clone();
    let d_inv = D.clone().try_inverse().ok_or(Error::ControlWeightSingular)?;
    let B = sys.g(&zero);
    let R0 = &B * &d_inv * B.transpose();
    let R0 = (&R0 + R0.transpose()) * 0.5;
    Ok(Linearization { A: sys.jacobian_f(&zero), B, R0, Q0: sys.hess_q0(), D })
}

/// `f(x)^T p - 1/2 p^T R(x) p + q(x)`.
pub fn hamiltonian_value(sys: &dyn ControlAffineSystem, x: &DVector<f64>, p: &DVector<f64>) -> Result<f64> {
    if x.len() != sys.n() || p.len() != sys.n() {
        return Err(Error::Dimension(format!("x has {}, p has {}, system has {}", x.len(), p.len(), sys.n())));
    }
    Ok(sys.f(x).dot(p) - 0.5 * (sys.r(x) * p).dot(p) + sys.q(x))
}

/// Invert a symmetric positive definite control weight, rejecting anything else.
pub(crate) fn checked_d_inv(d: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !d.is_square() {
        return Err(Error::Dimension("control weight must be square".into()));
    }
    if (d - d.transpose()).norm() > 1e-12 * (1.0 + d.norm()) {
        return Err(Error::InvalidArgument("control weight not symmetric".into()));
    }
    let chol = nalgebra::Cholesky::new(d.clone()).ok_or(Error::ControlWeightSingular)?;
    Ok(chol.inverse())
}

/// Check the structural invariants of a system: equilibrium at the origin,
/// `q(0) = 0`, `grad q(0) = 0`, symmetric `Q0`, positive definite `D`.
pub fn validate(sys: &dyn ControlAffineSystem) -> Result<()> {
    let n = sys.n();
    let zero = DVector::zeros(n);
    let f0 = sys.f(&zero);
    if f0.len() != n {
        return Err(Error::Dimension(format!("f returns {} entries for n = {n}", f0.len())));
    }
    if f0.norm() > 1e-12 {
        return Err(Error::InvalidArgument(format!("f(0) = {:?} is not zero", f0.as_slice())));
    }
    let g0 = sys.g(&zero);
    if g0.nrows() != n || g0.ncols() != sys.m() {
        return Err(Error::Dimension(format!("g is {}x{}, expected {}x{}", g0.nrows(), g0.ncols(), n, sys.m())));
    }
    if sys.d().nrows() != sys.m() {
        return Err(Error::Dimension("control weight size differs from input dimension".into()));
    }
    checked_d_inv(sys.d())?;
    if sys.q(&zero).abs() > 1e-12 || sys.grad_q(&zero).norm() > 1e-12 {
        return Err(Error::InvalidArgument("state cost must vanish to second order at 0".into()));
    }
    let q0 = sys.hess_q0();
    if (&q0 - q0.transpose()).norm() > 1e-8 * (1.0 + q0.norm()) {
        return Err(Error::InvalidArgument("Q0 not symmetric".into()));
    }
    Ok(())
}
