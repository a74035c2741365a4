use nalgebra::{DMatrix, DVector};

use super::{linearize, ControlAffineSystem, Linearization, SystemRef, VectorField};
use crate::Result;

/// Canonical equations of `H(x, p) = f^T p - 1/2 p^T R(x) p + q(x)` on `z = (x, p)`:
/// `xdot = f - R p`, `pdot = -(df/dx)^T p + 1/2 d(p^T R p)/dx^T - dq/dx^T`.
#[derive(Clone)]
pub struct HamiltonianSystem {
    pub sys: SystemRef,
    pub lin: Linearization,
    /// `[[A, -R0], [-Q0, -A^T]]`.
    pub H0: DMatrix<f64>,
}

impl HamiltonianSystem {
    pub fn new(sys: SystemRef) -> Result<Self> {
        let lin = linearize(sys.as_ref())?;
        let n = sys.n();
        let mut H0 = DMatrix::zeros(2 * n, 2 * n);
        H0.view_mut((0, 0), (n, n)).copy_from(&lin.A);
        H0.view_mut((0, n), (n, n)).copy_from(&(-&lin.R0));
        H0.view_mut((n, 0), (n, n)).copy_from(&(-&lin.Q0));
        H0.view_mut((n, n), (n, n)).copy_from(&(-lin.A.transpose()));
        Ok(Self { sys, lin, H0 })
    }

    pub fn n(&self) -> usize {
        self.sys.n()
    }

    pub fn split(&self, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let n = self.n();
        (z.rows(0, n).into_owned(), z.rows(n, n).into_owned())
    }

    pub fn hamiltonian(&self, z: &DVector<f64>) -> f64 {
        let (x, p) = self.split(z);
        let s = self.sys.as_ref();
        s.f(&x).dot(&p) - 0.5 * (s.r(&x) * &p).dot(&p) + s.q(&x)
    }

    /// `F(z) - H0 z`.
    pub fn nonlinear_part(&self, z: &DVector<f64>) -> DVector<f64> {
        self.eval(z) - &self.H0 * z
    }
}

impl VectorField for HamiltonianSystem {
    fn dim(&self) -> usize {
        2 * self.n()
    }
    fn eval(&self, z: &DVector<f64>) -> DVector<f64> {
        let (x, p) = self.split(z);
        let s = self.sys.as_ref();
        let xdot = s.f(&x) - s.r(&x) * &p;
        let pdot = -s.jacobian_f(&x).transpose() * &p + s.grad_rform(&x, &p) * 0.5 - s.grad_q(&x);
        let mut out = DVector::zeros(2 * x.len());
        out.rows_mut(0, x.len()).copy_from(&xdot);
        out.rows_mut(x.len(), x.len()).copy_from(&pdot);
        out
    }
}

/// Hamiltonian flow of `H0(x, p) = f(x)^T p`: `xdot = f`, `pdot = -(df/dx)^T p`.
pub struct NominalHamiltonianField(pub SystemRef);

impl NominalHamiltonianField {
    pub fn hamiltonian(&self, z: &DVector<f64>) -> f64 {
        let n = self.0.n();
        let x = z.rows(0, n).into_owned();
        self.0.f(&x).dot(&z.rows(n, n))
    }
}

impl VectorField for NominalHamiltonianField {
    fn dim(&self) -> usize {
        2 * self.0.n()
    }
    fn eval(&self, z: &DVector<f64>) -> DVector<f64> {
        let n = self.0.n();
        let x = z.rows(0, n).into_owned();
        let p = z.rows(n, n).into_owned();
        let mut out = DVector::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&self.0.f(&x));
        out.rows_mut(n, n).copy_from(&(-self.0.jacobian_f(&x).transpose() * p));
        out
    }
}

/// Left side of the HJ equation `dV/dx f - 1/2 dV/dx R dV/dx^T + q` for a supplied gradient.
pub fn hj_residual(sys: &dyn ControlAffineSystem, v_grad: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>) -> f64 {
    let p = v_grad(x);
    sys.f(x).dot(&p) - 0.5 * (sys.r(x) * &p).dot(&p) + sys.q(x)
}
