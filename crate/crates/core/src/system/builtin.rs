use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use super::{checked_d_inv, ControlAffineSystem};
use crate::{Error, Result};

/// Two-state example with closed-form principal eigenfunctions
/// `phi1 = x1 - 2 x2` (eigenvalue -1) and `phi2 = x1 + sin x2` (eigenvalue 2).
///
/// `f = alpha (-cos(x2) phi1 + 4 phi2, phi1 + 2 phi2)` with `alpha = 1 / (cos x2 + 2)`,
/// `g = (1, 0)`, `D = 1`, `q = (phi1^2 + phi2^2) / 2`.
#[derive(Debug, Clone)]
pub struct Example1 {
    d: DMatrix<f64>,
}

impl Default for Example1 {
    fn default() -> Self {
        Self { d: DMatrix::identity(1, 1) }
    }
}

impl Example1 {
    pub fn new() -> Self {
        Self::default()
    }

    /// Closed-form eigenfunctions `(phi1, phi2)`.
    pub fn eigenfunctions(x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![x[0] - 2.0 * x[1], x[0] + x[1].sin()])
    }

    pub fn eigenfunction_jacobian(x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 1.0, x[1].cos()])
    }
}

impl ControlAffineSystem for Example1 {
    fn n(&self) -> usize {
        2
    }
    fn m(&self) -> usize {
        1
    }
    fn f(&self, x: &DVector<f64>) -> DVector<f64> {
        let (a, b) = (x[0] - 2.0 * x[1], x[0] + x[1].sin());
        let alpha = 1.0 / (x[1].cos() + 2.0);
        DVector::from_vec(vec![alpha * (-x[1].cos() * a + 4.0 * b), alpha * (a + 2.0 * b)])
    }
    fn g(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_column_slice(2, 1, &[1.0, 0.0])
    }
    fn d(&self) -> &DMatrix<f64> {
        &self.d
    }
    fn d_inv(&self) -> &DMatrix<f64> {
        &self.d
    }
    fn q(&self, x: &DVector<f64>) -> f64 {
        let (a, b) = (x[0] - 2.0 * x[1], x[0] + x[1].sin());
        0.5 * (a * a + b * b)
    }
    fn jacobian_f(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (s, c) = x[1].sin_cos();
        let (a, b) = (x[0] - 2.0 * x[1], x[0] + s);
        let alpha = 1.0 / (c + 2.0);
        let dalpha = s * alpha * alpha;
        let f1 = -c * a + 4.0 * b;
        let f2 = a + 2.0 * b;
        DMatrix::from_row_slice(
            2,
            2,
            &[alpha * (4.0 - c), dalpha * f1 + alpha * (s * a + 6.0 * c), 3.0 * alpha, dalpha * f2 + alpha * (2.0 * c - 2.0)],
        )
    }
    fn grad_q(&self, x: &DVector<f64>) -> DVector<f64> {
        let (s, c) = x[1].sin_cos();
        let (a, b) = (x[0] - 2.0 * x[1], x[0] + s);
        DVector::from_vec(vec![a + b, -2.0 * a + c * b])
    }
    fn hess_q0(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 5.0])
    }
    fn grad_rform(&self, _x: &DVector<f64>, _p: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(2)
    }
}

/// Physical parameters of the cart-pendulum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumParams {
    /// Cart mass.
    pub cart_mass: f64,
    /// Pendulum mass.
    pub mass: f64,
    /// Cart friction.
    pub friction: f64,
    /// Distance to the pendulum center of mass.
    pub length: f64,
    /// Pendulum inertia.
    pub inertia: f64,
    pub gravity: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self { cart_mass: 0.5, mass: 0.2, friction: 0.1, length: 0.3, inertia: 0.006, gravity: 9.81 }
    }
}

/// Cart-pendulum with the cart position removed; state `(theta, psi, vartheta)`
/// is pendulum angle (0 upright), angular rate and cart velocity.
/// Cost `q = x^T x` and `D = 2`, i.e. running cost `x^T x + u^2`.
#[derive(Debug, Clone)]
pub struct Pendulum {
    pub params: PendulumParams,
    d: DMatrix<f64>,
    d_inv: DMatrix<f64>,
}

impl Pendulum {
    pub fn new(params: PendulumParams) -> Result<Self> {
        if !(params.gravity > 0.0) {
            return Err(Error::InvalidArgument("gravity must be positive".into()));
        }
        // det M(theta) = (ml cos)^2 - (M+m)(I+ml^2) vanishes somewhere iff (ml)^2 >= (M+m)(I+ml^2).
        let ml = params.mass * params.length;
        let ab = (params.cart_mass + params.mass) * (params.inertia + params.mass * params.length.powi(2));
        if ml * ml >= ab {
            let theta = ((ab.sqrt() / ml).min(1.0)).acos();
            return Err(Error::MassMatrixSingular { theta });
        }
        let d = DMatrix::from_element(1, 1, 2.0);
        let d_inv = checked_d_inv(&d)?;
        Ok(Self { params, d, d_inv })
    }

    pub fn with_gravity(gravity: f64) -> Result<Self> {
        Self::new(PendulumParams { gravity, ..Default::default() })
    }

    /// `[[ml cos(theta - pi), M + m], [I + ml^2, ml cos(theta - pi)]]`.
    pub fn mass_matrix(&self, theta: f64) -> Matrix2<f64> {
        let p = &self.params;
        let c = -p.mass * p.length * theta.cos();
        Matrix2::new(c, p.cart_mass + p.mass, p.inertia + p.mass * p.length * p.length, c)
    }

    /// Inverse mass matrix, or an error naming `theta` when it is singular.
    pub fn mass_matrix_inverse(&self, theta: f64) -> Result<Matrix2<f64>> {
        let m = self.mass_matrix(theta);
        if m.determinant().abs() < 1e-12 * m.norm_squared() {
            return Err(Error::MassMatrixSingular { theta });
        }
        m.try_inverse().ok_or(Error::MassMatrixSingular { theta })
    }

    fn minv(&self, theta: f64) -> Matrix2<f64> {
        self.mass_matrix_inverse(theta).expect("mass matrix nonsingular for validated parameters")
    }

    /// Derivative of the inverse mass matrix with respect to theta.
    fn dminv(&self, theta: f64) -> Matrix2<f64> {
        let p = &self.params;
        let minv = self.minv(theta);
        let dc = p.mass * p.length * theta.sin();
        -minv * Matrix2::from_diagonal_element(dc) * minv
    }

    fn rhs(&self, x: &DVector<f64>) -> Vector2<f64> {
        let p = &self.params;
        let s = -x[0].sin();
        Vector2::new(-p.friction * x[2] + p.mass * p.length * x[1] * x[1] * s, -p.mass * p.gravity * p.length * s)
    }
}

impl ControlAffineSystem for Pendulum {
    fn n(&self) -> usize {
        3
    }
    fn m(&self) -> usize {
        1
    }
    fn f(&self, x: &DVector<f64>) -> DVector<f64> {
        let acc = self.minv(x[0]) * self.rhs(x);
        DVector::from_vec(vec![x[1], acc[0], acc[1]])
    }
    fn g(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let minv = self.minv(x[0]);
        DMatrix::from_column_slice(3, 1, &[0.0, minv[(0, 0)], minv[(1, 0)]])
    }
    fn d(&self) -> &DMatrix<f64> {
        &self.d
    }
    fn d_inv(&self) -> &DMatrix<f64> {
        &self.d_inv
    }
    fn q(&self, x: &DVector<f64>) -> f64 {
        x.norm_squared()
    }
    fn jacobian_f(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let p = &self.params;
        let minv = self.minv(x[0]);
        let r = self.rhs(x);
        let c = -x[0].cos();
        let s = -x[0].sin();
        let ml = p.mass * p.length;
        let d_theta = self.dminv(x[0]) * r + minv * Vector2::new(ml * x[1] * x[1] * c, -ml * p.gravity * c);
        let d_psi = minv * Vector2::new(2.0 * ml * x[1] * s, 0.0);
        let d_vt = minv * Vector2::new(-p.friction, 0.0);
        DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, d_theta[0], d_psi[0], d_vt[0], d_theta[1], d_psi[1], d_vt[1]])
    }
    fn grad_q(&self, x: &DVector<f64>) -> DVector<f64> {
        x * 2.0
    }
    fn hess_q0(&self) -> DMatrix<f64> {
        DMatrix::identity(3, 3) * 2.0
    }
    fn grad_rform(&self, x: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        // p^T R p = (g^T p)^2 / D with g = (0, Minv e1); only theta enters g.
        let minv = self.minv(x[0]);
        let dminv = self.dminv(x[0]);
        let gp = minv[(0, 0)] * p[1] + minv[(1, 0)] * p[2];
        let dgp = dminv[(0, 0)] * p[1] + dminv[(1, 0)] * p[2];
        DVector::from_vec(vec![2.0 * gp * dgp * self.d_inv[(0, 0)], 0.0, 0.0])
    }
}
