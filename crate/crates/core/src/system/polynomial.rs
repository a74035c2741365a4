use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{checked_d_inv, ControlAffineSystem};
use crate::{Error, Result};

/// One monomial `coef * prod x_i^exponents[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub exponents: Vec<u32>,
    pub coef: f64,
}

/// Sparse polynomial in `n` variables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polynomial {
    pub terms: Vec<Term>,
}

impl Polynomial {
    pub fn new(terms: Vec<Term>) -> Self {
        Self { terms }
    }

    pub fn constant(c: f64, n: usize) -> Self {
        Self { terms: vec![Term { exponents: vec![0; n], coef: c }] }
    }

    /// Linear form `sum_j c_j x_j`.
    pub fn linear(coefs: &[f64]) -> Self {
        let n = coefs.len();
        let terms = coefs
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != 0.0)
            .map(|(j, &coef)| {
                let mut exponents = vec![0; n];
                exponents[j] = 1;
                Term { exponents, coef }
            })
            .collect();
        Self { terms }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.coef * t.exponents.iter().zip(x).map(|(&e, &xi)| xi.powi(e as i32)).product::<f64>()).sum()
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; x.len()];
        for t in &self.terms {
            for (k, gk) in grad.iter_mut().enumerate() {
                let ek = t.exponents[k];
                if ek == 0 {
                    continue;
                }
                let mut v = t.coef * ek as f64;
                for (j, (&e, &xj)) in t.exponents.iter().zip(x).enumerate() {
                    let e = if j == k { e - 1 } else { e };
                    v *= xj.powi(e as i32);
                }
                *gk += v;
            }
        }
        grad
    }

    pub fn max_degree(&self) -> u32 {
        self.terms.iter().map(|t| t.exponents.iter().sum()).max().unwrap_or(0)
    }

    fn check(&self, n: usize) -> Result<()> {
        match self.terms.iter().find(|t| t.exponents.len() != n) {
            Some(t) => Err(Error::Dimension(format!("term has {} exponents, expected {n}", t.exponents.len()))),
            None => Ok(()),
        }
    }
}

/// System with polynomial drift and input map and quadratic state cost
/// `q = 1/2 x^T Q x`.
#[derive(Debug, Clone)]
pub struct PolynomialSystem {
    f: Vec<Polynomial>,
    /// Row-major `n x m` polynomial entries of `g`.
    g: Vec<Polynomial>,
    n: usize,
    m: usize,
    q: DMatrix<f64>,
    d: DMatrix<f64>,
    d_inv: DMatrix<f64>,
}

impl PolynomialSystem {
    /// `g` is given row-major, `n * m` entries.
    pub fn new(f: Vec<Polynomial>, g: Vec<Polynomial>, q: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let n = f.len();
        if n == 0 {
            return Err(Error::Dimension("empty state".into()));
        }
        let m = d.nrows();
        if g.len() != n * m {
            return Err(Error::Dimension(format!("g has {} entries, expected {}x{}", g.len(), n, m)));
        }
        if q.shape() != (n, n) {
            return Err(Error::Dimension("state cost matrix must be n x n".into()));
        }
        if (&q - q.transpose()).norm() > 1e-12 * (1.0 + q.norm()) {
            return Err(Error::InvalidArgument("state cost matrix not symmetric".into()));
        }
        for p in f.iter().chain(&g) {
            p.check(n)?;
        }
        let d_inv = checked_d_inv(&d)?;
        Ok(Self { f, g, n, m, q, d, d_inv })
    }

    /// Linear-quadratic instance `xdot = A x + B u`, `q = 1/2 x^T Q x`.
    pub fn linear(a: &DMatrix<f64>, b: &DMatrix<f64>, q: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        let f = (0..n).map(|i| Polynomial::linear(a.row(i).transpose().as_slice())).collect();
        let g = (0..n).flat_map(|i| (0..b.ncols()).map(move |j| Polynomial::constant(b[(i, j)], n))).collect();
        Self::new(f, g, q, d)
    }

    pub fn state_cost_matrix(&self) -> &DMatrix<f64> {
        &self.q
    }

    fn g_derivative(&self, x: &[f64], k: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.m, |i, j| self.g[i * self.m + j].gradient(x)[k])
    }
}

impl ControlAffineSystem for PolynomialSystem {
    fn n(&self) -> usize {
        self.n
    }
    fn m(&self) -> usize {
        self.m
    }
    fn f(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.n, self.f.iter().map(|p| p.eval(x.as_slice())))
    }
    fn g(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.n, self.m, self.g.iter().map(|p| p.eval(x.as_slice())))
    }
    fn d(&self) -> &DMatrix<f64> {
        &self.d
    }
    fn d_inv(&self) -> &DMatrix<f64> {
        &self.d_inv
    }
    fn q(&self, x: &DVector<f64>) -> f64 {
        0.5 * (&self.q * x).dot(x)
    }
    fn jacobian_f(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let rows: Vec<_> = self.f.iter().map(|p| p.gradient(x.as_slice())).collect();
        DMatrix::from_fn(self.n, self.n, |i, j| rows[i][j])
    }
    fn grad_q(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.q * x
    }
    fn hess_q0(&self) -> DMatrix<f64> {
        self.q.clone()
    }
    fn grad_rform(&self, x: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        if self.g.iter().all(|e| e.max_degree() == 0) {
            return DVector::zeros(self.n);
        }
        let gtp = self.g(x).transpose() * p;
        let w = &self.d_inv * &gtp;
        DVector::from_fn(self.n, |k, _| 2.0 * (self.g_derivative(x.as_slice(), k).transpose() * p).dot(&w))
    }
}
