//! Monomial dictionaries with analytic Jacobians.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A finite dictionary `Gamma: R^dim -> R^len` with Jacobian.
pub trait Basis: Send + Sync {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    fn eval(&self, z: &DVector<f64>) -> DVector<f64>;
    /// `len x dim`.
    fn jacobian(&self, z: &DVector<f64>) -> DMatrix<f64>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All exponent vectors of total degree `d` in `n` variables, lexicographically
/// descending (`x1^2, x1 x2, x2^2`).
pub fn exponents_of_degree(n: usize, d: u32) -> Vec<Vec<u32>> {
    if n == 1 {
        return vec![vec![d]];
    }
    let mut out = Vec::new();
    for a in (0..=d).rev() {
        for mut rest in exponents_of_degree(n - 1, d - a) {
            rest.insert(0, a);
            out.push(rest);
        }
    }
    out
}

/// Graded-lex exponent table for degrees `lo..=hi`.
pub fn graded_exponents(n: usize, lo: u32, hi: u32) -> Vec<Vec<u32>> {
    (lo..=hi).flat_map(|d| exponents_of_degree(n, d)).collect()
}

/// Serializable description that fully determines a [`MonomialBasis`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisDescriptor {
    pub dim: usize,
    pub exponents: Vec<Vec<u32>>,
    /// Optional row-major `dim x dim` linear change of coordinates `y = T z`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<Vec<f64>>,
}

/// Monomials `y^alpha` of `y = T z` (`T = I` unless a frame is set).
#[derive(Debug, Clone, PartialEq)]
pub struct MonomialBasis {
    dim: usize,
    exponents: Vec<Vec<u32>>,
    frame: Option<DMatrix<f64>>,
    max_degree: u32,
}

impl MonomialBasis {
    pub fn from_exponents(dim: usize, exponents: Vec<Vec<u32>>, frame: Option<DMatrix<f64>>) -> Result<Self> {
        if let Some(e) = exponents.iter().find(|e| e.len() != dim) {
            return Err(Error::Dimension(format!("exponent {e:?} does not have {dim} entries")));
        }
        if let Some(t) = &frame {
            if t.shape() != (dim, dim) {
                return Err(Error::Dimension("frame must be dim x dim".into()));
            }
        }
        let max_degree = exponents.iter().flatten().copied().max().unwrap_or(0);
        Ok(Self { dim, exponents, frame, max_degree })
    }

    pub fn from_descriptor(d: &BasisDescriptor) -> Result<Self> {
        let frame = d.frame.as_ref().map(|v| DMatrix::from_row_slice(d.dim, d.dim, v));
        Self::from_exponents(d.dim, d.exponents.clone(), frame)
    }

    pub fn descriptor(&self) -> BasisDescriptor {
        BasisDescriptor {
            dim: self.dim,
            exponents: self.exponents.clone(),
            frame: self.frame.as_ref().map(|t| t.transpose().as_slice().to_vec()),
        }
    }

    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }

    pub fn frame(&self) -> Option<&DMatrix<f64>> {
        self.frame.as_ref()
    }

    /// Same exponents in the coordinates `y = T z`.
    pub fn with_frame(mut self, t: DMatrix<f64>) -> Result<Self> {
        if t.shape() != (self.dim, self.dim) {
            return Err(Error::Dimension("frame must be dim x dim".into()));
        }
        self.frame = Some(t);
        Ok(self)
    }

    /// Keep only the exponents accepted by `keep`.
    pub fn retain(mut self, keep: impl Fn(&[u32]) -> bool) -> Self {
        self.exponents.retain(|e| keep(e));
        self
    }

    /// Smallest total degree in the table.
    pub fn min_degree(&self) -> u32 {
        self.exponents.iter().map(|e| e.iter().sum()).min().unwrap_or(0)
    }

    fn coords(&self, z: &DVector<f64>) -> DVector<f64> {
        match &self.frame {
            Some(t) => t * z,
            None => z.clone(),
        }
    }

    /// `pows[i][k] = y_i^k`.
    fn powers(&self, y: &DVector<f64>) -> Vec<Vec<f64>> {
        y.iter()
            .map(|&yi| {
                let mut p = Vec::with_capacity(self.max_degree as usize + 1);
                let mut acc = 1.0;
                for _ in 0..=self.max_degree {
                    p.push(acc);
                    acc *= yi;
                }
                p
            })
            .collect()
    }
}

impl Basis for MonomialBasis {
    fn dim(&self) -> usize {
        self.dim
    }
    fn len(&self) -> usize {
        self.exponents.len()
    }
    fn eval(&self, z: &DVector<f64>) -> DVector<f64> {
        let pows = self.powers(&self.coords(z));
        DVector::from_iterator(self.len(), self.exponents.iter().map(|e| e.iter().enumerate().map(|(i, &k)| pows[i][k as usize]).product()))
    }
    fn jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let pows = self.powers(&self.coords(z));
        let mut jac = DMatrix::zeros(self.len(), self.dim);
        for (r, e) in self.exponents.iter().enumerate() {
            for j in 0..self.dim {
                if e[j] == 0 {
                    continue;
                }
                let mut v = e[j] as f64;
                for (i, &k) in e.iter().enumerate() {
                    v *= pows[i][if i == j { k as usize - 1 } else { k as usize }];
                }
                jac[(r, j)] = v;
            }
        }
        match &self.frame {
            Some(t) => jac * t,
            None => jac,
        }
    }
}

/// Monomials of degree `deg_min..=deg_max` (`deg_min >= 2`) in graded-lex order.
pub fn monomial_basis(n: usize, deg_min: u32, deg_max: u32) -> Result<MonomialBasis> {
    if deg_min < 2 {
        return Err(Error::InvalidArgument("basis must be purely nonlinear (deg_min >= 2)".into()));
    }
    if deg_max < deg_min || n == 0 {
        return Err(Error::InvalidArgument(format!("empty degree range {deg_min}..={deg_max}")));
    }
    MonomialBasis::from_exponents(n, graded_exponents(n, deg_min, deg_max), None)
}

/// Value-function basis `Xi3`: x-monomials of degree `2..=d3`.
pub fn value_basis_xi3(n: usize, d3: u32) -> Result<MonomialBasis> {
    monomial_basis(n, 2, d3)
}

/// `Gamma(x, p) = (Xi1(x), Xi2(x) p)` on `z = (x, p)`: `Xi1` holds x-monomials
/// of degree `2..=d1`; `Xi2(x) p` holds `m(x) p_i` for x-monomials `m` of degree
/// `1..=d2`, monomial-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Procedure2Basis {
    n: usize,
    xi1: MonomialBasis,
    xi2: MonomialBasis,
    pub d1: u32,
    pub d2: u32,
}

impl Procedure2Basis {
    /// Number of `Xi1` functions.
    pub fn n_xi1(&self) -> usize {
        self.xi1.len()
    }

    pub fn n_state(&self) -> usize {
        self.n
    }

    pub fn xi1(&self, x: &DVector<f64>) -> DVector<f64> {
        self.xi1.eval(x)
    }

    /// `(len - N) x n` matrix with `Xi2(x) p` the p-linear block.
    pub fn xi2(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let m = self.xi2.eval(x);
        let mut out = DMatrix::zeros(m.len() * self.n, self.n);
        for (k, mk) in m.iter().enumerate() {
            for i in 0..self.n {
                out[(k * self.n + i, i)] = *mk;
            }
        }
        out
    }

    pub fn xi1_basis(&self) -> &MonomialBasis {
        &self.xi1
    }

    pub fn xi2_monomials(&self) -> &MonomialBasis {
        &self.xi2
    }
}

pub fn procedure2_basis(n: usize, d1: u32, d2: u32) -> Result<Procedure2Basis> {
    if d1 < 2 || d2 < 1 || n == 0 {
        return Err(Error::InvalidArgument("need d1 >= 2 and d2 >= 1".into()));
    }
    Ok(Procedure2Basis {
        n,
        xi1: monomial_basis(n, 2, d1)?,
        xi2: MonomialBasis::from_exponents(n, graded_exponents(n, 1, d2), None)?,
        d1,
        d2,
    })
}

impl Basis for Procedure2Basis {
    fn dim(&self) -> usize {
        2 * self.n
    }
    fn len(&self) -> usize {
        self.xi1.len() + self.xi2.len() * self.n
    }
    fn eval(&self, z: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let x = z.rows(0, n).into_owned();
        let p = z.rows(n, n);
        let a = self.xi1.eval(&x);
        let m = self.xi2.eval(&x);
        let mut out = DVector::zeros(self.len());
        out.rows_mut(0, a.len()).copy_from(&a);
        for (k, mk) in m.iter().enumerate() {
            for i in 0..n {
                out[a.len() + k * n + i] = mk * p[i];
            }
        }
        out
    }
    fn jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n;
        let x = z.rows(0, n).into_owned();
        let p = z.rows(n, n);
        let ja = self.xi1.jacobian(&x);
        let m = self.xi2.eval(&x);
        let jm = self.xi2.jacobian(&x);
        let off = ja.nrows();
        let mut out = DMatrix::zeros(self.len(), 2 * n);
        out.view_mut((0, 0), (off, n)).copy_from(&ja);
        for k in 0..m.len() {
            for i in 0..n {
                let r = off + k * n + i;
                for j in 0..n {
                    out[(r, j)] = jm[(k, j)] * p[i];
                }
                out[(r, n + i)] = m[k];
            }
        }
        out
    }
}
