//! HJ approximation from principal eigenfunctions of the uncontrolled
//! system: with `Phi = Vt x + h(x)` and `dPhi/dx f = Lambda Phi`, solve
//! `Lambda^T L + L Lambda - L R1 L + Q1 = 0` and take `V = 1/2 Phi^T L Phi`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{Basis, BasisDescriptor, MonomialBasis};
use crate::galerkin::{Diagnostics, Domain, PrincipalEigenfunction, SampleSet};
use crate::simulate::integrate_rk4;
use crate::solution::HjSolution;
use crate::spectral::{riccati_residual, solve_riccati, EigenBlock, RealSpectralDecomposition};
use crate::system::{linearize, ControlAffineSystem, Example1, Linearization, NominalHamiltonianField, SystemRef, VectorField};
use crate::{Error, Result};

/// Closed-form nonlinear part: returns `(h(x), dh/dx(x))`.
pub type NonlinearMap = dyn Fn(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>) + Send + Sync;

#[derive(Clone)]
enum Nonlinear {
    None,
    Galerkin(Vec<PrincipalEigenfunction<MonomialBasis>>),
    Custom(Arc<NonlinearMap>),
}

/// `n` principal eigenfunctions `Phi(x) = Vt x + h(x)` with `dPhi/dx f = Lambda Phi`.
#[derive(Clone)]
pub struct EigenfunctionSet {
    pub Lambda: DMatrix<f64>,
    pub Vt: DMatrix<f64>,
    pub blocks: Vec<EigenBlock>,
    /// Validity domain.
    pub domain: Domain,
    nonlinear: Nonlinear,
}

/// Blocks of a real block-diagonal matrix, read from its subdiagonal.
pub fn blocks_of(lambda: &DMatrix<f64>) -> Vec<EigenBlock> {
    let n = lambda.nrows();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        if i + 1 < n && lambda[(i + 1, i)] != 0.0 {
            out.push(EigenBlock { start: i, size: 2, re: lambda[(i, i)], im: lambda[(i + 1, i)] });
            i += 2;
        } else {
            out.push(EigenBlock { start: i, size: 1, re: lambda[(i, i)], im: 0.0 });
            i += 1;
        }
    }
    out
}

impl EigenfunctionSet {
    /// `Phi = Vt x` from a spectral decomposition of the linearization.
    pub fn linear(rsd: RealSpectralDecomposition, domain: Domain) -> Self {
        Self { Lambda: rsd.Lambda, Vt: rsd.Vt, blocks: rsd.blocks, domain, nonlinear: Nonlinear::None }
    }

    pub fn from_galerkin(rsd: RealSpectralDecomposition, domain: Domain, parts: Vec<PrincipalEigenfunction<MonomialBasis>>) -> Self {
        Self { Lambda: rsd.Lambda, Vt: rsd.Vt, blocks: rsd.blocks, domain, nonlinear: Nonlinear::Galerkin(parts) }
    }

    /// Closed-form eigenfunctions with nonlinear part `h` (`dh/dx(0) = 0`).
    pub fn analytic(Lambda: DMatrix<f64>, Vt: DMatrix<f64>, domain: Domain, h: Arc<NonlinearMap>) -> Self {
        let blocks = blocks_of(&Lambda);
        Self { Lambda, Vt, blocks, domain, nonlinear: Nonlinear::Custom(h) }
    }

    pub fn n(&self) -> usize {
        self.Vt.nrows()
    }

    pub fn galerkin_parts(&self) -> Option<&[PrincipalEigenfunction<MonomialBasis>]> {
        match &self.nonlinear {
            Nonlinear::Galerkin(p) => Some(p),
            _ => None,
        }
    }

    pub fn phi(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.nonlinear {
            Nonlinear::None => &self.Vt * x,
            Nonlinear::Custom(h) => &self.Vt * x + h(x).0,
            Nonlinear::Galerkin(parts) => {
                let mut out = DVector::zeros(self.n());
                for p in parts {
                    out.rows_mut(p.block.start, p.block.size).copy_from(&p.eval(x));
                }
                out
            }
        }
    }

    pub fn jac_phi(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match &self.nonlinear {
            Nonlinear::None => self.Vt.clone(),
            Nonlinear::Custom(h) => &self.Vt + h(x).1,
            Nonlinear::Galerkin(parts) => {
                let mut out = DMatrix::zeros(self.n(), self.n());
                for p in parts {
                    out.rows_mut(p.block.start, p.block.size).copy_from(&p.jacobian(x));
                }
                out
            }
        }
    }

    /// RMS over samples of `|dPhi/dx f - Lambda Phi|`.
    pub fn residual_rms(&self, field: &dyn VectorField, samples: &SampleSet) -> f64 {
        let sum: f64 = (0..samples.len())
            .map(|k| {
                let x = samples.point(k);
                (self.jac_phi(&x) * field.eval(&x) - &self.Lambda * self.phi(&x)).norm_squared()
            })
            .sum();
        (sum / samples.len() as f64).sqrt()
    }

    /// Rescale each block's eigenfunctions by a positive factor. Leaves the
    /// value function and control of Procedure 1 unchanged, rescales `L`.
    pub fn rescaled(&self, factors: &[f64]) -> Result<Self> {
        if factors.len() != self.blocks.len() {
            return Err(Error::Dimension("one factor per eigenvalue block".into()));
        }
        let mut s = self.clone();
        let mut scale = DVector::zeros(self.n());
        for (b, &c) in self.blocks.iter().zip(factors) {
            scale.rows_mut(b.start, b.size).fill(c);
        }
        for i in 0..self.n() {
            let mut row = s.Vt.row_mut(i);
            row *= scale[i];
        }
        s.nonlinear = match &self.nonlinear {
            Nonlinear::None => Nonlinear::None,
            Nonlinear::Custom(h) => {
                let h = h.clone();
                let sc = scale.clone();
                Nonlinear::Custom(Arc::new(move |x: &DVector<f64>| {
                    let (v, j) = h(x);
                    (v.component_mul(&sc), DMatrix::from_diagonal(&sc) * j)
                }))
            }
            Nonlinear::Galerkin(parts) => Nonlinear::Galerkin(
                parts
                    .iter()
                    .zip(factors)
                    .map(|(p, &c)| {
                        let mut p = p.clone();
                        p.w *= c;
                        p.theta *= c;
                        p
                    })
                    .collect(),
            ),
        };
        Ok(s)
    }

    pub fn export(&self) -> Result<EigenfunctionExport> {
        let parts = match &self.nonlinear {
            Nonlinear::None => Vec::new(),
            Nonlinear::Custom(_) => return Err(Error::InvalidArgument("closed-form eigenfunctions cannot be exported".into())),
            Nonlinear::Galerkin(parts) => parts
                .iter()
                .map(|p| BlockExport {
                    block: p.block,
                    w: rows(&p.w),
                    theta: rows(&p.theta),
                    basis: p.basis.descriptor(),
                    diagnostics: p.diagnostics.clone(),
                })
                .collect(),
        };
        Ok(EigenfunctionExport {
            lambda: rows(&self.Lambda),
            vt: rows(&self.Vt),
            blocks: self.blocks.clone(),
            domain: self.domain.clone(),
            parts,
        })
    }

    pub fn from_export(e: &EigenfunctionExport) -> Result<Self> {
        let n = e.vt.len();
        let rsd_lambda = from_rows(&e.lambda, n)?;
        let vt = from_rows(&e.vt, n)?;
        let nonlinear = if e.parts.is_empty() {
            Nonlinear::None
        } else {
            let parts = e
                .parts
                .iter()
                .map(|p| {
                    let basis = Arc::new(MonomialBasis::from_descriptor(&p.basis)?);
                    Ok(PrincipalEigenfunction {
                        block: p.block,
                        w: from_rows(&p.w, n)?,
                        theta: from_rows(&p.theta, basis.len())?,
                        basis,
                        domain: e.domain.clone(),
                        diagnostics: p.diagnostics.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Nonlinear::Galerkin(parts)
        };
        Ok(Self { Lambda: rsd_lambda, Vt: vt, blocks: e.blocks.clone(), domain: e.domain.clone(), nonlinear })
    }
}

pub(crate) fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn from_rows(r: &[Vec<f64>], cols: usize) -> Result<DMatrix<f64>> {
    if r.iter().any(|row| row.len() != cols) {
        return Err(Error::Dimension(format!("expected rows of length {cols}")));
    }
    Ok(DMatrix::from_fn(r.len(), cols, |i, j| r[i][j]))
}

/// Serializable form of one Galerkin block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockExport {
    pub block: EigenBlock,
    pub w: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
    pub basis: BasisDescriptor,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenfunctionExport {
    pub lambda: Vec<Vec<f64>>,
    pub vt: Vec<Vec<f64>>,
    pub blocks: Vec<EigenBlock>,
    pub domain: Domain,
    pub parts: Vec<BlockExport>,
}

/// Closed-form eigenfunctions of [`Example1`]: `phi1 = x1 - 2 x2` (eigenvalue
/// -1), `phi2 = x1 + sin x2` (eigenvalue 2).
pub fn example1_eigenfunctions(domain: Domain) -> EigenfunctionSet {
    let vt = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 1.0, 1.0]);
    let lin = vt.clone();
    let h: Arc<NonlinearMap> =
        Arc::new(move |x: &DVector<f64>| (Example1::eigenfunctions(x) - &lin * x, Example1::eigenfunction_jacobian(x) - &lin));
    EigenfunctionSet::analytic(DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 2.0]), vt, domain, h)
}

/// `R1 = Vt R0 Vt^T`, `Q1 = Vt^{-T} Q0 Vt^{-1}`: the quadratic forms of `R0`
/// and `Q0` expressed in the coordinates `Phi ~ Vt x`.
pub fn compute_R1_Q1(lin: &Linearization, Vt: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let inv = Vt.clone().try_inverse().ok_or_else(|| Error::InvalidArgument("Vt singular".into()))?;
    let r1 = Vt * &lin.R0 * Vt.transpose();
    let q1 = inv.transpose() * &lin.Q0 * &inv;
    Ok(((&r1 + r1.transpose()) * 0.5, (&q1 + q1.transpose()) * 0.5))
}

#[derive(Clone)]
pub struct HJSolution1 {
    pub eig: EigenfunctionSet,
    pub L: DMatrix<f64>,
    pub R1: DMatrix<f64>,
    pub Q1: DMatrix<f64>,
    pub riccati_residual: f64,
    pub sys: SystemRef,
}

impl HJSolution1 {
    /// `1/2 Phi^T L Phi`.
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        let phi = self.eig.phi(x);
        0.5 * (&self.L * &phi).dot(&phi)
    }

    /// `(dPhi/dx)^T L Phi`.
    pub fn grad_value(&self, x: &DVector<f64>) -> DVector<f64> {
        self.eig.jac_phi(x).transpose() * (&self.L * self.eig.phi(x))
    }

    /// `-D^{-1} g(x)^T grad V`.
    pub fn control(&self, x: &DVector<f64>) -> DVector<f64> {
        -(self.sys.d_inv() * self.sys.g(x).transpose() * self.grad_value(x))
    }

    pub fn export(&self) -> Result<Solution1Export> {
        Ok(Solution1Export {
            procedure: 1,
            L: rows(&self.L),
            R1: rows(&self.R1),
            Q1: rows(&self.Q1),
            riccati_residual: self.riccati_residual,
            eigenfunctions: self.eig.export()?,
        })
    }
}

impl HjSolution for HJSolution1 {
    fn value(&self, x: &DVector<f64>) -> Result<Option<f64>> {
        Ok(Some(HJSolution1::value(self, x)))
    }
    fn grad_value(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(HJSolution1::grad_value(self, x))
    }
    fn system(&self) -> &SystemRef {
        &self.sys
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution1Export {
    pub procedure: u8,
    pub L: Vec<Vec<f64>>,
    pub R1: Vec<Vec<f64>>,
    pub Q1: Vec<Vec<f64>>,
    pub riccati_residual: f64,
    pub eigenfunctions: EigenfunctionExport,
}

impl Solution1Export {
    pub fn restore(&self, sys: SystemRef) -> Result<HJSolution1> {
        let eig = EigenfunctionSet::from_export(&self.eigenfunctions)?;
        let n = eig.n();
        Ok(HJSolution1 {
            L: from_rows(&self.L, n)?,
            R1: from_rows(&self.R1, n)?,
            Q1: from_rows(&self.Q1, n)?,
            riccati_residual: self.riccati_residual,
            eig,
            sys,
        })
    }
}

pub fn procedure1_solve(sys: SystemRef, eig: EigenfunctionSet) -> Result<HJSolution1> {
    if sys.n() != eig.n() {
        return Err(Error::Dimension(format!("system has n = {}, eigenfunctions {}", sys.n(), eig.n())));
    }
    let lin = linearize(sys.as_ref())?;
    let (R1, Q1) = compute_R1_Q1(&lin, &eig.Vt)?;
    let sol = solve_riccati(&eig.Lambda, &R1, &Q1)?;
    let residual = riccati_residual(&eig.Lambda, &R1, &Q1, &sol.P);
    Ok(HJSolution1 { eig, L: sol.P, R1, Q1, riccati_residual: residual, sys })
}

/// Drift of the integrable coordinates along nominal Hamiltonian flows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrabilityReport {
    /// `max |H0(z(t)) - H0(z(0))|` with `H0 = f^T p`.
    pub h0_drift: f64,
    /// `max |X(t) - X(0)| / (1 + |X(0)|)`, `X = e^{-Lambda t} Phi(x)`.
    pub x_drift: f64,
    /// `max |P(t) - P(0)| / (1 + |P(0)|)`, `P = e^{Lambda^T t} (dPhi/dx)^{-T} p`.
    pub p_drift: f64,
    pub used: usize,
    /// Samples whose trajectory left the eigenfunction domain.
    pub excluded: usize,
}

/// Integrate the nominal flow `xdot = f, pdot = -(df/dx)^T p` from each sample
/// `z = (x, p)` and track the canonical coordinates `(X, P)`.
pub fn verify_nominal_integrability(
    eig: &EigenfunctionSet,
    sys: SystemRef,
    samples: &SampleSet,
    dt: f64,
    t_final: f64,
) -> Result<IntegrabilityReport> {
    let n = eig.n();
    if samples.dim() != 2 * n {
        return Err(Error::Dimension("samples must live in (x, p) space".into()));
    }
    let field = NominalHamiltonianField(sys);
    let mut rep = IntegrabilityReport { h0_drift: 0.0, x_drift: 0.0, p_drift: 0.0, used: 0, excluded: 0 };
    let coords = |z: &DVector<f64>, t: f64| -> Result<(DVector<f64>, DVector<f64>)> {
        let x = z.rows(0, n).into_owned();
        let p = z.rows(n, n).into_owned();
        let big_x = (&eig.Lambda * -t).exp() * eig.phi(&x);
        let jt_inv = eig
            .jac_phi(&x)
            .transpose()
            .try_inverse()
            .ok_or_else(|| Error::InvalidArgument(format!("dPhi/dx singular at {:?}", x.as_slice())))?;
        let big_p = (eig.Lambda.transpose() * t).exp() * jt_inv * p;
        Ok((big_x, big_p))
    };
    for k in 0..samples.len() {
        let z0 = samples.point(k);
        let traj = integrate_rk4(&field, &z0, dt, t_final);
        let inside = !traj.diverged && traj.states.row_iter().all(|r| eig.domain.contains(&r.columns(0, n).transpose()));
        if !inside {
            rep.excluded += 1;
            continue;
        }
        rep.used += 1;
        let h0 = field.hamiltonian(&z0);
        let (x0, p0) = coords(&z0, 0.0)?;
        for (i, row) in traj.states.row_iter().enumerate() {
            let z = row.transpose();
            let (xt, pt) = coords(&z, traj.times[i])?;
            rep.h0_drift = rep.h0_drift.max((field.hamiltonian(&z) - h0).abs());
            rep.x_drift = rep.x_drift.max((&xt - &x0).norm() / (1.0 + x0.norm()));
            rep.p_drift = rep.p_drift.max((&pt - &p0).norm() / (1.0 + p0.norm()));
        }
    }
    Ok(rep)
}

/// Max over samples and times of `|H0(x, dW/dx^T) + dW/dt|` for
/// `W(x, t) = P^T e^{-Lambda t} Phi(x)`.
pub fn verify_generating_function(
    eig: &EigenfunctionSet,
    sys: &dyn ControlAffineSystem,
    p_vec: &DVector<f64>,
    samples: &SampleSet,
    t_grid: &[f64],
) -> f64 {
    let mut worst: f64 = 0.0;
    for &t in t_grid {
        let e = (&eig.Lambda * -t).exp();
        let pe = e.transpose() * p_vec;
        for k in 0..samples.len() {
            let x = samples.point(k);
            let grad_w = eig.jac_phi(&x).transpose() * &pe;
            let dw_dt = -(&eig.Lambda * &e * eig.phi(&x)).dot(p_vec);
            worst = worst.max((sys.f(&x).dot(&grad_w) + dw_dt).abs());
        }
    }
    worst
}
