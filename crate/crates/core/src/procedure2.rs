//! HJ approximation from the unstable principal eigenfunctions of the
//! Hamiltonian system on `z = (x, p)`: the stable manifold is the joint zero
//! set `Psi_u(z) = Wu_t z + U Gamma(z) = 0`, solved for `p = p*(x)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{procedure2_basis, Basis, BasisDescriptor, MonomialBasis, Procedure2Basis};
use crate::galerkin::{approximate_block, derive_seed, Diagnostics, Domain, SampleSet};
use crate::procedure1::{blocks_of, from_rows, rows};
use crate::simulate::integrate_rk4;
use crate::solution::HjSolution;
use crate::spectral::{
    cond2, lagrangian_subspace, normalize_pair_rows, normalize_real_row, real_spectral_decomposition, unstable_left_subspace, EigenBlock,
};
use crate::system::{HamiltonianSystem, SystemRef};
use crate::{Error, Result};

/// How `p` is drawn around the state box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PSampling {
    /// `p = Jl x + delta`, `delta` uniform in `[-width, width]^n`.
    Slab { width: f64 },
    /// `p` uniform in `|p_i| <= factor ||Jl|| max|x|`.
    Box { factor: f64 },
}

impl Default for PSampling {
    fn default() -> Self {
        PSampling::Slab { width: 0.5 }
    }
}

/// `L` points on `(x, p)`: `x` uniform over `x_domain`, `p` by `mode` around
/// the linear estimate `jl`.
pub fn sample_phase_space(x_domain: &Domain, jl: &DMatrix<f64>, l: usize, seed: u64, mode: PSampling) -> Result<SampleSet> {
    let n = x_domain.dim();
    if jl.shape() != (n, n) || l == 0 {
        return Err(Error::Dimension("Jl must be n x n and L >= 1".into()));
    }
    let xmax = x_domain.lo.iter().chain(&x_domain.hi).fold(0.0f64, |m, v| m.max(v.abs()));
    let pbound = match mode {
        PSampling::Slab { width } if width > 0.0 => jl.norm() * xmax * (n as f64).sqrt() + width,
        PSampling::Box { factor } if factor > 0.0 => factor * jl.norm() * xmax,
        _ => return Err(Error::InvalidArgument("p sampling width must be positive".into())),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = DMatrix::zeros(l, 2 * n);
    for k in 0..l {
        let x = DVector::from_fn(n, |i, _| rng.random_range(x_domain.lo[i]..x_domain.hi[i]));
        let p = match mode {
            PSampling::Slab { width } => jl * &x + DVector::from_fn(n, |_, _| rng.random_range(-width..width)),
            PSampling::Box { .. } => DVector::from_fn(n, |_, _| rng.random_range(-pbound..pbound)),
        };
        points.view_mut((k, 0), (1, n)).copy_from(&x.transpose());
        points.view_mut((k, n), (1, n)).copy_from(&p.transpose());
    }
    let mut lo = x_domain.lo.clone();
    let mut hi = x_domain.hi.clone();
    lo.extend(std::iter::repeat_n(-pbound, n));
    hi.extend(std::iter::repeat_n(pbound, n));
    Ok(SampleSet { points, domain: Domain::new(lo, hi)?, seed: Some(seed) })
}

/// `n` unstable eigenfunctions of the Hamiltonian system, stacked.
#[derive(Debug, Clone)]
pub struct UnstableEigenfunctions {
    /// `n x 2n`, columns `[Wu1^T | Wu2^T]`.
    pub Wu_t: DMatrix<f64>,
    /// `n x M`, columns `[U11 | U12]`.
    pub U: DMatrix<f64>,
    pub basis: Arc<Procedure2Basis>,
    pub Lambda_u: DMatrix<f64>,
    pub blocks: Vec<EigenBlock>,
    /// Per block; default-valued when `U = 0` was imposed.
    pub diagnostics: Vec<Diagnostics>,
}

/// Rows of the unstable left subspace in real eigen form, normalized per row
/// (pairs jointly).
fn unstable_rows(ham: &HamiltonianSystem) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<EigenBlock>)> {
    let sub = unstable_left_subspace(&ham.H0)?;
    let rsd = real_spectral_decomposition(&sub.Lambda_u)?;
    let mut w = &rsd.Vt * &sub.D_full;
    for b in &rsd.blocks {
        if b.size == 1 {
            let mut r: Vec<f64> = w.row(b.start).iter().copied().collect();
            normalize_real_row(&mut r);
            w.row_mut(b.start).copy_from_slice(&r);
        } else {
            let mut u: Vec<f64> = w.row(b.start).iter().copied().collect();
            let mut v: Vec<f64> = w.row(b.start + 1).iter().copied().collect();
            normalize_pair_rows(&mut u, &mut v);
            w.row_mut(b.start).copy_from_slice(&u);
            w.row_mut(b.start + 1).copy_from_slice(&v);
        }
    }
    Ok((w, rsd.Lambda, rsd.blocks))
}

fn check_wu2(wu_t: &DMatrix<f64>) -> Result<()> {
    let n = wu_t.nrows();
    let c = cond2(&wu_t.columns(n, n).into_owned());
    if !(c < 1e12) {
        return Err(Error::ComplementarityFails(c));
    }
    Ok(())
}

impl UnstableEigenfunctions {
    /// Linear parts only (`U = 0`).
    pub fn linear(ham: &HamiltonianSystem, basis: Procedure2Basis) -> Result<Self> {
        let (w, lambda, blocks) = unstable_rows(ham)?;
        check_wu2(&w)?;
        let n = ham.n();
        Ok(Self {
            U: DMatrix::zeros(n, basis.len()),
            Wu_t: w,
            basis: Arc::new(basis),
            Lambda_u: lambda,
            diagnostics: vec![Diagnostics::default(); blocks.len()],
            blocks,
        })
    }

    pub fn n(&self) -> usize {
        self.Wu_t.nrows()
    }

    pub fn wu1_t(&self) -> DMatrix<f64> {
        self.Wu_t.columns(0, self.n()).into_owned()
    }

    pub fn wu2_t(&self) -> DMatrix<f64> {
        self.Wu_t.columns(self.n(), self.n()).into_owned()
    }

    pub fn u11(&self) -> DMatrix<f64> {
        self.U.columns(0, self.basis.n_xi1()).into_owned()
    }

    pub fn u12(&self) -> DMatrix<f64> {
        let nx = self.basis.n_xi1();
        self.U.columns(nx, self.U.ncols() - nx).into_owned()
    }

    pub fn psi(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.Wu_t * z + &self.U * self.basis.eval(z)
    }

    pub fn psi_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        &self.Wu_t + &self.U * self.basis.jacobian(z)
    }

    /// RMS of `dPsi/dz F - Lambda_u Psi` over samples.
    pub fn residual_rms(&self, ham: &HamiltonianSystem, samples: &SampleSet) -> f64 {
        use crate::system::VectorField;
        let s: f64 = (0..samples.len())
            .map(|k| {
                let z = samples.point(k);
                (self.psi_jacobian(&z) * ham.eval(&z) - &self.Lambda_u * self.psi(&z)).norm_squared()
            })
            .sum();
        (s / samples.len() as f64).sqrt()
    }

    /// `G1(x) = U11 Xi1(x) + U12 Xi2(x) Jl x`.
    pub fn g1(&self, x: &DVector<f64>, jl: &DMatrix<f64>) -> DVector<f64> {
        self.u11() * self.basis.xi1(x) + self.u12() * (self.basis.xi2(x) * (jl * x))
    }

    /// `G2(x) = Wu2^T + U12 Xi2(x)`.
    pub fn g2(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.wu2_t() + self.u12() * self.basis.xi2(x)
    }
}

/// Galerkin approximation of every unstable eigenfunction of `ham` against the
/// full Hamiltonian field.
pub fn unstable_eigfns(
    ham: &HamiltonianSystem,
    basis: Procedure2Basis,
    samples: &SampleSet,
    holdout: &SampleSet,
) -> Result<UnstableEigenfunctions> {
    let n = ham.n();
    if basis.n_state() != n || samples.dim() != 2 * n {
        return Err(Error::Dimension("basis and samples must live on (x, p)".into()));
    }
    let (w, lambda, blocks) = unstable_rows(ham)?;
    check_wu2(&w)?;
    let basis = Arc::new(basis);
    let mut U = DMatrix::zeros(n, basis.len());
    let mut diagnostics = Vec::with_capacity(blocks.len());
    for b in &blocks {
        let wb = w.rows(b.start, b.size).into_owned();
        let ef = approximate_block(ham, &ham.H0, basis.clone(), *b, wb, samples, holdout)?;
        U.rows_mut(b.start, b.size).copy_from(&ef.theta);
        diagnostics.push(ef.diagnostics);
    }
    Ok(UnstableEigenfunctions { Wu_t: w, U, basis, Lambda_u: lambda, blocks, diagnostics })
}

/// `Jl = -(Wu2^T)^{-1} Wu1^T`, symmetrized; also returns the relative asymmetry
/// before symmetrization.
pub fn linear_manifold(eigs: &UnstableEigenfunctions) -> Result<(DMatrix<f64>, f64)> {
    let wu2 = eigs.wu2_t();
    let c = cond2(&wu2);
    let jl = -wu2.lu().solve(&eigs.wu1_t()).ok_or(Error::ComplementarityFails(c))?;
    let asym = (&jl - jl.transpose()).norm() / jl.norm().max(f64::MIN_POSITIVE);
    Ok(((&jl + jl.transpose()) * 0.5, asym))
}

/// Fitted nonlinear value term `1/2 Xi3^T Jn Xi3`.
#[derive(Debug, Clone)]
pub struct ValueFit {
    pub xi3: MonomialBasis,
    pub Jn: DMatrix<f64>,
    /// `Jn` with negative eigenvalues clipped to zero.
    pub Jn_psd: DMatrix<f64>,
    /// RMS over the samples of `|grad V(x) - p*(x)|`.
    pub fit_residual: f64,
    pub fit_residual_psd: f64,
    /// RMS of `|G2 grad(1/2 Xi3^T Jn Xi3) + G1|`, the least-squares objective.
    pub objective_residual: f64,
}

#[derive(Clone)]
pub struct HJSolution2 {
    pub eigs: UnstableEigenfunctions,
    pub Jl: DMatrix<f64>,
    pub asymmetry: f64,
    pub value_fit: Option<ValueFit>,
    /// Use the clipped `Jn` in `value`.
    pub use_psd: bool,
    pub sys: SystemRef,
}

impl HJSolution2 {
    pub fn new(sys: SystemRef, eigs: UnstableEigenfunctions) -> Result<Self> {
        if sys.n() != eigs.n() {
            return Err(Error::Dimension("system and eigenfunctions disagree on n".into()));
        }
        let (Jl, asymmetry) = linear_manifold(&eigs)?;
        Ok(Self { eigs, Jl, asymmetry, value_fit: None, use_psd: false, sys })
    }

    /// `p_n = -G2(x)^{-1} G1(x)`.
    pub fn p_n(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let g2 = self.eigs.g2(x);
        let c = cond2(&g2);
        if !(c < 1e12) {
            return Err(Error::G2Singular(x.iter().copied().collect()));
        }
        g2.lu().solve(&-self.eigs.g1(x, &self.Jl)).ok_or_else(|| Error::G2Singular(x.iter().copied().collect()))
    }

    /// `p*(x) = Jl x + p_n(x)`.
    pub fn p_star(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.Jl * x + self.p_n(x)?)
    }

    pub fn control(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(-(self.sys.d_inv() * self.sys.g(x).transpose() * self.p_star(x)?))
    }

    /// `1/2 (x^T Jl x + Xi3^T Jn Xi3)` once a value fit is attached.
    pub fn value(&self, x: &DVector<f64>) -> Option<f64> {
        let fit = self.value_fit.as_ref()?;
        let jn = if self.use_psd { &fit.Jn_psd } else { &fit.Jn };
        let xi = fit.xi3.eval(x);
        Some(0.5 * ((&self.Jl * x).dot(x) + (jn * &xi).dot(&xi)))
    }

    /// Gradient of the fitted value (quadratic plus `Jn` term).
    pub fn value_gradient(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        let fit = self.value_fit.as_ref()?;
        let jn = if self.use_psd { &fit.Jn_psd } else { &fit.Jn };
        Some(&self.Jl * x + fit.xi3.jacobian(x).transpose() * (jn * fit.xi3.eval(x)))
    }

    pub fn export(&self) -> Solution2Export {
        Solution2Export {
            procedure: 2,
            Wu_t: rows(&self.eigs.Wu_t),
            U: rows(&self.eigs.U),
            Lambda_u: rows(&self.eigs.Lambda_u),
            Jl: rows(&self.Jl),
            asymmetry: self.asymmetry,
            d1: self.eigs.basis.d1,
            d2: self.eigs.basis.d2,
            xi1: self.eigs.basis.xi1_basis().descriptor(),
            xi2: self.eigs.basis.xi2_monomials().descriptor(),
            diagnostics: self.eigs.diagnostics.clone(),
            value: self.value_fit.as_ref().map(|f| ValueExport {
                xi3: f.xi3.descriptor(),
                Jn: rows(&f.Jn),
                Jn_psd: rows(&f.Jn_psd),
                fit_residual: f.fit_residual,
                fit_residual_psd: f.fit_residual_psd,
                objective_residual: f.objective_residual,
            }),
        }
    }
}

impl HjSolution for HJSolution2 {
    fn value(&self, x: &DVector<f64>) -> Result<Option<f64>> {
        Ok(HJSolution2::value(self, x))
    }
    fn grad_value(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.p_star(x)
    }
    fn system(&self) -> &SystemRef {
        &self.sys
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueExport {
    pub xi3: BasisDescriptor,
    pub Jn: Vec<Vec<f64>>,
    pub Jn_psd: Vec<Vec<f64>>,
    pub fit_residual: f64,
    pub fit_residual_psd: f64,
    pub objective_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution2Export {
    pub procedure: u8,
    pub Wu_t: Vec<Vec<f64>>,
    pub U: Vec<Vec<f64>>,
    pub Lambda_u: Vec<Vec<f64>>,
    pub Jl: Vec<Vec<f64>>,
    pub asymmetry: f64,
    pub d1: u32,
    pub d2: u32,
    pub xi1: BasisDescriptor,
    pub xi2: BasisDescriptor,
    pub diagnostics: Vec<Diagnostics>,
    pub value: Option<ValueExport>,
}

impl Solution2Export {
    pub fn restore(&self, sys: SystemRef) -> Result<HJSolution2> {
        if self.procedure != 2 {
            return Err(Error::InvalidArgument(format!("not a procedure-2 solution (procedure = {})", self.procedure)));
        }
        let n = sys.n();
        let basis = procedure2_basis(n, self.d1, self.d2)?;
        if basis.xi1_basis().descriptor() != self.xi1 || basis.xi2_monomials().descriptor() != self.xi2 {
            return Err(Error::InvalidArgument("basis descriptors do not match d1, d2".into()));
        }
        let lambda = from_rows(&self.Lambda_u, n)?;
        let eigs = UnstableEigenfunctions {
            Wu_t: from_rows(&self.Wu_t, 2 * n)?,
            U: from_rows(&self.U, basis.len())?,
            blocks: blocks_of(&lambda),
            Lambda_u: lambda,
            basis: Arc::new(basis),
            diagnostics: self.diagnostics.clone(),
        };
        if eigs.Wu_t.nrows() != n || eigs.U.nrows() != n {
            return Err(Error::Dimension("solution does not match the system dimension".into()));
        }
        let value_fit = match &self.value {
            Some(v) => {
                let xi3 = MonomialBasis::from_descriptor(&v.xi3)?;
                let m = xi3.len();
                Some(ValueFit {
                    Jn: from_rows(&v.Jn, m)?,
                    Jn_psd: from_rows(&v.Jn_psd, m)?,
                    xi3,
                    fit_residual: v.fit_residual,
                    fit_residual_psd: v.fit_residual_psd,
                    objective_residual: v.objective_residual,
                })
            }
            None => None,
        };
        Ok(HJSolution2 { eigs, Jl: from_rows(&self.Jl, n)?, asymmetry: self.asymmetry, value_fit, use_psd: false, sys })
    }
}

/// `d/dx (1/2 Xi3^T Jn Xi3)` as a linear map of the upper-triangular entries
/// of symmetric `Jn` (row-major, `a <= b`).
fn value_gradient_map(xi3: &MonomialBasis, x: &DVector<f64>) -> DMatrix<f64> {
    let m = xi3.len();
    let xi = xi3.eval(x);
    let jac = xi3.jacobian(x);
    let mut out = DMatrix::zeros(x.len(), m * (m + 1) / 2);
    let mut c = 0;
    for a in 0..m {
        for b in a..m {
            // E_ab symmetric with ones at (a, b) and (b, a): J^T E Xi
            let mut col = jac.row(a).transpose() * xi[b];
            if a != b {
                col += jac.row(b).transpose() * xi[a];
            }
            out.set_column(c, &col);
            c += 1;
        }
    }
    out
}

fn unpack_symmetric(h: &DVector<f64>, m: usize) -> DMatrix<f64> {
    let mut jn = DMatrix::zeros(m, m);
    let mut c = 0;
    for a in 0..m {
        for b in a..m {
            jn[(a, b)] = h[c];
            jn[(b, a)] = h[c];
            c += 1;
        }
    }
    jn
}

/// Least-squares `Jn` from `G2(x_k) grad(1/2 Xi3^T Jn Xi3)(x_k) = -G1(x_k)`.
/// When distinct entries of `Jn` multiply the same monomial, the minimum-norm
/// `Jn` is returned.
pub fn fit_value_Jn(sol: &HJSolution2, xi3: MonomialBasis, x_samples: &SampleSet) -> Result<ValueFit> {
    let n = sol.eigs.n();
    if xi3.dim() != n || x_samples.dim() != n {
        return Err(Error::Dimension("value basis and samples must live on x".into()));
    }
    if xi3.min_degree() < 2 {
        return Err(Error::InvalidArgument("value basis must be purely nonlinear".into()));
    }
    let m = xi3.len();
    let nh = m * (m + 1) / 2;
    let l = x_samples.len();
    let mut a = DMatrix::zeros(l * n, nh);
    let mut rhs = DVector::zeros(l * n);
    let mut pn = Vec::with_capacity(l);
    let mut maps = Vec::with_capacity(l);
    for k in 0..l {
        let x = x_samples.point(k);
        let g2 = sol.eigs.g2(&x);
        let map = value_gradient_map(&xi3, &x);
        a.view_mut((k * n, 0), (n, nh)).copy_from(&(&g2 * &map));
        rhs.rows_mut(k * n, n).copy_from(&-sol.eigs.g1(&x, &sol.Jl));
        pn.push(sol.p_n(&x)?);
        maps.push(map);
    }
    // Distinct products Xi3_a Xi3_b bound the rank: e.g. x1^2 x2^2 = (x1 x2)^2.
    let mut sums: Vec<Vec<u32>> = Vec::with_capacity(nh);
    let ex = xi3.exponents();
    for a in 0..m {
        for b in a..m {
            sums.push(ex[a].iter().zip(&ex[b]).map(|(u, v)| u + v).collect());
        }
    }
    sums.sort();
    sums.dedup();
    let rank = sums.len();
    let svd = a.clone().svd(true, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|u, v| v.total_cmp(u));
    if l * n < rank || !(sv[rank - 1] > 1e-10 * sv[0]) {
        return Err(Error::Unidentifiable);
    }
    // minimum-norm solution on the identifiable subspace
    let cut = if rank < sv.len() { (sv[rank - 1] * sv[rank].max(1e-300)).sqrt() } else { 0.0 };
    let h = svd.solve(&rhs, cut).map_err(|e| Error::NoConvergence(e.to_string()))?;
    let objective_residual = ((&a * &h - &rhs).norm_squared() / l as f64).sqrt();
    let Jn = unpack_symmetric(&h, m);
    let eig = Jn.clone().symmetric_eigen();
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let Jn_psd = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    let mismatch = |jn: &DMatrix<f64>| {
        let mut hv = DVector::zeros(nh);
        let mut c = 0;
        for a in 0..m {
            for b in a..m {
                hv[c] = jn[(a, b)];
                c += 1;
            }
        }
        let s: f64 = maps.iter().zip(&pn).map(|(mp, p)| (mp * &hv - p).norm_squared()).sum();
        (s / l as f64).sqrt()
    };
    Ok(ValueFit { fit_residual: mismatch(&Jn), fit_residual_psd: mismatch(&Jn_psd), xi3, Jn, Jn_psd, objective_residual })
}

/// Settings for [`procedure2_solve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Procedure2Config {
    pub d1: u32,
    pub d2: u32,
    pub x_domain: Domain,
    pub samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub p_sampling: PSampling,
}

/// Unstable eigenfunctions, manifold and feedback; the phase-space sample is
/// drawn around the linear Riccati manifold.
pub fn procedure2_solve(sys: SystemRef, cfg: &Procedure2Config) -> Result<HJSolution2> {
    let ham = HamiltonianSystem::new(sys.clone())?;
    let basis = crate::basis::procedure2_basis(ham.n(), cfg.d1, cfg.d2)?;
    let jl_est = lagrangian_subspace(&unstable_left_subspace(&ham.H0)?)?;
    let samples = sample_phase_space(&cfg.x_domain, &jl_est, cfg.samples, cfg.seed, cfg.p_sampling)?;
    let holdout = sample_phase_space(&cfg.x_domain, &jl_est, (cfg.samples / 5).max(1), derive_seed(cfg.seed, 1000), cfg.p_sampling)?;
    let eigs = unstable_eigfns(&ham, basis, &samples, &holdout)?;
    HJSolution2::new(sys, eigs)
}

/// Max over starting points and times of `|p(t) - p*(x(t))|` along Hamiltonian
/// flows started on the manifold.
pub fn manifold_invariance_drift(sol: &HJSolution2, x0: &[DVector<f64>], dt: f64, t_final: f64) -> Result<f64> {
    let ham = HamiltonianSystem::new(sol.sys.clone())?;
    let n = ham.n();
    let mut worst: f64 = 0.0;
    for x in x0 {
        let mut z0 = DVector::zeros(2 * n);
        z0.rows_mut(0, n).copy_from(x);
        z0.rows_mut(n, n).copy_from(&sol.p_star(x)?);
        let traj = integrate_rk4(&ham, &z0, dt, t_final);
        for row in traj.states.row_iter() {
            let z = row.transpose();
            let (xt, pt) = ham.split(&z);
            worst = worst.max((pt - sol.p_star(&xt)?).norm());
        }
    }
    Ok(worst)
}
