//! Galerkin approximation of principal Koopman eigenfunctions over an
//! empirical measure.
//!
//! For an eigenvalue block `Lb` (1x1 or 2x2) with left eigenvector rows `w`
//! of the linearization `E` (`w E = Lb w`), the eigenfunctions are
//! `psi = w z + Theta Gamma(z)`. Projecting the generator residual onto the
//! basis gives `J Theta = -b` with
//! `J[i][j] = delta_ij G_K - Lb[i][j] G_0`, `G_K = mean Gamma (dGamma F)^T`,
//! `G_0 = mean Gamma Gamma^T`, `b_i = mean (w_i F_n) Gamma`, `F_n = F - E z`.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{monomial_basis, Basis, MonomialBasis};
use crate::io::fmt17;
use crate::procedure1::EigenfunctionSet;
use crate::simulate::io_err;
use crate::spectral::{cond2, real_spectral_decomposition, EigenBlock, RealSpectralDecomposition};
use crate::system::VectorField;
use crate::{Error, Result};

/// Samples per parallel work unit. Partial sums are reduced in chunk order,
/// so results do not depend on the thread count.
pub const CHUNK: usize = 1024;

/// Derive an independent seed for a sub-stream (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Axis-aligned box `[lo_i, hi_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Domain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::Dimension("box bounds differ in length".into()));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l < h)) {
            return Err(Error::InvalidArgument("degenerate box".into()));
        }
        Ok(Self { lo, hi })
    }

    /// `[-r_i, r_i]` per coordinate.
    pub fn symmetric(r: &[f64]) -> Result<Self> {
        Self::new(r.iter().map(|v| -v).collect(), r.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, z: &DVector<f64>) -> bool {
        z.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| *v >= *l && *v <= *h)
    }
}

/// Points of an empirical measure (equal weights), one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    /// `L x dim`.
    pub points: DMatrix<f64>,
    pub domain: Domain,
    /// Seed for random sets; `None` for grids and externally supplied points.
    pub seed: Option<u64>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn point(&self, k: usize) -> DVector<f64> {
        self.points.row(k).transpose()
    }

    /// Midpoint grid with `per_dim` cells per axis.
    pub fn grid(domain: &Domain, per_dim: usize) -> Self {
        let d = domain.dim();
        let total = per_dim.pow(d as u32);
        let mut points = DMatrix::zeros(total, d);
        for k in 0..total {
            let mut idx = k;
            for j in (0..d).rev() {
                let i = idx % per_dim;
                idx /= per_dim;
                let h = (domain.hi[j] - domain.lo[j]) / per_dim as f64;
                points[(k, j)] = domain.lo[j] + (i as f64 + 0.5) * h;
            }
        }
        Self { points, domain: domain.clone(), seed: None }
    }

    /// Wrap explicit points; `domain` should bound them.
    pub fn from_points(points: DMatrix<f64>, domain: Domain) -> Self {
        Self { points, domain, seed: None }
    }
}

/// `L` points i.i.d. uniform on the box from ChaCha8 seeded with `seed`,
/// drawn row by row, coordinate by coordinate.
pub fn sample_domain(domain: &Domain, l: usize, seed: u64) -> Result<SampleSet> {
    if l == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = domain.dim();
    let mut points = DMatrix::zeros(l, d);
    for k in 0..l {
        for j in 0..d {
            points[(k, j)] = rng.random_range(domain.lo[j]..domain.hi[j]);
        }
    }
    Ok(SampleSet { points, domain: domain.clone(), seed: Some(seed) })
}

/// Assembled Galerkin system for one eigenvalue block.
#[derive(Debug, Clone)]
pub struct GalerkinProblem {
    /// `kM x kM`.
    pub J: DMatrix<f64>,
    /// `kM`.
    pub b: DVector<f64>,
    pub cond_J: f64,
    /// `k x k` block eigenmatrix.
    pub block: DMatrix<f64>,
    /// `k x dim` linear part.
    pub w: DMatrix<f64>,
    pub n_functions: usize,
}

struct Partial {
    gk: DMatrix<f64>,
    g0: DMatrix<f64>,
    bf: DMatrix<f64>,
}

/// Sum `f(k)` over samples in fixed-size chunks, reducing in chunk order.
fn chunked_sum<T: Send>(len: usize, f: impl Fn(std::ops::Range<usize>) -> T + Sync, add: impl Fn(T, T) -> T) -> Option<T> {
    let chunks: Vec<T> = (0..len.div_ceil(CHUNK)).into_par_iter().map(|c| f(c * CHUNK..((c + 1) * CHUNK).min(len))).collect();
    chunks.into_iter().reduce(add)
}

/// Assemble `J` and `b` for the block `(block, w)` of the linearization `e` of `field`.
pub fn assemble_galerkin(
    field: &dyn VectorField,
    e: &DMatrix<f64>,
    basis: &dyn Basis,
    block: &DMatrix<f64>,
    w: &DMatrix<f64>,
    samples: &SampleSet,
) -> Result<GalerkinProblem> {
    let dim = field.dim();
    let k = block.nrows();
    let m = basis.len();
    if basis.dim() != dim || samples.dim() != dim || e.shape() != (dim, dim) || w.shape() != (k, dim) {
        return Err(Error::Dimension("field, basis, samples and w disagree".into()));
    }
    let eig_res = (w * e - block * w).norm();
    if eig_res > 1e-8 * (1.0 + e.norm()) * w.norm() {
        return Err(Error::InvalidArgument(format!("w is not a left eigenvector block (residual {eig_res:e})")));
    }
    let l = samples.len();
    if l < m {
        return Err(Error::Underdetermined { samples: l, functions: m });
    }
    let partial = chunked_sum(
        l,
        |range| {
            let mut p = Partial { gk: DMatrix::zeros(m, m), g0: DMatrix::zeros(m, m), bf: DMatrix::zeros(m, k) };
            for s in range {
                let z = samples.point(s);
                let f = field.eval(&z);
                let g = basis.eval(&z);
                let lie = basis.jacobian(&z) * &f;
                let forcing = w * (&f - e * &z);
                p.gk.ger(1.0, &g, &lie, 1.0);
                p.g0.ger(1.0, &g, &g, 1.0);
                p.bf.ger(1.0, &g, &forcing, 1.0);
            }
            p
        },
        |a, b| Partial { gk: a.gk + b.gk, g0: a.g0 + b.g0, bf: a.bf + b.bf },
    )
    .expect("at least one sample");
    let inv_l = 1.0 / l as f64;
    let mut J = DMatrix::zeros(k * m, k * m);
    let mut b = DVector::zeros(k * m);
    for i in 0..k {
        for j in 0..k {
            let mut blk = &partial.g0 * (-block[(i, j)] * inv_l);
            if i == j {
                blk += &partial.gk * inv_l;
            }
            J.view_mut((i * m, j * m), (m, m)).copy_from(&blk);
        }
        b.rows_mut(i * m, m).copy_from(&(partial.bf.column(i) * inv_l));
    }
    let cond_J = cond2(&J);
    if !(cond_J < 1e12) {
        return Err(Error::SingularGram(cond_J));
    }
    Ok(GalerkinProblem { J, b, cond_J, block: block.clone(), w: w.clone(), n_functions: m })
}

/// Solve `J Theta = -b` by column-pivoted QR; returns `k x M` coefficients and
/// the solve residual `||J Theta + b||`.
pub fn solve_coefficients(prob: &GalerkinProblem) -> Result<(DMatrix<f64>, f64)> {
    if !(prob.cond_J < 1e12) {
        return Err(Error::SingularGram(prob.cond_J));
    }
    let theta = prob.J.clone().col_piv_qr().solve(&(-&prob.b)).ok_or(Error::SingularGram(prob.cond_J))?;
    let residual = (&prob.J * &theta + &prob.b).norm();
    let k = prob.block.nrows();
    let m = prob.n_functions;
    Ok((DMatrix::from_fn(k, m, |i, j| theta[i * m + j]), residual))
}

/// One principal eigenfunction (or a complex pair as two real components).
#[derive(Debug, Clone)]
pub struct PrincipalEigenfunction<B> {
    pub block: EigenBlock,
    /// `k x dim`.
    pub w: DMatrix<f64>,
    /// `k x M`.
    pub theta: DMatrix<f64>,
    pub basis: Arc<B>,
    pub domain: Domain,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub cond_J: f64,
    pub solve_residual: f64,
    pub train_residual_rms: f64,
    pub holdout_residual_rms: f64,
    /// Held-out residual within the declared tolerance (10x training).
    pub holdout_ok: bool,
}

impl<B: Basis> PrincipalEigenfunction<B> {
    pub fn eval(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.w * z + &self.theta * self.basis.eval(z)
    }

    /// `k x dim`.
    pub fn jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        &self.w + &self.theta * self.basis.jacobian(z)
    }

    /// Block matrix `[[re, -im], [im, re]]` or `[re]`.
    pub fn block_matrix(&self) -> DMatrix<f64> {
        EigenBlock { start: 0, ..self.block }.matrix()
    }
}

/// `z -> (psi(z), dpsi/dz(z))`.
pub type EvalMap<'a> = dyn Fn(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>) + Sync + 'a;

/// RMS over samples of `|dpsi/dz F - Lb psi|` (Euclidean over block components).
pub fn residual_rms(field: &dyn VectorField, block: &DMatrix<f64>, eval: &EvalMap<'_>, samples: &SampleSet) -> f64 {
    let sum = chunked_sum(
        samples.len(),
        |range| {
            range
                .map(|s| {
                    let z = samples.point(s);
                    let (psi, jac) = eval(&z);
                    (jac * field.eval(&z) - block * psi).norm_squared()
                })
                .sum::<f64>()
        },
        |a, b| a + b,
    )
    .unwrap_or(0.0);
    (sum / samples.len() as f64).sqrt()
}

/// Assemble, solve and diagnose one block against a training and a held-out sample.
pub fn approximate_block<B: Basis>(
    field: &dyn VectorField,
    e: &DMatrix<f64>,
    basis: Arc<B>,
    block: EigenBlock,
    w: DMatrix<f64>,
    samples: &SampleSet,
    holdout: &SampleSet,
) -> Result<PrincipalEigenfunction<B>> {
    let bm = EigenBlock { start: 0, ..block }.matrix();
    let prob = assemble_galerkin(field, e, basis.as_ref(), &bm, &w, samples)?;
    let (theta, solve_residual) = solve_coefficients(&prob)?;
    let mut ef = PrincipalEigenfunction {
        block,
        w,
        theta,
        basis,
        domain: samples.domain.clone(),
        diagnostics: Diagnostics { cond_J: prob.cond_J, solve_residual, ..Default::default() },
    };
    let eval = |z: &DVector<f64>| (ef.eval(z), ef.jacobian(z));
    let train = residual_rms(field, &bm, &eval, samples);
    let holdout = residual_rms(field, &bm, &eval, holdout);
    ef.diagnostics.train_residual_rms = train;
    ef.diagnostics.holdout_residual_rms = holdout;
    ef.diagnostics.holdout_ok = holdout <= (10.0 * train).max(1e-12);
    Ok(ef)
}

/// Coordinates the monomials are expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    /// Monomials of the state itself.
    #[default]
    State,
    /// Monomials of `y = Vt x`, the linear eigen-coordinates.
    Eigen,
}

/// How to build the per-block monomial basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub deg_min: u32,
    pub deg_max: u32,
    #[serde(default)]
    pub frame: Frame,
    /// In the eigen frame with a real spectrum, drop monomials `y^alpha` whose
    /// eigenvalue `alpha . lambda` equals the target eigenvalue: they solve the
    /// homogeneous equation and make `J` singular.
    #[serde(default)]
    pub drop_resonant: bool,
}

impl BasisSpec {
    pub fn monomials(deg_min: u32, deg_max: u32) -> Self {
        Self { deg_min, deg_max, frame: Frame::State, drop_resonant: false }
    }

    pub fn build(&self, rsd: &RealSpectralDecomposition, block: &EigenBlock) -> Result<MonomialBasis> {
        let n = rsd.Vt.nrows();
        let mut b = monomial_basis(n, self.deg_min, self.deg_max)?;
        if self.frame == Frame::Eigen {
            b = b.with_frame(rsd.Vt.clone())?;
            let real = rsd.blocks.iter().all(|b| b.size == 1);
            if self.drop_resonant && real && block.size == 1 {
                let lambdas: Vec<f64> = rsd.blocks.iter().map(|b| b.re).collect();
                let scale = lambdas.iter().fold(1.0f64, |m, l| m.max(l.abs()));
                let target = block.re;
                b = b.retain(|e| {
                    let mu: f64 = e.iter().zip(&lambdas).map(|(&a, l)| a as f64 * l).sum();
                    (mu - target).abs() > 1e-6 * scale
                });
            }
        }
        Ok(b)
    }
}

/// Principal eigenfunctions for every eigenvalue block of `e`, with linear
/// parts from the real spectral decomposition.
pub fn approximate_eigenfunction_set(
    field: &dyn VectorField,
    e: &DMatrix<f64>,
    spec: &BasisSpec,
    samples: &SampleSet,
) -> Result<EigenfunctionSet> {
    let rsd = real_spectral_decomposition(e)?;
    let holdout = sample_domain(&samples.domain, (samples.len() / 5).max(1), derive_seed(samples.seed.unwrap_or(0), 1000))?;
    let mut parts = Vec::with_capacity(rsd.blocks.len());
    for block in &rsd.blocks {
        let basis = Arc::new(spec.build(&rsd, block)?);
        let w = rsd.Vt.rows(block.start, block.size).into_owned();
        parts.push(approximate_block(field, e, basis, *block, w, samples, &holdout)?);
    }
    Ok(EigenfunctionSet::from_galerkin(rsd, samples.domain.clone(), parts))
}

/// Reference eigenfunction for a convergence study.
pub enum Reference<'a> {
    /// Closed form in the normalization of the computed linear part.
    Analytic(&'a (dyn Fn(&DVector<f64>) -> f64 + Sync)),
    /// The same Galerkin problem on a midpoint grid with `per_dim` cells per axis.
    Quadrature { per_dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub samples: usize,
    pub trial: usize,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    pub samples: usize,
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    pub summary: Vec<ConvergenceSummary>,
    /// Least-squares slope of log(mean error) against log L.
    pub slope: f64,
    /// Same fit on medians.
    pub median_slope: f64,
}

impl ConvergenceTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["L", "trial", "error"]).map_err(io_err)?;
        for r in &self.rows {
            w.write_record([r.samples.to_string(), r.trial.to_string(), fmt17(r.error)]).map_err(io_err)?;
        }
        w.flush().map_err(|e| Error::Io(e.to_string()))
    }

    pub fn medians_strictly_decrease(&self) -> bool {
        self.summary.windows(2).all(|p| p[1].median < p[0].median)
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Normalized empirical-L2 error of the Galerkin eigenfunction for block
/// `block_index` against a reference, for each `L` and trial. Trial `t` at
/// sample size `L` uses seed `derive_seed(seed, L * 1_000_003 + t)`; errors are
/// measured on a fixed `eval_per_dim` midpoint grid.
#[allow(clippy::too_many_arguments)]
pub fn convergence_study(
    field: &dyn VectorField,
    e: &DMatrix<f64>,
    block_index: usize,
    spec: &BasisSpec,
    domain: &Domain,
    l_list: &[usize],
    trials: usize,
    seed: u64,
    reference: Reference<'_>,
    eval_per_dim: usize,
) -> Result<ConvergenceTable> {
    let rsd = real_spectral_decomposition(e)?;
    let block = *rsd.blocks.get(block_index).ok_or_else(|| Error::InvalidArgument(format!("no eigenvalue block {block_index}")))?;
    if block.size != 1 {
        return Err(Error::InvalidArgument("convergence study needs a real eigenvalue".into()));
    }
    let basis = Arc::new(spec.build(&rsd, &block)?);
    let w = rsd.Vt.rows(block.start, 1).into_owned();
    let bm = EigenBlock { start: 0, ..block }.matrix();
    let grid = SampleSet::grid(domain, eval_per_dim);
    let solve = |s: &SampleSet| -> Result<DMatrix<f64>> {
        let prob = assemble_galerkin(field, e, basis.as_ref(), &bm, &w, s)?;
        Ok(solve_coefficients(&prob)?.0)
    };
    let reference_values: Vec<f64> = match reference {
        Reference::Analytic(f) => (0..grid.len()).map(|k| f(&grid.point(k))).collect(),
        Reference::Quadrature { per_dim } => {
            let theta = solve(&SampleSet::grid(domain, per_dim))?;
            (0..grid.len())
                .map(|k| {
                    let z = grid.point(k);
                    (&w * &z)[0] + (&theta * basis.eval(&z))[0]
                })
                .collect()
        }
    };
    let ref_norm = reference_values.iter().map(|v| v * v).sum::<f64>().sqrt();
    let grid_basis: Vec<(f64, DVector<f64>)> = (0..grid.len())
        .map(|k| {
            let z = grid.point(k);
            ((&w * &z)[0], basis.eval(&z))
        })
        .collect();
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &l in l_list {
        let errors: Vec<f64> = (0..trials)
            .into_par_iter()
            .map(|t| -> Result<f64> {
                let s = sample_domain(domain, l, derive_seed(seed, l as u64 * 1_000_003 + t as u64))?;
                let theta = solve(&s)?;
                let diff: f64 = grid_basis
                    .iter()
                    .zip(&reference_values)
                    .map(|((lin, g), r)| {
                        let v = lin + (&theta * g)[0] - r;
                        v * v
                    })
                    .sum();
                Ok(diff.sqrt() / ref_norm)
            })
            .collect::<Result<_>>()?;
        rows.extend(errors.iter().enumerate().map(|(t, &error)| ConvergenceRow { samples: l, trial: t, error }));
        let mut sorted = errors.clone();
        sorted.sort_by(f64::total_cmp);
        summary.push(ConvergenceSummary {
            samples: l,
            mean: errors.iter().sum::<f64>() / errors.len() as f64,
            q1: quantile(&sorted, 0.25),
            median: quantile(&sorted, 0.5),
            q3: quantile(&sorted, 0.75),
        });
    }
    let logl: Vec<f64> = summary.iter().map(|s| (s.samples as f64).ln()).collect();
    let slope = fit_slope(&logl, &summary.iter().map(|s| s.mean.ln()).collect::<Vec<_>>());
    let median_slope = fit_slope(&logl, &summary.iter().map(|s| s.median.ln()).collect::<Vec<_>>());
    Ok(ConvergenceTable { rows, summary, slope, median_slope })
}

fn joined(m: &DMatrix<f64>) -> String {
    m.row_iter().flat_map(|r| r.iter().map(|v| fmt17(*v)).collect::<Vec<_>>()).collect::<Vec<_>>().join(";")
}

/// One row per eigenvalue block: block data, `w` and `Theta` (row-major,
/// `;`-separated), residuals and `cond_J`.
pub fn write_blocks_csv<W: Write, B: Basis>(parts: &[PrincipalEigenfunction<B>], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["start", "size", "re", "im", "w", "theta", "train_residual_rms", "holdout_residual_rms", "cond_J"]).map_err(io_err)?;
    for p in parts {
        w.write_record([
            p.block.start.to_string(),
            p.block.size.to_string(),
            fmt17(p.block.re),
            fmt17(p.block.im),
            joined(&p.w),
            joined(&p.theta),
            fmt17(p.diagnostics.train_residual_rms),
            fmt17(p.diagnostics.holdout_residual_rms),
            fmt17(p.diagnostics.cond_J),
        ])
        .map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))
}
