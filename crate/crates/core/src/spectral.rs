//! Real block spectral decompositions, unstable invariant subspaces of
//! Hamiltonian matrices and stabilizing Riccati solutions.

use nalgebra::{Complex, ComplexField, DMatrix, Schur, SVD};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One diagonal block of a real block eigenmatrix: `1x1` for a real
/// eigenvalue, `2x2 [[re, -im], [im, re]]` for a pair `re +- i im`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenBlock {
    pub start: usize,
    pub size: usize,
    pub re: f64,
    pub im: f64,
}

impl EigenBlock {
    pub fn matrix(&self) -> DMatrix<f64> {
        if self.size == 1 {
            DMatrix::from_element(1, 1, self.re)
        } else {
            DMatrix::from_row_slice(2, 2, &[self.re, -self.im, self.im, self.re])
        }
    }
}

/// `Vt A = Lambda Vt` with `Lambda` in real block-diagonal form.
#[derive(Debug, Clone, PartialEq)]
pub struct RealSpectralDecomposition {
    pub Lambda: DMatrix<f64>,
    pub Vt: DMatrix<f64>,
    pub cond_V: f64,
    pub blocks: Vec<EigenBlock>,
}

/// Left unstable invariant subspace of a `2n x 2n` Hamiltonian matrix:
/// `D_full H = Lambda_u D_full`, `D_full = [D1 D2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnstableSubspace {
    pub D_full: DMatrix<f64>,
    pub D1: DMatrix<f64>,
    pub D2: DMatrix<f64>,
    pub Lambda_u: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub P: DMatrix<f64>,
    /// `||A^T P + P A - P R P + Q||_F`.
    pub residual: f64,
    pub closed_loop_spectrum: Vec<Complex<f64>>,
}

/// Eigenvalues sorted by real part, then imaginary part.
pub fn eigenvalues(a: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    let schur = Schur::try_new(a.clone(), f64::EPSILON, 10_000).ok_or_else(|| Error::NoConvergence("Schur decomposition".into()))?;
    let mut ev: Vec<Complex<f64>> = schur.complex_eigenvalues().iter().copied().collect();
    ev.sort_by(|x, y| x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im)));
    Ok(ev)
}

/// 2-norm condition number.
pub fn cond2(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Reduced row echelon form of the rows of `m`, with partial pivoting.
fn rref<T: ComplexField<RealField = f64>>(mut m: DMatrix<T>) -> DMatrix<T> {
    let (rows, cols) = m.shape();
    let mut r = 0;
    for c in 0..cols {
        if r == rows {
            break;
        }
        let (piv, val) = (r..rows).map(|i| (i, m[(i, c)].clone().modulus())).max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        if val < 1e-10 {
            continue;
        }
        m.swap_rows(r, piv);
        let inv = T::one() / m[(r, c)].clone();
        for j in 0..cols {
            m[(r, j)] = m[(r, j)].clone() * inv.clone();
        }
        for i in 0..rows {
            if i != r {
                let factor = m[(i, c)].clone();
                for j in 0..cols {
                    let sub = factor.clone() * m[(r, j)].clone();
                    m[(i, j)] = m[(i, j)].clone() - sub;
                }
            }
        }
        r += 1;
    }
    m
}

/// Null-space basis (as rows) of dimension `mult` of a square matrix, or
/// `Defective` if the numerical nullity is smaller than `mult`.
fn null_rows<T: ComplexField<RealField = f64>>(m: DMatrix<T>, mult: usize, scale: f64) -> Result<DMatrix<T>> {
    let n = m.ncols();
    let svd = SVD::try_new(m, false, true, f64::EPSILON, 10_000).ok_or_else(|| Error::NoConvergence("SVD".into()))?;
    let vt = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    let tol = 1e-8 * scale;
    let nullity = order.iter().filter(|&&i| svd.singular_values[i] <= tol).count();
    if nullity < mult {
        return Err(Error::Defective);
    }
    // Null vectors are columns of V, i.e. conjugated rows of V^H.
    let rows: Vec<_> = order[..mult].iter().map(|&i| vt.row(i).map(|c| c.conjugate())).collect();
    let basis = DMatrix::from_rows(&rows);
    Ok(if mult > 1 { rref(basis) } else { basis.resize(mult, n, T::zero()) })
}

fn first_significant(v: &[f64]) -> f64 {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    v.iter().copied().find(|x| x.abs() > 1e-8 * max).unwrap_or(0.0)
}

/// Unit norm, first significant entry positive.
pub fn normalize_real_row(row: &mut [f64]) {
    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return;
    }
    let sign = if first_significant(row) < 0.0 { -1.0 } else { 1.0 };
    row.iter_mut().for_each(|x| *x *= sign / norm);
}

/// Normalize the pair of rows `(u, v)` of `y = u + i v` by a complex scalar:
/// rotate so `u` is orthogonal to `v` with `|u| >= |v|`, scale `|u| = 1`, and
/// make the first significant entry of `u` positive.
pub fn normalize_pair_rows(u: &mut [f64], v: &mut [f64]) {
    let uu: f64 = u.iter().map(|x| x * x).sum();
    let vv: f64 = v.iter().map(|x| x * x).sum();
    let uv: f64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
    let theta = 0.5 * (2.0 * uv).atan2(uu - vv);
    let (s, c) = theta.sin_cos();
    // y * e^{-i theta} = (u c + v s) + i (v c - u s)
    for (a, b) in u.iter_mut().zip(v.iter_mut()) {
        let (na, nb) = (*a * c + *b * s, *b * c - *a * s);
        *a = na;
        *b = nb;
    }
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return;
    }
    let sign = if first_significant(u) < 0.0 { -1.0 } else { 1.0 };
    u.iter_mut().for_each(|x| *x *= sign / norm);
    v.iter_mut().for_each(|x| *x *= sign / norm);
}

/// Real block spectral decomposition with left eigenvectors.
///
/// Blocks are ordered by ascending real part, then imaginary part; pairs use
/// the eigenvalue with positive imaginary part. Eigenvector rows have unit
/// norm with first significant entry positive; repeated eigenvalues get the
/// reduced row echelon basis of their left eigenspace.
pub fn real_spectral_decomposition(a: &DMatrix<f64>) -> Result<RealSpectralDecomposition> {
    if !a.is_square() {
        return Err(Error::Dimension("matrix must be square".into()));
    }
    let n = a.nrows();
    let scale = a.norm().max(1.0);
    let ev = eigenvalues(a)?;
    let imag_tol = 1e-10 * scale;

    // Representatives: real eigenvalues and the positive member of each pair.
    let reps: Vec<Complex<f64>> =
        ev.iter().filter(|z| z.im > -imag_tol).map(|z| if z.im.abs() <= imag_tol { Complex::new(z.re, 0.0) } else { *z }).collect();
    let cluster_tol = 1e-6 * scale;
    let mut clusters: Vec<(Complex<f64>, usize)> = Vec::new();
    for z in reps {
        match clusters.iter_mut().find(|(c, k)| (*c / *k as f64 - z).norm() <= cluster_tol) {
            Some((c, k)) => {
                *c += z;
                *k += 1;
            }
            None => clusters.push((z, 1)),
        }
    }
    let mut clusters: Vec<(Complex<f64>, usize)> = clusters.into_iter().map(|(c, k)| (c / k as f64, k)).collect();
    clusters.sort_by(|x, y| x.0.re.total_cmp(&y.0.re).then(x.0.im.total_cmp(&y.0.im)));

    let mut vt = DMatrix::zeros(n, n);
    let mut lambda = DMatrix::zeros(n, n);
    let mut blocks = Vec::new();
    let mut row = 0;
    for (z, mult) in clusters {
        if z.im == 0.0 {
            let shifted = a.transpose() - DMatrix::identity(n, n) * z.re;
            let rows = null_rows(shifted, mult, scale)?;
            for k in 0..mult {
                let mut r: Vec<f64> = rows.row(k).iter().copied().collect();
                normalize_real_row(&mut r);
                vt.row_mut(row).copy_from_slice(&r);
                lambda[(row, row)] = z.re;
                blocks.push(EigenBlock { start: row, size: 1, re: z.re, im: 0.0 });
                row += 1;
            }
        } else {
            let ac = a.transpose().map(|x| Complex::new(x, 0.0));
            let shifted = ac - DMatrix::<Complex<f64>>::identity(n, n) * z;
            let rows = null_rows(shifted, mult, scale)?;
            for k in 0..mult {
                if row + 2 > n {
                    return Err(Error::Defective);
                }
                let mut u: Vec<f64> = rows.row(k).iter().map(|c| c.re).collect();
                let mut v: Vec<f64> = rows.row(k).iter().map(|c| c.im).collect();
                normalize_pair_rows(&mut u, &mut v);
                vt.row_mut(row).copy_from_slice(&u);
                vt.row_mut(row + 1).copy_from_slice(&v);
                let block = EigenBlock { start: row, size: 2, re: z.re, im: z.im };
                lambda.view_mut((row, row), (2, 2)).copy_from(&block.matrix());
                blocks.push(block);
                row += 2;
            }
        }
    }
    if row != n {
        return Err(Error::Defective);
    }
    let cond_V = cond2(&vt);
    if !(cond_V < 1e12) {
        return Err(Error::IllConditionedEigenvectors(cond_V));
    }
    Ok(RealSpectralDecomposition { Lambda: lambda, Vt: vt, cond_V, blocks })
}

/// Matrix sign function by the determinant-scaled Newton iteration.
fn matrix_sign(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let mut s = m.clone();
    let mut scaling = true;
    for _ in 0..100 {
        let lu = s.clone().lu();
        let inv = lu.try_inverse().ok_or_else(|| Error::NoConvergence("sign iteration hit a singular iterate".into()))?;
        let c = if scaling {
            let logdet: f64 = s.clone().lu().u().diagonal().iter().map(|d| d.abs().ln()).sum();
            (-logdet / n as f64).exp()
        } else {
            1.0
        };
        let next = (&s * c + inv / c) * 0.5;
        let change = (&next - &s).norm() / next.norm();
        s = next;
        if change < 1e-2 {
            scaling = false;
        }
        if change < 1e-14 {
            return Ok(s);
        }
    }
    if (&s * &s - DMatrix::identity(n, n)).norm() < 1e-8 * s.norm() {
        Ok(s)
    } else {
        Err(Error::NoConvergence("matrix sign iteration".into()))
    }
}

/// Rows spanning the left invariant subspace of `H` for eigenvalues with
/// positive real part, orthonormalized.
pub fn unstable_left_subspace(h: &DMatrix<f64>) -> Result<UnstableSubspace> {
    if !h.is_square() || !h.nrows().is_multiple_of(2) {
        return Err(Error::Dimension("Hamiltonian matrix must be 2n x 2n".into()));
    }
    let n = h.nrows() / 2;
    let ev = eigenvalues(h)?;
    if let Some(z) = ev.iter().find(|z| z.re.abs() < 1e-8) {
        return Err(Error::HyperbolicityViolated(z.re));
    }
    let unstable = ev.iter().filter(|z| z.re > 0.0).count();
    if unstable != n {
        return Err(Error::NotHamiltonianSpectrum { unstable, expected: n });
    }
    let s = matrix_sign(&h.transpose())?;
    let proj = (DMatrix::identity(2 * n, 2 * n) + s) * 0.5;
    let qr = proj.col_piv_qr();
    let q = qr.q();
    let D_full = q.columns(0, n).transpose();
    let Lambda_u = &D_full * h * D_full.transpose();
    Ok(UnstableSubspace { D1: D_full.columns(0, n).into_owned(), D2: D_full.columns(n, n).into_owned(), D_full, Lambda_u })
}

/// `L = -D2^{-1} D1`, symmetrized after checking the asymmetry.
pub fn lagrangian_subspace(sub: &UnstableSubspace) -> Result<DMatrix<f64>> {
    let c = cond2(&sub.D2);
    if !(c < 1e12) {
        return Err(Error::ComplementarityFails(c));
    }
    let l = -sub.D2.clone().lu().solve(&sub.D1).ok_or(Error::ComplementarityFails(c))?;
    let asym = (&l - l.transpose()).norm();
    if asym > 1e-8 * l.norm() {
        return Err(Error::Asymmetric(asym / l.norm()));
    }
    Ok((&l + l.transpose()) * 0.5)
}

/// `[[A, -R], [-Q, -A^T]]`.
pub fn hamiltonian_matrix(a: &DMatrix<f64>, r: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-r));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));
    h
}

pub fn riccati_residual(a: &DMatrix<f64>, r: &DMatrix<f64>, q: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    (a.transpose() * p + p * a - p * r * p + q).norm()
}

/// Stabilizing solution of `A^T P + P A - P R P + Q = 0` from the unstable
/// left subspace of the Hamiltonian matrix.
pub fn solve_riccati(a: &DMatrix<f64>, r: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<RiccatiSolution> {
    let n = a.nrows();
    if !a.is_square() || r.shape() != (n, n) || q.shape() != (n, n) {
        return Err(Error::Dimension("A, R, Q must all be n x n".into()));
    }
    let sub = unstable_left_subspace(&hamiltonian_matrix(a, r, q))?;
    let P = lagrangian_subspace(&sub)?;
    let residual = riccati_residual(a, r, q, &P);
    let closed_loop_spectrum = eigenvalues(&(a - r * &P))?;
    let max_re = closed_loop_spectrum.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    if max_re >= 0.0 {
        return Err(Error::NotStabilizing(max_re));
    }
    Ok(RiccatiSolution { P, residual, closed_loop_spectrum })
}
