//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stabilizing Riccati solution by integrating
/// `dP/dt = A^T P + P A - P R P + Q` from `P = 0` to steady state (RK4).
pub fn riccati_ode(a: &DMatrix<f64>, r: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let rhs = |p: &DMatrix<f64>| a.transpose() * p + p * a - p * r * p + q;
    let mut p = DMatrix::zeros(n, n);
    let dt = 0.05 / (1.0 + a.norm() + (r.norm() * q.norm()).sqrt());
    for _ in 0..2_000_000 {
        let k1 = rhs(&p);
        let k2 = rhs(&(&p + &k1 * (dt / 2.0)));
        let k3 = rhs(&(&p + &k2 * (dt / 2.0)));
        let k4 = rhs(&(&p + &k3 * dt));
        p += (k1.clone() + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        if k1.norm() < 1e-12 * (1.0 + p.norm()) {
            break;
        }
    }
    p
}

/// Random LQ instance `(A, B, Q)` with `Q` positive definite.
pub fn random_lq(rng: &mut ChaCha8Rng, n: usize, m: usize) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let b = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
    let c = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let q = &c * c.transpose() + DMatrix::identity(n, n) * 0.2;
    (a, b, q)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_point(rng: &mut ChaCha8Rng, lo: &[f64], hi: &[f64]) -> DVector<f64> {
    DVector::from_iterator(lo.len(), lo.iter().zip(hi).map(|(&l, &h)| rng.random_range(l..h)))
}

/// Least-squares coefficients of `y` on the columns of `features`.
pub fn least_squares(features: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    features.clone().svd(true, true).solve(y, 1e-14).unwrap()
}

/// Cosine similarity of two vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}
