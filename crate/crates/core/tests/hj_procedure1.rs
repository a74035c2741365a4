mod common;

use std::sync::Arc;

use koopman_hj::galerkin::{approximate_eigenfunction_set, sample_domain, BasisSpec, Domain};
use koopman_hj::procedure1::*;
use koopman_hj::solution::{write_evaluation_csv, HjSolution};
use koopman_hj::spectral::{real_spectral_decomposition, riccati_residual};
use koopman_hj::system::{hj_residual, linearize, Drift, Example1, Polynomial, PolynomialSystem, SystemRef, Term};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn example1() -> SystemRef {
    Arc::new(Example1::new())
}

fn wide() -> Domain {
    Domain::symmetric(&[10.0, 10.0]).unwrap()
}

fn cubic_system() -> SystemRef {
    let f = Polynomial::new(vec![Term { exponents: vec![1], coef: -1.0 }, Term { exponents: vec![3], coef: 1.0 }]);
    Arc::new(PolynomialSystem::new(vec![f], vec![Polynomial::constant(1.0, 1)], DMatrix::identity(1, 1), DMatrix::identity(1, 1)).unwrap())
}

fn cubic_eigenfunction() -> EigenfunctionSet {
    let h: Arc<NonlinearMap> = Arc::new(|x: &DVector<f64>| {
        let s = 1.0 - x[0] * x[0];
        (DVector::from_element(1, x[0] / s.sqrt() - x[0]), DMatrix::from_element(1, 1, s.powf(-1.5) - 1.0))
    });
    EigenfunctionSet::analytic(DMatrix::from_element(1, 1, -1.0), DMatrix::identity(1, 1), Domain::symmetric(&[0.5]).unwrap(), h)
}

/// Least-squares coefficients of `u` in the span of `(x1, x2, sin x2)`.
fn control_coefficients(sol: &HJSolution1) -> DVector<f64> {
    let mut rng = common::rng(1);
    let pts: Vec<DVector<f64>> = (0..60).map(|_| DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0))).collect();
    let a = DMatrix::from_fn(60, 3, |i, j| [pts[i][0], pts[i][1], pts[i][1].sin()][j]);
    let b = DVector::from_fn(60, |i, _| sol.control(&pts[i])[0]);
    common::least_squares(&a, &b)
}

#[test]
fn r1_q1_example1() {
    let lin = linearize(&Example1::new()).unwrap();
    let vt = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 1.0, 1.0]);
    let (r1, q1) = compute_R1_Q1(&lin, &vt).unwrap();
    approx::assert_abs_diff_eq!(r1, DMatrix::from_element(2, 2, 1.0), epsilon = 1e-9);
    approx::assert_abs_diff_eq!(q1, DMatrix::identity(2, 2), epsilon = 1e-6);
}

#[test]
fn r1_q1_identity_and_singular() {
    let sys =
        PolynomialSystem::linear(&-DMatrix::identity(2, 2), &DMatrix::identity(2, 2), DMatrix::identity(2, 2), DMatrix::identity(2, 2))
            .unwrap();
    let lin = linearize(&sys).unwrap();
    let (r1, q1) = compute_R1_Q1(&lin, &DMatrix::identity(2, 2)).unwrap();
    approx::assert_abs_diff_eq!(r1, DMatrix::identity(2, 2), epsilon = 1e-9);
    approx::assert_abs_diff_eq!(q1, DMatrix::identity(2, 2), epsilon = 1e-9);
    assert!(compute_R1_Q1(&lin, &DMatrix::zeros(2, 2)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn congruence_keeps_semidefinite(seed in 0u64..10_000) {
        let mut rng = common::rng(seed);
        let (a, b, q) = common::random_lq(&mut rng, 3, 1);
        let lin = linearize(&PolynomialSystem::linear(&a, &b, q, DMatrix::identity(1, 1)).unwrap()).unwrap();
        let vt = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0)) + DMatrix::identity(3, 3) * 2.0;
        let (r1, q1) = compute_R1_Q1(&lin, &vt).unwrap();
        prop_assert!((&r1 - r1.transpose()).amax() < 1e-12);
        prop_assert!((&q1 - q1.transpose()).amax() < 1e-12 * q1.amax());
        prop_assert!(r1.symmetric_eigenvalues().min() > -1e-10 * r1.amax());
        prop_assert!(q1.symmetric_eigenvalues().min() > 0.0);
    }
}

#[test]
fn example1_analytic_reproduces_l_and_control() {
    let sol = procedure1_solve(example1(), example1_eigenfunctions(wide())).unwrap();
    let expected = DMatrix::from_row_slice(2, 2, &[0.49, -0.62, -0.62, 5.35]);
    assert!((&sol.L - expected).amax() <= 1e-2, "{}", sol.L);
    assert!(sol.riccati_residual <= 1e-8);
    let c = control_coefficients(&sol);
    for (got, want) in c.iter().zip([-4.61, -0.263, -4.74]) {
        assert!((got - want).abs() <= 2e-2, "{c}");
    }
}

#[test]
fn example1_value_solves_hj() {
    let sol = procedure1_solve(example1(), example1_eigenfunctions(wide())).unwrap();
    assert_eq!(sol.value(&DVector::zeros(2)), 0.0);
    assert_eq!(sol.grad_value(&DVector::zeros(2)).amax(), 0.0);
    let mut rng = common::rng(3);
    for _ in 0..200 {
        let x = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let r = hj_residual(sol.sys.as_ref(), |x| sol.grad_value(x), &x);
        assert!(r.abs() <= 1e-6, "residual {r} at {x}");
    }
}

#[test]
fn example1_galerkin_close_to_analytic() {
    let d = Domain::symmetric(&[1.0, 1.0]).unwrap();
    let s = sample_domain(&d, 10_000, 42).unwrap();
    let eig = approximate_eigenfunction_set(&Drift(example1()), &linearize(&Example1::new()).unwrap().A, &BasisSpec::monomials(2, 5), &s)
        .unwrap();
    let sol = procedure1_solve(example1(), eig).unwrap();
    let c = control_coefficients(&sol);
    for (got, want) in c.iter().zip([-4.61, -0.263, -4.74]) {
        assert!((got - want).abs() <= 2e-2, "{c}");
    }
}

#[test]
fn example1_galerkin_hj_residual() {
    let d = Domain::symmetric(&[1.0, 1.0]).unwrap();
    let s = sample_domain(&d, 10_000, 42).unwrap();
    let eig = approximate_eigenfunction_set(&Drift(example1()), &linearize(&Example1::new()).unwrap().A, &BasisSpec::monomials(2, 7), &s)
        .unwrap();
    let sol = procedure1_solve(example1(), eig).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        for j in 0..50 {
            let x = DVector::from_vec(vec![-1.0 + 2.0 * i as f64 / 49.0, -1.0 + 2.0 * j as f64 / 49.0]);
            worst = worst.max(hj_residual(sol.sys.as_ref(), |x| sol.grad_value(x), &x).abs());
        }
    }
    assert!(worst <= 5e-3, "{worst}");
}

#[test]
fn scalar_cubic_closed_form_value() {
    let sol = procedure1_solve(cubic_system(), cubic_eigenfunction()).unwrap();
    let l = 2f64.sqrt() - 1.0;
    assert!((sol.L[(0, 0)] - l).abs() < 1e-10);
    for i in 0..=80 {
        let x = -0.4 + 0.01 * i as f64;
        let v = sol.value(&DVector::from_element(1, x));
        assert!((v - 0.5 * l * x * x / (1.0 - x * x)).abs() < 1e-12);
    }
}

#[test]
fn linear_embedding_example1() {
    let sys = example1();
    let lin = linearize(sys.as_ref()).unwrap();
    let rsd = real_spectral_decomposition(&lin.A).unwrap();
    let sol = procedure1_solve(sys, EigenfunctionSet::linear(rsd.clone(), wide())).unwrap();
    let p = rsd.Vt.transpose() * &sol.L * &rsd.Vt;
    assert!(riccati_residual(&lin.A, &lin.R0, &lin.Q0, &p) <= 1e-8);
    let x = DVector::from_vec(vec![0.3, -0.2]);
    assert!((sol.value(&x) - 0.5 * (&p * &x).dot(&x)).abs() < 1e-12);
    approx::assert_abs_diff_eq!(p, common::riccati_ode(&lin.A, &lin.R0, &lin.Q0), epsilon = 1e-7);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]
    #[test]
    fn linear_embedding_random(seed in 0u64..10_000, n in 1usize..=5, m in 1usize..=2) {
        let mut rng = common::rng(seed);
        let (a, b, q) = common::random_lq(&mut rng, n, m);
        let sys: SystemRef = Arc::new(PolynomialSystem::linear(&a, &b, q, DMatrix::identity(m, m)).unwrap());
        let lin = linearize(sys.as_ref()).unwrap();
        let rsd = match real_spectral_decomposition(&lin.A) {
            Ok(r) => r,
            Err(_) => return Ok(()),
        };
        let sol = procedure1_solve(sys, EigenfunctionSet::linear(rsd.clone(), Domain::symmetric(&vec![1.0; n]).unwrap())).unwrap();
        let p = rsd.Vt.transpose() * &sol.L * &rsd.Vt;
        prop_assert!(riccati_residual(&lin.A, &lin.R0, &lin.Q0, &p) <= 1e-8 * (1.0 + p.norm()));
        let oracle = common::riccati_ode(&lin.A, &lin.R0, &lin.Q0);
        prop_assert!((&p - &oracle).amax() <= 1e-6 * (1.0 + oracle.amax()));
    }
}

#[test]
fn positive_near_origin() {
    let sol = procedure1_solve(example1(), example1_eigenfunctions(wide())).unwrap();
    assert!(sol.L.symmetric_eigenvalues().min() > 0.0);
    let mut rng = common::rng(5);
    for _ in 0..200 {
        let x = DVector::from_fn(2, |_, _| rng.random_range(-0.07..0.07));
        if x.norm() > 0.0 && x.norm() <= 0.1 {
            assert!(sol.value(&x) > 0.0);
        }
    }
}

#[test]
fn control_consistency() {
    let sol = procedure1_solve(example1(), example1_eigenfunctions(wide())).unwrap();
    let x = DVector::from_vec(vec![0.4, -0.9]);
    let manual = -(sol.sys.d_inv() * sol.sys.g(&x).transpose() * sol.grad_value(&x));
    assert!((sol.control(&x) - &manual).amax() <= 1e-12);
    assert!((HjSolution::control(&sol, &x).unwrap() - manual).amax() <= 1e-12);
}

#[test]
fn rescaling_leaves_value_unchanged() {
    let eig = example1_eigenfunctions(wide());
    let a = procedure1_solve(example1(), eig.clone()).unwrap();
    let b = procedure1_solve(example1(), eig.rescaled(&[2.0, 0.3]).unwrap()).unwrap();
    let x = DVector::from_vec(vec![0.5, 0.2]);
    assert!((a.value(&x) - b.value(&x)).abs() < 1e-10);
    assert!((a.control(&x) - b.control(&x)).amax() < 1e-9);
    assert!(eig.rescaled(&[1.0]).is_err());
}

#[test]
fn dimension_mismatch_rejected() {
    assert!(procedure1_solve(cubic_system(), example1_eigenfunctions(wide())).is_err());
}

#[test]
fn integrability_linear_exact() {
    let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, 1.5]);
    let sys: SystemRef = Arc::new(
        PolynomialSystem::linear(&a, &DMatrix::from_element(2, 1, 1.0), DMatrix::identity(2, 2), DMatrix::identity(1, 1)).unwrap(),
    );
    let rsd = real_spectral_decomposition(&a).unwrap();
    let eig = EigenfunctionSet::linear(rsd, Domain::symmetric(&[50.0, 50.0]).unwrap());
    let s = sample_domain(&Domain::symmetric(&[0.5; 4]).unwrap(), 20, 1).unwrap();
    let rep = verify_nominal_integrability(&eig, sys, &s, 1e-3, 1.0).unwrap();
    assert_eq!(rep.used, 20);
    assert!(rep.x_drift <= 1e-8 && rep.p_drift <= 1e-8, "{rep:?}");
}

#[test]
fn integrability_example1() {
    let eig = example1_eigenfunctions(Domain::symmetric(&[50.0, 50.0]).unwrap());
    let s = sample_domain(&Domain::symmetric(&[0.5; 4]).unwrap(), 50, 2).unwrap();
    let rep = verify_nominal_integrability(&eig, example1(), &s, 1e-4, 1.0).unwrap();
    assert_eq!(rep.used + rep.excluded, 50);
    assert!(rep.used >= 45);
    assert!(rep.h0_drift <= 1e-6, "{rep:?}");
    assert!(rep.x_drift <= 1e-4 && rep.p_drift <= 1e-4, "{rep:?}");
}

#[test]
fn integrability_excludes_escaping_samples() {
    let eig = example1_eigenfunctions(Domain::symmetric(&[0.6, 0.6]).unwrap());
    let s = sample_domain(&Domain::symmetric(&[0.5; 4]).unwrap(), 20, 2).unwrap();
    let rep = verify_nominal_integrability(&eig, example1(), &s, 1e-2, 2.0).unwrap();
    assert!(rep.excluded > 0);
    assert_eq!(rep.used + rep.excluded, 20);
}

#[test]
fn generating_function_residual() {
    let eig = example1_eigenfunctions(wide());
    let s = sample_domain(&Domain::symmetric(&[1.0, 1.0]).unwrap(), 50, 3).unwrap();
    let t = [0.0, 0.3, 1.0];
    assert_eq!(verify_generating_function(&eig, &Example1::new(), &DVector::zeros(2), &s, &t), 0.0);
    let mut rng = common::rng(6);
    let p = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
    let r = verify_generating_function(&eig, &Example1::new(), &p, &s, &t);
    assert!(r <= 1e-10, "{r}");
}

#[test]
fn generating_function_with_galerkin_eigenfunctions() {
    let d = Domain::symmetric(&[1.0, 1.0]).unwrap();
    let s = sample_domain(&d, 5000, 8).unwrap();
    let eig = approximate_eigenfunction_set(&Drift(example1()), &linearize(&Example1::new()).unwrap().A, &BasisSpec::monomials(2, 5), &s)
        .unwrap();
    let train = eig.galerkin_parts().unwrap().iter().map(|p| p.diagnostics.train_residual_rms).fold(0.0, f64::max);
    let pts = sample_domain(&d, 20, 9).unwrap();
    let p = DVector::from_vec(vec![0.6, -0.8]);
    let r = verify_generating_function(&eig, &Example1::new(), &p, &pts, &[0.0]);
    assert!(r <= 10.0 * train, "{r} vs train {train}");
}

#[test]
fn export_roundtrip() {
    let d = Domain::symmetric(&[1.0, 1.0]).unwrap();
    let s = sample_domain(&d, 2000, 8).unwrap();
    let eig = approximate_eigenfunction_set(&Drift(example1()), &linearize(&Example1::new()).unwrap().A, &BasisSpec::monomials(2, 4), &s)
        .unwrap();
    let sol = procedure1_solve(example1(), eig).unwrap();
    let json = serde_json::to_string(&sol.export().unwrap()).unwrap();
    let back: Solution1Export = serde_json::from_str(&json).unwrap();
    let restored = back.restore(example1()).unwrap();
    let x = DVector::from_vec(vec![0.3, 0.7]);
    assert_eq!(sol.value(&x), restored.value(&x));
    assert_eq!(sol.control(&x), restored.control(&x));
    assert!(procedure1_solve(example1(), example1_eigenfunctions(wide())).unwrap().export().is_err());
}

#[test]
fn batch_evaluation_csv() {
    let sol = procedure1_solve(example1(), example1_eigenfunctions(wide())).unwrap();
    let states = vec![DVector::from_vec(vec![0.1, 0.2]), DVector::from_vec(vec![-0.5, 0.0])];
    let mut buf = Vec::new();
    write_evaluation_csv(&sol, &states, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "x1,x2,V,u1,hj_residual");
    assert_eq!(lines.len(), 3);
    let v: f64 = lines[1].split(',').nth(2).unwrap().parse().unwrap();
    assert_eq!(v, sol.value(&states[0]));
}

#[test]
fn blocks_of_reads_pairs() {
    let l = DMatrix::from_row_slice(3, 3, &[-1.0, 0.0, 0.0, 0.0, 2.0, -3.0, 0.0, 3.0, 2.0]);
    let b = blocks_of(&l);
    assert_eq!(b.len(), 2);
    assert_eq!((b[1].start, b[1].size, b[1].re, b[1].im), (1, 2, 2.0, 3.0));
}
