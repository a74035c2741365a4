use std::sync::Arc;

use approx::assert_abs_diff_eq;
use koopman_hj::simulate::integrate_rk4;
use koopman_hj::spectral::{eigenvalues, solve_riccati};
use koopman_hj::system::{
    fd_jacobian, hamiltonian_value, hj_residual, linearize, validate, ControlAffineSystem, Example1, HamiltonianSystem, Pendulum,
    PolynomialSystem, SystemRef, VectorField,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scalar_linear() -> PolynomialSystem {
    let one = DMatrix::from_element(1, 1, 1.0);
    PolynomialSystem::linear(&-one.clone(), &one, one.clone(), one.clone()).unwrap()
}

fn random_point(rng: &mut ChaCha8Rng, n: usize, r: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-r..r))
}

#[test]
fn example1_linearization_matches_finite_differences() {
    let sys = Example1::new();
    let lin = linearize(&sys).unwrap();
    let fd = fd_jacobian(|x| sys.f(x), &DVector::zeros(2));
    assert_abs_diff_eq!(lin.A, fd, epsilon = 1e-8);
    // d f / dx at 0 with alpha = 1/3
    assert_abs_diff_eq!(lin.A, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 0.0]), epsilon = 1e-12);
    assert_abs_diff_eq!(lin.B, DMatrix::from_column_slice(2, 1, &[1.0, 0.0]));
    assert_abs_diff_eq!(lin.R0, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
    assert_abs_diff_eq!(lin.Q0, DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 5.0]));
}

#[test]
fn example1_analytic_derivatives_match_finite_differences() {
    let sys = Example1::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let x = random_point(&mut rng, 2, 2.0);
        assert_abs_diff_eq!(sys.jacobian_f(&x), fd_jacobian(|y| sys.f(y), &x), epsilon = 1e-7);
        let fdq = koopman_hj::system::fd_gradient(|y| sys.q(y), &x);
        assert_abs_diff_eq!(sys.grad_q(&x), fdq, epsilon = 1e-7);
    }
}

#[test]
fn scalar_linear_linearization() {
    let lin = linearize(&scalar_linear()).unwrap();
    assert_eq!(lin.A[(0, 0)], -1.0);
    assert_eq!(lin.B[(0, 0)], 1.0);
    assert_eq!(lin.R0[(0, 0)], 1.0);
    assert_eq!(lin.Q0[(0, 0)], 1.0);
}

#[test]
fn singular_control_weight_rejected() {
    let one = DMatrix::from_element(1, 1, 1.0);
    let err = PolynomialSystem::linear(&one, &one, one.clone(), DMatrix::zeros(1, 1)).unwrap_err();
    assert_eq!(err.to_string(), "control weight not invertible");
}

#[test]
fn hamiltonian_value_examples() {
    let sys = scalar_linear();
    let z = DVector::zeros(1);
    assert_eq!(hamiltonian_value(&sys, &z, &z).unwrap(), 0.0);
    let one = DVector::from_element(1, 1.0);
    // f p - p^2/2 + x^2/2 = -1 - 1/2 + 1/2
    assert_abs_diff_eq!(hamiltonian_value(&sys, &one, &one).unwrap(), -1.0, epsilon = 1e-15);
    assert!(hamiltonian_value(&sys, &DVector::zeros(2), &one).is_err());
}

#[test]
fn hamiltonian_matrix_of_scalar_system() {
    let ham = HamiltonianSystem::new(Arc::new(scalar_linear())).unwrap();
    assert_eq!(ham.H0, DMatrix::from_row_slice(2, 2, &[-1.0, -1.0, -1.0, 1.0]));
    let ev = eigenvalues(&ham.H0).unwrap();
    assert_abs_diff_eq!(ev[0].re, -2f64.sqrt(), epsilon = 1e-12);
    assert_abs_diff_eq!(ev[1].re, 2f64.sqrt(), epsilon = 1e-12);
}

fn builtins() -> Vec<SystemRef> {
    vec![Arc::new(Example1::new()), Arc::new(Pendulum::with_gravity(9.81).unwrap()), Arc::new(scalar_linear())]
}

#[test]
fn equilibrium_and_linearization_consistency() {
    for sys in builtins() {
        validate(sys.as_ref()).unwrap();
        let n = sys.n();
        assert!(sys.f(&DVector::zeros(n)).norm() <= 1e-12);
        let ham = HamiltonianSystem::new(sys.clone()).unwrap();
        let z0 = DVector::zeros(2 * n);
        assert!(ham.eval(&z0).norm() <= 1e-12);
        let jac = fd_jacobian(|z| ham.eval(z), &z0);
        assert_abs_diff_eq!(jac, ham.H0.clone(), epsilon = 1e-6);
        let jac_n = fd_jacobian(|z| ham.nonlinear_part(z), &z0);
        assert!(jac_n.amax() <= 1e-6);
    }
}

#[test]
fn hamiltonian_is_conserved_along_the_flow() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for sys in builtins() {
        let ham = HamiltonianSystem::new(sys.clone()).unwrap();
        let n = sys.n();
        for _ in 0..3 {
            let z0 = random_point(&mut rng, 2 * n, 0.1);
            let h0 = ham.hamiltonian(&z0);
            let traj = integrate_rk4(&ham, &z0, 1e-3, 2.0);
            assert!(!traj.diverged);
            // The saddle flow grows like exp(5t) for the pendulum; only the part
            // inside the unit ball is compared against the absolute tolerance.
            for row in traj.states.row_iter().step_by(10).take_while(|r| r.norm() <= 1.0) {
                let h = ham.hamiltonian(&row.transpose());
                assert!((h - h0).abs() <= 1e-5 * (1.0 + h0.abs()), "n = {n}, drift {}", (h - h0).abs());
            }
        }
    }
}

#[test]
fn hamiltonian_conserved_to_1e6_at_fine_step() {
    let ham = HamiltonianSystem::new(Arc::new(Example1::new())).unwrap();
    let z0 = DVector::from_vec(vec![0.1, -0.05, 0.2, 0.1]);
    let h0 = ham.hamiltonian(&z0);
    let traj = integrate_rk4(&ham, &z0, 1e-4, 2.0);
    let worst = traj.states.row_iter().map(|r| (ham.hamiltonian(&r.transpose()) - h0).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-6, "{worst}");
}

#[test]
fn hj_residual_vanishes_for_riccati_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let n = 3;
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0));
        let c = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let q = &c * c.transpose() + DMatrix::identity(n, n) * 0.1;
        let sys = PolynomialSystem::linear(&a, &b, q.clone(), DMatrix::identity(1, 1)).unwrap();
        let lin = linearize(&sys).unwrap();
        let p = solve_riccati(&lin.A, &lin.R0, &lin.Q0).unwrap().P;
        for _ in 0..100 {
            let x = random_point(&mut rng, n, 1.0);
            let r = hj_residual(&sys, |y| &p * y, &x);
            assert!(r.abs() <= 1e-10 * (1.0 + x.norm_squared() * p.norm()), "{r}");
        }
    }
}

#[test]
fn hj_residual_with_zero_gradient_is_state_cost() {
    let sys = Example1::new();
    let x = DVector::from_vec(vec![0.3, -0.7]);
    assert_eq!(hj_residual(&sys, |_| DVector::zeros(2), &x), sys.q(&x));
}

#[test]
fn example1_closed_form_eigenfunctions() {
    let sys = Example1::new();
    let lambda = DVector::from_vec(vec![-1.0, 2.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..200 {
        let x = random_point(&mut rng, 2, 3.0);
        let lhs = Example1::eigenfunction_jacobian(&x) * sys.f(&x);
        let rhs = Example1::eigenfunctions(&x).component_mul(&lambda);
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
    }
    assert_eq!(sys.f(&DVector::zeros(2)), DVector::zeros(2));
    assert_eq!(sys.q(&DVector::from_vec(vec![1.0, 0.0])), 1.0);
}

#[test]
fn pendulum_model() {
    let sys = Pendulum::with_gravity(9.81).unwrap();
    let m = sys.mass_matrix(0.0);
    assert_abs_diff_eq!(m[(0, 0)], -0.06, epsilon = 1e-15);
    assert_abs_diff_eq!(m[(0, 1)], 0.7, epsilon = 1e-15);
    assert_abs_diff_eq!(m[(1, 0)], 0.024, epsilon = 1e-15);
    assert_abs_diff_eq!(m[(1, 1)], -0.06, epsilon = 1e-15);
    let lin = linearize(&sys).unwrap();
    let unstable = eigenvalues(&lin.A).unwrap().iter().filter(|z| z.re > 0.0).count();
    assert_eq!(unstable, 1);
    assert_abs_diff_eq!(lin.B[(1, 0)], 0.06 / 0.0132, epsilon = 1e-10);
    assert_abs_diff_eq!(lin.B[(2, 0)], 0.024 / 0.0132, epsilon = 1e-10);
    assert_eq!(sys.d()[(0, 0)], 2.0);
}

#[test]
fn pendulum_analytic_derivatives_match_finite_differences() {
    let sys = Pendulum::with_gravity(9.81).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..50 {
        let x = random_point(&mut rng, 3, 3.0);
        let p = random_point(&mut rng, 3, 3.0);
        assert_abs_diff_eq!(sys.jacobian_f(&x), fd_jacobian(|y| sys.f(y), &x), epsilon = 1e-5);
        let fd = koopman_hj::system::fd_gradient(|y| (sys.r(y) * &p).dot(&p), &x);
        assert_abs_diff_eq!(sys.grad_rform(&x, &p), fd, epsilon = 1e-5);
    }
}

#[test]
fn singular_pendulum_mass_matrix_reports_theta() {
    let params = koopman_hj::system::PendulumParams { inertia: 0.0, cart_mass: 0.0, ..Default::default() };
    let err = Pendulum::new(params).unwrap_err();
    assert!(matches!(err, koopman_hj::Error::MassMatrixSingular { .. }), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn polynomial_input_map_rform_gradient_matches_fd(
        c in prop::collection::vec(-1.0f64..1.0, 4),
        x in prop::collection::vec(-1.0f64..1.0, 2),
        p in prop::collection::vec(-1.0f64..1.0, 2),
    ) {
        use koopman_hj::system::{Polynomial, Term};
        let f = vec![Polynomial::linear(&[-1.0, 0.0]), Polynomial::linear(&[0.0, -1.0])];
        let g = vec![
            Polynomial::new(vec![Term { exponents: vec![0, 0], coef: 1.0 }, Term { exponents: vec![2, 0], coef: c[0] }]),
            Polynomial::new(vec![Term { exponents: vec![1, 1], coef: c[1] }]),
            Polynomial::new(vec![Term { exponents: vec![0, 1], coef: c[2] }]),
            Polynomial::new(vec![Term { exponents: vec![0, 0], coef: 1.0 }, Term { exponents: vec![0, 3], coef: c[3] }]),
        ];
        let sys = PolynomialSystem::new(f, g, DMatrix::identity(2, 2), DMatrix::identity(2, 2)).unwrap();
        let x = DVector::from_vec(x);
        let p = DVector::from_vec(p);
        let fd = koopman_hj::system::fd_gradient(|y| (sys.r(y) * &p).dot(&p), &x);
        prop_assert!((sys.grad_rform(&x, &p) - fd).amax() < 1e-6);
    }
}
