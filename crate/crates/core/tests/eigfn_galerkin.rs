mod common;

use std::sync::Arc;

use koopman_hj::basis::{monomial_basis, Basis};
use koopman_hj::galerkin::*;
use koopman_hj::simulate::integrate_rk4;
use koopman_hj::spectral::real_spectral_decomposition;
use koopman_hj::system::{Drift, Example1, FnField, VectorField};
use koopman_hj::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn cubic() -> FnField<impl Fn(&DVector<f64>) -> DVector<f64> + Sync> {
    FnField::new(1, |x: &DVector<f64>| DVector::from_element(1, -x[0] + x[0].powi(3)))
}

/// Closed-form eigenfunction of `xdot = -x + x^3` for eigenvalue -1:
/// `phi' f = (1-x^2)^{-3/2} (-x)(1-x^2) = -phi`.
fn cubic_phi(x: f64) -> f64 {
    x / (1.0 - x * x).sqrt()
}

fn one() -> DMatrix<f64> {
    DMatrix::from_element(1, 1, 1.0)
}

fn minus_one() -> DMatrix<f64> {
    DMatrix::from_element(1, 1, -1.0)
}

fn example1_field() -> Drift {
    Drift(Arc::new(Example1::new()))
}

fn example1_a() -> DMatrix<f64> {
    koopman_hj::system::linearize(&Example1::new()).unwrap().A
}

#[test]
fn sampling_is_deterministic() {
    let d = Domain::new(vec![0.0], vec![1.0]).unwrap();
    let a = sample_domain(&d, 3, 7).unwrap();
    let b = sample_domain(&d, 3, 7).unwrap();
    assert_eq!(a.points, b.points);
    assert_eq!(a.seed, Some(7));
    assert_ne!(a.points, sample_domain(&d, 3, 8).unwrap().points);
}

#[test]
fn sample_means_near_box_centers() {
    let d = Domain::symmetric(&[3.0, 5.0, 5.0]).unwrap();
    let s = sample_domain(&d, 10_000, 11).unwrap();
    for (j, r) in [3.0f64, 5.0, 5.0].iter().enumerate() {
        let mean = s.points.column(j).mean();
        let sigma = 2.0 * r / 12f64.sqrt() / 100.0;
        assert!(mean.abs() <= 3.0 * sigma, "coordinate {j}: mean {mean}");
        assert!(s.points.column(j).iter().all(|v| v.abs() <= *r));
    }
}

#[test]
fn empirical_integral_of_square() {
    let d = Domain::new(vec![0.0], vec![1.0]).unwrap();
    let s = sample_domain(&d, 1_000_000, 3).unwrap();
    let mean = s.points.column(0).iter().map(|z| z * z).sum::<f64>() / 1e6;
    assert!((mean - 1.0 / 3.0).abs() < 2e-3, "{mean}");
}

#[test]
fn domain_rejects_degenerate_box() {
    assert!(Domain::new(vec![0.0], vec![0.0]).is_err());
    assert!(Domain::new(vec![0.0, 1.0], vec![1.0]).is_err());
}

#[test]
fn linear_field_gives_zero_theta() {
    let a = DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 0.0, -1.7]);
    let am = a.clone();
    let field = FnField::new(2, move |x: &DVector<f64>| &am * x);
    let d = Domain::symmetric(&[1.0, 1.0]).unwrap();
    let s = sample_domain(&d, 500, 1).unwrap();
    let set = approximate_eigenfunction_set(&field, &a, &BasisSpec::monomials(2, 4), &s).unwrap();
    for p in set.galerkin_parts().unwrap() {
        assert!(p.theta.amax() < 1e-12);
    }
    let x = DVector::from_vec(vec![0.3, -0.7]);
    assert!((set.phi(&x) - &set.Vt * &x).amax() < 1e-12);
}

#[test]
fn cubic_closed_form_recovered() {
    let field = cubic();
    let d = Domain::symmetric(&[0.5]).unwrap();
    let s = sample_domain(&d, 5000, 2).unwrap();
    let basis = Arc::new(monomial_basis(1, 2, 9).unwrap());
    let b = koopman_hj::spectral::EigenBlock { start: 0, size: 1, re: -1.0, im: 0.0 };
    let holdout = sample_domain(&d, 1000, 99).unwrap();
    let ef = approximate_block(&field, &minus_one(), basis, b, one(), &s, &holdout).unwrap();
    let sup = (0..=400)
        .map(|i| -0.4 + 0.8 * i as f64 / 400.0)
        .map(|x| (ef.eval(&DVector::from_element(1, x))[0] - cubic_phi(x)).abs())
        .fold(0.0, f64::max);
    assert!(sup <= 1e-3, "sup error {sup}");
    assert!(ef.diagnostics.holdout_ok);
}

#[test]
fn underdetermined_and_singular_reported() {
    let field = cubic();
    let d = Domain::symmetric(&[0.5]).unwrap();
    let basis = monomial_basis(1, 2, 9).unwrap();
    let s = sample_domain(&d, 4, 2).unwrap();
    assert_eq!(
        assemble_galerkin(&field, &minus_one(), &basis, &minus_one(), &one(), &s).unwrap_err(),
        Error::Underdetermined { samples: 4, functions: 8 }
    );
    // all samples at one point: rank-one Gram
    let s = SampleSet::from_points(DMatrix::from_element(20, 1, 0.25), d);
    assert!(matches!(assemble_galerkin(&field, &minus_one(), &basis, &minus_one(), &one(), &s), Err(Error::SingularGram(_))));
}

#[test]
fn w_must_be_left_eigenvector() {
    let field = cubic();
    let d = Domain::symmetric(&[0.5]).unwrap();
    let s = sample_domain(&d, 100, 2).unwrap();
    let basis = monomial_basis(1, 2, 3).unwrap();
    assert!(matches!(assemble_galerkin(&field, &minus_one(), &basis, &one(), &one(), &s), Err(Error::InvalidArgument(_))));
}

fn scalar_problem(j: f64, b: f64) -> GalerkinProblem {
    GalerkinProblem {
        J: DMatrix::from_element(1, 1, j),
        b: DVector::from_element(1, b),
        cond_J: 1.0,
        block: minus_one(),
        w: one(),
        n_functions: 1,
    }
}

#[test]
fn solve_coefficients_examples() {
    let (theta, res) = solve_coefficients(&scalar_problem(2.0, 4.0)).unwrap();
    assert_eq!(theta[(0, 0)], -2.0);
    assert_eq!(res, 0.0);
    let (theta, _) = solve_coefficients(&scalar_problem(2.0, 0.0)).unwrap();
    assert_eq!(theta[(0, 0)], 0.0);
    let mut p = scalar_problem(2.0, 1.0);
    p.cond_J = 1e13;
    assert!(matches!(solve_coefficients(&p), Err(Error::SingularGram(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn solve_residual_small(seed in 0u64..10_000, m in 1usize..8) {
        let mut rng = common::rng(seed);
        let j = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0)) + DMatrix::identity(m, m) * 3.0;
        let b = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        let prob = GalerkinProblem {
            cond_J: koopman_hj::spectral::cond2(&j),
            J: j.clone(),
            b: b.clone(),
            block: minus_one(),
            w: DMatrix::zeros(1, m),
            n_functions: m,
        };
        let (theta, _) = solve_coefficients(&prob).unwrap();
        let t = DVector::from_column_slice(theta.transpose().as_slice());
        prop_assert!((&j * t + &b).norm() <= 1e-10 * b.norm().max(1e-300));
    }
}

#[test]
fn galerkin_orthogonality() {
    let field = example1_field();
    let a = example1_a();
    let rsd = real_spectral_decomposition(&a).unwrap();
    let d = Domain::symmetric(&[1.0, 1.0]).unwrap();
    let s = sample_domain(&d, 3000, 5).unwrap();
    let spec = BasisSpec::monomials(2, 5);
    for block in &rsd.blocks {
        let basis = spec.build(&rsd, block).unwrap();
        let w = rsd.Vt.rows(block.start, 1).into_owned();
        let prob = assemble_galerkin(&field, &a, &basis, &block.matrix(), &w, &s).unwrap();
        let (theta, _) = solve_coefficients(&prob).unwrap();
        let mut acc = DVector::zeros(basis.len());
        for k in 0..s.len() {
            let z = s.point(k);
            let f = field.eval(&z);
            let g = basis.eval(&z);
            let r = (&theta * (basis.jacobian(&z) * &f - &g * block.re))[0] + (&w * (&f - &a * &z))[0];
            acc += g * r;
        }
        acc /= s.len() as f64;
        assert!(acc.amax() <= 1e-8, "block {}: {}", block.start, acc.amax());
    }
}

#[test]
fn example1_heldout_residual() {
    let d = Domain::symmetric(&[1.0, 1.0]).unwrap();
    let s = sample_domain(&d, 5000, 17).unwrap();
    let set = approximate_eigenfunction_set(&example1_field(), &example1_a(), &BasisSpec::monomials(2, 7), &s).unwrap();
    let holdout = sample_domain(&d, 2000, 18).unwrap();
    let rms = set.residual_rms(&example1_field(), &holdout);
    assert!(rms <= 1e-3, "held-out residual {rms}");
    for p in set.galerkin_parts().unwrap() {
        assert!(p.diagnostics.holdout_residual_rms <= 1e-3);
    }
    // eigenvalues -1 and 2; phi_1 is exactly linear
    assert_eq!(set.blocks.iter().map(|b| b.re.round()).collect::<Vec<_>>(), vec![-1.0, 2.0]);
    assert!(set.galerkin_parts().unwrap()[0].theta.amax() < 1e-10);
}

#[test]
fn example1_matches_closed_form() {
    let d = Domain::symmetric(&[1.0, 1.0]).unwrap();
    let s = sample_domain(&d, 5000, 17).unwrap();
    let set = approximate_eigenfunction_set(&example1_field(), &example1_a(), &BasisSpec::monomials(2, 7), &s).unwrap();
    let mut rng = common::rng(4);
    for _ in 0..50 {
        let x = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let exact = Example1::eigenfunctions(&x);
        let phi = set.phi(&x);
        // computed rows are unit-normalized multiples of x1 - 2 x2 and x1 + sin x2
        let c1 = set.Vt[(0, 0)];
        let c2 = set.Vt[(1, 0)];
        assert!((phi[0] - c1 * exact[0]).abs() < 1e-6);
        assert!((phi[1] - c2 * exact[1]).abs() < 1e-4, "{} vs {}", phi[1], c2 * exact[1]);
    }
}

#[test]
fn semigroup_property() {
    let d = Domain::symmetric(&[1.0, 1.0]).unwrap();
    let s = sample_domain(&d, 5000, 21).unwrap();
    let field = example1_field();
    let set = approximate_eigenfunction_set(&field, &example1_a(), &BasisSpec::monomials(2, 7), &s).unwrap();
    let mut rng = common::rng(8);
    let mut checked = 0;
    for _ in 0..100 {
        let x = DVector::from_fn(2, |_, _| rng.random_range(-0.5..0.5));
        for t in [0.1, 0.5] {
            let traj = integrate_rk4(&field, &x, 1e-4, t);
            if !traj.states.row_iter().all(|r| d.contains(&r.transpose())) {
                continue;
            }
            let xt = traj.final_state();
            let (p0, pt) = (set.phi(&x), set.phi(&xt));
            for b in &set.blocks {
                let i = b.start;
                let pred = (b.re * t).exp() * p0[i];
                assert!((pt[i] - pred).abs() <= 1e-3 * (1.0 + p0[i].abs()), "t={t} block {i}");
            }
            checked += 1;
        }
    }
    assert!(checked > 50);
}

#[test]
fn complex_pair_block() {
    // xdot = A x + (0, x1^2) with eigenvalues -0.5 +- 2i
    let a = DMatrix::from_row_slice(2, 2, &[-0.5, 2.0, -2.0, -0.5]);
    let am = a.clone();
    let field = FnField::new(2, move |x: &DVector<f64>| &am * x + DVector::from_vec(vec![0.0, x[0] * x[0]]));
    let d = Domain::symmetric(&[0.5, 0.5]).unwrap();
    let s = sample_domain(&d, 4000, 3).unwrap();
    let set = approximate_eigenfunction_set(&field, &a, &BasisSpec::monomials(2, 6), &s).unwrap();
    assert_eq!(set.blocks.len(), 1);
    assert_eq!(set.blocks[0].size, 2);
    let holdout = sample_domain(&d, 1000, 4).unwrap();
    assert!(set.residual_rms(&field, &holdout) < 1e-3);
}

#[test]
fn grid_and_monte_carlo_agree() {
    let field = cubic();
    let d = Domain::symmetric(&[0.5]).unwrap();
    let basis = monomial_basis(1, 2, 5).unwrap();
    let solve = |s: &SampleSet| {
        let prob = assemble_galerkin(&field, &minus_one(), &basis, &minus_one(), &one(), s).unwrap();
        solve_coefficients(&prob).unwrap().0
    };
    let grid = solve(&SampleSet::grid(&d, 100_000));
    let mc = solve(&sample_domain(&d, 1_000_000, 12).unwrap());
    let rel = (&grid - &mc).norm() / grid.norm();
    assert!(rel < 1e-2, "relative difference {rel}");
}

#[test]
fn monotone_refinement() {
    let field = example1_field();
    let a = example1_a();
    let d = Domain::symmetric(&[1.0, 1.0]).unwrap();
    let heldout = |deg: u32, seed: u64| {
        let s = sample_domain(&d, 2000, seed).unwrap();
        let set = approximate_eigenfunction_set(&field, &a, &BasisSpec::monomials(2, deg), &s).unwrap();
        set.residual_rms(&field, &sample_domain(&d, 1000, seed + 1000).unwrap())
    };
    let mut worse = 0;
    for seed in 0..10 {
        let (coarse, fine) = (heldout(4, seed), heldout(5, seed));
        if fine > coarse * 1.5 {
            worse += 1;
        }
    }
    assert!(worse <= 2, "{worse} of 10 seeds got worse");
}

#[test]
fn bitwise_deterministic_across_thread_counts() {
    let d = Domain::symmetric(&[1.0, 1.0]).unwrap();
    let s = sample_domain(&d, 5000, 33).unwrap();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
            let set = approximate_eigenfunction_set(&example1_field(), &example1_a(), &BasisSpec::monomials(2, 5), &s).unwrap();
            set.galerkin_parts().unwrap().iter().map(|p| p.theta.clone()).collect::<Vec<_>>()
        })
    };
    let one_thread = run(1);
    assert_eq!(one_thread, run(4));
    assert_eq!(one_thread, run(1));
}

#[test]
fn convergence_linear_field_is_exact() {
    let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 1.0, 2.3]);
    let am = a.clone();
    let field = FnField::new(2, move |x: &DVector<f64>| &am * x);
    let d = Domain::symmetric(&[1.0, 1.0]).unwrap();
    let t =
        convergence_study(&field, &a, 1, &BasisSpec::monomials(2, 4), &d, &[100, 1000], 3, 1, Reference::Quadrature { per_dim: 50 }, 20)
            .unwrap();
    assert!(t.rows.iter().all(|r| r.error < 1e-12));
}

#[test]
fn cubic_error_scales_like_inverse_sqrt() {
    let field = cubic();
    let d = Domain::symmetric(&[0.5]).unwrap();
    let spec = BasisSpec::monomials(2, 5);
    let t =
        convergence_study(&field, &minus_one(), 0, &spec, &d, &[200, 800], 40, 5, Reference::Quadrature { per_dim: 200_000 }, 200).unwrap();
    let ratio = t.summary[1].mean / t.summary[0].mean;
    // quadrupling L halves the error
    assert!((0.35..0.7).contains(&ratio), "ratio {ratio}");
}

#[test]
fn convergence_csv_columns() {
    let field = cubic();
    let d = Domain::symmetric(&[0.5]).unwrap();
    let t = convergence_study(
        &field,
        &minus_one(),
        0,
        &BasisSpec::monomials(2, 3),
        &d,
        &[50],
        2,
        1,
        Reference::Quadrature { per_dim: 1000 },
        10,
    )
    .unwrap();
    let mut buf = Vec::new();
    t.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "L,trial,error");
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn blocks_csv_one_row_per_block() {
    let d = Domain::symmetric(&[1.0, 1.0]).unwrap();
    let s = sample_domain(&d, 500, 1).unwrap();
    let set = approximate_eigenfunction_set(&example1_field(), &example1_a(), &BasisSpec::monomials(2, 3), &s).unwrap();
    let mut buf = Vec::new();
    write_blocks_csv(set.galerkin_parts().unwrap(), &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
}

#[test]
fn pure_nonlinear_part_has_zero_gradient_at_origin() {
    let d = Domain::symmetric(&[1.0, 1.0]).unwrap();
    let s = sample_domain(&d, 1000, 1).unwrap();
    let set = approximate_eigenfunction_set(&example1_field(), &example1_a(), &BasisSpec::monomials(2, 5), &s).unwrap();
    let z = DVector::zeros(2);
    assert!((set.jac_phi(&z) - &set.Vt).amax() < 1e-14);
    assert!(set.phi(&z).amax() == 0.0);
}
