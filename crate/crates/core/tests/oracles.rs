//! Library results against independently computed reference values.

mod common;

use common::*;
use gmlab_core::koopmann::{make_perturbed_ols, solve_h_space, svec_len};
use gmlab_core::lab::{cov_general, cov_independent, example_ex1, example_ex2};
use gmlab_core::moments::{
    independent_quadratic_variance, moments_of, quadratic_form_moments, FiniteSupportDistribution,
    MomentModel, SkewedTwoPoint, ThirdMomentTensor,
};
use gmlab_core::refuter::BlackBox;
use gmlab_core::refuter::{
    check_fstar_unbiasedness, hansen_tilde, step1_probes, step1_weights_exact,
};
use gmlab_core::regress::{loewner_compare, CovarianceSpec, DesignMatrix, LinearEstimator};
use gmlab_core::sim::stream_rng;
use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use num_rational::Ratio;
use rand::Rng;

#[test]
fn ols_matches_normal_equations() {
    for t in 0..50 {
        let mut rng = stream_rng(11, t);
        let (n, k) = (rng.random_range(3..9), rng.random_range(1..3));
        let d = random_design(&mut rng, n, k);
        let x = d.matrix();
        let y = normal_vector(&mut rng, n);
        let xtx_inv = (x.transpose() * x).try_inverse().unwrap();
        let oracle = &xtx_inv * x.transpose() * &y;
        assert!((d.ols(&y).unwrap() - oracle).amax() < 1e-9);
    }
}

#[test]
fn gls_matches_explicit_inverse() {
    for t in 0..50 {
        let mut rng = stream_rng(12, t);
        let (n, k) = (rng.random_range(3..8), rng.random_range(1..3));
        let d = random_design(&mut rng, n, k);
        let sigma = random_spd(&mut rng, n);
        let cov = CovarianceSpec::new(2.0, sigma.clone()).unwrap();
        let x = d.matrix();
        let si = sigma.try_inverse().unwrap();
        let oracle = (x.transpose() * &si * x).try_inverse().unwrap() * x.transpose() * &si;
        let got = d.gls_map(&cov).unwrap();
        assert!((got - oracle).amax() < 1e-8);
    }
}

#[test]
fn gls_variance_is_inverse_information() {
    let d = DesignMatrix::one_way(2, 3).unwrap();
    let sigma = DMatrix::from_diagonal(&dvector![1.0, 2.0, 3.0, 1.0, 1.0, 4.0]);
    let cov = CovarianceSpec::new(1.5, sigma.clone()).unwrap();
    let est = LinearEstimator::gls(&d, &cov).unwrap();
    let var = gmlab_core::regress::linear_estimator_variance(&est, &cov).unwrap();
    // diagonal Σ, disjoint groups: 1.5 / Σ_group 1/σ_jj
    let g1 = 1.5 / (1.0 + 0.5 + 1.0 / 3.0);
    let g2 = 1.5 / (1.0 + 1.0 + 0.25);
    assert!((var[(0, 0)] - g1).abs() < 1e-12);
    assert!((var[(1, 1)] - g2).abs() < 1e-12);
    assert!(var[(0, 1)].abs() < 1e-12);
}

#[test]
fn loewner_on_known_pairs() {
    let v = loewner_compare(&dmatrix![2.0, 0.0; 0.0, 1.0], &DMatrix::identity(2, 2)).unwrap();
    assert!(v.dominated);
    assert!((v.min_eigenvalue - 0.0).abs() < 1e-15);
    let v = loewner_compare(&dmatrix![1.0, 0.0; 0.0, 2.0], &dmatrix![2.0, 0.0; 0.0, 1.0]).unwrap();
    assert!(!v.dominated);
    assert!((v.min_eigenvalue + 1.0).abs() < 1e-12);
    let w = v.witness_direction;
    assert!((w[0] - 1.0).abs() < 1e-12 && w[1].abs() < 1e-12);
}

#[test]
fn skewed_two_point_moments_by_summation() {
    for &(var, p) in &[(1.0, 0.2), (2.5, 0.7), (0.3, 0.5), (4.0, 0.05)] {
        let s = SkewedTwoPoint::new(var, p).unwrap();
        let m = |r: i32| p * s.upper().powi(r) + (1.0 - p) * s.lower().powi(r);
        assert!(m(1).abs() < 1e-14);
        assert!((m(2) - var).abs() < 1e-12);
        assert!((m(3) - s.third_moment()).abs() < 1e-12);
        assert!((m(4) - s.fourth_moment()).abs() < 1e-10);
    }
    let s = SkewedTwoPoint::new(1.0, 0.2).unwrap();
    assert!((s.upper() - 2.0).abs() < 1e-15);
    assert!((s.lower() + 0.5).abs() < 1e-15);
    assert!((s.third_moment() - 1.5).abs() < 1e-12);
    assert!((s.fourth_moment() - 3.25).abs() < 1e-12);
    let inv = SkewedTwoPoint::with_third_moment(1.0, 1.5).unwrap();
    assert!((inv.p() - 0.2).abs() < 1e-12);
}

/// The independent-coordinates variance formula is checked against brute
/// enumeration before any other result relies on it.
#[test]
fn independent_quadratic_variance_formula_matches_enumeration() {
    for t in 0..150 {
        let mut rng = stream_rng(13, t);
        let n = rng.random_range(1..5);
        let marginals: Vec<_> = (0..n)
            .map(|_| {
                let atoms = rng.random_range(2..4);
                random_marginal(&mut rng, atoms)
            })
            .collect();
        let b = normal_matrix(&mut rng, n, n);
        let h = (&b + b.transpose()) * 0.5;
        let q = |e: &DVector<f64>| (e.transpose() * &h * e)[(0, 0)];
        let mean = product_expectation(&marginals, q);
        let oracle = product_expectation(&marginals, |e| (q(e) - mean).powi(2));
        let mu2 = DVector::from_iterator(n, marginals.iter().map(|m| m.moment(2)));
        let mu4 = DVector::from_iterator(n, marginals.iter().map(|m| m.moment(4)));
        let formula = independent_quadratic_variance(&h, &mu2, &mu4);
        assert!(
            (formula - oracle).abs() <= 1e-10 * oracle.abs().max(1.0),
            "instance {t}: formula {formula}, enumeration {oracle}"
        );

        let model = MomentModel::independent(
            mu2,
            DVector::from_iterator(n, marginals.iter().map(|m| m.moment(3))),
            Some(mu4),
        )
        .unwrap();
        let qm = quadratic_form_moments(&h, &model).unwrap();
        assert!((qm.mean - mean).abs() <= 1e-10 * mean.abs().max(1.0));
        assert!((qm.variance.unwrap() - oracle).abs() <= 1e-10 * oracle.abs().max(1.0));
    }
}

#[test]
fn cov_general_matches_brute_enumeration() {
    for t in 0..50 {
        let mut rng = stream_rng(14, t);
        let (n, k) = (rng.random_range(3..6), rng.random_range(1..3));
        let d = random_design(&mut rng, n, k);
        let basis = solve_h_space(&d).unwrap();
        if basis.dim == 0 {
            continue;
        }
        let h: Vec<_> = (0..k).map(|_| basis.random_element(&mut rng)).collect();
        let c = normal_vector(&mut rng, k);
        let law = random_joint_law(&mut rng, n, 2 * n + 3);

        let w = d.ols_weights(&c).unwrap();
        let g = h
            .iter()
            .zip(c.iter())
            .fold(DMatrix::zeros(n, n), |acc, (hi, ci)| acc + hi * *ci);
        let oracle = joint_expectation(&law, |e| w.dot(e) * (e.transpose() * &g * e)[(0, 0)]);
        let tensor = moments_of(&law).third_tensor().unwrap();
        let got = cov_general(&c, &h, &d, &tensor).unwrap();
        assert!((got - oracle).abs() < 1e-10 * oracle.abs().max(1.0));
    }
}

#[test]
fn cov_independent_matches_tensor_form() {
    let mut rng = stream_rng(15, 0);
    let d = random_design(&mut rng, 5, 2);
    let basis = solve_h_space(&d).unwrap();
    let h = vec![
        basis.random_element(&mut rng),
        basis.random_element(&mut rng),
    ];
    let c = dvector![0.3, -1.2];
    let mu3 = normal_vector(&mut rng, 5);
    let a = cov_independent(&c, &h, &d, &mu3).unwrap();
    let b = cov_general(&c, &h, &d, &ThirdMomentTensor::from_independent(&mu3)).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn ex1_closed_forms() {
    for n in [2, 3, 5, 8] {
        let ex = example_ex1(n, 1.5).unwrap();
        let r = &ex.report;
        assert!((r.cov_term - 1.5 / n as f64).abs() < 1e-12);
        // Var(e_1² - e_2²) = (μ4 - 1) + (1 - 1) for the skewed/symmetric pair
        assert!((r.quad_var - 2.25).abs() < 1e-12);
        assert!((r.var_ols - 1.0 / n as f64).abs() < 1e-12);
        let expected = (1.5 / n as f64).powi(2) / 2.25;
        assert!((r.improvement - expected).abs() < 1e-12);
    }
}

#[test]
fn ex2_closed_forms() {
    let ex = example_ex2().unwrap();
    let r = &ex.report;
    assert!((r.cov_term - 1.5).abs() < 1e-12);
    // 4·(μ4 - 1) from the diagonal plus 2·4·1 from the off-diagonal entries
    assert!((r.quad_var - 17.0).abs() < 1e-12);
    assert!((r.var_ols - 0.5).abs() < 1e-12);
    assert!((r.improvement - 2.25 / 17.0).abs() < 1e-12);
    assert!((r.alpha_star + 1.5 / 17.0).abs() < 1e-12);
}

#[test]
fn koopmann_dimensions() {
    for n in 2..7 {
        let basis = solve_h_space(&DesignMatrix::location(n).unwrap()).unwrap();
        assert_eq!(basis.dim, svec_len(n) - 2, "location n = {n}");
    }
    let basis = solve_h_space(&DesignMatrix::one_way(2, 2).unwrap()).unwrap();
    assert_eq!(basis.dim, 6);
    let mut rng = stream_rng(16, 0);
    let d = random_design(&mut rng, 6, 3);
    let basis = solve_h_space(&d).unwrap();
    assert_eq!(basis.dim, 21 - 1 - 6);
}

#[test]
fn perturbation_unbiased_under_identity_covariance_by_enumeration() {
    let d = DesignMatrix::one_way(2, 2).unwrap();
    let h = gmlab_core::lab::ex2_h();
    let est = make_perturbed_ols(&d, vec![h.clone(), h], 0.7).unwrap();
    // i.i.d. skewed errors: E y'Hy = tr(H) = 0 at every β
    let law =
        FiniteSupportDistribution::product_iid(&SkewedTwoPoint::new(1.0, 0.2).unwrap(), 4).unwrap();
    let beta = dvector![1.5, -2.0];
    let shifted = law.shifted(&(d.matrix() * &beta)).unwrap();
    let mean = joint_expectation(&shifted, |y| est.estimate(y)[0]);
    assert!((mean - 1.5).abs() < 1e-12);
}

#[test]
fn step1_mixture_identity_in_rationals() {
    for n in 1..12_usize {
        let (w1, w2) = step1_weights_exact(n);
        let lambda = Ratio::new(n as i64, n as i64 + 1);
        let rest = Ratio::new(1, 2 * (n as i64 + 1));
        // the 2n shared atoms of V2 carry λ times their V1 weight
        for (a, b) in w1.iter().zip(&w2) {
            assert_eq!(*b, lambda * *a);
        }
        assert_eq!(w2[2 * n], rest);
        assert_eq!(w2[2 * n + 1], rest);
        let one = Ratio::from_integer(1);
        assert_eq!(w1.iter().copied().sum::<Ratio<i64>>(), one);
        assert_eq!(w2.iter().copied().sum::<Ratio<i64>>(), one);
    }
    let z = dvector![1.0, -2.0, 3.0];
    let fam = step1_probes(&z).unwrap();
    assert_eq!(fam.probes[1].point(6), z);
    assert_eq!(fam.probes[1].point(7), -z);
}

#[test]
fn hansen_tilde_coupling_bias() {
    // bias along a under the (I, -I, u, -u) law, u = e_i + e_j:
    // E y_i r_j = (1 - leverage of x_j in the leave-one-out design) / (n + 1)
    let mut rng = stream_rng(17, 0);
    let d = random_design(&mut rng, 5, 2);
    let (i, j) = (1, 3);
    let est = hansen_tilde(&d, i, j, dvector![1.0, 0.0]).unwrap();
    let loo = d.without_row(i);
    let xj = d.matrix().row(j).transpose();
    let lev = (xj.transpose() * (loo.transpose() * &loo).try_inverse().unwrap() * &xj)[(0, 0)];
    let mut u = DVector::zeros(5);
    u[i] = 1.0;
    u[j] = 1.0;
    let probe = step1_probes(&u).unwrap().probes[1].clone();
    let mean = joint_expectation(&probe, |y| est.eval(y)[0]);
    assert!((mean - (1.0 - lev) / 6.0).abs() < 1e-12);

    let check = check_fstar_unbiasedness(&est, 10, 3).unwrap();
    assert!(check.independent.is_pass());
    let r = check.correlated.refutation().unwrap();
    assert!((r.expectation[0] - 1.0 - (1.0 - lev) / 6.0).abs() < 1e-12);
}
