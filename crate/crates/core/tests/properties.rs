//! Invariants checked on randomly generated instances.

mod common;

use common::*;
use gmlab_core::koopmann::{
    constraint_residuals, eigen_diagnostic, enumerated_bias, make_perturbed_ols,
    random_identity_covariance_law, sigma_sweep_bias, solve_h_space, svec_len, QuadraticEstimator,
};
use gmlab_core::lab::{cov_general, cov_independent, optimize_alpha};
use gmlab_core::moments::{
    moments_of, quadratic_form_moments, FiniteSupportDistribution, SkewedTwoPoint, ThirdMoments,
};
use gmlab_core::refuter::{refute_f2_unbiasedness, step1_probes, step2_probe};
use gmlab_core::regress::{
    linear_estimator_variance, loewner_compare, CovarianceSpec, DesignMatrix, LinearEstimator,
    LOEWNER_TOL,
};
use gmlab_core::sim::{simulate_variances, stream_rng};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn dims<R: Rng>(rng: &mut R, max_n: usize) -> (usize, usize) {
    let n = rng.random_range(3..=max_n);
    (n, rng.random_range(1..n.min(4)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gls_identity_is_ols(seed in any::<u64>()) {
        let mut rng = stream_rng(seed, 0);
        let (n, k) = dims(&mut rng, 9);
        let d = random_design(&mut rng, n, k);
        let y = normal_vector(&mut rng, n);
        let cov = CovarianceSpec::identity(n, 2.0).unwrap();
        prop_assert!((d.gls(&cov, &y).unwrap() - d.ols(&y).unwrap()).amax() < 1e-12);
    }

    #[test]
    fn ols_is_linear(seed in any::<u64>(), s in -5.0..5.0_f64) {
        let mut rng = stream_rng(seed, 0);
        let (n, k) = dims(&mut rng, 9);
        let d = random_design(&mut rng, n, k);
        let (y1, y2) = (normal_vector(&mut rng, n), normal_vector(&mut rng, n));
        let lhs = d.ols(&(&y1 + &y2 * s)).unwrap();
        let rhs = d.ols(&y1).unwrap() + d.ols(&y2).unwrap() * s;
        prop_assert!((lhs - rhs).amax() < 1e-12 * (1.0 + s.abs()) * 10.0);
    }

    #[test]
    fn loewner_reflexive_and_antisymmetric(seed in any::<u64>()) {
        let mut rng = stream_rng(seed, 0);
        let n = rng.random_range(1..6);
        let a = random_spd(&mut rng, n);
        let v = loewner_compare(&a, &a).unwrap();
        prop_assert!(v.dominated);
        let b = random_spd(&mut rng, n);
        let ab = loewner_compare(&a, &b).unwrap();
        let ba = loewner_compare(&b, &a).unwrap();
        if ab.dominated && ba.dominated {
            prop_assert!((&a - &b).amax() <= 2.0 * LOEWNER_TOL * ab.scale);
        }
    }

    #[test]
    fn linear_unbiased_variance_decomposes(seed in any::<u64>()) {
        let mut rng = stream_rng(seed, 0);
        let (n, k) = dims(&mut rng, 7);
        let d = random_design(&mut rng, n, k);
        let sigma2 = rng.random_range(0.5..3.0);
        let cov = CovarianceSpec::new(sigma2, random_spd(&mut rng, n)).unwrap();
        let gls = LinearEstimator::gls(&d, &cov).unwrap();
        let m = d.matrix();
        let proj = DMatrix::identity(n, n) - m * d.ols_map();
        let c = normal_matrix(&mut rng, k, n) * proj;
        let alt = LinearEstimator::new(gls.matrix() + &c);
        prop_assert!(alt.is_unbiased(&d));
        let v_gls = linear_estimator_variance(&gls, &cov).unwrap();
        let v_alt = linear_estimator_variance(&alt, &cov).unwrap();
        let expected = &v_gls + &c * cov.shape() * c.transpose() * sigma2;
        prop_assert!((&v_alt - expected).amax() < 1e-9 * v_alt.amax().max(1.0));
        prop_assert!(loewner_compare(&v_alt, &v_gls).unwrap().dominated);
    }

    #[test]
    fn finite_support_moments_match_expectation_maps(seed in any::<u64>()) {
        let mut rng = stream_rng(seed, 0);
        let n = rng.random_range(1..6);
        let m = rng.random_range(1..12);
        let dist = random_joint_law(&mut rng, n, m)
            .shifted(&normal_vector(&mut rng, n))
            .unwrap();
        let mean = dist.mean();
        let by_map = dist.expectation(|v| v.clone());
        prop_assert!((&mean - by_map).amax() < 1e-12);
        let outer = dist.expectation(|v| {
            let c = v - &mean;
            DVector::from_column_slice((&c * c.transpose()).as_slice())
        });
        let cov = dist.covariance();
        prop_assert!((DVector::from_column_slice(cov.as_slice()) - outer).amax() < 1e-12);
    }

    #[test]
    fn quadratic_form_mean_is_trace(seed in any::<u64>()) {
        let mut rng = stream_rng(seed, 0);
        let n = rng.random_range(1..5);
        let dist = random_joint_law(&mut rng, n, n + 3);
        let model = moments_of(&dist);
        let b = normal_matrix(&mut rng, n, n);
        let h = (&b + b.transpose()) * 0.5;
        let qm = quadratic_form_moments(&h, &model).unwrap();
        let trace = (&h * &model.second).trace();
        prop_assert!((qm.mean - trace).abs() < 1e-12 * trace.abs().max(1.0));
        let q = |e: &DVector<f64>| (e.transpose() * &h * e)[(0, 0)];
        let enumerated = joint_expectation(&dist, q);
        prop_assert!((qm.mean - enumerated).abs() < 1e-10 * trace.abs().max(1.0));
        let var = joint_expectation(&dist, |e| (q(e) - enumerated).powi(2));
        prop_assert!((qm.variance.unwrap() - var).abs() < 1e-10 * var.max(1.0));
    }

    #[test]
    fn iid_products_have_independent_moments(p in 0.05..0.95_f64, n in 1usize..6) {
        let base = SkewedTwoPoint::new(1.3, p).unwrap();
        let model = moments_of(&FiniteSupportDistribution::product_iid(&base, n).unwrap());
        prop_assert!(model.independent);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    prop_assert_eq!(model.second[(i, j)], 0.0);
                }
            }
        }
        let ThirdMoments::Marginal { mu3 } = &model.third else {
            return Err(TestCaseError::fail("independent model without marginal third moments"));
        };
        prop_assert_eq!(mu3.len(), n);
        let t = model.third_tensor().unwrap();
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    if !(a == b && b == c) {
                        prop_assert_eq!(t.get(a, b, c), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn symmetric_two_point_has_no_skew(var in 0.01..10.0_f64) {
        prop_assert_eq!(SkewedTwoPoint::new(var, 0.5).unwrap().third_moment(), 0.0);
    }

    #[test]
    fn koopmann_dimension_count(seed in any::<u64>()) {
        let mut rng = stream_rng(seed, 0);
        let (n, k) = dims(&mut rng, 7);
        let d = random_design(&mut rng, n, k);
        let basis = solve_h_space(&d).unwrap();
        prop_assert_eq!(basis.dim + basis.constraint_rank, svec_len(n));
        for h in &basis.basis {
            let (tr, xhx) = constraint_residuals(&d, h);
            prop_assert!(tr < 1e-10 && xhx < 1e-10);
        }
    }

    #[test]
    fn basis_perturbations_unbiased_under_identity_covariance(seed in any::<u64>()) {
        let mut rng = stream_rng(seed, 0);
        let (n, k) = dims(&mut rng, 5);
        let d = random_design(&mut rng, n, k);
        let basis = solve_h_space(&d).unwrap();
        let scale = rng.random_range(0.3..2.0_f64);
        let law = random_identity_covariance_law(n, true, &mut rng).unwrap();
        let support = law.support() * scale;
        let law = FiniteSupportDistribution::new(support, law.weights().clone()).unwrap();
        let beta = normal_vector(&mut rng, k);
        for h in &basis.basis {
            let hs = vec![h.clone(); k];
            let est = make_perturbed_ols(&d, hs, 1.0).unwrap();
            let bias = enumerated_bias(&est, &d, &law, &beta).unwrap();
            prop_assert!(bias < 1e-10 * beta.amax().max(1.0), "bias {}", bias);
        }
    }

    #[test]
    fn sigma_sweep_detects_nonzero_perturbations(seed in any::<u64>()) {
        let mut rng = stream_rng(seed, 0);
        let (n, k) = dims(&mut rng, 6);
        let d = random_design(&mut rng, n, k);
        let basis = solve_h_space(&d).unwrap();
        prop_assume!(basis.dim > 0);
        let mut h = vec![DMatrix::zeros(n, n); k];
        h[rng.random_range(0..k)] = basis.random_element(&mut rng);
        let est = make_perturbed_ols(&d, h, 1.0).unwrap();
        prop_assert!(!sigma_sweep_bias(&est).is_empty());
    }

    #[test]
    fn eigen_diagnostic_zero_iff_linear(seed in any::<u64>(), zero in any::<bool>()) {
        let mut rng = stream_rng(seed, 0);
        let (n, k) = dims(&mut rng, 6);
        let d = random_design(&mut rng, n, k);
        let basis = solve_h_space(&d).unwrap();
        let h: Vec<_> = (0..k)
            .map(|_| if zero { DMatrix::zeros(n, n) } else { basis.random_element(&mut rng) })
            .collect();
        let est = make_perturbed_ols(&d, h, 1.0).unwrap();
        let agrees = (0..100).all(|_| {
            let y = normal_vector(&mut rng, n);
            (est.estimate(&y) - est.a() * &y).amax() < 1e-10
        });
        prop_assert_eq!(eigen_diagnostic(&est).is_linear(), agrees);
    }

    #[test]
    fn cov_is_superposable(seed in any::<u64>(), s in -3.0..3.0_f64) {
        let mut rng = stream_rng(seed, 0);
        let (n, k) = dims(&mut rng, 6);
        let d = random_design(&mut rng, n, k);
        let basis = solve_h_space(&d).unwrap();
        let c = normal_vector(&mut rng, k);
        let h1: Vec<_> = (0..k).map(|_| basis.random_element(&mut rng)).collect();
        let h2: Vec<_> = (0..k).map(|_| basis.random_element(&mut rng)).collect();
        let h12: Vec<_> = h1.iter().zip(&h2).map(|(a, b)| a + b * s).collect();
        let (m1, m2) = (normal_vector(&mut rng, n), normal_vector(&mut rng, n));
        let cov = |h: &[DMatrix<f64>], mu3: &DVector<f64>| cov_independent(&c, h, &d, mu3).unwrap();
        let tol = 1e-10 * (1.0 + s.abs()) * 10.0;
        prop_assert!((cov(&h12, &m1) - cov(&h1, &m1) - s * cov(&h2, &m1)).abs() < tol);
        prop_assert!((cov(&h1, &(&m1 + &m2 * s)) - cov(&h1, &m1) - s * cov(&h1, &m2)).abs() < tol);
    }

    #[test]
    fn variance_identity_holds(seed in any::<u64>()) {
        let mut rng = stream_rng(seed, 0);
        let (n, k) = dims(&mut rng, 5);
        let d = random_design(&mut rng, n, k);
        let basis = solve_h_space(&d).unwrap();
        let h: Vec<_> = (0..k).map(|_| basis.random_element(&mut rng)).collect();
        let c = normal_vector(&mut rng, k);
        let alpha = rng.random_range(-2.0..2.0);
        let law = random_joint_law(&mut rng, n, 2 * n + 2);
        let report = optimize_alpha(&c, &h, &d, &moments_of(&law)).unwrap();
        let est = QuadraticEstimator::new(d.ols_map(), h.clone(), alpha).unwrap();
        let f = |e: &DVector<f64>| c.dot(&est.estimate(e));
        let mean = joint_expectation(&law, f);
        let var = joint_expectation(&law, |e| (f(e) - mean).powi(2));
        prop_assert!(rel_gap(var, report.variance_at(alpha)) < 1e-9);

        let tensor = moments_of(&law).third_tensor().unwrap();
        let w = d.ols_weights(&c).unwrap();
        let g = h.iter().zip(c.iter()).fold(DMatrix::zeros(n, n), |acc, (a, b)| acc + a * *b);
        let enumerated = joint_expectation(&law, |e| w.dot(e) * (e.transpose() * &g * e)[(0, 0)]);
        let general = cov_general(&c, &h, &d, &tensor).unwrap();
        prop_assert!((general - enumerated).abs() < 1e-10 * enumerated.abs().max(1.0));
    }

    #[test]
    fn location_iid_null(n in 2usize..7, p in 0.05..0.95_f64, seed in any::<u64>()) {
        let mut rng = stream_rng(seed, 0);
        let d = DesignMatrix::location(n).unwrap();
        let basis = solve_h_space(&d).unwrap();
        let mu3 = DVector::from_element(n, SkewedTwoPoint::new(1.0, p).unwrap().third_moment());
        let c = DVector::from_element(1, rng.random_range(0.1..3.0));
        for h in &basis.basis {
            prop_assert!(cov_independent(&c, std::slice::from_ref(h), &d, &mu3).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn probe_families_are_valid(seed in any::<u64>()) {
        let mut rng = stream_rng(seed, 0);
        let (n, k) = dims(&mut rng, 6);
        let d = random_design(&mut rng, n, k);
        let grid = |rng: &mut rand_chacha::ChaCha8Rng| {
            DVector::from_fn(n, |_, _| f64::from(rng.random_range(-3..=3)))
        };
        let (y, z) = (grid(&mut rng), grid(&mut rng));
        let beta = normal_vector(&mut rng, k);
        let shift = d.matrix() * &beta;
        let mut probes = step1_probes(&z).unwrap().probes;
        probes.push(step2_probe(&y, &z).unwrap());
        for p in probes {
            let s = p.shifted(&shift).unwrap();
            prop_assert!((s.mean() - &shift).amax() < 1e-12 * shift.amax().max(1.0));
            let eig = s.covariance().symmetric_eigenvalues();
            prop_assert!(eig.min() > 0.0);
        }
    }

    #[test]
    fn refuter_never_rejects_linear_unbiased(seed in any::<u64>()) {
        let mut rng = stream_rng(seed, 0);
        let (n, k) = dims(&mut rng, 6);
        let d = random_design(&mut rng, n, k);
        let proj = DMatrix::identity(n, n) - d.matrix() * d.ols_map();
        let a = d.ols_map() + normal_matrix(&mut rng, k, n) * proj;
        let est = LinearEstimator::new(a);
        prop_assert!(refute_f2_unbiasedness(&est, &d, 10, seed).unwrap().is_pass());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn monte_carlo_independent_of_thread_count(seed in any::<u64>()) {
        let ex = gmlab_core::lab::example_ex2().unwrap();
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate_variances(&ex.estimator, ex.c(), &ex.law, 3000, seed).unwrap())
        };
        prop_assert_eq!(run(1), run(4));
    }
}
