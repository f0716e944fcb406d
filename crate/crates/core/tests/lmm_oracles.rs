mod common;

use common::{random_intercept_data, three_se};
use lmmsel_core::lmm::{fit_at_params, marginal_loglik, projection_target, wald_inference};
use lmmsel_core::rng::seeded;
use lmmsel_core::{assemble_sigma, gls_beta, reml_fit, ClusteredDataset, Subset, VarianceParams};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

fn redraw(d: &ClusteredDataset, mean: &DVector<f64>, sb2: f64, se2: f64, seed: u64) -> ClusteredDataset {
    let mut rng = seeded(seed);
    let mut y = mean.clone();
    let mut r = 0;
    for &size in d.cluster_sizes() {
        let b: f64 = StandardNormal.sample(&mut rng);
        for _ in 0..size {
            let e: f64 = StandardNormal.sample(&mut rng);
            y[r] += sb2.sqrt() * b + se2.sqrt() * e;
            r += 1;
        }
    }
    d.with_response(y).unwrap()
}

#[test]
fn reml_matches_anova_moments() {
    let (clusters, size) = (10, 5);
    let raw = random_intercept_data(clusters, size, &[0.0], 2.0, 1.0, 42);
    let ones = DMatrix::from_element(raw.n(), 1, 1.0);
    let d = ClusteredDataset::random_intercept(vec![size; clusters], raw.y().clone(), ones, vec!["(intercept)".into()]).unwrap();
    let y = d.y();
    let grand = y.mean();
    let means: Vec<f64> = (0..clusters).map(|c| y.rows(c * size, size).mean()).collect();
    let ssw: f64 = (0..clusters)
        .map(|c| y.rows(c * size, size).iter().map(|v| (v - means[c]).powi(2)).sum::<f64>())
        .sum();
    let ssb: f64 = means.iter().map(|m| size as f64 * (m - grand).powi(2)).sum();
    let msw = ssw / (clusters * (size - 1)) as f64;
    let msb = ssb / (clusters - 1) as f64;
    assert!(msb > msw, "instance must have an interior optimum");
    let fit = reml_fit(&d, &Subset::full(1)).unwrap();
    assert!((fit.params.residual_variance() - msw).abs() < 1e-6);
    assert!((fit.params.intercept_variance() - (msb - msw) / size as f64).abs() < 1e-6);
    assert!((fit.beta_hat[0] - grand).abs() < 1e-10);
}

#[test]
fn zero_intercept_variance_is_estimated_small() {
    let total: f64 = (0..100)
        .map(|seed| {
            let d = random_intercept_data(40, 5, &[1.0, -1.0], 0.0, 1.0, 1000 + seed);
            reml_fit(&d, &Subset::full(2)).unwrap().params.intercept_variance()
        })
        .sum();
    assert!(total / 100.0 <= 0.05, "mean estimate {}", total / 100.0);
}

#[test]
fn gls_is_unbiased_with_known_sigma() {
    let beta = DVector::from_vec(vec![1.5, -0.5, 0.0]);
    let base = random_intercept_data(20, 5, &[0.0, 0.0, 0.0], 1.0, 1.0, 7);
    let mean = base.x() * &beta;
    let sigma = assemble_sigma(&base, &VarianceParams::random_intercept(1.0, 1.0).unwrap()).unwrap();
    let reps = 1000;
    let mut acc = DVector::zeros(3);
    let mut cov = DMatrix::zeros(3, 3);
    for r in 0..reps {
        let d = redraw(&base, &mean, 1.0, 1.0, 500 + r);
        let (b, k) = gls_beta(&d, &sigma, &Subset::full(3)).unwrap();
        acc += b;
        cov = k;
    }
    acc /= reps as f64;
    for j in 0..3 {
        let se = (cov[(j, j)] / reps as f64).sqrt();
        assert!((acc[j] - beta[j]).abs() < 3.0 * se, "coordinate {j}: {} vs {}", acc[j], beta[j]);
    }
}

#[test]
fn projection_target_matches_direct_formula() {
    // 6 observations in 3 clusters, 2 columns; mean outside the column span
    let x = DMatrix::from_row_slice(6, 2, &[1.0, 0.2, 0.5, -1.0, -0.3, 0.8, 1.2, 0.1, -0.7, -0.4, 0.9, 1.5]);
    let mu = DVector::from_vec(vec![0.3, -1.1, 2.0, 0.4, -0.2, 1.7]);
    let d = ClusteredDataset::random_intercept(vec![2, 2, 2], mu.clone(), x.clone(), vec!["a".into(), "b".into()]).unwrap();
    let params = VarianceParams::random_intercept(0.8, 1.3).unwrap();
    let sigma = assemble_sigma(&d, &params).unwrap();
    let mut dense = DMatrix::from_diagonal_element(6, 6, 1.3);
    for c in 0..3 {
        for i in 0..2 {
            for j in 0..2 {
                dense[(2 * c + i, 2 * c + j)] += 0.8;
            }
        }
    }
    let inv = dense.try_inverse().unwrap();
    for columns in [Subset::new(vec![0]), Subset::new(vec![1]), Subset::full(2)] {
        let xm = d.x_columns(&columns);
        let direct = (xm.transpose() * &inv * &xm).try_inverse().unwrap() * xm.transpose() * &inv * &mu;
        let ours = projection_target(&d, &sigma, &columns, &mu).unwrap();
        assert!((ours - direct).amax() < 1e-12);
    }
}

#[test]
fn wald_intervals_cover_at_nominal_rate() {
    let beta = DVector::from_vec(vec![1.0, 0.0, -0.5]);
    let base = random_intercept_data(40, 5, &[0.0, 0.0, 0.0], 1.0, 1.0, 9);
    let mean = base.x() * &beta;
    let reps = 1000usize;
    let mut covered = 0usize;
    let mut total = 0usize;
    for r in 0..reps {
        let d = redraw(&base, &mean, 1.0, 1.0, 10_000 + r as u64);
        let fit = reml_fit(&d, &Subset::full(3)).unwrap();
        let report = wald_inference(&fit, &d, 0.05).unwrap();
        for e in &report.entries {
            covered += e.covers(beta[e.column]) as usize;
            total += 1;
        }
    }
    let rate = covered as f64 / total as f64;
    // 3 SE band at the per-interval level over all intervals
    assert!((rate - 0.95).abs() <= three_se(0.95, reps), "coverage {rate}");
}

#[test]
fn marginal_loglik_matches_dense_density() {
    let x = DMatrix::from_row_slice(4, 1, &[0.5, -1.0, 2.0, 0.3]);
    let y = DVector::from_vec(vec![1.0, -0.4, 2.5, 0.1]);
    let d = ClusteredDataset::random_intercept(vec![2, 2], y.clone(), x.clone(), vec!["x".into()]).unwrap();
    let params = VarianceParams::random_intercept(0.6, 0.9).unwrap();
    let fit = fit_at_params(&d, &Subset::full(1), &params).unwrap();
    let mut s: DMatrix<f64> = DMatrix::from_diagonal_element(4, 4, 0.9);
    for c in 0..2 {
        for i in 0..2 {
            for j in 0..2 {
                s[(2 * c + i, 2 * c + j)] += 0.6;
            }
        }
    }
    let r = &y - &x * &fit.beta_hat;
    let inv = s.clone().try_inverse().unwrap();
    let direct = -0.5 * (4.0 * (2.0 * std::f64::consts::PI).ln() + s.determinant().ln() + (r.transpose() * inv * &r)[(0, 0)]);
    assert!((marginal_loglik(&fit, &d).unwrap() - direct).abs() < 1e-10);
}

fn permute_clusters(d: &ClusteredDataset, order: &[usize]) -> ClusteredDataset {
    d.subset_clusters(order).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn reml_is_invariant_to_cluster_order(seed in 0u64..10_000, rot in 1usize..19) {
        let d = random_intercept_data(20, 4, &[1.0, -0.5], 1.0, 1.0, seed);
        let order: Vec<usize> = (0..20).map(|i| (i + rot) % 20).rev().collect();
        let a = reml_fit(&d, &Subset::full(2)).unwrap();
        let b = reml_fit(&permute_clusters(&d, &order), &Subset::full(2)).unwrap();
        prop_assert!((a.params.intercept_variance() - b.params.intercept_variance()).abs() < 1e-10,
            "{} vs {}, boundary {} {}", a.params.intercept_variance(), b.params.intercept_variance(), a.boundary, b.boundary);
        prop_assert!((a.params.residual_variance() - b.params.residual_variance()).abs() < 1e-10);
        prop_assert!((a.beta_hat.clone() - b.beta_hat.clone()).amax() < 1e-10);
    }

    #[test]
    fn gls_and_wald_scale_with_the_response(seed in 0u64..10_000, c in 0.1f64..20.0) {
        let d = random_intercept_data(15, 4, &[0.8, 0.0, -0.3], 0.7, 1.0, seed);
        let scaled = d.with_response(d.y() * c).unwrap();
        let params = VarianceParams::random_intercept(0.7, 1.0).unwrap();
        let sigma = assemble_sigma(&d, &params).unwrap();
        let (b1, _) = gls_beta(&d, &sigma, &Subset::full(3)).unwrap();
        let (b2, _) = gls_beta(&scaled, &sigma, &Subset::full(3)).unwrap();
        prop_assert!((b1 * c - b2).amax() < 1e-9 * c.max(1.0));

        let f1 = reml_fit(&d, &Subset::full(3)).unwrap();
        let f2 = reml_fit(&scaled, &Subset::full(3)).unwrap();
        let w1 = wald_inference(&f1, &d, 0.05).unwrap();
        let w2 = wald_inference(&f2, &scaled, 0.05).unwrap();
        for (e1, e2) in w1.entries.iter().zip(&w2.entries) {
            prop_assert!((e1.p_value - e2.p_value).abs() < 1e-10, "{} vs {}", e1.p_value, e2.p_value);
            prop_assert!((e1.estimate * c - e2.estimate).abs() < 1e-10 * c.max(1.0));
        }
    }
}
