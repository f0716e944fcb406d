#![allow(dead_code)]

use lmmsel_core::rng::seeded;
use lmmsel_core::ClusteredDataset;
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

/// Balanced random-intercept data with i.i.d. standard-normal covariates.
pub fn random_intercept_data(
    clusters: usize,
    size: usize,
    beta: &[f64],
    intercept_variance: f64,
    residual_variance: f64,
    seed: u64,
) -> ClusteredDataset {
    let mut rng = seeded(seed);
    let p = beta.len();
    let n = clusters * size;
    let x = DMatrix::from_fn(n, p, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
    let mut y: DVector<f64> = &x * DVector::from_column_slice(beta);
    for c in 0..clusters {
        let b: f64 = StandardNormal.sample(&mut rng);
        for r in 0..size {
            let e: f64 = StandardNormal.sample(&mut rng);
            y[c * size + r] += intercept_variance.sqrt() * b + residual_variance.sqrt() * e;
        }
    }
    let names = (0..p).map(|j| format!("x{}", j + 1)).collect();
    ClusteredDataset::random_intercept(vec![size; clusters], y, x, names).unwrap()
}

/// Same design with a leading column of ones.
pub fn with_intercept(d: &ClusteredDataset) -> ClusteredDataset {
    let x = DMatrix::from_fn(d.n(), d.p() + 1, |i, j| if j == 0 { 1.0 } else { d.x()[(i, j - 1)] });
    let mut names = vec!["(intercept)".to_string()];
    names.extend(d.column_names().iter().cloned());
    ClusteredDataset::random_intercept(d.cluster_sizes().to_vec(), d.y().clone(), x, names).unwrap()
}

/// Binomial 3-SE half-width.
pub fn three_se(pi: f64, reps: usize) -> f64 {
    3.0 * (pi * (1.0 - pi) / reps as f64).sqrt()
}
