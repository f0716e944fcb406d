//! Linear mixed model: marginal covariance, GLS, REML, BLUPs and Wald inference.
//!
//! The residual covariance is `sigma_eps^2 * I`, so the marginal covariance of
//! cluster `i` is `Sigma_i = sigma_eps^2 I + Z_i G Z_i^T`. All solves go through
//! per-cluster Cholesky factors; the dense `n x n` matrix is only built on request.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::data::{ClusteredDataset, Subset};
use crate::distributions::{normal_quantile, normal_sf};
use crate::error::{Error, Result};
use crate::optim::{brent_minimize, nelder_mead};
use crate::report::{CoefficientEntry, Diagnostics, InferenceReport, Method, Target};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Random-effect covariance `G` (q x q) and residual variance.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceParams {
    g: DMatrix<f64>,
    residual_variance: f64,
}

impl VarianceParams {
    pub fn new(g: DMatrix<f64>, residual_variance: f64) -> Result<Self> {
        if !(residual_variance > 0.0 && residual_variance.is_finite()) {
            return Err(Error::ParameterDomain(format!(
                "residual variance must be positive, got {residual_variance}"
            )));
        }
        if !g.is_square() || g.nrows() == 0 {
            return Err(Error::ParameterDomain("G must be a non-empty square matrix".into()));
        }
        let scale = g.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        if (&g - g.transpose()).amax() > 1e-10 * scale {
            return Err(Error::ParameterDomain("G is not symmetric".into()));
        }
        let min_eig = g.clone().symmetric_eigenvalues().min();
        if min_eig < -1e-10 * scale || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::ParameterDomain(format!(
                "G is not positive semidefinite (smallest eigenvalue {min_eig})"
            )));
        }
        Ok(Self {
            g,
            residual_variance,
        })
    }

    pub fn random_intercept(intercept_variance: f64, residual_variance: f64) -> Result<Self> {
        if intercept_variance < 0.0 {
            return Err(Error::ParameterDomain(format!(
                "random-intercept variance must be nonnegative, got {intercept_variance}"
            )));
        }
        Self::new(DMatrix::from_element(1, 1, intercept_variance), residual_variance)
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn q(&self) -> usize {
        self.g.nrows()
    }

    pub fn residual_variance(&self) -> f64 {
        self.residual_variance
    }

    /// Leading diagonal entry of `G`: the random-intercept variance for q = 1.
    pub fn intercept_variance(&self) -> f64 {
        self.g[(0, 0)]
    }

    /// Packed parameter vector: lower triangle of `G` by columns, then the residual variance.
    pub fn theta(&self) -> Vec<f64> {
        let q = self.q();
        let mut out = Vec::with_capacity(q * (q + 1) / 2 + 1);
        for j in 0..q {
            for i in j..q {
                out.push(self.g[(i, j)]);
            }
        }
        out.push(self.residual_variance);
        out
    }

    /// Same parameters with `G` and the residual variance multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(&self.g * c, self.residual_variance * c)
    }
}

struct CovBlock {
    offset: usize,
    size: usize,
    chol: Cholesky<f64, Dyn>,
}

/// Cluster-block-diagonal marginal covariance with cached Cholesky factors.
pub struct MarginalCovariance {
    blocks: Vec<CovBlock>,
    n: usize,
    logdet: f64,
    residual_variance: f64,
    is_block_diagonal: bool,
}

impl std::fmt::Debug for MarginalCovariance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MarginalCovariance")
            .field("n", &self.n)
            .field("clusters", &self.blocks.len())
            .field("logdet", &self.logdet)
            .finish()
    }
}

impl Clone for MarginalCovariance {
    fn clone(&self) -> Self {
        Self {
            blocks: self
                .blocks
                .iter()
                .map(|b| CovBlock {
                    offset: b.offset,
                    size: b.size,
                    chol: b.chol.clone(),
                })
                .collect(),
            n: self.n,
            logdet: self.logdet,
            residual_variance: self.residual_variance,
            is_block_diagonal: self.is_block_diagonal,
        }
    }
}

/// `Sigma(theta) = sigma_eps^2 I + Z G Z^T`, factorized cluster by cluster.
pub fn assemble_sigma(
    dataset: &ClusteredDataset,
    params: &VarianceParams,
) -> Result<MarginalCovariance> {
    if params.q() != dataset.q() {
        return Err(Error::ParameterDomain(format!(
            "G is {}x{} but the random design has q = {}",
            params.q(),
            params.q(),
            dataset.q()
        )));
    }
    let mut blocks = Vec::with_capacity(dataset.n_clusters());
    let mut logdet = 0.0;
    for (i, z) in dataset.z_blocks().iter().enumerate() {
        let size = z.nrows();
        let mut block = z * params.g() * z.transpose();
        for d in 0..size {
            block[(d, d)] += params.residual_variance();
        }
        let chol = Cholesky::new(block).ok_or_else(|| {
            Error::NumericalSingularity(format!("covariance block of cluster {i} is not positive definite"))
        })?;
        logdet += 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        blocks.push(CovBlock {
            offset: dataset.offsets()[i],
            size,
            chol,
        });
    }
    Ok(MarginalCovariance {
        blocks,
        n: dataset.n(),
        logdet,
        residual_variance: params.residual_variance(),
        is_block_diagonal: true,
    })
}

impl MarginalCovariance {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    pub fn residual_variance(&self) -> f64 {
        self.residual_variance
    }

    pub fn is_block_diagonal(&self) -> bool {
        self.is_block_diagonal
    }

    /// `Sigma^{-1} v`.
    pub fn solve_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        for b in &self.blocks {
            let mut seg = out.rows_mut(b.offset, b.size);
            b.chol.solve_mut(&mut seg);
        }
        out
    }

    /// `Sigma^{-1} M`.
    pub fn solve_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = m.clone();
        for b in &self.blocks {
            let mut seg = out.rows_mut(b.offset, b.size);
            b.chol.solve_mut(&mut seg);
        }
        out
    }

    /// `L^{-1} v` with `Sigma = L L^T`.
    pub fn whiten_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        for b in &self.blocks {
            let mut seg = out.rows_mut(b.offset, b.size);
            b.chol.l_dirty().solve_lower_triangular_mut(&mut seg);
        }
        out
    }

    /// `L^{-1} M`.
    pub fn whiten_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = m.clone();
        for b in &self.blocks {
            let mut seg = out.rows_mut(b.offset, b.size);
            b.chol.l_dirty().solve_lower_triangular_mut(&mut seg);
        }
        out
    }

    pub fn trace_inverse(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.chol.inverse().trace())
            .sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, self.n);
        for b in &self.blocks {
            let l = b.chol.l();
            out.view_mut((b.offset, b.offset), (b.size, b.size))
                .copy_from(&(&l * l.transpose()));
        }
        out
    }

    /// Dense lower-triangular Cholesky factor of the full matrix.
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, self.n);
        for b in &self.blocks {
            out.view_mut((b.offset, b.offset), (b.size, b.size))
                .copy_from(&b.chol.l());
        }
        out
    }
}

fn factor_gram(k: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    let diag = k.diagonal();
    let chol = Cholesky::new(k).ok_or_else(|| Error::SingularDesign(format!("{what} is not positive definite")))?;
    let l = chol.l_dirty();
    for i in 0..diag.len() {
        if l[(i, i)] * l[(i, i)] <= 1e-10 * diag[i].abs().max(f64::MIN_POSITIVE) {
            return Err(Error::SingularDesign(format!("{what} is rank deficient at column {i}")));
        }
    }
    Ok(chol)
}

/// GLS estimate over `columns` and its covariance `(X_M^T Sigma^{-1} X_M)^{-1}`.
pub fn gls_beta(
    dataset: &ClusteredDataset,
    sigma: &MarginalCovariance,
    columns: &Subset,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    gls_with_response(dataset, sigma, columns, dataset.y())
}

pub(crate) fn gls_with_response(
    dataset: &ClusteredDataset,
    sigma: &MarginalCovariance,
    columns: &Subset,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if columns.is_empty() {
        return Ok((DVector::zeros(0), DMatrix::zeros(0, 0)));
    }
    if columns.max_column().is_some_and(|c| c >= dataset.p()) {
        return Err(Error::Validation(format!("column set {columns} exceeds p = {}", dataset.p())));
    }
    let xm = dataset.x_columns(columns);
    let sx = sigma.solve_mat(&xm);
    let k = xm.transpose() * &sx;
    let chol = factor_gram(k, "X_M^T Sigma^{-1} X_M")?;
    let beta = chol.solve(&(sx.transpose() * y));
    Ok((beta, chol.inverse()))
}

/// Projection target `(X_M^T Sigma^{-1} X_M)^{-1} X_M^T Sigma^{-1} mu` for a mean vector `mu`.
pub fn projection_target(
    dataset: &ClusteredDataset,
    sigma: &MarginalCovariance,
    columns: &Subset,
    mean: &DVector<f64>,
) -> Result<DVector<f64>> {
    Ok(gls_with_response(dataset, sigma, columns, mean)?.0)
}

/// Settings for the restricted-likelihood optimizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RemlOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub restarts: usize,
}

impl Default for RemlOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 500,
            restarts: 3,
        }
    }
}

/// Result of a REML fit over a column subset.
#[derive(Debug, Clone)]
pub struct LmmFit {
    pub columns: Subset,
    pub beta_hat: DVector<f64>,
    pub covariance_of_beta: DMatrix<f64>,
    pub params: VarianceParams,
    pub blups: Vec<DVector<f64>>,
    pub reml_loglik: f64,
    pub conditional_loglik: f64,
    /// Random-effect covariance estimated on the boundary (zero intercept variance for q = 1).
    pub boundary: bool,
    pub iterations: usize,
}

/// Quantities of the profiled restricted likelihood at one relative covariance.
struct ProfiledEval {
    objective: f64,
    sigma2: f64,
}

/// Profiled `-2 * restricted loglik` at relative covariance `gamma = G / sigma_eps^2`.
fn profiled_objective(
    dataset: &ClusteredDataset,
    xm: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
) -> Result<ProfiledEval> {
    let n = dataset.n();
    let k = xm.ncols();
    let dof = n - k;
    let mut gram = DMatrix::zeros(k, k);
    let mut xvy = DVector::zeros(k);
    let mut yvy = 0.0;
    let mut logdet_v = 0.0;
    for (i, z) in dataset.z_blocks().iter().enumerate() {
        let (off, size) = (dataset.offsets()[i], z.nrows());
        let mut v = z * gamma * z.transpose();
        for d in 0..size {
            v[(d, d)] += 1.0;
        }
        let chol = Cholesky::new(v)
            .ok_or_else(|| Error::NumericalSingularity(format!("V block {i} not positive definite")))?;
        logdet_v += 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let yi = dataset.y().rows(off, size).into_owned();
        let vy = chol.solve(&yi);
        yvy += yi.dot(&vy);
        if k > 0 {
            let xi = xm.rows(off, size).into_owned();
            let vx = chol.solve(&xi);
            gram += xi.transpose() * &vx;
            xvy += vx.transpose() * &yi;
        }
    }
    let (resid, logdet_k) = if k > 0 {
        let chol = factor_gram(gram, "X_M^T V^{-1} X_M")?;
        let beta = chol.solve(&xvy);
        let logdet_k = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        (yvy - xvy.dot(&beta), logdet_k)
    } else {
        (yvy, 0.0)
    };
    if !(resid > 0.0) {
        return Err(Error::NumericalSingularity("zero restricted residual sum of squares".into()));
    }
    let sigma2 = resid / dof as f64;
    let objective = dof as f64 * (LN_2PI + sigma2.ln() + 1.0) + logdet_v + logdet_k;
    Ok(ProfiledEval { objective, sigma2 })
}

/// Derivative of the profiled objective in the scalar relative variance `gamma`.
fn profiled_slope_scalar(dataset: &ClusteredDataset, xm: &DMatrix<f64>, gamma: f64) -> Result<f64> {
    let n = dataset.n();
    let k = xm.ncols();
    let mut gram = DMatrix::zeros(k, k);
    let mut xvy = DVector::zeros(k);
    let mut trace_v = 0.0;
    let mut ws = Vec::with_capacity(dataset.n_clusters());
    for (i, z) in dataset.z_blocks().iter().enumerate() {
        let (off, size) = (dataset.offsets()[i], z.nrows());
        let z = z.column(0);
        let zz = z.dot(&z);
        let scale = gamma / (1.0 + gamma * zz);
        let yi = dataset.y().rows(off, size);
        let xi = xm.rows(off, size);
        // V_i^{-1} = I - scale z z^T
        let zy = z.dot(&yi);
        let zx = xi.transpose() * z;
        gram += xi.transpose() * xi - &zx * zx.transpose() * scale;
        xvy += xi.transpose() * yi - &zx * (zy * scale);
        trace_v += zz / (1.0 + gamma * zz);
        ws.push((zx / (1.0 + gamma * zz), zz));
    }
    let chol = if k > 0 { Some(factor_gram(gram, "X_M^T V^{-1} X_M")?) } else { None };
    let beta = chol.as_ref().map(|c| c.solve(&xvy)).unwrap_or_else(|| DVector::zeros(0));
    let mut resid = 0.0;
    let mut score = 0.0;
    let mut trace_k = 0.0;
    for (i, z) in dataset.z_blocks().iter().enumerate() {
        let (off, size) = (dataset.offsets()[i], z.nrows());
        let z = z.column(0);
        let (w, zz) = &ws[i];
        let mut e = dataset.y().rows(off, size).into_owned();
        if k > 0 {
            e -= xm.rows(off, size) * &beta;
        }
        let ze = z.dot(&e);
        resid += e.dot(&e) - gamma * ze * ze / (1.0 + gamma * zz);
        let u = ze / (1.0 + gamma * zz);
        score += u * u;
        if let Some(c) = &chol {
            trace_k += w.dot(&c.solve(w));
        }
    }
    Ok(trace_v - trace_k - (n - k) as f64 * score / resid)
}

/// Sharpens a scalar optimum by bisecting the sign of the analytic slope, so the
/// result does not inherit the rounding noise of objective comparisons.
fn polish_scalar(dataset: &ClusteredDataset, xm: &DMatrix<f64>, phi: f64) -> Option<f64> {
    let slope = |p: f64| profiled_slope_scalar(dataset, xm, p.exp()).ok();
    let (mut lo, mut hi) = (phi - 1e-3, phi + 1e-3);
    let (s_lo, s_hi) = (slope(lo)?, slope(hi)?);
    if !(s_lo < 0.0 && s_hi > 0.0) {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        match slope(mid)? {
            s if s < 0.0 => lo = mid,
            s if s > 0.0 => hi = mid,
            _ => return Some(mid),
        }
    }
    Some(0.5 * (lo + hi))
}

/// Restricted log-likelihood `-1/2 [(n-k) ln 2pi + ln|Sigma| + ln|X^T Sigma^{-1} X| + y^T P y]`
/// at arbitrary (not profiled) parameters.
pub fn restricted_loglik(
    dataset: &ClusteredDataset,
    columns: &Subset,
    params: &VarianceParams,
) -> Result<f64> {
    let sigma = assemble_sigma(dataset, params)?;
    let n = dataset.n();
    let k = columns.len();
    let sy = sigma.solve_vec(dataset.y());
    let mut quad = dataset.y().dot(&sy);
    let mut logdet_k = 0.0;
    if k > 0 {
        let xm = dataset.x_columns(columns);
        let sx = sigma.solve_mat(&xm);
        let chol = factor_gram(xm.transpose() * &sx, "X_M^T Sigma^{-1} X_M")?;
        let c = sx.transpose() * dataset.y();
        quad -= c.dot(&chol.solve(&c));
        logdet_k = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    }
    Ok(-0.5 * ((n - k) as f64 * LN_2PI + sigma.logdet() + logdet_k + quad))
}

/// Relative covariance from log-Cholesky parameters (diagonal entries on the log scale).
fn gamma_from_log_cholesky(phi: &[f64], q: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(q, q);
    let mut idx = 0;
    for j in 0..q {
        for i in j..q {
            l[(i, j)] = if i == j { phi[idx].exp() } else { phi[idx] };
            idx += 1;
        }
    }
    &l * l.transpose()
}

/// REML fit over `columns` with default optimizer settings.
pub fn reml_fit(dataset: &ClusteredDataset, columns: &Subset) -> Result<LmmFit> {
    reml_fit_with(dataset, columns, &RemlOptions::default())
}

pub fn reml_fit_with(
    dataset: &ClusteredDataset,
    columns: &Subset,
    options: &RemlOptions,
) -> Result<LmmFit> {
    let q = dataset.q();
    let h = q * (q + 1) / 2 + 1;
    if dataset.n_clusters() < 2 {
        return Err(Error::Validation("REML needs at least two clusters".into()));
    }
    if dataset.n() <= columns.len() + h {
        return Err(Error::Validation(format!(
            "REML needs n - |M| > h: n = {}, |M| = {}, h = {h}",
            dataset.n(),
            columns.len()
        )));
    }
    if columns.max_column().is_some_and(|c| c >= dataset.p()) {
        return Err(Error::Validation(format!("column set {columns} exceeds p = {}", dataset.p())));
    }
    let xm = dataset.x_columns(columns);

    let (gamma, boundary, iterations) = if q == 1 {
        optimize_scalar(dataset, &xm, options)?
    } else {
        optimize_log_cholesky(dataset, &xm, q, options)?
    };
    let eval = profiled_objective(dataset, &xm, &gamma)?;
    let params = VarianceParams::new(&gamma * eval.sigma2, eval.sigma2)?;
    finish_fit(dataset, columns, params, -0.5 * eval.objective, boundary, iterations)
}

/// Fit at fixed variance parameters: GLS for beta plus BLUPs.
pub fn fit_at_params(
    dataset: &ClusteredDataset,
    columns: &Subset,
    params: &VarianceParams,
) -> Result<LmmFit> {
    let reml = restricted_loglik(dataset, columns, params)?;
    let boundary = params.g().diagonal().iter().any(|&d| d <= 0.0);
    finish_fit(dataset, columns, params.clone(), reml, boundary, 0)
}

fn finish_fit(
    dataset: &ClusteredDataset,
    columns: &Subset,
    params: VarianceParams,
    reml_loglik: f64,
    boundary: bool,
    iterations: usize,
) -> Result<LmmFit> {
    let sigma = assemble_sigma(dataset, &params)?;
    let (beta_hat, covariance_of_beta) = gls_beta(dataset, &sigma, columns)?;
    let mut resid = dataset.y().clone();
    if !columns.is_empty() {
        resid -= dataset.x_columns(columns) * &beta_hat;
    }
    let sr = sigma.solve_vec(&resid);
    let blups = dataset
        .z_blocks()
        .iter()
        .enumerate()
        .map(|(i, z)| {
            let seg = sr.rows(dataset.offsets()[i], z.nrows());
            params.g() * (z.transpose() * seg)
        })
        .collect();
    let mut fit = LmmFit {
        columns: columns.clone(),
        beta_hat,
        covariance_of_beta,
        params,
        blups,
        reml_loglik,
        conditional_loglik: 0.0,
        boundary,
        iterations,
    };
    fit.conditional_loglik = conditional_loglik(&fit, dataset);
    Ok(fit)
}

fn optimize_scalar(
    dataset: &ClusteredDataset,
    xm: &DMatrix<f64>,
    options: &RemlOptions,
) -> Result<(DMatrix<f64>, bool, usize)> {
    let gamma_of = |phi: f64| DMatrix::from_element(1, 1, phi.exp());
    let mut objective = |phi: f64| profiled_objective(dataset, xm, &gamma_of(phi)).map(|e| e.objective);

    let mut evaluations = 0;
    let mut grid: Vec<(f64, f64)> = Vec::new();
    for step in -12..=10 {
        let phi = step as f64;
        grid.push((phi, objective(phi)?));
        evaluations += 1;
    }
    while grid.last().is_some_and(|last| {
        grid.iter().all(|g| g.1 >= last.1) && last.0 < 30.0
    }) {
        let phi = grid.last().map(|g| g.0 + 1.0).unwrap_or(0.0);
        grid.push((phi, objective(phi)?));
        evaluations += 1;
    }
    let best = grid
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let lo = if best == 0 { grid[0].0 - 14.0 } else { grid[best - 1].0 };
    let hi = if best + 1 < grid.len() { grid[best + 1].0 } else { grid[best].0 + 1.0 };

    let min = match brent_minimize(&mut objective, lo, hi, 1e-10, options.max_iterations) {
        Ok(m) => m,
        // Brent's best iterate is still acceptable once it improves on the grid
        Err(Error::Convergence {
            iterations,
            best_objective,
            best_point,
        }) if best_objective <= grid[best].1 => crate::optim::Minimum {
            point: best_point[0],
            value: best_objective,
            iterations,
        },
        Err(e) => return Err(e),
    };
    evaluations += min.iterations;

    let at_zero = profiled_objective(dataset, xm, &DMatrix::zeros(1, 1))?.objective;
    if at_zero <= min.value + options.tolerance * 1e-2 {
        Ok((DMatrix::zeros(1, 1), true, evaluations))
    } else {
        let point = polish_scalar(dataset, xm, min.point)
            .filter(|&p| objective(p).is_ok_and(|v| v <= min.value + 1e-9))
            .unwrap_or(min.point);
        Ok((gamma_of(point), false, evaluations))
    }
}

fn optimize_log_cholesky(
    dataset: &ClusteredDataset,
    xm: &DMatrix<f64>,
    q: usize,
    options: &RemlOptions,
) -> Result<(DMatrix<f64>, bool, usize)> {
    let dim = q * (q + 1) / 2;
    let mut objective = |phi: &[f64]| {
        profiled_objective(dataset, xm, &gamma_from_log_cholesky(phi, q)).map(|e| e.objective)
    };
    let mut start = vec![0.0; dim];
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut iterations = 0;
    let mut last_err = None;
    for attempt in 0..=options.restarts {
        if attempt > 0 {
            // restart from the best point so far, nudged off its simplex
            if let Some((pt, _)) = &best {
                start = pt.iter().enumerate().map(|(i, v)| v + 0.1 * ((i + attempt) % 3) as f64 - 0.1).collect();
            }
        }
        match nelder_mead(&mut objective, &start, 0.5, options.tolerance, options.max_iterations) {
            Ok(m) => {
                iterations += m.iterations;
                let improved = best.as_ref().map(|b| b.1 - m.value).unwrap_or(f64::INFINITY);
                if best.as_ref().is_none_or(|b| m.value < b.1) {
                    best = Some((m.point, m.value));
                }
                if improved.abs() < options.tolerance {
                    break;
                }
            }
            Err(e @ Error::Convergence { .. }) => {
                iterations += options.max_iterations;
                last_err = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    let (point, _) = match best {
        Some(b) => b,
        None => return Err(last_err.unwrap_or(Error::Convergence {
            iterations,
            best_objective: f64::NAN,
            best_point: start,
        })),
    };
    let gamma = gamma_from_log_cholesky(&point, q);
    let boundary = gamma.diagonal().iter().any(|&d| d < 1e-8);
    Ok((gamma, boundary, iterations))
}

/// Wald z-tests and intervals over the fitted columns.
pub fn wald_inference(
    fit: &LmmFit,
    dataset: &ClusteredDataset,
    alpha: f64,
) -> Result<InferenceReport> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Validation(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let z = normal_quantile(1.0 - alpha / 2.0);
    let mut entries = Vec::with_capacity(fit.columns.len());
    for (pos, column) in fit.columns.iter().enumerate() {
        let var = fit.covariance_of_beta[(pos, pos)];
        if !(var > 0.0) {
            return Err(Error::DegenerateVariance { column });
        }
        let se = var.sqrt();
        let est = fit.beta_hat[pos];
        let stat = est / se;
        entries.push(CoefficientEntry {
            column,
            name: dataset.column_names()[column].clone(),
            estimate: est,
            p_value: (2.0 * normal_sf(stat.abs())).min(1.0),
            ci_lower: est - z * se,
            ci_upper: est + z * se,
            selected: true,
            failed: false,
            acceptance_rate: None,
        });
    }
    Ok(InferenceReport {
        method: Method::Wald,
        target: Target::Projection,
        alpha,
        selected: fit.columns.clone(),
        entries,
        diagnostics: Diagnostics::default(),
    })
}

/// `log f(y | b_hat, beta_hat)` under `y | b ~ N(X beta + Z b, sigma_eps^2 I)`.
pub fn conditional_loglik(fit: &LmmFit, dataset: &ClusteredDataset) -> f64 {
    let mut resid = dataset.y().clone();
    if !fit.columns.is_empty() {
        resid -= dataset.x_columns(&fit.columns) * &fit.beta_hat;
    }
    for (i, z) in dataset.z_blocks().iter().enumerate() {
        let off = dataset.offsets()[i];
        let zb = z * &fit.blups[i];
        let mut seg = resid.rows_mut(off, z.nrows());
        seg -= zb;
    }
    let s2 = fit.params.residual_variance();
    let n = dataset.n() as f64;
    -0.5 * n * (LN_2PI + s2.ln()) - resid.norm_squared() / (2.0 * s2)
}

/// Marginal Gaussian log-likelihood `log N(y; X beta_hat, Sigma(theta_hat))`.
pub fn marginal_loglik(fit: &LmmFit, dataset: &ClusteredDataset) -> Result<f64> {
    let sigma = assemble_sigma(dataset, &fit.params)?;
    let mut resid = dataset.y().clone();
    if !fit.columns.is_empty() {
        resid -= dataset.x_columns(&fit.columns) * &fit.beta_hat;
    }
    let quad = resid.dot(&sigma.solve_vec(&resid));
    Ok(-0.5 * (dataset.n() as f64 * LN_2PI + sigma.logdet() + quad))
}

/// Trace of the map `y -> X beta_hat + Z b_hat` at the fitted variance parameters.
///
/// With `P = Sigma^{-1} - Sigma^{-1} X (X^T Sigma^{-1} X)^{-1} X^T Sigma^{-1}` the map is
/// `I - sigma_eps^2 P`, so the trace is `n - sigma_eps^2 tr(P)`.
pub fn hat_trace(fit: &LmmFit, dataset: &ClusteredDataset) -> Result<f64> {
    let sigma = assemble_sigma(dataset, &fit.params)?;
    let trace_p = projection_trace(dataset, &sigma, &fit.columns)?;
    Ok(dataset.n() as f64 - fit.params.residual_variance() * trace_p)
}

pub(crate) fn projection_trace(
    dataset: &ClusteredDataset,
    sigma: &MarginalCovariance,
    columns: &Subset,
) -> Result<f64> {
    let mut trace = sigma.trace_inverse();
    if !columns.is_empty() {
        let xm = dataset.x_columns(columns);
        let sx = sigma.solve_mat(&xm);
        let chol = factor_gram(xm.transpose() * &sx, "X_M^T Sigma^{-1} X_M")?;
        let inner = sx.transpose() * &sx;
        trace -= chol.solve(&inner).trace();
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand_distr::{Distribution, StandardNormal};

    fn random_intercept_data(n_clusters: usize, size: usize, p: usize, sb2: f64, seed: u64) -> ClusteredDataset {
        let mut rng = seeded(seed);
        let n = n_clusters * size;
        let x = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
        let beta: Vec<f64> = (0..p).map(|j| if j % 2 == 0 { 1.0 } else { -0.5 }).collect();
        let mut y: DVector<f64> = &x * DVector::from_vec(beta);
        for c in 0..n_clusters {
            let b: f64 = StandardNormal.sample(&mut rng);
            for r in 0..size {
                let e: f64 = StandardNormal.sample(&mut rng);
                y[c * size + r] += sb2.sqrt() * b + e;
            }
        }
        let names = (0..p).map(|j| format!("x{j}")).collect();
        ClusteredDataset::random_intercept(vec![size; n_clusters], y, x, names).unwrap()
    }

    #[test]
    fn scalar_slope_matches_finite_difference() {
        let d = random_intercept_data(8, 4, 3, 0.7, 11);
        let xm = d.x_columns(&Subset::full(3));
        let f = |g: f64| profiled_objective(&d, &xm, &DMatrix::from_element(1, 1, g)).unwrap().objective;
        for g in [0.05, 0.6, 3.0] {
            let h = 1e-5 * g;
            let fd = (f(g + h) - f(g - h)) / (2.0 * h);
            let slope = profiled_slope_scalar(&d, &xm, g).unwrap();
            assert!((fd - slope).abs() < 1e-5 * fd.abs().max(1.0), "{fd} vs {slope}");
        }
    }

    #[test]
    fn zero_random_effect_gives_identity() {
        let d = random_intercept_data(3, 4, 2, 1.0, 1);
        let s = assemble_sigma(&d, &VarianceParams::random_intercept(0.0, 1.0).unwrap()).unwrap();
        assert_eq!(s.to_dense(), DMatrix::identity(12, 12));
    }

    #[test]
    fn two_by_two_block() {
        let d = ClusteredDataset::random_intercept(
            vec![2],
            DVector::from_vec(vec![0.0, 1.0]),
            DMatrix::from_element(2, 1, 1.0),
            vec!["a".into()],
        )
        .unwrap();
        let s = assemble_sigma(&d, &VarianceParams::random_intercept(3.0, 1.0).unwrap()).unwrap();
        let dense = s.to_dense();
        assert_eq!(dense, DMatrix::from_row_slice(2, 2, &[4.0, 3.0, 3.0, 4.0]));
    }

    #[test]
    fn equal_variances_give_half_intraclass_correlation() {
        let d = random_intercept_data(2, 3, 1, 1.0, 2);
        let dense = assemble_sigma(&d, &VarianceParams::random_intercept(2.5, 2.5).unwrap())
            .unwrap()
            .to_dense();
        assert!((dense[(0, 1)] / dense[(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(dense[(0, 3)], 0.0);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(VarianceParams::random_intercept(1.0, 0.0).is_err());
        assert!(VarianceParams::random_intercept(-1.0, 1.0).is_err());
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(VarianceParams::new(g, 1.0), Err(Error::ParameterDomain(_))));
    }

    #[test]
    fn theta_has_expected_length() {
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let params = VarianceParams::new(g, 0.7).unwrap();
        assert_eq!(params.theta(), vec![2.0, 0.5, 1.0, 0.7]);
    }

    #[test]
    fn gls_at_identity_is_ols() {
        let d = random_intercept_data(5, 4, 3, 1.0, 3);
        let s = assemble_sigma(&d, &VarianceParams::random_intercept(0.0, 1.0).unwrap()).unwrap();
        let (beta, _) = gls_beta(&d, &s, &Subset::full(3)).unwrap();
        let x = d.x();
        let ols = (x.transpose() * x).cholesky().unwrap().solve(&(x.transpose() * d.y()));
        assert!((beta - ols).amax() < 1e-12);
    }

    #[test]
    fn gls_detects_rank_deficiency() {
        let mut d = random_intercept_data(4, 3, 2, 1.0, 4);
        let mut x = d.x().clone();
        let c0 = x.column(0).into_owned();
        x.set_column(1, &(c0 * 2.0));
        d = ClusteredDataset::random_intercept(d.cluster_sizes().to_vec(), d.y().clone(), x, d.column_names().to_vec()).unwrap();
        let s = assemble_sigma(&d, &VarianceParams::random_intercept(1.0, 1.0).unwrap()).unwrap();
        assert!(matches!(gls_beta(&d, &s, &Subset::full(2)), Err(Error::SingularDesign(_))));
    }

    #[test]
    fn reml_optimum_beats_generating_parameters() {
        let d = random_intercept_data(12, 5, 2, 1.0, 5);
        let fit = reml_fit(&d, &Subset::full(2)).unwrap();
        let truth = restricted_loglik(&d, &Subset::full(2), &VarianceParams::random_intercept(1.0, 1.0).unwrap()).unwrap();
        assert!(fit.reml_loglik >= truth - 1e-8);
        let at_hat = restricted_loglik(&d, &Subset::full(2), &fit.params).unwrap();
        assert!((at_hat - fit.reml_loglik).abs() < 1e-8);
    }

    #[test]
    fn blups_shrink_toward_zero() {
        // intercept-only model: b_i = n_i s_b / (s_e + n_i s_b) * mean residual
        let d = random_intercept_data(6, 4, 1, 2.0, 6);
        let x1 = DMatrix::from_element(d.n(), 1, 1.0);
        let d = ClusteredDataset::random_intercept(d.cluster_sizes().to_vec(), d.y().clone(), x1, vec!["one".into()]).unwrap();
        let mut previous: Option<Vec<f64>> = None;
        for &ratio in &[4.0, 1.0, 0.25] {
            let params = VarianceParams::random_intercept(ratio, 1.0).unwrap();
            let fit = fit_at_params(&d, &Subset::full(1), &params).unwrap();
            let mut mags = Vec::new();
            for (i, b) in fit.blups.iter().enumerate() {
                let off = d.offsets()[i];
                let mean_resid = (0..4).map(|r| d.y()[off + r] - fit.beta_hat[0]).sum::<f64>() / 4.0;
                let b = b[0];
                assert!(b * mean_resid > 0.0 && b.abs() < mean_resid.abs());
                mags.push(b.abs());
            }
            if let Some(prev) = &previous {
                assert!(mags.iter().zip(prev).all(|(now, before)| now < before));
            }
            previous = Some(mags);
        }
    }

    #[test]
    fn conditional_loglik_zero_residuals() {
        let d = ClusteredDataset::random_intercept(
            vec![2, 2],
            DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]),
            DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]),
            vec!["x".into()],
        )
        .unwrap();
        let fit = fit_at_params(&d, &Subset::full(1), &VarianceParams::random_intercept(0.0, 1.0).unwrap()).unwrap();
        assert!((fit.conditional_loglik + 2.0 * LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn hat_trace_without_random_effect_counts_columns() {
        let d = random_intercept_data(6, 5, 3, 1.0, 7);
        let fit = fit_at_params(&d, &Subset::new(vec![0, 2]), &VarianceParams::random_intercept(0.0, 1.3).unwrap()).unwrap();
        assert!((hat_trace(&fit, &d).unwrap() - 2.0).abs() < 1e-10);
    }

    #[test]
    fn wald_handles_zero_estimate_and_degenerate_variance() {
        let d = random_intercept_data(4, 3, 1, 1.0, 8);
        let mut fit = fit_at_params(&d, &Subset::full(1), &VarianceParams::random_intercept(1.0, 1.0).unwrap()).unwrap();
        fit.beta_hat[0] = 0.0;
        let r = wald_inference(&fit, &d, 0.05).unwrap();
        assert_eq!(r.entries[0].p_value, 1.0);
        assert!((r.entries[0].ci_lower + r.entries[0].ci_upper).abs() < 1e-15);
        fit.covariance_of_beta[(0, 0)] = 1.0;
        fit.beta_hat[0] = 1.959963984540054;
        let r = wald_inference(&fit, &d, 0.05).unwrap();
        assert!((r.entries[0].p_value - 0.05).abs() < 1e-12);
        fit.covariance_of_beta[(0, 0)] = 0.0;
        assert!(matches!(wald_inference(&fit, &d, 0.05), Err(Error::DegenerateVariance { column: 0 })));
    }

    #[test]
    fn general_q_fit_runs() {
        // random intercept + slope
        let base = random_intercept_data(10, 6, 1, 1.0, 9);
        let mut rng = seeded(99);
        let z_blocks: Vec<DMatrix<f64>> = (0..10)
            .map(|c| DMatrix::from_fn(6, 2, |r, k| if k == 0 { 1.0 } else { base.x()[(c * 6 + r, 0)] }))
            .collect();
        let mut y = base.y().clone();
        for c in 0..10 {
            let slope: f64 = StandardNormal.sample(&mut rng);
            for r in 0..6 {
                y[c * 6 + r] += 0.7 * slope * base.x()[(c * 6 + r, 0)];
            }
        }
        let d = ClusteredDataset::new(vec![6; 10], y, base.x().clone(), z_blocks, vec!["x0".into()]).unwrap();
        let fit = reml_fit(&d, &Subset::full(1)).unwrap();
        assert_eq!(fit.params.q(), 2);
        let truth = restricted_loglik(
            &d,
            &Subset::full(1),
            &VarianceParams::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.49]), 1.0).unwrap(),
        )
        .unwrap();
        assert!(fit.reml_loglik >= truth - 1e-6);
    }
}
