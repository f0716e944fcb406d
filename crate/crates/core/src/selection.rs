//! Fixed-effect selection rules: whitened lasso with BIC tuning, backward stepwise
//! and cAIC minimization over a candidate set.
//!
//! Every rule is a deterministic map from a response vector to a column subset.
//! With the variance parameters frozen, all rules only need the sufficient
//! statistics in [`ResponseStats`], which keeps repeated evaluation cheap.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClusteredDataset, Subset};
use crate::error::{Error, Result};
use crate::lmm::{assemble_sigma, hat_trace, marginal_loglik, reml_fit, LmmFit, MarginalCovariance, VarianceParams};

const LN_2PI: f64 = 1.837_877_066_409_345_3;
pub const STEPWISE_MAX_P: usize = 60;
pub const ALL_SUBSETS_MAX_P: usize = 15;
const CD_TOL: f64 = 1e-8;
const CD_MAX_SWEEPS: usize = 10_000;
pub const KKT_TOL: f64 = 1e-6;

/// Design-side quantities at fixed variance parameters, shared by every response.
#[derive(Debug, Clone)]
pub struct FrozenProblem {
    params: VarianceParams,
    sigma: MarginalCovariance,
    /// `X^T Sigma^{-1} X`
    gram: DMatrix<f64>,
    /// `Sigma^{-1} X`
    sx: DMatrix<f64>,
    /// `X^T Sigma^{-2} X`
    gram2: DMatrix<f64>,
    trace_inverse: f64,
    n: usize,
}

/// Response-dependent statistics: with `s = Sigma^{-1} y`,
/// `c = X^T s`, `yy = y^T s`, `sc = X^T Sigma^{-1} s`, `ss = s^T s`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseStats {
    pub c: DVector<f64>,
    pub yy: f64,
    pub sc: DVector<f64>,
    pub ss: f64,
}

/// Statistics of `y(t) = a t + r`, quadratic in `t`.
#[derive(Debug, Clone)]
pub struct AffineStats {
    a: ResponseStats,
    r: ResponseStats,
    yy_cross: f64,
    ss_cross: f64,
}

impl AffineStats {
    pub fn at(&self, t: f64) -> ResponseStats {
        ResponseStats {
            c: &self.a.c * t + &self.r.c,
            yy: t * t * self.a.yy + 2.0 * t * self.yy_cross + self.r.yy,
            sc: &self.a.sc * t + &self.r.sc,
            ss: t * t * self.a.ss + 2.0 * t * self.ss_cross + self.r.ss,
        }
    }
}

fn sub_matrix(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(cols.len(), cols.len(), |i, j| m[(cols[i], cols[j])])
}

fn sub_vector(v: &DVector<f64>, cols: &[usize]) -> DVector<f64> {
    DVector::from_fn(cols.len(), |i, _| v[cols[i]])
}

fn chol_checked(m: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    let diag = m.diagonal();
    let chol = Cholesky::new(m).ok_or_else(|| Error::SingularDesign(format!("{what} is not positive definite")))?;
    let l = chol.l_dirty();
    for i in 0..diag.len() {
        if l[(i, i)] * l[(i, i)] <= 1e-10 * diag[i].abs().max(f64::MIN_POSITIVE) {
            return Err(Error::SingularDesign(format!("{what} is rank deficient")));
        }
    }
    Ok(chol)
}

impl FrozenProblem {
    pub fn new(dataset: &ClusteredDataset, params: &VarianceParams) -> Result<Self> {
        let sigma = assemble_sigma(dataset, params)?;
        let sx = sigma.solve_mat(dataset.x());
        let gram = dataset.x().transpose() * &sx;
        let gram2 = sx.transpose() * &sx;
        let trace_inverse = sigma.trace_inverse();
        Ok(Self {
            params: params.clone(),
            sigma,
            gram,
            sx,
            gram2,
            trace_inverse,
            n: dataset.n(),
        })
    }

    pub fn params(&self) -> &VarianceParams {
        &self.params
    }

    pub fn sigma(&self) -> &MarginalCovariance {
        &self.sigma
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.gram.nrows()
    }

    pub fn stats(&self, y: &DVector<f64>) -> ResponseStats {
        let s = self.sigma.solve_vec(y);
        self.stats_from_solved(y, &s)
    }

    fn stats_from_solved(&self, y: &DVector<f64>, s: &DVector<f64>) -> ResponseStats {
        ResponseStats {
            c: self.sx.transpose() * y,
            yy: y.dot(s),
            sc: self.sx.transpose() * s,
            ss: s.norm_squared(),
        }
    }

    pub fn affine_stats(&self, a: &DVector<f64>, r: &DVector<f64>) -> AffineStats {
        let sa = self.sigma.solve_vec(a);
        let sr = self.sigma.solve_vec(r);
        AffineStats {
            yy_cross: a.dot(&sr),
            ss_cross: sa.dot(&sr),
            a: self.stats_from_solved(a, &sa),
            r: self.stats_from_solved(r, &sr),
        }
    }

    /// GLS over `columns` at the frozen parameters: `(beta_M, weighted RSS)`.
    pub fn gls(&self, stats: &ResponseStats, columns: &Subset) -> Result<(DVector<f64>, f64)> {
        if columns.is_empty() {
            return Ok((DVector::zeros(0), stats.yy));
        }
        let chol = chol_checked(sub_matrix(&self.gram, columns.as_slice()), "X_M^T Sigma^{-1} X_M")?;
        let cm = sub_vector(&stats.c, columns.as_slice());
        let beta = chol.solve(&cm);
        let rss = stats.yy - cm.dot(&beta);
        Ok((beta, rss))
    }

    /// Weighted residual sum of squares `(y - X beta)^T Sigma^{-1} (y - X beta)` for a full-length beta.
    pub fn weighted_rss(&self, stats: &ResponseStats, beta: &DVector<f64>) -> f64 {
        stats.yy - 2.0 * beta.dot(&stats.c) + beta.dot(&(&self.gram * beta))
    }

    /// `-2 * marginal loglik` at beta restricted to the frozen covariance, up to nothing.
    pub fn deviance(&self, rss: f64) -> f64 {
        self.n as f64 * LN_2PI + self.sigma.logdet() + rss
    }

    pub fn bic(&self, stats: &ResponseStats, columns: &Subset) -> Result<f64> {
        let (_, rss) = self.gls(stats, columns)?;
        Ok(self.deviance(rss) + columns.len() as f64 * (self.n as f64).ln())
    }

    /// Effective degrees of freedom of the conditional fit on `columns`.
    pub fn hat_trace(&self, columns: &Subset) -> Result<f64> {
        let mut trace_p = self.trace_inverse;
        if !columns.is_empty() {
            let cols = columns.as_slice();
            let chol = chol_checked(sub_matrix(&self.gram, cols), "X_M^T Sigma^{-1} X_M")?;
            trace_p -= chol.solve(&sub_matrix(&self.gram2, cols)).trace();
        }
        Ok(self.n as f64 - self.params.residual_variance() * trace_p)
    }

    /// cAIC with plug-in parameters, given the precomputed hat trace of `columns`.
    pub fn caic_with_trace(&self, stats: &ResponseStats, columns: &Subset, trace: f64) -> Result<f64> {
        let s2 = self.params.residual_variance();
        // ||P_M y||^2 with P_M y = s - S_M beta_M
        let py2 = if columns.is_empty() {
            stats.ss
        } else {
            let cols = columns.as_slice();
            let (beta, _) = self.gls(stats, columns)?;
            let scm = sub_vector(&stats.sc, cols);
            stats.ss - 2.0 * beta.dot(&scm) + beta.dot(&(sub_matrix(&self.gram2, cols) * &beta))
        };
        Ok(self.n as f64 * (LN_2PI + s2.ln()) + s2 * py2 + 2.0 * trace)
    }

    pub fn caic(&self, stats: &ResponseStats, columns: &Subset) -> Result<f64> {
        let trace = self.hat_trace(columns)?;
        self.caic_with_trace(stats, columns, trace)
    }
}

/// Lasso solution at one penalty value.
#[derive(Debug, Clone, PartialEq)]
pub struct LassoSolution {
    pub lambda: f64,
    pub beta: DVector<f64>,
    pub active_set: Subset,
    /// `||Sigma^{-1/2}(y - X beta)||^2 + 2 lambda ||beta||_1`
    pub objective: f64,
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

fn lasso_objective(gram: &DMatrix<f64>, c: &DVector<f64>, yy: f64, lambda: f64, beta: &DVector<f64>) -> f64 {
    yy - 2.0 * beta.dot(c) + beta.dot(&(gram * beta)) + 2.0 * lambda * beta.lp_norm(1)
}

/// Largest KKT violation of `beta` for the Gram-form lasso, on the scale of the
/// smooth-part gradient `2 (G beta - c)`.
pub fn kkt_violation(gram: &DMatrix<f64>, c: &DVector<f64>, lambda: f64, beta: &DVector<f64>) -> f64 {
    let grad = (gram * beta - c) * 2.0;
    let mut worst = 0.0_f64;
    for j in 0..beta.len() {
        let v = if beta[j] == 0.0 {
            grad[j].abs() - 2.0 * lambda
        } else {
            (grad[j] + 2.0 * lambda * beta[j].signum()).abs()
        };
        worst = worst.max(v);
    }
    worst
}

/// Cyclic coordinate descent for `beta^T G beta - 2 beta^T c + 2 lambda ||beta||_1`,
/// followed by an exact solve on the active set when its sign pattern is consistent.
pub fn lasso_gram(
    gram: &DMatrix<f64>,
    c: &DVector<f64>,
    yy: f64,
    lambda: f64,
    warm_start: Option<&DVector<f64>>,
) -> Result<LassoSolution> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Validation(format!("lambda must be finite and nonnegative, got {lambda}")));
    }
    let p = c.len();
    let mut beta = warm_start.cloned().unwrap_or_else(|| DVector::zeros(p));
    // r = c - G beta
    let mut r = c - gram * &beta;
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < CD_MAX_SWEEPS {
        sweeps += 1;
        let mut max_change = 0.0_f64;
        for j in 0..p {
            let gjj = gram[(j, j)];
            let old = beta[j];
            let new = soft_threshold(r[j] + gjj * old, lambda) / gjj;
            if new != old {
                let delta = new - old;
                r.axpy(-delta, &gram.column(j), 1.0);
                beta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < CD_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Convergence {
            iterations: sweeps,
            best_objective: lasso_objective(gram, c, yy, lambda, &beta),
            best_point: beta.iter().copied().collect(),
        });
    }
    polish(gram, c, lambda, &mut beta);
    let active_set: Subset = (0..p).filter(|&j| beta[j] != 0.0).collect();
    Ok(LassoSolution {
        lambda,
        objective: lasso_objective(gram, c, yy, lambda, &beta),
        beta,
        active_set,
    })
}

fn polish(gram: &DMatrix<f64>, c: &DVector<f64>, lambda: f64, beta: &mut DVector<f64>) {
    let active: Vec<usize> = (0..beta.len()).filter(|&j| beta[j] != 0.0).collect();
    if active.is_empty() {
        return;
    }
    let Some(chol) = Cholesky::new(sub_matrix(gram, &active)) else {
        return;
    };
    let rhs = DVector::from_fn(active.len(), |i, _| c[active[i]] - lambda * beta[active[i]].signum());
    let exact = chol.solve(&rhs);
    if exact.iter().zip(&active).any(|(b, &j)| b.signum() != beta[j].signum() || *b == 0.0) {
        return;
    }
    let mut candidate = DVector::zeros(beta.len());
    for (b, &j) in exact.iter().zip(&active) {
        candidate[j] = *b;
    }
    let r = c - gram * &candidate;
    let inactive_ok = (0..beta.len())
        .filter(|j| !active.contains(j))
        .all(|j| r[j].abs() <= lambda * (1.0 + 1e-9) + 1e-12);
    if inactive_ok {
        *beta = candidate;
    }
}

/// Smallest penalty with an empty active set.
pub fn lambda_max(stats: &ResponseStats) -> f64 {
    stats.c.amax()
}

/// `count` log-spaced penalties from `lambda_max` down to `lambda_max / ratio`.
pub fn default_lambda_grid(lambda_max: f64, count: usize, ratio: f64) -> Vec<f64> {
    if count == 1 {
        return vec![lambda_max];
    }
    let lo = (lambda_max / ratio).ln();
    let hi = lambda_max.ln();
    (0..count)
        .map(|i| match i {
            // exact endpoint: exp(ln x) can land just below lambda_max and admit a
            // vanishing coefficient
            0 => lambda_max,
            _ => (hi + (lo - hi) * i as f64 / (count - 1) as f64).exp(),
        })
        .collect()
}

/// Whitened lasso at fixed variance parameters.
pub fn lasso_lmm(dataset: &ClusteredDataset, params: &VarianceParams, lambda: f64) -> Result<LassoSolution> {
    let problem = FrozenProblem::new(dataset, params)?;
    let stats = problem.stats(dataset.y());
    lasso_gram(problem.gram(), &stats.c, stats.yy, lambda, None)
}

/// BIC-tuned lasso along a penalty grid; ties go to the larger penalty.
pub fn bic_tune(
    dataset: &ClusteredDataset,
    params: &VarianceParams,
    grid: &[f64],
) -> Result<(f64, LassoSolution)> {
    let problem = FrozenProblem::new(dataset, params)?;
    let stats = problem.stats(dataset.y());
    bic_tune_stats(&problem, &stats, grid)
}

pub fn bic_tune_stats(
    problem: &FrozenProblem,
    stats: &ResponseStats,
    grid: &[f64],
) -> Result<(f64, LassoSolution)> {
    if grid.is_empty() {
        return Err(Error::Validation("lambda grid is empty".into()));
    }
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]));
    let log_n = (problem.n() as f64).ln();
    let mut best: Option<(f64, LassoSolution)> = None;
    let mut warm: Option<DVector<f64>> = None;
    for &i in &order {
        let sol = lasso_gram(problem.gram(), &stats.c, stats.yy, grid[i], warm.as_ref())?;
        let bic = problem.deviance(problem.weighted_rss(stats, &sol.beta)) + sol.active_set.len() as f64 * log_n;
        warm = Some(sol.beta.clone());
        if best.as_ref().is_none_or(|(b, _)| bic < *b) {
            best = Some((bic, sol));
        }
    }
    let (_, sol) = best.expect("grid is non-empty");
    Ok((sol.lambda, sol))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Bic,
    Caic,
}

/// Candidate models for cAIC selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSet {
    /// Prefixes of a column ordering, including the empty model.
    Nested { order: Vec<usize> },
    /// Every subset of the p columns (p <= 15).
    AllSubsets,
    Explicit { models: Vec<Subset> },
}

impl CandidateSet {
    pub fn nested_identity(p: usize) -> Self {
        CandidateSet::Nested { order: (0..p).collect() }
    }

    /// Candidates sorted by size, then lexicographically (the cAIC tie-break order).
    pub fn models(&self, p: usize) -> Result<Vec<Subset>> {
        let mut models = match self {
            CandidateSet::Nested { order } => {
                let mut seen = order.clone();
                seen.sort_unstable();
                seen.dedup();
                if seen.len() != order.len() || seen.iter().any(|&c| c >= p) {
                    return Err(Error::Validation(format!("nested ordering {order:?} is not a set of distinct columns below p = {p}")));
                }
                (0..=order.len()).map(|k| Subset::new(order[..k].to_vec())).collect()
            }
            CandidateSet::AllSubsets => {
                if p > ALL_SUBSETS_MAX_P {
                    return Err(Error::Infeasible {
                        method: "all-subsets cAIC".into(),
                        p,
                        limit: ALL_SUBSETS_MAX_P,
                    });
                }
                (0..(1u64 << p)).map(|m| Subset::from_mask(m, p)).collect::<Vec<_>>()
            }
            CandidateSet::Explicit { models } => {
                if models.is_empty() {
                    return Err(Error::Validation("explicit candidate set is empty".into()));
                }
                if models.iter().any(|m| m.max_column().is_some_and(|c| c >= p)) {
                    return Err(Error::Validation(format!("candidate model exceeds p = {p}")));
                }
                models.clone()
            }
        };
        models.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
        models.dedup();
        Ok(models)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LassoTuning {
    /// BIC over `count` log-spaced penalties from the data's lambda_max down by `ratio`.
    Bic { count: usize, ratio: f64 },
    BicGrid { grid: Vec<f64> },
    Fixed { lambda: f64 },
}

impl Default for LassoTuning {
    fn default() -> Self {
        LassoTuning::Bic { count: 50, ratio: 1000.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Lasso(LassoTuning),
    Stepwise(Criterion),
    Caic(CandidateSet),
    Fixed(Subset),
}

/// How variance parameters are handled when a rule is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub enum ThetaPolicy {
    /// REML on the observed data once, then frozen for every later evaluation.
    FitOnce,
    Frozen(VarianceParams),
    /// Re-estimate by REML at every evaluation (per candidate for stepwise and cAIC).
    Refit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRule {
    pub kind: RuleKind,
    pub theta: ThetaPolicy,
}

/// Variance parameters used to freeze a rule: full-model REML when it is
/// estimable, otherwise the model without fixed effects.
pub fn working_params(dataset: &ClusteredDataset) -> Result<VarianceParams> {
    let h = dataset.q() * (dataset.q() + 1) / 2 + 1;
    if dataset.n() > dataset.p() + h + 1 {
        if let Ok(fit) = reml_fit(dataset, &Subset::full(dataset.p())) {
            return Ok(fit.params);
        }
    }
    Ok(reml_fit(dataset, &Subset::empty())?.params)
}

impl SelectionRule {
    pub fn new(kind: RuleKind) -> Self {
        Self {
            kind,
            theta: ThetaPolicy::FitOnce,
        }
    }

    pub fn lasso_bic() -> Self {
        Self::new(RuleKind::Lasso(LassoTuning::default()))
    }

    pub fn lasso_fixed(lambda: f64) -> Self {
        Self::new(RuleKind::Lasso(LassoTuning::Fixed { lambda }))
    }

    pub fn stepwise(criterion: Criterion) -> Self {
        Self::new(RuleKind::Stepwise(criterion))
    }

    pub fn caic(candidates: CandidateSet) -> Self {
        Self::new(RuleKind::Caic(candidates))
    }

    pub fn fixed(columns: Subset) -> Self {
        Self::new(RuleKind::Fixed(columns))
    }

    pub fn with_theta(mut self, theta: ThetaPolicy) -> Self {
        self.theta = theta;
        self
    }

    /// Check size guards before doing any work.
    pub fn check_feasible(&self, p: usize) -> Result<()> {
        match &self.kind {
            RuleKind::Stepwise(_) if p > STEPWISE_MAX_P => Err(Error::Infeasible {
                method: "stepwise".into(),
                p,
                limit: STEPWISE_MAX_P,
            }),
            RuleKind::Caic(c) => c.models(p).map(|_| ()),
            RuleKind::Fixed(m) if m.max_column().is_some_and(|c| c >= p) => {
                Err(Error::Validation(format!("fixed subset {m} exceeds p = {p}")))
            }
            _ => Ok(()),
        }
    }

    /// Resolve the variance parameters and cache response-independent work.
    pub fn prepare<'a>(&self, dataset: &'a ClusteredDataset) -> Result<PreparedRule<'a>> {
        self.check_feasible(dataset.p())?;
        let frozen = match (&self.kind, &self.theta) {
            (RuleKind::Fixed(_), _) | (_, ThetaPolicy::Refit) => None,
            (_, ThetaPolicy::Frozen(params)) => Some(FrozenProblem::new(dataset, params)?),
            (_, ThetaPolicy::FitOnce) => Some(FrozenProblem::new(dataset, &working_params(dataset)?)?),
        };
        let candidates = match &self.kind {
            RuleKind::Caic(c) => {
                let models = c.models(dataset.p())?;
                let traces = match &frozen {
                    Some(problem) => models.iter().map(|m| problem.hat_trace(m).ok()).collect(),
                    None => vec![None; models.len()],
                };
                Some((models, traces))
            }
            _ => None,
        };
        Ok(PreparedRule {
            kind: self.kind.clone(),
            dataset,
            frozen,
            candidates,
        })
    }

    pub fn select(&self, dataset: &ClusteredDataset) -> Result<Subset> {
        self.prepare(dataset)?.select_response(dataset.y())
    }
}

/// A rule bound to a dataset's design, ready for repeated evaluation.
pub struct PreparedRule<'a> {
    kind: RuleKind,
    dataset: &'a ClusteredDataset,
    frozen: Option<FrozenProblem>,
    candidates: Option<(Vec<Subset>, Vec<Option<f64>>)>,
}

impl<'a> PreparedRule<'a> {
    pub fn frozen(&self) -> Option<&FrozenProblem> {
        self.frozen.as_ref()
    }

    pub fn kind(&self) -> &RuleKind {
        &self.kind
    }

    pub fn select_response(&self, y: &DVector<f64>) -> Result<Subset> {
        if let RuleKind::Fixed(m) = &self.kind {
            return Ok(m.clone());
        }
        match &self.frozen {
            Some(problem) => self.select_stats(&problem.stats(y)),
            None => {
                let data = self.dataset.with_response(y.clone())?;
                match &self.kind {
                    RuleKind::Stepwise(c) => backward_stepwise(&data, *c),
                    RuleKind::Caic(c) => caic_select(&data, c),
                    RuleKind::Lasso(tuning) => {
                        let problem = FrozenProblem::new(&data, &working_params(&data)?)?;
                        let stats = problem.stats(data.y());
                        Ok(lasso_select(&problem, &stats, tuning)?.active_set)
                    }
                    RuleKind::Fixed(m) => Ok(m.clone()),
                }
            }
        }
    }

    /// Selection from sufficient statistics; requires frozen variance parameters.
    pub fn select_stats(&self, stats: &ResponseStats) -> Result<Subset> {
        let problem = self.frozen.as_ref().ok_or_else(|| {
            Error::Validation("selection from statistics needs frozen variance parameters".into())
        })?;
        match &self.kind {
            RuleKind::Fixed(m) => Ok(m.clone()),
            RuleKind::Lasso(tuning) => Ok(lasso_select(problem, stats, tuning)?.active_set),
            RuleKind::Stepwise(c) => stepwise_frozen(problem, stats, *c),
            RuleKind::Caic(_) => {
                let (models, traces) = self.candidates.as_ref().expect("candidates prepared");
                caic_frozen_select(problem, stats, models, traces)
            }
        }
    }

    /// Penalty the lasso rule would use for these statistics (None for other rules).
    pub fn lasso_lambda(&self, stats: &ResponseStats) -> Result<Option<f64>> {
        match (&self.kind, &self.frozen) {
            (RuleKind::Lasso(tuning), Some(problem)) => Ok(Some(lasso_select(problem, stats, tuning)?.lambda)),
            _ => Ok(None),
        }
    }
}

pub fn lasso_select(problem: &FrozenProblem, stats: &ResponseStats, tuning: &LassoTuning) -> Result<LassoSolution> {
    match tuning {
        LassoTuning::Fixed { lambda } => lasso_gram(problem.gram(), &stats.c, stats.yy, *lambda, None),
        LassoTuning::BicGrid { grid } => Ok(bic_tune_stats(problem, stats, grid)?.1),
        LassoTuning::Bic { count, ratio } => {
            let lmax = lambda_max(stats);
            if lmax == 0.0 {
                return lasso_gram(problem.gram(), &stats.c, stats.yy, 0.0, None);
            }
            let grid = default_lambda_grid(lmax, (*count).max(1), *ratio);
            Ok(bic_tune_stats(problem, stats, &grid)?.1)
        }
    }
}

/// Backward elimination at frozen parameters.
fn stepwise_frozen(problem: &FrozenProblem, stats: &ResponseStats, criterion: Criterion) -> Result<Subset> {
    let p = problem.p();
    if p > STEPWISE_MAX_P {
        return Err(Error::Infeasible {
            method: "stepwise".into(),
            p,
            limit: STEPWISE_MAX_P,
        });
    }
    let mut current = Subset::full(p);
    match criterion {
        Criterion::Bic => {
            let log_n = (problem.n() as f64).ln();
            while !current.is_empty() {
                let cols = current.as_slice();
                let chol = chol_checked(sub_matrix(problem.gram(), cols), "X_M^T Sigma^{-1} X_M")?;
                let beta = chol.solve(&sub_vector(&stats.c, cols));
                let inv_diag = chol.inverse().diagonal();
                // deleting column k raises the RSS by beta_k^2 / [G_M^{-1}]_kk and saves log n
                let mut best: Option<(usize, f64)> = None;
                for k in 0..cols.len() {
                    let change = beta[k] * beta[k] / inv_diag[k] - log_n;
                    if change < 0.0 && best.is_none_or(|(_, b)| change < b) {
                        best = Some((k, change));
                    }
                }
                match best {
                    Some((k, _)) => current = current.without(cols[k]),
                    None => break,
                }
            }
        }
        Criterion::Caic => {
            let mut value = problem.caic(stats, &current)?;
            while !current.is_empty() {
                let mut best: Option<(usize, f64)> = None;
                for col in current.iter() {
                    let v = problem.caic(stats, &current.without(col))?;
                    if v < value && best.is_none_or(|(_, b)| v < b) {
                        best = Some((col, v));
                    }
                }
                match best {
                    Some((col, v)) => {
                        current = current.without(col);
                        value = v;
                    }
                    None => break,
                }
            }
        }
    }
    Ok(current)
}

fn caic_frozen_select(
    problem: &FrozenProblem,
    stats: &ResponseStats,
    models: &[Subset],
    traces: &[Option<f64>],
) -> Result<Subset> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (m, trace)) in models.iter().zip(traces).enumerate() {
        let Some(trace) = trace else { continue };
        let Ok(v) = problem.caic_with_trace(stats, m, *trace) else { continue };
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| models[i].clone())
        .ok_or_else(|| Error::Validation("no cAIC candidate could be evaluated".into()))
}

/// Conditional AIC: `-2 conditional loglik + 2 * hat trace`.
pub fn caic(fit: &LmmFit, dataset: &ClusteredDataset) -> Result<f64> {
    Ok(-2.0 * fit.conditional_loglik + 2.0 * hat_trace(fit, dataset)?)
}

fn criterion_value(fit: &LmmFit, dataset: &ClusteredDataset, criterion: Criterion) -> Result<f64> {
    match criterion {
        Criterion::Bic => Ok(-2.0 * marginal_loglik(fit, dataset)? + fit.columns.len() as f64 * (dataset.n() as f64).ln()),
        Criterion::Caic => caic(fit, dataset),
    }
}

/// Backward elimination refitting REML for every single-column deletion.
pub fn backward_stepwise(dataset: &ClusteredDataset, criterion: Criterion) -> Result<Subset> {
    let p = dataset.p();
    if p > STEPWISE_MAX_P {
        return Err(Error::Infeasible {
            method: "stepwise".into(),
            p,
            limit: STEPWISE_MAX_P,
        });
    }
    let mut current = Subset::full(p);
    let mut value = criterion_value(&reml_fit(dataset, &current)?, dataset, criterion)?;
    while !current.is_empty() {
        let trials: Vec<(usize, Option<f64>)> = current
            .as_slice()
            .par_iter()
            .map(|&col| {
                let cand = current.without(col);
                let v = reml_fit(dataset, &cand).and_then(|f| criterion_value(&f, dataset, criterion)).ok();
                (col, v)
            })
            .collect();
        let mut best: Option<(usize, f64)> = None;
        for (col, v) in trials {
            if let Some(v) = v {
                if v < value && best.is_none_or(|(_, b)| v < b) {
                    best = Some((col, v));
                }
            }
        }
        match best {
            Some((col, v)) => {
                current = current.without(col);
                value = v;
            }
            None => break,
        }
    }
    Ok(current)
}

/// Scores of a cAIC selection over a candidate set.
#[derive(Debug, Clone)]
pub struct CaicSelection {
    pub selected: Subset,
    pub scores: Vec<(Subset, Option<f64>)>,
    pub skipped: usize,
}

/// cAIC minimization with REML refits per candidate.
pub fn caic_select(dataset: &ClusteredDataset, candidates: &CandidateSet) -> Result<Subset> {
    Ok(caic_select_detailed(dataset, candidates)?.selected)
}

pub fn caic_select_detailed(dataset: &ClusteredDataset, candidates: &CandidateSet) -> Result<CaicSelection> {
    let models = candidates.models(dataset.p())?;
    if models.len() == 1 {
        return Ok(CaicSelection {
            selected: models[0].clone(),
            scores: vec![(models[0].clone(), None)],
            skipped: 0,
        });
    }
    let scores: Vec<(Subset, Option<f64>)> = models
        .par_iter()
        .map(|m| {
            let v = reml_fit(dataset, m).and_then(|f| caic(&f, dataset)).ok();
            (m.clone(), v)
        })
        .collect();
    let skipped = scores.iter().filter(|s| s.1.is_none()).count();
    if skipped > 0 {
        log::warn!("cAIC selection skipped {skipped} of {} candidates that failed to fit", scores.len());
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, (_, v)) in scores.iter().enumerate() {
        if let Some(v) = v {
            if best.is_none_or(|(_, b)| *v < b) {
                best = Some((i, *v));
            }
        }
    }
    let (i, _) = best.ok_or_else(|| Error::Validation("every cAIC candidate failed to fit".into()))?;
    Ok(CaicSelection {
        selected: scores[i].0.clone(),
        scores,
        skipped,
    })
}
