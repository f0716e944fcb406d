//! Inference after selection: naive refits, cluster splitting, conditional Monte
//! Carlo on the selection event, uniformly valid lasso regions and cAIC conditioning.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClusteredDataset, Subset};
use crate::distributions::{chi_square_upper_quantile, NoncentralChiSquared};
use crate::error::{Error, Result};
use crate::lmm::{assemble_sigma, reml_fit, wald_inference, MarginalCovariance, VarianceParams};
use crate::report::{CoefficientEntry, Diagnostics, InferenceReport, Method, Target};
use crate::rng::{derive_seed, derived};
use crate::selection::{lasso_select, CandidateSet, FrozenProblem, LassoTuning, PreparedRule, RuleKind, SelectionRule};

pub const UVIL_MAX_P: usize = 25;
pub const DEFAULT_MIN_ACCEPTED: usize = 50;

fn empty_report(method: Method, target: Target, alpha: f64) -> InferenceReport {
    InferenceReport {
        method,
        target,
        alpha,
        selected: Subset::empty(),
        entries: Vec::new(),
        diagnostics: Diagnostics::default(),
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Validation(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

fn selected_lambda(prepared: &PreparedRule<'_>, y: &DVector<f64>) -> Option<f64> {
    let problem = prepared.frozen()?;
    prepared.lasso_lambda(&problem.stats(y)).ok().flatten()
}

/// Select, refit on the selected columns and report Wald inference as if the model were fixed.
pub fn naive_infer(dataset: &ClusteredDataset, rule: &SelectionRule, alpha: f64) -> Result<InferenceReport> {
    check_alpha(alpha)?;
    let prepared = rule.prepare(dataset)?;
    let selected = prepared.select_response(dataset.y())?;
    let lambda = selected_lambda(&prepared, dataset.y());
    if selected.is_empty() {
        let mut r = empty_report(Method::Naive, Target::Projection, alpha);
        r.diagnostics.lambda = lambda;
        return Ok(r);
    }
    let fit = reml_fit(dataset, &selected)?;
    let mut report = wald_inference(&fit, dataset, alpha)?;
    report.method = Method::Naive;
    report.diagnostics.lambda = lambda;
    Ok(report)
}

/// Random partition of cluster indices into (train, test), both sorted.
pub fn split_clusters(n_clusters: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_clusters < 4 {
        return Err(Error::Validation(format!("cluster splitting needs N >= 4, got {n_clusters}")));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Validation(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let n_train = ((fraction * n_clusters as f64).round() as usize).clamp(2, n_clusters - 2);
    let mut idx: Vec<usize> = (0..n_clusters).collect();
    idx.shuffle(&mut derived(seed, &[0x5911]));
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Select on a random half of the clusters, infer on the other half.
pub fn split_infer(
    dataset: &ClusteredDataset,
    rule: &SelectionRule,
    alpha: f64,
    fraction: f64,
    seed: u64,
) -> Result<InferenceReport> {
    check_alpha(alpha)?;
    let (train_idx, test_idx) = split_clusters(dataset.n_clusters(), fraction, seed)?;
    let train = dataset.subset_clusters(&train_idx)?;
    let test = dataset.subset_clusters(&test_idx)?;
    let prepared = rule.prepare(&train)?;
    let selected = prepared.select_response(train.y())?;
    let lambda = selected_lambda(&prepared, train.y());
    let mut report = if selected.is_empty() {
        empty_report(Method::Split, Target::Projection, alpha)
    } else {
        let fit = reml_fit(&test, &selected).map_err(|e| match e {
            Error::SingularDesign(msg) => Error::SingularDesign(format!(
                "selected columns {:?} are not estimable on the test clusters: {msg}",
                selected.iter().map(|c| dataset.column_names()[c].as_str()).collect::<Vec<_>>()
            )),
            other => other,
        })?;
        let mut r = wald_inference(&fit, &test, alpha)?;
        r.method = Method::Split;
        r
    };
    report.diagnostics.lambda = lambda;
    report.diagnostics.test_clusters = Some(test_idx);
    Ok(report)
}

/// Mean of the proposal for the test statistic in the conditional sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalCenter {
    /// `N(0, kappa)`.
    Zero,
    /// `N(t_obs, kappa)`, reweighted exactly to the same tilted family.
    #[default]
    Observed,
}

/// Covariance plugged into the conditional sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaChoice {
    /// REML without fixed effects.
    #[default]
    InterceptModel,
    SelectedModel,
}

/// Monte Carlo sampler for one coefficient of the selected model.
#[derive(Debug, Clone)]
pub struct ConditionalSampler {
    pub column: usize,
    /// `Sigma^{-1} X_M (X_M^T Sigma^{-1} X_M)^{-1} e_j`
    pub v: DVector<f64>,
    pub kappa: f64,
    pub t_obs: f64,
    /// `P_v^perp y`
    pub residual: DVector<f64>,
    pub center: f64,
    pub samples: Vec<f64>,
    pub accepted: Vec<bool>,
    pub min_accepted: usize,
}

pub fn selfmade_build(
    dataset: &ClusteredDataset,
    sigma: &MarginalCovariance,
    selected: &Subset,
    column: usize,
) -> Result<ConditionalSampler> {
    let pos = selected
        .position(column)
        .ok_or_else(|| Error::Validation(format!("column {column} is not in the selected model {selected}")))?;
    let xm = dataset.x_columns(selected);
    let sx = sigma.solve_mat(&xm);
    let k = xm.transpose() * &sx;
    let chol = k
        .cholesky()
        .ok_or_else(|| Error::SingularDesign(format!("X_M^T Sigma^{{-1}} X_M is singular for {selected}")))?;
    let mut e = DVector::zeros(selected.len());
    e[pos] = 1.0;
    let kinv_e = chol.solve(&e);
    let kappa = kinv_e[pos];
    if !(kappa > 0.0) {
        return Err(Error::DegenerateVariance { column });
    }
    let v = &sx * kinv_e;
    let t_obs = v.dot(dataset.y());
    let residual = dataset.y() - &v * (t_obs / v.norm_squared());
    Ok(ConditionalSampler {
        column,
        v,
        kappa,
        t_obs,
        residual,
        center: t_obs,
        samples: Vec::new(),
        accepted: Vec::new(),
        min_accepted: DEFAULT_MIN_ACCEPTED,
    })
}

impl ConditionalSampler {
    /// Largest deviation in `y = v t_obs / (v^T v) + residual` and in `v^T residual = 0`.
    pub fn decomposition_error(&self, y: &DVector<f64>) -> f64 {
        let recon = &self.v * (self.t_obs / self.v.norm_squared()) + &self.residual;
        (recon - y).amax().max(self.v.dot(&self.residual).abs())
    }

    /// Response with the test statistic set to `t`.
    pub fn response_at(&self, t: f64) -> DVector<f64> {
        &self.v * (t / self.v.norm_squared()) + &self.residual
    }

    pub fn accepted_count(&self) -> usize {
        self.accepted.iter().filter(|&&a| a).count()
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            self.accepted_count() as f64 / self.samples.len() as f64
        }
    }

    fn accepted_samples(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().zip(&self.accepted).filter(|(_, &a)| a).map(|(&t, _)| t)
    }

    fn require_accepted(&self) -> Result<()> {
        let accepted = self.accepted_count();
        if accepted < self.min_accepted.max(1) {
            return Err(Error::InsufficientAcceptance {
                accepted,
                total: self.samples.len(),
                required: self.min_accepted.max(1),
            });
        }
        Ok(())
    }

    /// Tilted tail probability `f(rho)` without the acceptance-count check.
    fn tail(&self, rho: f64) -> f64 {
        let shift = (rho - self.center) / self.kappa;
        let mut max_all = f64::NEG_INFINITY;
        for t in self.accepted_samples() {
            max_all = max_all.max(t * shift);
        }
        if !max_all.is_finite() {
            return 0.0;
        }
        let (mut num, mut den) = (0.0, 0.0);
        for t in self.accepted_samples() {
            let w = (t * shift - max_all).exp();
            den += w;
            if t > self.t_obs {
                num += w;
            }
        }
        if den > 0.0 {
            (num / den).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }
}

/// Draw `samples` test statistics and flag those whose response reproduces `selected`.
pub fn selfmade_sample(
    sampler: &mut ConditionalSampler,
    rule: &PreparedRule<'_>,
    selected: &Subset,
    samples: usize,
    center: ProposalCenter,
    seed: u64,
) -> Result<()> {
    if samples == 0 {
        return Err(Error::Validation("sample budget B must be at least 1".into()));
    }
    sampler.center = match center {
        ProposalCenter::Zero => 0.0,
        ProposalCenter::Observed => sampler.t_obs,
    };
    let sd = sampler.kappa.sqrt();
    let mut rng = derived(seed, &[sampler.column as u64]);
    let draws: Vec<f64> = (0..samples)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sampler.center + sd * z
        })
        .collect();
    let direction = &sampler.v / sampler.v.norm_squared();
    let affine = rule.frozen().map(|p| p.affine_stats(&direction, &sampler.residual));
    let accepted: Vec<bool> = draws
        .par_iter()
        .map(|&t| {
            let m = match &affine {
                Some(stats) => rule.select_stats(&stats.at(t)),
                None => rule.select_response(&sampler.response_at(t)),
            };
            // a sample whose selection cannot be evaluated is outside the event
            m.map(|m| &m == selected).unwrap_or(false)
        })
        .collect();
    sampler.samples = draws;
    sampler.accepted = accepted;
    let accepted_count = sampler.accepted_count();
    if accepted_count == 0 {
        return Err(Error::InsufficientAcceptance {
            accepted: 0,
            total: samples,
            required: sampler.min_accepted,
        });
    }
    Ok(())
}

/// One-sided `f(rho)`: tilted probability that the statistic exceeds `t_obs` within the event.
pub fn selfmade_pvalue(sampler: &ConditionalSampler, rho: f64) -> Result<f64> {
    sampler.require_accepted()?;
    Ok(sampler.tail(rho))
}

/// Two-sided p-value `2 min(f(0), 1 - f(0))`.
pub fn selfmade_two_sided(sampler: &ConditionalSampler) -> Result<f64> {
    let f0 = selfmade_pvalue(sampler, 0.0)?;
    Ok((2.0 * f0.min(1.0 - f0)).min(1.0))
}

fn invert_tail(sampler: &ConditionalSampler, target: f64) -> Result<f64> {
    let sd = sampler.kappa.sqrt();
    let (lo, hi) = (sampler.t_obs - 20.0 * sd, sampler.t_obs + 20.0 * sd);
    let tol = 1e-6 * sd;
    let (f_lo, f_hi) = (sampler.tail(lo), sampler.tail(hi));
    if f_lo > target {
        return Err(Error::UnboundedInterval { target, attained: f_lo });
    }
    if f_hi < target {
        return Err(Error::UnboundedInterval { target, attained: f_hi });
    }
    let (mut a, mut b) = (lo, hi);
    while b - a > tol {
        let mid = 0.5 * (a + b);
        if sampler.tail(mid) < target {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(0.5 * (a + b))
}

/// Invert `f` by bisection: `f(L) = alpha/2`, `f(U) = 1 - alpha/2`.
pub fn selfmade_ci(sampler: &ConditionalSampler, alpha: f64) -> Result<(f64, f64)> {
    check_alpha(alpha)?;
    sampler.require_accepted()?;
    let lower = invert_tail(sampler, alpha / 2.0)?;
    let upper = invert_tail(sampler, 1.0 - alpha / 2.0)?;
    Ok((lower.min(upper), upper.max(lower)))
}

/// As [`selfmade_ci`], but a bound that never crosses its target inside the bracket is
/// reported as infinite on that side.
pub fn selfmade_ci_open(sampler: &ConditionalSampler, alpha: f64) -> Result<(f64, f64)> {
    check_alpha(alpha)?;
    sampler.require_accepted()?;
    let bound = |target: f64| match invert_tail(sampler, target) {
        Err(Error::UnboundedInterval { attained, .. }) if attained > target => Ok(f64::NEG_INFINITY),
        Err(Error::UnboundedInterval { .. }) => Ok(f64::INFINITY),
        other => other,
    };
    let lower = bound(alpha / 2.0)?;
    let upper = bound(1.0 - alpha / 2.0)?;
    Ok((lower.min(upper), upper.max(lower)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfmadeOptions {
    pub samples: usize,
    pub min_accepted: usize,
    pub sigma: SigmaChoice,
    pub center: ProposalCenter,
    pub seed: u64,
    /// Report `2 min(f(0), 1 - f(0))` instead of the one-sided `f(0)`.
    pub two_sided: bool,
}

impl Default for SelfmadeOptions {
    fn default() -> Self {
        Self {
            samples: 500,
            min_accepted: DEFAULT_MIN_ACCEPTED,
            sigma: SigmaChoice::default(),
            center: ProposalCenter::default(),
            seed: 0,
            two_sided: true,
        }
    }
}

/// Conditional Monte Carlo inference for every coefficient of the selected model.
pub fn selfmade_infer(
    dataset: &ClusteredDataset,
    rule: &SelectionRule,
    alpha: f64,
    options: &SelfmadeOptions,
) -> Result<InferenceReport> {
    conditional_infer(dataset, rule, alpha, options, Method::Selfmade)
}

/// cAIC selection followed by conditional Monte Carlo with cAIC re-selection as the event.
pub fn postcaic_infer(
    dataset: &ClusteredDataset,
    candidates: &CandidateSet,
    alpha: f64,
    options: &SelfmadeOptions,
) -> Result<InferenceReport> {
    conditional_infer(dataset, &SelectionRule::caic(candidates.clone()), alpha, options, Method::Postcaic)
}

fn conditional_infer(
    dataset: &ClusteredDataset,
    rule: &SelectionRule,
    alpha: f64,
    options: &SelfmadeOptions,
    method: Method,
) -> Result<InferenceReport> {
    check_alpha(alpha)?;
    let prepared = rule.prepare(dataset)?;
    let selected = prepared.select_response(dataset.y())?;
    let lambda = selected_lambda(&prepared, dataset.y());
    let mut report = empty_report(method, Target::Projection, alpha);
    report.diagnostics.lambda = lambda;
    if selected.is_empty() {
        return Ok(report);
    }
    let plug_in: VarianceParams = match options.sigma {
        SigmaChoice::InterceptModel => reml_fit(dataset, &Subset::empty())?.params,
        SigmaChoice::SelectedModel => reml_fit(dataset, &selected)?.params,
    };
    let sigma = assemble_sigma(dataset, &plug_in)?;
    report.selected = selected.clone();
    let (mut accepted, mut sampled) = (0, 0);
    for column in selected.iter() {
        let name = dataset.column_names()[column].clone();
        let mut sampler = match selfmade_build(dataset, &sigma, &selected, column) {
            Ok(s) => s,
            Err(e) => {
                report.entries.push(CoefficientEntry::failed(column, name, f64::NAN));
                report.diagnostics.failures.push(format!("{column}: {e}"));
                continue;
            }
        };
        sampler.min_accepted = options.min_accepted;
        let seed = derive_seed(options.seed, &[method as u64]);
        let outcome = selfmade_sample(&mut sampler, &prepared, &selected, options.samples, options.center, seed)
            .and_then(|_| {
                let p = if options.two_sided {
                    selfmade_two_sided(&sampler)?
                } else {
                    selfmade_pvalue(&sampler, 0.0)?
                };
                let (lo, hi) = selfmade_ci_open(&sampler, alpha)?;
                Ok((p, lo, hi))
            });
        accepted += sampler.accepted_count();
        sampled += sampler.samples.len();
        match outcome {
            Ok((p_value, ci_lower, ci_upper)) => report.entries.push(CoefficientEntry {
                column,
                name,
                estimate: sampler.t_obs,
                p_value,
                ci_lower,
                ci_upper,
                selected: true,
                failed: false,
                acceptance_rate: Some(sampler.acceptance_rate()),
            }),
            Err(e) => {
                let mut entry = CoefficientEntry::failed(column, name, sampler.t_obs);
                entry.acceptance_rate = Some(sampler.acceptance_rate());
                report.entries.push(entry);
                report.diagnostics.failures.push(format!("{column}: {e}"));
            }
        }
    }
    report.diagnostics.accepted = Some(accepted);
    report.diagnostics.sampled = Some(sampled);
    Ok(report)
}

/// `max_d d^T Lambda C^{-1} Lambda d` over sign vectors `d`, by Gray-code enumeration.
pub fn uvil_delta(c_hat: &DMatrix<f64>, lambda_diag: &DVector<f64>) -> Result<f64> {
    let p = c_hat.nrows();
    if p > UVIL_MAX_P {
        return Err(Error::Infeasible {
            method: "uvil".into(),
            p,
            limit: UVIL_MAX_P,
        });
    }
    if p == 0 {
        return Ok(0.0);
    }
    let c_inv = c_hat
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularDesign("C_hat is not positive definite".into()))?
        .inverse();
    let a = DMatrix::from_fn(p, p, |i, j| lambda_diag[i] * c_inv[(i, j)] * lambda_diag[j]);
    let quad = |d: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..p {
            for j in 0..p {
                s += d[i] * a[(i, j)] * d[j];
            }
        }
        s
    };
    // d_0 = +1 by the symmetry d -> -d
    let mut d = vec![1.0; p];
    let mut ad: Vec<f64> = (0..p).map(|i| a.row(i).sum()).collect();
    let mut value = quad(&d);
    let mut best = value;
    let mut best_d = d.clone();
    let steps: u64 = 1u64 << (p - 1);
    for g in 1..steps {
        // bit that changes between Gray codes g-1 and g
        let k = g.trailing_zeros() as usize + 1;
        value += -4.0 * d[k] * ad[k] + 4.0 * a[(k, k)];
        let dk = d[k];
        for i in 0..p {
            ad[i] -= 2.0 * dk * a[(i, k)];
        }
        d[k] = -dk;
        if value > best {
            best = value;
            best_d.copy_from_slice(&d);
        }
    }
    Ok(quad(&best_d).max(0.0))
}

/// Joint confidence ellipsoid around the lasso estimate.
#[derive(Debug, Clone)]
pub struct UvilRegion {
    pub beta_l: DVector<f64>,
    /// `X^T Sigma^{-1} X / n`
    pub c_hat: DMatrix<f64>,
    /// Diagonal of `n^{-1/2} diag(lambda_j)`.
    pub lambda_diag: DVector<f64>,
    pub lambda: f64,
    pub delta: f64,
    pub tau: f64,
    pub alpha: f64,
    pub n: usize,
    pub column_names: Vec<String>,
}

impl UvilRegion {
    /// `n ||C^{1/2} (beta_L - beta)||^2 <= tau`.
    pub fn contains(&self, beta: &DVector<f64>) -> bool {
        let d = &self.beta_l - beta;
        self.n as f64 * d.dot(&(&self.c_hat * &d)) <= self.tau
    }
}

/// Penalty for the region: a fixed value or the BIC choice at the full-model REML estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UvilLambda {
    Bic,
    Fixed(f64),
}

pub fn uvil_region(dataset: &ClusteredDataset, lambda: UvilLambda, alpha: f64) -> Result<UvilRegion> {
    check_alpha(alpha)?;
    let (n, p) = (dataset.n(), dataset.p());
    if p > UVIL_MAX_P {
        return Err(Error::Infeasible {
            method: "uvil".into(),
            p,
            limit: UVIL_MAX_P,
        });
    }
    if p >= n {
        return Err(Error::Validation(format!("uvil needs p < n, got p = {p}, n = {n}")));
    }
    let fit = reml_fit(dataset, &Subset::full(p))?;
    let problem = FrozenProblem::new(dataset, &fit.params)?;
    let stats = problem.stats(dataset.y());
    let tuning = match lambda {
        UvilLambda::Bic => LassoTuning::default(),
        UvilLambda::Fixed(l) => LassoTuning::Fixed { lambda: l },
    };
    let sol = lasso_select(&problem, &stats, &tuning)?;
    let c_hat = problem.gram() / n as f64;
    let lambda_diag = DVector::from_element(p, sol.lambda / (n as f64).sqrt());
    let delta = uvil_delta(&c_hat, &lambda_diag)?;
    let tau = chi_square_upper_quantile(p as f64, delta, alpha)?;
    Ok(UvilRegion {
        beta_l: sol.beta,
        c_hat,
        lambda_diag,
        lambda: sol.lambda,
        delta,
        tau,
        alpha,
        n,
        column_names: dataset.column_names().to_vec(),
    })
}

/// Per-coefficient intervals `beta_Lj +- sqrt(chi2_{1,1-alpha}(delta) C^{-1}_jj / n)` for all columns.
pub fn uvil_infer(region: &UvilRegion, alpha: f64) -> Result<InferenceReport> {
    check_alpha(alpha)?;
    let p = region.beta_l.len();
    let c_inv = region
        .c_hat
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularDesign("C_hat is not positive definite".into()))?
        .inverse();
    let q1 = chi_square_upper_quantile(1.0, region.delta, alpha)?;
    let dist = NoncentralChiSquared::new(1.0, region.delta)?;
    let mut entries = Vec::with_capacity(p);
    for j in 0..p {
        let var = c_inv[(j, j)] / region.n as f64;
        if !(var > 0.0) {
            return Err(Error::DegenerateVariance { column: j });
        }
        let est = region.beta_l[j];
        let half = (q1 * var).sqrt();
        entries.push(CoefficientEntry {
            column: j,
            name: region.column_names[j].clone(),
            estimate: est,
            p_value: dist.sf(est * est / var),
            ci_lower: est - half,
            ci_upper: est + half,
            selected: est != 0.0,
            failed: false,
            acceptance_rate: None,
        });
    }
    let selected = (0..p).filter(|&j| region.beta_l[j] != 0.0).collect();
    Ok(InferenceReport {
        method: Method::Uvil,
        target: Target::Population,
        alpha,
        selected,
        entries,
        diagnostics: Diagnostics {
            lambda: Some(region.lambda),
            delta: Some(region.delta),
            tau: Some(region.tau),
            ..Diagnostics::default()
        },
    })
}

/// Which rule a method uses when none is given.
pub fn default_rule(method: Method) -> SelectionRule {
    match method {
        Method::Postcaic => SelectionRule::caic(CandidateSet::AllSubsets),
        _ => SelectionRule::new(RuleKind::Lasso(LassoTuning::default())),
    }
}
