//! Simulation harness: scenario generation, replication engine, sweeps, timing
//! and the noise-augmentation study.

use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClusteredDataset, Subset};
use crate::error::{Error, Result};
use crate::inference::{
    naive_infer, postcaic_infer, selfmade_infer, split_infer, uvil_infer, uvil_region, ProposalCenter,
    SelfmadeOptions, SigmaChoice, UvilLambda,
};
use crate::lmm::{assemble_sigma, projection_target, reml_fit, wald_inference, VarianceParams};
use crate::multiplicity::{adjust, score_replication, Correction, MetricSummary, ReplicationTally};
use crate::report::{InferenceReport, Method, Target};
use crate::rng::{derive_seed, derived, seeded};
use crate::selection::{working_params, CandidateSet, Criterion, FrozenProblem, LassoTuning, RuleKind, SelectionRule};

/// Selection rule attached to a benchmark method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleChoice {
    Lasso,
    Step,
    StepCaic,
    Caic,
    Full,
}

impl RuleChoice {
    fn as_str(self) -> &'static str {
        match self {
            RuleChoice::Lasso => "lasso",
            RuleChoice::Step => "step",
            RuleChoice::StepCaic => "step-caic",
            RuleChoice::Caic => "caic",
            RuleChoice::Full => "full",
        }
    }
}

/// A benchmark method: inference procedure plus selection rule, written `method[-rule]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MethodSpec {
    pub method: Method,
    pub rule: RuleChoice,
}

impl MethodSpec {
    pub fn new(method: Method, rule: RuleChoice) -> Self {
        Self { method, rule }
    }

    pub fn label(&self) -> String {
        match (self.method, self.rule) {
            (Method::Uvil, _) | (Method::Postcaic, _) | (Method::Wald, RuleChoice::Full) => self.method.to_string(),
            (m, r) => format!("{m}-{}", r.as_str()),
        }
    }

    /// Methods of the main comparison table.
    pub fn table_defaults() -> Vec<MethodSpec> {
        vec![
            MethodSpec::new(Method::Naive, RuleChoice::Lasso),
            MethodSpec::new(Method::Split, RuleChoice::Lasso),
            MethodSpec::new(Method::Selfmade, RuleChoice::Lasso),
            MethodSpec::new(Method::Selfmade, RuleChoice::Step),
            MethodSpec::new(Method::Uvil, RuleChoice::Lasso),
            MethodSpec::new(Method::Postcaic, RuleChoice::Caic),
        ]
    }
}

impl FromStr for MethodSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (head, tail) = match s.split_once('-') {
            Some((h, t)) => (h, Some(t)),
            None => (s.as_str(), None),
        };
        let method: Method = head.parse()?;
        let rule = match (method, tail) {
            (Method::Uvil, None | Some("lasso")) => RuleChoice::Lasso,
            (Method::Postcaic, None | Some("caic")) => RuleChoice::Caic,
            (Method::Wald, None | Some("full")) => RuleChoice::Full,
            (Method::Uvil | Method::Postcaic | Method::Wald, Some(t)) => {
                return Err(Error::Validation(format!("{method} does not take a rule, got '{t}'")))
            }
            (_, None | Some("lasso")) => RuleChoice::Lasso,
            (_, Some("step")) => RuleChoice::Step,
            (_, Some("step-caic")) => RuleChoice::StepCaic,
            (_, Some("caic")) => RuleChoice::Caic,
            (_, Some("full")) => RuleChoice::Full,
            (_, Some(t)) => return Err(Error::Validation(format!("unknown rule '{t}'"))),
        };
        Ok(MethodSpec { method, rule })
    }
}

impl TryFrom<String> for MethodSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MethodSpec> for String {
    fn from(m: MethodSpec) -> String {
        m.label()
    }
}

impl std::fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

/// Simulation scenario; every field has a default matching the main comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Number of clusters N.
    pub clusters: usize,
    /// Observations per cluster n_i (balanced).
    pub cluster_size: usize,
    pub p: usize,
    /// Number of nonzero coefficients, placed in the first `s` columns.
    pub s: usize,
    pub snr: f64,
    pub x_offdiag: f64,
    /// Random-intercept variance as a multiple of the residual variance.
    pub sigma_b_ratio: f64,
    /// Absolute random-intercept variance; overrides the ratio when set.
    pub sigma_b2: Option<f64>,
    /// Absolute residual variance; required when `s = 0`, overrides the SNR otherwise.
    pub sigma_eps2: Option<f64>,
    pub replications: usize,
    pub base_seed: u64,
    pub methods: Vec<MethodSpec>,
    pub correction: Correction,
    pub alpha: f64,
    /// Monte Carlo budget B for the conditional methods.
    pub samples: usize,
    pub min_accepted: usize,
    pub split_fraction: f64,
    pub sigma_choice: SigmaChoice,
    /// Plug-in covariance for postcaic; the selected model's fit by default.
    pub postcaic_sigma_choice: SigmaChoice,
    pub proposal: ProposalCenter,
    pub candidates: CandidateSet,
    pub stepwise_criterion: Criterion,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "default".into(),
            clusters: 40,
            cluster_size: 5,
            p: 6,
            s: 3,
            snr: 2.0,
            x_offdiag: 0.3,
            sigma_b_ratio: 1.0,
            sigma_b2: None,
            sigma_eps2: None,
            replications: 200,
            base_seed: 1,
            methods: MethodSpec::table_defaults(),
            correction: Correction::Holm,
            alpha: 0.05,
            samples: 500,
            min_accepted: 50,
            split_fraction: 0.5,
            sigma_choice: SigmaChoice::InterceptModel,
            postcaic_sigma_choice: SigmaChoice::SelectedModel,
            proposal: ProposalCenter::Observed,
            candidates: CandidateSet::AllSubsets,
            stepwise_criterion: Criterion::Bic,
        }
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.clusters < 2 || self.cluster_size < 1 {
            return fail(format!("need at least 2 clusters of size >= 1, got {} x {}", self.clusters, self.cluster_size));
        }
        if self.p == 0 || self.s > self.p {
            return fail(format!("need 1 <= p and s <= p, got p = {}, s = {}", self.p, self.s));
        }
        if !(self.snr > 0.0) {
            return fail(format!("snr must be positive, got {}", self.snr));
        }
        let rho = self.x_offdiag;
        if !(rho.abs() < 1.0) || (self.p > 1 && rho <= -1.0 / (self.p as f64 - 1.0)) {
            return fail(format!("x_offdiag = {rho} does not give a positive definite covariate covariance"));
        }
        if self.s == 0 && self.sigma_eps2.is_none() {
            return fail("s = 0 leaves the residual variance undefined by the SNR; set sigma_eps2".into());
        }
        if self.sigma_eps2.is_some_and(|v| !(v > 0.0)) || self.sigma_b2.is_some_and(|v| v < 0.0) || self.sigma_b_ratio < 0.0 {
            return fail("variances must be positive (random intercept nonnegative)".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return fail(format!("split_fraction must lie in (0, 1), got {}", self.split_fraction));
        }
        if self.samples == 0 {
            return fail("samples must be at least 1".into());
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.clusters * self.cluster_size
    }

    pub fn covariate_covariance(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.p, self.p, |i, j| if i == j { 1.0 } else { self.x_offdiag })
    }
}

/// Generated data together with the parameters that produced it.
#[derive(Debug, Clone)]
pub struct GeneratedTruth {
    pub beta0: DVector<f64>,
    pub signal_mask: Vec<bool>,
    pub residual_variance: f64,
    pub intercept_variance: f64,
    pub dataset: ClusteredDataset,
}

impl GeneratedTruth {
    pub fn params(&self) -> Result<VarianceParams> {
        VarianceParams::random_intercept(self.intercept_variance, self.residual_variance)
    }
}

/// Residual variance from `Var(x^T beta0) / sigma_eps^2 = snr` under the covariate covariance.
pub fn residual_variance_for(beta0: &DVector<f64>, covariance: &DMatrix<f64>, snr: f64) -> f64 {
    beta0.dot(&(covariance * beta0)) / snr
}

pub fn generate_dataset(scenario: &Scenario, seed: u64) -> Result<GeneratedTruth> {
    scenario.validate()?;
    let mut rng = seeded(seed);
    let (p, n) = (scenario.p, scenario.n());
    let choices = [-2.0, -1.0, 1.0, 2.0];
    let beta0 = DVector::from_fn(p, |j, _| if j < scenario.s { choices[rng.random_range(0..4)] } else { 0.0 });
    let signal_mask: Vec<bool> = (0..p).map(|j| j < scenario.s).collect();
    let cov = scenario.covariate_covariance();
    let residual_variance = match scenario.sigma_eps2 {
        Some(v) => v,
        None => residual_variance_for(&beta0, &cov, scenario.snr),
    };
    let intercept_variance = scenario.sigma_b2.unwrap_or(scenario.sigma_b_ratio * residual_variance);
    let l = cov
        .cholesky()
        .ok_or_else(|| Error::Validation("covariate covariance is not positive definite".into()))?
        .l();
    let z = DMatrix::from_fn(n, p, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
    let x = z * l.transpose();
    let mut y: DVector<f64> = &x * &beta0;
    let (sb, se) = (intercept_variance.sqrt(), residual_variance.sqrt());
    for c in 0..scenario.clusters {
        let b: f64 = StandardNormal.sample(&mut rng);
        for r in 0..scenario.cluster_size {
            let e: f64 = StandardNormal.sample(&mut rng);
            y[c * scenario.cluster_size + r] += sb * b + se * e;
        }
    }
    let names = (0..p).map(|j| format!("x{}", j + 1)).collect();
    let dataset = ClusteredDataset::random_intercept(vec![scenario.cluster_size; scenario.clusters], y, x, names)?;
    Ok(GeneratedTruth {
        beta0,
        signal_mask,
        residual_variance,
        intercept_variance,
        dataset,
    })
}

/// Knobs shared by every method run.
#[derive(Debug, Clone)]
pub struct RunSettings {
    pub alpha: f64,
    pub selfmade: SelfmadeOptions,
    pub postcaic_sigma: SigmaChoice,
    pub split_fraction: f64,
    pub candidates: CandidateSet,
    pub stepwise_criterion: Criterion,
    /// Fixed lasso penalty replacing BIC tuning.
    pub lambda: Option<f64>,
}

impl RunSettings {
    pub fn from_scenario(s: &Scenario) -> Self {
        Self {
            alpha: s.alpha,
            selfmade: SelfmadeOptions {
                samples: s.samples,
                min_accepted: s.min_accepted,
                sigma: s.sigma_choice,
                center: s.proposal,
                seed: s.base_seed,
                two_sided: true,
            },
            postcaic_sigma: s.postcaic_sigma_choice,
            split_fraction: s.split_fraction,
            candidates: s.candidates.clone(),
            stepwise_criterion: s.stepwise_criterion,
            lambda: None,
        }
    }

    pub fn rule(&self, choice: RuleChoice, p: usize) -> SelectionRule {
        match choice {
            RuleChoice::Lasso => match self.lambda {
                Some(lambda) => SelectionRule::new(RuleKind::Lasso(LassoTuning::Fixed { lambda })),
                None => SelectionRule::lasso_bic(),
            },
            RuleChoice::Step => SelectionRule::stepwise(self.stepwise_criterion),
            RuleChoice::StepCaic => SelectionRule::stepwise(Criterion::Caic),
            RuleChoice::Caic => SelectionRule::caic(self.candidates.clone()),
            RuleChoice::Full => SelectionRule::fixed(Subset::full(p)),
        }
    }
}

/// Run one method on one dataset. `seed` drives splitting and Monte Carlo draws.
pub fn run_method(spec: MethodSpec, dataset: &ClusteredDataset, settings: &RunSettings, seed: u64) -> Result<InferenceReport> {
    let rule = settings.rule(spec.rule, dataset.p());
    let alpha = settings.alpha;
    match spec.method {
        Method::Wald => wald_inference(&reml_fit(dataset, &Subset::full(dataset.p()))?, dataset, alpha),
        Method::Naive => naive_infer(dataset, &rule, alpha),
        Method::Split => split_infer(dataset, &rule, alpha, settings.split_fraction, seed),
        Method::Selfmade => {
            let opts = SelfmadeOptions { seed, ..settings.selfmade.clone() };
            selfmade_infer(dataset, &rule, alpha, &opts)
        }
        Method::Postcaic => {
            let opts = SelfmadeOptions {
                seed,
                sigma: settings.postcaic_sigma,
                ..settings.selfmade.clone()
            };
            postcaic_infer(dataset, &settings.candidates, alpha, &opts)
        }
        Method::Uvil => {
            let lambda = settings.lambda.map(UvilLambda::Fixed).unwrap_or(UvilLambda::Bic);
            uvil_infer(&uvil_region(dataset, lambda, alpha)?, alpha)
        }
    }
}

/// True values of the quantities each report entry is meant to cover.
pub fn coverage_targets(report: &InferenceReport, truth: &GeneratedTruth) -> Result<Vec<f64>> {
    match report.target {
        Target::Population => Ok(report.entries.iter().map(|e| truth.beta0[e.column]).collect()),
        Target::Projection => {
            if report.entries.is_empty() {
                return Ok(Vec::new());
            }
            let data = match &report.diagnostics.test_clusters {
                Some(test) => truth.dataset.subset_clusters(test)?,
                None => truth.dataset.clone(),
            };
            let columns: Subset = report.entries.iter().map(|e| e.column).collect();
            let sigma = assemble_sigma(&data, &truth.params()?)?;
            let mean = data.x() * &truth.beta0;
            let beta_m = projection_target(&data, &sigma, &columns, &mean)?;
            report
                .entries
                .iter()
                .map(|e| {
                    columns
                        .position(e.column)
                        .map(|k| beta_m[k])
                        .ok_or_else(|| Error::Validation(format!("duplicate column {} in report", e.column)))
                })
                .collect()
        }
    }
}

/// Outcome of one method on one replication.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub label: String,
    pub tally: Option<ReplicationTally>,
    pub infeasible: Option<String>,
    pub error: Option<String>,
    pub selected: Option<Subset>,
    pub lambda: Option<f64>,
    pub seconds: f64,
}

fn method_seed(base: u64, rep: usize, k: usize) -> u64 {
    derive_seed(base, &[rep as u64, 1 + k as u64])
}

fn run_replication(scenario: &Scenario, settings: &RunSettings, rep: usize) -> Result<Vec<MethodOutcome>> {
    let truth = generate_dataset(scenario, derive_seed(scenario.base_seed, &[rep as u64]))?;
    let outcomes = scenario
        .methods
        .iter()
        .enumerate()
        .map(|(k, &spec)| {
            let start = Instant::now();
            let result = run_method(spec, &truth.dataset, settings, method_seed(scenario.base_seed, rep, k));
            let seconds = start.elapsed().as_secs_f64();
            let mut out = MethodOutcome {
                label: spec.label(),
                tally: None,
                infeasible: None,
                error: None,
                selected: None,
                lambda: None,
                seconds,
            };
            match result.and_then(|report| {
                let targets = coverage_targets(&report, &truth)?;
                let tally = score_replication(&report, &truth.signal_mask, &targets, scenario.correction, scenario.alpha)?;
                Ok((report, tally))
            }) {
                Ok((report, tally)) => {
                    out.lambda = report.diagnostics.lambda;
                    out.selected = Some(report.selected.clone());
                    out.tally = Some(tally);
                }
                Err(e @ Error::Infeasible { .. }) => out.infeasible = Some(e.to_string()),
                Err(e) => out.error = Some(e.to_string()),
            }
            out
        })
        .collect();
    Ok(outcomes)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodResult {
    pub label: String,
    pub summary: Option<MetricSummary>,
    pub infeasible: Option<String>,
    pub errors: usize,
    pub mean_lambda: Option<f64>,
    pub mean_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: String,
    pub methods: Vec<MethodResult>,
    /// `raw[r][k]`: replication r, method k.
    pub raw: Vec<Vec<MethodOutcome>>,
}

fn sorted_mean(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(v.iter().sum::<f64>() / v.len() as f64)
}

fn summarize(labels: &[String], raw: &[Vec<MethodOutcome>]) -> Vec<MethodResult> {
    labels
        .iter()
        .enumerate()
        .map(|(k, label)| {
            let column: Vec<&MethodOutcome> = raw.iter().map(|r| &r[k]).collect();
            let tallies: Vec<ReplicationTally> = column.iter().filter_map(|o| o.tally.clone()).collect();
            let infeasible = column.iter().find_map(|o| o.infeasible.clone());
            MethodResult {
                label: label.clone(),
                summary: (!tallies.is_empty()).then(|| MetricSummary::aggregate(&tallies)),
                infeasible,
                errors: column.iter().filter(|o| o.error.is_some()).count(),
                mean_lambda: sorted_mean(column.iter().filter_map(|o| o.lambda).collect()),
                mean_seconds: sorted_mean(column.iter().map(|o| o.seconds).collect()).unwrap_or(0.0),
            }
        })
        .collect()
}

pub fn run_scenario(scenario: &Scenario) -> Result<ScenarioResult> {
    run_scenario_with(scenario, &RunSettings::from_scenario(scenario))
}

pub fn run_scenario_with(scenario: &Scenario, settings: &RunSettings) -> Result<ScenarioResult> {
    scenario.validate()?;
    let raw = (0..scenario.replications)
        .into_par_iter()
        .map(|rep| run_replication(scenario, settings, rep))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<String> = scenario.methods.iter().map(|m| m.label()).collect();
    Ok(ScenarioResult {
        scenario: scenario.name.clone(),
        methods: summarize(&labels, &raw),
        raw,
    })
}

/// Run the same scenario for several random-intercept variances.
pub fn sigma_sweep(scenario: &Scenario, intercept_variances: &[f64]) -> Result<Vec<(f64, ScenarioResult)>> {
    intercept_variances
        .iter()
        .map(|&v| {
            let s = Scenario {
                sigma_b2: Some(v),
                name: format!("{}-sigma_b2={v}", scenario.name),
                ..scenario.clone()
            };
            Ok((v, run_scenario(&s)?))
        })
        .collect()
}

/// Run the same scenario for several numbers of columns.
pub fn p_sweep(scenario: &Scenario, ps: &[usize]) -> Result<Vec<(usize, ScenarioResult)>> {
    ps.iter()
        .map(|&p| {
            let s = Scenario {
                p,
                s: scenario.s.min(p),
                name: format!("{}-p={p}", scenario.name),
                ..scenario.clone()
            };
            Ok((p, run_scenario(&s)?))
        })
        .collect()
}

/// Penalty grid for a lambda sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaGrid {
    Absolute(Vec<f64>),
    /// Multiples of the mean BIC-selected penalty.
    RelativeToBic(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaPoint {
    pub lambda: f64,
    pub label: String,
    pub tpr: f64,
    pub tpr_lower: f64,
    pub tpr_upper: f64,
    pub fwer: f64,
    pub acceptance_rate: f64,
    pub replications: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSweep {
    pub mean_bic_lambda: f64,
    pub points: Vec<LambdaPoint>,
}

/// Penalty chosen by BIC on one replication (full-model REML, frozen).
pub fn bic_lambda(dataset: &ClusteredDataset) -> Result<f64> {
    let problem = FrozenProblem::new(dataset, &working_params(dataset)?)?;
    let stats = problem.stats(dataset.y());
    Ok(crate::selection::lasso_select(&problem, &stats, &LassoTuning::default())?.lambda)
}

/// TPR as a function of a fixed lasso penalty, with a normal 95% band over replications.
pub fn lambda_sweep(scenario: &Scenario, grid: &LambdaGrid) -> Result<LambdaSweep> {
    scenario.validate()?;
    let lambdas: Vec<f64> = (0..scenario.replications)
        .into_par_iter()
        .map(|rep| {
            let truth = generate_dataset(scenario, derive_seed(scenario.base_seed, &[rep as u64]))?;
            bic_lambda(&truth.dataset)
        })
        .collect::<Result<_>>()?;
    let mean_bic_lambda = sorted_mean(lambdas).unwrap_or(f64::NAN);
    let values: Vec<f64> = match grid {
        LambdaGrid::Absolute(v) => v.clone(),
        LambdaGrid::RelativeToBic(m) => m.iter().map(|f| f * mean_bic_lambda).collect(),
    };
    let mut points = Vec::new();
    for &lambda in &values {
        let settings = RunSettings {
            lambda: Some(lambda),
            ..RunSettings::from_scenario(scenario)
        };
        let result = run_scenario_with(scenario, &settings)?;
        for (k, m) in result.methods.iter().enumerate() {
            let tprs: Vec<f64> = result.raw.iter().filter_map(|r| r[k].tally.as_ref().map(|t| t.tpr())).collect();
            let r = tprs.len();
            let mean = sorted_mean(tprs.clone()).unwrap_or(f64::NAN);
            let sd = if r > 1 {
                (tprs.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (r - 1) as f64).sqrt()
            } else {
                0.0
            };
            let half = 1.96 * sd / (r.max(1) as f64).sqrt();
            points.push(LambdaPoint {
                lambda,
                label: m.label.clone(),
                tpr: mean,
                tpr_lower: (mean - half).max(0.0),
                tpr_upper: (mean + half).min(1.0),
                fwer: m.summary.as_ref().map(|s| s.fwer).unwrap_or(f64::NAN),
                acceptance_rate: m.summary.as_ref().map(|s| s.acceptance_rate).unwrap_or(f64::NAN),
                replications: r,
            });
        }
    }
    Ok(LambdaSweep { mean_bic_lambda, points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub label: String,
    pub p: usize,
    pub mean_seconds: f64,
    pub sd_seconds: f64,
    pub repetitions: usize,
    pub infeasible: bool,
}

/// Wall-clock seconds per method and p at N = 40, n_i = 5, run serially on one thread.
pub fn timing_benchmark(p_grid: &[usize], methods: &[MethodSpec], repetitions: usize, base_seed: u64) -> Result<Vec<TimingRow>> {
    if repetitions == 0 {
        return Ok(Vec::new());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    pool.install(|| {
        let mut rows = Vec::new();
        for &p in p_grid {
            let scenario = Scenario {
                p,
                s: 3.min(p),
                base_seed,
                ..Scenario::default()
            };
            let settings = RunSettings::from_scenario(&scenario);
            for (k, &spec) in methods.iter().enumerate() {
                let mut times = Vec::with_capacity(repetitions);
                let mut infeasible = false;
                for rep in 0..repetitions {
                    let truth = generate_dataset(&scenario, derive_seed(base_seed, &[rep as u64]))?;
                    let start = Instant::now();
                    let result = run_method(spec, &truth.dataset, &settings, method_seed(base_seed, rep, k));
                    let secs = start.elapsed().as_secs_f64();
                    if let Err(Error::Infeasible { .. }) = result {
                        infeasible = true;
                        break;
                    }
                    times.push(secs);
                }
                let n = times.len();
                let mean = if n > 0 { times.iter().sum::<f64>() / n as f64 } else { f64::NAN };
                let sd = if n > 1 {
                    (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                } else {
                    0.0
                };
                rows.push(TimingRow {
                    label: spec.label(),
                    p,
                    mean_seconds: if infeasible { f64::NAN } else { mean },
                    sd_seconds: if infeasible { f64::NAN } else { sd },
                    repetitions: if infeasible { 0 } else { n },
                    infeasible,
                });
            }
        }
        Ok(rows)
    })
}

/// Append `p_noise` i.i.d. normal columns; original columns are marked signal.
pub fn noise_augment(
    dataset: &ClusteredDataset,
    p_noise: usize,
    noise_variance: f64,
    seed: u64,
) -> Result<(ClusteredDataset, Vec<bool>)> {
    let mut mask = vec![true; dataset.p()];
    if p_noise == 0 {
        return Ok((dataset.clone(), mask));
    }
    if !(noise_variance > 0.0) {
        return Err(Error::Validation(format!("noise variance must be positive, got {noise_variance}")));
    }
    let mut rng = derived(seed, &[0xA06]);
    let normal = Normal::new(0.0, noise_variance.sqrt()).map_err(|e| Error::Validation(e.to_string()))?;
    let extra = DMatrix::from_fn(dataset.n(), p_noise, |_, _| normal.sample(&mut rng));
    let names = (1..=p_noise).map(|k| format!("noise{k}")).collect();
    mask.extend(std::iter::repeat_n(false, p_noise));
    Ok((dataset.append_columns(&extra, names)?, mask))
}

/// Synthetic longitudinal cholesterol-style data: 200 subjects with 3 to 6 visits
/// (1044 rows), covariates sex, standardized baseline age and rescaled visit time.
pub fn framingham_like(seed: u64) -> Result<ClusteredDataset> {
    const SUBJECTS: usize = 200;
    const ROWS: usize = 1044;
    let mut rng = derived(seed, &[0xF4A]);
    // visit counts in 3..=6 summing to ROWS
    let mut visits: Vec<usize> = (0..SUBJECTS).map(|_| rng.random_range(3..=6)).collect();
    let mut total: usize = visits.iter().sum();
    while total != ROWS {
        let i = rng.random_range(0..SUBJECTS);
        if total < ROWS && visits[i] < 6 {
            visits[i] += 1;
            total += 1;
        } else if total > ROWS && visits[i] > 3 {
            visits[i] -= 1;
            total -= 1;
        }
    }
    let (beta_sex, beta_age, beta_time) = (0.0, 0.118, 0.283);
    let (sd_b, sd_e) = (0.2, 0.2);
    let mut x = DMatrix::zeros(ROWS, 3);
    let mut y = DVector::zeros(ROWS);
    let mut labels = Vec::with_capacity(SUBJECTS);
    let mut row = 0;
    for (i, &k) in visits.iter().enumerate() {
        let sex = if rng.random_bool(0.45) { 1.0 } else { 0.0 };
        let age: f64 = StandardNormal.sample(&mut rng);
        let b: f64 = StandardNormal.sample(&mut rng);
        for v in 0..k {
            // visits spread over ten years with jitter, t = (tau - 5) / 10
            let tau = (10.0 * v as f64 / (k - 1) as f64 + rng.random_range(-0.5..0.5)).clamp(0.0, 10.0);
            let t = (tau - 5.0) / 10.0;
            let e: f64 = StandardNormal.sample(&mut rng);
            x[(row, 0)] = sex;
            x[(row, 1)] = age;
            x[(row, 2)] = t;
            y[row] = beta_sex * sex + beta_age * age + beta_time * t + sd_b * b + sd_e * e;
            row += 1;
        }
        labels.push(format!("subject{:03}", i + 1));
    }
    let mean = y.mean();
    y.add_scalar_mut(-mean);
    ClusteredDataset::random_intercept(visits, y, x, vec!["sex".into(), "age".into(), "time".into()])?
        .with_cluster_labels(labels)
}

/// Settings of the noise-augmentation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentStudy {
    pub p_noise: usize,
    pub noise_variance: f64,
    pub replications: usize,
    pub base_seed: u64,
    pub methods: Vec<MethodSpec>,
    pub correction: Correction,
    pub alpha: f64,
    pub samples: usize,
}

impl Default for AugmentStudy {
    fn default() -> Self {
        Self {
            p_noise: 5,
            noise_variance: 1.0,
            replications: 100,
            base_seed: 1,
            methods: MethodSpec::table_defaults(),
            correction: Correction::Holm,
            alpha: 0.05,
            samples: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSummary {
    pub name: String,
    /// Mean estimate over replications where the column was significant.
    pub mean_estimate: Option<f64>,
    pub significant_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentResult {
    pub label: String,
    pub fwer: f64,
    pub fdr: f64,
    pub columns: Vec<ColumnSummary>,
    pub ci_mean_length: f64,
    pub ci_length_sd: f64,
    pub completed: usize,
    pub infeasible: Option<String>,
}

/// Repeatedly append fresh noise columns to `dataset` and record what each method finds.
pub fn augment_study(dataset: &ClusteredDataset, study: &AugmentStudy) -> Result<Vec<AugmentResult>> {
    let p0 = dataset.p();
    let settings = RunSettings {
        alpha: study.alpha,
        selfmade: SelfmadeOptions {
            samples: study.samples,
            ..SelfmadeOptions::default()
        },
        postcaic_sigma: SigmaChoice::SelectedModel,
        split_fraction: 0.5,
        candidates: CandidateSet::AllSubsets,
        stepwise_criterion: Criterion::Bic,
        lambda: None,
    };
    let runs: Vec<Vec<std::result::Result<InferenceReport, String>>> = (0..study.replications)
        .into_par_iter()
        .map(|rep| {
            let (data, _) = noise_augment(dataset, study.p_noise, study.noise_variance, derive_seed(study.base_seed, &[rep as u64]))?;
            Ok(study
                .methods
                .iter()
                .enumerate()
                .map(|(k, &spec)| run_method(spec, &data, &settings, method_seed(study.base_seed, rep, k)).map_err(|e| e.to_string()))
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (k, spec) in study.methods.iter().enumerate() {
        let mut any_false = 0usize;
        let mut fdp_sum = Vec::new();
        let mut est: Vec<Vec<f64>> = vec![Vec::new(); p0];
        let mut lengths = Vec::new();
        let mut completed = 0;
        let mut infeasible = None;
        for run in &runs {
            let report = match &run[k] {
                Ok(r) => r,
                Err(e) => {
                    if e.contains("infeasible") {
                        infeasible = Some(e.clone());
                    }
                    continue;
                }
            };
            completed += 1;
            let adjusted = adjust(&report.p_values(), study.correction);
            let (mut v, mut r) = (0usize, 0usize);
            for (entry, &p_adj) in report.entries.iter().zip(&adjusted) {
                if entry.failed {
                    continue;
                }
                let len = entry.ci_upper - entry.ci_lower;
                if len.is_finite() {
                    lengths.push(len);
                }
                if p_adj <= study.alpha {
                    r += 1;
                    if entry.column >= p0 {
                        v += 1;
                    } else {
                        est[entry.column].push(entry.estimate);
                    }
                }
            }
            any_false += (v > 0) as usize;
            fdp_sum.push(v as f64 / r.max(1) as f64);
        }
        let denom = completed.max(1) as f64;
        let mean_len = sorted_mean(lengths.clone()).unwrap_or(f64::NAN);
        let sd_len = if lengths.len() > 1 {
            (lengths.iter().map(|l| (l - mean_len).powi(2)).sum::<f64>() / (lengths.len() - 1) as f64).sqrt()
        } else {
            f64::NAN
        };
        out.push(AugmentResult {
            label: spec.label(),
            fwer: any_false as f64 / denom,
            fdr: sorted_mean(fdp_sum).unwrap_or(f64::NAN),
            columns: (0..p0)
                .map(|j| ColumnSummary {
                    name: dataset.column_names()[j].clone(),
                    significant_rate: est[j].len() as f64 / denom,
                    mean_estimate: sorted_mean(est[j].clone()),
                })
                .collect(),
            ci_mean_length: mean_len,
            ci_length_sd: sd_len,
            completed,
            infeasible,
        });
    }
    Ok(out)
}
