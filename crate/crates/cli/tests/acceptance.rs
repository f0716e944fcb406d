//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion with the
//! measured values underneath.
//!
//! Environment:
//! - `LMMSEL_ACCEPTANCE_ONLY=1,7,8` runs a subset of criteria.
//! - `LMMSEL_ACCEPTANCE_REPS=n` overrides the replication count of the Monte Carlo criteria.
//! - `LMMSEL_ACCEPTANCE_STRICT=1` exits with status 1 when any criterion fails.

use std::collections::BTreeMap;
use std::process::Command;
use std::time::Instant;

use lmmsel_core::distributions::{normal_cdf, normal_pdf, normal_quantile, NoncentralChiSquared};
use lmmsel_core::inference::{
    selfmade_build, selfmade_ci, selfmade_pvalue, selfmade_sample, uvil_delta, uvil_infer, uvil_region,
};
use lmmsel_core::io::{emit_report, emit_summaries, parse_report, parse_summaries, Format, SummaryRow};
use lmmsel_core::lmm::wald_inference;
use lmmsel_core::multiplicity::{bh_adjust, holm_adjust};
use lmmsel_core::rng::seeded;
use lmmsel_core::selection::{kkt_violation, lasso_gram, lasso_lmm, FrozenProblem};
use lmmsel_core::sim::{
    generate_dataset, lambda_sweep, run_scenario, sigma_sweep, timing_benchmark, LambdaGrid, MethodSpec,
    Scenario, ScenarioResult,
};
use lmmsel_core::{
    assemble_sigma, gls_beta, reml_fit, CandidateSet, ClusteredDataset, Correction, Error, MetricSummary,
    ProposalCenter, SelectionRule, Subset, UvilLambda, VarianceParams,
};
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

/// Binomial 3-SE half-width.
fn t(pi: f64, reps: usize) -> f64 {
    3.0 * (pi * (1.0 - pi) / reps as f64).sqrt()
}

struct Check {
    ok: bool,
    detail: String,
}

#[derive(Default)]
struct Outcome {
    checks: Vec<Check>,
}

impl Outcome {
    fn check(&mut self, ok: bool, detail: impl Into<String>) {
        self.checks.push(Check { ok, detail: detail.into() });
    }

    fn within(&mut self, what: &str, value: f64, centre: f64, half: f64) {
        let ok = (value - centre).abs() <= half;
        self.check(ok, format!("{what} = {value:.3} in [{:.3}, {:.3}]", centre - half, centre + half));
    }

    fn at_most(&mut self, what: &str, value: f64, bound: f64) {
        self.check(value <= bound, format!("{what} = {value:.3} <= {bound:.3}"));
    }

    fn at_least(&mut self, what: &str, value: f64, bound: f64) {
        self.check(value >= bound, format!("{what} = {value:.3} >= {bound:.3}"));
    }

    fn close(&mut self, what: &str, diff: f64, tol: f64) {
        self.check(diff <= tol, format!("{what}: max error {diff:.2e} <= {tol:.2e}"));
    }

    fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.ok)
    }
}

struct Context {
    reps: Option<usize>,
    table1: Option<ScenarioResult>,
    table1_reps: usize,
}

impl Context {
    fn reps(&self, default: usize) -> usize {
        self.reps.unwrap_or(default)
    }

    fn table1(&mut self) -> (&ScenarioResult, usize) {
        if self.table1.is_none() {
            let scenario = Scenario {
                name: "table1".into(),
                replications: self.reps(200),
                methods: MethodSpec::table_defaults(),
                ..Scenario::default()
            };
            self.table1_reps = scenario.replications;
            self.table1 = Some(run_scenario(&scenario).expect("table 1 run"));
        }
        (self.table1.as_ref().unwrap(), self.table1_reps)
    }
}

fn summary<'a>(result: &'a ScenarioResult, label: &str) -> &'a MetricSummary {
    result
        .methods
        .iter()
        .find(|m| m.label == label)
        .and_then(|m| m.summary.as_ref())
        .unwrap_or_else(|| panic!("no summary for {label}"))
}

fn spec(label: &str) -> MethodSpec {
    label.parse().expect("method label")
}

fn random_intercept_data(clusters: usize, size: usize, beta: &[f64], sb2: f64, seed: u64) -> ClusteredDataset {
    let mut rng = seeded(seed);
    let n = clusters * size;
    let x = DMatrix::from_fn(n, beta.len(), |_, _| -> f64 { StandardNormal.sample(&mut rng) });
    let mut y: DVector<f64> = &x * DVector::from_column_slice(beta);
    for c in 0..clusters {
        let b: f64 = StandardNormal.sample(&mut rng);
        for r in 0..size {
            let e: f64 = StandardNormal.sample(&mut rng);
            y[c * size + r] += sb2.sqrt() * b + e;
        }
    }
    let names = (0..beta.len()).map(|j| format!("x{}", j + 1)).collect();
    ClusteredDataset::random_intercept(vec![size; clusters], y, x, names).unwrap()
}

fn criterion_1(ctx: &mut Context) -> Outcome {
    let start = Instant::now();
    let (r, reps) = ctx.table1();
    let secs = start.elapsed().as_secs_f64();
    let mut o = Outcome::default();
    let naive = summary(r, "naive-lasso");
    o.within("naive FWER", naive.fwer, 0.11, t(0.11, reps));
    o.check(naive.fwer > 0.05, format!("naive FWER = {:.3} > 0.05", naive.fwer));
    o.within("split TPR", summary(r, "split-lasso").tpr, 0.891, t(0.891, reps));
    let lasso = summary(r, "selfmade-lasso");
    o.within("selfmade-lasso TPR", lasso.tpr, 0.917, t(0.917, reps));
    o.at_most("selfmade-lasso FWER", lasso.fwer, 0.05 + t(0.05, reps));
    o.at_most("selfmade-step FWER", summary(r, "selfmade-step").fwer, 0.02);
    let uvil = summary(r, "uvil");
    o.within("uvil TPR", uvil.tpr, 0.829, t(0.829, reps));
    o.at_most("uvil FWER", uvil.fwer, 0.05 + t(0.05, reps));
    o.at_most("runtime (s)", secs, 1800.0);
    o
}

fn criterion_2(ctx: &mut Context) -> Outcome {
    let (r, _) = ctx.table1();
    let mut o = Outcome::default();
    for label in ["split-lasso", "selfmade-lasso", "selfmade-step", "uvil"] {
        let s = summary(r, label);
        o.at_least(&format!("{label} signal coverage"), s.coverage_signal, 0.92);
        o.at_least(&format!("{label} noise coverage"), s.coverage_noise, 0.92);
    }
    o.at_most("naive noise coverage", summary(r, "naive-lasso").coverage_noise, 0.90);
    o
}

fn criterion_3(ctx: &mut Context) -> Outcome {
    let scenario = Scenario {
        name: "small".into(),
        clusters: 20,
        replications: ctx.reps(200),
        methods: vec![spec("naive-lasso"), spec("postcaic"), spec("split-lasso")],
        ..Scenario::default()
    };
    let r = run_scenario(&scenario).expect("small-sample run");
    let (naive, postcaic, split) = (
        summary(&r, "naive-lasso").tpr,
        summary(&r, "postcaic").tpr,
        summary(&r, "split-lasso").tpr,
    );
    let mut o = Outcome::default();
    o.check(
        naive > postcaic && postcaic > split,
        format!("TPR ordering naive {naive:.3} > postcaic {postcaic:.3} > split {split:.3}"),
    );
    o.within("split TPR", split, 0.604, t(0.604, scenario.replications));
    o
}

fn criterion_4(ctx: &mut Context) -> Outcome {
    let scenario = Scenario {
        name: "stability".into(),
        p: 25,
        s: 10,
        replications: ctx.reps(200),
        methods: vec![spec("selfmade-lasso"), spec("selfmade-step")],
        ..Scenario::default()
    };
    let r = run_scenario(&scenario).expect("stability run");
    let lasso = summary(&r, "selfmade-lasso").acceptance_rate;
    let step = summary(&r, "selfmade-step").acceptance_rate;
    let mut o = Outcome::default();
    o.check(step > lasso, format!("stepwise acceptance {step:.3} > lasso acceptance {lasso:.3}"));
    o.at_most("lasso acceptance", lasso, 0.35);
    o.at_least("stepwise acceptance", step, 0.75);
    o
}

fn criterion_5(ctx: &mut Context) -> Outcome {
    let scenario = Scenario {
        name: "lambda".into(),
        p: 20,
        s: 3,
        replications: ctx.reps(50),
        methods: vec![spec("selfmade-lasso")],
        ..Scenario::default()
    };
    let sweep = lambda_sweep(&scenario, &LambdaGrid::RelativeToBic(vec![0.25, 1.0, 4.0])).expect("lambda sweep");
    let tpr: Vec<f64> = sweep.points.iter().map(|p| p.tpr).collect();
    let mut o = Outcome::default();
    o.check(true, format!("mean BIC lambda = {:.3}", sweep.mean_bic_lambda));
    o.at_most("TPR at lambda_BIC vs 0.25x", tpr[1], tpr[0] - 0.05);
    o.at_most("TPR at lambda_BIC vs 4x", tpr[1], tpr[2] - 0.05);
    o
}

fn criterion_6(ctx: &mut Context) -> Outcome {
    let controlled = ["split-lasso", "selfmade-lasso", "selfmade-step", "uvil", "postcaic"];
    let scenario = Scenario {
        name: "sigma".into(),
        replications: ctx.reps(200),
        methods: controlled.iter().map(|l| spec(l)).collect(),
        ..Scenario::default()
    };
    let sweep = sigma_sweep(&scenario, &[3.0, 6.0, 12.0]).expect("sigma sweep");
    let mut o = Outcome::default();
    for label in controlled {
        let tprs: Vec<f64> = sweep.iter().map(|(_, r)| summary(r, label).tpr).collect();
        let spread = tprs.iter().cloned().fold(f64::MIN, f64::max) - tprs.iter().cloned().fold(f64::MAX, f64::min);
        o.check(spread < 0.1, format!("{label} TPR spread {spread:.3} < 0.1 ({tprs:.3?})"));
        for (v, r) in &sweep {
            o.at_most(&format!("{label} FWER at sigma_b2 = {v}"), summary(r, label).fwer, 0.05 + t(0.05, scenario.replications));
        }
    }
    o
}

fn criterion_7(_: &mut Context) -> Outcome {
    let start = Instant::now();
    let mut o = Outcome::default();

    // balanced one-way layout: REML equals the ANOVA moment estimators
    let (clusters, size) = (10, 5);
    let raw = random_intercept_data(clusters, size, &[0.0], 2.0, 42);
    let d = ClusteredDataset::random_intercept(
        vec![size; clusters],
        raw.y().clone(),
        DMatrix::from_element(raw.n(), 1, 1.0),
        vec!["(intercept)".into()],
    )
    .unwrap();
    let y = d.y();
    let means: Vec<f64> = (0..clusters).map(|c| y.rows(c * size, size).mean()).collect();
    let ssw: f64 = (0..clusters)
        .map(|c| y.rows(c * size, size).iter().map(|v| (v - means[c]).powi(2)).sum::<f64>())
        .sum();
    let ssb: f64 = means.iter().map(|m| size as f64 * (m - y.mean()).powi(2)).sum();
    let msw = ssw / (clusters * (size - 1)) as f64;
    let msb = ssb / (clusters - 1) as f64;
    let fit = reml_fit(&d, &Subset::full(1)).unwrap();
    let err = (fit.params.residual_variance() - msw)
        .abs()
        .max((fit.params.intercept_variance() - (msb - msw) / size as f64).abs());
    o.close("REML vs ANOVA", err, 1e-6);

    let d = random_intercept_data(8, 5, &[1.0, -0.5, 0.25], 1.0, 3);
    let identity = assemble_sigma(&d, &VarianceParams::random_intercept(0.0, 1.0).unwrap()).unwrap();
    let (beta, _) = gls_beta(&d, &identity, &Subset::full(3)).unwrap();
    let x = d.x();
    let ols = (x.transpose() * x).cholesky().unwrap().solve(&(x.transpose() * d.y()));
    o.close("GLS vs OLS at identity", (beta - ols).amax(), 0.0);

    let params = VarianceParams::random_intercept(0.8, 1.0).unwrap();
    let sigma = assemble_sigma(&d, &params).unwrap();
    let (gls, _) = gls_beta(&d, &sigma, &Subset::full(3)).unwrap();
    let zero = lasso_lmm(&d, &params, 0.0).unwrap();
    o.close("lasso at lambda = 0 vs GLS", (zero.beta - &gls).amax(), 1e-8);
    let problem = FrozenProblem::new(&d, &params).unwrap();
    let stats = problem.stats(d.y());
    let worst = [0.0, 1.0, 5.0, 20.0, 80.0]
        .iter()
        .map(|&l| {
            let sol = lasso_gram(problem.gram(), &stats.c, stats.yy, l, None).unwrap();
            kkt_violation(problem.gram(), &stats.c, l, &sol.beta)
        })
        .fold(0.0, f64::max);
    o.close("lasso KKT certificates", worst, 1e-6);

    let d = random_intercept_data(10, 5, &[0.4, 0.0], 1.0, 2);
    let b = 20_000;
    let m = Subset::full(2);
    let mut s = selfmade_build(&d, &sigma_of(&d), &m, 0).unwrap();
    let rule = SelectionRule::fixed(m.clone());
    let prepared = rule.prepare(&d).unwrap();
    selfmade_sample(&mut s, &prepared, &m, b, ProposalCenter::Observed, 11).unwrap();
    let sd = s.kappa.sqrt();
    let f_err = (-4..=4)
        .map(|k| {
            let rho = s.t_obs + 0.25 * k as f64 * sd;
            (selfmade_pvalue(&s, rho).unwrap() - (1.0 - normal_cdf((s.t_obs - rho) / sd))).abs()
        })
        .fold(0.0, f64::max);
    o.close("untruncated f(rho) vs normal tail", f_err, 3.0 / (b as f64).sqrt());
    let (lo, hi) = selfmade_ci(&s, 0.05).unwrap();
    let z = normal_quantile(0.975);
    let ci_err = (lo - (s.t_obs - z * sd)).abs().max((hi - (s.t_obs + z * sd)).abs());
    o.close("untruncated CI vs classical", ci_err, 3.0 / (b as f64).sqrt() * sd / normal_pdf(z));

    let d = random_intercept_data(10, 5, &[1.0, 0.0, -0.5], 1.0, 10);
    let region = uvil_region(&d, UvilLambda::Fixed(0.0), 0.05).unwrap();
    let uvil = uvil_infer(&region, 0.05).unwrap();
    let wald = wald_inference(&reml_fit(&d, &Subset::full(3)).unwrap(), &d, 0.05).unwrap();
    let uvil_err = uvil
        .entries
        .iter()
        .zip(&wald.entries)
        .map(|(a, w)| (a.ci_lower - w.ci_lower).abs().max((a.ci_upper - w.ci_upper).abs()))
        .fold(0.0, f64::max);
    o.close("uvil lambda = 0 CI vs Wald", uvil_err, 1e-10);

    let mut rng = seeded(9);
    let mut delta_ok = true;
    for p in 1..=12usize {
        let raw = DMatrix::from_fn(p + 3, p, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
        let c = raw.transpose() * &raw / (p + 3) as f64 + DMatrix::identity(p, p) * 0.1;
        let lam = DVector::from_fn(p, |i, _| 0.2 + 0.1 * i as f64);
        let fast = uvil_delta(&c, &lam).unwrap();
        let ci = c.clone().try_inverse().unwrap();
        let a = DMatrix::from_fn(p, p, |i, j| lam[i] * ci[(i, j)] * lam[j]);
        let brute = (0..1u64 << p)
            .map(|mask| {
                let d = DVector::from_fn(p, |i, _| if mask >> i & 1 == 1 { 1.0 } else { -1.0 });
                d.dot(&(&a * &d))
            })
            .fold(f64::NEG_INFINITY, f64::max);
        delta_ok &= (fast - brute).abs() <= 1e-12 * brute.abs().max(1.0);
    }
    o.check(delta_ok, "delta equals brute-force enumeration for p = 1..12");

    let mut q_err = 0.0_f64;
    for df in [1.0, 2.0, 5.0, 12.0] {
        for ncp in [0.0, 0.5, 3.0, 15.0] {
            let dist = NoncentralChiSquared::new(df, ncp).unwrap();
            for prob in [0.01, 0.05, 0.5, 0.95, 0.99] {
                q_err = q_err.max((dist.cdf(dist.quantile(prob).unwrap()) - prob).abs());
            }
        }
    }
    o.close("noncentral chi-square quantile inverts CDF", q_err, 1e-8);

    // exact up to the last bit of the decimal literals
    let same = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 2.0 * f64::EPSILON * y.abs());
    o.check(
        holm_adjust(&[0.01, 0.04]) == vec![0.02, 0.04] && holm_adjust(&[0.3]) == vec![0.3],
        "Holm hand examples",
    );
    o.check(
        same(&bh_adjust(&[0.01, 0.02, 0.20]), &[0.03, 0.03, 0.20]) && bh_adjust(&[1.0, 1.0, 1.0]) == vec![1.0; 3],
        "BH hand examples",
    );
    let secs = start.elapsed().as_secs_f64();
    o.at_most("analytic suite seconds", secs, 60.0);
    o
}

fn sigma_of(d: &ClusteredDataset) -> lmmsel_core::MarginalCovariance {
    assemble_sigma(d, &VarianceParams::random_intercept(1.0, 1.0).unwrap()).unwrap()
}

fn criterion_8(_: &mut Context) -> Outcome {
    let mut o = Outcome::default();

    // sampler properties on every sampler built from a batch of lasso and stepwise selections
    let (mut samplers, mut monotone, mut decomposes) = (0, true, true);
    for seed in 0..20u64 {
        let d = generate_dataset(&Scenario::default(), 500 + seed).unwrap().dataset;
        let plug_in = reml_fit(&d, &Subset::empty()).unwrap().params;
        let sigma = assemble_sigma(&d, &plug_in).unwrap();
        for rule in [SelectionRule::lasso_bic(), SelectionRule::stepwise(lmmsel_core::Criterion::Bic)] {
            let prepared = rule.prepare(&d).unwrap();
            let selected = prepared.select_response(d.y()).unwrap();
            for column in selected.iter() {
                let mut s = selfmade_build(&d, &sigma, &selected, column).unwrap();
                decomposes &= s.decomposition_error(d.y()) < 1e-10;
                s.min_accepted = 1;
                if selfmade_sample(&mut s, &prepared, &selected, 300, ProposalCenter::Observed, seed).is_err() {
                    continue;
                }
                samplers += 1;
                let sd = s.kappa.sqrt();
                let values: Vec<f64> =
                    (-40..=40).map(|k| selfmade_pvalue(&s, s.t_obs + 0.5 * k as f64 * sd).unwrap()).collect();
                monotone &= values.windows(2).all(|w| w[0] <= w[1] + 1e-12);
            }
        }
    }
    o.check(monotone && samplers > 0, format!("f(rho) nondecreasing on {samplers} samplers"));
    o.check(decomposes, "decomposition identity within 1e-10 on every sampler");

    // determinism of the binary
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("det.toml");
    std::fs::write(&cfg, "replications = 4\nsamples = 100\nmethods = [\"naive-lasso\", \"selfmade-lasso\", \"uvil\"]\n")
        .unwrap();
    let run = || {
        Command::new(env!("CARGO_BIN_EXE_lmmsel"))
            .args(["--seed", "17", "simulate", cfg.to_str().unwrap()])
            .output()
            .expect("binary runs")
    };
    let (a, b) = (run(), run());
    o.check(
        a.status.success() && a.stdout == b.stdout && !a.stdout.is_empty(),
        "same seed gives byte-identical CLI output",
    );

    // round trip
    let d = generate_dataset(&Scenario::default(), 7).unwrap().dataset;
    let report = lmmsel_core::inference::naive_infer(&d, &SelectionRule::lasso_bic(), 0.05).unwrap();
    let ok_report = [Format::Csv, Format::Json].iter().all(|&f| {
        let text = emit_report(&report, Correction::Holm, f).unwrap();
        parse_report(&text, f).map(|rows| rows.len() == report.entries.len()).unwrap_or(false)
    });
    let csv = String::from_utf8(a.stdout.clone()).unwrap_or_default();
    let rows = parse_summaries(&csv, Format::Csv).unwrap_or_default();
    let json = emit_summaries(&rows, Format::Json).unwrap();
    let back = parse_summaries(&json, Format::Json).unwrap_or_default();
    let ok_summary = !rows.is_empty() && rows.len() == back.len() && rows.iter().zip(&back).all(|(x, y): (&SummaryRow, _)| x.same_as(y));
    o.check(ok_report && ok_summary, "CSV/JSON round trip for reports and summaries");

    // guards
    let wide = Scenario { p: 40, ..Scenario::default() };
    let wide = generate_dataset(&wide, 1).unwrap().dataset;
    let guards = [
        matches!(uvil_region(&wide, UvilLambda::Bic, 0.05), Err(Error::Infeasible { .. })),
        matches!(SelectionRule::caic(CandidateSet::AllSubsets).check_feasible(16), Err(Error::Infeasible { .. })),
        matches!(SelectionRule::stepwise(lmmsel_core::Criterion::Bic).check_feasible(61), Err(Error::Infeasible { .. })),
    ];
    let cfg = dir.path().join("wide.toml");
    std::fs::write(&cfg, "p = 40\nreplications = 2\nmethods = [\"uvil\", \"postcaic\", \"naive-lasso\"]\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_lmmsel"))
        .args(["simulate", cfg.to_str().unwrap()])
        .output()
        .expect("binary runs");
    let rows = parse_summaries(&String::from_utf8_lossy(&out.stdout), Format::Csv).unwrap_or_default();
    let flagged = rows.iter().filter(|r| r.status == "infeasible").count() == 2;
    o.check(
        guards.iter().all(|g| *g) && out.status.success() && flagged,
        "size guards give structured infeasibility, CLI exits 0",
    );
    o
}

fn log_growth(rows: &BTreeMap<(String, usize), f64>, label: &str, from: usize, to: usize) -> f64 {
    let (a, b) = (rows[&(label.to_string(), from)], rows[&(label.to_string(), to)]);
    (b / a).ln() / (to - from) as f64
}

fn criterion_9(ctx: &mut Context) -> Outcome {
    let mut o = Outcome::default();
    let (r, reps) = ctx.table1();
    let postcaic = summary(r, "postcaic");
    o.at_most("postcaic FWER", postcaic.fwer, 0.05 + t(0.05, reps));
    let split = summary(r, "split-lasso").tpr;
    o.check(postcaic.tpr >= split, format!("postcaic TPR {:.3} >= split TPR {split:.3}", postcaic.tpr));

    let labels = ["naive-lasso", "split-lasso", "selfmade-lasso", "selfmade-step", "uvil", "postcaic"];
    let methods: Vec<MethodSpec> = labels.iter().map(|l| spec(l)).collect();
    let grid = [6, 12, 25];
    let rows = timing_benchmark(&grid, &methods, 3, 1).expect("timing");
    let mut times = BTreeMap::new();
    let mut postcaic_flagged = false;
    for row in &rows {
        if row.infeasible {
            postcaic_flagged |= row.label == "postcaic" && row.p > 15;
        } else {
            times.insert((row.label.clone(), row.p), row.mean_seconds);
        }
    }
    let fmt = |l: &str| grid.iter().map(|&p| times.get(&(l.to_string(), p)).map(|t| format!("{t:.4}")).unwrap_or("-".into())).collect::<Vec<_>>().join("/");
    for l in labels {
        o.check(true, format!("{l} seconds at p = 6/12/25: {}", fmt(l)));
    }
    for l in ["naive-lasso", "split-lasso"] {
        let ratio = times[&(l.to_string(), 25)] / times[&(l.to_string(), 6)];
        o.at_most(&format!("{l} time ratio p=25/p=6"), ratio, 10.0);
    }
    let flat = log_growth(&times, "naive-lasso", 6, 25).max(log_growth(&times, "split-lasso", 6, 25));
    let lasso = log_growth(&times, "selfmade-lasso", 6, 25);
    let step = log_growth(&times, "selfmade-step", 6, 25);
    let exponential = log_growth(&times, "postcaic", 6, 12).min(log_growth(&times, "uvil", 12, 25));
    o.check(
        flat < lasso && lasso < step && step < exponential,
        format!("per-column log growth: naive/split {flat:.3} < selfmade-lasso {lasso:.3} < selfmade-step {step:.3} < exponential {exponential:.3}"),
    );
    o.check(
        times[&("postcaic".to_string(), 12)] > times[&("postcaic".to_string(), 6)] && postcaic_flagged,
        "postcaic time increasing in p and flagged infeasible beyond p = 15",
    );
    o
}

fn main() {
    // libtest flags such as --nocapture are accepted and ignored
    let only: Option<Vec<usize>> = std::env::var("LMMSEL_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let reps = std::env::var("LMMSEL_ACCEPTANCE_REPS").ok().and_then(|v| v.parse().ok());
    let strict = std::env::var("LMMSEL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut ctx = Context {
        reps,
        table1: None,
        table1_reps: 0,
    };
    let criteria: [(usize, &str, fn(&mut Context) -> Outcome); 9] = [
        (1, "baseline scenario regeneration", criterion_1),
        (2, "coverage at nominal 95%", criterion_2),
        (3, "small-sample ordering", criterion_3),
        (4, "selection-stability contrast", criterion_4),
        (5, "power dip at the BIC penalty", criterion_5),
        (6, "stability in the intercept variance", criterion_6),
        (7, "analytic oracles", criterion_7),
        (8, "property suites", criterion_8),
        (9, "postcAIC control and timing growth", criterion_9),
    ];
    if reps.is_some() {
        println!("note: replication override {reps:?} in effect");
    }
    let mut failed = Vec::new();
    for (id, title, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = run(&mut ctx);
        let secs = start.elapsed().as_secs_f64();
        let verdict = if outcome.passed() { "PASS" } else { "FAIL" };
        println!("{verdict} criterion {id}: {title} ({secs:.1} s)");
        for c in &outcome.checks {
            println!("    {} {}", if c.ok { "ok  " } else { "miss" }, c.detail);
        }
        if !outcome.passed() {
            failed.push(id);
        }
    }
    println!("acceptance: {} failing criteria {failed:?}", failed.len());
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}
