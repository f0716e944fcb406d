use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lmmsel_core::io::{self, Cell, Format, LoadOptions, SummaryRow, Table};
use lmmsel_core::lmm::{reml_fit, wald_inference};
use lmmsel_core::sim::{self, AugmentStudy, LambdaGrid, MethodSpec, RuleChoice, RunSettings, Scenario};
use lmmsel_core::{
    CandidateSet, ClusteredDataset, Correction, Criterion, Error, ProposalCenter, Result, SelfmadeOptions, SigmaChoice,
    Subset,
};

#[derive(Parser, Debug)]
#[command(name = "lmmsel", version, about = "Fixed-effect selection and post-selection inference for linear mixed models")]
struct Cli {
    /// Base seed; overrides the seed in a config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "LMMSEL_THREADS")]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = OutFormat::Csv)]
    format: OutFormat,
    /// Write output here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OutFormat {
    Csv,
    Json,
}

impl From<OutFormat> for Format {
    fn from(f: OutFormat) -> Self {
        match f {
            OutFormat::Csv => Format::Csv,
            OutFormat::Json => Format::Json,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// REML fit of the full model with Wald inference.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Run a selection rule and print the selected columns.
    Select {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        rule: RuleArgs,
    },
    /// Selection followed by post-selection inference.
    Infer {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "selfmade")]
        method: String,
        #[command(flatten)]
        rule: RuleArgs,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value = "holm")]
        correction: String,
        #[command(flatten)]
        mc: McArgs,
    },
    /// Run a simulation scenario and print one metric row per method.
    Simulate {
        config: PathBuf,
        /// Override the number of replications.
        #[arg(long)]
        replications: Option<usize>,
        /// Also write the per-replication table here.
        #[arg(long)]
        raw: Option<PathBuf>,
    },
    /// Repeat a scenario over a grid of lasso penalties, intercept variances or column counts.
    Sweep {
        config: PathBuf,
        #[arg(long, value_enum)]
        kind: SweepKind,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Interpret lambda values as multiples of the mean BIC penalty.
        #[arg(long)]
        relative: bool,
        #[arg(long)]
        replications: Option<usize>,
    },
    /// Append noise columns to a dataset and record what each method finds.
    Augment {
        /// Long-format CSV; the synthetic cholesterol-style dataset is used when omitted.
        data: Option<PathBuf>,
        #[arg(long, default_value = "y")]
        response: String,
        #[arg(long, default_value = "cluster")]
        cluster: String,
        /// Study settings (TOML). Flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        p_noise: Option<usize>,
        #[arg(long)]
        noise_variance: Option<f64>,
        #[arg(long)]
        replications: Option<usize>,
        #[arg(long)]
        correction: Option<String>,
    },
    /// Serial wall-clock timing per method and number of columns.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "6,10,15,20")]
        p: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "naive,split,selfmade-lasso,selfmade-step,uvil,postcaic")]
        methods: Vec<String>,
        #[arg(long, default_value_t = 3)]
        repetitions: usize,
    },
    /// Write a synthetic long-format dataset.
    Generate {
        /// Scenario config; the cholesterol-style design is used when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SweepKind {
    Lambda,
    Sigma,
    P,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Long-format CSV with a header row.
    data: PathBuf,
    #[arg(long, default_value = "y")]
    response: String,
    #[arg(long, default_value = "cluster")]
    cluster: String,
    /// Comma-separated covariates (default: all other columns).
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    /// Divide the response by this value.
    #[arg(long)]
    scale: Option<f64>,
    /// Center the response.
    #[arg(long)]
    center: bool,
}

impl DataArgs {
    fn load(&self) -> Result<ClusteredDataset> {
        let options = LoadOptions {
            covariates: self.covariates.clone(),
            scale: self.scale,
            center: self.center,
        };
        io::load_csv(&self.data, &self.response, &self.cluster, &options)
    }
}

#[derive(Args, Debug)]
struct RuleArgs {
    /// lasso, step, step-caic, caic or full.
    #[arg(long, default_value = "lasso")]
    rule: String,
    /// Fixed lasso penalty instead of BIC tuning.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_enum, default_value_t = Candidates::All)]
    candidates: Candidates,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Candidates {
    All,
    Nested,
}

#[derive(Args, Debug)]
struct McArgs {
    /// Monte Carlo samples per coefficient.
    #[arg(long, default_value_t = 500)]
    samples: usize,
    #[arg(long, default_value_t = 50)]
    min_accepted: usize,
    #[arg(long, default_value_t = 0.5)]
    split_fraction: f64,
    /// Plug-in covariance (default: intercept model for selfmade, selected model for postcaic).
    #[arg(long, value_enum)]
    sigma: Option<SigmaArg>,
    #[arg(long, value_enum, default_value_t = CenterArg::Observed)]
    proposal: CenterArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SigmaArg {
    Intercept,
    Selected,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CenterArg {
    Observed,
    Zero,
}

fn rule_choice(s: &str) -> Result<RuleChoice> {
    Ok(format!("naive-{s}").parse::<MethodSpec>()?.rule)
}

fn settings(rule: &RuleArgs, p: usize, alpha: f64, mc: Option<&McArgs>, seed: u64) -> RunSettings {
    let mut selfmade = SelfmadeOptions { seed, ..SelfmadeOptions::default() };
    let mut split_fraction = 0.5;
    let mut postcaic_sigma = SigmaChoice::SelectedModel;
    if let Some(mc) = mc {
        selfmade.samples = mc.samples;
        selfmade.min_accepted = mc.min_accepted;
        if let Some(choice) = mc.sigma {
            let choice = match choice {
                SigmaArg::Intercept => SigmaChoice::InterceptModel,
                SigmaArg::Selected => SigmaChoice::SelectedModel,
            };
            selfmade.sigma = choice;
            postcaic_sigma = choice;
        }
        selfmade.center = match mc.proposal {
            CenterArg::Observed => ProposalCenter::Observed,
            CenterArg::Zero => ProposalCenter::Zero,
        };
        split_fraction = mc.split_fraction;
    }
    RunSettings {
        alpha,
        selfmade,
        postcaic_sigma,
        split_fraction,
        candidates: match rule.candidates {
            Candidates::All => CandidateSet::AllSubsets,
            Candidates::Nested => CandidateSet::nested_identity(p),
        },
        stepwise_criterion: Criterion::Bic,
        lambda: rule.lambda,
    }
}

fn names(dataset: &ClusteredDataset, s: &Subset) -> String {
    s.iter().map(|j| dataset.column_names()[j].as_str()).collect::<Vec<_>>().join(";")
}

fn load_scenario(path: &Path, seed: Option<u64>, replications: Option<usize>) -> Result<Scenario> {
    let mut s = Scenario::from_toml(&std::fs::read_to_string(path)?)?;
    if let Some(seed) = seed {
        s.base_seed = seed;
    }
    if let Some(r) = replications {
        s.replications = r;
    }
    s.validate()?;
    Ok(s)
}

fn fit_table(dataset: &ClusteredDataset, alpha: f64) -> Result<Table> {
    let fit = reml_fit(dataset, &Subset::full(dataset.p()))?;
    let report = wald_inference(&fit, dataset, alpha)?;
    let mut t = Table::new(&["kind", "name", "estimate", "std_error", "p_value", "ci_lo", "ci_hi"]);
    for (k, e) in report.entries.iter().enumerate() {
        t.push(vec![
            "fixed".into(),
            e.name.as_str().into(),
            e.estimate.into(),
            fit.covariance_of_beta[(k, k)].sqrt().into(),
            e.p_value.into(),
            e.ci_lower.into(),
            e.ci_upper.into(),
        ]);
    }
    let nan = || Cell::Num(f64::NAN);
    let g = fit.params.g();
    for a in 0..g.nrows() {
        for b in a..g.nrows() {
            t.push(vec!["variance".into(), format!("G[{a},{b}]").into(), g[(a, b)].into(), nan(), nan(), nan(), nan()]);
        }
    }
    t.push(vec!["variance".into(), "residual".into(), fit.params.residual_variance().into(), nan(), nan(), nan(), nan()]);
    t.push(vec!["loglik".into(), "reml".into(), fit.reml_loglik.into(), nan(), nan(), nan(), nan()]);
    t.push(vec![
        "diagnostic".into(),
        "boundary".into(),
        if fit.boundary { 1.0 } else { 0.0 }.into(),
        nan(),
        nan(),
        nan(),
        nan(),
    ]);
    Ok(t)
}

fn run(cli: &Cli) -> Result<String> {
    let format: Format = cli.format.into();
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Fit { data, alpha } => fit_table(&data.load()?, *alpha)?.emit(format),
        Command::Select { data, rule } => {
            let dataset = data.load()?;
            let choice = rule_choice(&rule.rule)?;
            let st = settings(rule, dataset.p(), 0.05, None, seed);
            let selected = st.rule(choice, dataset.p()).select(&dataset)?;
            let lambda = match (choice, rule.lambda) {
                (RuleChoice::Lasso, Some(l)) => Some(l),
                (RuleChoice::Lasso, None) => Some(sim::bic_lambda(&dataset)?),
                _ => None,
            };
            let mut t = Table::new(&["rule", "selected", "size", "lambda"]);
            t.push(vec![rule.rule.as_str().into(), names(&dataset, &selected).into(), selected.len().into(), lambda.into()]);
            t.emit(format)
        }
        Command::Infer { data, method, rule, alpha, correction, mc } => {
            let dataset = data.load()?;
            let spec: MethodSpec = match method.to_ascii_lowercase().as_str() {
                m @ ("uvil" | "postcaic" | "wald") => m.parse()?,
                m => format!("{m}-{}", rule.rule).parse()?,
            };
            let correction: Correction = correction.parse()?;
            let st = settings(rule, dataset.p(), *alpha, Some(mc), seed);
            let report = sim::run_method(spec, &dataset, &st, seed)?;
            for f in &report.diagnostics.failures {
                eprintln!("warning: {f}");
            }
            io::emit_report(&report, correction, format)
        }
        Command::Simulate { config, replications, raw } => {
            let scenario = load_scenario(config, cli.seed, *replications)?;
            let result = sim::run_scenario(&scenario)?;
            if let Some(path) = raw {
                std::fs::write(path, raw_table(&result).emit(format)?)?;
            }
            io::emit_summaries(&SummaryRow::from_result(&result), format)
        }
        Command::Sweep { config, kind, values, relative, replications } => {
            let scenario = load_scenario(config, cli.seed, *replications)?;
            match kind {
                SweepKind::Lambda => {
                    let grid = if *relative {
                        LambdaGrid::RelativeToBic(values.clone())
                    } else {
                        LambdaGrid::Absolute(values.clone())
                    };
                    let sweep = sim::lambda_sweep(&scenario, &grid)?;
                    let mut t = Table::new(&["lambda", "method", "TPR", "TPR_lo", "TPR_hi", "FWER", "acceptance_rate", "replications", "mean_bic_lambda"]);
                    for p in &sweep.points {
                        t.push(vec![
                            p.lambda.into(),
                            p.label.as_str().into(),
                            p.tpr.into(),
                            p.tpr_lower.into(),
                            p.tpr_upper.into(),
                            p.fwer.into(),
                            p.acceptance_rate.into(),
                            p.replications.into(),
                            sweep.mean_bic_lambda.into(),
                        ]);
                    }
                    t.emit(format)
                }
                SweepKind::Sigma => {
                    let rows: Vec<SummaryRow> = sim::sigma_sweep(&scenario, values)?
                        .iter()
                        .flat_map(|(_, r)| SummaryRow::from_result(r))
                        .collect();
                    io::emit_summaries(&rows, format)
                }
                SweepKind::P => {
                    let ps = values
                        .iter()
                        .map(|&v| {
                            if v >= 1.0 && v.fract() == 0.0 {
                                Ok(v as usize)
                            } else {
                                Err(Error::Validation(format!("p grid needs positive integers, got {v}")))
                            }
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let rows: Vec<SummaryRow> =
                        sim::p_sweep(&scenario, &ps)?.iter().flat_map(|(_, r)| SummaryRow::from_result(r)).collect();
                    io::emit_summaries(&rows, format)
                }
            }
        }
        Command::Augment { data, response, cluster, config, p_noise, noise_variance, replications, correction } => {
            let dataset = match data {
                Some(path) => io::load_csv(path, response, cluster, &LoadOptions::default())?,
                None => sim::framingham_like(seed)?,
            };
            let mut study = match config {
                Some(path) => toml::from_str(&std::fs::read_to_string(path)?)?,
                None => AugmentStudy::default(),
            };
            if let Some(s) = cli.seed {
                study.base_seed = s;
            }
            if let Some(v) = p_noise {
                study.p_noise = *v;
            }
            if let Some(v) = noise_variance {
                study.noise_variance = *v;
            }
            if let Some(v) = replications {
                study.replications = *v;
            }
            if let Some(c) = correction {
                study.correction = c.parse()?;
            }
            let results = sim::augment_study(&dataset, &study)?;
            let mut t = Table::new(&["method", "column", "significant_rate", "mean_estimate", "FWER", "FDR", "ci_mean", "ci_sd", "completed", "status"]);
            for r in &results {
                let status = if r.infeasible.is_some() { "infeasible" } else { "ok" };
                for c in &r.columns {
                    t.push(vec![
                        r.label.as_str().into(),
                        c.name.as_str().into(),
                        c.significant_rate.into(),
                        c.mean_estimate.into(),
                        r.fwer.into(),
                        r.fdr.into(),
                        r.ci_mean_length.into(),
                        r.ci_length_sd.into(),
                        r.completed.into(),
                        status.into(),
                    ]);
                }
            }
            t.emit(format)
        }
        Command::Bench { p, methods, repetitions } => {
            let specs = methods.iter().map(|m| m.parse()).collect::<Result<Vec<MethodSpec>>>()?;
            let rows = sim::timing_benchmark(p, &specs, *repetitions, seed)?;
            let mut t = Table::new(&["method", "p", "mean_seconds", "sd_seconds", "repetitions", "status"]);
            for r in &rows {
                t.push(vec![
                    r.label.as_str().into(),
                    r.p.into(),
                    r.mean_seconds.into(),
                    r.sd_seconds.into(),
                    r.repetitions.into(),
                    if r.infeasible { "infeasible" } else { "ok" }.into(),
                ]);
            }
            t.emit(format)
        }
        Command::Generate { scenario } => {
            let dataset = match scenario {
                Some(path) => {
                    let s = load_scenario(path, cli.seed, None)?;
                    sim::generate_dataset(&s, s.base_seed)?.dataset
                }
                None => sim::framingham_like(seed)?,
            };
            io::dataset_to_csv(&dataset)
        }
    }
}

fn raw_table(result: &sim::ScenarioResult) -> Table {
    let mut t = Table::new(&["replication", "method", "status", "selected", "TPR", "any_false", "FDP", "lambda", "acceptance_rate"]);
    for (rep, outcomes) in result.raw.iter().enumerate() {
        for o in outcomes {
            let status = if o.tally.is_some() {
                "ok"
            } else if o.infeasible.is_some() {
                "infeasible"
            } else {
                "failed"
            };
            let (tpr, any_false, fdp, acc) = match &o.tally {
                Some(tl) => {
                    let acc = if tl.sampled > 0 { tl.accepted as f64 / tl.sampled as f64 } else { f64::NAN };
                    (tl.tpr(), tl.any_false_rejection, tl.false_discovery_proportion, acc)
                }
                None => (f64::NAN, false, f64::NAN, f64::NAN),
            };
            t.push(vec![
                rep.into(),
                o.label.as_str().into(),
                status.into(),
                o.selected.as_ref().map(|s| s.to_string()).unwrap_or_default().into(),
                tpr.into(),
                any_false.into(),
                fdp.into(),
                o.lambda.into(),
                acc.into(),
            ]);
        }
    }
    t
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli).and_then(|text| match &cli.out {
        Some(path) => std::fs::write(path, text).map_err(Error::from),
        None => {
            print!("{text}");
            Ok(())
        }
    }) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
