//! `isolate`: risk-set matching and sensitivity analysis from the command line.
//!
//! Exit codes: 0 success, 2 schema or configuration error (including unknown
//! variables), 3 no matched sets could be formed, 4 the estimating equation
//! has no root in the search bracket, 1 anything else.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use isolate_core::balance::{balance_table, outcome_boxplot_data, qq_data};
use isolate_core::inference::{infer_proportional, infer_tobit, Direction, GammaLevel, InferenceOptions};
use isolate_core::io::{
    read_cohort, read_design, write_balance_csv, write_cohort, write_design, write_plots_json,
    write_report_json, write_report_table, write_unmatched, OutcomePlots, QqSeries, RunConfig,
};
use isolate_core::matching::{build_risk_set_match, MatchDesign};
use isolate_core::model::Cohort;
use isolate_core::simulate::{simulate_cohort, write_truth_json, SimSpec};
use isolate_core::Error;

#[derive(Parser)]
#[command(name = "isolate", version, about = "Risk-set matching with differential comparisons")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a risk-set matched design. The unmatched log is written next to
    /// the design as `<stem>.unmatched.csv`.
    Match(MatchArgs),
    /// Balance table plus quantile-quantile and boxplot data (`<stem>.plots.json`).
    Balance(BalanceArgs),
    /// Sensitivity analysis over a grid of Γ. The table goes to `<stem>.csv`.
    Infer(InferArgs),
    /// Simulate a cohort. Latent truth goes to `<stem>.truth.json`.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_design: PathBuf,
}

#[derive(Args)]
struct BalanceArgs {
    #[arg(long)]
    design: PathBuf,
    #[arg(long)]
    cohort: PathBuf,
    /// Comma-separated variables; falls back to `output.balance_vars`.
    #[arg(long, value_delimiter = ',')]
    vars: Vec<String>,
    /// Outcomes for the plot data; defaults to every outcome all members carry.
    #[arg(long, value_delimiter = ',')]
    outcomes: Vec<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Tobit,
    Ratio,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Less,
    Greater,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    design: PathBuf,
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    outcome: Option<String>,
    #[arg(long)]
    dose: Option<String>,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long, value_delimiter = ',')]
    gammas: Vec<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    direction: Option<DirectionArg>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Match(a) => run_match(a),
        Command::Balance(a) => run_balance(a),
        Command::Infer(a) => run_infer(a),
        Command::Simulate(a) => run_simulate(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let Some(core) = e.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return 1;
    };
    match core {
        Error::Schema(_)
        | Error::Config(_)
        | Error::UnknownVariable(_)
        | Error::MissingOutcome { .. }
        | Error::MissingEvent { .. }
        | Error::Csv(_) => 2,
        Error::EmptyDesign | Error::InfeasibleStratum | Error::EmptyPool => 3,
        Error::BracketFailure { .. } | Error::ZeroDoseEffect(_) => 4,
        _ => 1,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("ISOLATE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("ISOLATE_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn load_cohort(path: &Path) -> Result<Cohort> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_cohort(BufReader::new(f)).with_context(|| format!("reading cohort {}", path.display()))
}

fn load_design(path: &Path) -> Result<MatchDesign> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_design(BufReader::new(f)).with_context(|| format!("reading design {}", path.display()))
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn run_match(a: MatchArgs) -> Result<()> {
    let config = load_config(&a.config)?;
    let cohort = load_cohort(&a.cohort)?;
    if cohort.is_empty() {
        return Err(anyhow!(Error::EmptyDesign).context("the cohort has no subjects"));
    }
    if let Some(states) = &config.states {
        cohort.check_states(&states.to_space()?)?;
    }
    let design = build_risk_set_match(&cohort, &config.eligibility()?, &config.distance()?)?;
    if design.sets.is_empty() {
        return Err(Error::EmptyDesign.into());
    }
    log::info!(
        "{} sets, {} treated left unmatched",
        design.sets.len(),
        design.unmatched_treated.len()
    );
    let mut w = create(&a.out_design)?;
    write_design(&design, &mut w)?;
    w.flush()?;
    let mut w = create(&sibling(&a.out_design, "unmatched.csv"))?;
    write_unmatched(&design.unmatched_treated, &mut w)?;
    w.flush()?;
    Ok(())
}

fn shared_outcomes(design: &MatchDesign, cohort: &Cohort) -> Result<Vec<String>> {
    let mut common: Option<BTreeSet<String>> = None;
    for id in design.sets.iter().flat_map(|s| s.members()) {
        let names: BTreeSet<String> = cohort.require(id)?.outcomes().keys().cloned().collect();
        common = Some(match common {
            None => names,
            Some(c) => c.intersection(&names).cloned().collect(),
        });
    }
    Ok(common.unwrap_or_default().into_iter().collect())
}

fn run_balance(a: BalanceArgs) -> Result<()> {
    let config = a.config.as_deref().map(load_config).transpose()?;
    let vars = if a.vars.is_empty() {
        config.map(|c| c.output.balance_vars).unwrap_or_default()
    } else {
        a.vars
    };
    if vars.is_empty() {
        return Err(Error::Config("no balance variables given".into()).into());
    }
    let design = load_design(&a.design)?;
    let cohort = load_cohort(&a.cohort)?;
    let table = balance_table(&design, &cohort, &vars)?;

    let outcomes = if a.outcomes.is_empty() {
        shared_outcomes(&design, &cohort)?
    } else {
        a.outcomes
    };
    let ks: BTreeSet<u32> = design.sets.iter().map(|s| s.k).collect();
    let plots = outcomes
        .into_iter()
        .map(|outcome| {
            let mut qq = vec![QqSeries {
                k: None,
                points: qq_data(&design, &cohort, &outcome, None)?,
            }];
            for &k in &ks {
                qq.push(QqSeries {
                    k: Some(k),
                    points: qq_data(&design, &cohort, &outcome, Some(k))?,
                });
            }
            let boxplots = outcome_boxplot_data(&design, &cohort, &outcome)?;
            Ok(OutcomePlots { outcome, qq, boxplots })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut w = create(&a.out)?;
    write_balance_csv(&table, &mut w)?;
    w.flush()?;
    let mut w = create(&sibling(&a.out, "plots.json"))?;
    write_plots_json(&plots, &mut w)?;
    w.flush()?;
    Ok(())
}

fn run_infer(a: InferArgs) -> Result<()> {
    let config = a.config.as_deref().map(load_config).transpose()?;
    let mut opts = match &config {
        Some(c) => c.inference_options()?,
        None => InferenceOptions::default(),
    };
    if !a.gammas.is_empty() {
        opts.gammas = a.gammas.iter().map(|&g| GammaLevel::new(g)).collect::<Result<_, _>>()?;
    }
    if let Some(alpha) = a.alpha {
        opts.alpha = alpha;
    }
    if let Some(d) = a.direction {
        opts.direction = match d {
            DirectionArg::Less => Direction::Less,
            DirectionArg::Greater => Direction::Greater,
        };
    }
    let inference = config.as_ref().map(|c| &c.inference);
    let outcome = a
        .outcome
        .or_else(|| inference.map(|i| i.outcome.clone()))
        .ok_or_else(|| Error::Config("no outcome given".into()))?;
    let dose = a.dose.or_else(|| inference.and_then(|i| i.dose.clone()));
    let model = match a.model {
        Some(m) => m,
        None => match inference.map(|i| i.model) {
            Some(isolate_core::inference::EffectModel::Ratio) => ModelArg::Ratio,
            _ => ModelArg::Tobit,
        },
    };
    let amplification = config.as_ref().is_none_or(|c| c.output.amplification);

    let design = load_design(&a.design)?;
    let cohort = load_cohort(&a.cohort)?;
    let report = match model {
        ModelArg::Tobit => infer_tobit(&design, &cohort, &outcome, &opts)?,
        ModelArg::Ratio => {
            let dose = dose.ok_or_else(|| Error::Config("the ratio model needs --dose".into()))?;
            infer_proportional(&design, &cohort, &outcome, &dose, &opts)?
        }
    };

    let mut w = create(&a.out)?;
    write_report_json(&report, amplification, &mut w)?;
    w.flush()?;
    let mut w = create(&sibling(&a.out, "csv"))?;
    write_report_table(&report, &mut w)?;
    w.flush()?;
    Ok(())
}

fn run_simulate(a: SimulateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.spec).with_context(|| format!("reading {}", a.spec.display()))?;
    let spec = SimSpec::from_toml(&text)?;
    let out = simulate_cohort(&spec)?;
    let mut w = create(&a.out)?;
    write_cohort(&out.cohort, &mut w)?;
    w.flush()?;
    let mut w = create(&sibling(&a.out, "truth.json"))?;
    write_truth_json(&out.truth, &mut w)?;
    w.flush()?;
    Ok(())
}
