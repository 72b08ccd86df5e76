use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctsnmm::harness::{self, AnalysisPlan, McSummary};
use ctsnmm::io::{read_dataset, write_long_csv, write_subject_csv};
use ctsnmm::rng::{StreamRng, DATASET};
use ctsnmm::snmm::{self, PipelineOptions};
use ctsnmm::{simgen, Error};

mod config;

use config::{AnalyzeFile, GenerateFile, SimulateFile};

const EXIT_IDENTIFICATION: u8 = 1;
const EXIT_FLAGGED: u8 = 2;
const EXIT_CONFIG: u8 = 64;
const EXIT_SCHEMA: u8 = 65;
const EXIT_IO: u8 = 74;

#[derive(Parser, Debug)]
#[command(name = "ctsnmm", version)]
#[command(about = "Continuous-time structural nested mean models", long_about = None)]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run Monte Carlo scenarios and write bias/SE/rMSE/coverage tables.
    Simulate(SimulateArgs),
    /// Estimate the blip parameters from long-format and subject CSVs.
    Analyze(AnalyzeArgs),
    /// Write one simulated dataset as CSV.
    Generate(CommonArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, env = "CTSNMM_THREADS")]
    threads: Option<usize>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Overrides the replicate count of every scenario.
    #[arg(long)]
    replicates: Option<usize>,
    /// Overrides the bootstrap size of every scenario; 0 skips coverage.
    #[arg(long)]
    bootstrap: Option<usize>,
    /// Full protocol: 1000 replicates and 100 resamples, applied before overrides.
    #[arg(long)]
    full: bool,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Bootstrap resamples; 0 reports point estimates only.
    #[arg(long)]
    bootstrap: Option<usize>,
    /// Long-format visit file; overrides the config.
    #[arg(long)]
    long: Option<PathBuf>,
    /// Subject-level file; overrides the config.
    #[arg(long)]
    subjects: Option<PathBuf>,
}

#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => EXIT_CONFIG,
            Error::Schema(_)
            | Error::InvalidData(_)
            | Error::VisitBeyondTau { .. }
            | Error::MissingOutcome(_)
            | Error::EmptySubjects => EXIT_SCHEMA,
            Error::Csv(c) if c.is_io_error() => EXIT_IO,
            Error::Csv(_) => EXIT_SCHEMA,
            Error::Io(_) => EXIT_IO,
            _ => EXIT_IDENTIFICATION,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::io(format!("cannot create {}: {e}", dir.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(format!("cannot create {}: {e}", path.display())))
}

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::io(format!("cannot open {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}

fn init_threads(threads: Option<usize>) -> Result<(), CliError> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(CliError::config("threads must be >= 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::config(format!("threads: {e}")))
}

fn simulate(args: &SimulateArgs) -> Result<u8, CliError> {
    let file: SimulateFile = config::load(&args.common.config, |f: &SimulateFile| f.schema)?;
    let mut scenarios = file.scenarios;
    for s in &mut scenarios {
        if args.full {
            *s = s.clone().full_protocol();
        }
        if let Some(seed) = args.common.seed {
            s.seed = seed;
        }
        if let Some(r) = args.replicates {
            s.replicates = r;
        }
        if let Some(b) = args.bootstrap {
            s.bootstrap_b = b;
        }
        s.validate()?;
    }
    let out = &args.common.out;
    create_dir(out)?;
    let mut summaries: Vec<McSummary> = Vec::new();
    for (k, scenario) in scenarios.iter().enumerate() {
        let results = harness::run_replicates(scenario)?;
        let summary = harness::summarize(scenario, &results)?;
        let stem = format!("scenario_{:02}", k + 1);
        harness::write_summary_csv(
            std::slice::from_ref(&summary),
            create(&out.join(format!("{stem}.csv")))?,
        )?;
        harness::write_replicates_csv(
            &results,
            create(&out.join(format!("{stem}_replicates.csv")))?,
        )?;
        eprintln!(
            "{}: {} replicates, {} failed",
            summary.label, summary.replicates, summary.failure_count
        );
        summaries.push(summary);
    }
    harness::emit_table(
        &summaries,
        create(&out.join("report.csv"))?,
        create(&out.join("report.txt"))?,
    )?;
    Ok(if summaries.iter().any(McSummary::flagged) {
        EXIT_FLAGGED
    } else {
        0
    })
}

fn cox_table(title: &str, fit: &ctsnmm::cox::CoxFit) -> String {
    let mut s = format!(
        "{title}\n{:<24} {:>10} {:>10} {:>9}\n",
        "term", "estimate", "se", "p-value"
    );
    for row in fit.coefficient_table() {
        let line = format!(
            "{:<24} {:>10.4} {:>10.4} {:>9.4} {}",
            row.name,
            row.estimate,
            row.se,
            row.p_value,
            ctsnmm::cox::significance_code(row.p_value)
        );
        s.push_str(line.trim_end());
        s.push('\n');
    }
    s
}

fn resolve(
    base: &Path,
    flag: &Option<PathBuf>,
    config: &Option<PathBuf>,
    what: &str,
) -> Result<PathBuf, CliError> {
    match (flag, config) {
        (Some(p), _) => Ok(p.clone()),
        (None, Some(p)) => Ok(base.join(p)),
        (None, None) => Err(CliError::config(format!(
            "{what}: no file given in the config or on the command line"
        ))),
    }
}

fn analyze(args: &AnalyzeArgs) -> Result<u8, CliError> {
    let file: AnalyzeFile = config::load(&args.common.config, |f: &AnalyzeFile| f.schema)?;
    let study = file.study()?;
    let base = args.common.config.parent().unwrap_or(Path::new("."));
    let long = resolve(base, &args.long, &file.long, "long")?;
    let subjects_path = resolve(base, &args.subjects, &file.subjects, "subjects")?;
    let bootstrap = args.bootstrap.unwrap_or(file.bootstrap);
    if bootstrap == 1 {
        return Err(CliError::config("bootstrap must be 0 or >= 2"));
    }
    let subjects = read_dataset(
        open(&long)?,
        open(&subjects_path)?,
        file.tau,
        &study.ti_names,
        &study.td_names,
    )?;
    let options = PipelineOptions {
        outcome_model: file.outcome_model,
        ..PipelineOptions::default()
    };
    let plan = AnalysisPlan {
        estimators: file.estimators.clone(),
        intervals: if bootstrap == 0 {
            Vec::new()
        } else {
            file.estimators.clone()
        },
        bootstrap_b: bootstrap,
        bins: file.bins,
        seed: args.common.seed.unwrap_or(file.seed),
        replicate: 0,
    };
    let result = harness::analyze(&subjects, &study, &options, &plan)?;
    let out = &args.common.out;
    create_dir(out)?;
    snmm::write_estimates_csv(&result.estimates, create(&out.join("estimates.csv"))?)?;
    let mut report = format!(
        "{} subjects, tau = {}, bootstrap resamples = {}\n\n",
        subjects.len(),
        file.tau,
        bootstrap
    );
    report.push_str(&snmm::format_estimates_table(&result.estimates));
    if let Some(fit) = &result.fit {
        fit.treatment_fit
            .write_coefficient_csv(create(&out.join("treatment_model.csv"))?)?;
        report.push('\n');
        report.push_str(&cox_table("Treatment initiation model", &fit.treatment_fit));
        if let Some(c) = &fit.censoring_fit {
            c.write_coefficient_csv(create(&out.join("censoring_model.csv"))?)?;
            report.push('\n');
            report.push_str(&cox_table("Censoring model", c));
        }
        let d = &fit.diagnostics;
        report.push_str(&format!(
            "\nstacked rows: {}; censoring weights clamped: {}; variance fallbacks: {}\n",
            d.n_rows, d.ipcw_clamped, d.variance_fallbacks
        ));
    }
    write_text(&out.join("report.txt"), &report)?;
    print!("{}", snmm::format_estimates_table(&result.estimates));
    Ok(0)
}

fn generate(args: &CommonArgs) -> Result<u8, CliError> {
    let file: GenerateFile = config::load(&args.config, |f: &GenerateFile| f.schema)?;
    let mut gen = file.generator;
    if let Some(seed) = args.seed {
        gen.seed = seed;
    }
    gen.validate()?;
    let mut rng = StreamRng::new(gen.seed, &[DATASET, file.replicate]);
    let subjects = simgen::gen_dataset_with(&gen, &mut rng)?;
    let study = gen.study();
    create_dir(&args.out)?;
    write_long_csv(
        &subjects,
        &study.ti_names,
        &study.td_names,
        create(&args.out.join("long.csv"))?,
    )?;
    write_subject_csv(&subjects, create(&args.out.join("subjects.csv"))?)?;
    Ok(0)
}

fn run(cli: &Cli) -> Result<u8, CliError> {
    match &cli.command {
        Command::Simulate(a) => {
            init_threads(a.common.threads)?;
            simulate(a)
        }
        Command::Analyze(a) => {
            init_threads(a.common.threads)?;
            analyze(a)
        }
        Command::Generate(a) => {
            init_threads(a.threads)?;
            generate(a)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
