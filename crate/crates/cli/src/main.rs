//! `drisk`: disclosure risk estimation from the command line.
//!
//! Errors are reported on one line as `error[<kind>]: <message>` with kind one
//! of `usage`, `csv`, `schema`, `config`, `io` or `estimate`.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use disclosure_risk::argus::PostStrataSpec;
use disclosure_risk::experiment::{
    fmt_float, run_experiment, write_report, EstimationContext, ExperimentConfig, MethodSpec,
    PopulationConfig,
};
use disclosure_risk::io;
use disclosure_risk::loglinear::LoglinModel;
use disclosure_risk::smoothing::BoundaryMode;
use disclosure_risk::synth::{draw_sample, gen_population, true_risk};
use disclosure_risk::{ingest_microdata, Error, FreqTable};

#[derive(Parser)]
#[command(
    name = "drisk",
    version,
    about = "Disclosure risk of sample frequency tables"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic population table.
    Gen {
        /// TOML population spec, or an experiment config with a [population] section.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_expected: Option<f64>,
        /// Output CSV; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Draw a Bernoulli sample from a population table.
    Sample {
        #[arg(long)]
        population: PathBuf,
        #[arg(long)]
        pi: f64,
        #[arg(long)]
        seed: u64,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Exact risk of a sample against its population.
    Truth {
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        population: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Estimate risk from a sample with one method.
    Estimate(EstimateArgs),
    /// Run a replicated experiment from a config file.
    Experiment {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        pi: Option<f64>,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        threads: Option<usize>,
        /// Report CSV path; the JSON sidecar goes next to it.
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Skip the summary table on stdout.
        #[arg(long)]
        quiet: bool,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Argus,
    LoglinIndependence,
    LoglinTwoWay,
    Smooth,
}

#[derive(clap::Args)]
struct EstimateArgs {
    #[arg(long, value_enum)]
    method: Method,
    /// Sample frequency table.
    #[arg(
        long,
        required_unless_present = "microdata",
        conflicts_with = "microdata"
    )]
    sample: Option<PathBuf>,
    /// Integer-coded sample records, used instead of --sample.
    #[arg(long)]
    microdata: Option<PathBuf>,
    /// Microdata columns kept out of the table (e.g. Argus strata).
    #[arg(long, value_delimiter = ',', requires = "microdata")]
    auxiliary: Vec<String>,
    /// Sampling fraction; defaults to n/N when N is known.
    #[arg(long)]
    pi: Option<f64>,
    /// Population size N; defaults to the population total or the margin sum.
    #[arg(long)]
    population_size: Option<f64>,
    /// Known population table, for Argus margins and N.
    #[arg(long)]
    population: Option<PathBuf>,
    /// Post-stratum population margins CSV for Argus.
    #[arg(long)]
    margins: Option<PathBuf>,
    /// Argus strata taken from the population table.
    #[arg(long, value_delimiter = ',')]
    strata: Vec<String>,
    #[arg(long, default_value_t = 3)]
    c: u32,
    #[arg(long)]
    d: Option<u32>,
    #[arg(long, default_value_t = 2)]
    degree: u32,
    #[arg(long, value_delimiter = ',')]
    fixed: Vec<String>,
    #[arg(long, value_enum, default_value_t = Boundary::ZeroFill)]
    boundary: Boundary,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Write one row per sample unique to this CSV (`-` for stdout).
    #[arg(long)]
    per_cell: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Boundary {
    ZeroFill,
    Shrink,
}

struct CliError {
    kind: &'static str,
    message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Csv(_) => "csv",
            Error::Schema(_) | Error::LevelOutOfRange { .. } | Error::TableMismatch(_) => "schema",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::InvalidParameter(_) | Error::Strata(_) => "estimate",
        };
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> CliError {
    CliError {
        kind: "usage",
        message: message.into(),
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn emit(path: Option<&Path>, bytes: &[u8]) -> CliResult {
    match path {
        Some(p) if p != Path::new("-") => io::write_atomic(p, bytes)?,
        _ => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| CliError::from(Error::Io(e)))?,
    }
    Ok(())
}

fn read_population_config(path: &Path) -> CliResult<PopulationConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::from(Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        )))
    })?;
    Ok(PopulationConfig::from_toml(&text)?)
}

fn cmd_gen(
    spec: &Path,
    seed: Option<u64>,
    n_expected: Option<f64>,
    output: Option<&Path>,
) -> CliResult {
    let mut cfg = read_population_config(spec)?;
    if cfg.path.is_some() {
        return Err(usage("population spec names a file; nothing to generate"));
    }
    if seed.is_some() {
        cfg.seed = seed;
    }
    if n_expected.is_some() {
        cfg.n_expected = n_expected;
    }
    let spec = cfg.spec(0)?;
    let population = gen_population(&spec)?;
    emit(output, &io::table_to_bytes(&population))
}

fn cmd_sample(population: &Path, pi: f64, seed: u64, output: Option<&Path>) -> CliResult {
    let population = io::read_table_path(population, None)?;
    let sample = draw_sample(&population, pi, seed)?;
    emit(output, &io::table_to_bytes(&sample))
}

fn cmd_truth(sample: &Path, population: &Path, json: bool) -> CliResult {
    let population = io::read_table_path(population, None)?;
    let sample = io::read_table_path(sample, Some(population.schema_arc().clone()))?;
    let truth = true_risk(&sample, &population)?;
    let out = if json {
        format!(
            "{{\"tau1\":{},\"tau2\":{},\"unique_count\":{},\"population_uniques\":{}}}\n",
            truth.tau1,
            fmt_float(truth.tau2),
            truth.unique_count,
            truth.population_uniques
        )
    } else {
        format!(
            "tau1={}\ntau2={}\nunique_count={}\npopulation_uniques={}\n",
            truth.tau1,
            fmt_float(truth.tau2),
            truth.unique_count,
            truth.population_uniques
        )
    };
    emit(None, out.as_bytes())
}

fn cmd_estimate(args: &EstimateArgs) -> CliResult {
    let population = args
        .population
        .as_deref()
        .map(|p| io::read_table_path(p, None))
        .transpose()?;
    let schema = population.as_ref().map(|p| p.schema_arc().clone());
    let microdata = match &args.microdata {
        Some(path) => {
            let file = std::fs::File::open(path).map_err(|e| {
                CliError::from(Error::Io(std::io::Error::new(
                    e.kind(),
                    format!("{}: {e}", path.display()),
                )))
            })?;
            Some(io::read_microdata(
                std::io::BufReader::new(file),
                &args.auxiliary,
                schema.clone(),
            )?)
        }
        None => None,
    };
    let sample: FreqTable = match (&microdata, &args.sample) {
        (Some(md), _) => ingest_microdata(md)?,
        (None, Some(path)) => io::read_table_path(path, schema)?,
        (None, None) => return Err(usage("one of --sample or --microdata is required")),
    };
    let margins: Option<PostStrataSpec> = args
        .margins
        .as_deref()
        .map(|p| -> CliResult<PostStrataSpec> {
            let file = std::fs::File::open(p).map_err(|e| {
                CliError::from(Error::Io(std::io::Error::new(
                    e.kind(),
                    format!("{}: {e}", p.display()),
                )))
            })?;
            Ok(io::read_margins(std::io::BufReader::new(file))?)
        })
        .transpose()?;

    let n = sample.total() as f64;
    let known_size = args
        .population_size
        .or(population.as_ref().map(|p| p.total() as f64))
        .or(margins
            .as_ref()
            .map(|m| m.population_margins.values().sum::<f64>()));
    let (pi, population_size) = match (args.pi, known_size) {
        (Some(pi), Some(size)) => (pi, size),
        (Some(pi), None) => (pi, n / pi),
        (None, Some(size)) if size > 0.0 => (n / size, size),
        _ => {
            return Err(usage(
                "--pi is required unless the population size is known",
            ))
        }
    };

    let method = match args.method {
        Method::Argus => MethodSpec::Argus {
            strata: args.strata.clone(),
            label: None,
        },
        Method::LoglinIndependence | Method::LoglinTwoWay => MethodSpec::Loglin {
            model: if args.method == Method::LoglinTwoWay {
                LoglinModel::TwoWay
            } else {
                LoglinModel::Independence
            },
            tol: args.tol,
            max_iter: args.max_iter,
            label: None,
        },
        Method::Smooth => MethodSpec::Smooth {
            fixed: args.fixed.clone(),
            c: args.c,
            d: args.d,
            degree: args.degree,
            boundary: match args.boundary {
                Boundary::ZeroFill => BoundaryMode::ZeroFill,
                Boundary::Shrink => BoundaryMode::Shrink,
            },
            tol: args.tol,
            max_iter: args.max_iter,
            label: None,
        },
    };
    method.validate(sample.schema())?;
    let ctx = EstimationContext {
        pi,
        population_size,
        population: population.as_ref(),
        margins: margins.as_ref(),
        microdata: microdata.as_ref(),
    };
    let est = method.estimate(&sample, &ctx)?;

    if let Some(path) = &args.per_cell {
        let param = match args.method {
            Method::Argus => "f_hat",
            Method::LoglinIndependence | Method::LoglinTwoWay => "n_gamma_hat",
            Method::Smooth => "lambda_hat",
        };
        let mut out = String::new();
        for a in sample.schema().attributes() {
            let _ = write!(out, "{},", a.name);
        }
        let _ = writeln!(out, "{param},p_unique,e_inv,flagged");
        for cell in &est.cells {
            for v in cell.key.coords() {
                let _ = write!(out, "{v},");
            }
            let _ = writeln!(
                out,
                "{},{},{},{}",
                fmt_float(cell.param),
                fmt_float(cell.p_unique),
                fmt_float(cell.e_inv),
                cell.flagged
            );
        }
        emit(Some(path), out.as_bytes())?;
        if path == Path::new("-") {
            return Ok(());
        }
    }
    let summary = format!(
        "method={}\npi={}\npopulation_size={}\ntau1={}\ntau2={}\nunique_count={}\ndiagnostics={}\n",
        method.label(),
        fmt_float(pi),
        fmt_float(population_size),
        fmt_float(est.tau1),
        fmt_float(est.tau2),
        est.unique_count(),
        est.diagnostics
    );
    emit(None, summary.as_bytes())
}

#[allow(clippy::too_many_arguments)]
fn cmd_experiment(
    config: &Path,
    seed: Option<u64>,
    pi: Option<f64>,
    replicates: Option<usize>,
    threads: Option<usize>,
    output: Option<PathBuf>,
    quiet: bool,
) -> CliResult {
    let mut cfg = ExperimentConfig::from_path(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(p) = pi {
        cfg.pi = p;
    }
    if let Some(r) = replicates {
        cfg.replicates = r;
    }
    if threads.is_some() {
        cfg.threads = threads;
    }
    if let Some(o) = output {
        cfg.output.path = Some(o);
        cfg.output.sidecar = None;
    }
    cfg.validate()?;
    if cfg.output.path.is_none() {
        return Err(usage("no report path: set output.path or pass --output"));
    }
    let report = run_experiment(&cfg)?;
    write_report(&report, &cfg)?;
    if !quiet {
        emit(None, report.render_table().as_bytes())?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Gen {
            spec,
            seed,
            n_expected,
            output,
        } => cmd_gen(&spec, seed, n_expected, output.as_deref()),
        Command::Sample {
            population,
            pi,
            seed,
            output,
        } => cmd_sample(&population, pi, seed, output.as_deref()),
        Command::Truth {
            sample,
            population,
            json,
        } => cmd_truth(&sample, &population, json),
        Command::Estimate(args) => cmd_estimate(&args),
        Command::Experiment {
            config,
            seed,
            pi,
            replicates,
            threads,
            output,
            quiet,
        } => cmd_experiment(&config, seed, pi, replicates, threads, output, quiet),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind, e.message.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
