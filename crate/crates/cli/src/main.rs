//! `episcan` command-line interface.
//!
//! Exit codes: 0 success or retain, 3 reject, 1 usage error, 2 data error.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use episcan::io::{atomic_write, format_field, format_table_csv, read_field, write_report, write_table_csv, write_table_json};
use episcan::rng::{stream_rng, tag};
use episcan::{
    gen_ar_field, gen_skewness_change, inject_mean_change, run_experiment, run_test, CoordinateWeight, Decision,
    ExperimentConfig, FractionalBlock, KernelKind, KernelSpec, LatticeShape, MeanEstimator, ObservationField, Scenario,
    StatisticKind, TestConfig, WeightSpec,
};

const EXIT_REJECT: u8 = 3;
const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const THREADS_ENV: &str = "EPISCAN_THREADS";

#[derive(Parser, Debug)]
#[command(name = "episcan", version, about = "Scan lattice data for an epidemic change-set and calibrate with a dependent wild bootstrap")]
struct Cli {
    /// TOML file with [test], [simulate] and [generate] tables; flags take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Test a field file for a change in distribution.
    Test(TestArgs),
    /// Monte Carlo rejection rates on simulated fields.
    Simulate(SimulateArgs),
    /// Write a simulated field file.
    Generate(GenerateArgs),
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TestArgs {
    /// Field CSV with header i1,..,id,x1,..,xp.
    #[arg(long, value_name = "PATH")]
    input: Option<PathBuf>,
    /// cvm or mean.
    #[arg(long)]
    stat: Option<String>,
    /// ar or ma.
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long)]
    q: Option<u32>,
    /// Bootstrap replicates K.
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// global or adapted.
    #[arg(long)]
    mu: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// gaussian:LOC:SCALE or uniform:A:B; repeat once per coordinate, or give one for all.
    #[arg(long)]
    weight: Vec<String>,
    /// Report path; the report goes to stdout when absent.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Include the bootstrap sample in the report.
    #[arg(long)]
    emit_bootstrap: bool,
    /// Smallest scanned block volume as a fraction of the lattice.
    #[arg(long)]
    eps1: Option<f64>,
    /// Largest scanned block volume is (1 - eps2) of the lattice.
    #[arg(long)]
    eps2: Option<f64>,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SimulateArgs {
    /// null, mean or skew.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    /// AR parameter of the data field.
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// Fractional change set t1,t2:g1,g2.
    #[arg(long)]
    change_set: Option<String>,
    /// cvm or mean.
    #[arg(long)]
    stat: Option<String>,
    /// Comma-separated kernels (ar, ma).
    #[arg(long, value_delimiter = ',')]
    kernel: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    q: Option<Vec<u32>>,
    #[arg(long, value_delimiter = ',')]
    alpha: Option<Vec<f64>>,
    /// Comma-separated mean estimators (global, adapted).
    #[arg(long, value_delimiter = ',')]
    mu: Option<Vec<String>>,
    #[arg(long)]
    weight: Vec<String>,
    /// Monte Carlo runs N.
    #[arg(long)]
    runs: Option<usize>,
    /// Bootstrap replicates K.
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eps1: Option<f64>,
    #[arg(long)]
    eps2: Option<f64>,
    /// Directory for rejections.csv and rejections.json; CSV goes to stdout when absent.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenerateArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    a: Option<f64>,
    /// Mean shift on the change set.
    #[arg(long)]
    delta: Option<f64>,
    /// Reflect Y^2 + Y'^2 about 2 on the change set.
    #[arg(long)]
    skew: bool,
    #[arg(long)]
    change_set: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Field path; the CSV goes to stdout when absent.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    test: TestArgs,
    simulate: SimulateArgs,
    generate: GenerateArgs,
}

/// An error with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<episcan::Error> for Failure {
    fn from(e: episcan::Error) -> Self {
        if e.is_usage() {
            Failure::usage(e.to_string())
        } else {
            Failure::data(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<u8, Failure> {
    configure_threads()?;
    let file = match &cli.config {
        Some(path) => load_config(path)?,
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::Test(args) => cmd_test(args, file.test),
        Command::Simulate(args) => cmd_simulate(args, file.simulate),
        Command::Generate(args) => cmd_generate(args, file.generate),
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| Failure::usage(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::usage(format!("cannot configure {threads} worker threads: {e}")))
}

fn load_config(path: &Path) -> Result<ConfigFile, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::usage(format!("invalid config {}: {e}", path.display())))
}

fn parse<T: std::str::FromStr<Err = episcan::Error>>(s: &str) -> Result<T, Failure> {
    s.parse::<T>().map_err(Failure::from)
}

fn weights(list: &[String]) -> Result<WeightSpec, Failure> {
    if list.is_empty() {
        return Ok(WeightSpec::default());
    }
    let coords = list.iter().map(|s| parse::<CoordinateWeight>(s)).collect::<Result<Vec<_>, _>>()?;
    Ok(WeightSpec::new(coords)?)
}

fn size_bounds(eps1: Option<f64>, eps2: Option<f64>) -> Result<Option<(f64, f64)>, Failure> {
    match (eps1, eps2) {
        (None, None) => Ok(None),
        (Some(a), Some(b)) => Ok(Some((a, b))),
        _ => Err(Failure::usage("--eps1 and --eps2 must be given together")),
    }
}

fn pick<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

fn pick_list(flag: Vec<String>, file: Vec<String>) -> Vec<String> {
    if flag.is_empty() {
        file
    } else {
        flag
    }
}

fn cmd_test(args: TestArgs, file: TestArgs) -> Result<u8, Failure> {
    let defaults = TestConfig::default();
    let input = pick(args.input, file.input).ok_or_else(|| Failure::usage("test needs --input PATH"))?;
    let cfg = TestConfig {
        statistic: pick(args.stat, file.stat).map_or(Ok(defaults.statistic), |s| parse::<StatisticKind>(&s))?,
        weight: weights(&pick_list(args.weight, file.weight))?,
        kernel: KernelSpec::new(
            pick(args.kernel, file.kernel).map_or(Ok(defaults.kernel.kind), |s| parse::<KernelKind>(&s))?,
            pick(args.q, file.q).unwrap_or(defaults.kernel.q),
        )?,
        replicates: pick(args.reps, file.reps).unwrap_or(defaults.replicates),
        alpha: pick(args.alpha, file.alpha).unwrap_or(defaults.alpha),
        mean_estimator: pick(args.mu, file.mu).map_or(Ok(defaults.mean_estimator), |s| parse::<MeanEstimator>(&s))?,
        size_bounds: size_bounds(pick(args.eps1, file.eps1), pick(args.eps2, file.eps2))?,
        seed: pick(args.seed, file.seed).unwrap_or(defaults.seed),
        emit_bootstrap: args.emit_bootstrap || file.emit_bootstrap,
        memory_cap_bytes: defaults.memory_cap_bytes,
    };
    // Configuration problems are reported before the data is touched.
    cfg.validate()?;
    let field = read_field(&input).map_err(|e| match e {
        episcan::Error::Io(io) => Failure::data(format!("cannot read {}: {io}", input.display())),
        other => Failure::data(other.to_string()),
    })?;
    let report = run_test(&field, &cfg)?;
    match pick(args.out, file.out) {
        Some(path) => write_report(&path, &report)?,
        None => {
            let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::data(e.to_string()))?;
            println!("{text}");
        }
    }
    eprintln!(
        "statistic {:.6e}, threshold {:.6e}, p-value {:.4}: {}{}",
        report.statistic,
        report.threshold,
        report.p_value,
        report.decision,
        if report.degenerate { " (degenerate data)" } else { "" }
    );
    Ok(match report.decision {
        Decision::Reject => EXIT_REJECT,
        Decision::Retain => 0,
    })
}

fn scenario(kind: &str, delta: Option<f64>, change_set: Option<String>) -> Result<Scenario, Failure> {
    let change_set = || -> Result<FractionalBlock, Failure> {
        parse(change_set.as_deref().ok_or_else(|| Failure::usage(format!("scenario {kind} needs --change-set t1,t2:g1,g2")))?)
    };
    match kind.trim().to_ascii_lowercase().as_str() {
        "null" => {
            if delta.is_some() {
                return Err(Failure::usage("--delta only applies to the mean scenario"));
            }
            Ok(Scenario::Null)
        }
        "mean" => Ok(Scenario::MeanChange {
            delta: delta.ok_or_else(|| Failure::usage("scenario mean needs --delta"))?,
            change_set: change_set()?,
        }),
        "skew" => Ok(Scenario::SkewnessChange { change_set: change_set()? }),
        other => Err(Failure::usage(format!("scenario must be null, mean or skew, got {other:?}"))),
    }
}

fn cmd_simulate(args: SimulateArgs, file: SimulateArgs) -> Result<u8, Failure> {
    let defaults = TestConfig::default();
    let kind = pick(args.scenario, file.scenario).ok_or_else(|| Failure::usage("simulate needs --scenario"))?;
    let scenario = scenario(&kind, pick(args.delta, file.delta), pick(args.change_set, file.change_set))?;
    let kernels = pick(args.kernel, file.kernel)
        .unwrap_or_else(|| vec!["ar".into()])
        .iter()
        .map(|s| parse::<KernelKind>(s))
        .collect::<Result<Vec<_>, _>>()?;
    let mean_estimators = pick(args.mu, file.mu)
        .unwrap_or_else(|| vec!["global".into()])
        .iter()
        .map(|s| parse::<MeanEstimator>(s))
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = ExperimentConfig {
        d: pick(args.d, file.d).unwrap_or(2),
        n: pick(args.n, file.n).ok_or_else(|| Failure::usage("simulate needs --n"))?,
        a: pick(args.a, file.a).ok_or_else(|| Failure::usage("simulate needs --a"))?,
        scenario,
        template: TestConfig {
            statistic: pick(args.stat, file.stat).map_or(Ok(defaults.statistic), |s| parse::<StatisticKind>(&s))?,
            weight: weights(&pick_list(args.weight, file.weight))?,
            replicates: pick(args.reps, file.reps).unwrap_or(defaults.replicates),
            size_bounds: size_bounds(pick(args.eps1, file.eps1), pick(args.eps2, file.eps2))?,
            ..defaults
        },
        kernels,
        qs: pick(args.q, file.q).unwrap_or_else(|| vec![2, 6, 10]),
        alphas: pick(args.alpha, file.alpha).unwrap_or_else(|| vec![0.05, 0.1]),
        mean_estimators,
        runs: pick(args.runs, file.runs).unwrap_or(200),
        seed: pick(args.seed, file.seed).unwrap_or(0),
    };
    cfg.validate()?;
    let table = run_experiment(&cfg)?;
    match pick(args.out, file.out) {
        Some(dir) => {
            fs::create_dir_all(&dir).map_err(|e| Failure::data(format!("cannot create {}: {e}", dir.display())))?;
            write_table_csv(dir.join("rejections.csv"), &table)?;
            write_table_json(dir.join("rejections.json"), &table)?;
        }
        None => {
            let csv = format_table_csv(&table)?;
            std::io::stdout().write_all(&csv).map_err(|e| Failure::data(e.to_string()))?;
        }
    }
    eprintln!("{} cells x {} runs in {} ms", table.rows.len(), cfg.runs, table.runtime_ms);
    Ok(0)
}

fn cmd_generate(args: GenerateArgs, file: GenerateArgs) -> Result<u8, Failure> {
    let n = pick(args.n, file.n).ok_or_else(|| Failure::usage("generate needs --n"))?;
    let d = pick(args.d, file.d).unwrap_or(2);
    let a = pick(args.a, file.a).ok_or_else(|| Failure::usage("generate needs --a"))?;
    let seed = pick(args.seed, file.seed).unwrap_or(0);
    let skew = args.skew || file.skew;
    let delta = pick(args.delta, file.delta);
    let change_set = pick(args.change_set, file.change_set)
        .map(|s| parse::<FractionalBlock>(&s))
        .transpose()?;
    let shape = LatticeShape::cube(d, n)?;
    let mut rng = stream_rng(seed, tag::DATA);
    let field: ObservationField<f64> = match (skew, delta, change_set) {
        (true, Some(_), _) => return Err(Failure::usage("--skew and --delta are mutually exclusive")),
        (true, None, Some(c)) => gen_skewness_change(&shape, a, &c, &mut rng)?,
        (false, Some(delta), Some(c)) => inject_mean_change(&gen_ar_field(&shape, a, &mut rng)?, delta, &c)?,
        (_, _, None) if skew || delta.is_some() => return Err(Failure::usage("--delta and --skew need --change-set")),
        (false, None, Some(_)) => return Err(Failure::usage("--change-set needs --delta or --skew")),
        _ => gen_ar_field(&shape, a, &mut rng)?,
    };
    let bytes = format_field(&field)?;
    match pick(args.out, file.out) {
        Some(path) => atomic_write(&path, &bytes)?,
        None => std::io::stdout().write_all(&bytes).map_err(|e| Failure::data(e.to_string()))?,
    }
    Ok(0)
}
