use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use resi::analysis::{analyze, AnalysisConfig};
use resi::benchmark::{run_benchmark, Preset};
use resi::design::DataTable;
use resi::models::{CovMode, FamilyKind};
use resi::simlab::{builtin_grid, parse_grid, reports_to_csv, run_grid, BUILTIN_GRIDS};

#[derive(Parser, Debug)]
#[command(name = "resi", version, about = "Robust effect size index for linear and logistic regression")]
struct Cli {
    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Coefficient and Type-II ANOVA tables for a CSV dataset.
    Analyze(AnalyzeArgs),
    /// Runs a simulation grid and writes one CSV row per cell and estimator.
    Simulate(SimulateArgs),
    /// Times the asymptotic analysis against the bootstrap on synthetic data.
    Benchmark(BenchmarkArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Json,
    Csv,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Family {
    Linear,
    Logistic,
}

impl From<Family> for FamilyKind {
    fn from(f: Family) -> Self {
        match f {
            Family::Linear => FamilyKind::Linear,
            Family::Logistic => FamilyKind::Logistic,
        }
    }
}

#[derive(Args, Debug)]
struct Common {
    /// Significance level of the intervals.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,

    /// Bootstrap replicates (at least 100); omitted means no bootstrap.
    #[arg(long)]
    bootstrap: Option<usize>,

    /// Seed of the bootstrap streams and of the benchmark data.
    #[arg(long, default_value_t = 1)]
    seed: u64,

    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,

    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// CSV file with a header row and numeric columns.
    #[arg(long)]
    input: PathBuf,

    /// Outcome column (0/1 for logistic).
    #[arg(long)]
    outcome: String,

    #[arg(long, value_enum)]
    family: Family,

    /// Terms such as `bin(dx) + ns(age,3) + dx:ns(age,3)`.
    #[arg(long)]
    terms: String,

    /// hc0, hc3 or model; defaults to hc3 (linear) or hc0 (logistic).
    #[arg(long)]
    cov: Option<String>,

    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Grid file, or the name of a bundled grid.
    grid: String,

    /// Print the number of scenario cells and exit.
    #[arg(long)]
    dry_run: bool,

    /// Overrides the replicate count of the grid.
    #[arg(long)]
    replicates: Option<usize>,

    /// csv or json.
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,

    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    /// small (linear, n = 245) or large (logistic, n = 20000).
    #[arg(long, default_value = "small")]
    preset: String,

    #[command(flatten)]
    common: Common,
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<()> {
    let data = DataTable::from_csv_path(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let mut cfg = AnalysisConfig::new(&a.outcome, a.family.into(), &a.terms);
    cfg.cov = a.cov.as_deref().map(str::parse::<CovMode>).transpose()?;
    cfg.alpha = a.common.alpha;
    cfg.bootstrap = a.common.bootstrap;
    cfg.seed = a.common.seed;
    let report = analyze(&data, &cfg)?;
    let text = match a.common.format {
        Format::Table => report.to_table(),
        Format::Json => report.to_json()? + "\n",
        Format::Csv => report.to_csv()?,
    };
    emit(a.common.out.as_deref(), &text)
}

fn grid_text(name: &str) -> Result<String> {
    let path = Path::new(name);
    if path.exists() {
        return fs::read_to_string(path).with_context(|| format!("reading {name}"));
    }
    match builtin_grid(name) {
        Some(t) => Ok(t.to_string()),
        None => {
            let known: Vec<&str> = BUILTIN_GRIDS.iter().map(|(n, _)| *n).collect();
            bail!("no grid file `{name}` (bundled grids: {})", known.join(", "))
        }
    }
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let mut grid = parse_grid(&grid_text(&a.grid)?)?;
    if let Some(r) = a.replicates {
        grid.replicates = r;
    }
    if a.dry_run {
        return emit(a.out.as_deref(), &format!("{}\n", grid.scenarios.len()));
    }
    info!("running {} cells with {} replicates", grid.scenarios.len(), grid.replicates);
    let reports = run_grid(&grid.scenarios, grid.replicates, grid.alpha, None)?;
    let text = match a.format {
        Format::Csv => reports_to_csv(&reports)?,
        Format::Json => serde_json::to_string_pretty(&reports)? + "\n",
        Format::Table => bail!("simulate writes csv or json"),
    };
    emit(a.out.as_deref(), &text)
}

fn cmd_benchmark(a: BenchmarkArgs) -> Result<()> {
    let preset: Preset = a.preset.parse()?;
    let b = a.common.bootstrap.unwrap_or(resi::bootstrap::DEFAULT_REPLICATES);
    let r = run_benchmark(preset, b, a.common.alpha, a.common.seed)?;
    let text = match a.common.format {
        Format::Json => serde_json::to_string_pretty(&r)? + "\n",
        Format::Csv => format!(
            "preset,n,bootstrap,asymptotic_seconds,bootstrap_seconds,ratio,max_endpoint_gap\n{},{},{},{},{},{},{}\n",
            r.preset.name(),
            r.n,
            r.bootstrap,
            r.asymptotic_seconds,
            r.bootstrap_seconds,
            r.ratio,
            r.max_endpoint_gap
        ),
        Format::Table => format!(
            "preset {}, n = {}, bootstrap B = {}\nasymptotic {:.3} s, bootstrap {:.3} s, ratio {:.1}\nlargest endpoint gap {:.6}\n\n{}",
            r.preset.name(),
            r.n,
            r.bootstrap,
            r.asymptotic_seconds,
            r.bootstrap_seconds,
            r.ratio,
            r.max_endpoint_gap,
            r.report.to_table()
        ),
    };
    emit(a.common.out.as_deref(), &text)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(k) = cli.threads {
        if k == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(k).build_global()?;
    }
    match cli.command {
        Command::Analyze(a) => cmd_analyze(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Benchmark(a) => cmd_benchmark(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
