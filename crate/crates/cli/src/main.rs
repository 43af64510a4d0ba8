use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fogpr::experiment::{self, BenchConfig, RunOptions};
use fogpr::task::TaskFile;
use fogpr::Error;

const EXIT_RUN_ERROR: u8 = 1;
const EXIT_CONFIG_ERROR: u8 = 2;

#[derive(Parser)]
#[command(name = "fogpr", version, about = "Online deformable-object servoing with a fixed-budget GP model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a task file over its seeds; writes per-seed trajectories and report.json.
    Run(RunArgs),
    /// Time per-update cost of the bounded model against an unbounded GP.
    Bench(BenchArgs),
    /// Run several task files that differ only in their model on the same seeds.
    Compare(RunArgs),
    /// Parse and check task files without running anything.
    ValidateConfig {
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Task file (TOML). Repeat for `compare`.
    #[arg(long = "config", required = true)]
    configs: Vec<PathBuf>,
    /// Seed or comma-separated seed list, overriding the file's `run.seeds`.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Output directory, overriding the file's `run.out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Disable exploration noise.
    #[arg(long)]
    no_explore: bool,
}

impl RunArgs {
    fn options(&self) -> RunOptions {
        RunOptions { seeds: self.seed.clone(), explore: self.no_explore.then_some(false), out_dir: self.out.clone() }
    }
}

#[derive(Args)]
struct BenchArgs {
    /// Model capacities to time, comma separated.
    #[arg(long = "m", value_delimiter = ',', default_value = "300")]
    m_values: Vec<usize>,
    /// Length of the observation stream.
    #[arg(long, default_value_t = 1000)]
    n_stream: usize,
    #[arg(long, default_value_t = 4)]
    in_dim: usize,
    #[arg(long, default_value_t = 6)]
    out_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Passes over the stream; each update reports its fastest pass.
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value = "out/bench")]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FOGPR_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(&args),
        Command::Bench(args) => bench(&args),
        Command::Compare(args) => compare(&args),
        Command::ValidateConfig { configs } => validate(&configs),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_RUN_ERROR),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { EXIT_CONFIG_ERROR } else { EXIT_RUN_ERROR })
        }
    }
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<TaskFile>, Error> {
    paths.iter().map(|p| TaskFile::load(p)).collect()
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}

/// Returns `Ok(false)` when some seed failed with an error.
fn run(args: &RunArgs) -> Result<bool, Error> {
    let opts = args.options();
    let files = load_all(&args.configs)?;
    // build everything first so a bad second file does not leave half the output behind
    for f in &files {
        f.build()?;
    }
    let mut clean = true;
    for f in &files {
        let report = experiment::run(f, &opts)?;
        let dir = experiment::output_dir(f, &opts);
        println!("{} [{}]", report.task, report.model);
        for s in &report.seeds {
            match &s.error {
                Some(e) => println!("  seed {:>3}  error: {e}", s.seed),
                None => println!(
                    "  seed {:>3}  {:<7}  steps {:>5}  final error {:.3e}",
                    s.seed,
                    if s.success { "success" } else { "fail" },
                    s.steps,
                    s.final_error
                ),
            }
        }
        let median = report.median_steps().map_or_else(|| "-".into(), |m| m.to_string());
        println!(
            "  {}/{} succeeded, median steps {median}; wrote {}",
            report.successes(),
            report.seeds.len(),
            dir.display()
        );
        clean &= !report.errored();
    }
    Ok(clean)
}

fn bench(args: &BenchArgs) -> Result<bool, Error> {
    let cfg = BenchConfig {
        m_values: args.m_values.clone(),
        n_stream: args.n_stream,
        in_dim: args.in_dim,
        out_dim: args.out_dim,
        seed: args.seed,
        repeats: args.repeats,
        ..BenchConfig::default()
    };
    let report = experiment::bench_update_cost(&cfg)?;
    write(&args.out, "bench.csv", &report.to_csv())?;
    write(&args.out, "bench.json", &serde_json::to_string_pretty(&report)?)?;
    for b in &report.fo_gpr {
        let (mean, p95) = b.stats.as_ref().map_or((f64::NAN, f64::NAN), |s| (s.mean_us, s.p95_us));
        let trend = b
            .after_capacity
            .as_ref()
            .map_or_else(|| "-".into(), |t| format!("{:+.3} us/100 updates (p = {:.3})", t.slope_per_100, t.p_value));
        println!("fo_gpr M={:<5} mean {mean:>9.1} us  p95 {p95:>9.1} us  trend {trend}", b.capacity);
    }
    if let Some(g) = report.standard_growth {
        println!("standard_gpr   update time grew {g:.1}x over the stream");
    }
    println!("wrote {}", args.out.display());
    Ok(true)
}

fn compare(args: &RunArgs) -> Result<bool, Error> {
    let opts = args.options();
    let files = load_all(&args.configs)?;
    let cmp = experiment::compare_models(&files, &opts)?;
    let dir = experiment::output_dir(&files[0], &opts);
    let md = cmp.to_markdown();
    write(&dir, "comparison.md", &md)?;
    write(&dir, "comparison.csv", &cmp.to_csv())?;
    print!("{md}");
    println!("wrote {}", dir.display());
    Ok(!cmp.errored())
}

fn validate(paths: &[PathBuf]) -> Result<bool, Error> {
    for p in paths {
        let file = TaskFile::load(p)?;
        let trial = file.build()?;
        println!(
            "{}: ok ({}, {} features, {} commands, model {})",
            p.display(),
            trial.name,
            trial.task.target.values.len(),
            trial.world.control_dim(),
            trial.model.name()
        );
    }
    Ok(true)
}
