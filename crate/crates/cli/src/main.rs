use std::path::{Path, PathBuf};
use std::process::ExitCode;

use akz::harness::{self, ExperimentPlan, RunConfig, SweepAxis};
use akz::problem::{self, ProblemInstance, ProblemSpec};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "akz", version, about = "Asynchronous distributed block Kaczmarz simulator")]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = "AKZ_OUTPUT_DIR", default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a problem instance.
    Gen(GenArgs),
    /// Run one simulation.
    Run(RunArgs),
    /// Sweep one parameter with replicates.
    Sweep(SweepArgs),
    /// Certify contraction of the error operator over a run window.
    Certify(CertifyArgs),
    /// Turn a metrics file into long-format plot data.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    m: usize,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0.05)]
    density: f64,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    agents: usize,
    #[arg(long)]
    rank: Option<usize>,
}

#[derive(Args)]
struct Source {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Instance directory written by `gen`; replaces the configured problem.
    #[arg(long)]
    instance: Option<PathBuf>,
    /// Overrides the simulation seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: Source,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Agents,
    Neighbors,
    Interval,
    Failure,
    Lambda,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long, value_enum)]
    axis: Axis,
    /// Comma-separated values; failure ratios for `--axis failure`.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    /// Comma-separated failure intensities for `--axis failure`.
    #[arg(long, value_delimiter = ',')]
    xi: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    reps: usize,
}

#[derive(Args)]
struct CertifyArgs {
    #[command(flatten)]
    source: Source,
    /// Number of iterations in the certified window.
    #[arg(long, default_value_t = 20)]
    window: usize,
    /// Connectivity window length.
    #[arg(long, default_value_t = 4)]
    l: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding metrics.csv.
    #[arg(long)]
    input: PathBuf,
}

type CliResult<T> = Result<T, String>;

fn load(source: &Source) -> CliResult<(RunConfig, ProblemInstance)> {
    let mut cfg = match &source.config {
        Some(p) => RunConfig::from_json_file(p).map_err(|e| e.to_string())?,
        None => RunConfig::default(),
    };
    if let Some(s) = source.seed {
        cfg.sim.seed = s;
    }
    let inst = harness::instance(&cfg, source.instance.as_deref()).map_err(|e| e.to_string())?;
    cfg.problem = inst.spec.clone();
    Ok((cfg, inst))
}

fn gen(args: &GenArgs, out: &Path) -> CliResult<()> {
    let spec = ProblemSpec {
        m: args.m,
        n: args.n,
        density: args.density,
        noise_sigma: args.sigma,
        seed: args.seed,
        agents: args.agents,
        rank: args.rank,
    };
    let inst = problem::generate(&spec).map_err(|e| e.to_string())?;
    problem::save(&inst, out).map_err(|e| e.to_string())?;
    println!("wrote {}x{} instance with {} nonzeros to {}", args.m, args.n, inst.a.nnz(), out.display());
    Ok(())
}

fn run(args: &RunArgs, out: &Path) -> CliResult<()> {
    let (cfg, inst) = load(&args.source)?;
    let res = harness::run_to_dir(&cfg, &inst, out).map_err(|e| e.to_string())?;
    let o = &res.output;
    println!(
        "stop={:?} events={} k_iter={} e_stop={:e}",
        o.stop, o.events, o.metrics.k_iter, o.metrics.e_stop
    );
    if !o.converged() {
        return Err(format!("no convergence, best error {:e}", o.final_error));
    }
    Ok(())
}

fn sweep(args: &SweepArgs, out: &Path) -> CliResult<()> {
    let (base, inst) = load(&args.source)?;
    let v = args.values.clone();
    let axis = match args.axis {
        Axis::Agents => SweepAxis::AgentCount { theta1: v },
        Axis::Neighbors => SweepAxis::NeighborCap { theta2: v },
        Axis::Interval => SweepAxis::Interval {
            dt: v
                .iter()
                .map(|&x| {
                    if x >= 1.0 && x.fract() == 0.0 {
                        Ok(x as u64)
                    } else {
                        Err(format!("interval must be a positive integer, got {x}"))
                    }
                })
                .collect::<CliResult<_>>()?,
        },
        Axis::Failure => {
            if args.xi.is_empty() {
                return Err("--axis failure needs --xi".into());
            }
            SweepAxis::Failure { rho: v, xi: args.xi.clone() }
        }
        Axis::Lambda => SweepAxis::Lambda { lambda: v },
    };
    let plan = ExperimentPlan {
        base,
        axis,
        repetitions: args.reps,
    };
    let res = harness::sweep(&plan, &inst, out).map_err(|e| e.to_string())?;
    println!("{} cells, {} runs written to {}", res.summary.len(), res.raw.len(), out.display());
    Ok(())
}

fn certify(args: &CertifyArgs, out: &Path) -> CliResult<()> {
    let (cfg, inst) = load(&args.source)?;
    let rep = harness::certify(&cfg, &inst, args.window, args.l, out).map_err(|e| e.to_string())?;
    println!("hybrid norm {} over iterations {:?}", rep.hybrid_norm, rep.window);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = cli.out.as_path();
    let result = match &cli.command {
        Command::Gen(a) => gen(a, out),
        Command::Run(a) => run(a, out),
        Command::Sweep(a) => sweep(a, out),
        Command::Certify(a) => certify(a, out),
        Command::Report(a) => harness::report(&a.input, out)
            .map(|p| println!("wrote {}", p.display()))
            .map_err(|e| e.to_string()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
