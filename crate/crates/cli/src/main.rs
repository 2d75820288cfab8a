use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use romtube::baselines::Method;
use romtube::mpc::Mode;
use romtube::pipeline::{run_pipeline, run_stage, BenchmarkConfig, Stage, StageOptions, StageReport};
use romtube::synthesis::LambdaGrid;

/// Robust reduced-order MPC for the mass-spring-damper chain benchmark.
#[derive(Parser, Debug)]
#[command(name = "romtube", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON configuration; omitted keys take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run directory for artifacts.
    #[arg(long, value_name = "DIR", default_value = "run")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter and gain certificates.
    Synthesize {
        #[command(flatten)]
        common: Common,
        /// Decay-rate grid "lo:hi:n".
        #[arg(long, value_name = "LO:HI:N")]
        lambda_grid: Option<LambdaGrid>,
    },
    /// Reduced-order control problem.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = ModeArg::Robust)]
        mode: ModeArg,
    },
    /// Full-order rollouts of the stored solutions.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Error-bound comparison on the robust solution.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = MethodArg::All)]
        method: MethodArg,
    },
    /// All stages in order.
    Benchmark {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "LO:HI:N")]
        lambda_grid: Option<LambdaGrid>,
        #[arg(long, value_enum, default_value_t = MethodArg::All)]
        method: MethodArg,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Robust,
    Naive,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MethodArg {
    Uniform,
    Inputdep,
    Peak,
    Peakfilter,
    All,
}

impl MethodArg {
    fn methods(self) -> Vec<Method> {
        match self {
            MethodArg::Uniform => vec![Method::Uniform],
            MethodArg::Inputdep => vec![Method::InputDependent],
            MethodArg::Peak => vec![Method::Peak],
            MethodArg::Peakfilter => vec![Method::PeakFilter],
            MethodArg::All => Method::ALL.to_vec(),
        }
    }
}

fn load_config(common: &Common) -> romtube::Result<BenchmarkConfig> {
    let mut cfg = match &common.config {
        Some(p) => BenchmarkConfig::load(p)?,
        None => BenchmarkConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(r: &StageReport) {
    println!("{}", serde_json::to_string(r).expect("stage report serializes"));
}

fn run(cli: Cli) -> romtube::Result<bool> {
    let (common, stages, opts) = match cli.command {
        Command::Synthesize { common, lambda_grid } => {
            (common, Some(Stage::Synthesize), StageOptions { lambda_grid, methods: None })
        }
        Command::Solve { common, mode } => {
            let mode = match mode {
                ModeArg::Robust => Mode::Robust,
                ModeArg::Naive => Mode::Naive,
            };
            (common, Some(Stage::Solve(mode)), StageOptions::default())
        }
        Command::Simulate { common } => (common, Some(Stage::Simulate), StageOptions::default()),
        Command::Compare { common, method } => {
            (common, Some(Stage::Compare), StageOptions { lambda_grid: None, methods: Some(method.methods()) })
        }
        Command::Benchmark { common, lambda_grid, method } => {
            (common, None, StageOptions { lambda_grid, methods: Some(method.methods()) })
        }
    };
    let cfg = load_config(&common)?;
    let reports = match stages {
        Some(s) => vec![run_stage(&cfg, s, &common.out, &opts)?],
        None => run_pipeline(&cfg, &common.out, &opts)?,
    };
    for r in &reports {
        print_report(r);
    }
    Ok(reports.iter().any(|r| r.infeasible))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(2),
        Err(e) => {
            let report = serde_json::json!({"error": e.to_string(), "infeasible": e.is_infeasible()});
            eprintln!("{report}");
            if e.is_infeasible() { ExitCode::from(2) } else { ExitCode::FAILURE }
        }
    }
}
