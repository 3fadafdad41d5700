//! Command-line experiment runner.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hyddp::harness::{
    iteration_log_csv, run_batch, run_single, EnvironmentId, ExperimentConfig, MethodId, Settings,
};

#[derive(Parser)]
#[command(
    name = "hyddp",
    about = "Hybrid-control trajectory optimization benchmarks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Environment: car | box | box-pomdp | box-unknown | box-all-unknown.
    #[arg(long)]
    env: String,
    /// Method: ilqg | greedy | interpolate | mixture. Batch accepts a
    /// comma-separated list or "all".
    #[arg(long, default_value = "mixture")]
    method: String,
    /// Planning horizon (timesteps).
    #[arg(long)]
    horizon: Option<usize>,
    /// Optimizer iteration budget.
    #[arg(long = "max-iters")]
    max_iters: Option<usize>,
    /// Master seed; all per-run seeds derive from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of friction-center samples.
    #[arg(long = "cf-count")]
    cf_count: Option<usize>,
    /// Closed-loop simulations per friction center (stochastic runs).
    #[arg(long)]
    samples: Option<usize>,
    /// Key-value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, e.g. --set car.dt=0.15 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a single instance and print its result row.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        /// Friction-center index within the sampled grid.
        #[arg(long = "cf-index", default_value_t = 0)]
        cf_index: usize,
        /// Directory for iterations.csv and trajectory.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run methods x friction centers and write the results table.
    Batch {
        #[command(flatten)]
        common: CommonArgs,
        /// Output directory for results.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize a single instance and write its trajectory CSV.
    Export {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long = "cf-index", default_value_t = 0)]
        cf_index: usize,
        /// Output file path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_methods(spec: &str) -> hyddp::Result<Vec<MethodId>> {
    if spec == "all" {
        return Ok(MethodId::ALL.to_vec());
    }
    spec.split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.trim().parse())
        .collect()
}

fn build_config(common: &CommonArgs) -> hyddp::Result<ExperimentConfig> {
    let environment: EnvironmentId = common.env.parse()?;
    let methods = parse_methods(&common.method)?;
    let mut config = ExperimentConfig::new(environment, methods)?;
    let mut settings = match &common.config {
        Some(path) => Settings::parse_file(path)?,
        None => Settings::default(),
    };
    for line in &common.set {
        settings.set_line(line)?;
    }
    config.settings = settings;
    if let Some(h) = common.horizon {
        config.horizon = h;
    }
    if let Some(m) = common.max_iters {
        config.max_iterations = m;
    }
    if let Some(c) = common.cf_count {
        config.cf_count = c;
    }
    if let Some(s) = common.samples {
        config.samples_per_cf = s;
    }
    config.master_seed = common.seed;
    config.validate()?;
    Ok(config)
}

fn single_method(config: &ExperimentConfig) -> hyddp::Result<MethodId> {
    if config.methods.len() != 1 {
        return Err(hyddp::Error::InvalidArgument(
            "this subcommand needs exactly one method".into(),
        ));
    }
    Ok(config.methods[0])
}

fn real_main() -> hyddp::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            common,
            cf_index,
            out,
        } => {
            let config = build_config(&common)?;
            let method = single_method(&config)?;
            let result = run_single(&config, method, cf_index)?;
            let r = &result.row;
            println!(
                "environment={} method={} cf={} seed={} cost={} iterations={} converged={} wall_s={:.3}",
                r.environment,
                r.method,
                r.cf_index,
                r.seed,
                r.total_cost,
                r.iterations,
                r.converged,
                r.wall_time.as_secs_f64()
            );
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("iterations.csv"), iteration_log_csv(&result.log))?;
                result.export.write(&dir.join("trajectory.csv"))?;
                println!("wrote {}", dir.display());
            }
            Ok(())
        }
        Command::Batch { common, out } => {
            let config = build_config(&common)?;
            let table = run_batch(&config)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("results.csv");
            std::fs::write(&path, table.to_csv())?;
            for a in &table.aggregates {
                println!(
                    "environment={} method={} mean_cost={} sem={}",
                    a.environment, a.method, a.mean_cost, a.sem
                );
            }
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Export {
            common,
            cf_index,
            out,
        } => {
            let config = build_config(&common)?;
            let method = single_method(&config)?;
            let result = run_single(&config, method, cf_index)?;
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            result.export.write(&out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
