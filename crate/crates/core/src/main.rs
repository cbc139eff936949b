use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use distcomp::harness::checks;
use distcomp::harness::commands::{self, RunContext};
use distcomp::harness::config::ExperimentConfig;
use distcomp::harness::plot::cmd_plot;
use distcomp::harness::records::Method;

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_SELFTEST: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "distcomp",
    version,
    about = "Progressive distributed compression experiments"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat TOML configuration; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Comma-separated methods, e.g. `evd,bcd,lower-bound`.
    #[arg(long, global = true, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Channel realizations per Monte Carlo point.
    #[arg(long, global = true)]
    eval_samples: Option<usize>,
    /// Evaluate and train without quantization.
    #[arg(long, global = true)]
    q_infinite: bool,
    #[arg(long, global = true)]
    mse_target: Option<f64>,
    /// Record wall-clock times in the CSVs (makes reruns differ).
    #[arg(long, global = true)]
    timing: bool,
    /// Progress on stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the configured policy network.
    Train,
    /// Monte Carlo MSE against K for every method.
    SweepK,
    /// Join sweep MSE with signaling costs.
    CostCurves {
        #[arg(long, default_value = "out/sweep.csv")]
        sweep: PathBuf,
    },
    /// Stages needed for the MSE target and where local CSI stops paying off.
    Crossover {
        #[arg(long, default_value = "out/sweep.csv")]
        sweep: PathBuf,
    },
    /// Train batch-statistic and trainable dynamic ranges side by side.
    DynrangeCompare,
    /// Built-in correctness checks.
    Selftest,
    /// Render SVG charts from result CSVs.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
    },
    /// Print the effective configuration.
    PrintConfig,
}

fn load_config(common: &Common) -> distcomp::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(methods) = &common.methods {
        cfg.methods = methods
            .iter()
            .map(|m| Method::parse(m.trim()))
            .collect::<distcomp::Result<_>>()?;
    }
    if let Some(n) = common.eval_samples {
        cfg.eval_realizations = n;
    }
    if common.q_infinite {
        cfg.q_infinite = true;
    }
    if let Some(t) = common.mse_target {
        cfg.mse_target = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> distcomp::Result<u8> {
    let c = &cli.common;
    let cfg = load_config(c)?;
    let command = match cli.command {
        _ if c.print_config => Command::PrintConfig,
        Some(command) => command,
        None => {
            eprintln!("error: a subcommand is required (see --help)");
            return Ok(EXIT_USAGE);
        }
    };
    let ctx = RunContext {
        out: c.out.clone(),
        timing: c.timing,
        verbose: c.verbose,
    };
    match command {
        Command::Train => {
            let out = commands::cmd_train(&cfg, &ctx)?;
            let log = &out.trained.log;
            println!(
                "best validation loss {:.6} at epoch {} ({} epochs)",
                log.best_validation,
                log.best_epoch,
                log.epochs.len()
            );
            println!("checkpoint {}", out.trained.checkpoint.display());
            println!("log {}", out.trained.log_path.display());
        }
        Command::SweepK => {
            let records = commands::cmd_sweep_k(&cfg, &ctx)?;
            for r in &records {
                println!(
                    "{:<20} K={} mse {:.5} +- {:.5}",
                    r.method.as_str(),
                    r.k,
                    r.mse_mean,
                    r.mse_stderr
                );
            }
        }
        Command::CostCurves { sweep } => {
            let points = commands::cmd_cost_curves(&cfg, &sweep, &ctx)?;
            println!(
                "{} points written to {}",
                points.len(),
                ctx.out.join("cost_curves.csv").display()
            );
        }
        Command::Crossover { sweep } => {
            let report = commands::cmd_crossover(&cfg, &sweep, &ctx)?;
            for r in &report.requirements {
                match r.k {
                    Some(k) => println!("{:<20} reaches the target at K={k}", r.method.as_str()),
                    None => println!("{:<20} unreachable", r.method.as_str()),
                }
            }
            for x in &report.crossovers {
                let t = x.crossover_t.map_or("-".to_string(), |t| format!("{t:.1}"));
                println!("{} vs {}: {} (T* = {t})", x.local_method, x.global_method, x.status);
            }
        }
        Command::DynrangeCompare => {
            let report = commands::cmd_dynrange_compare(&cfg, &ctx)?;
            for s in &report.summary {
                println!(
                    "{:<16} final {:.6}, within 5% after {} of {} epochs",
                    s.variant, s.final_validation, s.epochs_to_within_5pct, s.epochs_run
                );
            }
        }
        Command::Selftest => {
            let results = checks::run_all();
            for r in &results {
                println!("{r}");
            }
            if results.iter().any(|r| !r.passed) {
                return Ok(EXIT_SELFTEST);
            }
        }
        Command::Plot { csv } => {
            for path in cmd_plot(&csv, &ctx.out)? {
                println!("{}", path.display());
            }
        }
        Command::PrintConfig => print!("{}", cfg.to_toml()),
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_USAGE })
        }
    }
}
