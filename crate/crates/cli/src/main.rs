use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use csac_cli::{cmd_ablate, cmd_analyze, cmd_prepare_data, cmd_run, ExperimentSpec, Overrides};

#[derive(Parser)]
#[command(name = "csac", version, about = "Federated domain generalization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and cache the domains of the configured dataset.
    PrepareData(Common),
    /// Train the configured method for every seed.
    Run(Common),
    /// Run CSAC under each ablation switch.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Switch such as `fusion=average` or `discrepancy=mse`; repeatable.
        #[arg(long = "axis")]
        axes: Vec<String>,
    },
    /// Layer-wise parameter-distance study.
    Analyze(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    method: Option<String>,
    /// Comma-separated, e.g. `0,1,2`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, env = "CSAC_DATA_DIR")]
    data_dir: Option<PathBuf>,
}

impl Common {
    fn resolve(self) -> csac::Result<ExperimentSpec> {
        let ov = Overrides {
            target: self.target,
            method: self.method,
            seeds: self.seeds,
            out: self.out,
            rounds: self.rounds,
            lambda: self.lambda,
            data_dir: self.data_dir,
        };
        ExperimentSpec::resolve(self.config.as_deref(), &ov)
    }
}

fn run(cli: Cli) -> csac::Result<()> {
    match cli.command {
        Command::PrepareData(c) => {
            let dir = cmd_prepare_data(&c.resolve()?)?;
            println!("{}", dir.display());
        }
        Command::Run(c) => {
            let r = cmd_run(&c.resolve()?)?;
            println!(
                "{} {}: mean {:.4} stderr {:.4} over {} seeds",
                r.summary.method.name(),
                r.summary.target,
                r.summary.mean,
                r.summary.stderr,
                r.summary.seeds.len()
            );
        }
        Command::Ablate { common, axes } => {
            for s in cmd_ablate(&common.resolve()?, &axes)? {
                println!(
                    "{}: mean {:.4} stderr {:.4} finite {}",
                    s.setting, s.mean, s.stderr, s.finite
                );
            }
        }
        Command::Analyze(c) => {
            let report = cmd_analyze(&c.resolve()?)?;
            for l in &report.layers {
                println!("{}: intra {:.4} inter {:.4}", l.layer, l.intra_mean, l.inter_mean);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}
