use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pidkl::cli::{run, validate_file, CliError, RunOptions};

#[derive(Parser)]
#[command(name = "pidkl", version, about = "Bayesian PDE coefficient inference with deep kernel GPs and HMC")]
struct Cli {
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run data generation, pretraining, sampling and prediction.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Sets the data, pretraining and sampler seeds to s, s+1, s+2.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Check a config and list the keys left at their defaults.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Validate { config } => validate_file(&config).map_err(CliError::from).map(|v| {
            println!("config ok: {}", config.display());
            if v.defaulted.is_empty() {
                println!("no defaulted fields");
            } else {
                println!("defaulted fields:");
                for k in &v.defaulted {
                    println!("  {k}");
                }
            }
        }),
        Command::Run {
            config,
            out_dir,
            seed_override,
        } => run(&config, &RunOptions { out_dir, seed_override }).map(|out| {
            let s = &out.summary.phi;
            for j in 0..s.names.len() {
                println!(
                    "{}: mean {:.5} sd {:.5} 95% [{:.5}, {:.5}]",
                    s.names[j], s.mean[j], s.sd[j], s.lower[j], s.upper[j]
                );
            }
            if let Some(f) = &out.summary.field {
                println!("field max abs error {:.3e}", f.max_abs_error);
            }
            println!("artifacts in {}", out.out_dir.display());
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Schema(s) => eprintln!("error: invalid config at `{}`: {}", s.path, s.message),
                CliError::Stage(s) => eprintln!("error: stage `{}` failed: {}", s.stage, s.source),
            }
            ExitCode::from(e.exit_code())
        }
    }
}
