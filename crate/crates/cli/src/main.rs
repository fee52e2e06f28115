use std::path::PathBuf;
use std::process::ExitCode;

use biofuse::{Error, Result};
use biofuse_cli::{commands, exit_code, ExperimentConfig, Overrides};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "biofuse", version, about = "Multimodal biosignal gesture experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the config's list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; results go to <out>/<name>/seed-<s>/.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for seeds and ablation cells.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Bonferroni factor override.
    #[arg(long, global = true)]
    factor: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic datasets.
    Synth,
    /// Preprocess and store datasets.
    Prep,
    /// Train, checkpoint and evaluate.
    Run,
    /// Re-evaluate checkpoints, including zeroed-modality conditions.
    Eval,
    /// Attention-edge masking grid on checkpoints.
    Ablate,
    /// Significance of zeroed conditions against the original input.
    Stats,
    /// CSV plot data and a summary from a results directory.
    Report {
        /// Experiment results directory; defaults to <out>/<name> from the config.
        dir: Option<PathBuf>,
    },
}

fn load(g: &Global) -> Result<ExperimentConfig> {
    let path = g.config.as_ref().ok_or_else(|| Error::config("--config", "this command needs --config <path>"))?;
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply(&Overrides {
        seed: g.seed,
        out: g.out.clone(),
        threads: g.threads,
        factor: g.factor,
    });
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Synth => {
            for p in commands::synth(&load(g)?)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Prep => {
            for p in commands::prep(&load(g)?)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Run => {
            for r in commands::run(&load(g)?)? {
                let acc: Vec<String> = r.evals.iter().map(|e| format!("{} {:.3}", e.condition, e.mean)).collect();
                println!("seed {}: {} -> {}", r.seed, acc.join(", "), r.dir.display());
            }
        }
        Command::Eval => {
            for evals in commands::eval(&load(g)?)? {
                for e in evals {
                    println!("seed {} {}: {:.3}", e.seed, e.condition, e.mean);
                }
            }
        }
        Command::Ablate => {
            for r in commands::ablate(&load(g)?)? {
                print!("{}", r.render_table());
            }
        }
        Command::Stats => {
            for r in commands::stats(&load(g)?)? {
                println!(
                    "seed {} {} vs {}: U {} p {:.3e} p_corr {:.3e} {}",
                    r.seed, r.condition, r.reference, r.test.u, r.test.p_raw, r.test.p_corr, r.test.symbol
                );
            }
        }
        Command::Report { dir } => {
            let dir = match dir {
                Some(d) => d,
                None => load(g)?.experiment_dir(),
            };
            let r = commands::report(&dir)?;
            print!("{}", r.summary);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // error messages already carry their sources
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
