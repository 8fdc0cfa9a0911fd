use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vntpose::commands::{self, Metric};
use vntpose::config::RunConfig;
use vntpose::error::exit;
use vntpose::{Checkpoint, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "vntpose", version, about = "Shape/pose disentangling point-cloud auto-encoder")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory of the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the configured synthetic class to disk with a manifest.
    GenData,
    /// Train, or continue training from a checkpoint.
    Train {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Estimate poses and write canonicalized clouds.
    Align {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Stability or consistency of the pose estimates on the configured data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        metric: Metric,
    },
    /// Check every layer and head contract on random inputs and motions.
    VerifyEquivariance {
        /// Weights to check; a freshly initialized model otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Break the row sums of the named encoder layer.
        #[arg(long)]
        corrupt: Option<String>,
    },
}

/// Config from `--config`, else the one stored with a checkpoint, else the
/// defaults; then the command-line overrides.
fn resolve_config(cli: &Cli, ckpt: Option<&Checkpoint>) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, ckpt) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(c)) => c.config.clone(),
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn load_checkpoint(path: Option<&Path>) -> Result<Option<Checkpoint>> {
    path.map(Checkpoint::load).transpose()
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData => {
            let cfg = resolve_config(cli, None)?;
            let rep = commands::gen_data(&cfg)?;
            println!("wrote {} clouds and {}", rep.files, rep.manifest.display());
        }
        Command::Train { checkpoint } => {
            let ckpt = load_checkpoint(checkpoint.as_deref())?;
            let cfg = resolve_config(cli, ckpt.as_ref())?;
            let resume = ckpt.as_ref().zip(checkpoint.as_deref());
            let summary = commands::train(&cfg, resume, |m, secs| {
                println!(
                    "epoch {:>4}  total {:.6e}  rec {:.6e}  ortho {:.6e}  aug {:.6e}  can {:.6e}  lr {:.1e}  {secs:.1}s",
                    m.epoch, m.total, m.rec, m.ortho, m.aug, m.can, m.lr
                );
            })?;
            println!("finished at epoch {}; checkpoint in {}", summary.epoch, cfg.out.display());
        }
        Command::Align { checkpoint, inputs } => {
            let (model, ckpt) = commands::load_model(checkpoint)?;
            let cfg = resolve_config(cli, Some(&ckpt))?;
            let poses = commands::align(&model, inputs, &cfg.out)?;
            for (input, pose) in inputs.iter().zip(&poses) {
                println!("{}\t{}", input.display(), commands::pose_line(pose));
            }
        }
        Command::Eval { checkpoint, metric } => {
            let (model, ckpt) = commands::load_model(checkpoint)?;
            let cfg = resolve_config(cli, Some(&ckpt))?;
            let rep = commands::eval(&model, &cfg, *metric)?;
            println!("{:?} over {} instances: {:.6e} degrees", rep.metric, rep.instances, rep.degrees);
        }
        Command::VerifyEquivariance { checkpoint, trials, corrupt } => {
            let ckpt = load_checkpoint(checkpoint.as_deref())?;
            let cfg = resolve_config(cli, ckpt.as_ref())?;
            let model = match (&ckpt, checkpoint) {
                (Some(c), Some(p)) => c.restore(p)?.0,
                _ => {
                    cfg.model.validate().map_err(|e| Error::Usage(e.to_string()))?;
                    cfg.build_model()?
                }
            };
            let reports = commands::verify_equivariance(&model, *trials, corrupt.as_deref(), cfg.seed)?;
            for r in &reports {
                println!("{}", serde_json::to_string(r).expect("report serializes"));
            }
            std::fs::create_dir_all(&cfg.out).map_err(|source| Error::Io {
                path: cfg.out.clone(),
                source,
            })?;
            commands::write_reports(&reports, &cfg.out.join(commands::VERIFY_FILE))?;
            let failed = reports.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                return Err(Error::Verification {
                    failed,
                    total: reports.len(),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::SUCCESS });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::from(exit::SUCCESS),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
