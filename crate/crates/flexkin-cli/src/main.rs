//! Command-line front end: thin argument parsing over `flexkin::commands`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "flexkin",
    about = "Extrinsic-parameter-free multi-view motion reconstruction toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view dataset from a scene config.
    Synth {
        /// Synthesis config JSON ({n_sequences, seed, scene, noise}).
        #[arg(long)]
        config: PathBuf,
        /// Output dataset path (JSON lines; manifest written next to it).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints and a per-step loss log.
    Train {
        /// Train config JSON (epochs, batch size, learning rate, seed, ...).
        #[arg(long)]
        config: PathBuf,
        /// Dataset path; overrides the config's `data` entry.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint prefix; writes <out>.json/<out>.bin plus per-epoch files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset restricted to chosen views.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated 1-based view indices, e.g. 1,2,3,4.
        #[arg(long, value_delimiter = ',')]
        views: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Camera-perturbation study: triangulation baseline vs the rig-free net.
    Perturb {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated sigma fractions, e.g. 0,0.03,0.04.
        #[arg(long, value_delimiter = ',')]
        sigmas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export one view of a motion file as BVH.
    ExportBvh {
        /// Motion JSON file ({fps, topology, motion}).
        #[arg(long)]
        motion: PathBuf,
        /// 0-based view index.
        #[arg(long)]
        view: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign person IDs over a 2D detections file.
    Track {
        #[arg(long, name = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> flexkin::Result<()> {
    match cli.command {
        Command::Synth { config, out } => {
            let manifest = flexkin::commands::synth(&config, &out)?;
            println!(
                "wrote {} sequences (T={}, K={}, seed {}) to {}",
                manifest.n_sequences,
                manifest.frames,
                manifest.views,
                manifest.seed,
                out.display()
            );
        }
        Command::Train { config, data, out } => {
            let log = flexkin::commands::train_from_files(&config, data.as_deref(), &out)?;
            println!("checkpoint at {}.json/.bin, loss log at {}", out.display(), log.display());
        }
        Command::Eval { ckpt, data, views, out } => {
            let rows = flexkin::commands::eval_to_csv(&ckpt, &data, &views, &out)?;
            if let Some(agg) = rows.last() {
                println!(
                    "{} sequences, K={}: mpjpe {:.3} mm, accel {:.4} mm/frame^2 -> {}",
                    rows.len() - 1,
                    agg.views,
                    agg.mpjpe_mm,
                    agg.accel_err,
                    out.display()
                );
            }
        }
        Command::Perturb { data, sigmas, out } => {
            let rows = flexkin::commands::perturb_study(&data, &sigmas, &out)?;
            for r in &rows {
                println!(
                    "sigma {:>5}: baseline {:.3} mm, net {:.3} mm",
                    r.sigma_frac, r.baseline_mpjpe_mm, r.flex_mpjpe_mm
                );
            }
            println!("-> {}", out.display());
        }
        Command::ExportBvh { motion, view, out } => {
            flexkin::commands::export_bvh(&motion, view, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Track { input, out } => {
            flexkin::commands::track(&input, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
