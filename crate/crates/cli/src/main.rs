use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use predseg::segment::SegmentConfig;
use predseg_cli::*;

/// Train switched-Gaussian random fields on image features and extract contours.
///
/// Log verbosity follows the PREDSEG_LOG environment variable (error, warn,
/// info, debug, trace; default info). Exit status is 2 for missing inputs, 3
/// for a corrupt checkpoint and 1 for any other failure.
#[derive(Parser)]
#[command(name = "predseg", version)]
struct Cli {
    /// Cap on worker threads (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run config.
    Train {
        /// Run config (JSON, schema_version 1).
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-offset switch log-odds for images.
    Connectivity {
        /// Checkpoint directory (contains manifest.json).
        #[arg(long)]
        checkpoint: PathBuf,
        /// An image file or a directory of PNG/JPEG images.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only this head (default: all).
        #[arg(long)]
        head: Option<usize>,
    },
    /// Write contour maps (<stem>.head<k>.png and .pstf) for images.
    Contours {
        /// Checkpoint directory (contains manifest.json).
        #[arg(long)]
        checkpoint: PathBuf,
        /// An image file or a directory of PNG/JPEG images.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only this head (default: all).
        #[arg(long)]
        head: Option<usize>,
        /// Eigenvectors per image, including the trivial one.
        #[arg(long, default_value_t = SegmentConfig::default().eigenvectors)]
        eigenvectors: usize,
    },
    /// Benchmark contour maps against ground truth; writes pr.csv, bench.json and pr.svg.
    Eval {
        /// Directory of <id>.head<k>.pstf|png or <id>.pstf|png contour maps.
        #[arg(long)]
        contours: PathBuf,
        /// Ground-truth directory with index.json.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Head whose contour files are scored.
        #[arg(long)]
        head: Option<usize>,
        /// Number of thresholds.
        #[arg(long, default_value_t = predseg::bench::DEFAULT_THRESHOLDS)]
        thresholds: usize,
        /// Matching tolerance as a fraction of the image diagonal.
        #[arg(long, default_value_t = predseg::bench::DEFAULT_MAX_DIST)]
        max_dist: f64,
        /// Curve label in the plot.
        #[arg(long, default_value = "predseg")]
        label: String,
    },
    /// Plot PR curves from one or more pr.csv files into an SVG.
    PrPlot {
        /// Curves as PATH or PATH=LABEL.
        #[arg(required = true)]
        curves: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> predseg::Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let report = cmd_train(config, &TrainOverrides { seed, output: out })?;
            println!("trained {} steps; last checkpoint {:?}", report.steps, report.checkpoints.last());
        }
        Command::Connectivity {
            checkpoint,
            input,
            out,
            head,
        } => {
            let written = cmd_connectivity(&checkpoint, &input, &out, head)?;
            println!("wrote {} connectivity maps to {}", written.len(), out.display());
        }
        Command::Contours {
            checkpoint,
            input,
            out,
            head,
            eigenvectors,
        } => {
            let cfg = SegmentConfig {
                eigenvectors,
                ..SegmentConfig::default()
            };
            let written = cmd_contours(&checkpoint, &input, &out, head, &cfg)?;
            println!("wrote {} files to {}", written.len(), out.display());
        }
        Command::Eval {
            contours,
            gt,
            out,
            head,
            thresholds,
            max_dist,
            label,
        } => {
            let opts = EvalOptions {
                head,
                thresholds,
                max_dist,
                label,
            };
            let r = cmd_eval(&contours, &gt, &out, &opts)?;
            println!("F_ODS {:.4}  F_OIS {:.4}  AP {:.4}", r.f_ods, r.f_ois, r.ap);
        }
        Command::PrPlot { curves, out } => {
            let inputs: Vec<(PathBuf, String)> = curves
                .iter()
                .map(|c| match c.split_once('=') {
                    Some((p, l)) => (PathBuf::from(p), l.to_string()),
                    None => {
                        let p = PathBuf::from(c);
                        let label = p
                            .parent()
                            .and_then(|d| d.file_name())
                            .map(|n| n.to_string_lossy().into_owned())
                            .unwrap_or_else(|| c.clone());
                        (p, label)
                    }
                })
                .collect();
            cmd_pr_plot(&inputs, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PREDSEG_LOG", "info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set up {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
