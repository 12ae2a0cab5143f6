//! Command-line front end for config-driven quantization sweeps.

use clap::{Parser, Subcommand};
use fisherq::experiment::{self, ExperimentConfig, RESULTS_FILE};
use fisherq::Error;
use std::path::PathBuf;
use std::process::ExitCode;

const RECON_DEFAULTS: &str = "\
[recon] defaults:
  loss_kind = \"dplr\"     mse | brecq | diag | rank1 | rankk | dplr
  rank = 15              target bank rank
  interval = 20          iterations between rank appends
  max_iter = 500
  batch_size = 32
  p_drop = 0.5           probability of keeping a full-precision input
  lr_v = 1e-3            rounding logits
  lr_scale = 1e-4        activation scales
  alpha = 0.5            low-rank weight in the DPLR mix
  reg_weight = 0.01      rounding regularizer
  beta = { start = 20.0, end = 2.0, warmup = 0.2 }
  fim_samples            probe samples (default: all reconstruction samples)
  normalize_fim = true   scale curvature losses to the initial MSE
  seed = 0

Exit codes: 0 ok, 1 config error, 2 runtime failure.";

#[derive(Parser)]
#[command(name = "fisherq", version, about = "Fisher-guided block-wise PTQ for toy ViTs", after_help = RECON_DEFAULTS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain (or load) a model and run the configured sweep.
    #[command(after_help = RECON_DEFAULTS)]
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides [output].dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Runs only this reconstruction seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Summarize a results.csv as a markdown table.
    Report {
        #[arg(long)]
        results: PathBuf,
        /// Also write the final-block class-token heatmaps.
        #[arg(long)]
        heatmaps: bool,
    },
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(match e {
        Error::Config { .. } => 1,
        _ => 2,
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Run { config, out, seed } => {
            let mut cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            if let Some(dir) = out {
                cfg.output.dir = dir;
            }
            if let Some(s) = seed {
                cfg.sweep.seeds = Some(vec![s]);
            }
            match experiment::run(&cfg) {
                Ok(sum) => {
                    println!(
                        "{} run(s), full-precision top-1 {:.4}, results in {}",
                        sum.rows.len(),
                        sum.fp_top1,
                        sum.out_dir.join(RESULTS_FILE).display()
                    );
                    if sum.failed() > 0 {
                        eprintln!("{} run(s) failed; see the status column", sum.failed());
                        return ExitCode::from(2);
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Report { results, heatmaps } => match experiment::report(&results, heatmaps) {
            Ok((rep, paths)) => {
                print!("{}", rep.to_markdown());
                for p in paths {
                    println!("heatmap: {}", p.display());
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
    }
}
