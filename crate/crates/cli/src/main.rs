//! Command-line front door: gen-data, train, eval, ablate, erase-demo,
//! attribution, gradcheck.
//!
//! Exit codes: 0 success, 2 config error, 3 runtime numeric error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use umfl_core::config::{RunConfig, TrainMode};
use umfl_core::error::Error;
use umfl_core::gradcheck::REL_TOL;
use umfl_core::rng::parse_seed;
use umfl_core::runner::{
    cmd_ablate, cmd_attribution, cmd_erase_demo, cmd_eval, cmd_gen_data, cmd_gradcheck,
    cmd_train, EraseDemoMode,
};

#[derive(Parser)]
#[command(name = "umfl", about = "Multifaceted feature learning workbench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Config file (flat `key = value` lines, dotted keys).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Seed as decimal or 0x-prefixed hex; overrides the config file.
    #[arg(long)]
    seed: Option<String>,

    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (manifest.csv + PPM files).
    GenData {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train a model; writes metrics.csv, epoch_eval.csv, checkpoint.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// umfl (hierarchical batch) or baseline (single RE batch).
        #[arg(long)]
        mode: Option<String>,
    },
    /// Evaluate a checkpoint on the held-out split; writes eval_report.csv.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the five-rung ablation ladder over ablate.seeds.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Write before/after erasing examples and a region CSV.
    EraseDemo {
        #[command(flatten)]
        common: CommonArgs,
        /// re or bce.
        #[arg(long)]
        mode: String,
        /// Also dump one full hierarchical batch as numbered PPMs.
        #[arg(long)]
        hier: bool,
    },
    /// Per-image occlusion attribution under a checkpoint.
    Attribution {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write per-image sensitivity overlay PPMs.
        #[arg(long)]
        overlays: bool,
    },
    /// Finite-difference gradient verification of all ops and losses.
    Gradcheck {
        /// Seed as decimal or 0x-prefixed hex.
        #[arg(long, default_value = "42")]
        seed: String,
        /// Random points per op.
        #[arg(long, default_value_t = 50)]
        points: usize,
    },
}

fn load_config(common: &CommonArgs) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = &common.seed {
        cfg.seed = parse_seed(seed)?;
    }
    Ok(cfg)
}

fn run() -> Result<(), Error> {
    match Cli::parse().command {
        Command::GenData { common } => {
            let cfg = load_config(&common)?;
            let n = cmd_gen_data(&cfg, &common.out)?;
            println!("wrote {n} samples to {}", common.out.display());
        }
        Command::Train { common, mode } => {
            let mut cfg = load_config(&common)?;
            if let Some(mode) = mode {
                cfg.mode = TrainMode::parse(&mode)?;
            }
            let summary = cmd_train(&cfg, &common.out)?;
            println!(
                "trained {} steps ({} epochs) -> {}",
                summary.record.steps.len(),
                summary.record.epoch_evals.len(),
                summary.checkpoint_path.display()
            );
            if let Some(eval) = summary.final_eval {
                println!("final mAP {:.4}, rank-1 {:.4}", eval.map, eval.cmc_at(1));
            }
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let report = cmd_eval(&cfg, &checkpoint, &common.out)?;
            println!(
                "mAP {:.4}, rank-1 {:.4}, rank-5 {:.4} over {} queries",
                report.map,
                report.cmc_at(1),
                report.cmc_at(5),
                report.num_queries
            );
        }
        Command::Ablate { common } => {
            let cfg = load_config(&common)?;
            let rows = cmd_ablate(&cfg, &common.out)?;
            println!("variant,median_map,median_rank1");
            for row in rows {
                println!("{},{:.4},{:.4}", row.variant, row.median_map, row.median_rank1);
            }
        }
        Command::EraseDemo { common, mode, hier } => {
            let cfg = load_config(&common)?;
            let mode = EraseDemoMode::parse(&mode)?;
            cmd_erase_demo(&cfg, mode, &common.out, hier)?;
            println!("wrote erase demo to {}", common.out.display());
        }
        Command::Attribution { common, checkpoint, overlays } => {
            let cfg = load_config(&common)?;
            cmd_attribution(&cfg, &checkpoint, &common.out, overlays)?;
            println!("wrote attribution.csv to {}", common.out.display());
        }
        Command::Gradcheck { seed, points } => {
            let seed = parse_seed(&seed)?;
            let reports = cmd_gradcheck(seed, points)?;
            let mut all_ok = true;
            for r in &reports {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!(
                    "{status:4} {:<28} points={:<3} max_rel_err={:.3e}",
                    r.name, r.points, r.max_rel_err
                );
                all_ok &= r.passed();
            }
            if !all_ok {
                return Err(Error::numeric(format!(
                    "gradient check exceeded tolerance {REL_TOL}"
                )));
            }
            println!("all {} checks within {REL_TOL}", reports.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) | Error::Format(_) | Error::Precondition(_) => {
                    ExitCode::from(2)
                }
                Error::Numeric(_) => ExitCode::from(3),
                Error::Io(_) => ExitCode::FAILURE,
            }
        }
    }
}
