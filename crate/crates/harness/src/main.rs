use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use isp_harness::commands::{
    cmd_ims, cmd_mask_compare, cmd_pretrain, cmd_prune, cmd_report, cmd_sweep,
};
use isp_harness::{ExperimentConfig, HarnessError, Method, SweepAxis};

/// Pruning, soup and comparison experiments on desk-scale models.
#[derive(Parser)]
#[command(name = "isp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory. Defaults to the config's `out_dir`, else a directory
    /// under $ISP_OUT_DIR (or `runs`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Dense pretraining; writes `pretrained.ckpt`.
    Pretrain(Common),
    /// One pruning run.
    Prune {
        #[command(flatten)]
        common: Common,
        /// isp, imp, imp-rewind, oneshot, random, progressive or snip.
        #[arg(long)]
        method: Option<String>,
    },
    /// Instant model soup over the pretrained model.
    Ims(Common),
    /// Pairwise mask cosine similarity across methods and sparsities.
    MaskCompare(Common),
    /// ISP over a grid of denoiser counts or look-ahead lengths.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma-separated grid.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<u64>,
    },
    /// Summary CSV over finished run directories.
    Report {
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &ExperimentConfig, label: &str) -> PathBuf {
    if let Some(out) = common.out.clone().or_else(|| cfg.out_dir.clone()) {
        return out;
    }
    let root = std::env::var_os("ISP_OUT_DIR").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(format!("{label}-{}-s{}", &cfg.hash()[..8], cfg.seed))
}

fn report(path: &Path) {
    println!("wrote {}", path.display());
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Pretrain(common) => {
            let cfg = load(&common)?;
            let out = out_dir(&common, &cfg, "pretrain");
            report(&cmd_pretrain(&cfg, &out)?);
        }
        Command::Prune { common, method } => {
            let cfg = load(&common)?;
            let method = match method {
                Some(m) => Method::parse(&m)?,
                None => cfg.method.ok_or_else(|| {
                    HarnessError::Config("`method`: pass --method or set it in the config".into())
                })?,
            };
            let out = out_dir(&common, &cfg, method.as_str());
            let rec = cmd_prune(&cfg, method, &out)?;
            println!(
                "{}: test accuracy {:.4}, sparsity {:.4}, {} steps ({:.2}x budget)",
                rec.method,
                rec.final_test_accuracy,
                rec.final_sparsity,
                rec.ledger.total_steps,
                rec.budget_ratio
            );
            report(&out.join("record.json"));
        }
        Command::Ims(common) => {
            let cfg = load(&common)?;
            let out = out_dir(&common, &cfg, "ims");
            let rec = cmd_ims(&cfg, &out)?;
            println!(
                "soup: val accuracy {:.4}, test accuracy {:.4}",
                rec.final_val_accuracy, rec.final_test_accuracy
            );
            report(&out.join("record.json"));
        }
        Command::MaskCompare(common) => {
            let cfg = load(&common)?;
            let out = out_dir(&common, &cfg, "mask-compare");
            cmd_mask_compare(&cfg, &out)?;
            report(&out.join("mask_compare.csv"));
        }
        Command::Sweep {
            common,
            axis,
            values,
        } => {
            let cfg = load(&common)?;
            let out = out_dir(&common, &cfg, "sweep");
            cmd_sweep(&cfg, axis, &values, &out)?;
            report(&out.join("sweep.csv"));
        }
        Command::Report { runs, out } => {
            cmd_report(&runs, &out)?;
            report(&out.join("report.csv"));
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
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
