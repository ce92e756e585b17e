use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use diffswap_core::customization::IdentityAdapter;
use diffswap_core::pipeline::{
    evaluate, load_landmarks, load_pairs, load_png, save_png, swap, swap_with_adapter, train_identity, write_dataset,
    SwapConfig, SwapContext,
};
use diffswap_core::selfcheck;

#[derive(Parser)]
#[command(name = "diffswap", version, about = "Toy diffusion face swapping on synthetic faces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic faces with parameter and landmark sidecars.
    MakeDataset {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an identity adapter on one source face.
    TrainIdentity {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Swap the source identity into the target image.
    Swap {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Landmark map or dataset sidecar for the target.
        #[arg(long)]
        landmarks: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Reuse a trained adapter instead of customizing again.
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dump_conditions: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Swap every pair in a pairs file and write the metric table.
    Evaluate {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_table: PathBuf,
        #[arg(long)]
        out_json: PathBuf,
    },
    /// Run the analytic DDIM and gradient oracles.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: Option<&Path>) -> Result<SwapConfig> {
    match path {
        Some(p) => SwapConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(SwapConfig::default()),
    }
}

fn read_image(path: &Path) -> Result<diffswap_core::numerics::Tensor> {
    load_png(path).with_context(|| format!("reading {}", path.display()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::MakeDataset { count, size, seed, out } => {
            let files = write_dataset(&out, count, size, seed)?;
            println!("wrote {} faces to {}", files.len(), out.display());
        }
        Command::TrainIdentity { source, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let ctx = SwapContext::standard(&cfg);
            let (adapter, report) = train_identity(&ctx, &read_image(&source)?, &cfg)?;
            adapter.save(&out)?;
            let last = report.total_loss.last().copied().unwrap_or(f64::NAN);
            println!("trained {} steps, final loss {last:.6}, adapter {:016x}", report.total_loss.len(), adapter.checksum());
        }
        Command::Swap {
            source,
            target,
            landmarks,
            config,
            adapter,
            out,
            dump_conditions,
            report,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ctx = SwapContext::standard(&cfg);
            let (src, tgt) = (read_image(&source)?, read_image(&target)?);
            let lm = load_landmarks(&landmarks)?;
            let r = match adapter {
                Some(p) => swap_with_adapter(&ctx, &IdentityAdapter::load(&p)?, &src, &tgt, &lm, &cfg)?,
                None => swap(&ctx, &src, &tgt, &lm, &cfg)?,
            };
            save_png(&out, &r.output)?;
            if let Some(dir) = dump_conditions {
                fs::create_dir_all(&dir)?;
                for c in &r.conditions {
                    save_png(&dir.join(format!("{}.png", c.kind.name())), &c.map)?;
                }
                save_png(&dir.join("mask.png"), &r.mask)?;
            }
            if let Some(p) = report {
                fs::write(&p, r.to_json())?;
            }
            println!(
                "cos(source) {:.4}  cos(target) {:.4}  expr {:.4}  pose {:.4}  shape {:.4}",
                r.metrics.cos_source, r.metrics.cos_target, r.metrics.to_target.expr, r.metrics.to_target.pose, r.metrics.to_target.shape
            );
        }
        Command::Evaluate { pairs, config, out_table, out_json } => {
            let cfg = load_config(config.as_deref())?;
            let ctx = SwapContext::standard(&cfg);
            let list = load_pairs(&pairs).with_context(|| format!("reading pairs {}", pairs.display()))?;
            let r = evaluate(&ctx, &list, &cfg)?;
            let table = r.table();
            fs::write(&out_table, &table)?;
            fs::write(&out_json, r.to_json())?;
            print!("{table}");
            println!("{} succeeded, {} failed", r.succeeded, r.failed);
            for p in r.pairs.iter().filter(|p| p.error.is_some()) {
                eprintln!("pair {}: {}", p.index, p.error.as_deref().unwrap_or_default());
            }
            return Ok(r.succeeded > 0);
        }
        Command::Selfcheck { seed } => {
            let checks = selfcheck::run_all(seed)?;
            for c in &checks {
                println!(
                    "{} {:<50} {:.3e} (limit {:.0e}) {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.threshold,
                    c.detail
                );
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
