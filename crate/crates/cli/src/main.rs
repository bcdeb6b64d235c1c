use std::path::{Path, PathBuf};
use std::process::ExitCode;

use batr_cli::commands;
use batr_cli::Config;
use batr_core::fewshot::EpisodeShape;
use batr_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "batr", about = "Few-shot ViT with bi-level token refinement", version)]
struct Cli {
    /// `key = value` configuration file; defaults apply to absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Load checkpoints whose architecture hash differs from the config.
    #[arg(long, global = true)]
    allow_config_mismatch: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Ckpt {
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct Episodes {
    #[arg(long)]
    way: Option<usize>,
    #[arg(long)]
    shot: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic texture dataset.
    Synth {
        /// Defaults to the configured dataset path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Masked-image-modelling pretraining on the meta-train classes.
    Pretrain {
        #[arg(long, default_value = "pretrain.bckp")]
        out: PathBuf,
    },
    /// Episodic meta-finetuning of backbone and refinement head.
    MetaFinetune {
        #[command(flatten)]
        ckpt: Ckpt,
        #[arg(long, default_value = "meta.bckp")]
        out: PathBuf,
    },
    /// Accuracy and 95% interval on test-class episodes.
    Eval {
        #[command(flatten)]
        ckpt: Ckpt,
        #[command(flatten)]
        ep: Episodes,
    },
    /// Attention matrices, embedding norms and an importance heatmap.
    Inspect {
        #[command(flatten)]
        ckpt: Ckpt,
        /// Dataset index of the image.
        #[arg(long, default_value_t = 0)]
        image: usize,
        #[arg(long, default_value = "inspect")]
        out: PathBuf,
    },
    /// Component ablation table, 1-shot and 5-shot.
    Ablate {
        #[command(flatten)]
        ckpt: Ckpt,
        #[command(flatten)]
        ep: Episodes,
        #[arg(long, default_value = "ablation.txt")]
        out: PathBuf,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let allow = cli.allow_config_mismatch;
    match cli.cmd {
        Cmd::Synth { out } => {
            let out = out.unwrap_or_else(|| cfg.dataset.clone());
            let s = commands::cmd_synth(&cfg, &out)?;
            println!(
                "{} images written to {}; nearest-centroid accuracy {:.4}",
                s.images,
                out.display(),
                s.centroid_accuracy
            );
        }
        Cmd::Pretrain { out } => {
            let r = commands::cmd_pretrain(&cfg, &out)?;
            for (e, l) in r.epoch_losses.iter().enumerate() {
                println!("epoch {e}: loss {l:.6}");
            }
            println!("checkpoint written to {}", out.display());
        }
        Cmd::MetaFinetune { ckpt, out } => {
            let logs = commands::cmd_meta_finetune(&cfg, &ckpt.checkpoint, &out, allow)?;
            for l in &logs {
                println!(
                    "epoch {}: loss_ce {:.4}, loss_sep {:.4}, val_acc {:.4} ± {:.4}",
                    l.epoch, l.loss_ce, l.loss_sep, l.val_acc, l.ci
                );
            }
            println!("checkpoint written to {}", out.display());
        }
        Cmd::Eval { ckpt, ep } => {
            let shape = EpisodeShape {
                way: ep.way.unwrap_or(cfg.way),
                shot: ep.shot.unwrap_or(cfg.shot),
                query: cfg.query,
            };
            let n = ep.episodes.unwrap_or(cfg.eval_episodes);
            let r = commands::cmd_eval(&cfg, &ckpt.checkpoint, shape, n, allow)?;
            println!("{}", commands::format_accuracy(shape, n, &r));
        }
        Cmd::Inspect { ckpt, image, out } => {
            let r = commands::cmd_inspect(&cfg, &ckpt.checkpoint, image, &out, allow)?;
            println!("{} files written to {}", r.files.len(), out.display());
        }
        Cmd::Ablate { ckpt, ep, out } => {
            if let Some(w) = ep.way {
                cfg.way = w;
            }
            let n = ep.episodes.unwrap_or(cfg.ablation_episodes);
            let rows = commands::cmd_ablate(&cfg, &ckpt.checkpoint, (n, n), allow)?;
            let table = commands::format_ablation(&rows);
            write(&out, &table)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
