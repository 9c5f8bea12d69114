use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use cenet_cli::{
    cmd_evaluate, cmd_export_embeddings, cmd_predict, cmd_stats, cmd_train, EvalRequest,
    PredictRequest, RunConfig, TrainOptions,
};
use cenet_core::{AblationVariant, FilterMode, MaskMode, Split};
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "cenet",
    version,
    about = "Temporal knowledge graph forecasting with historical contrastive learning"
)]
struct Cli {
    /// TOML run configuration; unset keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training and random-mask seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for logs, checkpoints and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory (train.txt, valid.txt, test.txt, stat.txt).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Raw-time units per granule.
    #[arg(long, global = true)]
    granularity: Option<u32>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Dataset sizes, new-event rate and recurrence gap histograms.
    Stats,
    /// Stage 1 (prediction heads and query encoder), then stage 2 (history classifier).
    Train {
        /// Ablation variant: his-only, nhis-only, no-stage1, no-stage2, no-CL, random-mask, hard-mask, soft-mask, GT-mask.
        #[arg(long)]
        ablation: Option<String>,
        /// Continue stage 1 from a per-epoch checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the number of stage-1 epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Filtered MRR and Hits@{1,3,10} on a split.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// none, hard, soft, random or ground-truth.
        #[arg(long)]
        mask_mode: Option<MaskMode>,
        /// raw, static or time-aware.
        #[arg(long)]
        filter_mode: Option<FilterMode>,
        /// Write per-query ranks and top scores as JSON lines.
        #[arg(long)]
        dump_scores: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        dump_top_k: usize,
        /// Report file name inside the output directory.
        #[arg(long, default_value = "report.json")]
        report: String,
    },
    /// Top-k objects for a single query (s, p, ?, t).
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        subject: u32,
        #[arg(long)]
        relation: u32,
        /// Query granule.
        #[arg(long)]
        time: u32,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        mask_mode: Option<MaskMode>,
    },
    /// Query embeddings and history labels as JSON lines.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.hyperparams.seed = seed;
        cfg.inference.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(data) = &cli.data {
        cfg.data.dir = data.clone();
    }
    if let Some(g) = cli.granularity {
        cfg.data.granularity = g;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli)?;
    let start = Instant::now();
    match cli.command {
        Command::Stats => {
            let s = cmd_stats(&cfg)?;
            let c = &s.counts;
            println!("entities\t{}", c.entities);
            println!("relations\t{}", c.relations);
            println!("train\t{}", c.train);
            println!("valid\t{}", c.valid.map_or("-".into(), |v| v.to_string()));
            println!("test\t{}", c.test);
            println!("granules\t{}", c.granules);
            println!("new_event_rate\t{:.4}", s.new_event_rate);
        }
        Command::Train {
            ablation,
            resume,
            epochs,
        } => {
            if let Some(name) = ablation {
                cfg.ablation = Some(name.parse::<AblationVariant>()?);
            }
            if let Some(e) = epochs {
                cfg.hyperparams.stage1_epochs = e;
            }
            let out = cmd_train(&cfg, &TrainOptions { resume })?;
            println!("checkpoint\t{}", out.checkpoint.display());
            if let Some(m) = out.classifier {
                println!("classifier_train_accuracy\t{:.4}", m.train_accuracy);
            }
        }
        Command::Evaluate {
            checkpoint,
            split,
            mask_mode,
            filter_mode,
            dump_scores,
            dump_top_k,
            report,
        } => {
            let req = EvalRequest {
                checkpoint,
                split,
                mask_mode,
                filter_mode,
                dump_scores,
                dump_top_k,
                report_name: report,
            };
            let r = cmd_evaluate(&cfg, &req)?;
            println!(
                "mask\t{:?}\tfilter\t{:?}",
                r.config.mask_mode, r.config.filter_mode
            );
            for (name, m) in [
                ("object", &r.object),
                ("subject", &r.subject),
                ("combined", &r.combined),
            ] {
                println!(
                    "{name}\tn={}\tmrr={:.4}\thits@1={:.4}\thits@3={:.4}\thits@10={:.4}",
                    m.count, m.mrr, m.hits1, m.hits3, m.hits10
                );
            }
            if r.diagnostic_only {
                println!("note\tground-truth mask: diagnostic numbers, not a forecast");
            }
        }
        Command::Predict {
            checkpoint,
            subject,
            relation,
            time,
            k,
            mask_mode,
        } => {
            let req = PredictRequest {
                checkpoint,
                subject,
                relation,
                time,
                k,
                mask_mode,
            };
            let out = cmd_predict(&cfg, &req)?;
            if let Some((h, p)) = out.predicted_historical {
                println!("# classifier: historical={h} p={p:.4}");
            }
            println!("rank\tentity\tprobability\tin_history\tmask");
            for (i, c) in out.candidates.iter().enumerate() {
                let mask = c.mask.map_or("-".to_string(), |b| u8::from(b).to_string());
                println!(
                    "{}\t{}\t{:.6}\t{}\t{}",
                    i + 1,
                    c.entity,
                    c.probability,
                    u8::from(c.in_history),
                    mask
                );
            }
        }
        Command::ExportEmbeddings { checkpoint, split } => {
            let out = cmd_export_embeddings(&cfg, checkpoint.as_deref(), split)?;
            println!("{}\t{} lines", out.path.display(), out.lines);
        }
    }
    eprintln!("done in {:.2}s", start.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
