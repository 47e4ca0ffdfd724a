use std::path::PathBuf;

use anytime4d::commands::{self, QueryOptions};
use anytime4d::{CliError, CliResult, RunConfig};
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "anytime4d", version, about = "Synthetic 4D reconstruction pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// none, no_cross_attn, no_self_attn or no_adaln.
        #[arg(long)]
        ablation: Option<String>,
        /// displacement, points_world or points_local.
        #[arg(long)]
        output: Option<String>,
        #[arg(long)]
        causal: bool,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict geometry and motion for one sequence.
    Query {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sequence directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        source: usize,
        /// Comma-separated target frame indices.
        #[arg(long, value_delimiter = ',', required = true)]
        targets: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        streaming: bool,
        #[arg(long)]
        allow_offline_weights: bool,
        /// Colored point cloud of the source frame; tracks go next to it.
        #[arg(long)]
        ply: Option<PathBuf>,
    },
    /// Score a prediction against ground truth.
    Metrics {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// sim3_ransac, median_scale or none.
        #[arg(long)]
        align: Option<String>,
        /// scale or scale_shift.
        #[arg(long)]
        depth_align: Option<String>,
        #[arg(long, default_value = "run")]
        name: String,
        /// Source frame when `--pred` is a ground-truth sequence.
        #[arg(long, default_value_t = 0)]
        source: usize,
    },
    /// Aggregate metrics.json files into a table.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn parse_enum<T: DeserializeOwned>(what: &str, s: &str) -> CliResult<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| CliError::Config(format!("unknown {what} {s:?}")))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.cmd {
        Cmd::Gen { config, out, count, seed } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(c) = count {
                cfg.data.count = c;
            }
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            let m = commands::cmd_gen(&cfg, &out)?;
            println!("{} sequences in {}", m.sequences.len(), out.display());
        }
        Cmd::Train {
            config,
            data,
            out,
            steps,
            lr,
            ablation,
            output,
            causal,
            resume,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(lr) = lr {
                cfg.train.learning_rate = lr;
            }
            if let Some(a) = ablation {
                cfg.model.ablation = parse_enum("ablation", &a)?;
            }
            if let Some(o) = output {
                cfg.model.output = parse_enum("output", &o)?;
            }
            if causal {
                cfg.model.causal = true;
            }
            let r = commands::cmd_train(&cfg, &data, &out, resume.as_deref())?;
            println!("trained {} steps; checkpoint {}", r.steps, r.final_checkpoint.display());
        }
        Cmd::Query {
            checkpoint,
            data,
            source,
            targets,
            out,
            streaming,
            allow_offline_weights,
            ply,
        } => {
            let opts = QueryOptions {
                streaming,
                allow_offline_weights,
                ply,
            };
            let p = commands::cmd_query(&checkpoint, &data, source, &targets, &out, &opts)?;
            println!("{} targets written to {}", p.targets().len(), out.display());
        }
        Cmd::Metrics {
            config,
            pred,
            gt,
            out,
            align,
            depth_align,
            name,
            source,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(a) = align {
                cfg.metrics.track_alignment = a;
            }
            if let Some(a) = depth_align {
                cfg.metrics.depth_alignment = a;
            }
            let r = commands::cmd_metrics(&cfg, &pred, &gt, source, &name, &out)?;
            println!("{}\n{}", anytime4d_core::evalmetrics::MetricReport::csv_header(), r.csv_row());
        }
        Cmd::Report { out, inputs } => {
            commands::cmd_report(&inputs, &out)?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
