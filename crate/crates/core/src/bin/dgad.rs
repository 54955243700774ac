//! Command-line harness.
//!
//! Exit codes: 0 success, 2 configuration, 3 data, 4 numeric divergence,
//! 1 anything else. Log verbosity comes from `RUST_LOG` (default `info`).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use dyngraph_ad::config::RunConfig;
use dyngraph_ad::harness::{self, Prepared};
use dyngraph_ad::inject::apply_plan;
use dyngraph_ad::stream::{self, chronological_split, EventSequences, EventStream, LoadOptions, NodeIds, StreamFormat};
use dyngraph_ad::theory;
use dyngraph_ad::toy::{self, ToyConfig};
use dyngraph_ad::trainer::{self, Checkpoint};
use dyngraph_ad::Error;

#[derive(Parser)]
#[command(name = "dgad", version, about = "Dynamic graph anomaly detection harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StreamArgs {
    /// Event file (CSV with src,dst,ts[,label][,injected_kind][,f*] or JSONL).
    #[arg(long)]
    input: PathBuf,
    /// csv or jsonl; guessed from the extension when omitted.
    #[arg(long)]
    format: Option<String>,
    /// Treat node columns as dense integer ids instead of remapping them.
    #[arg(long)]
    dense_ids: bool,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides `training.seed` (run i then uses seed + i).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Load an event file, write it back with dense ids and print stats.
    Ingest {
        #[command(flatten)]
        stream: StreamArgs,
        /// Normalized stream CSV; the node map goes next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the chronological train / val / test splits of the configured data.
    Split {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Like `split`, with the configured anomaly injection applied.
    Inject {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Full experiment: split, inject, train and evaluate `num_runs` times.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Re-score the test split of the configured data with a checkpoint.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scores CSV to write.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Score every event of a stream file with a checkpoint.
    Score {
        #[command(flatten)]
        stream: StreamArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check both error bounds on the test split and print a JSON report.
    TheoryCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Boundary shift; half the boundary gap when omitted.
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic community stream as CSV.
    Toy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        events: Option<usize>,
    },
    /// Write a default toy experiment config.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "results")]
        output_dir: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Parse { .. } | Error::Format(_) | Error::Csv(_) | Error::Checkpoint(_) => 3,
        Error::Divergence(_) => 4,
        _ => 1,
    }
}

fn load_config(args: &ConfigArgs) -> dyngraph_ad::Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.training.seed = s;
    }
    if let Some(d) = &args.output_dir {
        cfg.output_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_stream_args(args: &StreamArgs) -> dyngraph_ad::Result<(EventStream, stream::NodeMap)> {
    let format = match &args.format {
        Some(f) => f.parse()?,
        None => StreamFormat::from_path(&args.input)
            .ok_or_else(|| Error::Config(format!("cannot guess the format of {}", args.input.display())))?,
    };
    let mut opts = LoadOptions::new(format);
    if args.dense_ids {
        opts.node_ids = NodeIds::Identity;
    }
    stream::load_stream(&args.input, &opts)
}

fn write_splits(dir: &Path, parts: [(&str, &EventStream); 3]) -> dyngraph_ad::Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, s) in parts {
        let path = dir.join(format!("{name}.csv"));
        stream::save_stream_csv(s, &path)?;
        println!("{name}: {} events, {} anomalous -> {}", s.len(), s.anomaly_count(), path.display());
    }
    Ok(())
}

fn prepared_for(cfg: &RunConfig) -> dyngraph_ad::Result<Prepared> {
    let (stream, _) = harness::load_data(&cfg.data)?;
    harness::prepare(&stream, &cfg.split, cfg.injection.as_ref())
}

fn run(cli: Cli) -> dyngraph_ad::Result<()> {
    match cli.command {
        Command::Ingest { stream: args, out } => {
            let (s, map) = load_stream_args(&args)?;
            let anomalies = s.anomaly_count();
            let stats = json!({
                "events": s.len(),
                "nodes": s.num_nodes(),
                "feature_dim": s.feature_dim(),
                "anomalies": anomalies,
                "anomaly_ratio": if s.is_empty() { 0.0 } else { anomalies as f64 / s.len() as f64 },
            });
            println!("{}", serde_json::to_string_pretty(&stats)?);
            if let Some(out) = out {
                stream::save_stream_csv(&s, &out)?;
                map.save(&out.with_extension("nodes.csv"))?;
            }
        }
        Command::Split { cfg } => {
            let cfg = load_config(&cfg)?;
            let (s, _) = harness::load_data(&cfg.data)?;
            let p = chronological_split(&s, &cfg.split)?;
            write_splits(&cfg.output_dir, [("train", &p.train), ("val", &p.val), ("test", &p.test)])?;
        }
        Command::Inject { cfg } => {
            let cfg = load_config(&cfg)?;
            let plan = cfg
                .injection
                .ok_or_else(|| Error::Config("config has no [injection] table".into()))?;
            let (s, _) = harness::load_data(&cfg.data)?;
            let p = chronological_split(&s, &cfg.split)?;
            let inj = apply_plan(&p.train, &p.val, &p.test, &plan)?;
            write_splits(&cfg.output_dir, [("train", &inj.train), ("val", &inj.val), ("test", &inj.test)])?;
        }
        Command::Run { cfg } => {
            let cfg = load_config(&cfg)?;
            let summary = harness::run_experiment(&cfg)?;
            let (auroc, ap, f1) = summary.mean();
            println!(
                "{} runs: auroc {auroc:.4} ap {ap:.4} f1 {f1:.4} -> {}",
                summary.runs.len(),
                summary.output_dir.display()
            );
        }
        Command::Evaluate { cfg, checkpoint, scores } => {
            let cfg = load_config(&cfg)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let model = ck.restore()?;
            let prepared = prepared_for(&cfg)?;
            let eval = harness::evaluate(&model, &ck, &prepared, &prepared.test)?;
            if let Some(path) = scores {
                harness::write_scores(&eval.rows, &path)?;
            }
            let report = json!({
                "events": eval.rows.len(),
                "auroc": eval.auroc,
                "ap": eval.ap,
                "f1": eval.f1,
                "threshold": eval.threshold,
            });
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Score {
            stream: args,
            checkpoint,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let model = ck.restore()?;
            let (s, _) = load_stream_args(&args)?;
            if s.num_nodes() > ck.num_nodes || s.feature_dim() != ck.feature_dim {
                return Err(Error::Format(format!(
                    "stream has {} nodes and {} features; checkpoint expects at most {} nodes and {} features",
                    s.num_nodes(),
                    s.feature_dim(),
                    ck.num_nodes,
                    ck.feature_dim
                )));
            }
            let prepared = Prepared {
                test: 0..s.len(),
                train: 0..0,
                val: 0..0,
                stream: s,
            };
            let seqs = prepared.sequences(&prepared.test, model.residual().history());
            let refs: Vec<&EventSequences> = seqs.iter().collect();
            let lhat = model.rescaled(&refs)?;
            let rows: Vec<harness::ScoreRow> = lhat
                .iter()
                .enumerate()
                .map(|(i, &l)| {
                    let e = prepared.stream.event(i);
                    harness::ScoreRow {
                        event_id: i,
                        timestamp: e.timestamp,
                        score: trainer::anomaly_score(l),
                        rescaled: l,
                        label: u8::from(e.is_anomalous()),
                        injected_kind: e.injected_kind,
                    }
                })
                .collect();
            harness::write_scores(&rows, &out)?;
            println!("scored {} events -> {}", rows.len(), out.display());
        }
        Command::TheoryCheck {
            cfg,
            checkpoint,
            eps,
            out,
        } => {
            let cfg = load_config(&cfg)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let model = ck.restore()?;
            let prepared = prepared_for(&cfg)?;
            let seqs = prepared.sequences(&prepared.test, model.residual().history());
            let refs: Vec<&EventSequences> = seqs.iter().collect();
            let report = theory::check_model(&model, &ck, &refs, &prepared.labels(&prepared.test), eps)?;
            let text = serde_json::to_string_pretty(&report)?;
            match out {
                Some(path) => std::fs::write(path, text)?,
                None => println!("{text}"),
            }
        }
        Command::Toy { out, seed, events } => {
            let mut cfg = ToyConfig::default();
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = events {
                cfg.events = n;
            }
            let s = toy::generate(&cfg)?;
            stream::save_stream_csv(&s, &out)?;
            println!("{} events over {} nodes -> {}", s.len(), s.num_nodes(), out.display());
        }
        Command::InitConfig { out, output_dir } => {
            RunConfig::toy(output_dir).save(&out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
