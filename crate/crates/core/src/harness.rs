//! Experiment orchestration: split, inject, train, score and write results.
//!
//! A results directory holds
//!
//! - `config.toml`: the exact run configuration
//! - `seeds.csv`: `run,train_seed,injection_seed`
//! - `metrics.csv`: `run,setting,seed,auroc,ap,f1` per run, then `mean` and
//!   `std` rows
//! - `run_<i>/checkpoint.json`, `run_<i>/scores.csv`
//!   (`event_id,timestamp,score,label,injected_kind`) and
//!   `run_<i>/train_log.csv` (one row per epoch)

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::config::{DataSource, RunConfig};
use crate::error::{Error, Result};
use crate::inject::{apply_plan, InjectionPlan};
use crate::metrics::{self, mean_std};
use crate::stream::{self, chronological_split, concat_splits, format_f64, EventSequences, EventStream, LoadOptions, NodeMap, SplitSpec};
use crate::toy;
use crate::trainer::{self, Checkpoint, EpochLog, Model, ModelConfig, TrainData, TrainingConfig};

pub fn load_data(source: &DataSource) -> Result<(EventStream, Option<NodeMap>)> {
    match source {
        DataSource::File {
            path,
            format,
            node_ids,
            feature_dim,
        } => {
            let opts = LoadOptions {
                format: *format,
                node_ids: *node_ids,
                default_feature_dim: *feature_dim,
            };
            let (s, map) = stream::load_stream(path, &opts)?;
            Ok((s, Some(map)))
        }
        DataSource::Toy(cfg) => Ok((toy::generate(cfg)?, None)),
    }
}

/// The cumulative (train ++ val ++ test) stream after injection, with the
/// position range of each split.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub stream: EventStream,
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Prepared {
    pub fn split(&self, range: &Range<usize>) -> Result<EventStream> {
        EventStream::new(
            self.stream.events()[range.clone()].to_vec(),
            self.stream.num_nodes(),
            self.stream.feature_dim(),
        )
    }

    pub fn labels(&self, range: &Range<usize>) -> Vec<u8> {
        self.stream.events()[range.clone()]
            .iter()
            .map(|e| u8::from(e.is_anomalous()))
            .collect()
    }

    pub fn sequences(&self, range: &Range<usize>, history: usize) -> Vec<EventSequences> {
        range
            .clone()
            .map(|i| self.stream.build_sequences(self.stream.event(i), history))
            .collect()
    }
}

pub fn prepare(stream: &EventStream, split: &SplitSpec, injection: Option<&InjectionPlan>) -> Result<Prepared> {
    let parts = chronological_split(stream, split)?;
    let (train, val, test) = match injection {
        Some(plan) => {
            let s = apply_plan(&parts.train, &parts.val, &parts.test, plan)?;
            (s.train, s.val, s.test)
        }
        None => (parts.train, parts.val, parts.test),
    };
    let (stream, ranges) = concat_splits(&[&train, &val, &test])?;
    let mut r = ranges.into_iter();
    Ok(Prepared {
        stream,
        train: r.next().expect("three ranges"),
        val: r.next().expect("three ranges"),
        test: r.next().expect("three ranges"),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub event_id: usize,
    pub timestamp: f64,
    pub score: f64,
    pub rescaled: f64,
    pub label: u8,
    pub injected_kind: Option<stream::InjectedKind>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub auroc: f64,
    pub ap: f64,
    pub f1: f64,
    pub threshold: f64,
    pub rows: Vec<ScoreRow>,
}

/// Scores a range of the prepared stream and computes the metric suite. F1
/// uses the checkpoint's anomaly boundary as threshold.
pub fn evaluate(model: &Model, checkpoint: &Checkpoint, prepared: &Prepared, range: &Range<usize>) -> Result<Evaluation> {
    let seqs = prepared.sequences(range, model.residual().history());
    let refs: Vec<&EventSequences> = seqs.iter().collect();
    let lhat = model.rescaled(&refs)?;
    let rows: Vec<ScoreRow> = range
        .clone()
        .zip(&lhat)
        .map(|(i, &l)| {
            let e = prepared.stream.event(i);
            ScoreRow {
                event_id: i,
                timestamp: e.timestamp,
                score: trainer::anomaly_score(l),
                rescaled: l,
                label: u8::from(e.is_anomalous()),
                injected_kind: e.injected_kind,
            }
        })
        .collect();
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
    if !labels.contains(&1) || !labels.contains(&0) {
        return Err(Error::invalid("evaluation split needs both normal and anomalous events"));
    }
    let threshold = checkpoint.threshold()?;
    Ok(Evaluation {
        auroc: metrics::auroc(&scores, &labels)?,
        ap: metrics::average_precision(&scores, &labels)?,
        f1: metrics::f1_at_threshold(&scores, &labels, threshold)?,
        threshold,
        rows,
    })
}

#[derive(Debug)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub eval: Evaluation,
}

/// Supervision, training and test evaluation for one seed.
pub fn run_once(
    prepared: &Prepared,
    model_cfg: &ModelConfig,
    train_cfg: &TrainingConfig,
    run: usize,
) -> Result<RunResult> {
    let train_split = prepared.split(&prepared.train)?;
    let visible = trainer::prepare_supervision(&train_split, train_cfg.setting, train_cfg.seed)?;
    let data = TrainData::new(
        &prepared.stream,
        prepared.train.clone(),
        prepared.val.clone(),
        visible,
        model_cfg.encoder.history,
    )?;
    let out = trainer::train(model_cfg, train_cfg, &data)?;
    let eval = evaluate(&out.model, &out.checkpoint, prepared, &prepared.test)?;
    Ok(RunResult {
        run,
        seed: train_cfg.seed,
        model: out.model,
        checkpoint: out.checkpoint,
        log: out.log,
        eval,
    })
}

pub fn write_scores(rows: &[ScoreRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["event_id", "timestamp", "score", "label", "injected_kind"])?;
    for r in rows {
        w.write_record([
            r.event_id.to_string(),
            format_f64(r.timestamp),
            format_f64(r.score),
            r.label.to_string(),
            r.injected_kind.map(|k| k.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `(score, label)` pairs back from a scores CSV.
pub fn read_scores(path: &Path) -> Result<Vec<(f64, u8)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = || Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            message: "expected numeric score and label".into(),
        };
        let score: f64 = rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let label: u8 = rec.get(3).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        out.push((score, label));
    }
    Ok(out)
}

pub fn write_train_log(log: &[EpochLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss", "ml", "bo", "rr", "val_metric", "b_n", "b_a", "improved"])?;
    for e in log {
        w.write_record([
            e.epoch.to_string(),
            format_f64(e.loss),
            format_f64(e.ml),
            format_f64(e.bo),
            format_f64(e.rr),
            format_f64(e.val_metric),
            format_f64(e.b_n),
            format_f64(e.b_a),
            e.improved.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub run: usize,
    pub seed: u64,
    pub auroc: f64,
    pub ap: f64,
    pub f1: f64,
}

pub fn write_metrics(setting: &str, runs: &[RunMetrics], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["run", "setting", "seed", "auroc", "ap", "f1"])?;
    for r in runs {
        w.write_record([
            r.run.to_string(),
            setting.to_string(),
            r.seed.to_string(),
            format_f64(r.auroc),
            format_f64(r.ap),
            format_f64(r.f1),
        ])?;
    }
    let col = |f: fn(&RunMetrics) -> f64| mean_std(&runs.iter().map(f).collect::<Vec<_>>());
    let (a, p, f) = (col(|r| r.auroc), col(|r| r.ap), col(|r| r.f1));
    for (name, pick) in [("mean", 0usize), ("std", 1)] {
        let v = |t: (f64, f64)| format_f64(if pick == 0 { t.0 } else { t.1 });
        w.write_record([name.to_string(), setting.to_string(), String::new(), v(a), v(p), v(f)])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug)]
pub struct ExperimentSummary {
    pub output_dir: PathBuf,
    pub runs: Vec<RunMetrics>,
}

impl ExperimentSummary {
    pub fn mean(&self) -> (f64, f64, f64) {
        let m = |f: fn(&RunMetrics) -> f64| mean_std(&self.runs.iter().map(f).collect::<Vec<_>>()).0;
        (m(|r| r.auroc), m(|r| r.ap), m(|r| r.f1))
    }
}

/// Runs `num_runs` seeds (`seed + i`) and writes the results directory.
/// Files of finished runs stay on disk when a later run fails.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    cfg.save(&out.join("config.toml"))?;

    let (stream, node_map) = load_data(&cfg.data)?;
    if let Some(map) = &node_map {
        map.save(&out.join("node_map.csv"))?;
    }
    let prepared = prepare(&stream, &cfg.split, cfg.injection.as_ref())?;
    let injection_seed = cfg.injection.map(|p| p.seed);

    let mut seeds = csv::Writer::from_path(out.join("seeds.csv"))?;
    seeds.write_record(["run", "train_seed", "injection_seed"])?;
    for i in 0..cfg.training.num_runs {
        seeds.write_record([
            i.to_string(),
            (cfg.training.seed + i as u64).to_string(),
            injection_seed.map(|s| s.to_string()).unwrap_or_default(),
        ])?;
    }
    seeds.flush()?;
    drop(seeds);

    let setting = cfg.training.setting.to_string();
    let mut runs = Vec::new();
    for i in 0..cfg.training.num_runs {
        let train_cfg = TrainingConfig {
            seed: cfg.training.seed + i as u64,
            ..cfg.training.clone()
        };
        log::info!("run {i}: seed {}", train_cfg.seed);
        let result = run_once(&prepared, &cfg.model, &train_cfg, i)?;
        let dir = out.join(format!("run_{i}"));
        fs::create_dir_all(&dir)?;
        result.checkpoint.save(&dir.join("checkpoint.json"))?;
        write_scores(&result.eval.rows, &dir.join("scores.csv"))?;
        write_train_log(&result.log, &dir.join("train_log.csv"))?;
        log::info!(
            "run {i}: auroc {:.4} ap {:.4} f1 {:.4} (best epoch {})",
            result.eval.auroc,
            result.eval.ap,
            result.eval.f1,
            result.checkpoint.epoch
        );
        runs.push(RunMetrics {
            run: i,
            seed: train_cfg.seed,
            auroc: result.eval.auroc,
            ap: result.eval.ap,
            f1: result.eval.f1,
        });
        write_metrics(&setting, &runs, &out.join("metrics.csv"))?;
    }
    Ok(ExperimentSummary {
        output_dir: out.clone(),
        runs,
    })
}
