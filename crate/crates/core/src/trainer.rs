//! Model assembly, the combined objective, supervision settings, the
//! training loop and checkpoints.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::boundary::{bi_boundary_loss_tape, normal_boundary, BoundaryConfig};
use crate::encoder::{EncoderConfig, ResidualModel};
use crate::error::{Error, Result};
use crate::flow::{ml_loss_tape, rescale_tape, FlowConfig, FlowModel};
use crate::metrics;
use crate::optim::AdamW;
use crate::params::{Bound, ParamStore};
use crate::restriction::{restriction_loss_tape, HypersphereConfig};
use crate::stream::{EventSequences, EventStream};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Events scored per tape during evaluation.
const EVAL_CHUNK: usize = 500;

/// Label supervision available during training.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Setting {
    /// All training labels.
    S1,
    /// Exactly `k` labelled anomalies.
    S2(usize),
    /// No labels.
    S3,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Setting::S1 => f.write_str("S1"),
            Setting::S2(k) => write!(f, "S2({k})"),
            Setting::S3 => f.write_str("S3"),
        }
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        match t {
            "S1" | "s1" => return Ok(Setting::S1),
            "S3" | "s3" => return Ok(Setting::S3),
            _ => {}
        }
        let k = t
            .strip_prefix("S2")
            .or_else(|| t.strip_prefix("s2"))
            .map(|r| r.trim_matches(|c| c == '(' || c == ')' || c == ':'))
            .and_then(|r| r.parse::<usize>().ok())
            .ok_or_else(|| Error::config(format!("unknown setting {s:?}; expected S1, S2(k) or S3")))?;
        Ok(Setting::S2(k))
    }
}

impl TryFrom<String> for Setting {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Setting> for String {
    fn from(s: Setting) -> String {
        s.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub setting: Setting,
    pub num_runs: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lambda1: 1.0,
            lambda2: 0.5,
            batch_size: 200,
            max_epochs: 200,
            patience: 10,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            setting: Setting::S3,
            num_runs: 5,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::config("lambda1 and lambda2 must be nonnegative"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.num_runs == 0 {
            return Err(Error::config("batch_size, max_epochs and num_runs must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("learning_rate must be positive and weight_decay nonnegative"));
        }
        if let Setting::S2(k) = self.setting {
            if !(1..=3).contains(&k) {
                return Err(Error::config(format!("S2 needs k in 1..=3, got {k}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub flow: FlowConfig,
    pub sphere: HypersphereConfig,
    pub boundary: BoundaryConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.flow.validate()?;
        self.sphere.validate()?;
        self.boundary.validate()
    }
}

/// Residual encoder, projection and flow over one parameter store.
#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    residual: ResidualModel,
    flow: FlowModel,
    rescale_c: f64,
    rescale_offset: f64,
    num_nodes: usize,
    feature_dim: usize,
}

/// Tape handles of one forward pass.
#[derive(Copy, Clone, Debug)]
pub struct Forward {
    pub x: Var,
    pub log_likelihood: Var,
    pub rescaled: Var,
}

/// Per-event model outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct EventOutput {
    pub x: Vec<f64>,
    pub log_likelihood: f64,
    pub rescaled: f64,
}

impl Model {
    pub fn new(config: &ModelConfig, num_nodes: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let residual = ResidualModel::from_config(&config.encoder, num_nodes, feature_dim, &mut params, &mut rng)?;
        let d = config.encoder.d_proj;
        let flow = FlowModel::new(d, &config.flow, &mut params, &mut rng);
        let rescale_offset = config.flow.rescale_offset.unwrap_or_else(|| flow.log_density_ceiling());
        Ok(Model {
            config: config.clone(),
            params,
            residual,
            flow,
            rescale_c: config.flow.rescale_constant_for(d),
            rescale_offset,
            num_nodes,
            feature_dim,
        })
    }

    pub fn residual(&self) -> &ResidualModel {
        &self.residual
    }

    pub fn flow(&self) -> &FlowModel {
        &self.flow
    }

    pub fn rescale_constant(&self) -> f64 {
        self.rescale_c
    }

    /// Raw log-likelihood that rescales to 0.
    pub fn rescale_offset(&self) -> f64 {
        self.rescale_offset
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn forward_tape(&self, tape: &mut Tape, bound: &Bound, batch: &[&EventSequences]) -> Result<Forward> {
        let r = self.residual.forward_tape(tape, bound, batch)?;
        let ll = self.flow.log_likelihood_tape(tape, bound, r.x)?;
        let rescaled = rescale_tape(tape, ll, self.rescale_offset, self.rescale_c);
        Ok(Forward {
            x: r.x,
            log_likelihood: ll,
            rescaled,
        })
    }

    /// Outputs for every event, evaluated in chunks.
    pub fn outputs(&self, seqs: &[&EventSequences]) -> Result<Vec<EventOutput>> {
        let d = self.residual.d_proj();
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape);
            let f = self.forward_tape(&mut tape, &bound, chunk)?;
            let (x, ll, lh) = (tape.value(f.x), tape.value(f.log_likelihood), tape.value(f.rescaled));
            for i in 0..chunk.len() {
                out.push(EventOutput {
                    x: x[i * d..(i + 1) * d].to_vec(),
                    log_likelihood: ll[i],
                    rescaled: lh[i],
                });
            }
        }
        Ok(out)
    }

    /// Rescaled log-likelihoods of the given events.
    pub fn rescaled(&self, seqs: &[&EventSequences]) -> Result<Vec<f64>> {
        Ok(self.outputs(seqs)?.into_iter().map(|o| o.rescaled).collect())
    }

    /// Anomaly scores `1 - exp(l_hat)` of the given events.
    pub fn scores(&self, seqs: &[&EventSequences]) -> Result<Vec<f64>> {
        Ok(self.rescaled(seqs)?.into_iter().map(anomaly_score).collect())
    }
}

/// `1 - exp(l_hat)`; lies in `[0, 1 - 1/e]` for `l_hat` in `[-1, 0]`.
pub fn anomaly_score(rescaled: f64) -> f64 {
    1.0 - rescaled.exp()
}

#[derive(Copy, Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub ml: f64,
    pub bo: f64,
    pub rr: f64,
    pub b_n: f64,
    pub b_a: f64,
    pub normals: usize,
    pub anomalies: usize,
}

/// Combined objective `ml + lambda1 * bo + lambda2 * rr` of one batch.
///
/// `anomalous[i]` marks a visible anomaly label; every other event takes the
/// normal branch of each loss. Boundaries come from this batch's normals and
/// are treated as constants.
pub fn combined_loss_tape(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    batch: &[&EventSequences],
    anomalous: &[bool],
    lambda1: f64,
    lambda2: f64,
) -> Result<(Var, LossParts)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    if anomalous.len() != batch.len() {
        return Err(Error::invalid("label mask length differs from batch size"));
    }
    let normal: Vec<bool> = anomalous.iter().map(|a| !a).collect();
    let f = model.forward_tape(tape, bound, batch)?;
    let ml = ml_loss_tape(tape, f.log_likelihood, &normal)?;

    let lhat = tape.value(f.rescaled);
    let normals: Vec<f64> = lhat.iter().zip(&normal).filter(|p| *p.1).map(|p| *p.0).collect();
    let bcfg = &model.config.boundary;
    let b_n = normal_boundary(&normals, bcfg.alpha)?;
    let b_a = bcfg.anomaly_boundary(b_n);
    let bo = bi_boundary_loss_tape(tape, f.rescaled, anomalous, b_n, b_a, bcfg.literal)?;
    let rr = restriction_loss_tape(tape, f.x, anomalous, &model.config.sphere)?;

    let wbo = tape.scale(bo, lambda1);
    let wrr = tape.scale(rr, lambda2);
    let t = tape.add(ml, wbo)?;
    let total = tape.add(t, wrr)?;
    let parts = LossParts {
        total: tape.scalar(total),
        ml: tape.scalar(ml),
        bo: tape.scalar(bo),
        rr: tape.scalar(rr),
        b_n,
        b_a,
        normals: normals.len(),
        anomalies: batch.len() - normals.len(),
    };
    Ok((total, parts))
}

/// Value-only form of [`combined_loss_tape`].
pub fn combined_loss(
    model: &Model,
    batch: &[&EventSequences],
    anomalous: &[bool],
    lambda1: f64,
    lambda2: f64,
) -> Result<LossParts> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let (_, parts) = combined_loss_tape(model, &mut tape, &bound, batch, anomalous, lambda1, lambda2)?;
    Ok(parts)
}

/// Which training anomaly labels the learner may see, per event.
pub fn prepare_supervision(train: &EventStream, setting: Setting, seed: u64) -> Result<Vec<bool>> {
    let anomalies: Vec<usize> = train
        .events()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.is_anomalous())
        .map(|(i, _)| i)
        .collect();
    let mut visible = vec![false; train.len()];
    match setting {
        Setting::S1 => anomalies.iter().for_each(|&i| visible[i] = true),
        Setting::S2(k) => {
            if anomalies.len() < k {
                return Err(Error::config(format!(
                    "S2({k}) needs {k} training anomalies, found {}",
                    anomalies.len()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for &i in anomalies.choose_multiple(&mut rng, k) {
                visible[i] = true;
            }
        }
        Setting::S3 => {}
    }
    Ok(visible)
}

/// A cumulative stream with the index ranges used for training and
/// validation, plus the visible training labels.
#[derive(Debug)]
pub struct TrainData<'a> {
    pub stream: &'a EventStream,
    pub train: Range<usize>,
    pub val: Range<usize>,
    /// One entry per training event.
    pub visible: Vec<bool>,
    sequences: Vec<EventSequences>,
}

impl<'a> TrainData<'a> {
    pub fn new(
        stream: &'a EventStream,
        train: Range<usize>,
        val: Range<usize>,
        visible: Vec<bool>,
        history: usize,
    ) -> Result<Self> {
        if train.is_empty() || train.end > stream.len() || val.end > stream.len() {
            return Err(Error::invalid("training or validation range outside the stream"));
        }
        if visible.len() != train.len() {
            return Err(Error::invalid("visible label mask must cover the training range"));
        }
        let sequences = (train.start..val.end.max(train.end))
            .map(|i| stream.build_sequences(stream.event(i), history))
            .collect();
        Ok(TrainData {
            stream,
            train,
            val,
            visible,
            sequences,
        })
    }

    fn seqs(&self, range: Range<usize>) -> Vec<&EventSequences> {
        let base = self.train.start;
        self.sequences[range.start - base..range.end - base].iter().collect()
    }

    pub fn train_sequences(&self) -> Vec<&EventSequences> {
        self.seqs(self.train.clone())
    }

    pub fn val_sequences(&self) -> Vec<&EventSequences> {
        self.seqs(self.val.clone())
    }

    pub fn val_labels(&self) -> Vec<u8> {
        self.stream.events()[self.val.clone()]
            .iter()
            .map(|e| u8::from(e.is_anomalous()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub ml: f64,
    pub bo: f64,
    pub rr: f64,
    pub val_metric: f64,
    pub b_n: f64,
    pub b_a: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub training_config: TrainingConfig,
    pub num_nodes: usize,
    pub feature_dim: usize,
    pub params: ParamStore,
    pub b_n: Option<f64>,
    pub b_a: Option<f64>,
    pub val_metric: String,
    pub best_val_metric: f64,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.format_version
            )));
        }
        Ok(ck)
    }

    /// Rebuilds the model with the stored parameter values.
    pub fn restore(&self) -> Result<Model> {
        let mut model = Model::new(&self.model_config, self.num_nodes, self.feature_dim, 0)?;
        model.params.load_values(&self.params)?;
        Ok(model)
    }

    pub fn threshold(&self) -> Result<f64> {
        metrics::boundary_threshold(self.b_a)
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Name of the early-stopping metric for a validation label set.
pub fn val_metric_name(labels: &[u8]) -> &'static str {
    if labels.contains(&1) && labels.contains(&0) {
        "ap"
    } else {
        "neg_nll"
    }
}

fn val_metric(model: &Model, data: &TrainData<'_>) -> Result<f64> {
    let seqs = data.val_sequences();
    if seqs.is_empty() {
        return Ok(0.0);
    }
    let labels = data.val_labels();
    let outs = model.outputs(&seqs)?;
    if val_metric_name(&labels) == "ap" {
        let scores: Vec<f64> = outs.iter().map(|o| anomaly_score(o.rescaled)).collect();
        metrics::average_precision(&scores, &labels)
    } else {
        Ok(outs.iter().map(|o| o.log_likelihood).sum::<f64>() / outs.len() as f64)
    }
}

/// Boundaries from the visible-normal training events under the current
/// parameters.
fn epoch_boundaries(model: &Model, data: &TrainData<'_>) -> Result<(f64, f64)> {
    let seqs: Vec<&EventSequences> = data
        .train_sequences()
        .into_iter()
        .zip(&data.visible)
        .filter(|(_, &v)| !v)
        .map(|(s, _)| s)
        .collect();
    let lhat = model.rescaled(&seqs)?;
    let b_n = normal_boundary(&lhat, model.config.boundary.alpha)?;
    Ok((b_n, model.config.boundary.anomaly_boundary(b_n)))
}

/// Chronological mini-batch training with early stopping on the validation
/// metric. Returns the best epoch's model.
pub fn train(model_cfg: &ModelConfig, cfg: &TrainingConfig, data: &TrainData<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = Model::new(model_cfg, data.stream.num_nodes(), data.stream.feature_dim(), cfg.seed)?;
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let train_seqs = data.train_sequences();
    let metric_name = val_metric_name(&data.val_labels());

    let mut log = Vec::new();
    let mut best: Option<(f64, ParamStore, f64, f64, usize)> = None;
    let mut wait = 0usize;
    for epoch in 1..=cfg.max_epochs {
        let mut sums = LossParts::default();
        let mut batches = 0usize;
        for (b, (seqs, vis)) in train_seqs
            .chunks(cfg.batch_size)
            .zip(data.visible.chunks(cfg.batch_size))
            .enumerate()
        {
            if vis.iter().all(|&v| v) {
                log::warn!("epoch {epoch} batch {b}: no normal samples, skipped");
                continue;
            }
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let (loss, parts) =
                combined_loss_tape(&model, &mut tape, &bound, seqs, vis, cfg.lambda1, cfg.lambda2)?;
            if !parts.total.is_finite() {
                return Err(Error::Divergence(format!(
                    "epoch {epoch} batch {b}: loss {} (ml {}, bo {}, rr {})",
                    parts.total, parts.ml, parts.bo, parts.rr
                )));
            }
            let grads = tape.backward(loss)?;
            model.params.collect_grads(&bound, &grads);
            if let Some(p) = model
                .params
                .iter()
                .find(|p| p.tensor.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
            {
                return Err(Error::Divergence(format!(
                    "epoch {epoch} batch {b}: non-finite gradient in {}",
                    p.name
                )));
            }
            opt.step(&mut model.params);
            sums.total += parts.total;
            sums.ml += parts.ml;
            sums.bo += parts.bo;
            sums.rr += parts.rr;
            batches += 1;
        }
        let (b_n, b_a) = epoch_boundaries(&model, data)?;
        let metric = val_metric(&model, data)?;
        if !metric.is_finite() {
            return Err(Error::Divergence(format!("epoch {epoch}: validation metric {metric}")));
        }
        let improved = best.as_ref().map_or(true, |b| metric > b.0);
        if improved {
            best = Some((metric, model.params.clone(), b_n, b_a, epoch));
            wait = 0;
        } else {
            wait += 1;
        }
        let n = batches.max(1) as f64;
        let entry = EpochLog {
            epoch,
            loss: sums.total / n,
            ml: sums.ml / n,
            bo: sums.bo / n,
            rr: sums.rr / n,
            val_metric: metric,
            b_n,
            b_a,
            improved,
        };
        log::debug!(
            "epoch {epoch}: loss {:.5} (ml {:.5}, bo {:.5}, rr {:.5}) val {metric_name} {metric:.5}",
            entry.loss,
            entry.ml,
            entry.bo,
            entry.rr
        );
        log.push(entry);
        if wait >= cfg.patience {
            break;
        }
    }

    let (metric, params, b_n, b_a, epoch) = best.expect("at least one epoch");
    model.params = params;
    let checkpoint = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        model_config: model_cfg.clone(),
        training_config: cfg.clone(),
        num_nodes: model.num_nodes,
        feature_dim: model.feature_dim,
        params: model.params.clone(),
        b_n: Some(b_n),
        b_a: Some(b_a),
        val_metric: metric_name.to_string(),
        best_val_metric: metric,
        epoch,
    };
    Ok(TrainOutcome {
        model,
        checkpoint,
        log,
    })
}
