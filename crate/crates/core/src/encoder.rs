//! Sequence encoders and residual event representations.
//!
//! An encoder maps an interaction sequence of one node to a fixed-width
//! embedding. The residual representation of an event is the change the
//! event causes in the embeddings of its two endpoints,
//! `Enc(S^t) - Enc(S^{t-})`, concatenated over `(src, dst)` and projected
//! linearly to `x`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::stream::{EventSequences, EventStream, Sequence};

pub trait Encoder: std::fmt::Debug + Send + Sync {
    fn d_emb(&self) -> usize;

    /// One `d_emb` row per sequence.
    fn encode_batch(&self, tape: &mut Tape, bound: &Bound, seqs: &[&Sequence]) -> Result<Var>;
}

/// Embedding of a single sequence under the current parameter values.
pub fn encode(enc: &dyn Encoder, params: &ParamStore, seq: &Sequence) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = enc.encode_batch(&mut tape, &bound, &[seq])?;
    Ok(tape.value(out).to_vec())
}

/// `cos(w_k * dt)` with a geometric frequency ladder from 1 down to 1e-4.
pub fn time_encoding(dt: f64, d_time: usize) -> Vec<f64> {
    (0..d_time)
        .map(|k| {
            let w = if d_time > 1 {
                10f64.powf(-4.0 * k as f64 / (d_time - 1) as f64)
            } else {
                1.0
            };
            (w * dt).cos()
        })
        .collect()
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Reference,
    MeanFeature,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub d_node: usize,
    pub d_time: usize,
    pub d_hidden: usize,
    pub d_emb: usize,
    pub d_proj: usize,
    /// Historical interactions per endpoint.
    pub history: usize,
    /// When false the raw embeddings `Enc(S^t)` replace the residuals.
    pub residual: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Reference,
            d_node: 8,
            d_time: 16,
            d_hidden: 32,
            d_emb: 32,
            d_proj: 16,
            history: 2,
            residual: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history == 0 {
            return Err(Error::config("history length must be at least 1"));
        }
        if self.d_proj == 0 || self.d_emb == 0 || self.d_hidden == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        Ok(())
    }
}

/// Learned node embeddings and a mean-pooled MLP over time-encoded entries.
///
/// Each entry `(neighbor, features, t_l)` of a sequence queried at `t` maps
/// to `tanh([node(neighbor) | features | cos(w (t - t_l))] W1 + b1)`. The
/// entries are averaged (a learned token stands in for an empty sequence)
/// and mapped through `W2, b2`.
#[derive(Clone, Debug)]
pub struct ReferenceEncoder {
    num_nodes: usize,
    feature_dim: usize,
    d_time: usize,
    d_emb: usize,
    pub node_table: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub cold_start: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ReferenceEncoder {
    pub fn new(
        num_nodes: usize,
        feature_dim: usize,
        cfg: &EncoderConfig,
        params: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        let d_in = cfg.d_node + feature_dim + cfg.d_time;
        let node_table = params.add(
            "enc.node",
            Tensor::new(
                num_nodes,
                cfg.d_node,
                (0..num_nodes * cfg.d_node).map(|_| rng.gen_range(-0.1..0.1)).collect(),
            )
            .expect("node table shape"),
        );
        ReferenceEncoder {
            num_nodes,
            feature_dim,
            d_time: cfg.d_time,
            d_emb: cfg.d_emb,
            node_table,
            w1: params.add_glorot("enc.w1", d_in, cfg.d_hidden, rng),
            b1: params.add_zeros("enc.b1", 1, cfg.d_hidden),
            cold_start: params.add_zeros("enc.cold_start", 1, cfg.d_hidden),
            w2: params.add_glorot("enc.w2", cfg.d_hidden, cfg.d_emb, rng),
            b2: params.add_zeros("enc.b2", 1, cfg.d_emb),
        }
    }

    pub fn param_ids(&self) -> [ParamId; 6] {
        [self.node_table, self.w1, self.b1, self.cold_start, self.w2, self.b2]
    }
}

fn check_entries(seqs: &[&Sequence], feature_dim: usize, num_nodes: Option<usize>) -> Result<()> {
    for s in seqs {
        for e in &s.entries {
            if e.edge_features.len() != feature_dim {
                return Err(Error::Shape {
                    op: "encode",
                    left: [1, e.edge_features.len()],
                    right: [1, feature_dim],
                });
            }
            if let Some(n) = num_nodes {
                if e.neighbor >= n {
                    return Err(Error::invalid(format!(
                        "neighbor {} outside the encoder's {n} nodes",
                        e.neighbor
                    )));
                }
            }
        }
    }
    Ok(())
}

impl Encoder for ReferenceEncoder {
    fn d_emb(&self) -> usize {
        self.d_emb
    }

    fn encode_batch(&self, tape: &mut Tape, bound: &Bound, seqs: &[&Sequence]) -> Result<Var> {
        check_entries(seqs, self.feature_dim, Some(self.num_nodes))?;
        let width = self.feature_dim + self.d_time;
        let mut neighbors = Vec::new();
        let mut context = Vec::new();
        let mut groups = Vec::with_capacity(seqs.len());
        let mut empty = Vec::with_capacity(seqs.len());
        for s in seqs {
            let start = neighbors.len();
            for e in &s.entries {
                neighbors.push(e.neighbor);
                context.extend_from_slice(&e.edge_features);
                context.extend(time_encoding(s.query_time - e.timestamp, self.d_time));
            }
            groups.push((start..neighbors.len()).collect::<Vec<_>>());
            empty.push(f64::from(s.entries.is_empty()));
        }
        let hidden_dim = tape.shape(bound[self.b1])[1];
        let pooled = if neighbors.is_empty() {
            tape.constant(Tensor::zeros(seqs.len(), hidden_dim))
        } else {
            let nodes = tape.gather_rows(bound[self.node_table], &neighbors)?;
            let ctx = tape.constant(Tensor::new(neighbors.len(), width, context)?);
            let input = tape.concat_cols(&[nodes, ctx])?;
            let h = tape.matmul(input, bound[self.w1])?;
            let h = tape.add_row(h, bound[self.b1])?;
            let h = tape.tanh(h);
            tape.mean_pool(h, groups)?
        };
        let indicator = tape.constant(Tensor::column(empty));
        let token = tape.matmul(indicator, bound[self.cold_start])?;
        let pooled = tape.add(pooled, token)?;
        let out = tape.matmul(pooled, bound[self.w2])?;
        tape.add_row(out, bound[self.b2])
    }
}

/// Parameter-free encoder: mean edge features of the sequence, zero when empty.
#[derive(Clone, Debug)]
pub struct MeanFeatureEncoder {
    feature_dim: usize,
}

impl MeanFeatureEncoder {
    pub fn new(feature_dim: usize) -> Self {
        MeanFeatureEncoder { feature_dim }
    }
}

impl Encoder for MeanFeatureEncoder {
    fn d_emb(&self) -> usize {
        self.feature_dim
    }

    fn encode_batch(&self, tape: &mut Tape, _bound: &Bound, seqs: &[&Sequence]) -> Result<Var> {
        check_entries(seqs, self.feature_dim, None)?;
        let d = self.feature_dim;
        let mut values = vec![0.0; seqs.len() * d];
        for (g, s) in seqs.iter().enumerate() {
            if s.entries.is_empty() {
                continue;
            }
            let row = &mut values[g * d..(g + 1) * d];
            for e in &s.entries {
                for (r, f) in row.iter_mut().zip(&e.edge_features) {
                    *r += f;
                }
            }
            let n = s.entries.len() as f64;
            row.iter_mut().for_each(|r| *r /= n);
        }
        Ok(tape.constant(Tensor::new(seqs.len(), d, values)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualRepresentation {
    pub delta_src: Vec<f64>,
    pub delta_dst: Vec<f64>,
    pub concat: Vec<f64>,
    pub projected: Vec<f64>,
}

/// Tape handles of a batch of residual representations.
#[derive(Copy, Clone, Debug)]
pub struct ResidualBatch {
    pub delta_src: Var,
    pub delta_dst: Var,
    pub concat: Var,
    pub x: Var,
}

/// An encoder plus the bias-free projection from `2 * d_emb` to `d_proj`.
#[derive(Debug)]
pub struct ResidualModel {
    encoder: Box<dyn Encoder>,
    pub projection: ParamId,
    history: usize,
    residual: bool,
    d_proj: usize,
}

impl ResidualModel {
    pub fn new(
        encoder: Box<dyn Encoder>,
        cfg: &EncoderConfig,
        params: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        let projection = params.add_glorot("proj.w", 2 * encoder.d_emb(), cfg.d_proj, rng);
        ResidualModel {
            encoder,
            projection,
            history: cfg.history,
            residual: cfg.residual,
            d_proj: cfg.d_proj,
        }
    }

    /// Builds the configured encoder and registers all parameters.
    pub fn from_config(
        cfg: &EncoderConfig,
        num_nodes: usize,
        feature_dim: usize,
        params: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let encoder: Box<dyn Encoder> = match cfg.kind {
            EncoderKind::Reference => Box::new(ReferenceEncoder::new(num_nodes, feature_dim, cfg, params, rng)),
            EncoderKind::MeanFeature => {
                if feature_dim == 0 {
                    return Err(Error::config("the mean-feature encoder needs edge features"));
                }
                Box::new(MeanFeatureEncoder::new(feature_dim))
            }
        };
        Ok(Self::new(encoder, cfg, params, rng))
    }

    pub fn encoder(&self) -> &dyn Encoder {
        self.encoder.as_ref()
    }

    pub fn history(&self) -> usize {
        self.history
    }

    pub fn d_proj(&self) -> usize {
        self.d_proj
    }

    /// Residual representations of a batch of events.
    pub fn forward_tape(&self, tape: &mut Tape, bound: &Bound, batch: &[&EventSequences]) -> Result<ResidualBatch> {
        let mut seqs = Vec::with_capacity(4 * batch.len());
        for s in batch {
            seqs.extend([&s.src.with_event, &s.src.without_event, &s.dst.with_event, &s.dst.without_event]);
        }
        let emb = self.encoder.encode_batch(tape, bound, &seqs)?;
        let pick = |tape: &mut Tape, offset: usize| {
            let rows: Vec<usize> = (0..batch.len()).map(|b| 4 * b + offset).collect();
            tape.gather_rows(emb, &rows)
        };
        let src_with = pick(tape, 0)?;
        let dst_with = pick(tape, 2)?;
        let (delta_src, delta_dst) = if self.residual {
            let src_without = pick(tape, 1)?;
            let dst_without = pick(tape, 3)?;
            (tape.sub(src_with, src_without)?, tape.sub(dst_with, dst_without)?)
        } else {
            (src_with, dst_with)
        };
        let concat = tape.concat_cols(&[delta_src, delta_dst])?;
        let x = tape.matmul(concat, bound[self.projection])?;
        Ok(ResidualBatch {
            delta_src,
            delta_dst,
            concat,
            x,
        })
    }

    pub fn represent(&self, params: &ParamStore, seqs: &EventSequences) -> Result<ResidualRepresentation> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let r = self.forward_tape(&mut tape, &bound, &[seqs])?;
        Ok(ResidualRepresentation {
            delta_src: tape.value(r.delta_src).to_vec(),
            delta_dst: tape.value(r.delta_dst).to_vec(),
            concat: tape.value(r.concat).to_vec(),
            projected: tape.value(r.x).to_vec(),
        })
    }

    /// Residual representation of event `event_id` of `stream`.
    pub fn residual(&self, params: &ParamStore, stream: &EventStream, event_id: usize) -> Result<ResidualRepresentation> {
        let event = stream
            .events()
            .get(event_id)
            .ok_or_else(|| Error::invalid(format!("event {event_id} not in stream")))?;
        self.represent(params, &stream.build_sequences(event, self.history))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::grad_check;
    use crate::stream::{Event, SeqEntry};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &EncoderConfig) -> (ResidualModel, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParamStore::new();
        let model = ResidualModel::from_config(cfg, 6, 2, &mut params, &mut rng).unwrap();
        (model, params)
    }

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            d_node: 3,
            d_time: 4,
            d_hidden: 5,
            d_emb: 4,
            d_proj: 3,
            ..EncoderConfig::default()
        }
    }

    fn stream() -> EventStream {
        let events = vec![
            Event::new(0, 1, 1.0, vec![0.1, 0.2]),
            Event::new(2, 0, 2.0, vec![0.3, -0.1]),
            Event::new(1, 3, 2.5, vec![-0.2, 0.4]),
            Event::new(3, 1, 3.0, vec![0.5, 0.5]),
            Event::new(0, 1, 4.0, vec![0.0, 0.9]),
        ];
        EventStream::new(events, 6, 2).unwrap()
    }

    fn seq(entries: Vec<SeqEntry>) -> Sequence {
        Sequence {
            owner: 0,
            query_time: 5.0,
            entries,
        }
    }

    #[test]
    fn cold_start_and_determinism() {
        let (model, params) = setup(&small_cfg());
        let empty = seq(vec![]);
        let e = encode(model.encoder(), &params, &empty).unwrap();
        // Untrained: cold-start token and b2 are zero.
        assert_eq!(e, vec![0.0; 4]);
        let s = seq(vec![SeqEntry {
            neighbor: 2,
            edge_features: vec![0.3, 0.1],
            timestamp: 1.0,
        }]);
        let a = encode(model.encoder(), &params, &s).unwrap();
        let b = encode(model.encoder(), &params, &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zeroed_mlp_gives_zero_embedding() {
        let (model, mut params) = setup(&small_cfg());
        for p in params.iter_mut() {
            if p.name.starts_with("enc.") && p.name != "enc.node" {
                p.tensor.values_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let s = seq(vec![SeqEntry {
            neighbor: 4,
            edge_features: vec![1.0, -2.0],
            timestamp: 0.5,
        }]);
        assert_eq!(encode(model.encoder(), &params, &s).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn feature_width_mismatch() {
        let (model, params) = setup(&small_cfg());
        let s = seq(vec![SeqEntry {
            neighbor: 1,
            edge_features: vec![1.0],
            timestamp: 0.5,
        }]);
        assert!(matches!(encode(model.encoder(), &params, &s), Err(Error::Shape { .. })));
    }

    #[test]
    fn shapes_and_concat() {
        let (model, params) = setup(&small_cfg());
        let s = stream();
        let r = model.residual(&params, &s, 4).unwrap();
        assert_eq!(r.concat.len(), 8);
        assert_eq!(r.projected.len(), 3);
        let mut joined = r.delta_src.clone();
        joined.extend(&r.delta_dst);
        assert_eq!(joined, r.concat);
    }

    #[test]
    fn constant_encoder_gives_zero_residual() {
        let cfg = small_cfg();
        let (model, mut params) = setup(&cfg);
        let w2 = params.iter_mut().find(|p| p.name == "enc.w2").unwrap();
        w2.tensor.values_mut().iter_mut().for_each(|v| *v = 0.0);
        let r = model.residual(&params, &stream(), 3).unwrap();
        assert!(r.concat.iter().all(|&v| v == 0.0));
        assert!(r.projected.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_locality() {
        let (model, params) = setup(&small_cfg());
        let base = stream();
        let a = model.residual(&params, &base, 4).unwrap();

        // Event 1 is in node 0's history only.
        let mut events = base.events().to_vec();
        events[1].edge_features = vec![9.0, -9.0];
        let changed = EventStream::new(events, 6, 2).unwrap();
        let b = model.residual(&params, &changed, 4).unwrap();
        assert_ne!(a.delta_src, b.delta_src);
        assert_eq!(a.delta_dst, b.delta_dst);

        // Event 3 is in node 1's history only.
        let mut events = base.events().to_vec();
        events[3].edge_features = vec![-4.0, 4.0];
        let changed = EventStream::new(events, 6, 2).unwrap();
        let c = model.residual(&params, &changed, 4).unwrap();
        assert_eq!(a.delta_src, c.delta_src);
        assert_ne!(a.delta_dst, c.delta_dst);
    }

    #[test]
    fn mean_feature_encoder_plugs_in() {
        let cfg = EncoderConfig {
            kind: EncoderKind::MeanFeature,
            ..small_cfg()
        };
        let (model, params) = setup(&cfg);
        let r = model.residual(&params, &stream(), 4).unwrap();
        // Node 0 history before t=4: events 0 and 1; mean (0.2, 0.05).
        // With the event: mean of three = (0.4/3, 1.0/3).
        let expected = [0.4 / 3.0 - 0.2, 1.0 / 3.0 - 0.05];
        for (a, b) in r.delta_src.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_through_both_embeddings() {
        let (model, params) = setup(&small_cfg());
        let s = stream();
        let seqs: Vec<EventSequences> = (0..5).map(|i| s.build_sequences(s.event(i), 2)).collect();
        let refs: Vec<&EventSequences> = seqs.iter().collect();
        let id = params.find("enc.w1").unwrap();
        let theta = params.get(id).clone();
        let rep = grad_check(
            |t, v| {
                let mut b = params.bind(t);
                b.replace(id, v);
                let r = model.forward_tape(t, &b, &refs)?;
                let sq = t.square(r.x);
                Ok(t.sum(sq))
            },
            &theta,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }
}
