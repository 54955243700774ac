//! Synthetic community stream for end-to-end checks.
//!
//! Nodes are split into equal communities and each community's members are
//! joined in a ring, so every node has exactly two ring partners. One cycle
//! visits every ring pair once in a fixed slot order, and the cycle repeats
//! for the whole stream with a little timestamp jitter. Every node therefore
//! interacts twice per cycle at node-specific but stable offsets, and edge
//! features carry a noisy per-community signature.
//!
//! A structural anomaly (foreign destination) breaks both the community
//! signature and the destination's rhythm; a temporal anomaly (moved
//! timestamp) breaks the rhythm of both endpoints.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::{Event, EventStream};

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub events: usize,
    pub nodes: usize,
    pub communities: usize,
    pub signature_dim: usize,
    /// Uniform feature noise amplitude.
    pub noise: f64,
    /// Uniform timestamp jitter amplitude, below 0.5.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            events: 2000,
            nodes: 50,
            communities: 10,
            signature_dim: 4,
            noise: 0.05,
            jitter: 0.1,
            seed: 7,
        }
    }
}

impl ToyConfig {
    pub fn feature_dim(&self) -> usize {
        self.signature_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.communities == 0 || self.nodes % self.communities != 0 {
            return Err(Error::config("toy stream needs equal-sized communities"));
        }
        if self.nodes / self.communities < 3 {
            return Err(Error::config("toy stream needs at least three nodes per community"));
        }
        if self.events == 0 || self.signature_dim == 0 {
            return Err(Error::config("toy stream needs events and a signature"));
        }
        if !(0.0..0.5).contains(&self.jitter) || self.noise < 0.0 {
            return Err(Error::config("toy jitter must lie in [0, 0.5) and noise must be nonnegative"));
        }
        Ok(())
    }

    /// Length of one schedule cycle (one slot per ring pair).
    pub fn cycle(&self) -> usize {
        self.nodes
    }
}

fn unit_vector(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.1 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Node `i` belongs to community `i % communities`. Event `k` happens near
/// time `k`; all events are labelled normal.
pub fn generate(cfg: &ToyConfig) -> Result<EventStream> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let signatures: Vec<Vec<f64>> = (0..cfg.communities)
        .map(|_| unit_vector(cfg.signature_dim, &mut rng))
        .collect();
    let mut pairs = Vec::with_capacity(cfg.nodes);
    for c in 0..cfg.communities {
        let members: Vec<usize> = (0..cfg.nodes).filter(|i| i % cfg.communities == c).collect();
        for (k, &a) in members.iter().enumerate() {
            pairs.push((c, a, members[(k + 1) % members.len()]));
        }
    }
    pairs.shuffle(&mut rng);

    let events = (0..cfg.events)
        .map(|k| {
            let (c, a, b) = pairs[k % pairs.len()];
            let (src, dst) = if rng.gen_bool(0.5) { (a, b) } else { (b, a) };
            let t = k as f64 + cfg.jitter * rng.gen_range(-1.0..1.0);
            let f = signatures[c]
                .iter()
                .map(|s| s + cfg.noise * rng.gen_range(-1.0..1.0))
                .collect();
            Event::new(src, dst, t, f).with_label(0)
        })
        .collect();
    EventStream::new(events, cfg.nodes, cfg.feature_dim())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_communities() {
        let cfg = ToyConfig::default();
        let s = generate(&cfg).unwrap();
        assert_eq!(s.len(), 2000);
        assert_eq!(s.num_nodes(), 50);
        assert_eq!(s.feature_dim(), 4);
        assert!(s.events().iter().all(|e| e.src % 10 == e.dst % 10 && e.src != e.dst));
        assert_eq!(s.anomaly_count(), 0);
    }

    #[test]
    fn every_node_keeps_its_rhythm() {
        let cfg = ToyConfig::default();
        let s = generate(&cfg).unwrap();
        let cycle = cfg.cycle() as f64;
        for node in 0..cfg.nodes {
            let times: Vec<f64> = s
                .events()
                .iter()
                .filter(|e| e.src == node || e.dst == node)
                .map(|e| e.timestamp)
                .collect();
            assert!(times.len() >= 78);
            for w in times.windows(3) {
                assert!((w[2] - w[0] - cycle).abs() <= 2.0 * cfg.jitter + 1e-9);
            }
        }
    }

    #[test]
    fn deterministic() {
        let cfg = ToyConfig::default();
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }
}
