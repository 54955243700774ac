//! Synthetic temporal (T) and structural (S) anomaly injection.
//!
//! Injected events are copies of randomly chosen original events with either
//! the timestamp or the destination randomised. They are appended to the
//! split and the split is re-sorted, so the stream grows.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::{Event, EventStream, InjectedKind};

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectionPlan {
    pub train_rate_t: f64,
    pub val_rate_t: f64,
    pub test_rate_t: f64,
    pub test_rate_s: f64,
    pub seed: u64,
}

impl Default for InjectionPlan {
    fn default() -> Self {
        InjectionPlan {
            train_rate_t: 0.001,
            val_rate_t: 0.001,
            test_rate_t: 0.0005,
            test_rate_s: 0.0005,
            seed: 0,
        }
    }
}

impl InjectionPlan {
    pub fn none(seed: u64) -> Self {
        InjectionPlan {
            train_rate_t: 0.0,
            val_rate_t: 0.0,
            test_rate_t: 0.0,
            test_rate_s: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("train_rate_t", self.train_rate_t),
            ("val_rate_t", self.val_rate_t),
            ("test_rate_t", self.test_rate_t),
            ("test_rate_s", self.test_rate_s),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::config(format!("{name} = {r} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// `floor(rate * size)`, robust to representation error in products such as
/// `0.001 * 10000`.
pub fn injection_count(rate: f64, size: usize) -> usize {
    (rate * size as f64 + 1e-9).floor() as usize
}

fn templates(split: &EventStream) -> Vec<&Event> {
    split
        .events()
        .iter()
        .filter(|e| e.injected_kind.is_none())
        .collect()
}

fn check_count(split: &EventStream, count: usize) -> Result<()> {
    if count > split.len() {
        return Err(Error::config(format!(
            "cannot inject {count} anomalies into a split of {} events",
            split.len()
        )));
    }
    Ok(())
}

fn rebuild(split: &EventStream, extra: Vec<Event>) -> Result<EventStream> {
    let mut events = split.events().to_vec();
    events.extend(extra);
    EventStream::new(events, split.num_nodes(), split.feature_dim())
}

/// Copies `count` uniformly drawn events and gives each a uniform timestamp
/// in the split's time range.
pub fn inject_temporal(split: &EventStream, count: usize, seed: u64) -> Result<EventStream> {
    check_count(split, count)?;
    if count == 0 {
        return Ok(split.clone());
    }
    let pool = templates(split);
    if pool.is_empty() {
        return Err(Error::config("no original events to copy for injection"));
    }
    let (lo, hi) = split.time_range().expect("nonempty split");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extra = (0..count)
        .map(|_| {
            let tpl = *pool.choose(&mut rng).expect("nonempty pool");
            let ts = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            Event {
                timestamp: ts,
                label: Some(1),
                injected_kind: Some(InjectedKind::T),
                ..tpl.clone()
            }
        })
        .collect();
    rebuild(split, extra)
}

/// Copies `count` uniformly drawn events and replaces each destination by a
/// uniform node different from the original one.
pub fn inject_structural(split: &EventStream, count: usize, seed: u64) -> Result<EventStream> {
    check_count(split, count)?;
    if split.num_nodes() < 2 {
        return Err(Error::config("structural injection needs at least two nodes"));
    }
    if count == 0 {
        return Ok(split.clone());
    }
    let pool = templates(split);
    if pool.is_empty() {
        return Err(Error::config("no original events to copy for injection"));
    }
    let n = split.num_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extra = (0..count)
        .map(|_| {
            let tpl = *pool.choose(&mut rng).expect("nonempty pool");
            // Uniform over the n - 1 other nodes.
            let mut dst = rng.gen_range(0..n - 1);
            if dst >= tpl.dst {
                dst += 1;
            }
            Event {
                dst,
                label: Some(1),
                injected_kind: Some(InjectedKind::S),
                ..tpl.clone()
            }
        })
        .collect();
    rebuild(split, extra)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InjectedSplits {
    pub train: EventStream,
    pub val: EventStream,
    pub test: EventStream,
}

/// T anomalies into every split, S anomalies into test only. Each injector
/// gets its own seed derived from `plan.seed`.
pub fn apply_plan(
    train: &EventStream,
    val: &EventStream,
    test: &EventStream,
    plan: &InjectionPlan,
) -> Result<InjectedSplits> {
    plan.validate()?;
    let s = plan.seed;
    let train = inject_temporal(train, injection_count(plan.train_rate_t, train.len()), s)?;
    let val = inject_temporal(val, injection_count(plan.val_rate_t, val.len()), s.wrapping_add(1))?;
    let n_test = test.len();
    let test = inject_temporal(test, injection_count(plan.test_rate_t, n_test), s.wrapping_add(2))?;
    let test = inject_structural(&test, injection_count(plan.test_rate_s, n_test), s.wrapping_add(3))?;
    Ok(InjectedSplits { train, val, test })
}
