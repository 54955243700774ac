//! Anomaly detection on continuous-time dynamic graphs with residual event
//! representations, hypersphere restriction, normalizing-flow likelihoods and
//! bi-boundary optimization.

pub mod autodiff;
pub mod boundary;
pub mod config;
pub mod encoder;
pub mod error;
pub mod flow;
pub mod harness;
pub mod inject;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod restriction;
pub mod stream;
pub mod theory;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
