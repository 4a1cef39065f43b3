//! Decentralized diffusion ensembles at desk scale.
//!
//! Independently trained flow-matching experts, each confined to one data
//! cluster, are combined at sampling time by a small router that reads only
//! the noisy state, the timestep and a pooled condition. The crate also
//! carries the monolithic baseline, the evaluation metrics and the
//! experiment harness that compares the two.

pub mod codec;
pub mod datagen;
pub mod error;
pub mod flow;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod router;
pub mod sampler;

pub use error::{Error, FormatError, Result};
