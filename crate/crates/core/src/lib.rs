//! Goal-oriented lossy compression for the parameters of an L_p-norm
//! scheduling task.
//!
//! A household's non-controllable load `l` is compressed by a linear
//! precoder and a vector quantizer before a scheduler allocates a
//! controllable energy budget by water-filling. Instead of reconstruction
//! error, every stage is trained to minimize the optimality loss of that
//! allocation.

pub mod cli;
pub mod codesign;
pub mod config;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod goal;
pub mod harness;
pub mod precoding;
pub mod quantization;
pub mod scheduler;

pub use config::{GoqInit, TrainConfig};
pub use dataset::Dataset;
pub use error::{Error, Result};
pub use goal::GoalData;
pub use precoding::{Precoder, PrecoderMeta};
pub use quantization::{Codebook, QuantizerMode};
pub use scheduler::{Decision, LinearizedDecision, Norm, TaskSpec};
