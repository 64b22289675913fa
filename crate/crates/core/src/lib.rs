//! Pre-train once, plug in per condition: a global text autoencoder trained on
//! unlabeled sentences plus small per-condition VAEs over its latent space.

pub mod checkpoint;
pub mod classifier;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod gradcheck;
pub mod graph;
pub mod latent;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod plugin;
pub mod pretrain;
pub mod rng;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
