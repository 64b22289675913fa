//! The global text autoencoder: a bidirectional GRU encoder producing a
//! Gaussian posterior over the global latent space, a causally masked
//! transformer decoder conditioned on the latent at every block, and the
//! latent critic used for adversarial regularization of the aggregated
//! posterior.

mod model;
mod train;

pub use model::{reconstruction_loss_value, BatchLayout, PretrainVae};
pub use train::{autoencoder_loss_nodes, discriminator_loss_node, PretrainTrainer, StepLosses};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sizes and optimization settings of the global autoencoder. Defaults are
/// the full-scale configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub d_g: usize,
    pub emb_dim: usize,
    pub gru_hidden: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
    pub ffn_dim: usize,
    pub disc_hidden: usize,
    pub lambda_coeff: f64,
    pub wdiv_k: f64,
    pub wdiv_p: f64,
    pub batch: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub max_len: usize,
    pub max_vocab: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps across all epochs; 0 means no cap.
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            d_g: 128,
            emb_dim: 256,
            gru_hidden: 256,
            dec_layers: 3,
            dec_heads: 8,
            ffn_dim: 1024,
            disc_hidden: 128,
            lambda_coeff: 20.0,
            wdiv_k: 2.0,
            wdiv_p: 6.0,
            batch: 512,
            lr: 5e-4,
            adam_beta1: 0.0,
            max_len: crate::corpus::DEFAULT_MAX_LEN,
            max_vocab: 8900,
            epochs: 10,
            max_steps: 0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    /// Reduced model used for desk-scale runs and tests.
    pub fn small() -> Self {
        PretrainConfig {
            d_g: 32,
            emb_dim: 64,
            gru_hidden: 64,
            dec_layers: 2,
            dec_heads: 4,
            ffn_dim: 128,
            batch: 64,
            max_vocab: 1000,
            epochs: 40,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_g", self.d_g),
            ("emb_dim", self.emb_dim),
            ("gru_hidden", self.gru_hidden),
            ("dec_layers", self.dec_layers),
            ("dec_heads", self.dec_heads),
            ("ffn_dim", self.ffn_dim),
            ("disc_hidden", self.disc_hidden),
            ("batch", self.batch),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.emb_dim % self.dec_heads != 0 {
            return Err(Error::Config("emb_dim must be divisible by dec_heads".into()));
        }
        if !(self.lambda_coeff > 0.0) {
            return Err(Error::Config("lambda_coeff must be > 0".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.adam_beta1) {
            return Err(Error::Config("bad optimizer settings".into()));
        }
        Ok(())
    }
}
