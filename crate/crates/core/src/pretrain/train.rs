use rand::Rng;

use super::model::{BatchLayout, PretrainVae};
use crate::corpus::TokenSequence;
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::latent::{reparameterize, reparameterize_node, GaussianPosterior};
use crate::nn::{Adam, AdamConfig};
use crate::rng::{self, StreamRng};
use crate::tensor::{Mat, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    /// Token cross-entropy summed over time, averaged over the batch.
    pub recon: f64,
    /// `-mean D(z_posterior)` as seen by the encoder (before weighting by lambda).
    pub adversarial: f64,
    /// Critic objective including the gradient penalty.
    pub disc: f64,
}

/// Critic objective: `mean D(z_post) - mean D(z_prior) + k * mean ||grad D(z_hat)||^p`
/// with `z_hat = alpha * z_post + (1 - alpha) * z_prior` per row.
pub fn discriminator_loss_node<T: Real>(
    g: &mut Graph<'_, T>,
    model: &PretrainVae<T>,
    z_post: &Mat<T>,
    z_prior: &Mat<T>,
    alpha: &[T],
) -> Result<NodeId> {
    if z_post.shape() != z_prior.shape() || alpha.len() != z_post.rows() {
        return Err(shape_err(format!(
            "critic batches {:?} vs {:?} ({} mixing weights)",
            z_post.shape(),
            z_prior.shape(),
            alpha.len()
        )));
    }
    let mut mixed = z_post.clone();
    for i in 0..mixed.rows() {
        let a = alpha[i];
        for (x, &p) in mixed.row_mut(i).iter_mut().zip(z_prior.row(i)) {
            *x = a * *x + (T::one() - a) * p;
        }
    }
    let post = g.constant(z_post.clone());
    let prior = g.constant(z_prior.clone());
    let mixed = g.constant(mixed);
    let d_post = model.discriminator_nodes(g, post)?;
    let d_prior = model.discriminator_nodes(g, prior)?;
    let m_post = g.mean_all(d_post);
    let m_prior = g.mean_all(d_prior);
    let gap = g.sub(m_post, m_prior)?;
    let (_, dz) = model.discriminator_with_input_grad(g, mixed)?;
    let sq = g.square(dz);
    let norm2 = g.sum_cols(sq);
    let pw = g.powf(norm2, model.config.wdiv_p / 2.0);
    let pen = g.mean_all(pw);
    let pen = g.scale(pen, model.config.wdiv_k);
    g.add(gap, pen)
}

/// Encoder and decoder objective for one batch with fixed reparameterization
/// noise. Returns `(total, recon, adversarial)` nodes where
/// `total = recon + lambda * adversarial` and `adversarial = -mean D(z)`.
pub fn autoencoder_loss_nodes<T: Real>(
    g: &mut Graph<'_, T>,
    model: &PretrainVae<T>,
    lay: &BatchLayout,
    noise: &Mat<T>,
    lambda: f64,
) -> Result<(NodeId, NodeId, NodeId)> {
    let (mean, logvar) = model.encode_nodes(g, lay)?;
    let z = reparameterize_node(g, mean, logvar, noise.clone())?;
    let logits = model.decode_nodes(g, z, &lay.dec_in, lay.dec_t)?;
    let ce = g.cross_entropy(logits, &lay.dec_target, &lay.dec_mask)?;
    let recon = g.scale(ce, 1.0 / lay.batch as f64);
    let d = model.discriminator_nodes(g, z)?;
    let md = g.mean_all(d);
    let adv = g.scale(md, -1.0);
    let weighted = g.scale(adv, lambda);
    let total = g.add(recon, weighted)?;
    Ok((total, recon, adv))
}

/// Owns a model and its two optimizers. Each step first updates the critic on
/// detached posterior samples, then updates encoder and decoder against the
/// refreshed critic.
pub struct PretrainTrainer<T> {
    pub model: PretrainVae<T>,
    ae_opt: Adam<T>,
    disc_opt: Adam<T>,
    noise_rng: StreamRng,
    steps: usize,
}

impl<T: Real> PretrainTrainer<T> {
    pub fn new(model: PretrainVae<T>) -> Result<Self> {
        model.config.validate()?;
        let opt = AdamConfig::new(model.config.lr, model.config.adam_beta1);
        let ae_opt = Adam::new(opt, model.autoencoder_params());
        let disc_opt = Adam::new(opt, model.discriminator_params());
        let noise_rng = rng::stream(model.config.seed, "pretrain.noise");
        Ok(PretrainTrainer { model, ae_opt, disc_opt, noise_rng, steps: 0 })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step(&mut self, batch: &[TokenSequence]) -> Result<StepLosses> {
        let lay = BatchLayout::new(batch)?;
        let b = lay.batch;
        let d_g = self.model.d_g();
        let noise = rng::normal_mat::<T>(&mut self.noise_rng, b, d_g);
        let prior = rng::normal_mat::<T>(&mut self.noise_rng, b, d_g);
        let alpha: Vec<T> = (0..b).map(|_| T::of(self.noise_rng.random::<f64>())).collect();

        let z_post = {
            let mut g = Graph::new(&self.model.store);
            let (m, l) = self.model.encode_nodes(&mut g, &lay)?;
            let post = GaussianPosterior::new(g.value(m).clone(), g.value(l).clone())?;
            reparameterize(&post, &noise)?
        };

        let (disc, disc_grads) = {
            let mut g = Graph::new(&self.model.store);
            let loss = discriminator_loss_node(&mut g, &self.model, &z_post, &prior, &alpha)?;
            let v = g.value(loss).item().to_f64_lossy();
            (v, g.backward(loss)?)
        };
        ensure_finite(disc)?;
        self.disc_opt.step(&mut self.model.store, &disc_grads);

        let (recon, adversarial, ae_grads) = {
            let mut g = Graph::new(&self.model.store);
            let (total, recon, adv) = autoencoder_loss_nodes(&mut g, &self.model, &lay, &noise, self.model.config.lambda_coeff)?;
            let r = g.value(recon).item().to_f64_lossy();
            let a = g.value(adv).item().to_f64_lossy();
            (r, a, g.backward(total)?)
        };
        ensure_finite(recon + adversarial)?;
        self.ae_opt.step(&mut self.model.store, &ae_grads);
        self.steps += 1;
        Ok(StepLosses { recon, adversarial, disc })
    }

    pub fn into_model(self) -> PretrainVae<T> {
        self.model
    }
}

fn ensure_finite(loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::TrainingDiverged)
    }
}
