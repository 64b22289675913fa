//! Per-condition plug-in VAE operating entirely on global latent vectors.
//!
//! The encoder maps a global latent `v` to a small condition latent space, the
//! decoder maps condition latents back. Training uses reconstruction error plus
//! a capacity-controlled KL term `|KL - beta|`, and optionally subtracts the
//! same loss on samples from other conditions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ConditionDataset;
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::latent::{mean_kl_node, reparameterize_node, GaussianPosterior};
use crate::nn::{Adam, AdamConfig, Linear, ParamStore, LEAKY_SLOPE};
use crate::par::Exec;
use crate::rng;
use crate::tensor::{Mat, Real};

const ENC_HIDDEN: [usize; 2] = [64, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PluginConfig {
    pub d_c: usize,
    pub gamma: f64,
    pub beta_max: f64,
    pub beta_warmup_iters: usize,
    pub total_iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    /// Caps `gamma * L_neg` at this multiple of the current positive loss.
    /// `None` leaves the objective unbounded below.
    pub neg_clamp: Option<f64>,
    pub seed: u64,
}

impl Default for PluginConfig {
    fn default() -> Self {
        PluginConfig {
            d_c: 20,
            gamma: 0.1,
            beta_max: 5.0,
            beta_warmup_iters: 10_000,
            total_iters: 20_000,
            batch: 128,
            lr: 3e-4,
            adam_beta1: 0.5,
            neg_clamp: None,
            seed: 0,
        }
    }
}

impl PluginConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_c == 0 || self.batch == 0 {
            return Err(Error::Config("d_c and batch must be positive".into()));
        }
        if !(self.gamma >= 0.0) || !(self.beta_max >= 0.0) {
            return Err(Error::Config("gamma and beta_max must be >= 0".into()));
        }
        if self.beta_warmup_iters > self.total_iters {
            return Err(Error::Config("beta_warmup_iters exceeds total_iters".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.adam_beta1) {
            return Err(Error::Config("bad optimizer settings".into()));
        }
        if matches!(self.neg_clamp, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("neg_clamp must be > 0".into()));
        }
        Ok(())
    }
}

/// `min(iteration / warmup, 1) * beta_max`; a zero warmup gives `beta_max`.
pub fn beta_at(iteration: usize, config: &PluginConfig) -> f64 {
    if config.beta_warmup_iters == 0 {
        return config.beta_max;
    }
    (iteration as f64 / config.beta_warmup_iters as f64).min(1.0) * config.beta_max
}

#[derive(Clone, Debug, PartialEq)]
pub struct PluginVae<T> {
    pub config: PluginConfig,
    pub d_g: usize,
    pub store: ParamStore<T>,
    enc: [Linear; 2],
    mean: Linear,
    logvar: Linear,
    dec: [Linear; 2],
    out: Linear,
}

impl<T: Real> PluginVae<T> {
    pub fn new(config: PluginConfig, d_g: usize) -> Result<Self> {
        config.validate()?;
        if config.d_c >= d_g {
            return Err(Error::Config(format!("d_c ({}) must be smaller than d_g ({d_g})", config.d_c)));
        }
        let mut rng = rng::stream(config.seed, "plugin.init");
        let mut store = ParamStore::new();
        let [h1, h2] = ENC_HIDDEN;
        let enc = [
            Linear::new(&mut store, "enc.l1", d_g, h1, true, &mut rng),
            Linear::new(&mut store, "enc.l2", h1, h2, true, &mut rng),
        ];
        let mean = Linear::new(&mut store, "enc.mean", h2, config.d_c, true, &mut rng);
        let logvar = Linear::new(&mut store, "enc.logvar", h2, config.d_c, true, &mut rng);
        let dec = [
            Linear::new(&mut store, "dec.l1", config.d_c, h2, true, &mut rng),
            Linear::new(&mut store, "dec.l2", h2, h1, true, &mut rng),
        ];
        let out = Linear::new(&mut store, "dec.out", h1, d_g, true, &mut rng);
        Ok(PluginVae { config, d_g, store, enc, mean, logvar, dec, out })
    }

    pub fn d_c(&self) -> usize {
        self.config.d_c
    }

    pub fn count_parameters(&self) -> usize {
        self.store.count()
    }

    fn check_cols(&self, m: &Mat<T>, want: usize, what: &str) -> Result<()> {
        if m.cols() != want {
            return Err(shape_err(format!("{what} has {} dims, expected {want}", m.cols())));
        }
        Ok(())
    }

    pub fn encode_nodes(&self, g: &mut Graph<'_, T>, v: NodeId) -> Result<(NodeId, NodeId)> {
        let mut h = v;
        for layer in &self.enc {
            let a = layer.forward(g, h)?;
            h = g.leaky_relu(a, LEAKY_SLOPE);
        }
        Ok((self.mean.forward(g, h)?, self.logvar.forward(g, h)?))
    }

    pub fn decode_nodes(&self, g: &mut Graph<'_, T>, z: NodeId) -> Result<NodeId> {
        let mut h = z;
        for layer in &self.dec {
            let a = layer.forward(g, h)?;
            h = g.leaky_relu(a, LEAKY_SLOPE);
        }
        self.out.forward(g, h)
    }

    pub fn encode_cond(&self, v: &Mat<T>) -> Result<GaussianPosterior<T>> {
        self.check_cols(v, self.d_g, "global latent")?;
        let mut g = Graph::new(&self.store).with_exec(Exec::Sequential);
        let x = g.constant(v.clone());
        let (m, l) = self.encode_nodes(&mut g, x)?;
        GaussianPosterior::new(g.value(m).clone(), g.value(l).clone())
    }

    pub fn decode_cond(&self, z: &Mat<T>) -> Result<Mat<T>> {
        self.check_cols(z, self.d_c(), "condition latent")?;
        let mut g = Graph::new(&self.store).with_exec(Exec::Sequential);
        let x = g.constant(z.clone());
        let y = self.decode_nodes(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    /// Batch-mean squared reconstruction error plus `|batch-mean KL - beta|`.
    pub fn loss_single_node(&self, g: &mut Graph<'_, T>, v: &Mat<T>, beta: f64, noise: &Mat<T>) -> Result<NodeId> {
        self.check_cols(v, self.d_g, "global latent")?;
        if noise.shape() != (v.rows(), self.d_c()) {
            return Err(shape_err(format!("noise {:?} for batch of {}", noise.shape(), v.rows())));
        }
        if v.rows() == 0 {
            return Err(Error::EmptyBatch);
        }
        let x = g.constant(v.clone());
        let (m, l) = self.encode_nodes(g, x)?;
        let z = reparameterize_node(g, m, l, noise.clone())?;
        let recon = self.decode_nodes(g, z)?;
        let diff = g.sub(recon, x)?;
        let sq = g.square(diff);
        let total = g.sum_all(sq);
        let rec = g.scale(total, 1.0 / v.rows() as f64);
        let kl = mean_kl_node(g, m, l)?;
        let gap = g.add_scalar(kl, -beta);
        let cap = g.abs(gap);
        g.add(rec, cap)
    }

    /// `L(pos) - gamma * L(neg)`, with the negative part optionally capped
    /// per [`PluginConfig::neg_clamp`].
    #[allow(clippy::too_many_arguments)]
    pub fn loss_with_negatives_node(
        &self,
        g: &mut Graph<'_, T>,
        v_pos: &Mat<T>,
        v_neg: &Mat<T>,
        beta: f64,
        gamma: f64,
        noise_pos: &Mat<T>,
        noise_neg: &Mat<T>,
    ) -> Result<NodeId> {
        let pos = self.loss_single_node(g, v_pos, beta, noise_pos)?;
        let neg = self.loss_single_node(g, v_neg, beta, noise_neg)?;
        let weighted = g.scale(neg, gamma);
        let weighted = match self.config.neg_clamp {
            Some(c) => {
                let ceiling = c * g.value(pos).item().to_f64_lossy().abs();
                if g.value(weighted).item().to_f64_lossy() > ceiling {
                    g.constant(Mat::scalar(T::of(ceiling)))
                } else {
                    weighted
                }
            }
            None => weighted,
        };
        g.sub(pos, weighted)
    }

    pub fn loss_single(&self, v: &Mat<T>, beta: f64, noise: &Mat<T>) -> Result<T> {
        let mut g = Graph::new(&self.store).with_exec(Exec::Sequential);
        let l = self.loss_single_node(&mut g, v, beta, noise)?;
        Ok(g.value(l).item())
    }

    pub fn loss_with_negatives(
        &self,
        v_pos: &Mat<T>,
        v_neg: &Mat<T>,
        beta: f64,
        gamma: f64,
        noise_pos: &Mat<T>,
        noise_neg: &Mat<T>,
    ) -> Result<T> {
        let mut g = Graph::new(&self.store).with_exec(Exec::Sequential);
        let l = self.loss_with_negatives_node(&mut g, v_pos, v_neg, beta, gamma, noise_pos, noise_neg)?;
        Ok(g.value(l).item())
    }

    /// Squared reconstruction error per row through the posterior mean.
    pub fn reconstruction_errors(&self, v: &Mat<T>) -> Result<Vec<T>> {
        let post = self.encode_cond(v)?;
        let recon = self.decode_cond(&post.mean)?;
        Ok((0..v.rows())
            .map(|i| recon.row(i).iter().zip(v.row(i)).map(|(&a, &b)| (a - b) * (a - b)).sum())
            .collect())
    }
}

#[derive(Clone, Debug)]
pub struct TrainedPlugin {
    pub model: PluginVae<f32>,
    /// Objective value at every iteration.
    pub trace: Vec<f64>,
}

fn draw_batch(rng: &mut impl Rng, data: &Mat<f32>, batch: usize) -> Mat<f32> {
    let ids: Vec<usize> = (0..batch).map(|_| rng.random_range(0..data.rows())).collect();
    data.select_rows(&ids)
}

/// Runs `config.total_iters` Adam steps on batches drawn with replacement.
/// Without negatives the objective is the single-condition loss throughout.
pub fn train_plugin(dataset: &ConditionDataset<f32>, config: &PluginConfig) -> Result<TrainedPlugin> {
    let mut model = PluginVae::<f32>::new(config.clone(), dataset.dim())?;
    if dataset.positives.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut opt = Adam::new(AdamConfig::new(config.lr, config.adam_beta1), model.store.ids().collect());
    let mut batch_rng = rng::stream(config.seed, "plugin.batch");
    let mut noise_rng = rng::stream(config.seed, "plugin.noise");
    let mut trace = Vec::with_capacity(config.total_iters);
    for it in 0..config.total_iters {
        let beta = beta_at(it, config);
        let pos = draw_batch(&mut batch_rng, &dataset.positives, config.batch);
        let noise_pos = rng::normal_mat(&mut noise_rng, config.batch, config.d_c);
        let grads = {
            let mut g = Graph::new(&model.store).with_exec(Exec::Sequential);
            let loss = match &dataset.negatives {
                Some(negs) => {
                    let neg = draw_batch(&mut batch_rng, negs, config.batch);
                    let noise_neg = rng::normal_mat(&mut noise_rng, config.batch, config.d_c);
                    model.loss_with_negatives_node(&mut g, &pos, &neg, beta, config.gamma, &noise_pos, &noise_neg)?
                }
                None => model.loss_single_node(&mut g, &pos, beta, &noise_pos)?,
            };
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::PluginDiverged);
            }
            trace.push(value);
            g.backward(loss)?
        };
        opt.step(&mut model.store, &grads);
    }
    if !model.store.iter().all(|(_, m)| m.all_finite()) {
        return Err(Error::PluginDiverged);
    }
    Ok(TrainedPlugin { model, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    fn small_cfg() -> PluginConfig {
        PluginConfig { d_c: 3, ..PluginConfig::default() }
    }

    #[test]
    fn default_parameter_count() {
        let p = PluginVae::<f32>::new(PluginConfig::default(), 128).unwrap();
        assert_eq!(p.count_parameters(), 22_760);
    }

    #[test]
    fn shapes_and_errors() {
        let p = PluginVae::<f64>::new(PluginConfig::default(), 128).unwrap();
        let v = rng::normal_mat::<f64>(&mut rng::stream(0, "v"), 5, 128);
        let post = p.encode_cond(&v).unwrap();
        assert_eq!(post.mean.shape(), (5, 20));
        assert_eq!(p.decode_cond(&post.mean).unwrap().shape(), (5, 128));
        assert!(p.encode_cond(&Mat::zeros(2, 127)).is_err());
        assert!(p.decode_cond(&Mat::zeros(2, 21)).is_err());
        assert!(PluginVae::<f32>::new(PluginConfig { d_c: 8, ..Default::default() }, 8).is_err());
        assert!(PluginVae::<f32>::new(PluginConfig { gamma: -1.0, ..Default::default() }, 16).is_err());
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let mut p = PluginVae::<f64>::new(PluginConfig::default(), 128).unwrap();
        p.store.zero_all();
        let v = rng::normal_mat::<f64>(&mut rng::stream(1, "v"), 3, 128);
        let post = p.encode_cond(&v).unwrap();
        assert!(post.mean.data().iter().chain(post.log_variance.data()).all(|&x| x == 0.0));
        let z = rng::normal_mat::<f64>(&mut rng::stream(1, "z"), 3, 20);
        assert!(p.decode_cond(&z).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn beta_schedule() {
        let c = PluginConfig::default();
        assert_eq!(beta_at(0, &c), 0.0);
        assert_eq!(beta_at(5_000, &c), 2.5);
        assert_eq!(beta_at(15_000, &c), 5.0);
        assert_eq!(beta_at(3, &PluginConfig { beta_warmup_iters: 0, ..c }), 5.0);
    }

    #[test]
    fn zero_gamma_is_single_loss() {
        let p = PluginVae::<f64>::new(small_cfg(), 8).unwrap();
        let mut r = rng::stream(2, "x");
        let v = rng::normal_mat::<f64>(&mut r, 6, 8);
        let w = rng::normal_mat::<f64>(&mut r, 6, 8);
        let n = rng::normal_mat::<f64>(&mut r, 6, 3);
        let single = p.loss_single(&v, 1.0, &n).unwrap();
        assert_eq!(p.loss_with_negatives(&v, &w, 1.0, 0.0, &n, &n).unwrap(), single);
        let both = p.loss_with_negatives(&v, &v, 1.0, 0.25, &n, &n).unwrap();
        assert!((both - 0.75 * single).abs() < 1e-12);
    }

    #[test]
    fn clamp_bounds_negative_term() {
        let cfg = PluginConfig { neg_clamp: Some(0.5), ..small_cfg() };
        let p = PluginVae::<f64>::new(cfg, 8).unwrap();
        let mut r = rng::stream(3, "x");
        let v = rng::normal_mat::<f64>(&mut r, 4, 8);
        let far = v.map(|x| x * 100.0);
        let n = rng::normal_mat::<f64>(&mut r, 4, 3);
        let pos = p.loss_single(&v, 0.0, &n).unwrap();
        let l = p.loss_with_negatives(&v, &far, 0.0, 1.0, &n, &n).unwrap();
        assert!((l - 0.5 * pos).abs() < 1e-9);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = PluginVae::<f64>::new(small_cfg(), 8).unwrap();
        let mut r = rng::stream(4, "x");
        let v = rng::normal_mat::<f64>(&mut r, 5, 8);
        let w = rng::normal_mat::<f64>(&mut r, 5, 8).map(|x| x + 1.0);
        let (n1, n2) = (rng::normal_mat::<f64>(&mut r, 5, 3), rng::normal_mat::<f64>(&mut r, 5, 3));
        let err = gradcheck::max_relative_error(&p.store, 1e-5, |g| p.loss_with_negatives_node(g, &v, &w, 5.0, 0.1, &n1, &n2))
            .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn training_is_deterministic_and_separates_clusters() {
        let mut r = rng::stream(5, "data");
        let center = |m: Mat<f64>, c: f64| m.map(|x| 0.3 * x + c).cast::<f32>();
        let pos = center(rng::normal_mat::<f64>(&mut r, 200, 8), 1.0);
        let held = center(rng::normal_mat::<f64>(&mut r, 50, 8), 1.0);
        let neg = center(rng::normal_mat::<f64>(&mut r, 50, 8), -1.0);
        let ds = ConditionDataset::new("c", pos, None).unwrap();
        let cfg = PluginConfig { total_iters: 1500, beta_warmup_iters: 750, batch: 32, lr: 2e-3, ..small_cfg() };
        let a = train_plugin(&ds, &cfg).unwrap();
        let b = train_plugin(&ds, &cfg).unwrap();
        assert_eq!(a.model.store, b.model.store);
        assert_eq!(a.trace.len(), 1500);
        let mean = |x: Vec<f32>| x.iter().sum::<f32>() / x.len() as f32;
        let e_pos = mean(a.model.reconstruction_errors(&held).unwrap());
        let e_neg = mean(a.model.reconstruction_errors(&neg).unwrap());
        assert!(e_pos < e_neg, "{e_pos} vs {e_neg}");
    }
}
