use rand::Rng;

use super::PretrainConfig;
use crate::corpus::{TokenSequence, BOS, EOS, PAD};
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::latent::GaussianPosterior;
use crate::nn::{LayerNorm, Linear, ParamId, ParamStore, LEAKY_SLOPE};
use crate::par::{self, Exec};
use crate::rng;
use crate::tensor::{Mat, Real};

/// Rows per independently processed chunk when encoding or decoding large
/// sets. Fixed so results never depend on the thread count.
pub(crate) const CHUNK: usize = 64;

#[derive(Clone, Copy, Debug)]
struct Gru {
    input: Linear,
    hidden: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    pos: ParamId,
    latent: Linear,
    ln_attn: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    embedding: ParamId,
    fwd: Gru,
    bwd: Gru,
    post_mean: Linear,
    post_logvar: Linear,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    disc: [Linear; 3],
}

/// Parameters and structure of the global autoencoder plus its latent critic.
#[derive(Clone, Debug)]
pub struct PretrainVae<T> {
    pub config: PretrainConfig,
    pub vocab_size: usize,
    pub store: ParamStore<T>,
    layout: Layout,
}

/// Padded, flattened view of a batch of `bos ... eos` sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLayout {
    pub batch: usize,
    /// Encoder time steps (full sequence length incl. bos/eos).
    pub enc_t: usize,
    /// Encoder ids, time-major: row `t * batch + b`.
    pub enc_ids: Vec<usize>,
    /// Per-time-step validity masks for the encoder.
    pub enc_mask: Vec<Vec<f64>>,
    /// Decoder time steps (sequence length minus one).
    pub dec_t: usize,
    /// Decoder inputs, batch-major: row `b * dec_t + t`.
    pub dec_in: Vec<usize>,
    pub dec_target: Vec<usize>,
    pub dec_mask: Vec<bool>,
}

impl BatchLayout {
    pub fn new(seqs: &[TokenSequence]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if let Some(s) = seqs.iter().find(|s| s.0.len() < 2) {
            return Err(Error::InvalidInput(format!("sequence too short to decode: {:?}", s.0)));
        }
        let batch = seqs.len();
        let enc_t = seqs.iter().map(|s| s.0.len()).max().unwrap_or(0);
        let mut enc_ids = vec![PAD; batch * enc_t];
        let mut enc_mask = vec![vec![0.0; batch]; enc_t];
        for (b, s) in seqs.iter().enumerate() {
            for (t, &id) in s.0.iter().enumerate() {
                enc_ids[t * batch + b] = id;
                enc_mask[t][b] = 1.0;
            }
        }
        let dec_t = enc_t - 1;
        let mut dec_in = vec![PAD; batch * dec_t];
        let mut dec_target = vec![PAD; batch * dec_t];
        let mut dec_mask = vec![false; batch * dec_t];
        for (b, s) in seqs.iter().enumerate() {
            for t in 0..s.0.len() - 1 {
                dec_in[b * dec_t + t] = s.0[t];
                dec_target[b * dec_t + t] = s.0[t + 1];
                dec_mask[b * dec_t + t] = true;
            }
        }
        Ok(BatchLayout { batch, enc_t, enc_ids, enc_mask, dec_t, dec_in, dec_target, dec_mask })
    }
}

fn gru<T: Real>(store: &mut ParamStore<T>, name: &str, inp: usize, hidden: usize, rng: &mut impl Rng) -> Gru {
    Gru {
        input: Linear::new(store, &format!("{name}.input"), inp, 3 * hidden, true, rng),
        hidden: Linear::new(store, &format!("{name}.hidden"), hidden, 3 * hidden, true, rng),
    }
}

impl<T: Real> PretrainVae<T> {
    /// Fresh parameters from the `init` stream of `config.seed`.
    pub fn new(config: PretrainConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        if vocab_size <= crate::corpus::SPECIALS.len() {
            return Err(Error::Config("vocabulary has no content tokens".into()));
        }
        let c = &config;
        let mut rng = rng::stream(c.seed, "pretrain.init");
        let mut store = ParamStore::new();
        let embedding = store.add("embedding", rng::normal_mat::<T>(&mut rng, vocab_size, c.emb_dim).map(|x| x * T::of(0.01)));
        let fwd = gru(&mut store, "encoder.fwd", c.emb_dim, c.gru_hidden, &mut rng);
        let bwd = gru(&mut store, "encoder.bwd", c.emb_dim, c.gru_hidden, &mut rng);
        let post_mean = Linear::new(&mut store, "encoder.mean", 2 * c.gru_hidden, c.d_g, true, &mut rng);
        let post_logvar = Linear::new(&mut store, "encoder.logvar", 2 * c.gru_hidden, c.d_g, true, &mut rng);
        let d = c.emb_dim;
        let blocks = (0..c.dec_layers)
            .map(|i| {
                let n = format!("decoder.block{i}");
                let pos = store.add(
                    format!("{n}.pos"),
                    rng::normal_mat::<T>(&mut rng, c.max_len + 1, d).map(|x| x * T::of(0.01)),
                );
                Block {
                    pos,
                    latent: Linear::new(&mut store, &format!("{n}.latent"), c.d_g, d, true, &mut rng),
                    ln_attn: LayerNorm::new(&mut store, &format!("{n}.ln_attn"), d),
                    q: Linear::new(&mut store, &format!("{n}.q"), d, d, true, &mut rng),
                    k: Linear::new(&mut store, &format!("{n}.k"), d, d, true, &mut rng),
                    v: Linear::new(&mut store, &format!("{n}.v"), d, d, true, &mut rng),
                    o: Linear::new(&mut store, &format!("{n}.o"), d, d, true, &mut rng),
                    ln_ff: LayerNorm::new(&mut store, &format!("{n}.ln_ff"), d),
                    ff_in: Linear::new(&mut store, &format!("{n}.ff_in"), d, c.ffn_dim, true, &mut rng),
                    ff_out: Linear::new(&mut store, &format!("{n}.ff_out"), c.ffn_dim, d, true, &mut rng),
                }
            })
            .collect();
        let final_ln = LayerNorm::new(&mut store, "decoder.ln_out", d);
        let h = c.disc_hidden;
        let disc = [
            Linear::new(&mut store, "disc.l1", c.d_g, h, true, &mut rng),
            Linear::new(&mut store, "disc.l2", h, h, true, &mut rng),
            Linear::new(&mut store, "disc.out", h, 1, false, &mut rng),
        ];
        let layout = Layout { embedding, fwd, bwd, post_mean, post_logvar, blocks, final_ln, disc };
        Ok(PretrainVae { config, vocab_size, store, layout })
    }

    pub fn d_g(&self) -> usize {
        self.config.d_g
    }

    /// Total scalar parameter count. The output projection shares the
    /// embedding matrix and is not counted separately.
    pub fn count_parameters(&self) -> usize {
        self.store.count()
    }

    pub fn embedding_id(&self) -> ParamId {
        self.layout.embedding
    }

    /// The parameter the output softmax projects with (the embedding).
    pub fn output_projection_id(&self) -> ParamId {
        self.layout.embedding
    }

    pub fn discriminator_params(&self) -> Vec<ParamId> {
        self.store.ids().filter(|&id| self.store.name(id).starts_with("disc.")).collect()
    }

    pub fn autoencoder_params(&self) -> Vec<ParamId> {
        self.store.ids().filter(|&id| !self.store.name(id).starts_with("disc.")).collect()
    }

    /// Posterior mean and log-variance nodes for a batch.
    pub fn encode_nodes(&self, g: &mut Graph<'_, T>, lay: &BatchLayout) -> Result<(NodeId, NodeId)> {
        let b = lay.batch;
        let hd = self.config.gru_hidden;
        let emb = g.param(self.layout.embedding);
        let x = g.gather_rows(emb, &lay.enc_ids)?;
        let mut finals = Vec::with_capacity(2);
        for (cell, reverse) in [(self.layout.fwd, false), (self.layout.bwd, true)] {
            let gx_all = cell.input.forward(g, x)?;
            let w_h = g.param(cell.hidden.w);
            let b_h = g.param(cell.hidden.b.expect("gru hidden bias"));
            let mut h = g.constant(Mat::zeros(b, hd));
            let steps: Vec<usize> = if reverse { (0..lay.enc_t).rev().collect() } else { (0..lay.enc_t).collect() };
            for t in steps {
                let rows: Vec<usize> = (t * b..(t + 1) * b).collect();
                let gx = g.select_rows(gx_all, &rows)?;
                let gh = g.matmul(h, w_h)?;
                let gh = g.add_row(gh, b_h)?;
                let mask: Vec<T> = lay.enc_mask[t].iter().map(|&m| T::of(m)).collect();
                h = g.gru_cell(gx, gh, h, &mask)?;
            }
            finals.push(h);
        }
        let both = g.concat_cols(&finals)?;
        let mean = self.layout.post_mean.forward(g, both)?;
        let logvar = self.layout.post_logvar.forward(g, both)?;
        Ok((mean, logvar))
    }

    /// Decoder logits `[batch * t, vocab]` for teacher inputs laid out
    /// batch-major with `t` steps each, conditioned on latents `z: [batch, d_g]`.
    pub fn decode_nodes(&self, g: &mut Graph<'_, T>, z: NodeId, dec_in: &[usize], t: usize) -> Result<NodeId> {
        let h = self.decoder_hidden(g, z, dec_in, t)?;
        let emb = g.param(self.layout.embedding);
        g.matmul_t(h, emb, false, true)
    }

    /// Final-layer hidden states before the tied output projection.
    fn decoder_hidden(&self, g: &mut Graph<'_, T>, z: NodeId, dec_in: &[usize], t: usize) -> Result<NodeId> {
        let c = &self.config;
        let zb = g.value(z).rows();
        if g.value(z).cols() != c.d_g {
            return Err(shape_err(format!("latent has {} dims, expected {}", g.value(z).cols(), c.d_g)));
        }
        if t == 0 || dec_in.len() != zb * t {
            return Err(shape_err(format!("{} teacher ids for {zb} latents of length {t}", dec_in.len())));
        }
        if t > c.max_len + 1 {
            return Err(shape_err(format!("decoder length {t} exceeds {}", c.max_len + 1)));
        }
        let emb = g.param(self.layout.embedding);
        let x = g.gather_rows(emb, dec_in)?;
        let mut x = g.scale(x, (c.emb_dim as f64).sqrt());
        for blk in &self.layout.blocks {
            let pos = g.param(blk.pos);
            x = g.add_tile(x, pos, t)?;
            let lat = blk.latent.forward(g, z)?;
            x = g.add_repeat(x, lat, t)?;
            let a = blk.ln_attn.forward(g, x)?;
            let q = blk.q.forward(g, a)?;
            let k = blk.k.forward(g, a)?;
            let v = blk.v.forward(g, a)?;
            let att = g.causal_attention(q, k, v, t, c.dec_heads)?;
            let o = blk.o.forward(g, att)?;
            x = g.add(x, o)?;
            let f = blk.ln_ff.forward(g, x)?;
            let f = blk.ff_in.forward(g, f)?;
            let f = g.relu(f);
            let f = blk.ff_out.forward(g, f)?;
            x = g.add(x, f)?;
        }
        self.layout.final_ln.forward(g, x)
    }

    /// Critic scores `[batch, 1]`.
    pub fn discriminator_nodes(&self, g: &mut Graph<'_, T>, z: NodeId) -> Result<NodeId> {
        if g.value(z).cols() != self.config.d_g {
            return Err(shape_err(format!("critic input has {} dims, expected {}", g.value(z).cols(), self.config.d_g)));
        }
        let [l1, l2, l3] = self.layout.disc;
        let h = l1.forward(g, z)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let h = l2.forward(g, h)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        l3.forward(g, h)
    }

    /// Critic scores together with their input gradient `d score / d z`,
    /// written as ordinary graph ops so penalties on it can be differentiated
    /// with respect to the critic weights.
    pub fn discriminator_with_input_grad(&self, g: &mut Graph<'_, T>, z: NodeId) -> Result<(NodeId, NodeId)> {
        let [l1, l2, l3] = self.layout.disc;
        let rows = g.value(z).rows();
        let h1 = l1.forward(g, z)?;
        let a1 = g.leaky_relu(h1, LEAKY_SLOPE);
        let h2 = l2.forward(g, a1)?;
        let a2 = g.leaky_relu(h2, LEAKY_SLOPE);
        let score = l3.forward(g, a2)?;

        let slope = T::of(LEAKY_SLOPE);
        let deriv = |m: &Mat<T>| m.map(|x| if x > T::zero() { T::one() } else { slope });
        let mask1 = g.constant(deriv(g.value(h1)));
        let mask2 = g.constant(deriv(g.value(h2)));
        let ones = g.constant(Mat::filled(rows, 1, T::one()));
        let (w1, w2, w3) = (g.param(l1.w), g.param(l2.w), g.param(l3.w));
        let d2 = g.matmul_t(ones, w3, false, true)?;
        let d2 = g.mul(d2, mask2)?;
        let d1 = g.matmul_t(d2, w2, false, true)?;
        let d1 = g.mul(d1, mask1)?;
        let dz = g.matmul_t(d1, w1, false, true)?;
        Ok((score, dz))
    }

    /// Posterior for each sequence, processed in fixed-size chunks.
    pub fn encode_global(&self, seqs: &[TokenSequence]) -> Result<GaussianPosterior<T>> {
        self.encode_global_with(Exec::default(), seqs)
    }

    pub fn encode_global_with(&self, exec: Exec, seqs: &[TokenSequence]) -> Result<GaussianPosterior<T>> {
        if seqs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        self.check_ids(seqs)?;
        let chunks: Vec<&[TokenSequence]> = seqs.chunks(CHUNK).collect();
        let parts = par::map_slice(exec, &chunks, |chunk| -> Result<(Mat<T>, Mat<T>)> {
            let lay = BatchLayout::new(chunk)?;
            let mut g = Graph::new(&self.store).with_exec(Exec::Sequential);
            let (m, l) = self.encode_nodes(&mut g, &lay)?;
            Ok((g.value(m).clone(), g.value(l).clone()))
        });
        let mut mean = Vec::with_capacity(seqs.len() * self.d_g());
        let mut logvar = Vec::with_capacity(seqs.len() * self.d_g());
        for p in parts {
            let (m, l) = p?;
            mean.extend_from_slice(m.data());
            logvar.extend_from_slice(l.data());
        }
        GaussianPosterior::new(
            Mat::from_vec(seqs.len(), self.d_g(), mean)?,
            Mat::from_vec(seqs.len(), self.d_g(), logvar)?,
        )
    }

    fn check_ids(&self, seqs: &[TokenSequence]) -> Result<()> {
        match seqs.iter().flat_map(|s| s.0.iter()).find(|&&i| i >= self.vocab_size) {
            Some(&bad) => Err(Error::IdOutOfRange(bad)),
            None => Ok(()),
        }
    }

    /// Teacher-forced logits for `teacher` sequences given latents `z`.
    pub fn decode_logits(&self, z: &Mat<T>, teacher: &[TokenSequence]) -> Result<Mat<T>> {
        if z.rows() != teacher.len() {
            return Err(shape_err(format!("{} latents for {} sequences", z.rows(), teacher.len())));
        }
        self.check_ids(teacher)?;
        let lay = BatchLayout::new(teacher)?;
        let mut g = Graph::new(&self.store);
        let zn = g.constant(z.clone());
        let logits = self.decode_nodes(&mut g, zn, &lay.dec_in, lay.dec_t)?;
        Ok(g.value(logits).clone())
    }

    pub fn discriminator_score(&self, z: &Mat<T>) -> Result<Vec<T>> {
        let mut g = Graph::new(&self.store);
        let zn = g.constant(z.clone());
        let s = self.discriminator_nodes(&mut g, zn)?;
        Ok(g.value(s).data().to_vec())
    }

    /// Argmax decoding from each latent row until eos or `max_len` content
    /// tokens. Ties go to the lowest id; pad and bos are never emitted.
    pub fn greedy_decode(&self, z: &Mat<T>, max_len: usize) -> Result<Vec<TokenSequence>> {
        self.greedy_decode_with(Exec::default(), z, max_len)
    }

    pub fn greedy_decode_with(&self, exec: Exec, z: &Mat<T>, max_len: usize) -> Result<Vec<TokenSequence>> {
        if z.cols() != self.d_g() {
            return Err(shape_err(format!("latent has {} dims, expected {}", z.cols(), self.d_g())));
        }
        let max_len = max_len.min(self.config.max_len);
        let starts: Vec<usize> = (0..z.rows()).step_by(CHUNK).collect();
        let parts = par::map_slice(exec, &starts, |&s| {
            let rows: Vec<usize> = (s..(s + CHUNK).min(z.rows())).collect();
            self.greedy_chunk(&z.select_rows(&rows), max_len)
        });
        let mut out = Vec::with_capacity(z.rows());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    fn greedy_chunk(&self, z: &Mat<T>, max_len: usize) -> Result<Vec<TokenSequence>> {
        let n = z.rows();
        let mut seqs: Vec<Vec<usize>> = vec![vec![BOS]; n];
        let mut active: Vec<usize> = (0..n).collect();
        let d = self.config.emb_dim;
        for step in 0..=max_len {
            if active.is_empty() {
                break;
            }
            if step == max_len {
                for &i in &active {
                    seqs[i].push(EOS);
                }
                break;
            }
            let t = step + 1;
            let mut g = Graph::new(&self.store).with_exec(Exec::Sequential);
            let zn = g.constant(z.select_rows(&active));
            let dec_in: Vec<usize> = active.iter().flat_map(|&i| seqs[i].iter().copied()).collect();
            let h = self.decoder_hidden(&mut g, zn, &dec_in, t)?;
            let last: Vec<usize> = (0..active.len()).map(|b| b * t + t - 1).collect();
            let h_last = g.select_rows(h, &last)?;
            let emb = g.param(self.layout.embedding);
            let logits = g.matmul_t(h_last, emb, false, true)?;
            debug_assert_eq!(g.value(h_last).cols(), d);
            let lv = g.value(logits);
            let mut still = Vec::with_capacity(active.len());
            for (r, &i) in active.iter().enumerate() {
                let tok = argmax_token(lv.row(r));
                seqs[i].push(tok);
                if tok != EOS {
                    still.push(i);
                }
            }
            active = still;
        }
        Ok(seqs.into_iter().map(TokenSequence).collect())
    }
}

fn argmax_token<T: Real>(row: &[T]) -> usize {
    let mut best = EOS;
    for (i, &v) in row.iter().enumerate() {
        if i == PAD || i == BOS {
            continue;
        }
        if v > row[best] || (v == row[best] && i < best) {
            best = i;
        }
    }
    best
}

/// Summed masked token cross-entropy divided by the batch size, on plain
/// logits. Rows are laid out batch-major as in [`BatchLayout`].
pub fn reconstruction_loss_value<T: Real>(logits: &Mat<T>, targets: &[TokenSequence]) -> Result<T> {
    let lay = BatchLayout::new(targets)?;
    if logits.rows() != lay.batch * lay.dec_t {
        return Err(shape_err(format!("{} logit rows for {} positions", logits.rows(), lay.batch * lay.dec_t)));
    }
    let mut g = Graph::<T>::detached();
    let l = g.constant(logits.clone());
    let ce = g.cross_entropy(l, &lay.dec_target, &lay.dec_mask)?;
    Ok(g.value(ce).item() / T::of(lay.batch as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PretrainConfig {
        PretrainConfig {
            d_g: 4,
            emb_dim: 8,
            gru_hidden: 6,
            dec_layers: 2,
            dec_heads: 2,
            ffn_dim: 12,
            disc_hidden: 5,
            max_len: 6,
            ..PretrainConfig::default()
        }
    }

    fn seqs() -> Vec<TokenSequence> {
        vec![TokenSequence(vec![1, 4, 5, 6, 2]), TokenSequence(vec![1, 7, 2]), TokenSequence(vec![1, 4, 5, 6, 2])]
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let m = PretrainVae::<f64>::new(tiny(), 10).unwrap();
        let p = m.encode_global(&seqs()).unwrap();
        assert_eq!(p.mean.shape(), (3, 4));
        assert_eq!(p.mean.row(0), p.mean.row(2));
        assert_eq!(p.log_variance.row(0), p.log_variance.row(2));
        assert!(p.is_finite());
        assert!(matches!(m.encode_global(&[]), Err(Error::EmptyBatch)));
        assert!(m.encode_global(&[TokenSequence(vec![1, 99, 2])]).is_err());
    }

    #[test]
    fn encoding_ignores_padding() {
        let m = PretrainVae::<f64>::new(tiny(), 10).unwrap();
        let alone = m.encode_global(&[TokenSequence(vec![1, 7, 2])]).unwrap();
        let batched = m.encode_global(&seqs()).unwrap();
        for (a, b) in alone.mean.row(0).iter().zip(batched.mean.row(1)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_shape_and_causality() {
        let m = PretrainVae::<f64>::new(tiny(), 10).unwrap();
        let z = rng::normal_mat::<f64>(&mut rng::stream(1, "z"), 1, 4);
        let base = vec![TokenSequence(vec![1, 4, 5, 6, 7, 2])];
        let logits = m.decode_logits(&z, &base).unwrap();
        assert_eq!(logits.shape(), (5, 10));
        for pos in 1..5 {
            let mut pert = base[0].clone();
            pert.0[pos] = 9;
            let l2 = m.decode_logits(&z, &[pert]).unwrap();
            for r in 0..5 {
                if r < pos {
                    assert_eq!(logits.row(r), l2.row(r), "row {r} moved after perturbing input {pos}");
                }
            }
            assert_ne!(logits.row(pos), l2.row(pos));
        }
        let z2 = rng::normal_mat::<f64>(&mut rng::stream(2, "z"), 1, 4);
        assert_ne!(logits, m.decode_logits(&z2, &base).unwrap());
        assert!(m.decode_logits(&Mat::zeros(2, 4), &base).is_err());
    }

    #[test]
    fn weight_tying_shares_storage() {
        let m = PretrainVae::<f32>::new(tiny(), 10).unwrap();
        assert_eq!(m.output_projection_id(), m.embedding_id());
        assert!(m.store.iter().all(|(n, _)| !n.contains("output")));
    }

    #[test]
    fn discriminator_has_no_output_bias_and_zero_weights_give_zero() {
        let mut m = PretrainVae::<f64>::new(tiny(), 10).unwrap();
        assert!(m.store.find("disc.out.weight").is_some());
        assert!(m.store.find("disc.out.bias").is_none());
        let z = rng::normal_mat::<f64>(&mut rng::stream(3, "z"), 7, 4);
        assert_eq!(m.discriminator_score(&z).unwrap().len(), 7);
        let s1 = m.discriminator_score(&z).unwrap();
        let s2 = m.discriminator_score(&z.map(|x| 2.0 * x)).unwrap();
        assert_ne!(s1, s2);
        for id in m.discriminator_params() {
            m.store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        assert!(m.discriminator_score(&z).unwrap().iter().all(|&s| s == 0.0));
        assert!(m.discriminator_score(&Mat::zeros(2, 3)).is_err());
    }

    #[test]
    fn critic_input_gradient_matches_finite_differences() {
        let m = PretrainVae::<f64>::new(tiny(), 10).unwrap();
        let z = rng::normal_mat::<f64>(&mut rng::stream(4, "z"), 3, 4);
        let mut g = Graph::new(&m.store);
        let zn = g.constant(z.clone());
        let (_, dz) = m.discriminator_with_input_grad(&mut g, zn).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..4 {
                let mut p = z.clone();
                p.set(i, j, z.get(i, j) + h);
                let mut q = z.clone();
                q.set(i, j, z.get(i, j) - h);
                let num = (m.discriminator_score(&p).unwrap()[i] - m.discriminator_score(&q).unwrap()[i]) / (2.0 * h);
                assert!((num - g.value(dz).get(i, j)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn reconstruction_loss_cases() {
        let t = vec![TokenSequence(vec![1, 4, 5, 2]), TokenSequence(vec![1, 6, 2])];
        let lay = BatchLayout::new(&t).unwrap();
        let v = 8;
        let uniform = Mat::<f64>::zeros(lay.batch * lay.dec_t, v);
        let got = reconstruction_loss_value(&uniform, &t).unwrap();
        let want = (3.0 + 2.0) * (v as f64).ln() / 2.0;
        assert!((got - want).abs() < 1e-12);

        let mut perfect = Mat::<f64>::filled(lay.batch * lay.dec_t, v, -1e4);
        for r in 0..perfect.rows() {
            perfect.set(r, lay.dec_target[r], 0.0);
        }
        assert!(reconstruction_loss_value(&perfect, &t).unwrap().abs() < 1e-12);

        let mut padded = uniform.clone();
        let pad_row = (0..lay.dec_mask.len()).find(|&r| !lay.dec_mask[r]).unwrap();
        padded.set(pad_row, 3, 50.0);
        assert_eq!(reconstruction_loss_value(&padded, &t).unwrap(), got);
    }

    #[test]
    fn greedy_decode_bounds_and_determinism() {
        let m = PretrainVae::<f64>::new(tiny(), 10).unwrap();
        let z = rng::normal_mat::<f64>(&mut rng::stream(5, "z"), 70, 4);
        let a = m.greedy_decode(&z, 6).unwrap();
        let b = m.greedy_decode_with(Exec::Sequential, &z, 6).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 70);
        for s in &a {
            assert_eq!(s.0[0], BOS);
            assert_eq!(*s.0.last().unwrap(), EOS);
            assert!(s.content_len() <= 6);
        }
    }

    #[test]
    fn greedy_decode_stops_at_forced_eos() {
        let mut m = PretrainVae::<f64>::new(tiny(), 10).unwrap();
        // Make eos the only token with a positive logit: zero the embedding
        // except a constant column shared by eos and the final layer bias.
        let emb = m.embedding_id();
        let e = m.store.get_mut(emb);
        e.data_mut().iter_mut().for_each(|x| *x = 0.0);
        e.set(EOS, 0, 1.0);
        let ln = m.store.find("decoder.ln_out.gamma").unwrap();
        m.store.get_mut(ln).data_mut().iter_mut().for_each(|x| *x = 0.0);
        let lb = m.store.find("decoder.ln_out.beta").unwrap();
        m.store.get_mut(lb).data_mut()[0] = 1.0;
        let z = rng::normal_mat::<f64>(&mut rng::stream(6, "z"), 3, 4);
        for s in m.greedy_decode(&z, 6).unwrap() {
            assert_eq!(s.0, vec![BOS, EOS]);
            assert_eq!(s.content_len(), 0);
        }
    }

    #[test]
    fn argmax_ties_take_lowest_id() {
        assert_eq!(argmax_token(&[9.0, 9.0, 1.0, 5.0, 5.0]), 3);
        assert_eq!(argmax_token(&[0.0, 0.0, 1.0, 1.0]), 2);
    }

    #[test]
    fn full_size_parameter_count() {
        let m = PretrainVae::<f32>::new(PretrainConfig::default(), 8900).unwrap();
        let n = m.count_parameters();
        assert!((5_000_000..8_000_000).contains(&n), "{n}");
        let emb = 8900 * 256;
        assert_eq!(m.store.get(m.embedding_id()).len(), emb);
    }
}
