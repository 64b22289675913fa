//! Convolutional sentence classifier used to score attribute conditions:
//! embeddings, parallel convolutions over several window sizes, max-pooling
//! over time and a softmax layer.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Vocabulary, PAD, UNK};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{Adam, AdamConfig, Linear, ParamStore};
use crate::par::{self, Exec};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub emb_dim: usize,
    pub windows: Vec<usize>,
    pub feature_maps: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub val_fraction: f64,
    /// Sentences are truncated or padded to this many tokens.
    pub seq_len: usize,
    pub max_vocab: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            emb_dim: 64,
            windows: vec![3, 4, 5],
            feature_maps: 100,
            epochs: 10,
            batch: 50,
            lr: 1e-3,
            val_fraction: 0.1,
            seq_len: crate::corpus::DEFAULT_MAX_LEN,
            max_vocab: 20_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TextClassifier {
    pub config: ClassifierConfig,
    pub labels: Vec<String>,
    pub vocab: Vocabulary,
    pub store: ParamStore<f32>,
    embedding: crate::nn::ParamId,
    convs: Vec<Linear>,
    out: Linear,
    /// Accuracy on the held-out split after the last epoch; `None` when the
    /// split is empty.
    pub validation_accuracy: Option<f64>,
}

const CHUNK: usize = 256;

impl TextClassifier {
    fn ids(&self, text: &str) -> Vec<usize> {
        let t = self.config.seq_len;
        let mut ids: Vec<usize> = tokenize(text).iter().take(t).map(|w| self.vocab.id(w).unwrap_or(UNK)).collect();
        ids.resize(t, PAD);
        ids
    }

    fn logits(&self, g: &mut Graph<'_, f32>, ids: &[usize]) -> Result<NodeId> {
        let t = self.config.seq_len;
        let table = g.param(self.embedding);
        let x = g.gather_rows(table, ids)?;
        let mut pooled = Vec::with_capacity(self.convs.len());
        for (conv, &w) in self.convs.iter().zip(&self.config.windows) {
            let u = g.unfold(x, t, w)?;
            let c = conv.forward(g, u)?;
            let a = g.relu(c);
            pooled.push(g.max_pool_time(a, t - w + 1)?);
        }
        let feats = g.concat_cols(&pooled)?;
        self.out.forward(g, feats)
    }

    /// Index into `labels` of the most likely class for each text.
    pub fn predict(&self, texts: &[String]) -> Result<Vec<usize>> {
        self.predict_with(Exec::default(), texts)
    }

    pub fn predict_with(&self, exec: Exec, texts: &[String]) -> Result<Vec<usize>> {
        let chunks: Vec<&[String]> = texts.chunks(CHUNK).collect();
        let parts = par::map_slice(exec, &chunks, |chunk| -> Result<Vec<usize>> {
            let ids: Vec<usize> = chunk.iter().flat_map(|s| self.ids(s)).collect();
            let mut g = Graph::new(&self.store).with_exec(Exec::Sequential);
            let l = self.logits(&mut g, &ids)?;
            let lv = g.value(l);
            Ok((0..lv.rows())
                .map(|r| {
                    let row = lv.row(r);
                    (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
                })
                .collect())
        });
        let mut out = Vec::with_capacity(texts.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    pub fn label_index(&self, condition: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == condition)
            .ok_or_else(|| Error::UnknownCondition(condition.to_string()))
    }
}

/// Trains on `(label, text)` pairs. Labels are sorted for a stable class order;
/// a seeded `val_fraction` of the data is held out for validation accuracy.
pub fn train_condition_classifier(labeled: &[(String, String)], config: &ClassifierConfig) -> Result<TextClassifier> {
    let mut labels: Vec<String> = labeled.iter().map(|(l, _)| l.clone()).collect();
    labels.sort();
    labels.dedup();
    if labels.len() < 2 {
        return Err(Error::SingleClass);
    }
    if config.windows.iter().any(|&w| w == 0 || w > config.seq_len) || config.feature_maps == 0 || config.batch == 0 {
        return Err(Error::Config("classifier windows must lie in 1..=seq_len".into()));
    }
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    order.shuffle(&mut rng::stream(config.seed, "classifier.split"));
    let n_val = ((labeled.len() as f64) * config.val_fraction).floor() as usize;
    let (val_idx, train_idx) = order.split_at(n_val.min(labeled.len() - 1));

    let toks: Vec<Vec<String>> = train_idx.iter().map(|&i| tokenize(&labeled[i].1)).collect();
    let vocab = Vocabulary::build(&toks, config.max_vocab)?;
    let mut init = rng::stream(config.seed, "classifier.init");
    let mut store = ParamStore::new();
    let embedding = store.add("embedding", rng::uniform_mat(&mut init, vocab.len(), config.emb_dim, 0.25));
    let convs = config
        .windows
        .iter()
        .map(|&w| Linear::new(&mut store, &format!("conv{w}"), w * config.emb_dim, config.feature_maps, true, &mut init))
        .collect();
    let out = Linear::new(&mut store, "out", config.windows.len() * config.feature_maps, labels.len(), true, &mut init);
    let mut clf = TextClassifier {
        config: config.clone(),
        labels,
        vocab,
        store,
        embedding,
        convs,
        out,
        validation_accuracy: None,
    };

    let class_of = |i: usize| clf.labels.iter().position(|l| *l == labeled[i].0).expect("label collected above");
    let targets: Vec<usize> = (0..labeled.len()).map(class_of).collect();
    let mut opt = Adam::new(AdamConfig::new(config.lr, 0.9), clf.store.ids().collect());
    let mut shuffle = rng::stream(config.seed, "classifier.shuffle");
    let mut train: Vec<usize> = train_idx.to_vec();
    for _ in 0..config.epochs {
        train.shuffle(&mut shuffle);
        for batch in train.chunks(config.batch) {
            let ids: Vec<usize> = batch.iter().flat_map(|&i| clf.ids(&labeled[i].1)).collect();
            let tgt: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            let grads = {
                let mut g = Graph::new(&clf.store);
                let l = clf.logits(&mut g, &ids)?;
                let ce = g.cross_entropy(l, &tgt, &vec![true; tgt.len()])?;
                let loss = g.scale(ce, 1.0 / tgt.len() as f64);
                if !g.value(loss).item().is_finite() {
                    return Err(Error::TrainingDiverged);
                }
                g.backward(loss)?
            };
            opt.step(&mut clf.store, &grads);
        }
    }
    if !val_idx.is_empty() {
        let texts: Vec<String> = val_idx.iter().map(|&i| labeled[i].1.clone()).collect();
        let pred = clf.predict(&texts)?;
        let hits = pred.iter().zip(val_idx).filter(|(p, &i)| **p == targets[i]).count();
        clf.validation_accuracy = Some(hits as f64 / val_idx.len() as f64);
    }
    Ok(clf)
}

/// Fraction of `texts` classified as `condition`; empty texts never count.
pub fn classifier_accuracy(clf: &TextClassifier, texts: &[String], condition: &str) -> Result<f64> {
    let want = clf.label_index(condition)?;
    if texts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let pred = clf.predict(texts)?;
    let hits = pred.iter().zip(texts).filter(|(p, t)| **p == want && !tokenize(t).is_empty()).count();
    Ok(hits as f64 / texts.len() as f64)
}
