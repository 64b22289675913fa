//! End-to-end workflow steps shared by the CLI and the acceptance suite:
//! pretraining over a corpus, encoding labeled samples into the global latent
//! space, and training several plugins at once.

use rand::seq::SliceRandom;

use crate::corpus::{encode_text, make_condition_sets, ConditionDataset, LabeledSample, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::plugin::{train_plugin, PluginConfig, TrainedPlugin};
use crate::pretrain::{PretrainConfig, PretrainTrainer, PretrainVae, StepLosses};
use crate::rng;

pub struct PretrainRun {
    pub model: PretrainVae<f32>,
    pub vocab: Vocabulary,
    pub losses: Vec<StepLosses>,
}

/// Number of optimizer steps a run over `n` sentences takes.
pub fn pretrain_steps(config: &PretrainConfig, n: usize) -> usize {
    let per_epoch = n.div_ceil(config.batch.max(1));
    let total = per_epoch * config.epochs;
    if config.max_steps > 0 {
        total.min(config.max_steps)
    } else {
        total
    }
}

/// Builds the vocabulary, then trains for `epochs` reshuffled passes (or
/// `max_steps` steps). `progress` sees each step index and its losses.
pub fn run_pretrain(
    corpus: &[Vec<String>],
    config: &PretrainConfig,
    mut progress: impl FnMut(usize, &StepLosses),
) -> Result<PretrainRun> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let vocab = Vocabulary::build(corpus, config.max_vocab)?;
    let seqs: Vec<TokenSequence> = corpus.iter().map(|t| encode_text(t, &vocab, config.max_len)).collect();
    let model = PretrainVae::<f32>::new(config.clone(), vocab.len())?;
    let mut trainer = PretrainTrainer::new(model)?;
    let total = pretrain_steps(config, seqs.len());
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut shuffle = rng::stream(config.seed, "pretrain.shuffle");
    let mut losses = Vec::with_capacity(total);
    'outer: loop {
        order.shuffle(&mut shuffle);
        for idx in order.chunks(config.batch) {
            if losses.len() == total {
                break 'outer;
            }
            let batch: Vec<TokenSequence> = idx.iter().map(|&i| seqs[i].clone()).collect();
            let l = trainer.step(&batch)?;
            progress(losses.len(), &l);
            losses.push(l);
        }
    }
    Ok(PretrainRun { model: trainer.into_model(), vocab, losses })
}

/// Options for turning labeled samples into plugin training sets.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSampling {
    pub n_per_condition: usize,
    pub use_negatives: bool,
    pub balance_negatives: bool,
    pub seed: u64,
}

/// Encodes a condition's positives (and negatives) as posterior means.
pub fn encode_condition(
    model: &PretrainVae<f32>,
    labeled: &[LabeledSample],
    condition: &str,
    sampling: &ConditionSampling,
    exec: Exec,
) -> Result<ConditionDataset<f32>> {
    let sets = make_condition_sets(labeled, condition, sampling.n_per_condition, sampling.seed, sampling.balance_negatives)?;
    let positives = model.encode_global_with(exec, &sets.positives)?.mean;
    let negatives = if sampling.use_negatives && !sets.negatives.is_empty() {
        Some(model.encode_global_with(exec, &sets.negatives)?.mean)
    } else {
        None
    };
    ConditionDataset::new(condition, positives, negatives)
}

/// Trains one plugin per dataset; the datasets are independent so they run
/// concurrently under [`Exec::Parallel`].
pub fn train_plugins(datasets: &[ConditionDataset<f32>], config: &PluginConfig, exec: Exec) -> Result<Vec<TrainedPlugin>> {
    par::map_slice(exec, datasets, |ds| train_plugin(ds, config)).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    fn tiny() -> PretrainConfig {
        PretrainConfig {
            d_g: 4,
            emb_dim: 8,
            gru_hidden: 4,
            dec_layers: 1,
            dec_heads: 2,
            ffn_dim: 8,
            disc_hidden: 4,
            batch: 3,
            epochs: 2,
            ..PretrainConfig::default()
        }
    }

    fn corpus() -> Vec<Vec<String>> {
        ["good food", "the staff was nice", "bad", "cold soup and slow service", "ok"].iter().map(|s| tokenize(s)).collect()
    }

    #[test]
    fn step_budget() {
        assert_eq!(pretrain_steps(&tiny(), 5), 4);
        assert_eq!(pretrain_steps(&PretrainConfig { max_steps: 3, ..tiny() }, 5), 3);
    }

    #[test]
    fn pretrain_runs_and_repeats() {
        let mut seen = 0;
        let a = run_pretrain(&corpus(), &tiny(), |_, _| seen += 1).unwrap();
        assert_eq!(seen, 4);
        let b = run_pretrain(&corpus(), &tiny(), |_, _| {}).unwrap();
        assert_eq!(a.model.store, b.model.store);
        assert_eq!(a.losses, b.losses);
        assert!(run_pretrain(&[], &tiny(), |_, _| {}).is_err());
    }

    #[test]
    fn plugins_train_concurrently_like_sequentially() {
        let run = run_pretrain(&corpus(), &tiny(), |_, _| {}).unwrap();
        let labeled: Vec<LabeledSample> = corpus()
            .iter()
            .map(|t| LabeledSample {
                text: encode_text(t, &run.vocab, 15),
                condition: if t.len() <= 3 { "short".into() } else { "medium".into() },
            })
            .collect();
        let sampling = ConditionSampling { n_per_condition: 10, use_negatives: true, balance_negatives: false, seed: 0 };
        let sets: Vec<_> = ["short", "medium"]
            .iter()
            .map(|c| encode_condition(&run.model, &labeled, c, &sampling, Exec::default()).unwrap())
            .collect();
        assert_eq!(sets[0].positives.rows(), 3);
        assert_eq!(sets[0].negatives.as_ref().unwrap().rows(), 2);
        let cfg = PluginConfig { d_c: 2, total_iters: 20, beta_warmup_iters: 10, batch: 4, gamma: 0.003, ..Default::default() };
        let par = train_plugins(&sets, &cfg, Exec::default()).unwrap();
        let seq = train_plugins(&sets, &cfg, Exec::Sequential).unwrap();
        for (p, s) in par.iter().zip(&seq) {
            assert_eq!(p.model.store, s.model.store);
        }
        assert!(encode_condition(&run.model, &labeled, "long", &sampling, Exec::default()).is_err());
    }
}
