//! On-disk checkpoints: `manifest.json` listing each tensor's name, shape,
//! dtype and byte offset into `weights.bin` (little-endian f32), plus
//! `config.json` and `vocab.txt`. Plugin checkpoints add `plugin.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::plugin::{PluginConfig, PluginVae};
use crate::pretrain::{PretrainConfig, PretrainVae};
use crate::tensor::Mat;

pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";
pub const CONFIG: &str = "config.json";
pub const VOCAB: &str = "vocab.txt";
pub const PLUGIN_META: &str = "plugin.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainCheckpointConfig {
    pub vocab_size: usize,
    pub model: PretrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PluginCheckpointConfig {
    pub d_g: usize,
    pub model: PluginConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub beta_max: f64,
    pub warmup_iters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PluginMeta {
    pub condition: String,
    pub gamma: f64,
    pub beta_schedule: BetaSchedule,
    pub iterations: usize,
    pub negatives: bool,
    pub pretrain_digest: String,
}

/// Serializes a store as `(manifest, weights)`.
pub fn encode_store(store: &ParamStore<f32>) -> (Manifest, Vec<u8>) {
    let mut bytes = Vec::with_capacity(store.count() * 4);
    let mut tensors = Vec::with_capacity(store.len());
    for (name, m) in store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: [m.rows(), m.cols()],
            dtype: "f32".into(),
            offset: bytes.len(),
        });
        for x in m.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    (Manifest { tensors }, bytes)
}

pub fn decode_store(manifest: &Manifest, bytes: &[u8]) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::new();
    for t in &manifest.tensors {
        if t.dtype != "f32" {
            return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", t.name, t.dtype)));
        }
        let n = t.shape[0] * t.shape[1];
        let end = t.offset + 4 * n;
        let raw = bytes
            .get(t.offset..end)
            .ok_or_else(|| Error::Checkpoint(format!("{}: bytes {}..{end} past end of weights", t.name, t.offset)))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        store.add(t.name.clone(), Mat::from_vec(t.shape[0], t.shape[1], data)?);
    }
    Ok(store)
}

pub fn save_store(dir: &Path, store: &ParamStore<f32>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (manifest, bytes) = encode_store(store);
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(dir.join(WEIGHTS), bytes)?;
    Ok(())
}

pub fn load_store(dir: &Path) -> Result<ParamStore<f32>> {
    let manifest: Manifest = serde_json::from_str(&read(dir, MANIFEST)?)?;
    let bytes = fs::read(dir.join(WEIGHTS))?;
    decode_store(&manifest, &bytes)
}

fn read(dir: &Path, file: &str) -> Result<String> {
    fs::read_to_string(dir.join(file)).map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(file).display())))
}

/// SHA-256 over the manifest, weights, config and vocabulary files, as hex.
pub fn checkpoint_digest(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for file in [MANIFEST, WEIGHTS, CONFIG, VOCAB] {
        let bytes = fs::read(dir.join(file)).map_err(|e| Error::Checkpoint(format!("{file}: {e}")))?;
        h.update(file.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Writes a pretrain checkpoint and returns its digest.
pub fn save_pretrain(dir: &Path, model: &PretrainVae<f32>, vocab: &Vocabulary) -> Result<String> {
    if vocab.len() != model.vocab_size {
        return Err(Error::Checkpoint(format!("vocabulary has {} tokens, model {}", vocab.len(), model.vocab_size)));
    }
    save_store(dir, &model.store)?;
    let cfg = PretrainCheckpointConfig { vocab_size: model.vocab_size, model: model.config.clone() };
    fs::write(dir.join(CONFIG), serde_json::to_string_pretty(&cfg)?)?;
    vocab.save(&dir.join(VOCAB))?;
    checkpoint_digest(dir)
}

pub struct LoadedPretrain {
    pub model: PretrainVae<f32>,
    pub vocab: Vocabulary,
    pub digest: String,
}

pub fn load_pretrain(dir: &Path) -> Result<LoadedPretrain> {
    let cfg: PretrainCheckpointConfig = serde_json::from_str(&read(dir, CONFIG)?)?;
    let vocab = Vocabulary::load(&dir.join(VOCAB))?;
    if vocab.len() != cfg.vocab_size {
        return Err(Error::Checkpoint(format!("vocab.txt has {} tokens, config says {}", vocab.len(), cfg.vocab_size)));
    }
    let mut model = PretrainVae::<f32>::new(cfg.model, cfg.vocab_size)?;
    model.store.load_from(&load_store(dir)?)?;
    Ok(LoadedPretrain { model, vocab, digest: checkpoint_digest(dir)? })
}

/// Writes a plugin checkpoint next to a copy of the pretrain vocabulary.
pub fn save_plugin(dir: &Path, plugin: &PluginVae<f32>, meta: &PluginMeta, vocab: &Vocabulary) -> Result<()> {
    save_store(dir, &plugin.store)?;
    let cfg = PluginCheckpointConfig { d_g: plugin.d_g, model: plugin.config.clone() };
    fs::write(dir.join(CONFIG), serde_json::to_string_pretty(&cfg)?)?;
    vocab.save(&dir.join(VOCAB))?;
    fs::write(dir.join(PLUGIN_META), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct LoadedPlugin {
    pub model: PluginVae<f32>,
    pub meta: PluginMeta,
}

/// Loads a plugin, refusing it unless it was trained against `pretrain_digest`.
pub fn load_plugin(dir: &Path, pretrain_digest: &str) -> Result<LoadedPlugin> {
    let meta: PluginMeta = serde_json::from_str(&read(dir, PLUGIN_META)?)?;
    if meta.pretrain_digest != pretrain_digest {
        return Err(Error::DigestMismatch { expected: meta.pretrain_digest, actual: pretrain_digest.to_string() });
    }
    let cfg: PluginCheckpointConfig = serde_json::from_str(&read(dir, CONFIG)?)?;
    let mut plugin = PluginVae::<f32>::new(cfg.model, cfg.d_g)?;
    plugin.store.load_from(&load_store(dir)?)?;
    Ok(LoadedPlugin { model: plugin, meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn vocab() -> Vocabulary {
        let corpus = vec![vec!["a".to_string(), "b".into(), "c".into()]];
        Vocabulary::build(&corpus, 100).unwrap()
    }

    fn tiny() -> PretrainConfig {
        PretrainConfig { d_g: 6, emb_dim: 8, gru_hidden: 4, dec_layers: 1, dec_heads: 2, ffn_dim: 8, disc_hidden: 4, ..Default::default() }
    }

    #[test]
    fn store_round_trip_is_bit_exact() {
        let mut s = ParamStore::<f32>::new();
        s.add("x", rng::normal_mat(&mut rng::stream(0, "x"), 3, 5));
        s.add("y", Mat::from_vec(1, 4, vec![f32::MIN_POSITIVE, -0.0, 1e-40, f32::MAX]).unwrap());
        let (m, b) = encode_store(&s);
        assert_eq!(m.tensors[1].offset, 60);
        let back = decode_store(&m, &b).unwrap();
        for ((_, a), (_, b)) in s.iter().zip(back.iter()) {
            let bits = |m: &Mat<f32>| m.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert!(decode_store(&m, &b[..10]).is_err());
    }

    #[test]
    fn pretrain_and_plugin_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = vocab();
        let model = PretrainVae::<f32>::new(tiny(), v.len()).unwrap();
        let digest = save_pretrain(&dir.path().join("pre"), &model, &v).unwrap();
        let loaded = load_pretrain(&dir.path().join("pre")).unwrap();
        assert_eq!(loaded.model.store, model.store);
        assert_eq!(loaded.vocab, v);
        assert_eq!(loaded.digest, digest);

        let plugin = PluginVae::<f32>::new(PluginConfig { d_c: 2, ..Default::default() }, 6).unwrap();
        let meta = PluginMeta {
            condition: "short".into(),
            gamma: 0.003,
            beta_schedule: BetaSchedule { beta_max: 5.0, warmup_iters: 10 },
            iterations: 20,
            negatives: true,
            pretrain_digest: digest.clone(),
        };
        save_plugin(&dir.path().join("plug"), &plugin, &meta, &v).unwrap();
        let p = load_plugin(&dir.path().join("plug"), &digest).unwrap();
        assert_eq!(p.model.store, plugin.store);
        assert_eq!(p.meta, meta);
        let err = load_plugin(&dir.path().join("plug"), "0000").unwrap_err();
        assert!(err.to_string().contains("plugin/pretrain mismatch"));
    }

    #[test]
    fn digest_tracks_weights() {
        let dir = tempfile::tempdir().unwrap();
        let v = vocab();
        let mut model = PretrainVae::<f32>::new(tiny(), v.len()).unwrap();
        let a = save_pretrain(dir.path(), &model, &v).unwrap();
        assert_eq!(a, save_pretrain(dir.path(), &model, &v).unwrap());
        let id = model.embedding_id();
        model.store.get_mut(id).data_mut()[0] += 1.0;
        assert_ne!(a, save_pretrain(dir.path(), &model, &v).unwrap());
    }
}
