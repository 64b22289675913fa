//! Conditional generation through a plugin decoder and the frozen global
//! decoder, plus the unconditional baseline that samples the global prior.

use serde::{Deserialize, Serialize};

use crate::checkpoint::LoadedPlugin;
use crate::corpus::{decode_tokens, Vocabulary};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::pretrain::PretrainVae;
use crate::rng;
use crate::tensor::{Mat, Real};

pub const UNCONDITIONAL: &str = "unconditional";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub condition: String,
    pub n: usize,
    pub seed: u64,
    pub max_len: usize,
}

/// One line of JSON-lines output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedSample {
    pub condition: String,
    pub seed_index: usize,
    pub text: String,
}

/// The frozen global model a generation run decodes with.
#[derive(Clone, Copy)]
pub struct Generator<'a> {
    pub model: &'a PretrainVae<f32>,
    pub vocab: &'a Vocabulary,
    pub digest: &'a str,
    pub exec: Exec,
}

/// `n` standard-normal rows of width `d_c`, from a stream that depends only on `seed`.
pub fn sample_conditional_prior<T: Real>(n: usize, d_c: usize, seed: u64) -> Mat<T> {
    rng::normal_mat(&mut rng::stream(seed, "generation.conditional_prior"), n, d_c)
}

impl Generator<'_> {
    fn decode(&self, z: &Mat<f32>, max_len: usize) -> Result<Vec<String>> {
        if z.rows() == 0 {
            return Ok(Vec::new());
        }
        let seqs = self.model.greedy_decode_with(self.exec, z, max_len)?;
        seqs.iter().map(|s| decode_tokens(s, self.vocab)).collect()
    }

    /// Samples the condition prior, maps it into the global space with the
    /// plugin decoder and greedy-decodes. Output order follows sample order.
    pub fn plugin_generate(&self, plugin: &LoadedPlugin, req: &GenerationRequest) -> Result<Vec<String>> {
        if plugin.meta.pretrain_digest != self.digest {
            return Err(Error::DigestMismatch {
                expected: plugin.meta.pretrain_digest.clone(),
                actual: self.digest.to_string(),
            });
        }
        if plugin.model.d_g != self.model.d_g() {
            return Err(Error::Shape(format!("plugin maps to {} dims, model has {}", plugin.model.d_g, self.model.d_g())));
        }
        let zc = sample_conditional_prior::<f32>(req.n, plugin.model.d_c(), req.seed);
        if req.n == 0 {
            return Ok(Vec::new());
        }
        let z = plugin.model.decode_cond(&zc)?;
        self.decode(&z, req.max_len)
    }

    /// Greedy decodes from `z ~ N(0, I)` drawn directly in the global space.
    pub fn unconditional_generate(&self, n: usize, seed: u64, max_len: usize) -> Result<Vec<String>> {
        let z = rng::normal_mat::<f32>(&mut rng::stream(seed, "generation.global_prior"), n, self.model.d_g());
        self.decode(&z, max_len)
    }
}

pub fn to_jsonl(condition: &str, texts: &[String]) -> Result<String> {
    let mut out = String::new();
    for (i, t) in texts.iter().enumerate() {
        let s = GeneratedSample { condition: condition.to_string(), seed_index: i, text: t.clone() };
        out.push_str(&serde_json::to_string(&s)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn to_lines(texts: &[String]) -> String {
    texts.iter().map(|t| format!("{t}\n")).collect()
}
