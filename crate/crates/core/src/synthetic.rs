//! Seeded toy review corpus whose sentence lengths cover the short, medium
//! and long bins.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::corpus::{tokenize, LengthLabel};
use crate::rng;

const DETS: &[&str] = &["the", "a", "this", "our", "my"];
const ADJS: &[&str] = &[
    "great", "good", "bad", "cold", "fresh", "slow", "friendly", "cheap", "tasty", "nice", "awful", "clean", "loud",
    "small",
];
const NOUNS: &[&str] = &[
    "food", "service", "staff", "place", "price", "pizza", "coffee", "room", "menu", "waiter", "soup", "bar",
];
const VERBS: &[&str] = &["was", "is", "seems", "looked", "felt"];
const ADVS: &[&str] = &["very", "really", "quite", "so", "too"];
const CONJS: &[&str] = &["and", "but", "while"];
const ENDS: &[&str] = &[".", "!"];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub unlabeled: usize,
    pub per_condition: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig { unlabeled: 10_000, per_condition: 200, max_len: crate::corpus::DEFAULT_MAX_LEN, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub unlabeled: Vec<String>,
    /// `(label, sentence)` with labels from the length bins.
    pub labeled: Vec<(String, String)>,
}

impl SyntheticCorpus {
    pub fn unlabeled_file(&self) -> String {
        self.unlabeled.iter().map(|s| format!("{s}\n")).collect()
    }

    pub fn labeled_file(&self) -> String {
        self.labeled.iter().map(|(l, s)| format!("{l}\t{s}\n")).collect()
    }
}

fn pick<'a>(rng: &mut impl Rng, words: &[&'a str]) -> &'a str {
    words.choose(rng).expect("non-empty word list")
}

fn interjection(rng: &mut impl Rng, out: &mut Vec<&'static str>) {
    match rng.random_range(0..4) {
        0 => out.push(pick(rng, ADJS)),
        1 => {
            out.push(pick(rng, ADJS));
            out.push(pick(rng, ENDS));
        }
        2 => {
            out.push(pick(rng, ADVS));
            out.push(pick(rng, ADJS));
        }
        _ => {
            out.push(pick(rng, ADJS));
            out.push(pick(rng, NOUNS));
            out.push(pick(rng, ENDS));
        }
    }
}

fn clause(rng: &mut impl Rng, out: &mut Vec<&'static str>) {
    if rng.random_bool(0.7) {
        out.push(pick(rng, DETS));
    }
    if rng.random_bool(0.4) {
        out.push(pick(rng, ADJS));
    }
    out.push(pick(rng, NOUNS));
    out.push(pick(rng, VERBS));
    if rng.random_bool(0.5) {
        out.push(pick(rng, ADVS));
    }
    out.push(pick(rng, ADJS));
}

/// One sentence, as a space-joined token string.
pub fn sentence(rng: &mut impl Rng) -> String {
    let mut words = Vec::with_capacity(16);
    let r: f64 = rng.random();
    if r < 0.3 {
        interjection(rng, &mut words);
    } else {
        let clauses = if r < 0.55 { 1 } else if r < 0.8 { 2 } else { 3 };
        for c in 0..clauses {
            if c > 0 {
                words.push(pick(rng, CONJS));
            }
            clause(rng, &mut words);
        }
        words.push(pick(rng, ENDS));
    }
    words.join(" ")
}

/// Unlabeled lines plus `per_condition` labeled lines for each length bin.
/// Sentences longer than `max_len` tokens are rejected.
pub fn generate(cfg: &SyntheticConfig) -> SyntheticCorpus {
    let mut rng = rng::stream(cfg.seed, "synthetic.unlabeled");
    let mut unlabeled = Vec::with_capacity(cfg.unlabeled);
    while unlabeled.len() < cfg.unlabeled {
        let s = sentence(&mut rng);
        if tokenize(&s).len() <= cfg.max_len {
            unlabeled.push(s);
        }
    }
    let mut rng = rng::stream(cfg.seed, "synthetic.labeled");
    let mut buckets: Vec<Vec<String>> = vec![Vec::new(); LengthLabel::ALL.len()];
    while buckets.iter().any(|b| b.len() < cfg.per_condition) {
        let s = sentence(&mut rng);
        let n = tokenize(&s).len();
        if n == 0 || n > cfg.max_len {
            continue;
        }
        let label = LengthLabel::for_len(n).expect("non-empty");
        let slot = &mut buckets[label as usize];
        if slot.len() < cfg.per_condition {
            slot.push(s);
        }
    }
    // interleave so every prefix of the file stays balanced
    let mut labeled = Vec::with_capacity(cfg.per_condition * 3);
    for i in 0..cfg.per_condition {
        for label in LengthLabel::ALL {
            labeled.push((label.to_string(), buckets[label as usize][i].clone()));
        }
    }
    SyntheticCorpus { unlabeled, labeled }
}
