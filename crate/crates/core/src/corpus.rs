//! Tokenization, vocabulary, sequence encoding and per-condition sample sets.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Mat, Real};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Default cap on content tokens per sentence.
pub const DEFAULT_MAX_LEN: usize = 15;

/// Lowercases, splits on whitespace and isolates every punctuation character.
pub fn tokenize(raw: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in raw.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_ascii_punctuation() || (!ch.is_ascii() && is_unicode_punct(ch)) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

fn is_unicode_punct(ch: char) -> bool {
    matches!(ch, '\u{2010}'..='\u{2027}' | '\u{2030}'..='\u{205E}' | '\u{00A1}' | '\u{00BF}' | '\u{00AB}' | '\u{00BB}')
}

/// Bidirectional token/id map. Ids 0..4 are the special tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens_unchecked(tokens: Vec<String>) -> Self {
        let token_to_id = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, token_to_id }
    }

    /// Specials plus the `max_vocab - 4` most frequent tokens. Frequency ties
    /// go to the token seen first.
    pub fn build(corpus: &[Vec<String>], max_vocab: usize) -> Result<Self> {
        if max_vocab <= SPECIALS.len() {
            return Err(Error::Config(format!("max_vocab must exceed {}", SPECIALS.len())));
        }
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
        let mut order = 0usize;
        for tok in corpus.iter().flatten() {
            if SPECIALS.contains(&tok.as_str()) {
                continue;
            }
            let e = counts.entry(tok.as_str()).or_insert_with(|| {
                order += 1;
                (0, order)
            });
            e.0 += 1;
        }
        if counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(&str, (usize, usize))> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(max_vocab - SPECIALS.len()).map(|(t, _)| t.to_string()))
            .collect();
        Ok(Self::from_tokens_unchecked(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < SPECIALS.len() || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s) {
            return Err(Error::InvalidInput("vocabulary must start with the four special tokens".into()));
        }
        let vocab = Self::from_tokens_unchecked(tokens);
        if vocab.token_to_id.len() != vocab.tokens.len() {
            return Err(Error::InvalidInput("duplicate token in vocabulary".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

pub fn build_vocabulary(corpus: &[Vec<String>], max_vocab: usize) -> Result<Vocabulary> {
    Vocabulary::build(corpus, max_vocab)
}

/// Token ids, normally `bos ... eos`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    /// Ids with the special tokens removed.
    pub fn content(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied().filter(|&i| i >= SPECIALS.len())
    }

    pub fn content_len(&self) -> usize {
        self.content().count()
    }
}

/// `bos + ids + eos`, with out-of-vocabulary tokens mapped to unk and the
/// content cut to `max_len` ids.
pub fn encode_text(tokens: &[String], vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let mut ids = Vec::with_capacity(tokens.len().min(max_len) + 2);
    ids.push(BOS);
    ids.extend(tokens.iter().take(max_len).map(|t| vocab.id(t).unwrap_or(UNK)));
    ids.push(EOS);
    TokenSequence(ids)
}

/// Content tokens joined by single spaces.
pub fn decode_tokens(seq: &TokenSequence, vocab: &Vocabulary) -> Result<String> {
    if let Some(&bad) = seq.0.iter().find(|&&i| i >= vocab.len()) {
        return Err(Error::IdOutOfRange(bad));
    }
    Ok(seq.content().map(|i| vocab.tokens[i].as_str()).collect::<Vec<_>>().join(" "))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthLabel {
    Short,
    Medium,
    Long,
}

impl LengthLabel {
    pub const ALL: [LengthLabel; 3] = [LengthLabel::Short, LengthLabel::Medium, LengthLabel::Long];

    /// Short is at most 3 tokens, long at least 12, medium in between.
    pub fn for_len(len: usize) -> Result<Self> {
        match len {
            0 => Err(Error::EmptySequence),
            1..=3 => Ok(LengthLabel::Short),
            12.. => Ok(LengthLabel::Long),
            _ => Ok(LengthLabel::Medium),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LengthLabel::Short => "short",
            LengthLabel::Medium => "medium",
            LengthLabel::Long => "long",
        }
    }
}

impl fmt::Display for LengthLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LengthLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "short" => Ok(LengthLabel::Short),
            "medium" => Ok(LengthLabel::Medium),
            "long" => Ok(LengthLabel::Long),
            other => Err(Error::UnknownCondition(other.to_string())),
        }
    }
}

pub fn length_label(seq: &TokenSequence) -> Result<LengthLabel> {
    LengthLabel::for_len(seq.content_len())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledSample {
    pub text: TokenSequence,
    pub condition: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConditionSets {
    pub positives: Vec<TokenSequence>,
    pub negatives: Vec<TokenSequence>,
}

/// Positives: up to `n_per_condition` samples labeled `condition`, drawn with
/// the `positives` stream of `seed`. Negatives: every sample with another label,
/// or a same-sized draw of them when `balance_negatives` is set.
pub fn make_condition_sets(
    labeled: &[LabeledSample],
    condition: &str,
    n_per_condition: usize,
    seed: u64,
    balance_negatives: bool,
) -> Result<ConditionSets> {
    let (pos, neg): (Vec<&LabeledSample>, Vec<&LabeledSample>) =
        labeled.iter().partition(|s| s.condition == condition);
    if pos.is_empty() {
        return Err(Error::UnknownCondition(condition.to_string()));
    }
    let positives = subsample(&pos, n_per_condition, seed, "positives");
    let negatives = if balance_negatives {
        subsample(&neg, positives.len(), seed, "negatives")
    } else {
        neg.iter().map(|s| s.text.clone()).collect()
    };
    Ok(ConditionSets { positives, negatives })
}

/// Order-preserving sample of `n` items without replacement.
fn subsample(items: &[&LabeledSample], n: usize, seed: u64, stream: &str) -> Vec<TokenSequence> {
    if n >= items.len() {
        return items.iter().map(|s| s.text.clone()).collect();
    }
    let mut rng = rng::stream(seed, stream);
    let mut picked = index::sample(&mut rng, items.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| items[i].text.clone()).collect()
}

/// Encoded samples of one condition in the global latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionDataset<T> {
    pub name: String,
    pub positives: Mat<T>,
    pub negatives: Option<Mat<T>>,
}

impl<T: Real> ConditionDataset<T> {
    pub fn new(name: impl Into<String>, positives: Mat<T>, negatives: Option<Mat<T>>) -> Result<Self> {
        if positives.rows() == 0 {
            return Err(Error::EmptyBatch);
        }
        if let Some(n) = &negatives {
            if n.cols() != positives.cols() {
                return Err(Error::Shape(format!("negatives have {} dims, positives {}", n.cols(), positives.cols())));
            }
            if n.rows() == 0 {
                return Err(Error::EmptyBatch);
            }
        }
        Ok(ConditionDataset { name: name.into(), positives, negatives })
    }

    pub fn dim(&self) -> usize {
        self.positives.cols()
    }
}

/// One sentence per line; blank lines and sentences over `max_len` tokens are dropped.
pub fn read_unlabeled(path: &Path, max_len: usize) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path)?;
    Ok(text.lines().map(tokenize).filter(|t| !t.is_empty() && t.len() <= max_len).collect())
}

/// `label<TAB>sentence` per line. Returns `(label, tokens)` pairs, dropping
/// over-length and empty sentences.
pub fn read_labeled(path: &Path, max_len: usize) -> Result<Vec<(String, Vec<String>)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (label, sentence) = line
            .split_once('\t')
            .ok_or_else(|| Error::InvalidInput(format!("{}:{}: expected label<TAB>sentence", path.display(), n + 1)))?;
        let toks = tokenize(sentence);
        if !toks.is_empty() && toks.len() <= max_len {
            out.push((label.trim().to_string(), toks));
        }
    }
    Ok(out)
}

pub fn label_samples(rows: &[(String, Vec<String>)], vocab: &Vocabulary, max_len: usize) -> Vec<LabeledSample> {
    rows.iter()
        .map(|(label, toks)| LabeledSample { text: encode_text(toks, vocab, max_len), condition: label.clone() })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Great pricing!"), toks(&["great", "pricing", "!"]));
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("A a A"), toks(&["a", "a", "a"]));
        assert_eq!(tokenize("  don't,stop  "), toks(&["don", "'", "t", ",", "stop"]));
    }

    #[test]
    fn vocabulary_examples() {
        let v = build_vocabulary(&[toks(&["a", "b", "a"])], 6).unwrap();
        assert_eq!(&v.tokens()[4..], &toks(&["a", "b"])[..]);
        assert_eq!(v.id("a"), Some(4));

        let v = build_vocabulary(&[toks(&["a"]), toks(&["b"]), toks(&["b"])], 5).unwrap();
        assert_eq!(&v.tokens()[4..], &toks(&["b"])[..]);

        assert!(matches!(build_vocabulary(&[], 10), Err(Error::EmptyCorpus)));
        assert!(build_vocabulary(&[toks(&["a"])], 4).is_err());
    }

    #[test]
    fn vocabulary_ties_first_occurrence_and_skips_specials() {
        let v = build_vocabulary(&[toks(&["z", "y", "<unk>", "x", "y", "z"])], 100).unwrap();
        assert_eq!(&v.tokens()[..4], &SPECIALS.map(String::from)[..]);
        assert_eq!(&v.tokens()[4..], &toks(&["z", "y", "x"])[..]);
    }

    #[test]
    fn vocabulary_file_roundtrip() {
        let v = build_vocabulary(&[toks(&["hello", "world", "hello"])], 10).unwrap();
        let back = Vocabulary::parse(&v.to_file_string()).unwrap();
        assert_eq!(v, back);
        assert!(Vocabulary::parse("a\nb\n").is_err());
    }

    #[test]
    fn encode_decode_examples() {
        let v = build_vocabulary(&[toks(&["a"])], 10).unwrap();
        assert_eq!(encode_text(&toks(&["a"]), &v, 15).0, vec![1, 4, 2]);
        assert_eq!(encode_text(&toks(&["zzz"]), &v, 15).0, vec![1, 3, 2]);
        let long: Vec<String> = (0..20).map(|_| "a".to_string()).collect();
        assert_eq!(encode_text(&long, &v, 15).content_len(), 15);

        assert_eq!(decode_tokens(&TokenSequence(vec![1, 4, 2]), &v).unwrap(), "a");
        assert_eq!(decode_tokens(&TokenSequence(vec![1, 2]), &v).unwrap(), "");
        assert!(matches!(decode_tokens(&TokenSequence(vec![1, 99999, 2]), &v), Err(Error::IdOutOfRange(99999))));
    }

    #[test]
    fn length_label_bins() {
        let seq = |n: usize| TokenSequence(std::iter::once(BOS).chain(std::iter::repeat_n(4, n)).chain([EOS]).collect());
        assert_eq!(length_label(&seq(3)).unwrap(), LengthLabel::Short);
        assert_eq!(length_label(&seq(4)).unwrap(), LengthLabel::Medium);
        assert_eq!(length_label(&seq(7)).unwrap(), LengthLabel::Medium);
        assert_eq!(length_label(&seq(11)).unwrap(), LengthLabel::Medium);
        assert_eq!(length_label(&seq(12)).unwrap(), LengthLabel::Long);
        assert!(length_label(&seq(0)).is_err());
    }

    fn sample(id: usize, label: &str) -> LabeledSample {
        LabeledSample { text: TokenSequence(vec![BOS, id, EOS]), condition: label.into() }
    }

    #[test]
    fn condition_sets_set_difference() {
        let data = vec![sample(10, "a"), sample(11, "b"), sample(12, "c")];
        let sets = make_condition_sets(&data, "a", 200, 0, false).unwrap();
        assert_eq!(sets.positives, vec![data[0].text.clone()]);
        assert_eq!(sets.negatives, vec![data[1].text.clone(), data[2].text.clone()]);
        assert!(matches!(make_condition_sets(&data, "zzz", 1, 0, false), Err(Error::UnknownCondition(_))));
    }

    #[test]
    fn condition_sets_sampling() {
        let labels = ["short", "medium", "long"];
        let data: Vec<_> = (0..600).map(|i| sample(4 + i, labels[i % 3])).collect();
        let sets = make_condition_sets(&data, "short", 200, 3, false).unwrap();
        assert_eq!(sets.positives.len(), 200);
        assert_eq!(sets.negatives.len(), 400);
        let fewer = make_condition_sets(&data, "short", 50, 3, true).unwrap();
        assert_eq!(fewer.positives.len(), 50);
        assert_eq!(fewer.negatives.len(), 50);
        assert_eq!(fewer, make_condition_sets(&data, "short", 50, 3, true).unwrap());
    }

    #[test]
    fn labeled_reader_rejects_missing_tab() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.tsv");
        fs::write(&p, "short\tok then\nno tab here\n").unwrap();
        assert!(read_labeled(&p, 15).is_err());
        fs::write(&p, "short\tok then\nlong\ttoo many words here for the limit\n").unwrap();
        assert_eq!(read_labeled(&p, 3).unwrap().len(), 1);
    }
}
