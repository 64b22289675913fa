//! Condition accuracy, the log-variance of accuracy across conditions, and
//! Distinct-n diversity.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::classifier::{classifier_accuracy, TextClassifier};
use crate::corpus::{tokenize, LengthLabel};
use crate::error::{Error, Result};

/// Distinct n-grams over all n-gram occurrences, pooled across `texts`.
/// Texts are tokenized with the corpus tokenizer; empty texts contribute nothing.
pub fn distinct_n(texts: &[String], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidInput("n must be >= 1".into()));
    }
    let mut seen: HashSet<Vec<String>> = HashSet::new();
    let mut total = 0usize;
    for t in texts {
        let toks = tokenize(t);
        for w in toks.windows(n) {
            total += 1;
            if !seen.contains(w) {
                seen.insert(w.to_vec());
            }
        }
    }
    if total == 0 {
        return Err(Error::NoNgrams);
    }
    Ok(seen.len() as f64 / total as f64)
}

/// Fraction of `texts` whose token count falls in `condition`'s bin. Empty
/// texts count as failures.
pub fn length_accuracy(texts: &[String], condition: LengthLabel) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let hits = texts.iter().filter(|t| LengthLabel::for_len(tokenize(t).len()).ok() == Some(condition)).count();
    Ok(hits as f64 / texts.len() as f64)
}

/// Natural log of the population variance, or `AllEqual` when it is zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LogVariance {
    Value(f64),
    AllEqual,
}

impl Serialize for LogVariance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LogVariance::Value(v) => s.serialize_f64(*v),
            LogVariance::AllEqual => s.serialize_str("all-equal"),
        }
    }
}

impl<'de> Deserialize<'de> for LogVariance {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(LogVariance::Value(v)),
            Raw::Text(t) if t == "all-equal" => Ok(LogVariance::AllEqual),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("bad log-variance {t:?}"))),
        }
    }
}

impl std::fmt::Display for LogVariance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LogVariance::Value(v) => write!(f, "{v:.4}"),
            LogVariance::AllEqual => f.write_str("all-equal"),
        }
    }
}

pub fn accuracy_log_variance(accs: &[f64]) -> Result<LogVariance> {
    if accs.len() < 2 {
        return Err(Error::InvalidInput("log-variance needs at least two accuracies".into()));
    }
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    Ok(if var > 0.0 { LogVariance::Value(var.ln()) } else { LogVariance::AllEqual })
}

/// How accuracy is judged for each condition.
pub enum Task<'a> {
    /// Conditions are length bins, judged by token count.
    Length,
    /// Conditions are classifier labels.
    Classifier(&'a TextClassifier),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub accuracy: f64,
    pub samples: usize,
    /// `None` when the condition's texts contain no n-grams of that order.
    pub distinct1: Option<f64>,
    pub distinct2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub conditions: BTreeMap<String, ConditionReport>,
    pub mean_accuracy: f64,
    /// `None` with a single condition.
    pub log_variance: Option<LogVariance>,
    pub distinct1: f64,
    pub distinct2: f64,
}

pub fn evaluate(generated: &BTreeMap<String, Vec<String>>, task: &Task<'_>) -> Result<EvaluationReport> {
    if generated.is_empty() {
        return Err(Error::InvalidInput("no conditions to evaluate".into()));
    }
    let mut conditions = BTreeMap::new();
    for (cond, texts) in generated {
        let accuracy = match task {
            Task::Length => length_accuracy(texts, cond.parse()?)?,
            Task::Classifier(clf) => classifier_accuracy(clf, texts, cond)?,
        };
        let report = ConditionReport {
            accuracy,
            samples: texts.len(),
            distinct1: distinct_n(texts, 1).ok(),
            distinct2: distinct_n(texts, 2).ok(),
        };
        conditions.insert(cond.clone(), report);
    }
    let accs: Vec<f64> = conditions.values().map(|c| c.accuracy).collect();
    let log_variance = if accs.len() >= 2 { Some(accuracy_log_variance(&accs)?) } else { None };
    let pooled: Vec<String> = generated.values().flatten().cloned().collect();
    Ok(EvaluationReport {
        mean_accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
        log_variance,
        distinct1: distinct_n(&pooled, 1)?,
        distinct2: distinct_n(&pooled, 2)?,
        conditions,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

impl EvaluationReport {
    /// Plain-text table: one row per condition and a pooled row.
    pub fn table(&self) -> String {
        let mut rows = vec![["Condition".to_string(), "Accuracy".into(), "Log-Variance".into(), "Distinct-1".into(), "Distinct-2".into(), "Samples".into()]];
        for (name, c) in &self.conditions {
            rows.push([name.clone(), format!("{:.4}", c.accuracy), "-".into(), opt(c.distinct1), opt(c.distinct2), c.samples.to_string()]);
        }
        let total: usize = self.conditions.values().map(|c| c.samples).sum();
        rows.push([
            "pooled".into(),
            format!("{:.4}", self.mean_accuracy),
            self.log_variance.map_or_else(|| "-".into(), |v| v.to_string()),
            format!("{:.4}", self.distinct1),
            format!("{:.4}", self.distinct2),
            total.to_string(),
        ]);
        let widths: Vec<usize> = (0..6).map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for r in &rows {
            let line: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(j, cell)| if j == 0 { format!("{cell:<w$}", w = widths[j]) } else { format!("{cell:>w$}", w = widths[j]) })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn distinct_examples() {
        assert!((distinct_n(&s(&["a b a"]), 1).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(distinct_n(&s(&["a b", "a b"]), 2).unwrap(), 0.5);
        assert_eq!(distinct_n(&s(&["a b c", "d e"]), 1).unwrap(), 1.0);
        assert!(matches!(distinct_n(&s(&["a", ""]), 2), Err(Error::NoNgrams)));
        assert!(distinct_n(&s(&["a"]), 0).is_err());
    }

    #[test]
    fn length_accuracy_examples() {
        assert_eq!(length_accuracy(&s(&["great pricing !"]), LengthLabel::Short).unwrap(), 1.0);
        let long13 = "a b c d e f g h i j k l m";
        assert_eq!(length_accuracy(&s(&["a b c", long13]), LengthLabel::Short).unwrap(), 0.5);
        assert_eq!(length_accuracy(&s(&[""]), LengthLabel::Short).unwrap(), 0.0);
        assert!(length_accuracy(&[], LengthLabel::Long).is_err());
    }

    #[test]
    fn log_variance_examples() {
        match accuracy_log_variance(&[0.8, 0.9]).unwrap() {
            LogVariance::Value(v) => assert!((v - 0.0025f64.ln()).abs() < 1e-9),
            other => panic!("{other:?}"),
        }
        assert_eq!(accuracy_log_variance(&[0.5, 0.5]).unwrap(), LogVariance::AllEqual);
        assert!(accuracy_log_variance(&[0.5]).is_err());
    }

    #[test]
    fn perfect_length_generator() {
        let mut g = BTreeMap::new();
        g.insert("short".to_string(), s(&["nice !", "ok"]));
        g.insert("long".to_string(), s(&["a b c d e f g h i j k l"]));
        let r = evaluate(&g, &Task::Length).unwrap();
        assert_eq!(r.mean_accuracy, 1.0);
        assert_eq!(r.log_variance, Some(LogVariance::AllEqual));
        assert_eq!(r.conditions["short"].distinct2, Some(1.0));
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"log_variance\":\"all-equal\""));
        let back: EvaluationReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        let table = r.table();
        for col in ["Accuracy", "Log-Variance", "Distinct-1", "Distinct-2"] {
            assert!(table.contains(col));
        }
        g.insert("tiny".to_string(), s(&["x"]));
        assert!(evaluate(&g, &Task::Length).is_err());
    }
}
