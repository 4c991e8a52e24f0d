//! Bag-of-words answer F1, maximized over gold references.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::dataset::QAExample;
use crate::error::{Error, Result};

static ARTICLES: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b(a|an|the)\b").unwrap());

/// SQuAD-style normalization: lowercase, drop ASCII punctuation, drop the
/// articles a/an/the, split on whitespace.
pub fn normalize_answer(s: &str) -> Vec<String> {
    let lowered = s.to_lowercase();
    let no_punct: String = lowered
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    ARTICLES
        .replace_all(&no_punct, " ")
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Multiset-overlap F1 between normalized token bags. Two empty bags score
/// 1.0; exactly one empty bag scores 0.0.
pub fn token_f1(pred: &str, gold: &str) -> f64 {
    let pred = normalize_answer(pred);
    let gold = normalize_answer(gold);
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn score_example(pred: &str, golds: &[impl AsRef<str>]) -> Result<f64> {
    golds
        .iter()
        .map(|g| token_f1(pred, g.as_ref()))
        .reduce(f64::max)
        .ok_or(Error::NoGoldAnswers)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub per_example: BTreeMap<String, f64>,
    pub mean_f1: f64,
    /// Population standard deviation of per-run means; 0 for a single run.
    pub std_f1: f64,
    pub n: usize,
    #[serde(default = "one")]
    pub runs: usize,
    #[serde(default)]
    pub missing_predictions: usize,
}

fn one() -> usize {
    1
}

/// Scores one run. Gold examples without a prediction score 0 and are counted
/// in `missing_predictions`.
pub fn evaluate(predictions: &HashMap<String, String>, golds: &[QAExample]) -> Result<EvalReport> {
    let mut per_example = BTreeMap::new();
    let mut missing = 0;
    for e in golds {
        let f1 = match predictions.get(&e.qid) {
            Some(p) => score_example(p, &e.gold_answers)?,
            None => {
                missing += 1;
                0.0
            }
        };
        per_example.insert(e.qid.clone(), f1);
    }
    let n = per_example.len();
    let mean_f1 = if n == 0 {
        0.0
    } else {
        per_example.values().sum::<f64>() / n as f64
    };
    if missing > 0 {
        log::warn!("{missing} gold questions have no prediction; scored 0");
    }
    Ok(EvalReport {
        per_example,
        mean_f1,
        std_f1: 0.0,
        n,
        runs: 1,
        missing_predictions: missing,
    })
}

/// Mean and population standard deviation of per-run mean F1. The merged
/// `per_example` holds each qid's mean over the runs that scored it.
pub fn aggregate(reports: &[EvalReport]) -> Result<EvalReport> {
    if reports.is_empty() {
        return Err(Error::NoRuns);
    }
    let k = reports.len() as f64;
    let mean = reports.iter().map(|r| r.mean_f1).sum::<f64>() / k;
    let var = reports
        .iter()
        .map(|r| (r.mean_f1 - mean).powi(2))
        .sum::<f64>()
        / k;

    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in reports {
        for (q, f) in &r.per_example {
            let e = sums.entry(q.clone()).or_default();
            e.0 += f;
            e.1 += 1;
        }
    }
    let per_example: BTreeMap<String, f64> = sums
        .into_iter()
        .map(|(q, (s, c))| (q, s / c as f64))
        .collect();
    Ok(EvalReport {
        n: reports.iter().map(|r| r.n).max().unwrap_or(0),
        per_example,
        mean_f1: mean,
        std_f1: var.sqrt(),
        runs: reports.len(),
        missing_predictions: reports.iter().map(|r| r.missing_predictions).sum(),
    })
}

/// Reads a predictions file: a JSON object mapping qid to answer text.
pub fn load_predictions(path: impl AsRef<Path>) -> Result<HashMap<String, String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.into(),
        line: e.line(),
        message: e.to_string(),
    })
}
