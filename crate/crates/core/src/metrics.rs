//! Per-question metrics: token recall for open questions, yes/no accuracy
//! for closed ones, and rank-based AUC for expert diagnostic scores.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::{binary_answer, Openness, QaCategory, QaRecord};
use crate::error::{Error, Result};

/// Version tag of the tokenizer and polarity rules.
pub const METRIC_VERSION: &str = "token-recall-v1";

fn is_edge_char(c: char) -> bool {
    matches!(
        c,
        '.' | ',' | ';' | ':' | '!' | '?' | '(' | ')' | '[' | ']' | '"' | '\'' | '\u{2018}' | '\u{2019}'
    )
}

/// Lowercase, split on whitespace, strip punctuation from token edges, drop
/// tokens that end up empty.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|t| t.trim_matches(is_edge_char))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallMode {
    /// Each ground-truth token earns credit at most as many times as it occurs.
    #[default]
    Multiset,
    /// Distinct tokens only.
    Set,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub recall_mode: RecallMode,
}

pub fn token_recall(pred: &str, gt: &str) -> Result<f64> {
    token_recall_with(pred, gt, RecallMode::Multiset)
}

pub fn token_recall_with(pred: &str, gt: &str, mode: RecallMode) -> Result<f64> {
    let gt_tokens = tokenize(gt);
    if gt_tokens.is_empty() {
        return Err(Error::UndefinedMetric(format!("ground truth {gt:?} has no tokens")));
    }
    let pred_tokens = tokenize(pred);
    match mode {
        RecallMode::Multiset => {
            let mut available: HashMap<&str, usize> = HashMap::new();
            for t in &pred_tokens {
                *available.entry(t.as_str()).or_default() += 1;
            }
            let mut hits = 0usize;
            for t in &gt_tokens {
                if let Some(n) = available.get_mut(t.as_str()) {
                    if *n > 0 {
                        *n -= 1;
                        hits += 1;
                    }
                }
            }
            Ok(hits as f64 / gt_tokens.len() as f64)
        }
        RecallMode::Set => {
            let gt_set: HashSet<&str> = gt_tokens.iter().map(String::as_str).collect();
            let pred_set: HashSet<&str> = pred_tokens.iter().map(String::as_str).collect();
            let hits = gt_set.intersection(&pred_set).count();
            Ok(hits as f64 / gt_set.len() as f64)
        }
    }
}

/// Yes/no polarity of a generated answer: the first token if it is yes/no,
/// else whichever of yes/no occurs alone anywhere in the answer.
pub fn extract_polarity(pred: &str) -> Option<bool> {
    let tokens = tokenize(pred);
    match tokens.first().map(String::as_str) {
        Some("yes") => return Some(true),
        Some("no") => return Some(false),
        _ => {}
    }
    let yes = tokens.iter().any(|t| t == "yes");
    let no = tokens.iter().any(|t| t == "no");
    match (yes, no) {
        (true, false) => Some(true),
        (false, true) => Some(false),
        _ => None,
    }
}

pub fn closed_accuracy(pred: &str, gt: &str) -> Result<u8> {
    let truth = binary_answer(gt)
        .ok_or_else(|| Error::Contract(format!("closed question with non-binary ground truth {gt:?}")))?;
    Ok(u8::from(extract_polarity(pred) == Some(truth)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub qa_id: String,
    pub answer_text: String,
    pub run_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    TokenRecall,
    Accuracy,
}

impl MetricKind {
    pub fn for_openness(o: Openness) -> Self {
        match o {
            Openness::Open => MetricKind::TokenRecall,
            Openness::Closed => MetricKind::Accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionScore {
    pub qa_id: String,
    pub category: QaCategory,
    pub openness: Openness,
    pub metric: MetricKind,
    pub value: f64,
}

impl QuestionScore {
    pub fn bucket(&self) -> Bucket {
        Bucket::new(self.category, self.openness)
    }
}

/// Scores of one inference run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunScores {
    pub run_id: String,
    pub scores: Vec<QuestionScore>,
    /// Questions whose metric is undefined (ground truth without tokens).
    pub excluded: Vec<String>,
}

pub fn score_question(qa: &QaRecord, answer: &str, cfg: &MetricConfig) -> Result<f64> {
    match qa.openness {
        Openness::Open => token_recall_with(answer, &qa.answer, cfg.recall_mode),
        Openness::Closed => closed_accuracy(answer, &qa.answer).map(f64::from),
    }
}

/// Scores one run. Every QA needs exactly one prediction, and every
/// prediction must name a known QA. Output follows QA input order.
pub fn score_run(preds: &[Prediction], qas: &[QaRecord], cfg: &MetricConfig) -> Result<RunScores> {
    let known: HashSet<&str> = qas.iter().map(|q| q.qa_id.as_str()).collect();
    let mut by_id: HashMap<&str, &Prediction> = HashMap::with_capacity(preds.len());
    let mut duplicates = Vec::new();
    let mut unknown = Vec::new();
    for p in preds {
        if !known.contains(p.qa_id.as_str()) {
            unknown.push(p.qa_id.clone());
        }
        if by_id.insert(p.qa_id.as_str(), p).is_some() {
            duplicates.push(p.qa_id.clone());
        }
    }
    if !duplicates.is_empty() {
        duplicates.sort();
        duplicates.dedup();
        return Err(Error::DuplicateIds(duplicates));
    }
    let mut missing: Vec<String> = qas
        .iter()
        .filter(|q| !by_id.contains_key(q.qa_id.as_str()))
        .map(|q| q.qa_id.clone())
        .collect();
    if !missing.is_empty() {
        missing.sort();
        return Err(Error::MissingIds(missing));
    }
    if !unknown.is_empty() {
        unknown.sort();
        return Err(Error::Contract(format!("predictions for unknown qa ids: {}", unknown.join(", "))));
    }

    let run_id = preds.first().map(|p| p.run_id.clone()).unwrap_or_default();
    let mut scores = Vec::with_capacity(qas.len());
    let mut excluded = Vec::new();
    for qa in qas {
        let pred = by_id[qa.qa_id.as_str()];
        match score_question(qa, &pred.answer_text, cfg) {
            Ok(value) => scores.push(QuestionScore {
                qa_id: qa.qa_id.clone(),
                category: qa.category,
                openness: qa.openness,
                metric: MetricKind::for_openness(qa.openness),
                value,
            }),
            Err(Error::UndefinedMetric(_)) => excluded.push(qa.qa_id.clone()),
            Err(e) => return Err(e),
        }
    }
    Ok(RunScores {
        run_id,
        scores,
        excluded,
    })
}

/// A report row: one category at one openness, or the average over all
/// categories (`category == None`) at one openness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Bucket {
    pub category: Option<QaCategory>,
    pub openness: Openness,
}

impl Bucket {
    pub fn new(category: QaCategory, openness: Openness) -> Self {
        Bucket {
            category: Some(category),
            openness,
        }
    }

    pub fn average(openness: Openness) -> Self {
        Bucket {
            category: None,
            openness,
        }
    }

    pub fn is_average(&self) -> bool {
        self.category.is_none()
    }

    fn sort_key(&self) -> (usize, Openness) {
        let pos = match self.category {
            Some(c) => QaCategory::ALL.iter().position(|x| *x == c).unwrap_or(0),
            None => QaCategory::ALL.len(),
        };
        (pos, self.openness)
    }

    pub fn contains(&self, score: &QuestionScore) -> bool {
        score.openness == self.openness && self.category.is_none_or(|c| c == score.category)
    }
}

impl Ord for Bucket {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl PartialOrd for Bucket {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cat = self.category.map_or("average", QaCategory::as_str);
        let o = match self.openness {
            Openness::Open => "open",
            Openness::Closed => "closed",
        };
        write!(f, "{cat}:{o}")
    }
}

impl FromStr for Bucket {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (cat, o) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("malformed bucket key {s:?}")))?;
        let openness = match o {
            "open" => Openness::Open,
            "closed" => Openness::Closed,
            _ => return Err(Error::Config(format!("malformed bucket key {s:?}"))),
        };
        let category = match cat {
            "average" => None,
            c => Some(c.parse()?),
        };
        Ok(Bucket { category, openness })
    }
}

impl Serialize for Bucket {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Bucket {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Running sum for a bucket; merging two accumulators is the same as
/// accumulating their inputs together.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Accumulator {
    pub sum: f64,
    pub n: usize,
}

impl Accumulator {
    pub fn push(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    pub fn merge(&mut self, other: &Accumulator) {
        self.sum += other.sum;
        self.n += other.n;
    }

    pub fn mean(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketMean {
    pub mean: f64,
    pub n: usize,
}

pub fn accumulate(scores: &[QuestionScore]) -> BTreeMap<Bucket, Accumulator> {
    let mut acc: BTreeMap<Bucket, Accumulator> = BTreeMap::new();
    for s in scores {
        acc.entry(s.bucket()).or_default().push(s.value);
    }
    acc
}

fn finish(acc: BTreeMap<Bucket, Accumulator>) -> BTreeMap<Bucket, BucketMean> {
    acc.into_iter()
        .filter_map(|(b, a)| a.mean().map(|mean| (b, BucketMean { mean, n: a.n })))
        .collect()
}

/// Per-(category, openness) mean and count; empty buckets are omitted.
pub fn aggregate(scores: &[QuestionScore]) -> BTreeMap<Bucket, BucketMean> {
    finish(accumulate(scores))
}

/// [`aggregate`] plus question-weighted average rows per openness.
pub fn aggregate_with_averages(scores: &[QuestionScore]) -> BTreeMap<Bucket, BucketMean> {
    let mut acc = accumulate(scores);
    for s in scores {
        acc.entry(Bucket::average(s.openness)).or_default().push(s.value);
    }
    finish(acc)
}

/// Rank-based AUC (Mann-Whitney U / (n_pos * n_neg)), average ranks for ties.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "auc: {} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|l| **l > 1) {
        return Err(Error::Contract(format!("auc: label {l} is not 0/1")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Contract("auc: NaN score".into()));
    }
    let n_pos = labels.iter().filter(|l| **l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("auc needs both classes".into()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of (doubled) average ranks of the positives; doubled ranks are integers.
    let mut pos_rank2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let rank2 = (i + 1 + j) as u128;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        pos_rank2 += rank2 * pos_in_group;
        i = j;
    }
    let n_pos = n_pos as u128;
    // 2U = 2R - n_pos (n_pos + 1)
    let u2 = pos_rank2 - n_pos * (n_pos + 1);
    Ok(u2 as f64 / (2 * n_pos * n_neg as u128) as f64)
}
