//! Per-question metrics and the two-level scoring protocol.
//!
//! | task type | metric |
//! |---|---|
//! | multiple choice | accuracy |
//! | ranking | nDCG (linear gain, `log2(i + 1)` discount) |
//! | NER | span-level micro-F1 |
//! | retrieval | Hit@3, normalized by `min(3, |gold|)` |
//! | generation | ROUGE-L F, sentence BLEU-4, or bag-of-tokens cosine |
//!
//! Every metric returns a value in `[0, 1]`; a parse failure scores 0. A
//! track score is the mean over its questions, and systems are compared by
//! the sum of their per-track ranks (lower is better).

use std::collections::{BTreeMap, BTreeSet, HashMap};

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parser::ParsedAnswer;
use crate::text::{metric_tokens, normalize_span};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("track {0} has no questions")]
    EmptyTrack(u8),
    #[error("invalid gold answer: {0}")]
    InvalidGold(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationMetric {
    #[default]
    RougeL,
    Bleu,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GoldAnswer {
    Choice {
        index: usize,
    },
    /// Relevance grade per candidate id.
    Ranking {
        #[serde(with = "id_keyed")]
        grades: BTreeMap<usize, f64>,
    },
    Entities {
        spans: Vec<String>,
    },
    Retrieval {
        ids: BTreeSet<usize>,
    },
    Text {
        reference: String,
        #[serde(default)]
        metric: GenerationMetric,
    },
}

impl GoldAnswer {
    pub fn validate(&self) -> Result<(), MetricError> {
        if let GoldAnswer::Ranking { grades } = self {
            if let Some((id, g)) = grades.iter().find(|(_, g)| !g.is_finite() || **g < 0.0) {
                return Err(MetricError::InvalidGold(format!(
                    "grade {g} for candidate {id} must be finite and non-negative"
                )));
            }
            if !grades.values().any(|g| *g > 0.0) {
                return Err(MetricError::InvalidGold(
                    "ranking gold needs at least one positive grade".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Integer-keyed maps inside internally tagged enums arrive with string keys.
mod id_keyed {
    use std::collections::BTreeMap;

    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<usize, f64>, s: S) -> Result<S::Ok, S::Error> {
        m.iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect::<BTreeMap<String, f64>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<usize, f64>, D::Error> {
        BTreeMap::<String, f64>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| {
                k.parse::<usize>()
                    .map(|k| (k, v))
                    .map_err(|_| D::Error::custom(format!("candidate id `{k}` is not an integer")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Granularity {
    #[default]
    Span,
    Token,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    pub f1_granularity: F1Granularity,
}

pub fn accuracy(pred: Option<usize>, gold: usize) -> f64 {
    if pred == Some(gold) {
        1.0
    } else {
        0.0
    }
}

/// nDCG with linear gains. Ids absent from `grades` gain 0; all-zero grades
/// score 1 since there is nothing to rank.
pub fn ndcg(pred: &[usize], grades: &BTreeMap<usize, f64>) -> f64 {
    let mut ideal: Vec<f64> = grades.values().copied().collect();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal
        .iter()
        .enumerate()
        .map(|(i, g)| g / ((i + 2) as f64).log2())
        .sum();
    if idcg <= 0.0 {
        return 1.0;
    }
    let mut seen = BTreeSet::new();
    let dcg: f64 = pred
        .iter()
        .enumerate()
        .filter(|(_, id)| seen.insert(**id))
        .map(|(i, id)| grades.get(id).copied().unwrap_or(0.0) / ((i + 2) as f64).log2())
        .sum();
    (dcg / idcg).clamp(0.0, 1.0)
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

fn multiset(items: impl IntoIterator<Item = String>) -> HashMap<String, usize> {
    let mut m = HashMap::new();
    for it in items {
        *m.entry(it).or_insert(0) += 1;
    }
    m
}

/// Returns `(tp, fp, fn)` for exact normalized matches, with multiplicity.
pub fn f1_counts(pred: &[String], gold: &[String], granularity: F1Granularity) -> (usize, usize, usize) {
    let units = |spans: &[String]| -> Vec<String> {
        match granularity {
            F1Granularity::Span => spans
                .iter()
                .map(|s| normalize_span(s))
                .filter(|s| !s.is_empty())
                .collect(),
            F1Granularity::Token => spans.iter().flat_map(|s| metric_tokens(s)).collect(),
        }
    };
    let p = multiset(units(pred));
    let g = multiset(units(gold));
    let tp: usize = p
        .iter()
        .map(|(k, n)| (*n).min(g.get(k).copied().unwrap_or(0)))
        .sum();
    let p_total: usize = p.values().sum();
    let g_total: usize = g.values().sum();
    (tp, p_total - tp, g_total - tp)
}

pub fn micro_f1(pred: &[String], gold: &[String], granularity: F1Granularity) -> f64 {
    let (tp, fp, fn_) = f1_counts(pred, gold, granularity);
    f1_from_counts(tp, fp, fn_)
}

/// `|pred ∩ gold| / min(3, |gold|)` over the first three predictions.
pub fn hit_at_3(pred: &[usize], gold: &BTreeSet<usize>) -> f64 {
    if gold.is_empty() {
        warn!("hit@3 called with an empty gold set; scoring 0");
        return 0.0;
    }
    let mut seen = BTreeSet::new();
    let hits = pred
        .iter()
        .filter(|id| seen.insert(**id))
        .take(3)
        .filter(|id| gold.contains(id))
        .count();
    hits as f64 / gold.len().min(3) as f64
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure over metric tokens (no stemming).
pub fn rouge_l(pred: &str, reference: &str) -> f64 {
    rouge_l_tokens(&metric_tokens(pred), &metric_tokens(reference))
}

pub fn rouge_l_tokens(pred: &[String], reference: &[String]) -> f64 {
    match (pred.is_empty(), reference.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let lcs = lcs_len(pred, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / pred.len() as f64;
    let r = lcs / reference.len() as f64;
    2.0 * p * r / (p + r)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU-4: clipped n-gram precisions, add-one smoothing for n ≥ 2,
/// brevity penalty when the prediction is shorter than the reference.
pub fn bleu(pred: &str, reference: &str) -> f64 {
    bleu_tokens(&metric_tokens(pred), &metric_tokens(reference))
}

pub fn bleu_tokens(pred: &[String], reference: &[String]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let p = ngram_counts(pred, n);
        let r = ngram_counts(reference, n);
        let matched: usize = p
            .iter()
            .map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0)))
            .sum();
        let total = pred.len().saturating_sub(n - 1);
        let precision = if n == 1 {
            matched as f64 / total as f64
        } else {
            (matched + 1) as f64 / (total + 1) as f64
        };
        if precision == 0.0 {
            return 0.0;
        }
        log_sum += precision.ln();
    }
    let bp = if pred.len() < reference.len() {
        (1.0 - reference.len() as f64 / pred.len() as f64).exp()
    } else {
        1.0
    };
    (bp * (log_sum / 4.0).exp()).clamp(0.0, 1.0)
}

/// Sentence embedding backend for the cosine metric.
pub trait SentenceEmbedder: Send + Sync {
    fn embed(&self, text: &str) -> HashMap<String, f64>;
}

/// Stand-in embedder: token count vector. Not a semantic model.
#[derive(Debug, Clone, Copy, Default)]
pub struct BagOfTokens;

impl SentenceEmbedder for BagOfTokens {
    fn embed(&self, text: &str) -> HashMap<String, f64> {
        multiset(metric_tokens(text))
            .into_iter()
            .map(|(k, v)| (k, v as f64))
            .collect()
    }
}

/// Cosine similarity clipped to `[0, 1]`. Both empty → 1, one empty → 0.
pub fn embedding_cosine_with(embedder: &dyn SentenceEmbedder, pred: &str, reference: &str) -> f64 {
    let a = embedder.embed(pred);
    let b = embedder.embed(reference);
    let norm = |v: &HashMap<String, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(&a), norm(&b));
    match (na == 0.0, nb == 0.0) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let dot: f64 = a
        .iter()
        .map(|(k, x)| x * b.get(k).copied().unwrap_or(0.0))
        .sum();
    (dot / (na * nb)).clamp(0.0, 1.0)
}

pub fn embedding_cosine(pred: &str, reference: &str) -> f64 {
    embedding_cosine_with(&BagOfTokens, pred, reference)
}

/// Score for one question. A missing answer (parse failure) or an answer of
/// the wrong kind scores 0.
pub fn score_answer(parsed: Option<&ParsedAnswer>, gold: &GoldAnswer, opts: &MetricOptions) -> f64 {
    let Some(parsed) = parsed else {
        return 0.0;
    };
    let score = match (parsed, gold) {
        (ParsedAnswer::Choice { index }, GoldAnswer::Choice { index: g }) => accuracy(Some(*index), *g),
        (ParsedAnswer::RankedList { ids }, GoldAnswer::Ranking { grades }) => ndcg(ids, grades),
        (ParsedAnswer::EntitySet { spans }, GoldAnswer::Entities { spans: g }) => {
            micro_f1(spans, g, opts.f1_granularity)
        }
        (ParsedAnswer::RetrievedSet { ids }, GoldAnswer::Retrieval { ids: g }) => hit_at_3(ids, g),
        (ParsedAnswer::FreeText { text }, GoldAnswer::Text { reference, metric }) => match metric {
            GenerationMetric::RougeL => rouge_l(text, reference),
            GenerationMetric::Bleu => bleu(text, reference),
            GenerationMetric::Cosine => embedding_cosine(text, reference),
        },
        _ => 0.0,
    };
    debug_assert!((0.0..=1.0).contains(&score));
    score
}

/// Arithmetic mean of a track's question scores.
pub fn track_score(scores: &[f64], track: u8) -> Result<f64, MetricError> {
    if scores.is_empty() {
        return Err(MetricError::EmptyTrack(track));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Per-track scores of one system.
pub type TrackScores = BTreeMap<u8, f64>;

/// Sum of per-track ranks. Within a track, systems are ranked by descending
/// score and ties share the better rank. A system without a (finite) score
/// for a track is left out of that track's ranking.
pub fn rank_sum(systems: &BTreeMap<String, TrackScores>) -> BTreeMap<String, u32> {
    let tracks: BTreeSet<u8> = systems.values().flat_map(|t| t.keys().copied()).collect();
    let mut sums: BTreeMap<String, u32> = systems.keys().map(|k| (k.clone(), 0)).collect();
    for track in tracks {
        let entrants: Vec<(&String, f64)> = systems
            .iter()
            .filter_map(|(name, t)| t.get(&track).filter(|s| s.is_finite()).map(|s| (name, *s)))
            .collect();
        for (name, score) in &entrants {
            let better = entrants.iter().filter(|(_, s)| s > score).count() as u32;
            *sums.get_mut(*name).expect("known system") += better + 1;
        }
    }
    sums
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub systems: BTreeMap<String, TrackScores>,
    pub rank_sums: BTreeMap<String, u32>,
}

impl RankTable {
    pub fn new(systems: BTreeMap<String, TrackScores>) -> Self {
        let rank_sums = rank_sum(&systems);
        Self { systems, rank_sums }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_question: BTreeMap<String, f64>,
    pub per_track: BTreeMap<u8, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overall_rank_sum: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_table: Option<RankTable>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl MetricReport {
    /// Builds a report from `(id, track, score)` triples.
    pub fn from_scores(scores: impl IntoIterator<Item = (String, u8, f64)>) -> Result<Self, MetricError> {
        let mut per_question = BTreeMap::new();
        let mut by_track: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
        for (id, track, score) in scores {
            by_track.entry(track).or_default().push(score);
            per_question.insert(id, score);
        }
        let per_track = by_track
            .iter()
            .map(|(t, s)| track_score(s, *t).map(|m| (*t, m)))
            .collect::<Result<_, _>>()?;
        let mut metadata = BTreeMap::new();
        metadata.insert("rouge_l".into(), "LCS F-measure over lowercased tokens, no stemming".into());
        metadata.insert(
            "cosine".into(),
            "bag-of-tokens stand-in, not a sentence-embedding model".into(),
        );
        metadata.insert("hit_at_3".into(), "normalized by min(3, |gold|)".into());
        Ok(Self {
            per_question,
            per_track,
            overall_rank_sum: None,
            rank_table: None,
            metadata,
        })
    }

    /// Adds this run as `name` to a comparison table and records its rank sum.
    pub fn compare_with(&mut self, name: &str, mut others: BTreeMap<String, TrackScores>) {
        others.insert(name.to_string(), self.per_track.clone());
        let table = RankTable::new(others);
        self.overall_rank_sum = table.rank_sums.get(name).copied();
        self.rank_table = Some(table);
    }
}
