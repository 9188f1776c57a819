//! One function per recipe. Every builder is a pure function of its rows and
//! `rng_seed`. Groups that cannot yield a sample return [`DatasetError::Skip`].

use std::cmp::Reverse;
use std::collections::BTreeSet;

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_pcg::Pcg64;

use super::prompts::{option_lines, Prompts};
use super::seed::{EsciLabel, EsciRow, ReviewRow, SessionRow};
use super::{DatasetError, LossMask, TrainingSample};
use crate::task::TaskType;

/// Upper bound on listed candidates for ranking and retrieval samples.
pub const MAX_CANDIDATES: usize = 6;
pub const RATING_OPTIONS: [&str; 5] = ["1 star", "2 stars", "3 stars", "4 stars", "5 stars"];

pub fn rng(seed: u64) -> Pcg64 {
    Pcg64::seed_from_u64(seed)
}

fn skip(reason: impl Into<String>) -> DatasetError {
    DatasetError::Skip(reason.into())
}

fn sample(recipe_id: u32, task_type: TaskType, prompt: String, answer: String) -> TrainingSample {
    TrainingSample {
        prompt,
        answer,
        task_type,
        recipe_id,
        loss_mask: LossMask::AnswerOnly,
    }
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")
}

/// Candidate indices sorted by ascending key; equal keys in seeded random order.
pub fn order_by_key<K: Ord>(keys: &[K], rng: &mut Pcg64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.shuffle(rng);
    idx.sort_by(|&a, &b| keys[a].cmp(&keys[b]));
    idx
}

fn distinct<K: Ord>(keys: &[K]) -> usize {
    keys.iter().collect::<BTreeSet<_>>().len()
}

/// A multiple-choice sample together with the label behind every option.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EsciMcSample {
    pub sample: TrainingSample,
    pub option_labels: Vec<EsciLabel>,
}

/// Picks one product for a query: the answer is a random E row, the other
/// options are random S/C/I rows. Options are shuffled.
pub fn build_esci_mc(
    rows: &[EsciRow],
    rng_seed: u64,
    num_options: usize,
    prompts: &Prompts,
) -> Result<EsciMcSample, DatasetError> {
    if num_options < 2 {
        return Err(DatasetError::InvalidInput(format!("num_options {num_options} < 2")));
    }
    let exact: Vec<&EsciRow> = rows.iter().filter(|r| r.esci_label == EsciLabel::E).collect();
    let others: Vec<&EsciRow> = rows.iter().filter(|r| r.esci_label != EsciLabel::E).collect();
    if exact.is_empty() {
        return Err(skip("no E row in group"));
    }
    if others.len() < num_options - 1 {
        return Err(skip(format!(
            "{} distractor rows, need {}",
            others.len(),
            num_options - 1
        )));
    }
    let mut rng = rng(rng_seed);
    let answer_row = *exact.choose(&mut rng).expect("non-empty");
    let mut options: Vec<(bool, &EsciRow)> = vec![(true, answer_row)];
    options.extend(
        index::sample(&mut rng, others.len(), num_options - 1)
            .into_iter()
            .map(|i| (false, others[i])),
    );
    options.shuffle(&mut rng);
    let answer = options.iter().position(|(is_answer, _)| *is_answer).expect("answer present");
    let titles: Vec<&str> = options.iter().map(|(_, r)| r.title.as_str()).collect();
    let prompt = prompts.render(29, &[("query", &rows[0].query), ("options", &option_lines(&titles))])?;
    Ok(EsciMcSample {
        sample: sample(29, TaskType::MultipleChoice, prompt, answer.to_string()),
        option_labels: options.iter().map(|(_, r)| r.esci_label).collect(),
    })
}

/// Ranks the rows as presented. Gold order is E > S > C > I with ties in
/// seeded random order.
pub fn build_esci_ranking(rows: &[EsciRow], rng_seed: u64, prompts: &Prompts) -> Result<TrainingSample, DatasetError> {
    let keys: Vec<u8> = rows.iter().map(|r| r.esci_label.priority()).collect();
    if distinct(&keys) < 2 {
        return Err(skip("group has a single label"));
    }
    let order = order_by_key(&keys, &mut rng(rng_seed));
    let titles: Vec<&str> = rows.iter().map(|r| r.title.as_str()).collect();
    let prompt = prompts.render(5, &[("query", &rows[0].query), ("options", &option_lines(&titles))])?;
    Ok(sample(5, TaskType::Ranking, prompt, join_ids(&order)))
}

/// Rating as a five-way choice; the answer index is `rating - 1`.
pub fn build_review_rating_mc(row: &ReviewRow, prompts: &Prompts) -> Result<TrainingSample, DatasetError> {
    if !(1..=5).contains(&row.rating) {
        return Err(DatasetError::InvalidInput(format!("rating {} outside 1..5", row.rating)));
    }
    let prompt = prompts.render(
        7,
        &[
            ("title", &row.product_title),
            ("review", &row.review_text.split_whitespace().collect::<Vec<_>>().join(" ")),
            ("options", &option_lines(&RATING_OPTIONS)),
        ],
    )?;
    Ok(sample(7, TaskType::MultipleChoice, prompt, (row.rating - 1).to_string()))
}

/// Three clicked titles hidden among `num_distractors` titles from the pool.
/// Pool entries that were clicked or purchased in this session are ignored.
pub fn build_session_retrieval(
    row: &SessionRow,
    distractor_pool: &[String],
    num_distractors: usize,
    rng_seed: u64,
    prompts: &Prompts,
) -> Result<TrainingSample, DatasetError> {
    let mut seen = BTreeSet::new();
    let clicks: Vec<&String> = row.clicked_titles.iter().filter(|t| seen.insert(t.as_str())).collect();
    if clicks.len() < 3 {
        return Err(skip(format!("{} distinct clicks, need 3", clicks.len())));
    }
    seen.insert(row.purchased_title.as_str());
    let mut pool: Vec<&String> = distractor_pool.iter().filter(|t| !seen.contains(t.as_str())).collect();
    pool.sort();
    pool.dedup();
    if pool.len() < num_distractors {
        return Err(skip(format!("pool has {} titles, need {num_distractors}", pool.len())));
    }
    let mut rng = rng(rng_seed);
    let mut candidates: Vec<(bool, &String)> = index::sample(&mut rng, clicks.len(), 3)
        .into_iter()
        .map(|i| (true, clicks[i]))
        .collect();
    candidates.extend(
        index::sample(&mut rng, pool.len(), num_distractors)
            .into_iter()
            .map(|i| (false, pool[i])),
    );
    candidates.shuffle(&mut rng);
    let answer: Vec<usize> = (0..candidates.len()).filter(|&i| candidates[i].0).collect();
    let titles: Vec<&str> = candidates.iter().map(|(_, t)| t.as_str()).collect();
    let prompt = prompts.render(
        31,
        &[("purchased", &row.purchased_title), ("options", &option_lines(&titles))],
    )?;
    Ok(sample(31, TaskType::Retrieval, prompt, join_ids(&answer)))
}

/// Reviews of one product, most positive first.
pub fn build_review_sentiment_ranking(
    rows: &[ReviewRow],
    rng_seed: u64,
    prompts: &Prompts,
) -> Result<TrainingSample, DatasetError> {
    let keys: Vec<Reverse<u8>> = rows.iter().map(|r| Reverse(r.rating)).collect();
    if distinct(&keys) < 2 {
        return Err(skip("all reviews share one rating"));
    }
    let order = order_by_key(&keys, &mut rng(rng_seed));
    let texts: Vec<&str> = rows.iter().map(|r| r.review_text.as_str()).collect();
    let prompt = prompts.render(28, &[("title", &rows[0].product_title), ("options", &option_lines(&texts))])?;
    Ok(sample(28, TaskType::Ranking, prompt, join_ids(&order)))
}

/// Queries for one product, best match first.
pub fn build_query_ranking(rows: &[EsciRow], rng_seed: u64, prompts: &Prompts) -> Result<TrainingSample, DatasetError> {
    let keys: Vec<u8> = rows.iter().map(|r| r.esci_label.priority()).collect();
    if distinct(&keys) < 2 {
        return Err(skip("group has a single label"));
    }
    let order = order_by_key(&keys, &mut rng(rng_seed));
    let queries: Vec<&str> = rows.iter().map(|r| r.query.as_str()).collect();
    let prompt = prompts.render(30, &[("title", &rows[0].title), ("options", &option_lines(&queries))])?;
    Ok(sample(30, TaskType::Ranking, prompt, join_ids(&order)))
}

/// The product's brand among brands of other products.
pub fn build_brand_mc(
    row: &EsciRow,
    brands: &[String],
    num_options: usize,
    rng_seed: u64,
    prompts: &Prompts,
) -> Result<TrainingSample, DatasetError> {
    if row.brand.trim().is_empty() {
        return Err(skip("product has no brand"));
    }
    let own = row.brand.to_lowercase();
    let mut others: Vec<&String> = brands.iter().filter(|b| b.to_lowercase() != own && !b.trim().is_empty()).collect();
    others.sort();
    others.dedup_by(|a, b| a.to_lowercase() == b.to_lowercase());
    if others.len() + 1 < num_options {
        return Err(skip(format!("{} other brands, need {}", others.len(), num_options - 1)));
    }
    let mut rng = rng(rng_seed);
    let mut options: Vec<(bool, &String)> = vec![(true, &row.brand)];
    options.extend(
        index::sample(&mut rng, others.len(), num_options - 1)
            .into_iter()
            .map(|i| (false, others[i])),
    );
    options.shuffle(&mut rng);
    let answer = options.iter().position(|(a, _)| *a).expect("answer present");
    let names: Vec<&str> = options.iter().map(|(_, b)| b.as_str()).collect();
    let prompt = prompts.render(32, &[("title", &row.title), ("options", &option_lines(&names))])?;
    Ok(sample(32, TaskType::MultipleChoice, prompt, answer.to_string()))
}

/// Relationship of one query/product pair, options in E, S, C, I order.
pub fn build_relation_mc(row: &EsciRow, prompts: &Prompts) -> Result<TrainingSample, DatasetError> {
    let names: Vec<&str> = EsciLabel::ALL.iter().map(|l| l.name()).collect();
    let answer = EsciLabel::ALL.iter().position(|l| *l == row.esci_label).expect("label listed");
    let prompt = prompts.render(
        33,
        &[("query", &row.query), ("title", &row.title), ("options", &option_lines(&names))],
    )?;
    Ok(sample(33, TaskType::MultipleChoice, prompt, answer.to_string()))
}

/// Mixed query/product pairs, most related first.
pub fn build_pair_ranking(rows: &[EsciRow], rng_seed: u64, prompts: &Prompts) -> Result<TrainingSample, DatasetError> {
    let keys: Vec<u8> = rows.iter().map(|r| r.esci_label.priority()).collect();
    if distinct(&keys) < 2 {
        return Err(skip("pairs share a single label"));
    }
    let order = order_by_key(&keys, &mut rng(rng_seed));
    let pairs: Vec<String> = rows.iter().map(|r| format!("query: {} | product: {}", r.query, r.title)).collect();
    let prompt = prompts.render(34, &[("options", &option_lines(&pairs))])?;
    Ok(sample(34, TaskType::Ranking, prompt, join_ids(&order)))
}

/// All exact matches for a query among shuffled candidates. Needs one to
/// three E rows so the answer fits a three-pick retrieval.
pub fn build_exact_retrieval(rows: &[EsciRow], rng_seed: u64, prompts: &Prompts) -> Result<TrainingSample, DatasetError> {
    let exact: Vec<&EsciRow> = rows.iter().filter(|r| r.esci_label == EsciLabel::E).collect();
    let others: Vec<&EsciRow> = rows.iter().filter(|r| r.esci_label != EsciLabel::E).collect();
    if exact.is_empty() || exact.len() > 3 {
        return Err(skip(format!("{} E rows, need 1 to 3", exact.len())));
    }
    if others.is_empty() {
        return Err(skip("no non-E rows"));
    }
    let mut rng = rng(rng_seed);
    let take = others.len().min(MAX_CANDIDATES - exact.len());
    let mut candidates: Vec<(bool, &EsciRow)> = exact.iter().map(|r| (true, *r)).collect();
    candidates.extend(
        index::sample(&mut rng, others.len(), take)
            .into_iter()
            .map(|i| (false, others[i])),
    );
    candidates.shuffle(&mut rng);
    let answer: Vec<usize> = (0..candidates.len()).filter(|&i| candidates[i].0).collect();
    let titles: Vec<&str> = candidates.iter().map(|(_, r)| r.title.as_str()).collect();
    let prompt = prompts.render(35, &[("query", &rows[0].query), ("options", &option_lines(&titles))])?;
    Ok(sample(35, TaskType::Retrieval, prompt, join_ids(&answer)))
}

/// Reviews of one product, most helpful first.
pub fn build_helpfulness_ranking(
    rows: &[ReviewRow],
    rng_seed: u64,
    prompts: &Prompts,
) -> Result<TrainingSample, DatasetError> {
    let keys: Vec<Reverse<u32>> = rows.iter().map(|r| Reverse(r.helpful_votes)).collect();
    if distinct(&keys) < 2 {
        return Err(skip("all reviews share one vote count"));
    }
    let order = order_by_key(&keys, &mut rng(rng_seed));
    let texts: Vec<&str> = rows.iter().map(|r| r.review_text.as_str()).collect();
    let prompt = prompts.render(36, &[("title", &rows[0].product_title), ("options", &option_lines(&texts))])?;
    Ok(sample(36, TaskType::Ranking, prompt, join_ids(&order)))
}
