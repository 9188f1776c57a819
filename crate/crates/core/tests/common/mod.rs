//! Independent reference implementations used by the property suites and
//! the acceptance target. They favour obviousness over speed.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use forge_core::adapter::{LoraAdapter, LoraFactors};
use forge_core::archive::TensorArchive;
use forge_core::matrix::Matrix;
use forge_core::metrics::TrackScores;
use rand::Rng;
use rand_pcg::Pcg64;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

/// Uniform entries in `[-amp, amp)`.
pub fn rand_matrix(rng: &mut Pcg64, rows: usize, cols: usize, amp: f32) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-amp..amp)).collect()).unwrap()
}

pub fn rand_factors(rng: &mut Pcg64, d_out: usize, d_in: usize, rank: usize) -> LoraFactors {
    LoraFactors::new(rand_matrix(rng, d_out, rank, 0.25), rand_matrix(rng, rank, d_in, 0.25)).unwrap()
}

/// A base archive with one rank-2 tensor `w` and a random adapter on it.
pub fn toy_base_and_adapter(rng: &mut Pcg64, name: &str) -> (TensorArchive, LoraAdapter) {
    let d_out = rng.random_range(2..12);
    let d_in = rng.random_range(2..12);
    let rank = rng.random_range(1..5);
    let mut base = TensorArchive::new();
    base.insert("w", rand_matrix(rng, d_out, d_in, 1.0).to_tensor());
    let factors = rand_factors(rng, d_out, d_in, rank);
    let adapter = LoraAdapter::new(name, rank, rank as f32 * 2.0).with_target("w", factors);
    (base, adapter)
}

/// `base + Σ coef_i · A_i·B_i` in f64 with explicit loops.
pub fn dense_merge_oracle(base: &Matrix, terms: &[(&LoraFactors, f64)]) -> Vec<f64> {
    let (m, n) = base.shape();
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut v = base.get(i, j) as f64;
            for (f, coef) in terms {
                let mut acc = 0.0f64;
                for k in 0..f.rank() {
                    acc += f.a.get(i, k) as f64 * f.b.get(k, j) as f64;
                }
                v += coef * acc;
            }
            out[i * n + j] = v;
        }
    }
    out
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - y).abs()).fold(0.0, f64::max)
}

// ---- ranking ---------------------------------------------------------------

fn dcg(order: &[usize], grade: &dyn Fn(usize) -> f64) -> f64 {
    let mut total = 0.0;
    for (pos, id) in order.iter().enumerate() {
        total += grade(*id) / (pos as f64 + 2.0).log2();
    }
    total
}

pub fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

/// Ideal DCG as the best DCG over every ordering of the graded ids.
pub fn ideal_dcg_oracle(grades: &BTreeMap<usize, f64>) -> f64 {
    let grade = |id: usize| grades.get(&id).copied().unwrap_or(0.0);
    let ids: Vec<usize> = grades.keys().copied().collect();
    permutations(&ids).iter().map(|p| dcg(p, &grade)).fold(0.0, f64::max)
}

/// nDCG from the definition, given the ideal DCG. Repeated ids keep their
/// position but gain nothing.
pub fn ndcg_given_ideal(pred: &[usize], grades: &BTreeMap<usize, f64>, ideal: f64) -> f64 {
    if ideal == 0.0 {
        return 1.0;
    }
    let mut total = 0.0;
    let mut used = Vec::new();
    for (pos, id) in pred.iter().enumerate() {
        if used.contains(id) {
            continue;
        }
        used.push(*id);
        total += grades.get(id).copied().unwrap_or(0.0) / (pos as f64 + 2.0).log2();
    }
    (total / ideal).min(1.0)
}

pub fn ndcg_oracle(pred: &[usize], grades: &BTreeMap<usize, f64>) -> f64 {
    ndcg_given_ideal(pred, grades, ideal_dcg_oracle(grades))
}

// ---- sets and spans --------------------------------------------------------

fn norm(s: &str) -> String {
    s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Greedy one-to-one matching of predicted spans against gold spans.
pub fn micro_f1_oracle(pred: &[String], gold: &[String]) -> f64 {
    let pred: Vec<String> = pred.iter().map(|s| norm(s)).filter(|s| !s.is_empty()).collect();
    let gold: Vec<String> = gold.iter().map(|s| norm(s)).filter(|s| !s.is_empty()).collect();
    let mut used = vec![false; gold.len()];
    let mut tp = 0;
    for p in &pred {
        if let Some(j) = (0..gold.len()).find(|&j| !used[j] && gold[j] == *p) {
            used[j] = true;
            tp += 1;
        }
    }
    let fp = pred.len() - tp;
    let fn_ = gold.len() - tp;
    if tp + fp + fn_ == 0 {
        return 1.0;
    }
    let precision = if pred.is_empty() { 0.0 } else { tp as f64 / pred.len() as f64 };
    let recall = if gold.is_empty() { 0.0 } else { tp as f64 / gold.len() as f64 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn hit_at_3_oracle(pred: &[usize], gold: &[usize]) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    let mut picks: Vec<usize> = Vec::new();
    for id in pred {
        if picks.len() == 3 {
            break;
        }
        if !picks.contains(id) {
            picks.push(*id);
        }
    }
    let hits = picks.iter().filter(|id| gold.contains(id)).count();
    hits as f64 / gold.len().min(3) as f64
}

// ---- text ------------------------------------------------------------------

fn is_subsequence(needle: &[&String], hay: &[String]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|n| it.any(|h| h == *n))
}

/// Longest common subsequence by trying every subset of `a`.
pub fn lcs_brute(a: &[String], b: &[String]) -> usize {
    assert!(a.len() <= 16, "brute-force LCS is exponential");
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let len = mask.count_ones() as usize;
        if len <= best {
            continue;
        }
        let pick: Vec<&String> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| &a[i]).collect();
        if is_subsequence(&pick, b) {
            best = len;
        }
    }
    best
}

pub fn rouge_l_oracle(pred: &[String], reference: &[String]) -> f64 {
    if pred.is_empty() && reference.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_brute(pred, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / pred.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

fn count_ngram(tokens: &[String], gram: &[String]) -> usize {
    if tokens.len() < gram.len() {
        return 0;
    }
    (0..=tokens.len() - gram.len())
        .filter(|&i| tokens[i..i + gram.len()] == *gram)
        .count()
}

/// Sentence BLEU-4 with add-one smoothing for orders 2..4 and the standard
/// brevity penalty, by direct counting.
pub fn bleu_oracle(pred: &[String], reference: &[String]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4usize {
        let mut distinct: Vec<&[String]> = Vec::new();
        if pred.len() >= n {
            for i in 0..=pred.len() - n {
                let g = &pred[i..i + n];
                if !distinct.contains(&g) {
                    distinct.push(g);
                }
            }
        }
        let clipped: usize = distinct
            .iter()
            .map(|g| count_ngram(pred, g).min(count_ngram(reference, g)))
            .sum();
        let total = if pred.len() >= n { pred.len() - n + 1 } else { 0 };
        let precision = if n == 1 {
            clipped as f64 / total as f64
        } else {
            (clipped as f64 + 1.0) / (total as f64 + 1.0)
        };
        if precision == 0.0 {
            return 0.0;
        }
        log_sum += precision.ln();
    }
    let c = pred.len() as f64;
    let r = reference.len() as f64;
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    (bp * (log_sum / 4.0).exp()).min(1.0)
}

// ---- leaderboard -----------------------------------------------------------

/// Per-track scores of the leaderboard fixture.
pub fn leaderboard() -> BTreeMap<String, TrackScores> {
    let text = std::fs::read_to_string(fixture("leaderboard.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// Competition rank (ties share the better rank) by counting strictly
/// better entrants, summed over tracks.
pub fn rank_sum_oracle(systems: &BTreeMap<String, TrackScores>, name: &str) -> u32 {
    let mut total = 0;
    for (track, score) in &systems[name] {
        let better = systems
            .values()
            .filter(|t| t.get(track).is_some_and(|s| s > score))
            .count() as u32;
        total += better + 1;
    }
    total
}

// ---- corpora ---------------------------------------------------------------

/// Fixture ESCI rows grouped by query, in first-seen order.
pub fn esci_groups() -> Vec<Vec<forge_core::dataset::seed::EsciRow>> {
    let rows = forge_core::dataset::seed::load_esci(fixture("esci.csv")).unwrap();
    let mut groups: Vec<Vec<forge_core::dataset::EsciRow>> = Vec::new();
    for row in rows {
        match groups.iter_mut().find(|g| g[0].query == row.query) {
            Some(g) => g.push(row),
            None => groups.push(vec![row]),
        }
    }
    groups
}

/// Rendered prompts of `n` routed synthetic questions.
pub fn synthetic_prompts(n: usize, seed: u64) -> Vec<String> {
    let router = forge_core::router::Router::default();
    forge_core::pipeline::synthetic_questions(n, 5, seed)
        .into_iter()
        .map(|mut q| {
            q.task_type = Some(router.route(&q));
            forge_core::router::build_prompt(&q).unwrap().render()
        })
        .collect()
}

pub fn seed_data() -> forge_core::dataset::SeedData {
    use forge_core::dataset::seed::{load_esci, load_reviews, load_sessions};
    forge_core::dataset::SeedData {
        esci: Some(load_esci(fixture("esci.csv")).unwrap()),
        reviews: Some(load_reviews(fixture("reviews.csv")).unwrap()),
        sessions: Some(load_sessions(fixture("sessions.csv")).unwrap()),
    }
}
