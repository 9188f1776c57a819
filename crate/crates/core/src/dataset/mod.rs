//! Instruction-tuning samples built deterministically from seed records.
//!
//! Each recipe runs per group (a query, a product, a session, ...). Every
//! group gets its own generator seeded from `(seed, recipe id, group key)`,
//! so a group's sample does not depend on which other groups exist. Output is
//! ordered by recipe id, then group key.

pub mod builders;
pub mod prompts;
pub mod registry;
pub mod seed;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::splitmix64;
use crate::question::{write_jsonl, JsonlError};
use crate::task::TaskType;
use builders::*;
pub use prompts::Prompts;
use registry::{recipe, RecipeStatus, RECIPE_VERSION};
pub use seed::{load_esci, load_reviews, load_sessions, EsciLabel, EsciRow, ReviewRow, SeedRecord, SessionRow};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}:{line}: {reason}")]
    InvalidRecord { path: String, line: usize, reason: String },
    #[error("prompts: {0}")]
    Prompts(String),
    #[error("recipe {0} is not in the registry")]
    UnknownRecipe(u32),
    #[error("recipe {0} requires external generator")]
    RequiresGenerator(u32),
    #[error("recipe {0}: source/task definition unavailable")]
    SourceUnavailable(u32),
    #[error("recipe {recipe} needs {source_name} seed data")]
    MissingSeedData { recipe: u32, source_name: &'static str },
    #[error("group skipped: {0}")]
    Skip(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("recipe {recipe}, group `{key}`: {source}")]
    Group {
        recipe: u32,
        key: String,
        source: Box<DatasetError>,
    },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Loss is computed on the answer tokens only.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMask {
    #[default]
    AnswerOnly,
}

/// One line of the training JSONL. The loss mask is recorded once in the
/// sidecar metadata instead of on every line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub prompt: String,
    pub answer: String,
    pub task_type: TaskType,
    pub recipe_id: u32,
    #[serde(skip)]
    pub loss_mask: LossMask,
}

#[derive(Debug, Clone, Default)]
pub struct SeedData {
    pub esci: Option<Vec<EsciRow>>,
    pub reviews: Option<Vec<ReviewRow>>,
    pub sessions: Option<Vec<SessionRow>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildConfig {
    pub recipes: Vec<u32>,
    pub seed: u64,
    pub num_options: usize,
    pub session_distractors: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            recipes: registry::implemented_ids(),
            seed: 42,
            num_options: 4,
            session_distractors: 5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildSummary {
    pub samples: BTreeMap<u32, usize>,
    pub skipped_groups: BTreeMap<u32, usize>,
}

/// Contents of `<output>.meta.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub rng: String,
    pub recipe_version: String,
    pub prompts_version: String,
    pub loss_mask: LossMask,
    pub recipes: Vec<u32>,
    pub num_options: usize,
    pub session_distractors: usize,
    pub summary: BuildSummary,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Generator seed for one group of one recipe.
pub fn group_seed(seed: u64, recipe_id: u32, key: &str) -> u64 {
    splitmix64(seed ^ splitmix64(u64::from(recipe_id) ^ splitmix64(fnv1a(key.as_bytes()))))
}

fn group_by<T: Clone>(rows: &[T], key: impl Fn(&T) -> String) -> Vec<(String, Vec<T>)> {
    let mut map: BTreeMap<String, Vec<T>> = BTreeMap::new();
    for r in rows {
        map.entry(key(r)).or_default().push(r.clone());
    }
    map.into_iter().collect()
}

fn singletons<T: Clone>(rows: &[T]) -> Vec<(String, Vec<T>)> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| (format!("{i:08}"), vec![r.clone()]))
        .collect()
}

/// Caps a group at `MAX_CANDIDATES` rows and shuffles presentation order.
fn present<T: Clone>(rows: &[T], seed: u64) -> Vec<T> {
    let mut rng = rng(splitmix64(seed ^ 0x0050_5245_5345_4e54));
    let mut rows = rows.to_vec();
    rows.shuffle(&mut rng);
    rows.truncate(MAX_CANDIDATES);
    rows
}

fn require<'a, T>(data: &'a Option<Vec<T>>, recipe: u32, source_name: &'static str) -> Result<&'a [T], DatasetError> {
    data.as_deref()
        .ok_or(DatasetError::MissingSeedData { recipe, source_name })
}

type GroupResult = Result<TrainingSample, DatasetError>;

fn run_groups<T: Clone + Send + Sync>(
    recipe_id: u32,
    seed: u64,
    groups: Vec<(String, Vec<T>)>,
    build: impl Fn(&[T], u64) -> GroupResult + Send + Sync,
) -> Vec<(String, GroupResult)> {
    groups
        .into_par_iter()
        .map(|(key, rows)| {
            let s = group_seed(seed, recipe_id, &key);
            let out = build(&rows, s);
            (key, out)
        })
        .collect()
}

fn run_recipe(
    id: u32,
    data: &SeedData,
    cfg: &BuildConfig,
    prompts: &Prompts,
) -> Result<Vec<(String, GroupResult)>, DatasetError> {
    let info = recipe(id).ok_or(DatasetError::UnknownRecipe(id))?;
    match info.status {
        RecipeStatus::RequiresGenerator => return Err(DatasetError::RequiresGenerator(id)),
        RecipeStatus::SourceUnavailable => return Err(DatasetError::SourceUnavailable(id)),
        RecipeStatus::Implemented => {}
    }
    let seed = cfg.seed;
    Ok(match id {
        5 => {
            let esci = require(&data.esci, id, "esci")?;
            run_groups(id, seed, group_by(esci, |r| r.query.clone()), |rows, s| {
                build_esci_ranking(&present(rows, s), s, prompts)
            })
        }
        7 => {
            let reviews = require(&data.reviews, id, "reviews")?;
            run_groups(id, seed, singletons(reviews), |rows, _| build_review_rating_mc(&rows[0], prompts))
        }
        28 => {
            let reviews = require(&data.reviews, id, "reviews")?;
            run_groups(id, seed, group_by(reviews, |r| r.product_title.clone()), |rows, s| {
                build_review_sentiment_ranking(&present(rows, s), s, prompts)
            })
        }
        29 => {
            let esci = require(&data.esci, id, "esci")?;
            run_groups(id, seed, group_by(esci, |r| r.query.clone()), |rows, s| {
                build_esci_mc(rows, s, cfg.num_options, prompts).map(|m| m.sample)
            })
        }
        30 => {
            let esci = require(&data.esci, id, "esci")?;
            run_groups(id, seed, group_by(esci, |r| r.product_id.clone()), |rows, s| {
                build_query_ranking(&present(rows, s), s, prompts)
            })
        }
        31 => {
            let sessions = require(&data.sessions, id, "sessions")?;
            let mut pool: Vec<String> = sessions
                .iter()
                .flat_map(|r| r.clicked_titles.iter().chain(std::iter::once(&r.purchased_title)))
                .cloned()
                .collect();
            pool.sort();
            pool.dedup();
            run_groups(id, seed, singletons(sessions), |rows, s| {
                build_session_retrieval(&rows[0], &pool, cfg.session_distractors, s, prompts)
            })
        }
        32 => {
            let esci = require(&data.esci, id, "esci")?;
            let mut brands: Vec<String> = esci.iter().map(|r| r.brand.clone()).collect();
            brands.sort();
            brands.dedup();
            run_groups(id, seed, group_by(esci, |r| r.product_id.clone()), |rows, s| {
                build_brand_mc(&rows[0], &brands, cfg.num_options, s, prompts)
            })
        }
        33 => {
            let esci = require(&data.esci, id, "esci")?;
            run_groups(
                id,
                seed,
                group_by(esci, |r| format!("{}\u{1f}{}", r.query, r.product_id)),
                |rows, _| build_relation_mc(&rows[0], prompts),
            )
        }
        34 => {
            let esci = require(&data.esci, id, "esci")?;
            let mut rows = esci.to_vec();
            rows.sort_by(|a, b| (&a.query, &a.product_id).cmp(&(&b.query, &b.product_id)));
            rows.shuffle(&mut rng(group_seed(seed, id, "pairs")));
            let groups = rows
                .chunks(5)
                .enumerate()
                .map(|(i, c)| (format!("{i:08}"), c.to_vec()))
                .collect();
            run_groups(id, seed, groups, |rows, s| build_pair_ranking(rows, s, prompts))
        }
        35 => {
            let esci = require(&data.esci, id, "esci")?;
            run_groups(id, seed, group_by(esci, |r| r.query.clone()), |rows, s| {
                build_exact_retrieval(rows, s, prompts)
            })
        }
        36 => {
            let reviews = require(&data.reviews, id, "reviews")?;
            run_groups(id, seed, group_by(reviews, |r| r.product_title.clone()), |rows, s| {
                build_helpfulness_ranking(&present(rows, s), s, prompts)
            })
        }
        _ => unreachable!("registry marks recipe {id} implemented without a builder"),
    })
}

/// Builds every requested recipe in ascending id order. Groups that cannot
/// yield a sample are counted in the summary; any other error aborts.
pub fn build_dataset(
    data: &SeedData,
    cfg: &BuildConfig,
    prompts: &Prompts,
) -> Result<(Vec<TrainingSample>, BuildSummary), DatasetError> {
    let mut ids = cfg.recipes.clone();
    ids.sort_unstable();
    ids.dedup();
    let mut samples = Vec::new();
    let mut summary = BuildSummary::default();
    for id in ids {
        let mut built = 0;
        let mut skipped = 0;
        for (key, result) in run_recipe(id, data, cfg, prompts)? {
            match result {
                Ok(s) => {
                    samples.push(s);
                    built += 1;
                }
                Err(DatasetError::Skip(reason)) => {
                    log::debug!("recipe {id}, group `{key}` skipped: {reason}");
                    skipped += 1;
                }
                Err(e) => {
                    return Err(DatasetError::Group {
                        recipe: id,
                        key,
                        source: Box::new(e),
                    })
                }
            }
        }
        log::info!("recipe {id}: {built} samples, {skipped} groups skipped");
        summary.samples.insert(id, built);
        summary.skipped_groups.insert(id, skipped);
    }
    Ok((samples, summary))
}

/// One JSON object per line with `prompt`, `answer`, `task_type` and
/// `recipe_id`.
pub fn emit_jsonl(samples: &[TrainingSample], path: impl AsRef<Path>) -> Result<(), DatasetError> {
    Ok(write_jsonl(path, samples)?)
}

pub fn meta_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

impl DatasetMeta {
    pub fn new(cfg: &BuildConfig, prompts: &Prompts, summary: BuildSummary) -> Self {
        let mut recipes = cfg.recipes.clone();
        recipes.sort_unstable();
        recipes.dedup();
        Self {
            seed: cfg.seed,
            rng: "pcg64".into(),
            recipe_version: RECIPE_VERSION.into(),
            prompts_version: prompts.version.clone(),
            loss_mask: LossMask::AnswerOnly,
            recipes,
            num_options: cfg.num_options,
            session_distractors: cfg.session_distractors,
            summary,
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("meta serializes");
        text.push('\n');
        fs::write(path, text).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}
