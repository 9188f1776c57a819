//! End-to-end run: merge → quantize (both optional) → route → decode →
//! parse → evaluate. Every stage reads and writes files so any one of them
//! can be re-run on its own.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{execute_merge, LoraAdapter, MergePlan, MergeStep};
use crate::archive::{read_archive, write_archive};
use crate::dataset::builders::rng;
use crate::decode::{greedy_decode, Throughput, ToyLM, ToyTokenizer};
use crate::logits::{ChainConfig, LogitsProcessorChain};
use crate::metrics::{score_answer, GenerationMetric, GoldAnswer, MetricOptions, MetricReport, TrackScores};
use crate::parser::{parse, AnswerRecord, ParseOptions};
use crate::quant::{quantize_archive, ErrorReport, QuantConfig};
use crate::question::{read_questions, write_jsonl, Question};
use crate::router::{build_prompt, Router};
use crate::task::TaskType;

pub const DEFAULT_MAX_NEW: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Merge,
    Quantize,
    Route,
    Decode,
    Evaluate,
    Write,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Merge => "merge",
            Stage::Quantize => "quantize",
            Stage::Route => "route",
            Stage::Decode => "decode",
            Stage::Evaluate => "evaluate",
            Stage::Write => "write",
        }
    }
}

#[derive(Debug, Error)]
#[error("{} stage failed: {message}", stage.name())]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: Stage, err: impl ToString) -> Self {
        Self {
            stage,
            message: err.to_string(),
        }
    }

    /// 2 for configuration errors, 3 for failures inside a stage.
    pub fn exit_code(&self) -> i32 {
        match self.stage {
            Stage::Config => 2,
            _ => 3,
        }
    }
}

fn default_max_new() -> usize {
    DEFAULT_MAX_NEW
}

fn default_group_size() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterRef {
    pub path: PathBuf,
    pub weight: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_scale: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeStageConfig {
    pub base: PathBuf,
    pub adapters: Vec<AdapterRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wise_ft_alpha: Option<f32>,
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizeStageConfig {
    /// Defaults to the merge output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    #[serde(default)]
    pub symmetric: bool,
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub questions: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_new")]
    pub max_new: usize,
    #[serde(default)]
    pub chain: ChainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub router_rules: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merge: Option<MergeStageConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantize: Option<QuantizeStageConfig>,
    #[serde(default)]
    pub parse: ParseOptions,
    #[serde(default)]
    pub metrics: MetricOptions,
    /// Other systems' per-track scores; when present the report carries a
    /// rank table and this run's rank sum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leaderboard: Option<BTreeMap<String, TrackScores>>,
}

impl PipelineConfig {
    pub fn new(questions: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            questions: questions.into(),
            output_dir: output_dir.into(),
            seed: 0,
            max_new: DEFAULT_MAX_NEW,
            chain: ChainConfig::default(),
            router_rules: None,
            merge: None,
            quantize: None,
            parse: ParseOptions::default(),
            metrics: MetricOptions::default(),
            leaderboard: None,
        }
    }

    /// Reads a JSON or TOML (by extension) config. Relative paths are taken
    /// relative to the config file's directory.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let cfg_err = |e: String| PipelineError::new(Stage::Config, format!("{}: {e}", path.display()));
        let text = fs::read_to_string(path).map_err(|e| cfg_err(e.to_string()))?;
        let mut cfg: PipelineConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).map_err(|e| cfg_err(e.to_string()))?,
            _ => serde_json::from_str(&text).map_err(|e| cfg_err(e.to_string()))?,
        };
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.questions);
        fix(&mut self.output_dir);
        if let Some(r) = &mut self.router_rules {
            fix(r);
        }
        if let Some(m) = &mut self.merge {
            fix(&mut m.base);
            fix(&mut m.output);
            m.adapters.iter_mut().for_each(|a| fix(&mut a.path));
        }
        if let Some(q) = &mut self.quantize {
            if let Some(i) = &mut q.input {
                fix(i);
            }
            fix(&mut q.output);
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::new(Stage::Config, m));
        if self.max_new == 0 {
            return bad("max_new must be at least 1".into());
        }
        self.chain.validate().map_err(|e| PipelineError::new(Stage::Config, e))?;
        if let Some(q) = &self.quantize {
            if q.input.is_none() && self.merge.is_none() {
                return bad("quantize needs an input when no merge stage is configured".into());
            }
            let qc = QuantConfig {
                symmetric: q.symmetric,
                ..QuantConfig::with_group_size(q.group_size)
            };
            qc.validate().map_err(|e| PipelineError::new(Stage::Config, e))?;
        }
        if let Some(m) = &self.merge {
            if m.adapters.is_empty() {
                return bad("merge stage lists no adapters".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub report: MetricReport,
    pub answers: Vec<AnswerRecord>,
    pub throughput: Throughput,
    pub quantization: Option<BTreeMap<String, ErrorReport>>,
}

/// Written next to the report; kept apart so the report stays byte-stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub questions: usize,
    pub seconds: f64,
    pub questions_per_minute: f64,
}

pub fn run_merge(stage: &MergeStageConfig) -> Result<(), PipelineError> {
    let err = |e: &dyn ToString| PipelineError::new(Stage::Merge, e.to_string());
    let base = read_archive(&stage.base).map_err(|e| err(&e))?;
    let mut plan = MergePlan::new(base);
    for a in &stage.adapters {
        let ar = read_archive(&a.path).map_err(|e| err(&e))?;
        let adapter = LoraAdapter::from_archive(&ar).map_err(|e| err(&format!("{}: {e}", a.path.display())))?;
        plan.steps.push(MergeStep {
            lora_scale_override: a.lora_scale,
            ..MergeStep::new(adapter, a.weight)
        });
    }
    plan.wise_ft_alpha = stage.wise_ft_alpha;
    let merged = execute_merge(&plan).map_err(|e| err(&e))?;
    write_archive(&merged, &stage.output).map_err(|e| err(&e))
}

pub fn run_quantize(
    input: &Path,
    output: &Path,
    config: &QuantConfig,
) -> Result<BTreeMap<String, ErrorReport>, PipelineError> {
    let err = |e: &dyn ToString| PipelineError::new(Stage::Quantize, e.to_string());
    let ar = read_archive(input).map_err(|e| err(&e))?;
    let (q, reports) = quantize_archive(&ar, config).map_err(|e| err(&e))?;
    write_archive(&q, output).map_err(|e| err(&e))?;
    Ok(reports)
}

/// Fills in the task type of every question that has none.
pub fn route_questions(router: &Router, questions: &mut [Question]) {
    for q in questions.iter_mut() {
        if q.task_type.is_none() {
            q.task_type = Some(router.route(q));
        }
    }
}

/// Greedy-decodes and parses every question. Questions must be routed.
pub fn decode_questions(
    questions: &[Question],
    chain: &ChainConfig,
    seed: u64,
    max_new: usize,
    parse_opts: &ParseOptions,
) -> Result<Vec<AnswerRecord>, PipelineError> {
    let err = |e: &dyn ToString| PipelineError::new(Stage::Decode, e.to_string());
    let prompts: Vec<(TaskType, String)> = questions
        .iter()
        .map(|q| build_prompt(q).map(|p| (q.task_type.expect("routed"), p.render())))
        .collect::<Result<_, _>>()
        .map_err(|e| err(&e))?;
    let tokenizer = ToyTokenizer::from_corpus(prompts.iter().map(|(_, p)| p.as_str()));
    let chains: HashMap<TaskType, LogitsProcessorChain> =
        chain.build_all(tokenizer.vocab()).map_err(|e| PipelineError::new(Stage::Config, e))?;
    let lm = ToyLM::new(seed);
    questions
        .par_iter()
        .zip(prompts.par_iter())
        .map(|(q, (task, prompt))| {
            let out = greedy_decode(&lm, &tokenizer, prompt, &chains[task], max_new)
                .map_err(|e| err(&format!("question `{}`: {e}", q.id)))?;
            let outcome = parse(*task, &out.text, q.num_candidates, parse_opts);
            Ok(AnswerRecord::from_outcome(q.id.clone(), out.text, outcome))
        })
        .collect()
}

/// Scores answers against gold. Questions without gold are left out;
/// questions without an answer score 0.
pub fn evaluate(
    questions: &[Question],
    answers: &[AnswerRecord],
    opts: &MetricOptions,
) -> Result<MetricReport, PipelineError> {
    let by_id: HashMap<&str, &AnswerRecord> = answers.iter().map(|a| (a.id.as_str(), a)).collect();
    let mut scores = Vec::with_capacity(questions.len());
    let mut ungraded = 0;
    for q in questions {
        let Some(gold) = &q.gold else {
            ungraded += 1;
            continue;
        };
        let parsed = by_id.get(q.id.as_str()).and_then(|a| a.parsed.as_ref());
        if !by_id.contains_key(q.id.as_str()) {
            log::warn!("no answer for question `{}`", q.id);
        }
        scores.push((q.id.clone(), q.track, score_answer(parsed, gold, opts)));
    }
    if ungraded > 0 {
        log::warn!("{ungraded} questions have no gold answer and were not scored");
    }
    MetricReport::from_scores(scores).map_err(|e| PipelineError::new(Stage::Evaluate, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| PipelineError::new(Stage::Write, format!("{}: {e}", path.display())))
}

/// Runs every configured stage and writes `answers.jsonl`, `report.json` and
/// `timing.json` into the output directory.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineRun, PipelineError> {
    cfg.validate()?;
    if let Some(m) = &cfg.merge {
        run_merge(m)?;
    }
    let quantization = match &cfg.quantize {
        Some(q) => {
            let input = q
                .input
                .clone()
                .or_else(|| cfg.merge.as_ref().map(|m| m.output.clone()))
                .expect("validated");
            let qc = QuantConfig {
                symmetric: q.symmetric,
                ..QuantConfig::with_group_size(q.group_size)
            };
            Some(run_quantize(&input, &q.output, &qc)?)
        }
        None => None,
    };

    let router = match &cfg.router_rules {
        Some(p) => Router::from_file(p).map_err(|e| PipelineError::new(Stage::Config, e))?,
        None => Router::default(),
    };
    let mut questions = read_questions(&cfg.questions).map_err(|e| PipelineError::new(Stage::Route, e))?;
    let started = Instant::now();
    route_questions(&router, &mut questions);
    let answers = decode_questions(&questions, &cfg.chain, cfg.seed, cfg.max_new, &cfg.parse)?;
    let mut report = evaluate(&questions, &answers, &cfg.metrics)?;
    let throughput = Throughput {
        questions: questions.len(),
        elapsed: started.elapsed(),
    };
    report.metadata.insert("seed".into(), cfg.seed.to_string());
    report.metadata.insert("router_version".into(), router.version().to_string());
    if let Some(board) = &cfg.leaderboard {
        report.compare_with("this_run", board.clone());
    }

    fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| PipelineError::new(Stage::Write, format!("{}: {e}", cfg.output_dir.display())))?;
    write_jsonl(cfg.output_dir.join("answers.jsonl"), &answers).map_err(|e| PipelineError::new(Stage::Write, e))?;
    write_json(&cfg.output_dir.join("report.json"), &report)?;
    write_json(
        &cfg.output_dir.join("timing.json"),
        &Timing {
            questions: throughput.questions,
            seconds: throughput.elapsed.as_secs_f64(),
            questions_per_minute: throughput.questions_per_minute(),
        },
    )?;
    Ok(PipelineRun {
        report,
        answers,
        throughput,
        quantization,
    })
}

const PRODUCTS: [&str; 12] = [
    "trail running shoes",
    "wool hiking socks",
    "insulated water bottle",
    "ceramic coffee mug",
    "led desk lamp",
    "foam yoga mat",
    "canvas backpack",
    "silicone phone case",
    "cotton bath towel",
    "steel chef knife",
    "bamboo cutting board",
    "wireless earbuds",
];
const BRANDS: [&str; 8] = ["Northpeak", "Lumora", "Kestrel", "Oakmont", "Veloce", "Tidewell", "Ferncliff", "Brightfield"];

fn numbered(items: &[&str]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{i}. {s}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Deterministic benchmark-shaped questions cycling through the five task
/// types, each with gold. Used for throughput runs.
pub fn synthetic_questions(n: usize, track: u8, seed: u64) -> Vec<Question> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let task = TaskType::ALL[i % TaskType::ALL.len()];
            let picks: Vec<&str> = index::sample(&mut r, PRODUCTS.len(), 5)
                .into_iter()
                .map(|j| PRODUCTS[j])
                .collect();
            let mut q = Question::new(format!("syn-{i:06}"), String::new(), track);
            let (instruction, gold, candidates) = match task {
                TaskType::MultipleChoice => {
                    let answer = r.random_range(0..4);
                    (
                        format!(
                            "Which product best matches the query \"{}\"? Select one option.\n{}\nAnswer with the option number only.",
                            picks[answer],
                            numbered(&picks[..4])
                        ),
                        GoldAnswer::Choice { index: answer },
                        Some(4),
                    )
                }
                TaskType::Ranking => {
                    let mut grades: Vec<f64> = vec![3.0, 2.0, 1.0, 0.0, 0.0];
                    grades.shuffle(&mut r);
                    (
                        format!(
                            "Rank the following products by relevance to the query \"{}\".\n{}\nAnswer with the product numbers separated by commas.",
                            picks[0],
                            numbered(&picks)
                        ),
                        GoldAnswer::Ranking {
                            grades: grades.into_iter().enumerate().collect(),
                        },
                        Some(5),
                    )
                }
                TaskType::NamedEntityRecognition => {
                    let brand = *BRANDS.choose(&mut r).expect("non-empty");
                    (
                        format!(
                            "Extract the brand names mentioned in the text.\nText: I ordered the {} from {brand} and it arrived in two days.",
                            picks[0]
                        ),
                        GoldAnswer::Entities {
                            spans: vec![brand.to_string()],
                        },
                        None,
                    )
                }
                TaskType::Retrieval => {
                    let gold: Vec<usize> = index::sample(&mut r, 5, 3).into_iter().collect();
                    (
                        format!(
                            "A customer bought {}. Select 3 products from the list below that the customer would also buy.\n{}\nAnswer with three numbers separated by commas.",
                            picks[0],
                            numbered(&picks)
                        ),
                        GoldAnswer::Retrieval {
                            ids: gold.into_iter().collect(),
                        },
                        Some(5),
                    )
                }
                TaskType::Generation => (
                    format!("Write a short product description for the {}.", picks[0]),
                    GoldAnswer::Text {
                        reference: format!("A durable {} for everyday use.", picks[0]),
                        metric: GenerationMetric::RougeL,
                    },
                    None,
                ),
            };
            q.instruction = instruction;
            q.gold = Some(gold);
            q.num_candidates = candidates;
            q
        })
        .collect()
}
