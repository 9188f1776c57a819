//! Heuristic task-type routing and system/user prompt construction.
//!
//! Rules are data: an ordered list in which the first matching rule wins and
//! generation is the fallback. The default rule set ships in
//! `router_rules.json`; bump its `version` whenever a rule changes.

use std::fs;
use std::path::Path;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::question::Question;
use crate::task::TaskType;

pub const SYSTEM_TEMPLATE_PREFIX: &str = "You are a helpful online shopping assistant. Your task is ";
const DEFAULT_RULES: &str = include_str!("router_rules.json");

#[derive(Debug, Error)]
pub enum RouterError {
    #[error("question `{0}` has no task type; route it first")]
    Unrouted(String),
    #[error("rule set: {0}")]
    BadRules(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    pub task_type: TaskType,
    /// The text must contain a list of numbered or lettered option lines.
    #[serde(default)]
    pub requires_options: bool,
    /// At least one must match (case-insensitive); empty means always.
    #[serde(default)]
    pub any_patterns: Vec<String>,
    /// None may match.
    #[serde(default)]
    pub none_patterns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSetSpec {
    pub version: String,
    pub option_line_pattern: String,
    pub min_option_lines: usize,
    pub rules: Vec<RuleSpec>,
}

#[derive(Debug, Clone)]
struct Rule {
    task_type: TaskType,
    requires_options: bool,
    any: Vec<Regex>,
    none: Vec<Regex>,
}

/// Compiled rule set.
#[derive(Debug, Clone)]
pub struct Router {
    version: String,
    option_line: Regex,
    min_option_lines: usize,
    rules: Vec<Rule>,
}

fn compile(p: &str) -> Result<Regex, RouterError> {
    RegexBuilder::new(p)
        .case_insensitive(true)
        .build()
        .map_err(|e| RouterError::BadRules(format!("pattern `{p}`: {e}")))
}

impl Router {
    pub fn from_spec(spec: &RuleSetSpec) -> Result<Self, RouterError> {
        let rules = spec
            .rules
            .iter()
            .map(|r| {
                Ok(Rule {
                    task_type: r.task_type,
                    requires_options: r.requires_options,
                    any: r.any_patterns.iter().map(|p| compile(p)).collect::<Result<_, _>>()?,
                    none: r.none_patterns.iter().map(|p| compile(p)).collect::<Result<_, _>>()?,
                })
            })
            .collect::<Result<_, RouterError>>()?;
        Ok(Self {
            version: spec.version.clone(),
            option_line: compile(&spec.option_line_pattern)?,
            min_option_lines: spec.min_option_lines,
            rules,
        })
    }

    pub fn from_json(json: &str) -> Result<Self, RouterError> {
        let spec: RuleSetSpec =
            serde_json::from_str(json).map_err(|e| RouterError::BadRules(e.to_string()))?;
        Self::from_spec(&spec)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, RouterError> {
        let text = fs::read_to_string(path.as_ref())
            .map_err(|e| RouterError::BadRules(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }

    pub fn default_spec() -> RuleSetSpec {
        serde_json::from_str(DEFAULT_RULES).expect("bundled rule set parses")
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn rule_count(&self) -> usize {
        self.rules.len()
    }

    fn has_options(&self, text: &str) -> bool {
        self.option_line.find_iter(text).count() >= self.min_option_lines
    }

    /// Classifies free text. Total: falls back to generation.
    pub fn classify(&self, instruction: &str, input_field: &str) -> TaskType {
        let text = if input_field.is_empty() {
            instruction.to_string()
        } else {
            format!("{instruction}\n{input_field}")
        };
        let options = self.has_options(&text);
        self.rules
            .iter()
            .find(|r| {
                (!r.requires_options || options)
                    && (r.any.is_empty() || r.any.iter().any(|p| p.is_match(&text)))
                    && !r.none.iter().any(|p| p.is_match(&text))
            })
            .map_or(TaskType::Generation, |r| r.task_type)
    }

    pub fn route(&self, q: &Question) -> TaskType {
        self.classify(&q.instruction, &q.input_field)
    }
}

impl Default for Router {
    fn default() -> Self {
        Self::from_spec(&Self::default_spec()).expect("bundled rule set compiles")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub system: String,
    pub user: String,
}

impl PromptPair {
    /// Single-string rendering fed to the toy model.
    pub fn render(&self) -> String {
        format!("{}\n{}", self.system, self.user)
    }
}

pub fn system_prompt(task_type: TaskType) -> String {
    format!("{SYSTEM_TEMPLATE_PREFIX}{}.", task_type.phrase())
}

pub fn build_prompt(q: &Question) -> Result<PromptPair, RouterError> {
    let task_type = q.task_type.ok_or_else(|| RouterError::Unrouted(q.id.clone()))?;
    let user = if q.input_field.is_empty() {
        q.instruction.clone()
    } else {
        format!("{}\n{}", q.instruction, q.input_field)
    };
    Ok(PromptPair {
        system: system_prompt(task_type),
        user,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(instruction: &str) -> Question {
        Question::new("q", instruction, 1)
    }

    #[test]
    fn bundled_rules_are_versioned() {
        let r = Router::default();
        // Changing the bundled rules requires bumping the version; update both.
        assert_eq!((r.version(), r.rule_count()), ("1", 4));
    }

    #[test]
    fn development_style_mc() {
        let text = "Which of the following product categories best complements a tent?\n\
                    0. sleeping bag\n1. office chair\n2. printer ink\n3. bath towel\nAnswer: ";
        assert_eq!(Router::default().route(&q(text)), TaskType::MultipleChoice);
    }

    #[test]
    fn retrieval_instruction() {
        let text = "Given the query \"trail shoes\", which products are relevant? \
                    Please return 3 candidates IDs separated by a comma.\n\
                    0. a\n1. b\n2. c\n3. d\n4. e";
        assert_eq!(Router::default().route(&q(text)), TaskType::Retrieval);
        assert_eq!(
            Router::default().route(&q("Select 3 items a buyer of X would click. return 3 candidates IDs separated by a comma")),
            TaskType::Retrieval
        );
    }

    #[test]
    fn translation_falls_back() {
        assert_eq!(
            Router::default().route(&q("Translate the following product title into French: Red Mug")),
            TaskType::Generation
        );
    }

    #[test]
    fn ranking_and_ner() {
        let rank = "Rank the following products by relevance to the query \"usb cable\".\n1. a\n2. b\n3. c";
        assert_eq!(Router::default().route(&q(rank)), TaskType::Ranking);
        let ner = "Extract the brand names mentioned in the review below.";
        assert_eq!(Router::default().route(&q(ner)), TaskType::NamedEntityRecognition);
    }

    #[test]
    fn prompt_template() {
        let mut question = q("Pick one.");
        question.task_type = Some(TaskType::MultipleChoice);
        let p = build_prompt(&question).unwrap();
        assert_eq!(p.system, "You are a helpful online shopping assistant. Your task is multiple choice.");
        assert_eq!(p.user, "Pick one.");
        question.input_field = "extra".into();
        assert_eq!(build_prompt(&question).unwrap().user, "Pick one.\nextra");
    }

    #[test]
    fn unrouted_is_an_error() {
        assert!(matches!(build_prompt(&q("x")), Err(RouterError::Unrouted(_))));
    }

    #[test]
    fn custom_rules_load() {
        let json = r#"{"version":"x","option_line_pattern":"^-","min_option_lines":1,
            "rules":[{"task_type":"ranking","any_patterns":["sort"]}]}"#;
        let r = Router::from_json(json).unwrap();
        assert_eq!(r.classify("sort these", ""), TaskType::Ranking);
        assert_eq!(r.classify("rank these", ""), TaskType::Generation);
        assert!(Router::from_json(r#"{"version":"x"}"#).is_err());
    }
}
