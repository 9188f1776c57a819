//! Turns generated text into typed answers. Parsing never errors: anything
//! that cannot be read becomes a [`ParseFailure`], which scores 0.
//!
//! Permissive mode (the default) accepts an `Answer:` prefix, wrapping
//! brackets or quotes, trailing punctuation, and letter options for multiple
//! choice (`A` → 0). Every such recovery is listed in the outcome. Strict mode
//! accepts only the canonical forms produced by [`format_answer`].

use std::collections::HashSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::task::TaskType;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ParsedAnswer {
    Choice { index: usize },
    RankedList { ids: Vec<usize> },
    EntitySet { spans: Vec<String> },
    /// Unique ids, in the order they were generated.
    RetrievedSet { ids: Vec<usize> },
    FreeText { text: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseFailure {
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recovery {
    StrippedAnswerPrefix,
    StrippedWrapper,
    TrimmedTrailingPunctuation,
    DroppedDuplicates { count: usize },
    LetterOption { letter: char },
    SkippedLeadingText,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseOutcome {
    pub result: Result<ParsedAnswer, ParseFailure>,
    pub recoveries: Vec<Recovery>,
}

impl ParseOutcome {
    fn fail(reason: impl Into<String>, recoveries: Vec<Recovery>) -> Self {
        Self {
            result: Err(ParseFailure {
                reason: reason.into(),
            }),
            recoveries,
        }
    }

    pub fn answer(&self) -> Option<&ParsedAnswer> {
        self.result.as_ref().ok()
    }

    pub fn is_failure(&self) -> bool {
        self.result.is_err()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParseOptions {
    pub strict: bool,
    /// Retrieval answers longer than this fail (Hit@3 grades three picks).
    pub max_retrieved: usize,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            strict: false,
            max_retrieved: 3,
        }
    }
}

static ANSWER_PREFIX: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^\s*(?:the\s+)?(?:final\s+)?answer\s*(?:is\b\s*:?|[:=])\s*").expect("valid regex")
});
static FIRST_INT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[0-9]+").expect("valid regex"));
static LETTER_OPTION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\(?([A-Za-z])[).:]?$").expect("valid regex"));
static STRICT_LIST: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[0-9]+(?:\s*,\s*[0-9]+|\s+[0-9]+)*$").expect("valid regex"));

const TRAILING_PUNCT: &[char] = &['.', ';', '!', '?'];
const WRAPPERS: &[(char, char)] = &[('[', ']'), ('(', ')'), ('{', '}'), ('"', '"'), ('\'', '\''), ('`', '`')];

/// Permissive cleanup shared by the structured task types.
fn clean(text: &str, recoveries: &mut Vec<Recovery>) -> String {
    let mut s = text.trim().to_string();
    if let Some(m) = ANSWER_PREFIX.find(&s) {
        if m.end() > 0 {
            s = s[m.end()..].trim().to_string();
            recoveries.push(Recovery::StrippedAnswerPrefix);
        }
    }
    let trimmed = s.trim_end_matches(TRAILING_PUNCT).trim_end();
    if trimmed.len() != s.len() {
        s = trimmed.to_string();
        recoveries.push(Recovery::TrimmedTrailingPunctuation);
    }
    for &(open, close) in WRAPPERS {
        if s.len() >= 2 && s.starts_with(open) && s.ends_with(close) {
            s = s[open.len_utf8()..s.len() - close.len_utf8()].trim().to_string();
            recoveries.push(Recovery::StrippedWrapper);
            break;
        }
    }
    s
}

pub fn parse(
    task_type: TaskType,
    generated: &str,
    num_candidates: Option<usize>,
    opts: &ParseOptions,
) -> ParseOutcome {
    match task_type {
        TaskType::MultipleChoice => parse_choice(generated, num_candidates, opts),
        TaskType::Ranking => parse_id_list(generated, num_candidates, opts, false),
        TaskType::Retrieval => parse_id_list(generated, num_candidates, opts, true),
        TaskType::NamedEntityRecognition => parse_entities(generated, opts),
        TaskType::Generation => ParseOutcome {
            result: Ok(ParsedAnswer::FreeText {
                text: generated.trim().to_string(),
            }),
            recoveries: Vec::new(),
        },
    }
}

fn parse_index(digits: &str) -> Result<usize, String> {
    digits
        .parse::<usize>()
        .map_err(|_| format!("integer `{digits}` out of range"))
}

fn check_range(id: usize, num_candidates: Option<usize>) -> Result<(), String> {
    match num_candidates {
        Some(n) if id >= n => Err(format!("id {id} outside 0..{n}")),
        _ => Ok(()),
    }
}

fn parse_choice(text: &str, num_candidates: Option<usize>, opts: &ParseOptions) -> ParseOutcome {
    let mut rec = Vec::new();
    let index = if opts.strict {
        let t = text.trim();
        if t.is_empty() || !t.bytes().all(|b| b.is_ascii_digit()) {
            return ParseOutcome::fail("expected a bare option index", rec);
        }
        parse_index(t)
    } else {
        let s = clean(text, &mut rec);
        if let Some(m) = FIRST_INT.find(&s) {
            if m.start() > 0 {
                rec.push(Recovery::SkippedLeadingText);
            }
            parse_index(m.as_str())
        } else if let Some(c) = LETTER_OPTION.captures(&s) {
            let letter = c[1].chars().next().expect("one letter");
            rec.push(Recovery::LetterOption { letter });
            Ok((letter.to_ascii_uppercase() as u8 - b'A') as usize)
        } else {
            Err("no option index found".to_string())
        }
    };
    match index.and_then(|i| check_range(i, num_candidates).map(|_| i)) {
        Ok(index) => ParseOutcome {
            result: Ok(ParsedAnswer::Choice { index }),
            recoveries: rec,
        },
        Err(reason) => ParseOutcome::fail(reason, rec),
    }
}

fn parse_id_list(
    text: &str,
    num_candidates: Option<usize>,
    opts: &ParseOptions,
    retrieval: bool,
) -> ParseOutcome {
    let mut rec = Vec::new();
    let body = if opts.strict {
        let t = text.trim();
        if !STRICT_LIST.is_match(t) {
            return ParseOutcome::fail("expected comma-separated ids", rec);
        }
        t.to_string()
    } else {
        clean(text, &mut rec)
    };

    let mut ids = Vec::new();
    let mut seen = HashSet::new();
    let mut dropped = 0;
    for token in body.split(|c: char| c == ',' || c.is_whitespace()) {
        let token = if opts.strict {
            token
        } else {
            token.trim_matches(|c: char| "[](){}.;:'\"`".contains(c))
        };
        if token.is_empty() {
            continue;
        }
        if !token.bytes().all(|b| b.is_ascii_digit()) {
            return ParseOutcome::fail(format!("`{token}` is not a candidate id"), rec);
        }
        let id = match parse_index(token).and_then(|i| check_range(i, num_candidates).map(|_| i)) {
            Ok(id) => id,
            Err(reason) => return ParseOutcome::fail(reason, rec),
        };
        if seen.insert(id) {
            ids.push(id);
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 {
        rec.push(Recovery::DroppedDuplicates { count: dropped });
    }
    if ids.is_empty() {
        return ParseOutcome::fail("no candidate ids found", rec);
    }
    let answer = if retrieval {
        if ids.len() > opts.max_retrieved {
            return ParseOutcome::fail(
                format!("{} ids returned, at most {} allowed", ids.len(), opts.max_retrieved),
                rec,
            );
        }
        ParsedAnswer::RetrievedSet { ids }
    } else {
        ParsedAnswer::RankedList { ids }
    };
    ParseOutcome {
        result: Ok(answer),
        recoveries: rec,
    }
}

/// Strips quotes and trailing punctuation from one span until neither is
/// left, so every span (not only the last) is cleaned the same way.
fn clean_span(mut s: &str) -> &str {
    loop {
        let next = s
            .trim_matches(|c: char| c == '"' || c == '\'')
            .trim()
            .trim_end_matches(TRAILING_PUNCT)
            .trim_end();
        if next.len() == s.len() {
            return s;
        }
        s = next;
    }
}

fn parse_entities(text: &str, opts: &ParseOptions) -> ParseOutcome {
    let mut rec = Vec::new();
    let body = if opts.strict {
        text.trim().to_string()
    } else {
        clean(text, &mut rec)
    };
    let spans = body
        .split([',', '\n'])
        .map(|s| {
            let s = s.trim();
            if opts.strict {
                s
            } else {
                clean_span(s)
            }
        })
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    ParseOutcome {
        result: Ok(ParsedAnswer::EntitySet { spans }),
        recoveries: rec,
    }
}

/// Canonical text form; strict mode parses it back to the same answer.
pub fn format_answer(answer: &ParsedAnswer) -> String {
    let join = |ids: &[usize]| ids.iter().map(usize::to_string).collect::<Vec<_>>().join(", ");
    match answer {
        ParsedAnswer::Choice { index } => index.to_string(),
        ParsedAnswer::RankedList { ids } | ParsedAnswer::RetrievedSet { ids } => join(ids),
        ParsedAnswer::EntitySet { spans } => spans.join(", "),
        ParsedAnswer::FreeText { text } => text.clone(),
    }
}

/// One line of `answers.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub id: String,
    pub raw: String,
    pub parsed: Option<ParsedAnswer>,
    pub failure_reason: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub recoveries: Vec<Recovery>,
}

impl AnswerRecord {
    pub fn from_outcome(id: impl Into<String>, raw: impl Into<String>, outcome: ParseOutcome) -> Self {
        let (parsed, failure_reason) = match outcome.result {
            Ok(a) => (Some(a), None),
            Err(f) => (None, Some(f.reason)),
        };
        Self {
            id: id.into(),
            raw: raw.into(),
            parsed,
            failure_reason,
            recoveries: outcome.recoveries,
        }
    }
}
