use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::GoldAnswer;
use crate::task::TaskType;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Invalid {
        path: String,
        line: usize,
        reason: String,
    },
}

/// One benchmark item, one JSON object per line in question files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Question {
    pub id: String,
    pub instruction: String,
    #[serde(default)]
    pub input_field: String,
    /// `None` until routed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_type: Option<TaskType>,
    pub track: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<GoldAnswer>,
    /// Number of listed options/candidates; bounds parsed ids when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_candidates: Option<usize>,
}

impl Question {
    pub fn new(id: impl Into<String>, instruction: impl Into<String>, track: u8) -> Self {
        Self {
            id: id.into(),
            instruction: instruction.into(),
            input_field: String::new(),
            task_type: None,
            track,
            gold: None,
            num_candidates: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.instruction.trim().is_empty() {
            return Err(format!("question `{}` has an empty instruction", self.id));
        }
        if !(1..=5).contains(&self.track) {
            return Err(format!("question `{}` has track {} (expected 1-5)", self.id, self.track));
        }
        if let Some(g) = &self.gold {
            g.validate().map_err(|e| format!("question `{}`: {e}", self.id))?;
        }
        Ok(())
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, JsonlError> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let file = File::open(path).map_err(|source| JsonlError::Io {
        path: name.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| JsonlError::Io {
            path: name.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| JsonlError::Parse {
            path: name.clone(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<(), JsonlError> {
    let path = path.as_ref();
    let io = |source| JsonlError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for item in items {
        serde_json::to_writer(&mut w, item).expect("in-memory values serialize");
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads and validates a question file.
pub fn read_questions(path: impl AsRef<Path>) -> Result<Vec<Question>, JsonlError> {
    let path = path.as_ref();
    let qs: Vec<Question> = read_jsonl(path)?;
    for (i, q) in qs.iter().enumerate() {
        q.validate().map_err(|reason| JsonlError::Invalid {
            path: path.display().to_string(),
            line: i + 1,
            reason,
        })?;
    }
    Ok(qs)
}
