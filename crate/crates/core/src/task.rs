use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The five question types of the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    MultipleChoice,
    Ranking,
    NamedEntityRecognition,
    Retrieval,
    Generation,
}

impl TaskType {
    pub const ALL: [TaskType; 5] = [
        TaskType::MultipleChoice,
        TaskType::Ranking,
        TaskType::NamedEntityRecognition,
        TaskType::Retrieval,
        TaskType::Generation,
    ];

    /// Phrase inserted into the system prompt.
    pub fn phrase(self) -> &'static str {
        match self {
            TaskType::MultipleChoice => "multiple choice",
            TaskType::Ranking => "ranking",
            TaskType::NamedEntityRecognition => "named entity recognition",
            TaskType::Retrieval => "retrieval",
            TaskType::Generation => "generation",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::MultipleChoice => "multiple_choice",
            TaskType::Ranking => "ranking",
            TaskType::NamedEntityRecognition => "named_entity_recognition",
            TaskType::Retrieval => "retrieval",
            TaskType::Generation => "generation",
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown task type `{0}`")]
pub struct UnknownTaskType(pub String);

impl FromStr for TaskType {
    type Err = UnknownTaskType;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        Ok(match norm.as_str() {
            "multiple_choice" | "mc" => TaskType::MultipleChoice,
            "ranking" => TaskType::Ranking,
            "named_entity_recognition" | "ner" => TaskType::NamedEntityRecognition,
            "retrieval" => TaskType::Retrieval,
            "generation" => TaskType::Generation,
            _ => return Err(UnknownTaskType(s.to_string())),
        })
    }
}
