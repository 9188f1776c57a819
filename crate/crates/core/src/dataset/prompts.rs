use std::collections::BTreeMap;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::registry::implemented_ids;
use super::DatasetError;

const BUNDLED: &str = include_str!("prompts.json");

static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{([a-z_]+)\}").expect("valid regex"));

/// Versioned prompt wordings, one template per recipe. Placeholders look like
/// `{query}`; `{options}` receives the numbered option lines.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prompts {
    pub version: String,
    pub templates: BTreeMap<u32, String>,
}

impl Prompts {
    pub fn bundled() -> Self {
        Self::from_json(BUNDLED).expect("bundled prompts are valid")
    }

    pub fn from_json(json: &str) -> Result<Self, DatasetError> {
        let p: Prompts = serde_json::from_str(json).map_err(|e| DatasetError::Prompts(e.to_string()))?;
        for id in implemented_ids() {
            if !p.templates.contains_key(&id) {
                return Err(DatasetError::Prompts(format!("no template for recipe {id}")));
            }
        }
        Ok(p)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| DatasetError::Prompts(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }

    /// Fills the template for `recipe`. Values are inserted verbatim and never
    /// re-scanned for placeholders.
    pub fn render(&self, recipe: u32, values: &[(&str, &str)]) -> Result<String, DatasetError> {
        let template = self
            .templates
            .get(&recipe)
            .ok_or_else(|| DatasetError::Prompts(format!("no template for recipe {recipe}")))?;
        for cap in PLACEHOLDER.captures_iter(template) {
            if !values.iter().any(|(k, _)| *k == &cap[1]) {
                return Err(DatasetError::Prompts(format!(
                    "template {recipe} needs `{}` but no value was given",
                    &cap[1]
                )));
            }
        }
        Ok(PLACEHOLDER
            .replace_all(template, |cap: &regex::Captures| {
                values
                    .iter()
                    .find(|(k, _)| *k == &cap[1])
                    .map(|(_, v)| v.to_string())
                    .unwrap_or_default()
            })
            .into_owned())
    }
}

/// Numbered option lines, `0. first`, `1. second`, … with inner newlines
/// flattened so each option stays on one line.
pub fn option_lines<S: AsRef<str>>(options: &[S]) -> String {
    options
        .iter()
        .enumerate()
        .map(|(i, o)| format!("{i}. {}", o.as_ref().split_whitespace().collect::<Vec<_>>().join(" ")))
        .collect::<Vec<_>>()
        .join("\n")
}
