//! Composable logits processors: a character whitelist that restricts output
//! to digits and commas (for choice, ranking and retrieval answers) and a
//! prompt-token boost that nudges extraction answers to copy from the prompt.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Debug;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::task::TaskType;

pub type TokenId = u32;

/// Masked logit. The most negative finite f32, so softmax stays defined.
pub const MASKED: f32 = f32::MIN;
pub const DEFAULT_BOOST: f32 = 5.0;
pub const DIGITS_AND_COMMA: &str = "0123456789,";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LogitsError {
    #[error("invalid processor configuration: {0}")]
    Config(String),
    #[error("stage `{stage}` returned {got} logits, expected {expected}")]
    LengthMismatch {
        stage: String,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    eos_id: TokenId,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>, eos_id: TokenId) -> Result<Self, LogitsError> {
        if eos_id as usize >= tokens.len() {
            return Err(LogitsError::Config(format!(
                "eos id {eos_id} outside vocabulary of {}",
                tokens.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(LogitsError::Config(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self {
            tokens,
            eos_id,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn surface(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn id(&self, surface: &str) -> Option<TokenId> {
        self.index.get(surface).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// A pure map `(prompt ids, generated ids, logits) -> logits`.
pub trait LogitsProcessor: Debug + Send + Sync {
    fn name(&self) -> &str;
    fn process(&self, prompt: &[TokenId], generated: &[TokenId], logits: Vec<f32>) -> Vec<f32>;
}

/// Masks every token whose surface has a character outside the allowed set
/// (space is always allowed). EOS is never masked.
#[derive(Debug, Clone)]
pub struct Whitelist {
    allowed: Vec<bool>,
}

impl Whitelist {
    pub fn is_allowed(&self, id: TokenId) -> bool {
        self.allowed.get(id as usize).copied().unwrap_or(false)
    }
}

pub fn whitelist_processor(vocab: &Vocab, allowed_chars: &str) -> Result<Whitelist, LogitsError> {
    if allowed_chars.is_empty() {
        return Err(LogitsError::Config("whitelist character set is empty".into()));
    }
    let mut set: HashSet<char> = allowed_chars.chars().collect();
    set.insert(' ');
    let allowed: Vec<bool> = vocab
        .tokens()
        .iter()
        .enumerate()
        .map(|(i, t)| i as TokenId == vocab.eos_id() || t.chars().all(|c| set.contains(&c)))
        .collect();
    let usable = allowed
        .iter()
        .enumerate()
        .filter(|(i, ok)| **ok && *i as TokenId != vocab.eos_id())
        .count();
    if usable == 0 {
        return Err(LogitsError::Config(format!(
            "whitelist `{allowed_chars}` leaves no token but EOS"
        )));
    }
    Ok(Whitelist { allowed })
}

impl LogitsProcessor for Whitelist {
    fn name(&self) -> &str {
        "whitelist"
    }

    fn process(&self, _prompt: &[TokenId], _generated: &[TokenId], mut logits: Vec<f32>) -> Vec<f32> {
        for (x, ok) in logits.iter_mut().zip(&self.allowed) {
            if !ok {
                *x = MASKED;
            }
        }
        logits
    }
}

/// Adds `boost` to the logit of every token present in the prompt. Masked
/// logits stay masked.
#[derive(Debug, Clone)]
pub struct PromptBoost {
    boost: f32,
}

pub fn prompt_boost_processor(boost: f32) -> Result<PromptBoost, LogitsError> {
    if !boost.is_finite() {
        return Err(LogitsError::Config(format!("boost must be finite, got {boost}")));
    }
    Ok(PromptBoost { boost })
}

impl LogitsProcessor for PromptBoost {
    fn name(&self) -> &str {
        "prompt_boost"
    }

    fn process(&self, prompt: &[TokenId], _generated: &[TokenId], mut logits: Vec<f32>) -> Vec<f32> {
        if self.boost == 0.0 {
            return logits;
        }
        let mut seen = vec![false; logits.len()];
        for &id in prompt {
            let i = id as usize;
            if i < logits.len() && !seen[i] {
                seen[i] = true;
                if logits[i] != MASKED {
                    logits[i] = (logits[i] + self.boost).max(MASKED);
                }
            }
        }
        logits
    }
}

#[derive(Debug, Default)]
pub struct LogitsProcessorChain {
    stages: Vec<Box<dyn LogitsProcessor>>,
}

impl LogitsProcessorChain {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(mut self, stage: impl LogitsProcessor + 'static) -> Self {
        self.stages.push(Box::new(stage));
        self
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// Runs the stages left to right.
    pub fn apply(
        &self,
        prompt: &[TokenId],
        generated: &[TokenId],
        logits: Vec<f32>,
    ) -> Result<Vec<f32>, LogitsError> {
        let expected = logits.len();
        let mut logits = logits;
        for stage in &self.stages {
            logits = stage.process(prompt, generated, logits);
            if logits.len() != expected {
                return Err(LogitsError::LengthMismatch {
                    stage: stage.name().to_string(),
                    expected,
                    got: logits.len(),
                });
            }
        }
        Ok(logits)
    }
}

pub fn apply_chain(
    chain: &LogitsProcessorChain,
    prompt: &[TokenId],
    generated: &[TokenId],
    logits: Vec<f32>,
) -> Result<Vec<f32>, LogitsError> {
    chain.apply(prompt, generated, logits)
}

fn default_boost() -> f32 {
    DEFAULT_BOOST
}

/// One stage in JSON form, e.g. `{"type":"whitelist","chars":"0123456789,"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProcessorSpec {
    Whitelist {
        chars: String,
    },
    PromptBoost {
        #[serde(default = "default_boost")]
        boost: f32,
    },
}

pub fn build_chain(specs: &[ProcessorSpec], vocab: &Vocab) -> Result<LogitsProcessorChain, LogitsError> {
    specs.iter().try_fold(LogitsProcessorChain::new(), |chain, spec| {
        Ok(match spec {
            ProcessorSpec::Whitelist { chars } => chain.push(whitelist_processor(vocab, chars)?),
            ProcessorSpec::PromptBoost { boost } => chain.push(prompt_boost_processor(*boost)?),
        })
    })
}

/// Chain configuration: either one list for every task type, or a map from
/// task type (or `"default"`) to a list. Task types without an entry and no
/// default get an empty chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChainConfig {
    Uniform(Vec<ProcessorSpec>),
    PerTask(BTreeMap<String, Vec<ProcessorSpec>>),
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig::Uniform(Vec::new())
    }
}

impl ChainConfig {
    pub fn from_json(json: &str) -> Result<Self, LogitsError> {
        let cfg: ChainConfig =
            serde_json::from_str(json).map_err(|e| LogitsError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, LogitsError> {
        let text = fs::read_to_string(path.as_ref())
            .map_err(|e| LogitsError::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), LogitsError> {
        if let ChainConfig::PerTask(map) = self {
            for key in map.keys() {
                if key != "default" && key.parse::<TaskType>().is_err() {
                    return Err(LogitsError::Config(format!("unknown task type key `{key}`")));
                }
            }
        }
        Ok(())
    }

    /// The competition setup: digits/commas for choice, ranking and
    /// retrieval; prompt boost for extraction.
    pub fn competition_default() -> Self {
        let wl = vec![ProcessorSpec::Whitelist {
            chars: DIGITS_AND_COMMA.into(),
        }];
        let mut map = BTreeMap::new();
        map.insert(TaskType::MultipleChoice.as_str().into(), wl.clone());
        map.insert(TaskType::Ranking.as_str().into(), wl.clone());
        map.insert(TaskType::Retrieval.as_str().into(), wl);
        map.insert(
            TaskType::NamedEntityRecognition.as_str().into(),
            vec![ProcessorSpec::PromptBoost {
                boost: DEFAULT_BOOST,
            }],
        );
        ChainConfig::PerTask(map)
    }

    pub fn specs_for(&self, task: TaskType) -> &[ProcessorSpec] {
        match self {
            ChainConfig::Uniform(v) => v,
            ChainConfig::PerTask(map) => map
                .iter()
                .find(|(k, _)| k.parse::<TaskType>().ok() == Some(task))
                .or_else(|| map.get_key_value("default"))
                .map_or(&[][..], |(_, v)| v.as_slice()),
        }
    }

    /// One built chain per task type.
    pub fn build_all(&self, vocab: &Vocab) -> Result<HashMap<TaskType, LogitsProcessorChain>, LogitsError> {
        TaskType::ALL
            .iter()
            .map(|t| Ok((*t, build_chain(self.specs_for(*t), vocab)?)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::new(
            ["1", "2", ",", "cat", "</s>"].iter().map(|s| s.to_string()).collect(),
            4,
        )
        .unwrap()
    }

    #[test]
    fn whitelist_masks_words() {
        let wl = whitelist_processor(&vocab(), DIGITS_AND_COMMA).unwrap();
        let out = wl.process(&[], &[], vec![0.5, -1.0, 2.0, 3.0, 0.1]);
        assert_eq!(out, vec![0.5, -1.0, 2.0, MASKED, 0.1]);
    }

    #[test]
    fn full_charset_is_identity() {
        let wl = whitelist_processor(&vocab(), "12,cat").unwrap();
        let logits = vec![0.5, -1.0, 2.0, 3.0, 0.1];
        assert_eq!(wl.process(&[], &[], logits.clone()), logits);
    }

    #[test]
    fn whitelist_config_errors() {
        assert!(whitelist_processor(&vocab(), "").is_err());
        assert!(whitelist_processor(&vocab(), "xyz").is_err());
    }

    #[test]
    fn boost_adds_to_prompt_tokens() {
        let b = prompt_boost_processor(2.5).unwrap();
        let logits: Vec<f32> = (0..12).map(|i| i as f32 * 0.1).collect();
        let out = b.process(&[5, 9, 5], &[], logits.clone());
        for i in 0..12 {
            let want = if i == 5 || i == 9 { logits[i] + 2.5 } else { logits[i] };
            assert_eq!(out[i], want);
        }
        let zero = prompt_boost_processor(0.0).unwrap();
        assert_eq!(zero.process(&[1, 2], &[], logits.clone()), logits);
        assert!(prompt_boost_processor(f32::INFINITY).is_err());
    }

    #[test]
    fn empty_chain_is_identity() {
        let c = LogitsProcessorChain::new();
        assert_eq!(c.apply(&[], &[], vec![1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[derive(Debug)]
    struct Truncate;
    impl LogitsProcessor for Truncate {
        fn name(&self) -> &str {
            "truncate"
        }
        fn process(&self, _: &[TokenId], _: &[TokenId], mut l: Vec<f32>) -> Vec<f32> {
            l.pop();
            l
        }
    }

    #[test]
    fn length_mismatch_detected() {
        let c = LogitsProcessorChain::new().push(Truncate);
        assert!(matches!(
            c.apply(&[], &[], vec![1.0, 2.0]),
            Err(LogitsError::LengthMismatch { expected: 2, got: 1, .. })
        ));
    }

    #[test]
    fn chain_json_forms() {
        let uniform = ChainConfig::from_json(
            r#"[{"type":"whitelist","chars":"0123456789,"},{"type":"prompt_boost","boost":5.0}]"#,
        )
        .unwrap();
        assert_eq!(uniform.specs_for(TaskType::Generation).len(), 2);

        let per = ChainConfig::from_json(
            r#"{"ranking":[{"type":"whitelist","chars":"0123456789,"}],"default":[{"type":"prompt_boost"}]}"#,
        )
        .unwrap();
        assert_eq!(per.specs_for(TaskType::Ranking).len(), 1);
        assert_eq!(
            per.specs_for(TaskType::Generation),
            &[ProcessorSpec::PromptBoost { boost: DEFAULT_BOOST }]
        );
        assert!(ChainConfig::from_json(r#"{"summaries":[]}"#).is_err());
        assert!(ChainConfig::from_json(r#"[{"type":"beam"}]"#).is_err());
    }

    #[test]
    fn competition_default_routes_processors() {
        let c = ChainConfig::competition_default();
        assert_eq!(c.specs_for(TaskType::Generation), &[]);
        assert!(matches!(c.specs_for(TaskType::Retrieval)[0], ProcessorSpec::Whitelist { .. }));
        assert!(matches!(
            c.specs_for(TaskType::NamedEntityRecognition)[0],
            ProcessorSpec::PromptBoost { .. }
        ));
    }
}
