//! A deterministic toy language model, its tokenizer and a greedy decoding
//! loop, so the logits processors and answer parsers can be exercised end to
//! end without any inference framework.

use std::collections::BTreeSet;
use std::time::Duration;

use thiserror::Error;

use crate::logits::{LogitsError, LogitsProcessorChain, TokenId, Vocab};
use crate::text::pretokenize;

pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
pub const DEFAULT_CONTEXT_WINDOW: usize = 8;

const RESERVED: [&str; 13] = [
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", ",", " ", "\n",
];

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("prompt is empty after tokenization")]
    EmptyPrompt,
    #[error("max_new must be at least 1")]
    ZeroMaxNew,
    #[error(transparent)]
    Logits(#[from] LogitsError),
}

#[derive(Debug, Clone)]
pub struct ToyTokenizer {
    vocab: Vocab,
}

impl ToyTokenizer {
    /// Vocabulary layout: EOS, UNK, the ten digits, comma, space, newline,
    /// then every other corpus piece in sorted order.
    pub fn from_corpus<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let reserved: BTreeSet<&str> = RESERVED.iter().copied().collect();
        let mut pieces = BTreeSet::new();
        for text in corpus {
            for p in pretokenize(text) {
                if !reserved.contains(p) && p != EOS_TOKEN && p != UNK_TOKEN {
                    pieces.insert(p.to_string());
                }
            }
        }
        let tokens: Vec<String> = [EOS_TOKEN, UNK_TOKEN]
            .iter()
            .chain(RESERVED.iter())
            .map(|s| s.to_string())
            .chain(pieces)
            .collect();
        let vocab = Vocab::new(tokens, EOS_ID).expect("reserved tokens are distinct");
        Self { vocab }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        pretokenize(text)
            .into_iter()
            .map(|p| self.vocab.id(p).unwrap_or(UNK_ID))
            .collect()
    }

    /// Concatenates surfaces, dropping EOS.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| id != EOS_ID)
            .map(|&id| self.vocab.surface(id))
            .collect()
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Pseudo-random logits keyed on the seed, the last `context_window` token
/// ids and the decode step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyLM {
    pub seed: u64,
    pub context_window: usize,
}

impl ToyLM {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            context_window: DEFAULT_CONTEXT_WINDOW,
        }
    }

    pub fn next_logits(&self, context: &[TokenId], step: usize, vocab_size: usize) -> Vec<f32> {
        let suffix = &context[context.len().saturating_sub(self.context_window)..];
        let mut state = splitmix64(self.seed);
        state = splitmix64(state ^ suffix.len() as u64);
        for &id in suffix {
            state = splitmix64(state ^ u64::from(id));
        }
        state = splitmix64(state ^ (step as u64).wrapping_mul(0xA076_1D64_78BD_642F));
        (0..vocab_size as u64)
            .map(|t| {
                let h = splitmix64(state ^ t.wrapping_mul(0xD6E8_FEB8_6659_FD93));
                // top 24 bits -> [0, 1) exactly representable in f32
                let unit = (h >> 40) as f32 / (1u32 << 24) as f32;
                unit * 8.0 - 4.0
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeOutput {
    pub text: String,
    pub token_ids: Vec<TokenId>,
    pub hit_eos: bool,
}

/// Index of the largest logit; ties go to the lowest id.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate().skip(1) {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_decode(
    lm: &ToyLM,
    tokenizer: &ToyTokenizer,
    prompt: &str,
    chain: &LogitsProcessorChain,
    max_new: usize,
) -> Result<DecodeOutput, DecodeError> {
    if max_new == 0 {
        return Err(DecodeError::ZeroMaxNew);
    }
    let prompt_ids = tokenizer.encode(prompt);
    if prompt_ids.is_empty() {
        return Err(DecodeError::EmptyPrompt);
    }
    let vocab_size = tokenizer.vocab().len();
    let mut context = prompt_ids.clone();
    let mut generated = Vec::with_capacity(max_new);
    let mut hit_eos = false;
    for step in 0..max_new {
        let logits = lm.next_logits(&context, step, vocab_size);
        let logits = chain.apply(&prompt_ids, &generated, logits)?;
        let next = argmax(&logits) as TokenId;
        if next == EOS_ID {
            hit_eos = true;
            break;
        }
        generated.push(next);
        context.push(next);
    }
    Ok(DecodeOutput {
        text: tokenizer.decode(&generated),
        token_ids: generated,
        hit_eos,
    })
}

/// Runtime limits per track in minutes, with question counts.
pub const TRACK_BUDGETS: [TrackBudget; 5] = [
    TrackBudget { track: 1, questions: 6102, minutes: 70 },
    TrackBudget { track: 2, questions: 1896, minutes: 20 },
    TrackBudget { track: 3, questions: 2373, minutes: 30 },
    TrackBudget { track: 4, questions: 1349, minutes: 20 },
    TrackBudget { track: 5, questions: 11720, minutes: 140 },
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrackBudget {
    pub track: u8,
    pub questions: u32,
    pub minutes: u32,
}

impl TrackBudget {
    pub fn for_track(track: u8) -> Option<TrackBudget> {
        TRACK_BUDGETS.iter().copied().find(|b| b.track == track)
    }

    pub fn required_qpm(&self) -> f64 {
        f64::from(self.questions) / f64::from(self.minutes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Throughput {
    pub questions: usize,
    pub elapsed: Duration,
}

impl Throughput {
    pub fn questions_per_minute(&self) -> f64 {
        let secs = self.elapsed.as_secs_f64().max(1e-9);
        self.questions as f64 * 60.0 / secs
    }

    pub fn meets(&self, budget: &TrackBudget) -> bool {
        self.questions_per_minute() >= budget.required_qpm()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logits::{whitelist_processor, DIGITS_AND_COMMA};

    fn tok() -> ToyTokenizer {
        ToyTokenizer::from_corpus(["Which product matches the query? 1. red shoes 2. blue hat"])
    }

    #[test]
    fn vocab_layout() {
        let t = tok();
        let v = t.vocab();
        assert_eq!(v.surface(0), EOS_TOKEN);
        assert_eq!(v.surface(1), UNK_TOKEN);
        assert_eq!(v.surface(2), "0");
        assert_eq!(v.surface(12), ",");
        assert_eq!(v.surface(13), " ");
        assert_eq!(v.surface(14), "\n");
        assert!(v.id("shoes").is_some());
    }

    #[test]
    fn round_trip_and_unk() {
        let t = tok();
        let s = "red shoes, 12 blue hat?";
        assert_eq!(t.decode(&t.encode(s)), s);
        assert_eq!(t.encode("purple"), vec![UNK_ID]);
    }

    #[test]
    fn deterministic_and_bounded_logits() {
        let lm = ToyLM::new(7);
        let a = lm.next_logits(&[3, 4, 5], 0, 50);
        assert_eq!(a, lm.next_logits(&[3, 4, 5], 0, 50));
        assert_ne!(a, lm.next_logits(&[3, 4, 5], 1, 50));
        assert_ne!(a, ToyLM::new(8).next_logits(&[3, 4, 5], 0, 50));
        assert!(a.iter().all(|x| (-4.0..4.0).contains(x)));
        // only the last 8 ids matter
        let long: Vec<TokenId> = (0..20).collect();
        assert_eq!(lm.next_logits(&long, 2, 10), lm.next_logits(&long[12..], 2, 10));
    }

    #[test]
    fn hash_is_pinned() {
        // Pins the byte-exact hash so outputs stay identical across platforms.
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
    }

    #[test]
    fn greedy_errors_and_limits() {
        let t = tok();
        let lm = ToyLM::new(1);
        let chain = LogitsProcessorChain::new();
        assert!(matches!(greedy_decode(&lm, &t, "", &chain, 4), Err(DecodeError::EmptyPrompt)));
        assert!(matches!(greedy_decode(&lm, &t, "red", &chain, 0), Err(DecodeError::ZeroMaxNew)));
        for seed in 0..50 {
            let out = greedy_decode(&ToyLM::new(seed), &t, "red shoes", &chain, 1).unwrap();
            assert!(out.token_ids.len() <= 1);
            if let Some(&id) = out.token_ids.first() {
                assert_eq!(out.text, t.vocab().surface(id));
            }
        }
    }

    #[test]
    fn whitelisted_decode_is_numeric() {
        let t = tok();
        let chain = LogitsProcessorChain::new().push(whitelist_processor(t.vocab(), DIGITS_AND_COMMA).unwrap());
        let re = regex::Regex::new(r"^[0-9, ]*$").unwrap();
        for seed in 0..100 {
            let out = greedy_decode(&ToyLM::new(seed), &t, "Which product?", &chain, 16).unwrap();
            assert!(re.is_match(&out.text), "{:?}", out.text);
        }
    }

    #[test]
    fn track_five_budget() {
        let b = TrackBudget::for_track(5).unwrap();
        assert!((b.required_qpm() - 83.714).abs() < 1e-3);
        let t = Throughput { questions: 100, elapsed: Duration::from_secs(60) };
        assert_eq!(t.questions_per_minute(), 100.0);
        assert!(t.meets(&b));
    }
}
