//! Span-pointer extraction policy.
//!
//! The policy reads whitespace tokens of the source and makes five
//! categorical choices in a fixed order: cause start, cause end, effect
//! start, effect end, relation. Masks keep every choice consistent (end at
//! or after start, cause and effect disjoint), so every decoded extraction
//! consists of verbatim source substrings.

mod decode;
mod model;
mod sft;

use std::collections::HashMap;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::normalize_tokens;
use crate::tagged::{Extraction, FormatError, Relation};

pub use decode::{masked_softmax, ActionTrace, StepTrace};
pub use model::{POLICY_FORMAT_VERSION, Forward, PolicyConfig, PolicyModel, PolicyParams, RnnParams};
pub use decode::step_mask;
pub use sft::{greedy_token_f1, sft_example, sft_loss_and_grad, sft_train, SftConfig, SftExample, SftReport};

/// Longest source the policy reads, in whitespace tokens.
pub const MAX_SOURCE_TOKENS: usize = 128;

#[derive(Debug, Error, PartialEq)]
pub enum ExtractorError {
    #[error("no feasible position for {0:?}")]
    Infeasible(Step),
    #[error("source has no tokens")]
    EmptySource,
    #[error("no usable training instances")]
    EmptyData,
    #[error("invalid span action {0:?}")]
    InvalidAction(SpanAction),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("unsupported policy file version {0}")]
    Version(u32),
}

/// One decision of the decode order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Step {
    CauseStart,
    CauseEnd,
    EffectStart,
    EffectEnd,
    Relation,
}

impl Step {
    pub const ORDER: [Step; 5] =
        [Step::CauseStart, Step::CauseEnd, Step::EffectStart, Step::EffectEnd, Step::Relation];

    /// Row of the pointer head scoring this step, if it is a pointer step.
    pub fn pointer_row(self) -> Option<usize> {
        match self {
            Step::CauseStart => Some(0),
            Step::CauseEnd => Some(1),
            Step::EffectStart => Some(2),
            Step::EffectEnd => Some(3),
            Step::Relation => None,
        }
    }
}

/// Token indices (inclusive) of the chosen spans plus the relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpanAction {
    pub cause_start: usize,
    pub cause_end: usize,
    pub effect_start: usize,
    pub effect_end: usize,
    pub relation: Relation,
}

impl SpanAction {
    pub fn from_choices(c: [usize; 5]) -> Self {
        Self {
            cause_start: c[0],
            cause_end: c[1],
            effect_start: c[2],
            effect_end: c[3],
            relation: Relation::from_index(c[4]).expect("relation index in range"),
        }
    }

    pub fn choices(&self) -> [usize; 5] {
        [self.cause_start, self.cause_end, self.effect_start, self.effect_end, self.relation.index()]
    }

    pub fn is_valid(&self, n: usize) -> bool {
        self.cause_start <= self.cause_end
            && self.cause_end < n
            && self.effect_start <= self.effect_end
            && self.effect_end < n
            && (self.cause_end < self.effect_start || self.effect_end < self.cause_start)
    }
}

/// Whitespace tokens of a source text with their byte ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceTokens {
    pub text: String,
    pub tokens: Vec<String>,
    pub ranges: Vec<(usize, usize)>,
}

impl SourceTokens {
    /// Tokenize on whitespace, keeping at most [`MAX_SOURCE_TOKENS`].
    pub fn new(text: &str) -> Self {
        let mut tokens = Vec::new();
        let mut ranges = Vec::new();
        let mut start = None;
        for (i, c) in text.char_indices().chain(std::iter::once((text.len(), ' '))) {
            match (c.is_whitespace(), start) {
                (true, Some(s)) => {
                    tokens.push(text[s..i].to_string());
                    ranges.push((s, i));
                    start = None;
                }
                (false, None) => start = Some(i),
                _ => {}
            }
        }
        if tokens.len() > MAX_SOURCE_TOKENS {
            warn!("source truncated from {} to {MAX_SOURCE_TOKENS} tokens", tokens.len());
            tokens.truncate(MAX_SOURCE_TOKENS);
            ranges.truncate(MAX_SOURCE_TOKENS);
        }
        Self { text: text.to_string(), tokens, ranges }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Surface text from the first to the last token of an inclusive span.
    pub fn surface(&self, start: usize, end: usize) -> &str {
        &self.text[self.ranges[start].0..self.ranges[end].1]
    }
}

/// Build the extraction selected by `action`.
pub fn assemble_extraction(source: &SourceTokens, action: &SpanAction) -> Result<Extraction, ExtractorError> {
    if !action.is_valid(source.len()) {
        return Err(ExtractorError::InvalidAction(*action));
    }
    Ok(Extraction::new(
        source.surface(action.cause_start, action.cause_end),
        action.relation,
        source.surface(action.effect_start, action.effect_end),
    )?)
}

/// Token vocabulary; index 0 is the unknown token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

pub const UNK: &str = "<unk>";

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    /// Vocabulary of lowercased tokens in first-seen order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = vec![UNK.to_string()];
        let mut seen: HashMap<String, usize> = HashMap::new();
        seen.insert(UNK.to_string(), 0);
        for text in texts {
            for tok in SourceTokens::new(text).tokens {
                let key = tok.to_lowercase();
                if !seen.contains_key(&key) {
                    seen.insert(key.clone(), words.len());
                    words.push(key);
                }
            }
        }
        Self { words, index: seen }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        *self.index.get(&token.to_lowercase()).unwrap_or(&0)
    }

    pub fn encode(&self, source: &SourceTokens) -> Vec<usize> {
        source.tokens.iter().map(|t| self.id(t)).collect()
    }
}

fn find_window(keys: &[(usize, String)], target: &[String], avoid: Option<(usize, usize)>) -> Option<(usize, usize)> {
    if target.is_empty() || target.len() > keys.len() {
        return None;
    }
    (0..=keys.len() - target.len()).find_map(|i| {
        let window = &keys[i..i + target.len()];
        let matches = window.iter().zip(target).all(|((_, k), t)| k == t);
        let span = (window[0].0, window[window.len() - 1].0);
        let clear = avoid.is_none_or(|(a, b)| span.1 < a || b < span.0);
        (matches && clear).then_some(span)
    })
}

/// Map gold cause/effect texts to disjoint token spans of `source` by
/// normalized-token search, taking the first occurrence.
pub fn align_gold(source: &SourceTokens, gold: &Extraction) -> Option<SpanAction> {
    let keys: Vec<(usize, String)> = source
        .tokens
        .iter()
        .enumerate()
        .filter_map(|(i, t)| normalize_tokens(t).into_iter().next().map(|k| (i, k)))
        .collect();
    let cause_keys = normalize_tokens(gold.cause());
    let effect_keys = normalize_tokens(gold.effect());
    let mut from = 0;
    while from < keys.len() {
        let cause = find_window(&keys[from..], &cause_keys, None)?;
        if let Some(effect) = find_window(&keys, &effect_keys, Some(cause)) {
            return Some(SpanAction {
                cause_start: cause.0,
                cause_end: cause.1,
                effect_start: effect.0,
                effect_end: effect.1,
                relation: gold.relation(),
            });
        }
        from = keys.iter().position(|(i, _)| *i == cause.0).expect("window start is a key") + 1;
    }
    None
}
