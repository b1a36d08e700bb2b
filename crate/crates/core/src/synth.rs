//! Synthetic causal corpus with a rule-defined notion of validity.
//!
//! Passages are built from templates so the gold spans are known token
//! ranges. Gold cause spans include a trailing modifier ("despite a recent
//! uptick") only half of the time, which makes boundary ambiguity part of
//! the data: an output that differs from the reference only in that
//! modifier is valid but not an exact match.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{CausalInstance, Split};
use crate::evaluator::{EvaluationInput, LabeledEvaluation};
use crate::metrics::{field_prf, normalize_tokens, Verdict};
use crate::tagged::{Extraction, Relation};

const SUBJECTS: &[&str] = &[
    "the company", "the firm", "revenue", "the central bank", "demand", "the storm", "oil prices",
    "the market", "investors", "the board", "exports", "the factory", "consumer spending",
    "the government", "wages", "the bank", "shipping costs", "inflation", "the retailer",
    "housing starts", "the airline", "crop yields", "the union", "tax receipts",
];
const VERBS: &[&str] = &[
    "rose", "fell", "expanded", "collapsed", "slowed", "surged", "declined", "improved",
    "weakened", "recovered", "stalled", "doubled", "shrank", "climbed",
];
const TAILS: &[&str] = &[
    "last quarter", "sharply", "in march", "during the year", "across europe", "this week",
    "after the merger", "at home", "overnight",
];
const MODIFIERS: &[&str] = &[
    "despite a recent uptick", "amid strong demand", "in spite of new rules", "after weeks of talks",
    "despite lower costs", "amid rising debt",
];
const PREAMBLES: &[&str] = &["analysts noted that", "reports said that", "officials confirmed that"];
/// Words that never occur in generated passages.
const FOREIGN: &[&str] = &[
    "purple", "galaxy", "violin", "penguin", "marble", "orchestra", "glacier", "saffron", "tornado",
    "lantern", "meadow", "cobalt",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    /// Probability that a cause clause carries a trailing modifier.
    pub modifier_prob: f64,
    /// Probability that the gold cause includes that modifier.
    pub gold_modifier_prob: f64,
    /// Probability that a clause carries a numeric tail.
    pub number_prob: f64,
    /// Probability of the `cause` relation; the rest is split between
    /// `prevent` and `enable`.
    pub cause_share: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { seed: 0, modifier_prob: 0.6, gold_modifier_prob: 0.5, number_prob: 0.4, cause_share: 0.6 }
    }
}

/// A generated passage with token-level gold spans (inclusive).
#[derive(Debug, Clone)]
pub struct SynthInstance {
    pub instance: CausalInstance,
    pub tokens: Vec<String>,
    pub cause: (usize, usize),
    pub effect: (usize, usize),
    /// Cause span with the modifier toggled, when a modifier exists.
    pub alt_cause: Option<(usize, usize)>,
}

fn words(s: &str) -> impl Iterator<Item = String> + '_ {
    s.split(' ').map(str::to_string)
}

fn clause(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Vec<String> {
    let mut t: Vec<String> = words(SUBJECTS.choose(rng).unwrap()).collect();
    t.push(VERBS.choose(rng).unwrap().to_string());
    if rng.random_bool(cfg.number_prob) {
        let n: u32 = rng.random_range(2..99);
        if rng.random_bool(0.5) {
            t.extend(["by".to_string(), n.to_string(), "percent".to_string()]);
        } else {
            t.extend(["to".to_string(), format!("${n}.00")]);
        }
    } else {
        t.extend(words(TAILS.choose(rng).unwrap()));
    }
    t
}

fn span_text(tokens: &[String], (a, b): (usize, usize)) -> String {
    tokens[a..=b].join(" ")
}

/// Generate `n` passages with gold extractions.
pub fn generate_instances(n: usize, cfg: &SynthConfig) -> Vec<SynthInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..n).map(|i| generate_one(i, &mut rng, cfg)).collect()
}

fn generate_one(index: usize, rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> SynthInstance {
    let relation = if rng.random_bool(cfg.cause_share) {
        Relation::Cause
    } else if rng.random_bool(0.5) {
        Relation::Prevent
    } else {
        Relation::Enable
    };
    let cause_core = clause(rng, cfg);
    let modifier: Option<Vec<String>> =
        rng.random_bool(cfg.modifier_prob).then(|| words(MODIFIERS.choose(rng).unwrap()).collect());
    let effect = clause(rng, cfg);

    let mut tokens: Vec<String> = Vec::new();
    if rng.random_bool(0.3) {
        tokens.extend(words(PREAMBLES.choose(rng).unwrap()));
    }
    let push = |tokens: &mut Vec<String>, part: &[String]| {
        let start = tokens.len();
        tokens.extend(part.iter().cloned());
        (start, tokens.len() - 1)
    };
    let mut cause_full = cause_core.clone();
    if let Some(m) = &modifier {
        cause_full.extend(m.iter().cloned());
    }
    let cause_first = rng.random_bool(0.5);
    let (c_span, e_span);
    match (relation, cause_first) {
        (Relation::Cause, false) => {
            e_span = push(&mut tokens, &effect);
            tokens.push("because".into());
            c_span = push(&mut tokens, &cause_full);
        }
        (Relation::Cause, true) => {
            c_span = push(&mut tokens, &cause_full);
            tokens.extend([",".to_string(), "so".to_string()]);
            e_span = push(&mut tokens, &effect);
        }
        (Relation::Prevent, false) => {
            e_span = push(&mut tokens, &effect);
            tokens.extend(words("was blocked as"));
            c_span = push(&mut tokens, &cause_full);
        }
        (Relation::Prevent, true) => {
            c_span = push(&mut tokens, &cause_full);
            tokens.extend(words(", which prevented"));
            e_span = push(&mut tokens, &effect);
        }
        (Relation::Enable, false) => {
            e_span = push(&mut tokens, &effect);
            tokens.extend(words("became possible as"));
            c_span = push(&mut tokens, &cause_full);
        }
        (Relation::Enable, true) => {
            c_span = push(&mut tokens, &cause_full);
            tokens.extend(words(", which enabled"));
            e_span = push(&mut tokens, &effect);
        }
    }
    tokens.push(".".into());

    let core_span = (c_span.0, c_span.0 + cause_core.len() - 1);
    let (gold_cause, alt_cause) = match modifier {
        Some(_) if rng.random_bool(cfg.gold_modifier_prob) => (c_span, Some(core_span)),
        Some(_) => (core_span, Some(c_span)),
        None => (c_span, None),
    };
    let gold = Extraction::new(&span_text(&tokens, gold_cause), relation, &span_text(&tokens, e_span))
        .expect("generated spans are non-empty");
    SynthInstance {
        instance: CausalInstance {
            id: format!("synth-{index}"),
            context: tokens.join(" "),
            gold,
            split: Split::Train,
        },
        tokens,
        cause: gold_cause,
        effect: e_span,
        alt_cause,
    }
}

/// Rule that defines validity on the synthetic corpus: every output token
/// occurs in the source, every numeric output token occurs in the source,
/// and each field's token F1 against the reference is at least `min_f1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleOracle {
    pub min_f1: f64,
}

impl Default for RuleOracle {
    fn default() -> Self {
        Self { min_f1: 0.6 }
    }
}

impl RuleOracle {
    pub fn judge(&self, input: &EvaluationInput) -> Verdict {
        let source: HashSet<String> = normalize_tokens(&input.source).into_iter().collect();
        let out = &input.output;
        let tokens: Vec<String> =
            normalize_tokens(out.cause()).into_iter().chain(normalize_tokens(out.effect())).collect();
        let contained = tokens.iter().all(|t| source.contains(t));
        let numbers_ok = tokens
            .iter()
            .filter(|t| t.chars().any(|c| c.is_ascii_digit()))
            .all(|t| source.contains(t));
        let f1_ok = field_prf::<f64>(out.cause(), input.reference.cause()).f1 >= self.min_f1
            && field_prf::<f64>(out.effect(), input.reference.effect()).f1 >= self.min_f1;
        Verdict::from_bool(contained && numbers_ok && f1_ok)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Perturbation {
    Exact,
    ToggleModifier,
    Boundary,
    Shift,
    Hallucinate,
    Number,
    Swap,
}

const PERTURBATIONS: &[(Perturbation, u32)] = &[
    (Perturbation::Exact, 8),
    (Perturbation::ToggleModifier, 22),
    (Perturbation::Boundary, 22),
    (Perturbation::Shift, 14),
    (Perturbation::Hallucinate, 14),
    (Perturbation::Number, 10),
    (Perturbation::Swap, 10),
];

fn clamp_span(a: isize, b: isize, n: usize) -> (usize, usize) {
    let a = a.clamp(0, n as isize - 1) as usize;
    let b = b.clamp(a as isize, n as isize - 1) as usize;
    (a, b)
}

fn perturb_span(rng: &mut ChaCha8Rng, (a, b): (usize, usize), n: usize) -> (usize, usize) {
    let da: isize = [-1, 0, 0, 1].choose(rng).copied().unwrap();
    let db: isize = [-2, -1, 0, 1].choose(rng).copied().unwrap();
    let (a2, b2) = clamp_span(a as isize + da, b as isize + db, n);
    if (a2, b2) == (a, b) {
        clamp_span(a as isize, b as isize - 1, n)
    } else {
        (a2, b2)
    }
}

fn fragment(rng: &mut ChaCha8Rng, (a, b): (usize, usize)) -> (usize, usize) {
    let len = b - a + 1;
    let keep = (len / 3).max(1);
    let start = a + rng.random_range(0..=(len - keep));
    (start, start + keep - 1)
}

/// Build one model output for `s` by applying a random perturbation.
fn perturbed_output(rng: &mut ChaCha8Rng, s: &SynthInstance) -> Extraction {
    let n = s.tokens.len();
    let kind = PERTURBATIONS
        .choose_weighted(rng, |(_, w)| *w)
        .map(|(k, _)| *k)
        .unwrap();
    let rel = s.instance.gold.relation();
    let text = |span| span_text(&s.tokens, span);
    let build = |c: String, e: String| Extraction::new(&c, rel, &e).expect("non-empty perturbation");
    let target_cause = rng.random_bool(0.5);
    match kind {
        Perturbation::Exact => s.instance.gold.clone(),
        Perturbation::ToggleModifier => match s.alt_cause {
            Some(alt) => build(text(alt), text(s.effect)),
            None => build(text(perturb_span(rng, s.cause, n)), text(s.effect)),
        },
        Perturbation::Boundary => {
            if target_cause {
                build(text(perturb_span(rng, s.cause, n)), text(s.effect))
            } else {
                build(text(s.cause), text(perturb_span(rng, s.effect, n)))
            }
        }
        Perturbation::Shift => {
            if target_cause {
                build(text(fragment(rng, s.cause)), text(s.effect))
            } else {
                build(text(s.cause), text(fragment(rng, s.effect)))
            }
        }
        Perturbation::Hallucinate => {
            let span = if target_cause { s.cause } else { s.effect };
            let mut toks: Vec<String> = s.tokens[span.0..=span.1].to_vec();
            let i = rng.random_range(0..toks.len());
            toks[i] = FOREIGN.choose(rng).unwrap().to_string();
            if target_cause {
                build(toks.join(" "), text(s.effect))
            } else {
                build(text(s.cause), toks.join(" "))
            }
        }
        Perturbation::Number => {
            let span = if target_cause { s.cause } else { s.effect };
            let mut toks: Vec<String> = s.tokens[span.0..=span.1].to_vec();
            let fresh = format!("{}", rng.random_range(100..999));
            match toks.iter().position(|t| t.chars().any(|c| c.is_ascii_digit())) {
                Some(i) => toks[i] = fresh,
                None => toks.extend(["by".to_string(), fresh, "percent".to_string()]),
            }
            if target_cause {
                build(toks.join(" "), text(s.effect))
            } else {
                build(text(s.cause), toks.join(" "))
            }
        }
        Perturbation::Swap => build(text(s.effect), text(s.cause)),
    }
}

/// Pair each instance with a perturbed output and label it with `oracle`.
pub fn generate_labeled(instances: &[SynthInstance], oracle: &RuleOracle, seed: u64) -> Vec<LabeledEvaluation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1abe_11ed);
    instances
        .iter()
        .map(|s| {
            let input = EvaluationInput {
                source: s.instance.context.clone(),
                reference: s.instance.gold.clone(),
                output: perturbed_output(&mut rng, s),
            };
            LabeledEvaluation {
                id: s.instance.id.clone(),
                verdict: oracle.judge(&input),
                input,
                annotator: None,
            }
        })
        .collect()
}

/// Convenience: `n` passages and their labeled outputs.
pub fn labeled_corpus(n: usize, cfg: &SynthConfig) -> Vec<LabeledEvaluation> {
    generate_labeled(&generate_instances(n, cfg), &RuleOracle::default(), cfg.seed)
}

/// Shuffle and cut `items` into two parts, the first holding `share` of them.
pub fn shuffle_split<T: Clone>(items: &[T], share: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut v = items.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = (v.len() as f64 * share).round() as usize;
    let rest = v.split_off(k.min(v.len()));
    (v, rest)
}
