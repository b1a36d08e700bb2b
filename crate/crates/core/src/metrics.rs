//! Extraction metrics (token P/R/F1, ROUGE-L, exact match, "w/o EM") and
//! agreement statistics between verdict series (percent agreement, Cohen's
//! kappa, Pearson correlation).

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tagged::{normalize_ws, Extraction};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("series ids are not aligned at position {0}")]
    IdMismatch(usize),
    #[error("id {0:?} missing from the second series")]
    MissingId(String),
    #[error("malformed verdict {0:?}")]
    BadVerdict(String),
}

/// Binary human (or model) judgement of an extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Valid,
    Invalid,
}

impl Verdict {
    pub fn from_bool(valid: bool) -> Self {
        if valid {
            Verdict::Valid
        } else {
            Verdict::Invalid
        }
    }

    pub fn is_valid(self) -> bool {
        self == Verdict::Valid
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Valid => "valid",
            Verdict::Invalid => "invalid",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Verdict {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "valid" => Ok(Verdict::Valid),
            "invalid" => Ok(Verdict::Invalid),
            _ => Err(MetricError::BadVerdict(s.to_string())),
        }
    }
}

/// Verdicts keyed by instance id, in order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictSeries {
    pub entries: Vec<(String, Verdict)>,
}

impl VerdictSeries {
    pub fn new(entries: Vec<(String, Verdict)>) -> Self {
        Self { entries }
    }

    pub fn verdicts(&self) -> Vec<Verdict> {
        self.entries.iter().map(|(_, v)| *v).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Check that both series carry the same ids in the same order.
    pub fn check_aligned(&self, other: &VerdictSeries) -> Result<(), MetricError> {
        if self.len() != other.len() {
            return Err(MetricError::LengthMismatch(self.len(), other.len()));
        }
        match self.entries.iter().zip(&other.entries).position(|(a, b)| a.0 != b.0) {
            Some(i) => Err(MetricError::IdMismatch(i)),
            None => Ok(()),
        }
    }

    /// Reorder `other` to follow this series' id order.
    pub fn align(&self, other: &VerdictSeries) -> Result<(Vec<Verdict>, Vec<Verdict>), MetricError> {
        if self.len() != other.len() {
            return Err(MetricError::LengthMismatch(self.len(), other.len()));
        }
        let lookup: HashMap<&str, Verdict> =
            other.entries.iter().map(|(id, v)| (id.as_str(), *v)).collect();
        let mut b = Vec::with_capacity(self.len());
        for (id, _) in &self.entries {
            match lookup.get(id.as_str()) {
                Some(v) => b.push(*v),
                None => return Err(MetricError::MissingId(id.clone())),
            }
        }
        Ok((self.verdicts(), b))
    }
}

/// Precision / recall / F1.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf<F> {
    pub precision: F,
    pub recall: F,
    pub f1: F,
}

impl<F: Scalar> Prf<F> {
    pub fn from_pr(precision: F, recall: F) -> Self {
        let sum = precision + recall;
        let f1 = if sum > F::zero() { F::of(2.0) * precision * recall / sum } else { F::zero() };
        Self { precision, recall, f1 }
    }

    pub fn from_counts(true_pos: usize, predicted: usize, actual: usize) -> Self {
        let ratio = |n: usize, d: usize| {
            if d == 0 {
                F::zero()
            } else {
                F::of(n as f64) / F::of(d as f64)
            }
        };
        Self::from_pr(ratio(true_pos, predicted), ratio(true_pos, actual))
    }

    pub fn ones() -> Self {
        Self { precision: F::one(), recall: F::one(), f1: F::one() }
    }

    /// Component-wise mean. F1 is averaged, not recomputed.
    pub fn mean(items: &[Prf<F>]) -> Self {
        if items.is_empty() {
            return Self::default_zero();
        }
        let n = F::of(items.len() as f64);
        Self {
            precision: items.iter().map(|p| p.precision).sum::<F>() / n,
            recall: items.iter().map(|p| p.recall).sum::<F>() / n,
            f1: items.iter().map(|p| p.f1).sum::<F>() / n,
        }
    }

    fn default_zero() -> Self {
        Self { precision: F::zero(), recall: F::zero(), f1: F::zero() }
    }
}

fn is_punct(c: char) -> bool {
    // Unicode "P" categories for ASCII; currency and math symbols are kept.
    matches!(
        c,
        '!' | '"' | '#' | '%' | '&' | '\'' | '(' | ')' | '*' | ',' | '-' | '.' | '/' | ':' | ';'
            | '?' | '@' | '[' | '\\' | ']' | '_' | '{' | '}'
            | '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}' | '\u{2013}' | '\u{2014}'
            | '\u{2026}' | '\u{00AB}' | '\u{00BB}' | '\u{00A1}' | '\u{00BF}'
    )
}

/// Lowercase, split on whitespace, strip leading/trailing punctuation from
/// each token and drop tokens that become empty.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(is_punct).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

fn bag(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

/// Size of the multiset intersection of two token lists.
pub fn bag_overlap(a: &[String], b: &[String]) -> usize {
    let bb = bag(b);
    bag(a).iter().map(|(t, n)| (*n).min(*bb.get(t).unwrap_or(&0))).sum()
}

/// Bag-of-tokens P/R/F1 between two texts.
pub fn field_prf<F: Scalar>(pred: &str, gold: &str) -> Prf<F> {
    let p = normalize_tokens(pred);
    let g = normalize_tokens(gold);
    if g.is_empty() && p.is_empty() {
        return Prf::ones();
    }
    Prf::from_counts(bag_overlap(&p, &g), p.len(), g.len())
}

/// Token P/R/F1 macro-averaged over the cause and effect fields.
pub fn token_prf<F: Scalar>(pred: &Extraction, gold: &Extraction) -> Prf<F> {
    Prf::mean(&[field_prf(pred.cause(), gold.cause()), field_prf(pred.effect(), gold.effect())])
}

fn em_key(text: &str) -> String {
    normalize_ws(text).to_lowercase()
}

/// Case-insensitive, whitespace-normalized equality of all three parts.
pub fn exact_match(pred: &Extraction, gold: &Extraction) -> bool {
    pred.relation() == gold.relation()
        && em_key(pred.cause()) == em_key(gold.cause())
        && em_key(pred.effect()) == em_key(gold.effect())
}

/// Length of the longest common subsequence of two token lists.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1 between two texts over normalized tokens.
pub fn rouge_l<F: Scalar>(pred: &str, gold: &str) -> F {
    let p = normalize_tokens(pred);
    let g = normalize_tokens(gold);
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return F::one(),
        (true, false) | (false, true) => return F::zero(),
        _ => {}
    }
    Prf::<F>::from_counts(lcs_len(&p, &g), p.len(), g.len()).f1
}

/// ROUGE-L macro-averaged over the cause and effect fields.
pub fn rouge_l_extraction<F: Scalar>(pred: &Extraction, gold: &Extraction) -> F {
    (rouge_l::<F>(pred.cause(), gold.cause()) + rouge_l::<F>(pred.effect(), gold.effect()))
        / F::of(2.0)
}

fn trigrams(text: &str) -> HashMap<String, usize> {
    let chars: Vec<char> = normalize_ws(text).to_lowercase().chars().collect();
    let mut m = HashMap::new();
    if chars.is_empty() {
        return m;
    }
    if chars.len() < 3 {
        m.insert(chars.iter().collect(), 1);
        return m;
    }
    for w in chars.windows(3) {
        *m.entry(w.iter().collect()).or_insert(0) += 1;
    }
    m
}

/// Cosine similarity of character-trigram count vectors (lowercased,
/// whitespace-normalized). Two empty texts score 1.
pub fn trigram_cosine<F: Scalar>(a: &str, b: &str) -> F {
    let (ta, tb) = (trigrams(a), trigrams(b));
    match (ta.is_empty(), tb.is_empty()) {
        (true, true) => return F::one(),
        (true, false) | (false, true) => return F::zero(),
        _ => {}
    }
    let dot: usize = ta.iter().map(|(g, n)| n * tb.get(g).unwrap_or(&0)).sum();
    let norm = |m: &HashMap<String, usize>| (m.values().map(|n| (n * n) as f64).sum::<f64>()).sqrt();
    let cos = dot as f64 / (norm(&ta) * norm(&tb));
    F::of(cos.min(1.0))
}

pub fn percent_agreement<F: Scalar>(a: &[Verdict], b: &[Verdict]) -> Result<F, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(F::zero());
    }
    let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
    Ok(F::of(same as f64) / F::of(a.len() as f64))
}

/// Cohen's kappa. `degenerate` is set when chance agreement is 1, in which
/// case the value is reported as 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kappa<F> {
    pub value: F,
    pub degenerate: bool,
}

pub fn cohens_kappa<F: Scalar>(a: &[Verdict], b: &[Verdict]) -> Result<Kappa<F>, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(Kappa { value: F::one(), degenerate: true });
    }
    let n = F::of(a.len() as f64);
    let observed = percent_agreement::<F>(a, b)?;
    let share = |s: &[Verdict]| F::of(s.iter().filter(|v| v.is_valid()).count() as f64) / n;
    let (pa, pb) = (share(a), share(b));
    let expected = pa * pb + (F::one() - pa) * (F::one() - pb);
    if expected >= F::one() {
        return Ok(Kappa { value: F::one(), degenerate: true });
    }
    Ok(Kappa { value: (observed - expected) / (F::one() - expected), degenerate: false })
}

/// Product-moment correlation. `None` when either series is constant or
/// the inputs are empty or of different lengths.
pub fn pearson<F: Scalar>(x: &[F], y: &[F]) -> Option<F> {
    if x.len() != y.len() || x.is_empty() {
        return None;
    }
    let n = F::of(x.len() as f64);
    let mx = x.iter().copied().sum::<F>() / n;
    let my = y.iter().copied().sum::<F>() / n;
    let (mut sxy, mut sxx, mut syy) = (F::zero(), F::zero(), F::zero());
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= F::zero() || syy <= F::zero() {
        return None;
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    Some(r.max(-F::one()).min(F::one()))
}

/// Pearson correlation of continuous scores against binary verdicts (valid = 1).
pub fn pearson_binary<F: Scalar>(scores: &[F], labels: &[Verdict]) -> Option<F> {
    let y: Vec<F> = labels.iter().map(|v| if v.is_valid() { F::one() } else { F::zero() }).collect();
    pearson(scores, &y)
}

/// A fraction that may have been computed over no items.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate<F> {
    pub value: F,
    pub empty: bool,
}

/// Share of records judged valid that are not exact matches of the reference.
pub fn without_em_rate<F: Scalar>(records: &[(Verdict, bool)]) -> Rate<F> {
    if records.is_empty() {
        return Rate { value: F::zero(), empty: true };
    }
    let hits = records.iter().filter(|(v, em)| v.is_valid() && !em).count();
    Rate { value: F::of(hits as f64) / F::of(records.len() as f64), empty: false }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tagged::Relation;
    use approx::assert_abs_diff_eq;

    fn ex(c: &str, e: &str) -> Extraction {
        Extraction::new(c, Relation::Cause, e).unwrap()
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(normalize_tokens("The firm's gross margin,"), ["the", "firm's", "gross", "margin"]);
        assert!(normalize_tokens("").is_empty());
        assert_eq!(normalize_tokens("$75.00, indicating"), ["$75.00", "indicating"]);
        assert_eq!(normalize_tokens(" -- ( ) "), Vec::<String>::new());
    }

    #[test]
    fn token_prf_half_and_full_fields() {
        let p = token_prf::<f64>(&ex("a b", "x y"), &ex("b c", "x y"));
        assert_abs_diff_eq!(p.f1, 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(p.precision, 0.75, epsilon = 1e-12);
        let same = token_prf::<f64>(&ex("a b", "c"), &ex("a b", "c"));
        assert_eq!(same, Prf::ones());
        let none = token_prf::<f64>(&ex("a", "b"), &ex("c", "d"));
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn field_prf_multiset_counts() {
        // pred a a b, gold a b b: overlap min(2,1)+min(1,2) = 2
        let p = field_prf::<f64>("a a b", "a b b");
        assert_abs_diff_eq!(p.precision, 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.recall, 2.0 / 3.0, epsilon = 1e-12);
        assert_eq!(field_prf::<f64>("", ""), Prf::ones());
        assert_eq!(field_prf::<f64>("a", "").f1, 0.0);
    }

    #[test]
    fn exact_match_normalization() {
        let gold = ex("the incorporation of crack spread futures curves despite a recent uptick", "Our near-term earnings forecast is depressed.");
        let out = ex("the incorporation of poor crack spread futures curves", "Our near-term earnings forecast is depressed.");
        assert!(!exact_match(&out, &gold));
        assert!(exact_match(&gold, &gold));
        let spaced = ex("THE incorporation  of crack spread futures curves despite a recent   uptick", "our near-term earnings forecast is depressed.");
        assert!(exact_match(&spaced, &gold));
        let other_rel = gold.clone().with_relation(Relation::Enable);
        assert!(!exact_match(&other_rel, &gold));
    }

    #[test]
    fn rouge_cases() {
        assert_eq!(rouge_l::<f64>("a b", "a b"), 1.0);
        assert_abs_diff_eq!(rouge_l::<f64>("a c d", "a b c d"), 6.0 / 7.0, epsilon = 1e-12);
        assert_eq!(rouge_l::<f64>("a", "b"), 0.0);
        assert_eq!(rouge_l::<f64>("", ""), 1.0);
        assert_eq!(rouge_l::<f64>("", "a"), 0.0);
    }

    #[test]
    fn trigram_cosine_cases() {
        assert_abs_diff_eq!(trigram_cosine::<f64>("Rates rose", "rates  rose"), 1.0, epsilon = 1e-12);
        assert_eq!(trigram_cosine::<f64>("abc", "xyz"), 0.0);
        // "abcd" -> {abc, bcd}, "abce" -> {abc, bce}: 1 / (sqrt2 * sqrt2)
        assert_abs_diff_eq!(trigram_cosine::<f64>("abcd", "abce"), 0.5, epsilon = 1e-12);
        assert_eq!(trigram_cosine::<f64>("", ""), 1.0);
    }

    #[test]
    fn agreement_and_kappa_boundaries() {
        use Verdict::*;
        let a = [Valid, Invalid, Valid, Invalid];
        let b = [Invalid, Valid, Invalid, Valid];
        assert_eq!(percent_agreement::<f64>(&a, &a).unwrap(), 1.0);
        assert_eq!(percent_agreement::<f64>(&a, &b).unwrap(), 0.0);
        assert_eq!(cohens_kappa::<f64>(&a, &a).unwrap().value, 1.0);
        assert_abs_diff_eq!(cohens_kappa::<f64>(&a, &b).unwrap().value, -1.0, epsilon = 1e-12);
        let k = cohens_kappa::<f64>(&[Valid, Valid], &[Valid, Valid]).unwrap();
        assert!(k.degenerate && k.value == 1.0);
        assert!(matches!(percent_agreement::<f64>(&a, &b[..3]), Err(MetricError::LengthMismatch(4, 3))));
    }

    #[test]
    fn agreement_94_of_100() {
        let a = vec![Verdict::Valid; 100];
        let mut b = a.clone();
        for v in b.iter_mut().take(6) {
            *v = Verdict::Invalid;
        }
        assert_abs_diff_eq!(percent_agreement::<f64>(&a, &b).unwrap(), 0.94, epsilon = 1e-12);
    }

    #[test]
    fn pearson_edges() {
        assert_abs_diff_eq!(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0, epsilon = 1e-12);
        assert!(pearson(&[1.0, 1.0], &[0.0, 1.0]).is_none());
        assert!(pearson::<f64>(&[], &[]).is_none());
    }

    #[test]
    fn without_em() {
        use Verdict::*;
        assert_eq!(without_em_rate::<f64>(&[(Valid, true), (Valid, true)]).value, 0.0);
        let mut recs = vec![(Valid, false); 13];
        recs.extend(vec![(Invalid, false); 87]);
        assert_abs_diff_eq!(without_em_rate::<f64>(&recs).value, 0.13, epsilon = 1e-12);
        // valid∧¬EM, valid∧EM, invalid∧¬EM, valid∧¬EM → 2/4
        let mixed = [(Valid, false), (Valid, true), (Invalid, false), (Valid, false)];
        assert_eq!(without_em_rate::<f64>(&mixed).value, 0.5);
        assert!(without_em_rate::<f64>(&[]).empty);
    }

    #[test]
    fn series_alignment() {
        let a = VerdictSeries::new(vec![("1".into(), Verdict::Valid), ("2".into(), Verdict::Invalid)]);
        let b = VerdictSeries::new(vec![("2".into(), Verdict::Valid), ("1".into(), Verdict::Valid)]);
        assert!(matches!(a.check_aligned(&b), Err(MetricError::IdMismatch(0))));
        let (x, y) = a.align(&b).unwrap();
        assert_eq!(x, [Verdict::Valid, Verdict::Invalid]);
        assert_eq!(y, [Verdict::Valid, Verdict::Valid]);
    }
}
