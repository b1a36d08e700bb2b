//! Weak-to-strong evaluator training: seed split, pseudo-labels,
//! per-class confidence filtering and retraining.

use std::cmp::Ordering;

use log::{info, warn};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::{train_evaluator, EvaluationInput, EvaluatorConfig, EvaluatorError, EvaluatorModel, LabeledEvaluation};
use crate::metrics::Verdict;
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum WeakError {
    #[error("no labeled data")]
    EmptyData,
    #[error("x = {x} leaves an empty {side} ({n} items)")]
    EmptySide { x: f64, side: &'static str, n: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Evaluator(#[from] EvaluatorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakConfig {
    /// Share of labeled data used as the seed set.
    pub x_percent: f64,
    /// Per-class share of pseudo-labels retained.
    pub keep_fraction: f64,
    /// Downsample the larger retained class to the smaller one.
    pub balance: bool,
    pub seed: u64,
    pub evaluator: EvaluatorConfig,
}

impl Default for WeakConfig {
    fn default() -> Self {
        Self { x_percent: 0.5, keep_fraction: 0.75, balance: true, seed: 0, evaluator: EvaluatorConfig::default() }
    }
}

impl WeakConfig {
    pub fn validate(&self) -> Result<(), WeakError> {
        if !(self.x_percent > 0.0 && self.x_percent < 1.0) {
            return Err(WeakError::Config(format!("x_percent must be in (0, 1), got {}", self.x_percent)));
        }
        if !(0.0..=1.0).contains(&self.keep_fraction) {
            return Err(WeakError::Config(format!("keep_fraction must be in [0, 1], got {}", self.keep_fraction)));
        }
        Ok(())
    }
}

/// A pool item with the partial evaluator's verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakLabeled {
    pub id: String,
    #[serde(flatten)]
    pub input: EvaluationInput,
    pub pseudo_verdict: Verdict,
    pub confidence: f64,
}

/// Uniform split without replacement: `floor(x * n)` items go to the seed set.
pub fn split_seed(
    data: &[LabeledEvaluation],
    x_percent: f64,
    seed: u64,
) -> Result<(Vec<LabeledEvaluation>, Vec<LabeledEvaluation>), WeakError> {
    if data.is_empty() {
        return Err(WeakError::EmptyData);
    }
    let n = data.len();
    let n_seed = (x_percent * n as f64 + 1e-9).floor() as usize;
    if n_seed == 0 {
        return Err(WeakError::EmptySide { x: x_percent, side: "seed set", n });
    }
    if n_seed >= n {
        return Err(WeakError::EmptySide { x: x_percent, side: "pool", n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = vec![false; n];
    for i in index::sample(&mut rng, n, n_seed) {
        picked[i] = true;
    }
    let (mut seed_set, mut pool) = (Vec::with_capacity(n_seed), Vec::with_capacity(n - n_seed));
    for (item, p) in data.iter().zip(picked) {
        if p { seed_set.push(item.clone()) } else { pool.push(item.clone()) }
    }
    Ok((seed_set, pool))
}

/// Label every pool item with `model`'s verdict and confidence.
pub fn pseudo_label<F: Scalar>(model: &EvaluatorModel<F>, pool: &[(String, EvaluationInput)]) -> Vec<WeakLabeled> {
    pool.iter()
        .map(|(id, input)| {
            let p = model.predict(input);
            WeakLabeled { id: id.clone(), input: input.clone(), pseudo_verdict: p.verdict, confidence: p.confidence.as_f64() }
        })
        .collect()
}

/// Retained pseudo-labels plus counts before and after balancing.
#[derive(Debug, Clone, PartialEq)]
pub struct Filtered {
    pub kept: Vec<WeakLabeled>,
    /// Per class (valid, invalid) after ranking, before balancing.
    pub ranked_counts: (usize, usize),
    /// Set when a class had no pseudo-labels and balancing emptied the result.
    pub missing_class: bool,
}

/// Keep the `floor(keep_fraction * n_class)` most confident items of each
/// class, then (when `balance`) downsample the larger class uniformly.
pub fn filter_top_confidence(labeled: &[WeakLabeled], keep_fraction: f64, balance: bool, seed: u64) -> Filtered {
    let rank = |class: Verdict| -> Vec<WeakLabeled> {
        let mut items: Vec<WeakLabeled> = labeled.iter().filter(|w| w.pseudo_verdict == class).cloned().collect();
        // stable: equal confidences keep input order
        items.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap_or(Ordering::Equal));
        let keep = (keep_fraction * items.len() as f64 + 1e-9).floor() as usize;
        items.truncate(keep.min(items.len()));
        items
    };
    let mut valid = rank(Verdict::Valid);
    let mut invalid = rank(Verdict::Invalid);
    let ranked_counts = (valid.len(), invalid.len());
    let missing_class = labeled.iter().all(|w| w.pseudo_verdict == Verdict::Valid)
        || labeled.iter().all(|w| w.pseudo_verdict == Verdict::Invalid);
    if balance {
        let target = valid.len().min(invalid.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba1a_2ce5);
        for class in [&mut valid, &mut invalid] {
            if class.len() > target {
                let mut idx = index::sample(&mut rng, class.len(), target).into_vec();
                idx.sort_unstable();
                *class = idx.into_iter().map(|i| class[i].clone()).collect();
            }
        }
    }
    if missing_class {
        warn!("pseudo-labels cover a single class");
    }
    let mut kept = valid;
    kept.extend(invalid);
    Filtered { kept, ranked_counts, missing_class }
}

/// Stage sizes of one weak-to-strong run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakReport {
    pub total: usize,
    pub seed_size: usize,
    pub pool_size: usize,
    pub pseudo_valid: usize,
    pub pseudo_invalid: usize,
    pub ranked_valid: usize,
    pub ranked_invalid: usize,
    pub kept_valid: usize,
    pub kept_invalid: usize,
    pub missing_class: bool,
    pub final_train_size: usize,
    pub x_percent: f64,
    pub keep_fraction: f64,
    pub balance: bool,
    pub seed: u64,
}

/// Split, train on the seed set, pseudo-label the pool, filter, and retrain
/// on seed set plus retained pseudo-labels.
pub fn weak_to_strong_train<F: Scalar>(
    data: &[LabeledEvaluation],
    cfg: &WeakConfig,
) -> Result<(EvaluatorModel<F>, WeakReport), WeakError> {
    cfg.validate()?;
    let (seed_set, pool) = split_seed(data, cfg.x_percent, cfg.seed)?;
    let ev_cfg = EvaluatorConfig { seed: cfg.seed, ..cfg.evaluator.clone() };
    let partial = train_evaluator::<F>(&seed_set, None, &ev_cfg)?;
    // pool verdicts are hidden from here on
    let unlabeled: Vec<(String, EvaluationInput)> = pool.iter().map(|d| (d.id.clone(), d.input.clone())).collect();
    let weak = pseudo_label(&partial, &unlabeled);
    let filtered = filter_top_confidence(&weak, cfg.keep_fraction, cfg.balance, cfg.seed);

    let mut combined = seed_set.clone();
    combined.extend(filtered.kept.iter().map(|w| LabeledEvaluation {
        id: w.id.clone(),
        input: w.input.clone(),
        verdict: w.pseudo_verdict,
        annotator: Some("weak".to_string()),
    }));
    let count = |v: Verdict, set: &[WeakLabeled]| set.iter().filter(|w| w.pseudo_verdict == v).count();
    let report = WeakReport {
        total: data.len(),
        seed_size: seed_set.len(),
        pool_size: pool.len(),
        pseudo_valid: count(Verdict::Valid, &weak),
        pseudo_invalid: count(Verdict::Invalid, &weak),
        ranked_valid: filtered.ranked_counts.0,
        ranked_invalid: filtered.ranked_counts.1,
        kept_valid: count(Verdict::Valid, &filtered.kept),
        kept_invalid: count(Verdict::Invalid, &filtered.kept),
        missing_class: filtered.missing_class,
        final_train_size: combined.len(),
        x_percent: cfg.x_percent,
        keep_fraction: cfg.keep_fraction,
        balance: cfg.balance,
        seed: cfg.seed,
    };
    info!("weak-to-strong: {report:?}");
    let model = if filtered.kept.is_empty() {
        partial
    } else {
        let mut shuffled = combined;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
        train_evaluator::<F>(&shuffled, None, &ev_cfg)?
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tagged::{Extraction, Relation};
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn item(i: usize, verdict: Verdict) -> LabeledEvaluation {
        let e = Extraction::new("a", Relation::Cause, "b").unwrap();
        LabeledEvaluation {
            id: format!("i{i}"),
            input: EvaluationInput { source: "a b".into(), reference: e.clone(), output: e },
            verdict,
            annotator: None,
        }
    }

    fn weak(i: usize, v: Verdict, c: f64) -> WeakLabeled {
        WeakLabeled { id: format!("w{i}"), input: item(i, v).input, pseudo_verdict: v, confidence: c }
    }

    #[test]
    fn split_sizes_round_down() {
        let data: Vec<_> = (0..100).map(|i| item(i, Verdict::Valid)).collect();
        let (s, p) = split_seed(&data, 0.5, 1).unwrap();
        assert_eq!((s.len(), p.len()), (50, 50));
        let (s, p) = split_seed(&data[..10], 0.3, 1).unwrap();
        assert_eq!((s.len(), p.len()), (3, 7));
        assert_eq!(split_seed(&data, 0.5, 9).unwrap(), split_seed(&data, 0.5, 9).unwrap());
        assert!(matches!(split_seed(&data[..3], 0.2, 1), Err(WeakError::EmptySide { .. })));
        assert_eq!(split_seed(&[], 0.5, 1), Err(WeakError::EmptyData));
    }

    #[test]
    fn pseudo_label_definition() {
        use crate::evaluator::Variant;
        let zero = EvaluatorModel::<f64>::zeros(Variant::NoReference);
        assert!(pseudo_label(&zero, &[]).is_empty());
        let mut m = zero.clone();
        let input = item(0, Verdict::Valid).input;
        let bias = m.weights.len() - 1;
        // containment features are 1 and the rest 0 for this input, so z = w_bias + w_c + w_e
        m.weights[bias] = (0.9f64 / 0.1).ln();
        let z: f64 = m.weights.iter().zip(crate::evaluator::extract_features::<f64>(&input, Variant::NoReference)).map(|(w, x)| w * x).sum();
        let w = pseudo_label(&m, &[("x".into(), input.clone())]);
        assert!((1.0 / (1.0 + (-z).exp()) - 0.9).abs() < 1e-12);
        assert_eq!(w[0].pseudo_verdict, Verdict::Valid);
        assert!((w[0].confidence - 0.9).abs() < 1e-12);
        m.weights[bias] = (0.4f64 / 0.6).ln();
        let w = pseudo_label(&m, &[("x".into(), input)]);
        assert_eq!(w[0].pseudo_verdict, Verdict::Invalid);
        assert!((w[0].confidence - 0.6).abs() < 1e-12);
    }

    #[test]
    fn filter_examples() {
        let four: Vec<_> = (0..8).map(|i| weak(i, if i < 4 { Verdict::Valid } else { Verdict::Invalid }, 0.5 + i as f64 / 20.0)).collect();
        let f = filter_top_confidence(&four, 0.75, true, 0);
        assert_eq!(f.kept.len(), 6);
        let ids: HashSet<_> = f.kept.iter().map(|w| w.id.as_str()).collect();
        assert!(!ids.contains("w0") && !ids.contains("w4"));
        assert_eq!(filter_top_confidence(&four, 1.0, true, 0).kept.len(), 8);

        let uneven: Vec<_> = (0..12).map(|i| weak(i, if i < 8 { Verdict::Valid } else { Verdict::Invalid }, 0.5 + i as f64 / 30.0)).collect();
        let f = filter_top_confidence(&uneven, 0.75, true, 0);
        assert_eq!(f.ranked_counts, (6, 3));
        assert_eq!(f.kept.iter().filter(|w| w.pseudo_verdict == Verdict::Valid).count(), 3);
        assert_eq!(f.kept.iter().filter(|w| w.pseudo_verdict == Verdict::Invalid).count(), 3);
        let unbalanced = filter_top_confidence(&uneven, 0.75, false, 0);
        assert_eq!(unbalanced.kept.len(), 9);

        let one_class: Vec<_> = (0..4).map(|i| weak(i, Verdict::Valid, 0.9)).collect();
        let f = filter_top_confidence(&one_class, 0.75, true, 0);
        assert!(f.kept.is_empty() && f.missing_class);
    }

    proptest! {
        #[test]
        fn filter_invariants(
            items in proptest::collection::vec((any::<bool>(), 0.5f64..1.0), 0..60),
            keep in 0.0f64..=1.0,
            seed in 0u64..100,
        ) {
            let labeled: Vec<_> = items.iter().enumerate()
                .map(|(i, (v, c))| weak(i, Verdict::from_bool(*v), *c)).collect();
            let f = filter_top_confidence(&labeled, keep, true, seed);
            let nv = f.kept.iter().filter(|w| w.pseudo_verdict == Verdict::Valid).count();
            prop_assert_eq!(nv, f.kept.len() - nv);
            let raw = filter_top_confidence(&labeled, keep, false, seed);
            for class in [Verdict::Valid, Verdict::Invalid] {
                let kept: HashSet<&str> = raw.kept.iter().filter(|w| w.pseudo_verdict == class).map(|w| w.id.as_str()).collect();
                let min_kept = raw.kept.iter().filter(|w| w.pseudo_verdict == class).map(|w| w.confidence).fold(f64::INFINITY, f64::min);
                for w in labeled.iter().filter(|w| w.pseudo_verdict == class && !kept.contains(w.id.as_str())) {
                    prop_assert!(w.confidence <= min_kept);
                }
            }
        }

        #[test]
        fn split_partitions_data(n in 2usize..80, x in 0.05f64..0.95, seed in 0u64..50) {
            let data: Vec<_> = (0..n).map(|i| item(i, Verdict::Valid)).collect();
            if let Ok((s, p)) = split_seed(&data, x, seed) {
                let a: HashSet<_> = s.iter().map(|d| d.id.clone()).collect();
                let b: HashSet<_> = p.iter().map(|d| d.id.clone()).collect();
                prop_assert!(a.is_disjoint(&b));
                prop_assert_eq!(a.len() + b.len(), n);
            }
        }
    }

    #[test]
    fn zero_keep_trains_on_seed_only() {
        use crate::synth::{labeled_corpus, SynthConfig};
        let data = labeled_corpus(200, &SynthConfig { seed: 4, ..Default::default() });
        let cfg = WeakConfig { keep_fraction: 0.0, ..Default::default() };
        let (model, report) = weak_to_strong_train::<f64>(&data, &cfg).unwrap();
        assert_eq!(report.final_train_size, report.seed_size);
        let (seed_set, _) = split_seed(&data, 0.5, 0).unwrap();
        let direct = train_evaluator::<f64>(&seed_set, None, &cfg.evaluator).unwrap();
        assert_eq!(model, direct);
        let again = weak_to_strong_train::<f64>(&data, &cfg).unwrap();
        assert_eq!(again.0, model);
    }
}
