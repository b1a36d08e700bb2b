use ndarray::{Array1, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{assemble_extraction, ExtractorError, Forward, PolicyModel, SourceTokens, SpanAction, Step};
use crate::scalar::Scalar;
use crate::tagged::Extraction;

/// Softmax over the unmasked entries; masked entries get probability 0.
pub fn masked_softmax<F: Scalar>(logits: ArrayView1<F>, mask: &[bool]) -> Array1<F> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(v, _)| *v)
        .fold(F::neg_infinity(), F::max);
    let mut out: Array1<F> =
        logits.iter().zip(mask).map(|(v, m)| if *m { (*v - max).exp() } else { F::zero() }).collect();
    let z: F = out.sum();
    out.mapv_inplace(|v| v / z);
    out
}

/// Positions allowed at `step`, given the earlier choices in decode order.
pub fn step_mask(step: Step, n: usize, prior: &[usize], fixed_relation: Option<usize>) -> Result<Vec<bool>, ExtractorError> {
    let mask: Vec<bool> = match step {
        Step::CauseStart => (0..n).map(|_| n >= 2).collect(),
        Step::CauseEnd => {
            let cs = prior[0];
            (0..n).map(|t| t >= cs && !(cs == 0 && t == n - 1)).collect()
        }
        Step::EffectStart => {
            let (cs, ce) = (prior[0], prior[1]);
            (0..n).map(|t| t < cs || t > ce).collect()
        }
        Step::EffectEnd => {
            let (cs, es) = (prior[0], prior[2]);
            (0..n).map(|t| t >= es && (es > cs || t < cs)).collect()
        }
        Step::Relation => (0..3).map(|r| fixed_relation.is_none_or(|f| f == r)).collect(),
    };
    if mask.iter().any(|m| *m) {
        Ok(mask)
    } else {
        Err(ExtractorError::Infeasible(step))
    }
}

/// Distribution and choice at one decode step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace<F> {
    pub step: Step,
    pub probs: Vec<F>,
    pub chosen: usize,
    pub log_prob: F,
}

/// A full decode: the action, per-step traces and the value estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionTrace<F> {
    pub action: SpanAction,
    pub steps: Vec<StepTrace<F>>,
    pub log_prob: F,
    pub value: F,
}

impl<F: Scalar> ActionTrace<F> {
    /// Gradient of `log_prob` with respect to the pointer and relation
    /// logits, scaled by `coef` and added into the given buffers.
    pub fn add_log_prob_grad(&self, coef: F, d_pointer: &mut ndarray::Array2<F>, d_relation: &mut Array1<F>) {
        for st in &self.steps {
            let mut add = |i: usize, g: F| match st.step.pointer_row() {
                Some(r) => d_pointer[[r, i]] += g,
                None => d_relation[i] += g,
            };
            for (i, p) in st.probs.iter().enumerate() {
                let one = if i == st.chosen { F::one() } else { F::zero() };
                add(i, coef * (one - *p));
            }
        }
    }
}

enum Chooser<'a, R> {
    Greedy,
    Sample(&'a mut R),
    Forced([usize; 5]),
}

impl<F: Scalar> PolicyModel<F> {
    fn fixed_index(&self) -> Option<usize> {
        self.fixed_relation.map(|r| r.index())
    }

    fn run_decode<R: Rng>(&self, fw: &Forward<F>, mut chooser: Chooser<'_, R>) -> Result<ActionTrace<F>, ExtractorError> {
        let n = fw.len();
        let mut prior = Vec::with_capacity(5);
        let mut steps = Vec::with_capacity(5);
        let mut total = F::zero();
        for step in Step::ORDER {
            let mask = step_mask(step, n, &prior, self.fixed_index())?;
            let logits = match step.pointer_row() {
                Some(r) => fw.pointer.row(r),
                None => fw.relation.view(),
            };
            let probs = masked_softmax(logits, &mask);
            let chosen = match &mut chooser {
                Chooser::Greedy => {
                    // first maximum wins ties
                    let mut best = mask.iter().position(|m| *m).expect("mask has an entry");
                    for (i, p) in probs.iter().enumerate() {
                        if mask[i] && *p > probs[best] {
                            best = i;
                        }
                    }
                    best
                }
                Chooser::Sample(rng) => {
                    let u = F::of(rng.random::<f64>());
                    let mut acc = F::zero();
                    let mut pick = None;
                    for (i, p) in probs.iter().enumerate() {
                        if mask[i] {
                            acc += *p;
                            pick = Some(i);
                            if u < acc {
                                break;
                            }
                        }
                    }
                    pick.expect("mask has an entry")
                }
                Chooser::Forced(c) => {
                    let idx = c[prior.len()];
                    if idx >= mask.len() || !mask[idx] {
                        return Err(ExtractorError::InvalidAction(SpanAction::from_choices(*c)));
                    }
                    idx
                }
            };
            let log_prob = probs[chosen].ln();
            total += log_prob;
            prior.push(chosen);
            steps.push(StepTrace { step, probs: probs.to_vec(), chosen, log_prob });
        }
        let choices = [prior[0], prior[1], prior[2], prior[3], prior[4]];
        Ok(ActionTrace { action: SpanAction::from_choices(choices), steps, log_prob: total, value: fw.value })
    }

    pub fn decode_greedy(&self, fw: &Forward<F>) -> Result<ActionTrace<F>, ExtractorError> {
        self.run_decode::<rand::rngs::ThreadRng>(fw, Chooser::Greedy)
    }

    pub fn sample(&self, fw: &Forward<F>, rng: &mut impl Rng) -> Result<ActionTrace<F>, ExtractorError> {
        self.run_decode(fw, Chooser::Sample(rng))
    }

    /// Trace of a given action under the current parameters.
    pub fn score_action(&self, fw: &Forward<F>, action: &SpanAction) -> Result<ActionTrace<F>, ExtractorError> {
        if !action.is_valid(fw.len()) {
            return Err(ExtractorError::InvalidAction(*action));
        }
        self.run_decode::<rand::rngs::ThreadRng>(fw, Chooser::Forced(action.choices()))
    }

    /// Greedy extraction from raw text.
    pub fn decode_context(&self, text: &str) -> Result<(Extraction, ActionTrace<F>), ExtractorError> {
        let source = SourceTokens::new(text);
        let fw = self.forward_source(&source)?;
        let trace = self.decode_greedy(&fw)?;
        Ok((assemble_extraction(&source, &trace.action)?, trace))
    }

    pub fn extract(&self, text: &str) -> Result<Extraction, ExtractorError> {
        self.decode_context(text).map(|(e, _)| e)
    }

    pub fn sample_context(&self, text: &str, rng: &mut impl Rng) -> Result<(SpanAction, ActionTrace<F>), ExtractorError> {
        let fw = self.forward_source(&SourceTokens::new(text))?;
        let trace = self.sample(&fw, rng)?;
        Ok((trace.action, trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::{PolicyConfig, Vocab};
    use crate::tagged::Relation;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn masked_entries_are_zero() {
        let p = masked_softmax::<f64>(Array1::from(vec![1.0, 50.0, 2.0]).view(), &[true, false, true]);
        assert_eq!(p[1], 0.0);
        assert_abs_diff_eq!(p.sum(), 1.0, epsilon = 1e-12);
        assert!(p[2] > p[0]);
    }

    #[test]
    fn too_short_source_is_infeasible() {
        assert_eq!(step_mask(Step::CauseStart, 1, &[], None), Err(ExtractorError::Infeasible(Step::CauseStart)));
    }

    #[test]
    fn fixed_relation_is_forced() {
        let vocab = Vocab::build(["a b c d"]);
        let m = PolicyModel::<f64>::new(vocab, PolicyConfig::default(), Some(Relation::Cause));
        let fw = m.forward_source(&SourceTokens::new("a b c d")).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(m.sample(&fw, &mut rng).unwrap().action.relation, Relation::Cause);
        }
    }

    #[test]
    fn forced_trace_matches_sample() {
        let vocab = Vocab::build(["a b c d e"]);
        let m = PolicyModel::<f64>::new(vocab, PolicyConfig { seed: 3, ..Default::default() }, None);
        let fw = m.forward_source(&SourceTokens::new("a b c d e")).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = m.sample(&fw, &mut rng).unwrap();
        let s = m.score_action(&fw, &t.action).unwrap();
        assert_abs_diff_eq!(t.log_prob, s.log_prob, epsilon = 1e-12);
    }

    #[test]
    fn uniform_scores_renormalize_over_mask() {
        let mask = step_mask(Step::CauseEnd, 4, &[2], None).unwrap();
        let p = masked_softmax::<f64>(Array1::zeros(4).view(), &mask);
        assert_eq!(p.to_vec(), vec![0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn cause_covering_everything_blocks_effect() {
        assert_eq!(step_mask(Step::EffectStart, 3, &[0, 2], None), Err(ExtractorError::Infeasible(Step::EffectStart)));
    }

    #[test]
    fn hand_computed_softmax() {
        let logits = [0.3f64, -1.2, 2.0];
        let p = masked_softmax(Array1::from(logits.to_vec()).view(), &[true; 3]);
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        for (pi, l) in p.iter().zip(logits) {
            assert_abs_diff_eq!(*pi, l.exp() / z, epsilon = 1e-15);
        }
    }

    fn zero_model(text: &str, dim: usize) -> PolicyModel<f64> {
        let mut m = PolicyModel::<f64>::new(Vocab::build([text]), PolicyConfig { embed_dim: dim, hidden: dim, seed: 0 }, None);
        let z = m.params.zeros_like();
        m.params = z;
        m
    }

    #[test]
    fn one_token_context_is_infeasible() {
        let m = zero_model("a", 4);
        assert_eq!(m.extract("a"), Err(ExtractorError::Infeasible(Step::CauseStart)));
        assert_eq!(m.extract("   "), Err(ExtractorError::EmptySource));
    }

    #[test]
    fn all_ties_pick_lowest_indices() {
        let m = zero_model("a b", 4);
        let (e, trace) = m.decode_context("a b").unwrap();
        assert_eq!(e, Extraction::new("a", Relation::Cause, "b").unwrap());
        assert!(trace.steps.iter().all(|s| (s.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn hand_set_parameters_select_expected_spans() {
        let text = "a b c d e";
        let mut m = zero_model(text, 5);
        let p = &mut m.params;
        for id in 1..=5 {
            p.embed[[id, id - 1]] = 2.0;
        }
        for k in 0..5 {
            p.fwd.w_x[[k, k]] = 1.0;
            p.bwd.w_x[[k, k]] = 1.0;
        }
        // row -> favoured position
        for (row, pos) in [(0, 3), (1, 4), (2, 0), (3, 1)] {
            p.pointer_w[[row, pos]] = 1.0;
        }
        p.relation_b[2] = 1.0;
        let (e, trace) = m.decode_context(text).unwrap();
        assert_eq!(e, Extraction::new("d e", Relation::Enable, "a b").unwrap());
        assert_eq!(trace.action.choices(), [3, 4, 0, 1, 2]);
        // direct evaluation of the first step: score tanh(2) at position 3, 0 elsewhere
        let t = 2.0f64.tanh();
        let z = 4.0 + t.exp();
        assert_abs_diff_eq!(trace.steps[0].probs[3], t.exp() / z, epsilon = 1e-12);
        for s in &trace.steps {
            assert_abs_diff_eq!(s.log_prob, s.probs[s.chosen].ln(), epsilon = 1e-15);
        }
    }

    #[test]
    fn single_option_steps_have_zero_log_prob() {
        let mut m = zero_model("a b", 2);
        m.fixed_relation = Some(Relation::Prevent);
        m.params.pointer_b[0] = 100.0;
        // n = 2 with cause start 1 forces every later step
        let fw = m.forward_source(&SourceTokens::new("a b")).unwrap();
        let a = SpanAction { cause_start: 1, cause_end: 1, effect_start: 0, effect_end: 0, relation: Relation::Prevent };
        let t = m.score_action(&fw, &a).unwrap();
        assert!(t.steps[1..].iter().all(|s| s.log_prob == 0.0));
    }

    #[test]
    fn sampling_frequencies_match_distribution() {
        let text = "a b c d";
        let m = PolicyModel::<f64>::new(Vocab::build([text]), PolicyConfig { embed_dim: 8, hidden: 8, seed: 12 }, None);
        let fw = m.forward_source(&SourceTokens::new(text)).unwrap();
        let exact = m.decode_greedy(&fw).unwrap().steps[0].probs.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let draws = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            counts[m.sample(&fw, &mut rng).unwrap().action.cause_start] += 1;
        }
        for (c, p) in counts.iter().zip(&exact) {
            let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - draws as f64 * p).abs() <= 3.0 * sigma, "count {c} p {p}");
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let text = "a b c d e f";
        let m = PolicyModel::<f64>::new(Vocab::build([text]), PolicyConfig { embed_dim: 8, hidden: 8, seed: 2 }, None);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10).map(|_| m.sample_context(text, &mut rng).unwrap().0).collect::<Vec<_>>()
        };
        assert_eq!(run(4), run(4));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn decoded_actions_are_valid(n in 2usize..20, seed in 0u64..1000) {
            let text: Vec<String> = (0..n).map(|i| format!("w{}", i % 7)).collect();
            let text = text.join(" ");
            let vocab = Vocab::build([text.as_str()]);
            let m = PolicyModel::<f64>::new(vocab, PolicyConfig { embed_dim: 8, hidden: 8, seed }, None);
            let src = SourceTokens::new(&text);
            let fw = m.forward_source(&src).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for t in [m.decode_greedy(&fw).unwrap(), m.sample(&fw, &mut rng).unwrap()] {
                prop_assert!(t.action.is_valid(n));
                prop_assert!(t.log_prob.is_finite());
                let e = assemble_extraction(&src, &t.action).unwrap();
                prop_assert!(text.contains(e.cause()) && text.contains(e.effect()));
            }
        }
    }
}
