//! PPO alignment of the span policy against an evaluator reward, with a
//! KL penalty toward a frozen reference policy.

use log::{info, warn};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CausalInstance, DatasetKind};
use crate::evaluator::{EvaluationInput, EvaluatorModel};
use crate::extractor::{assemble_extraction, ActionTrace, ExtractorError, PolicyModel, PolicyParams, SourceTokens, SpanAction};
use crate::metrics::{exact_match, token_prf, trigram_cosine, without_em_rate, Prf, Verdict};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::tagged::Extraction;

#[derive(Debug, Error, PartialEq)]
pub enum RlError {
    #[error(transparent)]
    Extractor(#[from] ExtractorError),
    #[error("traces are not step-aligned: {0}")]
    MaskMismatch(String),
    #[error("non-finite loss (policy {policy_loss}, value {value_loss}); update aborted")]
    NonFinite { policy_loss: f64, value_loss: f64 },
    #[error("no usable rollouts")]
    EmptyBatch,
}

/// Scores an extraction in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardModel<F> {
    /// Learned evaluator; reward is `p_valid`.
    Evaluator(EvaluatorModel<F>),
    /// Character-trigram cosine between output and reference tagged strings.
    Similarity,
}

impl<F: Scalar> RewardModel<F> {
    pub fn compute_reward(&self, source: &str, reference: &Extraction, output: &Extraction) -> F {
        match self {
            RewardModel::Evaluator(m) => {
                let input = EvaluationInput { source: source.to_string(), reference: reference.clone(), output: output.clone() };
                m.predict(&input).p_valid
            }
            RewardModel::Similarity => trigram_cosine(&reference.to_string(), &output.to_string()),
        }
    }
}

/// Sequence KL; `infinite` is set when the reference puts zero mass on an
/// action the policy can take.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kl<F> {
    pub value: F,
    pub infinite: bool,
}

/// Sum over the five steps of `KL(policy || reference)` on the feasible support.
pub fn kl_divergence<F: Scalar>(policy: &ActionTrace<F>, reference: &ActionTrace<F>) -> Result<Kl<F>, RlError> {
    if policy.steps.len() != reference.steps.len() {
        return Err(RlError::MaskMismatch(format!("{} vs {} steps", policy.steps.len(), reference.steps.len())));
    }
    let mut value = F::zero();
    let mut infinite = false;
    for (p, q) in policy.steps.iter().zip(&reference.steps) {
        if p.step != q.step || p.probs.len() != q.probs.len() {
            return Err(RlError::MaskMismatch(format!("{:?}/{} vs {:?}/{}", p.step, p.probs.len(), q.step, q.probs.len())));
        }
        for (pi, qi) in p.probs.iter().zip(&q.probs) {
            if *pi > F::zero() {
                if *qi > F::zero() {
                    value += *pi * (*pi / *qi).ln();
                } else {
                    infinite = true;
                }
            }
        }
    }
    // rounding can leave tiny negative sums for equal distributions
    Ok(Kl { value: value.max(F::zero()), infinite })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub learning_rate: f64,
    pub kl_coef: f64,
    pub clip_epsilon: f64,
    pub kl_skip_threshold: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub value_loss_coef: f64,
    /// Z-score rewards within each batch.
    pub normalize_rewards: bool,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.4e-4,
            kl_coef: 0.4,
            clip_epsilon: 0.2,
            kl_skip_threshold: 2.0,
            batch_size: 32,
            epochs: 1,
            value_loss_coef: 0.1,
            normalize_rewards: false,
            seed: 0,
        }
    }
}

impl PpoConfig {
    /// Defaults with the KL coefficient used for `kind`.
    pub fn for_dataset(kind: DatasetKind) -> Self {
        let kl_coef = match kind {
            DatasetKind::Fcr => 0.4,
            DatasetKind::Scite => 0.2,
            DatasetKind::Fincausal => 0.05,
        };
        Self { kl_coef, ..Self::default() }
    }
}

/// One sampled extraction with everything the update needs.
#[derive(Debug, Clone)]
pub struct Rollout<F> {
    pub id: String,
    pub ids: Vec<usize>,
    pub gold: Extraction,
    pub output: Extraction,
    pub action: SpanAction,
    pub trace: ActionTrace<F>,
    pub ref_trace: ActionTrace<F>,
    pub reward: F,
    pub kl: Kl<F>,
    pub value: F,
}

#[derive(Debug, Clone, Default)]
pub struct RolloutBatch<F> {
    pub rollouts: Vec<Rollout<F>>,
}

impl<F: Scalar> RolloutBatch<F> {
    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    pub fn mean_kl(&self) -> Kl<F> {
        let n = F::of(self.len().max(1) as f64);
        Kl {
            value: self.rollouts.iter().map(|r| r.kl.value).sum::<F>() / n,
            infinite: self.rollouts.iter().any(|r| r.kl.infinite),
        }
    }

    pub fn mean_reward(&self) -> F {
        self.rollouts.iter().map(|r| r.reward).sum::<F>() / F::of(self.len().max(1) as f64)
    }
}

/// Sample one action per instance under `policy` and score it.
pub fn collect_rollouts<F: Scalar>(
    policy: &PolicyModel<F>,
    reference: &PolicyModel<F>,
    reward: &RewardModel<F>,
    instances: &[CausalInstance],
    rng: &mut ChaCha8Rng,
) -> Result<RolloutBatch<F>, RlError> {
    let mut rollouts = Vec::with_capacity(instances.len());
    for inst in instances {
        let source = SourceTokens::new(&inst.context);
        let ids = policy.vocab.encode(&source);
        if ids.len() < 2 {
            warn!("instance {} skipped: too few tokens", inst.id);
            continue;
        }
        let fw = policy.forward_ids(&ids);
        let trace = policy.sample(&fw, rng)?;
        let output = match assemble_extraction(&source, &trace.action) {
            Ok(o) => o,
            Err(e) => {
                warn!("instance {} skipped: {e}", inst.id);
                continue;
            }
        };
        let ref_fw = reference.forward_ids(&reference.vocab.encode(&source));
        let ref_trace = reference.score_action(&ref_fw, &trace.action)?;
        let kl = kl_divergence(&trace, &ref_trace)?;
        let r = reward.compute_reward(&inst.context, &inst.gold, &output);
        rollouts.push(Rollout {
            id: inst.id.clone(),
            ids,
            gold: inst.gold.clone(),
            output,
            action: trace.action,
            value: trace.value,
            trace,
            ref_trace,
            reward: r,
            kl,
        });
    }
    Ok(RolloutBatch { rollouts })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateStatus {
    Applied,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateResult {
    pub batch: usize,
    pub status: UpdateStatus,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
}

/// Per-instance clipped surrogate `min(r·A, clip(r, 1-ε, 1+ε)·A)`.
pub fn clipped_surrogate<F: Scalar>(ratio: F, advantage: F, eps: F) -> F {
    let clipped = ratio.max(F::one() - eps).min(F::one() + eps);
    (ratio * advantage).min(clipped * advantage)
}

/// Advantages `reward - β·KL - V_old` and value targets `reward - β·KL`.
pub fn advantages<F: Scalar>(batch: &RolloutBatch<F>, cfg: &PpoConfig) -> (Vec<F>, Vec<F>) {
    let beta = F::of(cfg.kl_coef);
    let mut rewards: Vec<F> = batch.rollouts.iter().map(|r| r.reward).collect();
    if cfg.normalize_rewards && rewards.len() > 1 {
        let n = F::of(rewards.len() as f64);
        let mean = rewards.iter().copied().sum::<F>() / n;
        let var = rewards.iter().map(|r| (*r - mean).powi(2)).sum::<F>() / n;
        let sd = var.sqrt().max(F::of(1e-8));
        rewards.iter_mut().for_each(|r| *r = (*r - mean) / sd);
    }
    let targets: Vec<F> = batch.rollouts.iter().zip(&rewards).map(|(r, rw)| *rw - beta * r.kl.value).collect();
    let adv = batch.rollouts.iter().zip(&targets).map(|(r, t)| *t - r.value).collect();
    (adv, targets)
}

/// Policy loss, value loss and their separate gradients at the current
/// parameters of `policy`.
pub fn ppo_losses<F: Scalar>(
    policy: &PolicyModel<F>,
    batch: &RolloutBatch<F>,
    cfg: &PpoConfig,
) -> Result<(F, F, PolicyParams<F>, PolicyParams<F>), RlError> {
    if batch.is_empty() {
        return Err(RlError::EmptyBatch);
    }
    let (adv, targets) = advantages(batch, cfg);
    let eps = F::of(cfg.clip_epsilon);
    let scale = F::one() / F::of(batch.len() as f64);
    let mut policy_loss = F::zero();
    let mut value_loss = F::zero();
    let mut pg = policy.params.zeros_like();
    let mut vg = policy.params.zeros_like();
    for ((r, a), target) in batch.rollouts.iter().zip(&adv).zip(&targets) {
        let fw = policy.forward_ids(&r.ids);
        let trace = policy.score_action(&fw, &r.action)?;
        let ratio = (trace.log_prob - r.trace.log_prob).exp();
        let unclipped = ratio * *a;
        let surrogate = clipped_surrogate(ratio, *a, eps);
        policy_loss -= surrogate * scale;
        // the min picks the unclipped branch, or clipping does not bind
        let inside = ratio >= F::one() - eps && ratio <= F::one() + eps;
        let mut dp = Array2::zeros(fw.pointer.raw_dim());
        let mut dr = Array1::zeros(3);
        if unclipped <= surrogate || inside {
            trace.add_log_prob_grad(-scale * *a * ratio, &mut dp, &mut dr);
            policy.backward(&fw, &dp, &dr, F::zero(), &mut pg);
        }
        let diff = fw.value - *target;
        value_loss += diff * diff * scale;
        policy.backward(&fw, &Array2::zeros(dp.raw_dim()), &Array1::zeros(3), F::of(2.0) * diff * scale, &mut vg);
    }
    Ok((policy_loss, value_loss, pg, vg))
}

/// One PPO update, or a skip when the batch KL is above the threshold. A
/// threshold of zero or less disables updates.
pub fn ppo_step<F: Scalar>(
    policy: &mut PolicyModel<F>,
    batch: &RolloutBatch<F>,
    cfg: &PpoConfig,
    opt: &mut Adam<F>,
    index: usize,
) -> Result<UpdateResult, RlError> {
    let kl = batch.mean_kl();
    let mut result = UpdateResult {
        batch: index,
        status: UpdateStatus::Skipped,
        mean_reward: batch.mean_reward().as_f64(),
        mean_kl: if kl.infinite { f64::INFINITY } else { kl.value.as_f64() },
        policy_loss: f64::NAN,
        value_loss: f64::NAN,
    };
    if kl.infinite || kl.value.as_f64() > cfg.kl_skip_threshold || cfg.kl_skip_threshold <= 0.0 {
        return Ok(result);
    }
    let (pl, vl, pg, vg) = ppo_losses(policy, batch, cfg)?;
    result.policy_loss = pl.as_f64();
    result.value_loss = vl.as_f64();
    let mut grads = pg;
    grads.add_scaled(F::of(cfg.value_loss_coef), &vg);
    if !pl.is_finite() || !vl.is_finite() || !grads.all_finite() {
        return Err(RlError::NonFinite { policy_loss: result.policy_loss, value_loss: result.value_loss });
    }
    opt.step(&mut policy.params.tensors_mut(), &grads.tensors());
    result.status = UpdateStatus::Applied;
    Ok(result)
}

/// PPO from an SFT policy. The reference is a frozen copy of `policy`.
pub fn rl_train<F: Scalar>(
    policy: &PolicyModel<F>,
    reward: &RewardModel<F>,
    data: &[CausalInstance],
    cfg: &PpoConfig,
) -> Result<(PolicyModel<F>, Vec<UpdateResult>), RlError> {
    let reference = policy.clone();
    let mut policy = policy.clone();
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.learning_rate), &policy.params.sizes());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::new();
    for _ in 0..cfg.epochs.max(1) {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let items: Vec<CausalInstance> = chunk.iter().map(|&i| data[i].clone()).collect();
            let batch = collect_rollouts(&policy, &reference, reward, &items, &mut rng)?;
            if batch.is_empty() {
                continue;
            }
            let res = ppo_step(&mut policy, &batch, cfg, &mut opt, log.len())?;
            info!(
                "rl batch {}: {:?} reward {:.4} kl {:.4}",
                res.batch, res.status, res.mean_reward, res.mean_kl
            );
            log.push(res);
        }
    }
    Ok((policy, log))
}

/// Extraction quality of a policy's greedy outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub n: usize,
    pub failed: usize,
    pub prf: Prf<f64>,
    pub exact_match: f64,
    /// Share of outputs the evaluator judges valid.
    pub verdict_rate: f64,
    pub without_em: f64,
}

pub fn policy_report<F: Scalar>(
    policy: &PolicyModel<F>,
    evaluator: &EvaluatorModel<F>,
    data: &[CausalInstance],
) -> PolicyReport {
    let mut prfs = Vec::new();
    let mut records = Vec::new();
    let mut failed = 0;
    for inst in data {
        let output = match policy.extract(&inst.context) {
            Ok(o) => o,
            Err(e) => {
                warn!("instance {}: {e}", inst.id);
                failed += 1;
                continue;
            }
        };
        prfs.push(token_prf::<f64>(&output, &inst.gold));
        let input = EvaluationInput { source: inst.context.clone(), reference: inst.gold.clone(), output };
        let verdict = evaluator.predict(&input).verdict;
        records.push((verdict, exact_match(&input.output, &inst.gold)));
    }
    let n = records.len().max(1) as f64;
    PolicyReport {
        n: data.len(),
        failed,
        prf: Prf::mean(&prfs),
        exact_match: records.iter().filter(|(_, em)| *em).count() as f64 / n,
        verdict_rate: records.iter().filter(|(v, _)| *v == Verdict::Valid).count() as f64 / n,
        without_em: without_em_rate::<f64>(&records).value,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::Variant;
    use crate::extractor::{PolicyConfig, Vocab};
    use crate::synth::{generate_instances, SynthConfig};
    use crate::tagged::Relation;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn trace(probs: Vec<Vec<f64>>) -> ActionTrace<f64> {
        use crate::extractor::{Step, StepTrace};
        ActionTrace {
            action: SpanAction::from_choices([0, 0, 1, 1, 0]),
            steps: probs
                .into_iter()
                .zip(Step::ORDER)
                .map(|(p, step)| StepTrace { step, log_prob: p[0].ln(), chosen: 0, probs: p })
                .collect(),
            log_prob: 0.0,
            value: 0.0,
        }
    }

    #[test]
    fn kl_formula() {
        let p = trace(vec![vec![0.5, 0.5]]);
        let q = trace(vec![vec![0.9, 0.1]]);
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert_abs_diff_eq!(kl_divergence(&p, &q).unwrap().value, expected, epsilon = 1e-15);
        assert_eq!(kl_divergence(&p, &p).unwrap().value, 0.0);
        let zero = trace(vec![vec![1.0, 0.0]]);
        assert!(kl_divergence(&p, &zero).unwrap().infinite);
        assert!(!kl_divergence(&zero, &p).unwrap().infinite);
        let longer = trace(vec![vec![0.5, 0.5], vec![1.0]]);
        assert!(matches!(kl_divergence(&p, &longer), Err(RlError::MaskMismatch(_))));
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(raw in proptest::collection::vec((0.01f64..1.0, 0.01f64..1.0), 2..8)) {
            let norm = |v: Vec<f64>| { let s: f64 = v.iter().sum(); v.into_iter().map(|x| x / s).collect::<Vec<_>>() };
            let p = norm(raw.iter().map(|x| x.0).collect());
            let q = norm(raw.iter().map(|x| x.1).collect());
            let kl = kl_divergence(&trace(vec![p.clone()]), &trace(vec![q])).unwrap();
            prop_assert!(kl.value >= 0.0);
            prop_assert!(kl_divergence(&trace(vec![p.clone()]), &trace(vec![p])).unwrap().value < 1e-9);
        }
    }

    #[test]
    fn surrogate_examples() {
        assert_eq!(clipped_surrogate(1.5, 1.0, 0.2), 1.2);
        assert_eq!(clipped_surrogate(1.0, -0.7, 0.2), -0.7);
        assert_eq!(clipped_surrogate(0.5, -1.0, 0.2), -0.8);
        assert_eq!(clipped_surrogate(0.5, 1.0, 0.2), 0.5);
    }

    #[test]
    fn rewards() {
        let e = Extraction::new("rates rose", Relation::Cause, "sales fell").unwrap();
        let zero = RewardModel::Evaluator(EvaluatorModel::<f64>::zeros(Variant::Full));
        assert_eq!(zero.compute_reward("rates rose so sales fell", &e, &e), 0.5);
        assert_abs_diff_eq!(RewardModel::<f64>::Similarity.compute_reward("", &e, &e), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn dataset_kl_defaults() {
        assert_eq!(PpoConfig::for_dataset(DatasetKind::Fcr).kl_coef, 0.4);
        assert_eq!(PpoConfig::for_dataset(DatasetKind::Scite).kl_coef, 0.2);
        assert_eq!(PpoConfig::for_dataset(DatasetKind::Fincausal).kl_coef, 0.05);
    }

    fn setup() -> (PolicyModel<f64>, Vec<CausalInstance>) {
        let data: Vec<CausalInstance> =
            generate_instances(40, &SynthConfig { seed: 3, ..Default::default() }).into_iter().map(|s| s.instance).collect();
        let vocab = Vocab::build(data.iter().map(|d| d.context.as_str()));
        (PolicyModel::new(vocab, PolicyConfig { embed_dim: 8, hidden: 8, seed: 1 }, None), data)
    }

    #[test]
    fn unit_ratio_reduces_to_mean_advantage() {
        let (policy, data) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = collect_rollouts(&policy, &policy, &RewardModel::Similarity, &data[..8], &mut rng).unwrap();
        let cfg = PpoConfig::default();
        let (adv, _) = advantages(&batch, &cfg);
        let (pl, ..) = ppo_losses(&policy, &batch, &cfg).unwrap();
        let mean: f64 = adv.iter().sum::<f64>() / adv.len() as f64;
        assert_abs_diff_eq!(pl, -mean, epsilon = 1e-12);
    }

    #[test]
    fn zero_threshold_skips_everything() {
        let (policy, data) = setup();
        let cfg = PpoConfig { kl_skip_threshold: 0.0, batch_size: 8, ..Default::default() };
        let (out, log) = rl_train(&policy, &RewardModel::Similarity, &data, &cfg).unwrap();
        assert_eq!(out, policy);
        assert_eq!(log.len(), 5);
        assert!(log.iter().all(|r| r.status == UpdateStatus::Skipped));
    }

    #[test]
    fn run_is_deterministic() {
        let (policy, data) = setup();
        let cfg = PpoConfig { batch_size: 8, learning_rate: 1e-2, ..Default::default() };
        let a = rl_train(&policy, &RewardModel::Similarity, &data, &cfg).unwrap();
        let b = rl_train(&policy, &RewardModel::Similarity, &data, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(serde_json::to_string(&a.1).unwrap(), serde_json::to_string(&b.1).unwrap());
        assert_ne!(a.0, policy);
    }
}
