//! Experiment drivers. Each returns flat rows ready for CSV output.

use anyhow::{bail, Result};
use causalign::dataset::CausalInstance;
use causalign::evaluator::{agreement_report, train_evaluator, verdict_agreement, EvaluatorConfig, EvaluatorModel, LabeledEvaluation, Variant};
use causalign::extractor::{sft_train, PolicyModel, SftConfig, SftReport};
use causalign::metrics::{exact_match, pearson_binary, rouge_l_extraction, token_prf, trigram_cosine, Verdict};
use causalign::rl::{policy_report, rl_train, PolicyReport, PpoConfig, RewardModel, UpdateResult};
use causalign::synth::shuffle_split;
use causalign::weak::{weak_to_strong_train, WeakConfig, WeakReport};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub method: String,
    pub n: usize,
    pub agreement: f64,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub metric: String,
    /// Empty when a series is constant.
    pub pearson: Option<f64>,
}

fn row(method: &str, pred: &[Verdict], gold: &[Verdict]) -> AgreementRow {
    let r = verdict_agreement::<f64>(pred, gold);
    AgreementRow { method: method.to_string(), n: r.n, agreement: r.agreement, kappa: r.kappa }
}

fn similarity(d: &LabeledEvaluation) -> f64 {
    trigram_cosine(&d.input.reference.to_string(), &d.input.output.to_string())
}

/// Threshold on trigram similarity that best reproduces the training verdicts.
pub fn fit_similarity_threshold(train: &[LabeledEvaluation]) -> f64 {
    let gold: Vec<Verdict> = train.iter().map(|d| d.verdict).collect();
    let scores: Vec<f64> = train.iter().map(similarity).collect();
    let mut candidates = scores.clone();
    candidates.push(f64::INFINITY);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best = (f64::NEG_INFINITY, 0.5);
    for t in candidates {
        let pred: Vec<Verdict> = scores.iter().map(|s| Verdict::from_bool(*s >= t)).collect();
        let a = verdict_agreement::<f64>(&pred, &gold).agreement;
        if a > best.0 {
            best = (a, t);
        }
    }
    best.1
}

/// Verdict agreement of exact match, a similarity threshold and each
/// evaluator variant against held-out labels, plus correlations of the
/// continuous scores with those labels.
pub fn agreement_study(
    train: &[LabeledEvaluation],
    test: &[LabeledEvaluation],
    cfg: &EvaluatorConfig,
) -> Result<(Vec<AgreementRow>, Vec<CorrelationRow>)> {
    if test.is_empty() {
        bail!("empty test set");
    }
    let gold: Vec<Verdict> = test.iter().map(|d| d.verdict).collect();
    let em: Vec<Verdict> =
        test.iter().map(|d| Verdict::from_bool(exact_match(&d.input.output, &d.input.reference))).collect();
    let threshold = fit_similarity_threshold(train);
    let sim: Vec<Verdict> = test.iter().map(|d| Verdict::from_bool(similarity(d) >= threshold)).collect();
    let mut rows = vec![row("exact_match", &em, &gold), row("similarity_threshold", &sim, &gold)];
    let mut full = None;
    for variant in [Variant::Full, Variant::NoReference, Variant::NoSource] {
        let model = train_evaluator::<f64>(train, None, &EvaluatorConfig { variant, ..cfg.clone() })?;
        let r = agreement_report(&model, test);
        rows.push(AgreementRow { method: format!("evaluator_{variant}"), n: r.n, agreement: r.agreement, kappa: r.kappa });
        if variant == Variant::Full {
            full = Some(model);
        }
    }
    let full = full.expect("full variant trained");
    let series: [(&str, Box<dyn Fn(&LabeledEvaluation) -> f64>); 4] = [
        ("token_f1", Box::new(|d| token_prf::<f64>(&d.input.output, &d.input.reference).f1)),
        ("rouge_l", Box::new(|d| rouge_l_extraction::<f64>(&d.input.output, &d.input.reference))),
        ("trigram_cosine", Box::new(similarity)),
        ("evaluator_p_valid", Box::new(|d| full.predict(&d.input).p_valid)),
    ];
    let correlations = series
        .iter()
        .map(|(name, f)| {
            let scores: Vec<f64> = test.iter().map(&**f).collect();
            CorrelationRow { metric: name.to_string(), pearson: pearson_binary(&scores, &gold) }
        })
        .collect();
    Ok((rows, correlations))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRow {
    pub percent: f64,
    pub train_size: usize,
    pub agreement: f64,
    pub kappa: f64,
}

pub const DEFAULT_SPLITS: [f64; 5] = [0.1, 0.3, 0.5, 0.8, 1.0];

/// Evaluator agreement when trained on growing shares of `train`.
pub fn split_study(
    train: &[LabeledEvaluation],
    test: &[LabeledEvaluation],
    fractions: &[f64],
    cfg: &EvaluatorConfig,
) -> Result<Vec<SplitRow>> {
    let mut rows = Vec::new();
    for &f in fractions {
        let subset = if f >= 1.0 { train.to_vec() } else { shuffle_split(train, f, cfg.seed).0 };
        let has = |v: Verdict| subset.iter().any(|d| d.verdict == v);
        if !has(Verdict::Valid) || !has(Verdict::Invalid) {
            bail!("{:.0}% subset ({} items) lacks one of the classes", f * 100.0, subset.len());
        }
        let model = train_evaluator::<f64>(&subset, None, cfg)?;
        let r = agreement_report(&model, test);
        rows.push(SplitRow { percent: f * 100.0, train_size: subset.len(), agreement: r.agreement, kappa: r.kappa });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionRow {
    pub model: String,
    pub reward: String,
    pub n: usize,
    pub failed: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub exact_match: f64,
    pub verdict_rate: f64,
    pub without_em: f64,
}

impl ExtractionRow {
    pub fn new(model: &str, reward: &str, r: &PolicyReport) -> Self {
        Self {
            model: model.to_string(),
            reward: reward.to_string(),
            n: r.n,
            failed: r.failed,
            precision: r.prf.precision,
            recall: r.prf.recall,
            f1: r.prf.f1,
            exact_match: r.exact_match,
            verdict_rate: r.verdict_rate,
            without_em: r.without_em,
        }
    }
}

/// Outputs of the SFT-then-RL experiment.
#[derive(Debug, Clone)]
pub struct MainResult {
    pub rows: Vec<ExtractionRow>,
    pub sft: PolicyModel<f64>,
    pub sft_report: SftReport,
    pub rl: Vec<(String, PolicyModel<f64>, Vec<UpdateResult>)>,
}

/// SFT on `train`, then one RL run per reward; every model is scored on
/// `test` with `judge` as the verdict source.
pub fn main_experiment(
    train: &[CausalInstance],
    test: &[CausalInstance],
    judge: &EvaluatorModel<f64>,
    rewards: &[(String, RewardModel<f64>)],
    sft_cfg: &SftConfig,
    ppo_cfg: &PpoConfig,
) -> Result<MainResult> {
    let (sft, sft_report) = sft_train::<f64>(train, None, sft_cfg)?;
    let mut rows = vec![ExtractionRow::new("sft", "", &policy_report(&sft, judge, test))];
    let mut rl = Vec::new();
    for (name, reward) in rewards {
        let (policy, log) = rl_train(&sft, reward, train, ppo_cfg)?;
        rows.push(ExtractionRow::new("rl", name, &policy_report(&policy, judge, test)));
        rl.push((name.clone(), policy, log));
    }
    Ok(MainResult { rows, sft, sft_report, rl })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakRlRow {
    pub x_percent: f64,
    pub evaluator_agreement: f64,
    pub kept_per_class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub exact_match: f64,
    pub verdict_rate: f64,
    pub without_em: f64,
}

pub const DEFAULT_WEAK_GRID: [f64; 3] = [0.3, 0.5, 0.8];

/// For each `x`, build a weak evaluator from `labeled`, use it as the RL
/// reward from the shared SFT policy, and judge outputs with `judge`.
/// `x >= 1` uses an evaluator trained on all labels.
#[allow(clippy::too_many_arguments)]
pub fn weak_rl_study(
    labeled: &[LabeledEvaluation],
    labeled_test: &[LabeledEvaluation],
    sft: &PolicyModel<f64>,
    train: &[CausalInstance],
    test: &[CausalInstance],
    judge: &EvaluatorModel<f64>,
    grid: &[f64],
    weak_cfg: &WeakConfig,
    ppo_cfg: &PpoConfig,
) -> Result<(Vec<WeakRlRow>, Vec<WeakReport>)> {
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &x in grid {
        let (reward_model, kept) = if x >= 1.0 {
            (train_evaluator::<f64>(labeled, None, &weak_cfg.evaluator)?, labeled.len())
        } else {
            let (m, rep) = weak_to_strong_train::<f64>(labeled, &WeakConfig { x_percent: x, ..weak_cfg.clone() })?;
            let kept = rep.kept_valid;
            reports.push(rep);
            (m, kept)
        };
        let agreement = agreement_report(&reward_model, labeled_test).agreement;
        let (policy, _) = rl_train(sft, &RewardModel::Evaluator(reward_model), train, ppo_cfg)?;
        let r = policy_report(&policy, judge, test);
        rows.push(WeakRlRow {
            x_percent: x,
            evaluator_agreement: agreement,
            kept_per_class: kept,
            precision: r.prf.precision,
            recall: r.prf.recall,
            f1: r.prf.f1,
            exact_match: r.exact_match,
            verdict_rate: r.verdict_rate,
            without_em: r.without_em,
        });
    }
    Ok((rows, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use causalign::synth::{labeled_corpus, SynthConfig};

    #[test]
    fn similarity_threshold_separates_training_labels() {
        let data = labeled_corpus(300, &SynthConfig { seed: 1, ..Default::default() });
        let t = fit_similarity_threshold(&data);
        assert!(t.is_finite() && t > 0.0 && t <= 1.0);
    }

    #[test]
    fn resubstitution_and_ordering() {
        let data = labeled_corpus(600, &SynthConfig { seed: 2, ..Default::default() });
        let (train, test) = shuffle_split(&data, 0.8, 2);
        let (rows, corr) = agreement_study(&train, &test, &EvaluatorConfig::default()).unwrap();
        let get = |m: &str| rows.iter().find(|r| r.method == m).unwrap().agreement;
        assert!(get("exact_match") < get("evaluator_full"));
        assert_eq!(corr.len(), 4);
        let splits = split_study(&train, &test, &[1.0], &EvaluatorConfig::default()).unwrap();
        assert!((splits[0].agreement - get("evaluator_full")).abs() < 1e-12);
    }

    #[test]
    fn split_without_both_classes_fails() {
        let data = labeled_corpus(40, &SynthConfig { seed: 3, ..Default::default() });
        let one: Vec<_> = data.iter().filter(|d| d.verdict == Verdict::Valid).cloned().collect();
        assert!(split_study(&one, &data, &[0.5], &EvaluatorConfig::default()).is_err());
    }
}
