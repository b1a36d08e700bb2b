//! Binary validity classifier over (source, reference, output).
//!
//! The model is logistic regression over hand-built features that follow the
//! annotation criteria: output tokens must come from the source text,
//! numbers must agree, cause and effect must not overlap, and the output
//! should be close to the reference. Its probability of `valid` is used
//! directly as the RL reward.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{
    bag_overlap, cohens_kappa, field_prf, normalize_tokens, percent_agreement, trigram_cosine,
    Prf, Verdict,
};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::tagged::Extraction;

pub const FEATURE_LAYOUT_VERSION: u32 = 1;
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum EvaluatorError {
    #[error("feature dimension {got} does not match {variant} layout ({expected})")]
    DimensionMismatch { variant: Variant, expected: usize, got: usize },
    #[error("training data is empty")]
    EmptyData,
    #[error("training data contains only {0} examples")]
    SingleClass(Verdict),
    #[error("unsupported model file: format {format}, layout {layout}")]
    Version { format: u32, layout: u32 },
    #[error("non-finite loss during training")]
    NonFinite,
}

/// Which inputs the evaluator may look at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoReference,
    NoSource,
}

impl Variant {
    pub fn layout(self) -> &'static [Feature] {
        use Feature::*;
        match self {
            Variant::Full => &[
                CauseTokenF1,
                EffectTokenF1,
                CauseTrigramCosine,
                EffectTrigramCosine,
                CauseContainment,
                EffectContainment,
                NumericMismatch,
                CauseEffectOverlap,
                RelationMatch,
                CauseLengthRatio,
                EffectLengthRatio,
                Bias,
            ],
            Variant::NoReference => {
                &[CauseContainment, EffectContainment, NumericMismatch, CauseEffectOverlap, Bias]
            }
            Variant::NoSource => &[
                CauseTokenF1,
                EffectTokenF1,
                CauseTrigramCosine,
                EffectTrigramCosine,
                CauseEffectOverlap,
                RelationMatch,
                CauseLengthRatio,
                EffectLengthRatio,
                Bias,
            ],
        }
    }

    pub fn dim(self) -> usize {
        self.layout().len()
    }

    fn uses_reference(self) -> bool {
        self != Variant::NoReference
    }

    fn uses_source(self) -> bool {
        self != Variant::NoSource
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::NoReference => "no-ref",
            Variant::NoSource => "no-src",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Variant::Full),
            "no-ref" | "no_reference" => Ok(Variant::NoReference),
            "no-src" | "no_source" => Ok(Variant::NoSource),
            other => Err(format!("unknown evaluator variant {other:?}")),
        }
    }
}

/// Named feature components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Feature {
    CauseTokenF1,
    EffectTokenF1,
    CauseTrigramCosine,
    EffectTrigramCosine,
    CauseContainment,
    EffectContainment,
    NumericMismatch,
    CauseEffectOverlap,
    RelationMatch,
    CauseLengthRatio,
    EffectLengthRatio,
    Bias,
}

const MAX_LENGTH_RATIO: f64 = 10.0;

/// What the evaluator sees for one model output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationInput {
    pub source: String,
    pub reference: Extraction,
    pub output: Extraction,
}

/// An evaluation input with a (human or pseudo) verdict. Serialized as one
/// flat record: `{id, source, reference, output, verdict, annotator?}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledEvaluation {
    pub id: String,
    #[serde(flatten)]
    pub input: EvaluationInput,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator: Option<String>,
}

/// Share of `tokens` that occur in `pool`. Empty `tokens` count as contained.
fn containment(tokens: &[String], pool: &HashSet<&str>) -> f64 {
    if tokens.is_empty() {
        return 1.0;
    }
    tokens.iter().filter(|t| pool.contains(t.as_str())).count() as f64 / tokens.len() as f64
}

fn is_numeric(token: &str) -> bool {
    token.chars().any(|c| c.is_ascii_digit())
}

fn length_ratio(out: &[String], reference: &[String]) -> f64 {
    if reference.is_empty() {
        return if out.is_empty() { 1.0 } else { MAX_LENGTH_RATIO };
    }
    (out.len() as f64 / reference.len() as f64).min(MAX_LENGTH_RATIO)
}

/// Compute the feature vector of `input` in the variant's layout order.
/// Components a variant does not use are never computed.
pub fn extract_features<F: Scalar>(input: &EvaluationInput, variant: Variant) -> Vec<F> {
    let out_c = normalize_tokens(input.output.cause());
    let out_e = normalize_tokens(input.output.effect());

    let source = variant.uses_source().then(|| {
        let src = normalize_tokens(&input.source);
        let pool: HashSet<&str> = src.iter().map(String::as_str).collect();
        let mismatched = out_c
            .iter()
            .chain(&out_e)
            .filter(|t| is_numeric(t) && !pool.contains(t.as_str()))
            .count();
        (containment(&out_c, &pool), containment(&out_e, &pool), mismatched as f64)
    });
    let reference = variant.uses_reference().then(|| {
        let (r, o) = (&input.reference, &input.output);
        let ref_c = normalize_tokens(r.cause());
        let ref_e = normalize_tokens(r.effect());
        [
            field_prf::<f64>(o.cause(), r.cause()).f1,
            field_prf::<f64>(o.effect(), r.effect()).f1,
            trigram_cosine::<f64>(o.cause(), r.cause()),
            trigram_cosine::<f64>(o.effect(), r.effect()),
            if o.relation() == r.relation() { 1.0 } else { 0.0 },
            length_ratio(&out_c, &ref_c),
            length_ratio(&out_e, &ref_e),
        ]
    });
    let shorter = out_c.len().min(out_e.len());
    let overlap = if shorter == 0 { 0.0 } else { bag_overlap(&out_c, &out_e) as f64 / shorter as f64 };

    variant
        .layout()
        .iter()
        .map(|f| {
            let src = || source.expect("layout uses source");
            let rf = || reference.expect("layout uses reference");
            let v = match f {
                Feature::CauseTokenF1 => rf()[0],
                Feature::EffectTokenF1 => rf()[1],
                Feature::CauseTrigramCosine => rf()[2],
                Feature::EffectTrigramCosine => rf()[3],
                Feature::RelationMatch => rf()[4],
                Feature::CauseLengthRatio => rf()[5],
                Feature::EffectLengthRatio => rf()[6],
                Feature::CauseContainment => src().0,
                Feature::EffectContainment => src().1,
                Feature::NumericMismatch => src().2,
                Feature::CauseEffectOverlap => overlap.min(1.0),
                Feature::Bias => 1.0,
            };
            F::of(v)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs_run: usize,
    /// Best dev macro-F1 reached during training.
    pub dev_score: f64,
    pub train_size: usize,
}

/// Trained logistic-regression evaluator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorModel<F> {
    pub format_version: u32,
    pub layout_version: u32,
    pub variant: Variant,
    pub weights: Vec<F>,
    pub meta: TrainingMeta,
}

/// Output of [`EvaluatorModel::predict`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction<F> {
    pub p_valid: F,
    pub verdict: Verdict,
    /// Probability of the predicted class, in `[0.5, 1]`.
    pub confidence: F,
}

impl<F: Scalar> Prediction<F> {
    pub fn from_probability(p_valid: F) -> Self {
        let half = F::of(0.5);
        let verdict = Verdict::from_bool(p_valid >= half);
        Self { p_valid, verdict, confidence: p_valid.max(F::one() - p_valid) }
    }
}

impl<F: Scalar> EvaluatorModel<F> {
    pub fn zeros(variant: Variant) -> Self {
        Self::with_weights(variant, vec![F::zero(); variant.dim()]).expect("matching dimension")
    }

    pub fn with_weights(variant: Variant, weights: Vec<F>) -> Result<Self, EvaluatorError> {
        if weights.len() != variant.dim() {
            return Err(EvaluatorError::DimensionMismatch {
                variant,
                expected: variant.dim(),
                got: weights.len(),
            });
        }
        Ok(Self {
            format_version: MODEL_FORMAT_VERSION,
            layout_version: FEATURE_LAYOUT_VERSION,
            variant,
            weights,
            meta: TrainingMeta { seed: 0, epochs_run: 0, dev_score: 0.0, train_size: 0 },
        })
    }

    /// Reject files written with another format or feature layout.
    pub fn check(&self) -> Result<(), EvaluatorError> {
        if self.format_version != MODEL_FORMAT_VERSION || self.layout_version != FEATURE_LAYOUT_VERSION {
            return Err(EvaluatorError::Version { format: self.format_version, layout: self.layout_version });
        }
        if self.weights.len() != self.variant.dim() {
            return Err(EvaluatorError::DimensionMismatch {
                variant: self.variant,
                expected: self.variant.dim(),
                got: self.weights.len(),
            });
        }
        Ok(())
    }

    pub fn predict_features(&self, features: &[F]) -> Result<Prediction<F>, EvaluatorError> {
        if features.len() != self.weights.len() {
            return Err(EvaluatorError::DimensionMismatch {
                variant: self.variant,
                expected: self.weights.len(),
                got: features.len(),
            });
        }
        let z: F = self.weights.iter().zip(features).map(|(w, x)| *w * *x).sum();
        Ok(Prediction::from_probability(sigmoid(z)))
    }

    pub fn predict(&self, input: &EvaluationInput) -> Prediction<F> {
        self.predict_features(&extract_features(input, self.variant))
            .expect("feature layout matches variant")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorConfig {
    pub variant: Variant,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub l2: f64,
    pub batch_size: usize,
    /// Share of the training data held out for early stopping when no dev
    /// set is supplied.
    pub dev_fraction: f64,
    pub seed: u64,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            learning_rate: 0.05,
            max_epochs: 100,
            patience: 10,
            l2: 1e-4,
            batch_size: 32,
            dev_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Mean binary cross-entropy plus `l2/2 · ‖w‖²` (bias excluded), and its
/// gradient. `bias_index` is the position of the bias weight.
pub fn loss_and_grad<F: Scalar>(
    weights: &[F],
    features: &[Vec<F>],
    labels: &[F],
    l2: F,
    bias_index: usize,
) -> (F, Vec<F>) {
    let n = F::of(features.len().max(1) as f64);
    let mut grad = vec![F::zero(); weights.len()];
    let mut loss = F::zero();
    for (x, &y) in features.iter().zip(labels) {
        let z: F = weights.iter().zip(x).map(|(w, v)| *w * *v).sum();
        // -[y log σ(z) + (1-y) log(1-σ(z))] = softplus(z) - y z
        loss += softplus(z) - y * z;
        let d = sigmoid(z) - y;
        for (g, v) in grad.iter_mut().zip(x) {
            *g += d * *v;
        }
    }
    loss /= n;
    for g in grad.iter_mut() {
        *g /= n;
    }
    let half = F::of(0.5);
    for (i, (g, w)) in grad.iter_mut().zip(weights).enumerate() {
        if i != bias_index {
            loss += half * l2 * *w * *w;
            *g += l2 * *w;
        }
    }
    (loss, grad)
}

fn bias_index(variant: Variant) -> usize {
    variant.layout().iter().position(|f| *f == Feature::Bias).expect("every layout has a bias")
}

/// One full-batch gradient-descent step; returns the loss before the step.
pub fn full_batch_step<F: Scalar>(
    weights: &mut [F],
    variant: Variant,
    features: &[Vec<F>],
    labels: &[F],
    lr: F,
    l2: F,
) -> F {
    let (loss, grad) = loss_and_grad(weights, features, labels, l2, bias_index(variant));
    for (w, g) in weights.iter_mut().zip(grad) {
        *w -= lr * g;
    }
    loss
}

/// Per-feature z-scoring fitted on training features. Training happens in
/// standardized space and the result is folded back into raw-space weights.
struct Standardizer<F> {
    mean: Vec<F>,
    std: Vec<F>,
    bias: usize,
}

impl<F: Scalar> Standardizer<F> {
    fn fit(xs: &[Vec<F>], bias: usize) -> Self {
        let dim = xs.first().map_or(0, Vec::len);
        let n = F::of(xs.len().max(1) as f64);
        let mut mean = vec![F::zero(); dim];
        let mut std = vec![F::one(); dim];
        for j in (0..dim).filter(|&j| j != bias) {
            let m = xs.iter().map(|x| x[j]).sum::<F>() / n;
            let var = xs.iter().map(|x| (x[j] - m) * (x[j] - m)).sum::<F>() / n;
            mean[j] = m;
            std[j] = if var > F::of(1e-12) { var.sqrt() } else { F::one() };
        }
        Self { mean, std, bias }
    }

    fn apply(&self, x: &[F]) -> Vec<F> {
        x.iter()
            .enumerate()
            .map(|(j, &v)| if j == self.bias { v } else { (v - self.mean[j]) / self.std[j] })
            .collect()
    }

    fn unscale(&self, w: &[F]) -> Vec<F> {
        let mut out: Vec<F> = w.iter().zip(&self.std).map(|(w, s)| *w / *s).collect();
        let shift: F = (0..w.len()).filter(|&j| j != self.bias).map(|j| out[j] * self.mean[j]).sum();
        out[self.bias] = w[self.bias] - shift;
        out
    }
}

fn label_value<F: Scalar>(v: Verdict) -> F {
    if v.is_valid() {
        F::one()
    } else {
        F::zero()
    }
}

/// Mean of the per-class F1 scores of `pred` against `gold`.
pub fn macro_f1<F: Scalar>(pred: &[Verdict], gold: &[Verdict]) -> F {
    let per_class = class_prf::<F>(pred, gold);
    (per_class[0].f1 + per_class[1].f1) / F::of(2.0)
}

/// P/R/F1 for the valid class and the invalid class, in that order.
pub fn class_prf<F: Scalar>(pred: &[Verdict], gold: &[Verdict]) -> [Prf<F>; 2] {
    [Verdict::Valid, Verdict::Invalid].map(|c| {
        let tp = pred.iter().zip(gold).filter(|(p, g)| **p == c && **g == c).count();
        let predicted = pred.iter().filter(|p| **p == c).count();
        let actual = gold.iter().filter(|g| **g == c).count();
        Prf::from_counts(tp, predicted, actual)
    })
}

/// Deterministically hold out `fraction` of `data` (at least one item).
pub fn split_dev<T: Clone>(data: &[T], fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xdef0_0d5e));
    let n_dev = ((data.len() as f64 * fraction).floor() as usize).clamp(1, data.len().saturating_sub(1).max(1));
    let (dev, train) = idx.split_at(n_dev.min(data.len()));
    (train.iter().map(|&i| data[i].clone()).collect(), dev.iter().map(|&i| data[i].clone()).collect())
}

/// Train with mini-batch Adam, early-stopping on dev macro-F1.
/// When `dev` is `None`, `cfg.dev_fraction` of `data` is held out.
pub fn train_evaluator<F: Scalar>(
    data: &[LabeledEvaluation],
    dev: Option<&[LabeledEvaluation]>,
    cfg: &EvaluatorConfig,
) -> Result<EvaluatorModel<F>, EvaluatorError> {
    if data.is_empty() {
        return Err(EvaluatorError::EmptyData);
    }
    for class in [Verdict::Valid, Verdict::Invalid] {
        if data.iter().all(|d| d.verdict == class) {
            return Err(EvaluatorError::SingleClass(class));
        }
    }
    let held_out;
    let (train, dev): (&[LabeledEvaluation], &[LabeledEvaluation]) = match dev {
        Some(dev) if !dev.is_empty() => (data, dev),
        _ if data.len() < 10 => (data, data),
        _ => {
            held_out = split_dev(data, cfg.dev_fraction, cfg.seed);
            (&held_out.0, &held_out.1)
        }
    };

    let variant = cfg.variant;
    let featurize = |set: &[LabeledEvaluation]| -> Vec<Vec<F>> {
        set.iter().map(|d| extract_features(&d.input, variant)).collect()
    };
    let raw = featurize(train);
    let scaler = Standardizer::fit(&raw, bias_index(variant));
    let xs: Vec<Vec<F>> = raw.iter().map(|x| scaler.apply(x)).collect();
    let ys: Vec<F> = train.iter().map(|d| label_value(d.verdict)).collect();
    let dev_xs = featurize(dev);
    let dev_gold: Vec<Verdict> = dev.iter().map(|d| d.verdict).collect();

    let mut model = EvaluatorModel::<F>::zeros(variant);
    let bias = bias_index(variant);
    let l2 = F::of(cfg.l2);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.learning_rate), &[variant.dim()]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let batch = cfg.batch_size.max(1);

    // `weights` live in standardized space; dev scoring uses raw features.
    let score = |w: &[F]| -> f64 {
        let m = EvaluatorModel::with_weights(variant, scaler.unscale(w)).expect("dimension");
        let pred: Vec<Verdict> =
            dev_xs.iter().map(|x| m.predict_features(x).expect("dimension").verdict).collect();
        macro_f1::<f64>(&pred, &dev_gold)
    };
    let mut weights = model.weights.clone();
    let mut best = (score(&weights), weights.clone());
    let mut since_best = 0;
    let mut epochs_run = 0;

    for _ in 0..cfg.max_epochs {
        epochs_run += 1;
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let bx: Vec<Vec<F>> = chunk.iter().map(|&i| xs[i].clone()).collect();
            let by: Vec<F> = chunk.iter().map(|&i| ys[i]).collect();
            let (loss, grad) = loss_and_grad(&weights, &bx, &by, l2, bias);
            if !loss.is_finite() {
                return Err(EvaluatorError::NonFinite);
            }
            opt.step(&mut [&mut weights], &[&grad]);
        }
        let s = score(&weights);
        if s > best.0 {
            best = (s, weights.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    model.weights = scaler.unscale(&best.1);
    model.meta = TrainingMeta { seed: cfg.seed, epochs_run, dev_score: best.0, train_size: train.len() };
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport<F> {
    pub n: usize,
    pub agreement: F,
    pub kappa: F,
    pub kappa_degenerate: bool,
    pub valid: Prf<F>,
    pub invalid: Prf<F>,
}

/// Compare model verdicts to stored verdicts. `labeled` must be non-empty.
pub fn agreement_report<F: Scalar>(model: &EvaluatorModel<F>, labeled: &[LabeledEvaluation]) -> AgreementReport<F> {
    let pred: Vec<Verdict> = labeled.iter().map(|d| model.predict(&d.input).verdict).collect();
    verdict_agreement(&pred, &labeled.iter().map(|d| d.verdict).collect::<Vec<_>>())
}

/// Agreement statistics between two equally long verdict lists.
pub fn verdict_agreement<F: Scalar>(pred: &[Verdict], gold: &[Verdict]) -> AgreementReport<F> {
    let kappa = cohens_kappa::<F>(pred, gold).expect("equal lengths");
    let [valid, invalid] = class_prf::<F>(pred, gold);
    AgreementReport {
        n: gold.len(),
        agreement: percent_agreement(pred, gold).expect("equal lengths"),
        kappa: kappa.value,
        kappa_degenerate: kappa.degenerate,
        valid,
        invalid,
    }
}
