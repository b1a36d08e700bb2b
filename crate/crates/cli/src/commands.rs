//! Subcommand definitions and their implementations.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use causalign::dataset::{convert_file, dataset_stats, CausalInstance, ConvertOptions, DatasetKind, Split};
use causalign::evaluator::{agreement_report, train_evaluator, EvaluatorConfig, EvaluatorModel, LabeledEvaluation, Variant};
use causalign::extractor::{sft_train, PolicyModel, SftConfig};
use causalign::io::{read_json, read_jsonl, write_json, write_jsonl};
use causalign::metrics::{cohens_kappa, exact_match, pearson_binary, percent_agreement, rouge_l_extraction, token_prf, Prf, Verdict};
use causalign::rl::{rl_train, PpoConfig, RewardModel};
use causalign::synth::{generate_instances, generate_labeled, shuffle_split, RuleOracle, SynthConfig};
use causalign::tagged::Relation;
use causalign::weak::{weak_to_strong_train, WeakConfig};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::Overrides;
use crate::files::{join_by_id, read_labeled, read_verdicts, write_csv, Conflicts, PredictionRecord, ScoreRecord};
use crate::manifest::Manifest;
use crate::plot::{line_chart, read_columns};
use crate::studies::{
    agreement_study, main_experiment, split_study, weak_rl_study, DEFAULT_SPLITS, DEFAULT_WEAK_GRID,
};

#[derive(Debug, Parser)]
#[command(name = "causalign", version, about = "Causal extraction pipeline: data, evaluator, SFT, RL, annotation")]
pub struct Cli {
    /// Seed for every random choice; overrides `seed` in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for reports and manifests.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Flat key-value (TOML) file of module config overrides.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a source corpus to interchange records.
    Convert {
        #[arg(long)]
        dataset: DatasetKind,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fail on spans that are not substrings of the context.
        #[arg(long)]
        strict: bool,
        /// Read FCR offsets as UTF-8 byte offsets.
        #[arg(long)]
        byte_offsets: bool,
        /// Split label; inferred from the file name when omitted.
        #[arg(long)]
        split: Option<Split>,
    },
    /// Per-split counts and mean lengths of an interchange file.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Score predictions against gold instances.
    Score {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "em,prf,rouge")]
        metrics: Vec<String>,
    },
    /// Agreement and kappa between two verdict files.
    Agree {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Pearson correlation of scores with verdict labels.
    Correlate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Train an evaluator on labeled evaluations.
    TrainEval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        variant: Variant,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "majority")]
        conflicts: Conflicts,
    },
    /// Agreement of an evaluator with labeled evaluations.
    EvalAgree(EvalArgs),
    /// Agreement of an evaluator on another dataset's labels.
    TransferEval(EvalArgs),
    /// Weak-to-strong evaluator training.
    WeakTrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        x: f64,
        #[arg(long, default_value_t = 0.75)]
        keep: f64,
        /// Skip downsampling retained pseudo-labels to equal class counts.
        #[arg(long)]
        no_balance: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "majority")]
        conflicts: Conflicts,
    },
    /// Supervised training of the span policy.
    Sft {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Datasets other than fcr fix the relation to `cause`.
        #[arg(long, default_value = "fcr")]
        dataset: DatasetKind,
    },
    /// Greedy extraction with a trained policy.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// PPO training of an SFT policy.
    Rl {
        #[arg(long)]
        sft_model: PathBuf,
        /// `evaluator:<model file>` or `similarity`.
        #[arg(long)]
        reward: String,
        #[arg(long)]
        train: PathBuf,
        #[arg(long, default_value = "fcr")]
        dataset: DatasetKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run the annotation HTTP service.
    AnnotateServe {
        #[arg(long, default_value_t = annotate::DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "annotations")]
        data_dir: PathBuf,
    },
    /// Agreement of metrics and evaluator variants with labels.
    StudyAgreement(StudyData),
    /// Evaluator agreement by share of training data.
    StudySplits {
        #[command(flatten)]
        data: StudyData,
        #[arg(long, value_delimiter = ',')]
        splits: Option<Vec<f64>>,
    },
    /// SFT then RL, scored with P/R/F1/EM, verdict rate and w/o EM.
    StudyMain {
        #[command(flatten)]
        data: ExtractionData,
        /// Reward models for RL: `evaluator`, `similarity`.
        #[arg(long, value_delimiter = ',', default_value = "evaluator")]
        rewards: Vec<String>,
        #[arg(long)]
        no_rl: bool,
    },
    /// RL with weak evaluators built from x% of the labels.
    StudyWeakRl {
        #[command(flatten)]
        data: ExtractionData,
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Generate the synthetic corpus with rule-oracle verdicts.
    SynthGen {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Interchange records.
        #[arg(long)]
        out_instances: PathBuf,
        /// Labeled evaluations of perturbed outputs.
        #[arg(long)]
        out_labeled: Option<PathBuf>,
    },
    /// Draw columns of a CSV table as an SVG line chart.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        x: String,
        #[arg(long, value_delimiter = ',')]
        y: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "")]
        title: String,
    },
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "majority")]
    pub conflicts: Conflicts,
}

/// Labeled data for evaluator studies; synthetic when `--data` is absent.
#[derive(Debug, Args)]
pub struct StudyData {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Held-out labels; otherwise 20% of `--data` is held out.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub synth_n: usize,
}

/// Instances and a judging evaluator; synthetic when files are absent.
#[derive(Debug, Args)]
pub struct ExtractionData {
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Labeled evaluations used to train the judge and reward evaluators.
    #[arg(long)]
    pub labeled: Option<PathBuf>,
    #[arg(long, default_value = "fcr")]
    pub dataset: DatasetKind,
    #[arg(long, default_value_t = 600)]
    pub synth_instances: usize,
    #[arg(long, default_value_t = 2000)]
    pub synth_n: usize,
}

/// Config sections a command may apply; see [`Overrides`].
pub const CONFIG_SECTIONS: [&str; 6] = ["global", "evaluator", "weak", "sft", "rl", "synth"];

struct Ctx {
    seed: u64,
    out_dir: PathBuf,
    overrides: Overrides,
    manifest: Manifest,
    configs: serde_json::Map<String, Value>,
}

impl Ctx {
    fn input(&mut self, p: &Path) -> Result<()> {
        self.manifest.input(p)
    }

    /// Module config with file overrides and the global seed applied.
    fn cfg<T: Serialize + serde::de::DeserializeOwned>(&mut self, section: &str, base: T) -> Result<T> {
        let mut v = serde_json::to_value(self.overrides.apply(section, &base)?)?;
        if let Some(obj) = v.as_object_mut() {
            if obj.contains_key("seed") {
                obj.insert("seed".into(), json!(self.seed));
            }
        }
        self.configs.insert(section.to_string(), v.clone());
        Ok(serde_json::from_value(v)?)
    }

    fn output(&mut self, p: &Path) {
        self.manifest.output(p);
    }

    fn finish(mut self, report: &Value) -> Result<()> {
        self.overrides.finish(&CONFIG_SECTIONS)?;
        std::fs::create_dir_all(&self.out_dir)?;
        let report_path = self.out_dir.join(format!("{}.report.json", self.manifest.command));
        write_json(&report_path, report)?;
        self.manifest.output(&report_path);
        self.manifest.config = Value::Object(std::mem::take(&mut self.configs));
        let m = self.manifest.write(&self.out_dir)?;
        println!("{}", serde_json::to_string_pretty(report)?);
        info!("manifest written to {}", m.display());
        Ok(())
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Convert { .. } => "convert",
        Command::Stats { .. } => "stats",
        Command::Score { .. } => "score",
        Command::Agree { .. } => "agree",
        Command::Correlate { .. } => "correlate",
        Command::TrainEval { .. } => "train-eval",
        Command::EvalAgree(_) => "eval-agree",
        Command::TransferEval(_) => "transfer-eval",
        Command::WeakTrain { .. } => "weak-train",
        Command::Sft { .. } => "sft",
        Command::Extract { .. } => "extract",
        Command::Rl { .. } => "rl",
        Command::AnnotateServe { .. } => "annotate-serve",
        Command::StudyAgreement(_) => "study-agreement",
        Command::StudySplits { .. } => "study-splits",
        Command::StudyMain { .. } => "study-main",
        Command::StudyWeakRl { .. } => "study-weak-rl",
        Command::SynthGen { .. } => "synth-gen",
        Command::Plot { .. } => "plot",
    }
}

fn load_evaluator(path: &Path) -> Result<EvaluatorModel<f64>> {
    let m: EvaluatorModel<f64> = read_json(path).with_context(|| format!("loading evaluator {}", path.display()))?;
    m.check()?;
    Ok(m)
}

fn load_policy(path: &Path) -> Result<PolicyModel<f64>> {
    let m: PolicyModel<f64> = read_json(path).with_context(|| format!("loading policy {}", path.display()))?;
    m.check()?;
    Ok(m)
}

fn fixed_relation(kind: DatasetKind) -> Option<Relation> {
    (!kind.has_relations()).then_some(Relation::Cause)
}

fn prf_json(p: &Prf<f64>) -> Value {
    json!({ "precision": p.precision, "recall": p.recall, "f1": p.f1 })
}

pub fn run(cli: Cli) -> Result<()> {
    let overrides = Overrides::load(cli.config.as_deref())?;
    let seed = match cli.seed {
        Some(s) => s,
        None => {
            let mut probe = overrides.clone();
            #[derive(Serialize, serde::Deserialize)]
            struct SeedOnly {
                seed: u64,
            }
            probe.apply("global", &SeedOnly { seed: 0 })?.seed
        }
    };
    let mut manifest = Manifest::new(command_name(&cli.command), seed, Value::Null);
    if let Some(c) = &cli.config {
        manifest.input(c)?;
    }
    let mut ctx = Ctx { seed, out_dir: cli.out_dir, overrides, manifest, configs: Default::default() };
    // `seed` in the config file is consumed by the global seed
    ctx.cfg("global", json!({ "seed": seed }))?;

    let report = match cli.command {
        Command::Convert { dataset, input, out, strict, byte_offsets, split } => {
            ctx.input(&input)?;
            let split = split.or_else(|| Split::infer(&input)).unwrap_or_default();
            let converted = convert_file(dataset, &input, &ConvertOptions { strict, byte_offsets, split })?;
            write_jsonl(&out, &converted.instances)?;
            ctx.output(&out);
            json!({
                "instances": converted.instances.len(),
                "flagged": converted.flagged,
                "skipped": converted.skipped,
                "split": split,
                "stats": dataset_stats(&converted.instances),
            })
        }
        Command::Stats { input } => {
            ctx.input(&input)?;
            let instances: Vec<CausalInstance> = read_jsonl(&input)?;
            serde_json::to_value(dataset_stats(&instances))?
        }
        Command::Score { pred, gold, metrics } => {
            ctx.input(&pred)?;
            ctx.input(&gold)?;
            let preds: Vec<PredictionRecord> = read_jsonl(&pred)?;
            let golds: Vec<CausalInstance> = read_jsonl(&gold)?;
            let aligned = join_by_id(&preds, &golds, |p| &p.id, |g| &g.id)?;
            score_report(&preds, &aligned, &metrics)?
        }
        Command::Agree { a, b } => {
            ctx.input(&a)?;
            ctx.input(&b)?;
            let va = read_verdicts(&a)?;
            let vb = join_by_id(&va, &read_verdicts(&b)?, |r| &r.id, |r| &r.id)?;
            let (xa, xb): (Vec<Verdict>, Vec<Verdict>) = va.iter().zip(&vb).map(|(x, y)| (x.verdict, y.verdict)).unzip();
            let kappa = cohens_kappa::<f64>(&xa, &xb)?;
            json!({
                "n": xa.len(),
                "agreement": percent_agreement::<f64>(&xa, &xb)?,
                "kappa": kappa.value,
                "kappa_degenerate": kappa.degenerate,
            })
        }
        Command::Correlate { scores, labels } => {
            ctx.input(&scores)?;
            ctx.input(&labels)?;
            let s: Vec<ScoreRecord> = read_jsonl(&scores)?;
            let l = join_by_id(&s, &read_verdicts(&labels)?, |r| &r.id, |r| &r.id)?;
            let xs: Vec<f64> = s.iter().map(|r| r.score).collect();
            let ys: Vec<Verdict> = l.iter().map(|r| r.verdict).collect();
            let p = pearson_binary(&xs, &ys);
            if p.is_none() {
                warn!("a series is constant; correlation undefined");
            }
            json!({ "n": xs.len(), "pearson": p, "defined": p.is_some() })
        }
        Command::TrainEval { data, dev, variant, out, conflicts } => {
            ctx.input(&data)?;
            let labeled = read_labeled(&data, conflicts)?;
            let dev_set = match &dev {
                Some(d) => {
                    ctx.input(d)?;
                    Some(read_labeled(d, conflicts)?)
                }
                None => None,
            };
            let cfg = ctx.cfg("evaluator", EvaluatorConfig { variant, ..Default::default() })?;
            let model = train_evaluator::<f64>(&labeled, dev_set.as_deref(), &cfg)?;
            write_json(&out, &model)?;
            ctx.output(&out);
            let fit = agreement_report(&model, &labeled);
            json!({ "train_size": labeled.len(), "meta": model.meta, "train_agreement": fit.agreement, "train_kappa": fit.kappa })
        }
        Command::EvalAgree(a) | Command::TransferEval(a) => {
            ctx.input(&a.model)?;
            ctx.input(&a.data)?;
            let model = load_evaluator(&a.model)?;
            let labeled = read_labeled(&a.data, a.conflicts)?;
            serde_json::to_value(agreement_report(&model, &labeled))?
        }
        Command::WeakTrain { data, x, keep, no_balance, out, report, conflicts } => {
            ctx.input(&data)?;
            let labeled = read_labeled(&data, conflicts)?;
            let evaluator = ctx.cfg("evaluator", EvaluatorConfig::default())?;
            let cfg = ctx.cfg(
                "weak",
                WeakConfig { x_percent: x, keep_fraction: keep, balance: !no_balance, evaluator, ..Default::default() },
            )?;
            let (model, rep) = weak_to_strong_train::<f64>(&labeled, &cfg)?;
            write_json(&out, &model)?;
            ctx.output(&out);
            if let Some(r) = &report {
                write_json(r, &rep)?;
                ctx.output(r);
            }
            serde_json::to_value(rep)?
        }
        Command::Sft { train, dev, out, dataset } => {
            ctx.input(&train)?;
            let instances: Vec<CausalInstance> = read_jsonl(&train)?;
            let dev_set: Option<Vec<CausalInstance>> = match &dev {
                Some(d) => {
                    ctx.input(d)?;
                    Some(read_jsonl(d)?)
                }
                None => None,
            };
            let cfg = ctx.cfg("sft", SftConfig { fixed_relation: fixed_relation(dataset), ..Default::default() })?;
            let (model, rep) = sft_train::<f64>(&instances, dev_set.as_deref(), &cfg)?;
            write_json(&out, &model)?;
            ctx.output(&out);
            serde_json::to_value(rep)?
        }
        Command::Extract { model, input, out } => {
            ctx.input(&model)?;
            ctx.input(&input)?;
            let policy = load_policy(&model)?;
            let instances: Vec<CausalInstance> = read_jsonl(&input)?;
            let mut preds = Vec::new();
            let mut failed = Vec::new();
            for inst in &instances {
                match policy.extract(&inst.context) {
                    Ok(prediction) => preds.push(PredictionRecord { id: inst.id.clone(), prediction }),
                    Err(e) => {
                        warn!("{}: {e}", inst.id);
                        failed.push(inst.id.clone());
                    }
                }
            }
            write_jsonl(&out, &preds)?;
            ctx.output(&out);
            json!({ "predictions": preds.len(), "failed": failed })
        }
        Command::Rl { sft_model, reward, train, dataset, out, log } => {
            ctx.input(&sft_model)?;
            ctx.input(&train)?;
            let policy = load_policy(&sft_model)?;
            let reward_model = match reward.split_once(':') {
                Some(("evaluator", path)) => {
                    ctx.input(Path::new(path))?;
                    RewardModel::Evaluator(load_evaluator(Path::new(path))?)
                }
                None if reward == "similarity" => RewardModel::Similarity,
                _ => bail!("--reward must be evaluator:<model> or similarity, got {reward:?}"),
            };
            let instances: Vec<CausalInstance> = read_jsonl(&train)?;
            let cfg = ctx.cfg("rl", PpoConfig::for_dataset(dataset))?;
            let (trained, updates) = rl_train(&policy, &reward_model, &instances, &cfg)?;
            write_json(&out, &trained)?;
            ctx.output(&out);
            if let Some(l) = &log {
                write_jsonl(l, &updates)?;
                ctx.output(l);
            }
            let applied = updates.iter().filter(|u| u.status == causalign::rl::UpdateStatus::Applied).count();
            json!({
                "batches": updates.len(),
                "applied": applied,
                "skipped": updates.len() - applied,
                "first_mean_reward": updates.first().map(|u| u.mean_reward),
                "last_mean_reward": updates.last().map(|u| u.mean_reward),
            })
        }
        Command::AnnotateServe { port, data_dir } => {
            let cfg = annotate::ServeConfig { port, data_dir }.with_env_overrides().map_err(anyhow::Error::msg)?;
            let addr = SocketAddr::from(([0, 0, 0, 0], cfg.port));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(annotate::serve(addr, cfg.data_dir)).map_err(|e| anyhow::anyhow!(e))?;
            return Ok(());
        }
        Command::StudyAgreement(data) => {
            let (train, test) = study_data(&mut ctx, &data)?;
            let cfg = ctx.cfg("evaluator", EvaluatorConfig::default())?;
            let (rows, corr) = agreement_study(&train, &test, &cfg)?;
            let (a, c) = (ctx.out_dir.join("agreement.csv"), ctx.out_dir.join("correlation.csv"));
            write_csv(&a, &rows)?;
            write_csv(&c, &corr)?;
            ctx.output(&a);
            ctx.output(&c);
            json!({ "agreement": rows, "correlation": corr })
        }
        Command::StudySplits { data, splits } => {
            let (train, test) = study_data(&mut ctx, &data)?;
            let cfg = ctx.cfg("evaluator", EvaluatorConfig::default())?;
            let rows = split_study(&train, &test, splits.as_deref().unwrap_or(&DEFAULT_SPLITS), &cfg)?;
            let p = ctx.out_dir.join("splits.csv");
            write_csv(&p, &rows)?;
            ctx.output(&p);
            json!({ "splits": rows })
        }
        Command::StudyMain { data, rewards, no_rl } => {
            let setup = extraction_data(&mut ctx, &data)?;
            let sft_cfg = ctx.cfg("sft", SftConfig { fixed_relation: fixed_relation(data.dataset), ..Default::default() })?;
            let ppo_cfg = ctx.cfg("rl", PpoConfig::for_dataset(data.dataset))?;
            let mut reward_models = Vec::new();
            if !no_rl {
                for r in &rewards {
                    match r.as_str() {
                        "evaluator" => reward_models.push((r.clone(), RewardModel::Evaluator(setup.judge.clone()))),
                        "similarity" => reward_models.push((r.clone(), RewardModel::Similarity)),
                        other => bail!("unknown reward {other:?}; expected evaluator or similarity"),
                    }
                }
            }
            let result = main_experiment(&setup.train, &setup.test, &setup.judge, &reward_models, &sft_cfg, &ppo_cfg)?;
            let table = ctx.out_dir.join("main.csv");
            write_csv(&table, &result.rows)?;
            ctx.output(&table);
            let sft_path = ctx.out_dir.join("sft_policy.json");
            write_json(&sft_path, &result.sft)?;
            ctx.output(&sft_path);
            for (name, policy, log) in &result.rl {
                let (p, l) = (ctx.out_dir.join(format!("rl_{name}_policy.json")), ctx.out_dir.join(format!("rl_{name}_log.jsonl")));
                write_json(&p, policy)?;
                write_jsonl(&l, log)?;
                ctx.output(&p);
                ctx.output(&l);
            }
            json!({ "rows": result.rows, "sft": result.sft_report })
        }
        Command::StudyWeakRl { data, grid } => {
            let setup = extraction_data(&mut ctx, &data)?;
            let sft_cfg = ctx.cfg("sft", SftConfig { fixed_relation: fixed_relation(data.dataset), ..Default::default() })?;
            let ppo_cfg = ctx.cfg("rl", PpoConfig::for_dataset(data.dataset))?;
            let evaluator = ctx.cfg("evaluator", EvaluatorConfig::default())?;
            let weak_cfg = ctx.cfg("weak", WeakConfig { evaluator, ..Default::default() })?;
            let (sft, _) = sft_train::<f64>(&setup.train, None, &sft_cfg)?;
            let grid = grid.unwrap_or_else(|| DEFAULT_WEAK_GRID.to_vec());
            let (rows, reports) = weak_rl_study(
                &setup.labeled_train,
                &setup.labeled_test,
                &sft,
                &setup.train,
                &setup.test,
                &setup.judge,
                &grid,
                &weak_cfg,
                &ppo_cfg,
            )?;
            let p = ctx.out_dir.join("weak_rl.csv");
            write_csv(&p, &rows)?;
            ctx.output(&p);
            json!({ "rows": rows, "weak_reports": reports })
        }
        Command::SynthGen { n, out_instances, out_labeled } => {
            let cfg = ctx.cfg("synth", SynthConfig::default())?;
            let synth = generate_instances(n, &cfg);
            let instances: Vec<CausalInstance> = synth.iter().map(|s| s.instance.clone()).collect();
            write_jsonl(&out_instances, &instances)?;
            ctx.output(&out_instances);
            let mut report = json!({ "instances": n });
            if let Some(p) = &out_labeled {
                let labeled = generate_labeled(&synth, &RuleOracle::default(), cfg.seed);
                let valid = labeled.iter().filter(|l| l.verdict == Verdict::Valid).count();
                write_jsonl(p, &labeled)?;
                ctx.output(p);
                report["labeled"] = json!(labeled.len());
                report["valid"] = json!(valid);
            }
            report
        }
        Command::Plot { input, x, y, out, title } => {
            ctx.input(&input)?;
            if y.is_empty() {
                bail!("--y needs at least one column");
            }
            let (xs, ys) = read_columns(&input, &x, &y)?;
            let series: Vec<(String, Vec<f64>)> = y.iter().cloned().zip(ys).collect();
            std::fs::write(&out, line_chart(&title, &x, &xs, &series))?;
            ctx.output(&out);
            json!({ "points": xs.len(), "series": y })
        }
    };
    ctx.finish(&report)
}

fn score_report(preds: &[PredictionRecord], gold: &[CausalInstance], metrics: &[String]) -> Result<Value> {
    let mut report = json!({ "n": preds.len() });
    let n = preds.len().max(1) as f64;
    for m in metrics {
        match m.as_str() {
            "em" => {
                let hits = preds.iter().zip(gold).filter(|(p, g)| exact_match(&p.prediction, &g.gold)).count();
                report["exact_match"] = json!(hits as f64 / n);
            }
            "prf" => {
                let prfs: Vec<Prf<f64>> = preds.iter().zip(gold).map(|(p, g)| token_prf(&p.prediction, &g.gold)).collect();
                report["token_prf"] = prf_json(&Prf::mean(&prfs));
            }
            "rouge" => {
                let total: f64 = preds.iter().zip(gold).map(|(p, g)| rouge_l_extraction::<f64>(&p.prediction, &g.gold)).sum();
                report["rouge_l"] = json!(total / n);
            }
            other => bail!("unknown metric {other:?}; expected em, prf, rouge"),
        }
    }
    Ok(report)
}

fn synth_labeled(ctx: &mut Ctx, n: usize) -> Result<Vec<LabeledEvaluation>> {
    let cfg = ctx.cfg("synth", SynthConfig::default())?;
    Ok(generate_labeled(&generate_instances(n, &cfg), &RuleOracle::default(), cfg.seed))
}

fn study_data(ctx: &mut Ctx, d: &StudyData) -> Result<(Vec<LabeledEvaluation>, Vec<LabeledEvaluation>)> {
    let all = match &d.data {
        Some(p) => {
            ctx.input(p)?;
            read_labeled(p, Conflicts::Majority)?
        }
        None => synth_labeled(ctx, d.synth_n)?,
    };
    match &d.test {
        Some(t) => {
            ctx.input(t)?;
            Ok((all, read_labeled(t, Conflicts::Majority)?))
        }
        None => Ok(shuffle_split(&all, 0.8, ctx.seed)),
    }
}

struct ExtractionSetup {
    train: Vec<CausalInstance>,
    test: Vec<CausalInstance>,
    labeled_train: Vec<LabeledEvaluation>,
    labeled_test: Vec<LabeledEvaluation>,
    judge: EvaluatorModel<f64>,
}

fn extraction_data(ctx: &mut Ctx, d: &ExtractionData) -> Result<ExtractionSetup> {
    let (train, test) = match (&d.train, &d.test) {
        (Some(a), Some(b)) => {
            ctx.input(a)?;
            ctx.input(b)?;
            (read_jsonl(a)?, read_jsonl(b)?)
        }
        (None, None) => {
            let cfg = ctx.cfg("synth", SynthConfig::default())?;
            // passages distinct from the labeled corpus
            let cfg = SynthConfig { seed: cfg.seed.wrapping_add(1), ..cfg };
            let inst: Vec<CausalInstance> =
                generate_instances(d.synth_instances, &cfg).into_iter().map(|s| s.instance).collect();
            shuffle_split(&inst, 0.8, ctx.seed)
        }
        _ => bail!("--train and --test go together"),
    };
    let labeled = match &d.labeled {
        Some(p) => {
            ctx.input(p)?;
            read_labeled(p, Conflicts::Majority)?
        }
        None => synth_labeled(ctx, d.synth_n)?,
    };
    let (labeled_train, labeled_test) = shuffle_split(&labeled, 0.8, ctx.seed);
    let ev_cfg = ctx.cfg("evaluator", EvaluatorConfig::default())?;
    let judge = train_evaluator::<f64>(&labeled_train, None, &ev_cfg)?;
    Ok(ExtractionSetup { train, test, labeled_train, labeled_test, judge })
}
