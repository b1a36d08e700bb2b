//! Record formats read and written by the commands.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use causalign::evaluator::LabeledEvaluation;
use causalign::io::read_jsonl;
use causalign::metrics::Verdict;
use causalign::tagged::Extraction;
use clap::ValueEnum;
use log::warn;
use serde::{Deserialize, Serialize};

/// One line of a predictions file; `prediction` is the tagged string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub prediction: Extraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub id: String,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub score: f64,
}

/// How to turn several annotators' verdicts on one item into training data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conflicts {
    /// Majority verdict per item; ties go to the first record.
    #[default]
    Majority,
    /// First record per item.
    First,
    /// Keep every record.
    All,
}

/// Read labeled evaluations, skipping export summary lines, and resolve
/// multiple records per id.
pub fn read_labeled(path: &Path, conflicts: Conflicts) -> Result<Vec<LabeledEvaluation>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut records: Vec<LabeledEvaluation> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), n + 1))?;
        if value.get("summary").is_some() {
            continue;
        }
        records.push(serde_json::from_value(value).with_context(|| format!("{}:{}", path.display(), n + 1))?);
    }
    if records.is_empty() {
        bail!("{} holds no labeled records", path.display());
    }
    Ok(resolve_conflicts(records, conflicts))
}

pub fn resolve_conflicts(records: Vec<LabeledEvaluation>, conflicts: Conflicts) -> Vec<LabeledEvaluation> {
    if conflicts == Conflicts::All {
        return records;
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<LabeledEvaluation>> = BTreeMap::new();
    for r in records {
        if !groups.contains_key(&r.id) {
            order.push(r.id.clone());
        }
        groups.entry(r.id.clone()).or_default().push(r);
    }
    order
        .into_iter()
        .map(|id| {
            let group = groups.remove(&id).expect("grouped");
            let mut chosen = group[0].clone();
            if conflicts == Conflicts::Majority && group.len() > 1 {
                let valid = group.iter().filter(|r| r.verdict.is_valid()).count();
                let invalid = group.len() - valid;
                if valid != invalid {
                    chosen.verdict = Verdict::from_bool(valid > invalid);
                } else {
                    warn!("item {id}: tied verdicts, keeping the first");
                }
                chosen.annotator = None;
            }
            chosen
        })
        .collect()
}

/// Align two id-keyed files by id, in the order of `a`.
pub fn join_by_id<A, B: Clone>(a: &[A], b: &[B], id_a: impl Fn(&A) -> &str, id_b: impl Fn(&B) -> &str) -> Result<Vec<B>> {
    let index: BTreeMap<&str, &B> = b.iter().map(|x| (id_b(x), x)).collect();
    if index.len() != b.len() {
        bail!("duplicate ids in second file");
    }
    if a.len() != b.len() {
        bail!("files differ in length: {} vs {}", a.len(), b.len());
    }
    a.iter()
        .map(|x| index.get(id_a(x)).map(|y| (*y).clone()).with_context(|| format!("id {} missing from second file", id_a(x))))
        .collect()
}

pub fn read_verdicts(path: &Path) -> Result<Vec<VerdictRecord>> {
    Ok(read_jsonl(path)?)
}

/// Write rows as CSV with a header.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use causalign::evaluator::EvaluationInput;
    use causalign::tagged::Relation;

    fn rec(id: &str, v: Verdict, who: &str) -> LabeledEvaluation {
        let e = Extraction::new("a", Relation::Cause, "b").unwrap();
        LabeledEvaluation {
            id: id.into(),
            input: EvaluationInput { source: "a b".into(), reference: e.clone(), output: e },
            verdict: v,
            annotator: Some(who.into()),
        }
    }

    #[test]
    fn conflict_policies() {
        use Verdict::*;
        let recs = vec![rec("x", Valid, "a"), rec("x", Invalid, "b"), rec("x", Invalid, "c"), rec("y", Valid, "a"), rec("y", Invalid, "b")];
        let m = resolve_conflicts(recs.clone(), Conflicts::Majority);
        assert_eq!(m.iter().map(|r| (r.id.as_str(), r.verdict)).collect::<Vec<_>>(), [("x", Invalid), ("y", Valid)]);
        let f = resolve_conflicts(recs.clone(), Conflicts::First);
        assert_eq!(f[0].verdict, Valid);
        assert_eq!(resolve_conflicts(recs, Conflicts::All).len(), 5);
    }

    #[test]
    fn labeled_file_skips_summary() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.jsonl");
        let line = serde_json::to_string(&rec("x", Verdict::Valid, "a")).unwrap();
        std::fs::write(&p, format!("{line}\n{{\"summary\":{{}}}}\n")).unwrap();
        assert_eq!(read_labeled(&p, Conflicts::All).unwrap().len(), 1);
    }
}
