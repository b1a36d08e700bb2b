//! Sessions persisted as append-only JSONL event logs, one file per session.
//!
//! A session file starts with a `created` event and continues with one
//! `verdict` event per accepted submission. Every append is flushed with
//! `sync_data` before the caller is acknowledged. On replay a torn final
//! line (crash mid-write) is dropped.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use causalign::evaluator::{EvaluationInput, LabeledEvaluation};
use causalign::metrics::{cohens_kappa, exact_match, percent_agreement, Verdict};
use causalign::tagged::Extraction;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("session has no items")]
    EmptySession,
    #[error("every item was an exact match and got filtered out")]
    AllFiltered,
    #[error("duplicate item id {0}")]
    DuplicateItem(String),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("annotator id must not be empty")]
    EmptyAnnotator,
    #[error("corrupt session log {path}: line {line}: {msg}")]
    Corrupt { path: PathBuf, line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationItem {
    pub item_id: String,
    pub source: String,
    pub reference: Extraction,
    pub output: Extraction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionOptions {
    #[serde(default = "yes")]
    pub filter_exact_match: bool,
}

fn yes() -> bool {
    true
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self { filter_exact_match: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub item_id: String,
    pub annotator: String,
    pub verdict: Verdict,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Created { session_id: String, items: Vec<AnnotationItem>, options: SessionOptions, filtered: usize, timestamp_ms: u64 },
    Verdict(AnnotationRecord),
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// In-memory state of one session, rebuilt from its log.
#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub items: Vec<AnnotationItem>,
    pub options: SessionOptions,
    /// Items removed as exact matches at creation.
    pub filtered: usize,
    /// Full history in arrival order.
    pub history: Vec<AnnotationRecord>,
    latest: HashMap<(String, String), Verdict>,
    index: HashMap<String, usize>,
    log: File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub answered: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAgreement {
    pub annotators: (String, String),
    pub overlap: usize,
    pub agreement: f64,
    pub kappa: f64,
    pub kappa_degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub session_id: String,
    pub items: usize,
    pub filtered_exact_matches: usize,
    pub annotators: Vec<String>,
    pub records: usize,
    pub pairs: Vec<PairAgreement>,
}

impl Session {
    fn append(&mut self, event: &Event) -> io::Result<()> {
        let mut line = serde_json::to_string(event).map_err(io::Error::other)?;
        line.push('\n');
        self.log.write_all(line.as_bytes())?;
        self.log.sync_data()
    }

    fn apply(&mut self, record: AnnotationRecord) {
        self.latest.insert((record.item_id.clone(), record.annotator.clone()), record.verdict);
        self.history.push(record);
    }

    pub fn verdict(&self, item_id: &str, annotator: &str) -> Option<Verdict> {
        self.latest.get(&(item_id.to_string(), annotator.to_string())).copied()
    }

    /// First item in stored order this annotator has not judged.
    pub fn next_item(&self, annotator: &str) -> Option<&AnnotationItem> {
        self.items.iter().find(|it| self.verdict(&it.item_id, annotator).is_none())
    }

    pub fn progress(&self, annotator: &str) -> Progress {
        let answered = self.items.iter().filter(|it| self.verdict(&it.item_id, annotator).is_some()).count();
        Progress { answered, total: self.items.len() }
    }

    /// Store a verdict. Returns `false` when it repeats the current one.
    pub fn submit(&mut self, item_id: &str, annotator: &str, verdict: Verdict) -> Result<bool, StoreError> {
        if annotator.trim().is_empty() {
            return Err(StoreError::EmptyAnnotator);
        }
        if !self.index.contains_key(item_id) {
            return Err(StoreError::UnknownItem(item_id.to_string()));
        }
        if self.verdict(item_id, annotator) == Some(verdict) {
            return Ok(false);
        }
        let record = AnnotationRecord {
            item_id: item_id.to_string(),
            annotator: annotator.to_string(),
            verdict,
            timestamp_ms: now_ms(),
        };
        self.append(&Event::Verdict(record.clone()))?;
        self.apply(record);
        Ok(true)
    }

    pub fn annotators(&self) -> Vec<String> {
        self.latest.keys().map(|(_, a)| a.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// One labeled record per (item, annotator) with the latest verdict,
    /// ordered by item then annotator, plus pairwise agreement.
    pub fn export(&self) -> (Vec<LabeledEvaluation>, ExportSummary) {
        let annotators = self.annotators();
        let mut records = Vec::new();
        for item in &self.items {
            for a in &annotators {
                if let Some(v) = self.verdict(&item.item_id, a) {
                    records.push(LabeledEvaluation {
                        id: item.item_id.clone(),
                        input: EvaluationInput {
                            source: item.source.clone(),
                            reference: item.reference.clone(),
                            output: item.output.clone(),
                        },
                        verdict: v,
                        annotator: Some(a.clone()),
                    });
                }
            }
        }
        let mut pairs = Vec::new();
        for (i, a) in annotators.iter().enumerate() {
            for b in &annotators[i + 1..] {
                let (va, vb): (Vec<Verdict>, Vec<Verdict>) = self
                    .items
                    .iter()
                    .filter_map(|it| Some((self.verdict(&it.item_id, a)?, self.verdict(&it.item_id, b)?)))
                    .unzip();
                if va.is_empty() {
                    continue;
                }
                let kappa = cohens_kappa::<f64>(&va, &vb).expect("aligned, non-empty");
                pairs.push(PairAgreement {
                    annotators: (a.clone(), b.clone()),
                    overlap: va.len(),
                    agreement: percent_agreement(&va, &vb).expect("aligned, non-empty"),
                    kappa: kappa.value,
                    kappa_degenerate: kappa.degenerate,
                });
            }
        }
        let summary = ExportSummary {
            session_id: self.id.clone(),
            items: self.items.len(),
            filtered_exact_matches: self.filtered,
            annotators,
            records: records.len(),
            pairs,
        };
        (records, summary)
    }

    /// Export as JSONL: labeled records, then `{"summary": ...}`.
    pub fn export_jsonl(&self) -> String {
        let (records, summary) = self.export();
        let mut out = String::new();
        for r in &records {
            out.push_str(&serde_json::to_string(r).expect("serializable"));
            out.push('\n');
        }
        out.push_str(&serde_json::json!({ "summary": summary }).to_string());
        out.push('\n');
        out
    }
}

fn replay(path: &Path) -> Result<Session, StoreError> {
    let file = File::open(path)?;
    let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>()?;
    let corrupt = |line: usize, msg: String| StoreError::Corrupt { path: path.to_path_buf(), line, msg };
    let mut session: Option<Session> = None;
    let last = lines.len();
    for (n, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let event: Event = match serde_json::from_str(line) {
            Ok(e) => e,
            Err(e) if n + 1 == last => {
                warn!("{}: dropping torn final line: {e}", path.display());
                break;
            }
            Err(e) => return Err(corrupt(n + 1, e.to_string())),
        };
        match (event, session.as_mut()) {
            (Event::Created { session_id, items, options, filtered, .. }, None) => {
                let log = OpenOptions::new().append(true).open(path)?;
                let index = items.iter().enumerate().map(|(i, it)| (it.item_id.clone(), i)).collect();
                session = Some(Session {
                    id: session_id,
                    items,
                    options,
                    filtered,
                    history: Vec::new(),
                    latest: HashMap::new(),
                    index,
                    log,
                });
            }
            (Event::Verdict(r), Some(s)) => s.apply(r),
            (Event::Created { .. }, Some(_)) => return Err(corrupt(n + 1, "second created event".into())),
            (Event::Verdict(_), None) => return Err(corrupt(n + 1, "verdict before created".into())),
        }
    }
    let mut session = session.ok_or_else(|| corrupt(1, "missing created event".into()))?;
    // a torn tail would otherwise glue onto the next append
    let len = fs::metadata(path)?.len();
    let clean: u64 = lines
        .iter()
        .take_while(|l| l.trim().is_empty() || serde_json::from_str::<Event>(l).is_ok())
        .map(|l| l.len() as u64 + 1)
        .sum();
    if clean < len {
        let f = OpenOptions::new().write(true).open(path)?;
        f.set_len(clean)?;
        f.sync_all()?;
        session.log = OpenOptions::new().append(true).open(path)?;
    }
    Ok(session)
}

/// All sessions under one data directory.
#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
}

impl Store {
    /// Open `dir`, creating it if needed, and replay every session log.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let mut sessions = HashMap::new();
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "jsonl") {
                let s = replay(&path)?;
                sessions.insert(s.id.clone(), Arc::new(Mutex::new(s)));
            }
        }
        info!("opened {} sessions from {}", sessions.len(), dir.display());
        Ok(Self { dir, sessions: RwLock::new(sessions) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Validate, filter and durably store a new session.
    pub fn create_session(&self, items: Vec<AnnotationItem>, options: SessionOptions) -> Result<String, StoreError> {
        if items.is_empty() {
            return Err(StoreError::EmptySession);
        }
        let mut seen = HashSet::new();
        for it in &items {
            if !seen.insert(it.item_id.as_str()) {
                return Err(StoreError::DuplicateItem(it.item_id.clone()));
            }
        }
        let total = items.len();
        let items: Vec<AnnotationItem> = if options.filter_exact_match {
            items.into_iter().filter(|it| !exact_match(&it.output, &it.reference)).collect()
        } else {
            items
        };
        if items.is_empty() {
            return Err(StoreError::AllFiltered);
        }
        let id = uuid::Uuid::new_v4().simple().to_string();
        let event = Event::Created {
            session_id: id.clone(),
            filtered: total - items.len(),
            items,
            options,
            timestamp_ms: now_ms(),
        };
        let path = self.dir.join(format!("{id}.jsonl"));
        let tmp = self.dir.join(format!(".{id}.tmp"));
        {
            let mut f = File::create(&tmp)?;
            let mut line = serde_json::to_string(&event).map_err(io::Error::other)?;
            line.push('\n');
            f.write_all(line.as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        File::open(&self.dir)?.sync_all()?;
        let session = replay(&path)?;
        self.sessions.write().expect("lock poisoned").insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok(id)
    }

    pub fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, StoreError> {
        self.sessions
            .read()
            .expect("lock poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| StoreError::UnknownSession(id.to_string()))
    }

    pub fn session_ids(&self) -> Vec<String> {
        let ids: BTreeSet<String> = self.sessions.read().expect("lock poisoned").keys().cloned().collect();
        ids.into_iter().collect()
    }
}

/// Parse an export stream back into labeled records and the summary.
pub fn parse_export(text: &str) -> Result<(Vec<LabeledEvaluation>, Option<ExportSummary>), serde_json::Error> {
    let mut records = Vec::new();
    let mut summary = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let value: serde_json::Value = serde_json::from_str(line)?;
        match value.get("summary") {
            Some(s) => summary = Some(serde_json::from_value(s.clone())?),
            None => records.push(serde_json::from_value(value)?),
        }
    }
    Ok((records, summary))
}

/// Per-item verdict counts across annotators, for conflict resolution.
pub fn verdict_tallies(records: &[LabeledEvaluation]) -> BTreeMap<String, (usize, usize)> {
    let mut out: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in records {
        let e = out.entry(r.id.clone()).or_default();
        if r.verdict.is_valid() { e.0 += 1 } else { e.1 += 1 }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use causalign::tagged::Relation;

    pub(crate) fn item(id: &str, output_effect: &str) -> AnnotationItem {
        AnnotationItem {
            item_id: id.to_string(),
            source: "rates rose so sales fell sharply".to_string(),
            reference: Extraction::new("rates rose", Relation::Cause, "sales fell").unwrap(),
            output: Extraction::new("rates rose", Relation::Cause, output_effect).unwrap(),
        }
    }

    fn ten_items() -> Vec<AnnotationItem> {
        (0..10).map(|i| item(&format!("i{i}"), if i < 4 { "sales fell" } else { "sales fell sharply" })).collect()
    }

    #[test]
    fn exact_matches_are_filtered() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let id = store.create_session(ten_items(), SessionOptions::default()).unwrap();
        assert_eq!(store.session(&id).unwrap().lock().unwrap().items.len(), 6);
        let id = store.create_session(ten_items(), SessionOptions { filter_exact_match: false }).unwrap();
        assert_eq!(store.session(&id).unwrap().lock().unwrap().items.len(), 10);
        assert!(matches!(store.create_session(ten_items()[..4].to_vec(), SessionOptions::default()), Err(StoreError::AllFiltered)));
        assert!(matches!(store.create_session(vec![], SessionOptions::default()), Err(StoreError::EmptySession)));
        let dup = vec![item("a", "x"), item("a", "y")];
        assert!(matches!(store.create_session(dup, SessionOptions::default()), Err(StoreError::DuplicateItem(_))));
    }

    #[test]
    fn cursors_are_per_annotator() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let items = vec![item("a", "x"), item("b", "y"), item("c", "z")];
        let id = store.create_session(items, SessionOptions::default()).unwrap();
        let s = store.session(&id).unwrap();
        let mut s = s.lock().unwrap();
        assert_eq!(s.next_item("ann1").unwrap().item_id, "a");
        s.submit("a", "ann1", Verdict::Valid).unwrap();
        assert_eq!(s.next_item("ann1").unwrap().item_id, "b");
        assert_eq!(s.next_item("ann2").unwrap().item_id, "a");
        s.submit("a", "ann2", Verdict::Invalid).unwrap();
        s.submit("b", "ann1", Verdict::Invalid).unwrap();
        assert_eq!(s.next_item("ann2").unwrap().item_id, "b");
        assert_eq!(s.progress("ann1"), Progress { answered: 2, total: 3 });
        s.submit("c", "ann1", Verdict::Valid).unwrap();
        assert!(s.next_item("ann1").is_none());
        assert!(matches!(s.submit("zz", "ann1", Verdict::Valid), Err(StoreError::UnknownItem(_))));
    }

    #[test]
    fn duplicates_are_idempotent_and_latest_wins() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let id = store.create_session(vec![item("a", "x")], SessionOptions::default()).unwrap();
        {
            let s = store.session(&id).unwrap();
            let mut s = s.lock().unwrap();
            assert!(s.submit("a", "ann", Verdict::Valid).unwrap());
            assert!(!s.submit("a", "ann", Verdict::Valid).unwrap());
            assert!(s.submit("a", "ann", Verdict::Invalid).unwrap());
            assert_eq!(s.history.len(), 2);
        }
        let reopened = Store::open(dir.path()).unwrap();
        let s = reopened.session(&id).unwrap();
        let s = s.lock().unwrap();
        assert_eq!(s.history.len(), 2);
        let (records, summary) = s.export();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].verdict, Verdict::Invalid);
        assert!(summary.pairs.is_empty());
    }

    #[test]
    fn torn_tail_is_dropped_and_log_stays_usable() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let id = store.create_session(vec![item("a", "x"), item("b", "y")], SessionOptions::default()).unwrap();
        store.session(&id).unwrap().lock().unwrap().submit("a", "ann", Verdict::Valid).unwrap();
        drop(store);
        let path = dir.path().join(format!("{id}.jsonl"));
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(br#"{"event":"verdict","item_id":"b","ann"#).unwrap();
        drop(f);
        let store = Store::open(dir.path()).unwrap();
        {
            let s = store.session(&id).unwrap();
            let mut s = s.lock().unwrap();
            assert_eq!(s.history.len(), 1);
            s.submit("b", "ann", Verdict::Invalid).unwrap();
        }
        let store = Store::open(dir.path()).unwrap();
        assert_eq!(store.session(&id).unwrap().lock().unwrap().history.len(), 2);
    }

    #[test]
    fn two_annotator_kappa() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let items: Vec<_> = (0..4).map(|i| item(&format!("i{i}"), "x")).collect();
        let id = store.create_session(items, SessionOptions::default()).unwrap();
        let s = store.session(&id).unwrap();
        let mut s = s.lock().unwrap();
        for (i, (a, b)) in [(true, true), (true, true), (false, false), (false, false)].iter().enumerate() {
            s.submit(&format!("i{i}"), "x", Verdict::from_bool(*a)).unwrap();
            s.submit(&format!("i{i}"), "y", Verdict::from_bool(*b)).unwrap();
        }
        let text = s.export_jsonl();
        let (records, summary) = parse_export(&text).unwrap();
        assert_eq!(records.len(), 8);
        let pair = &summary.unwrap().pairs[0];
        assert_eq!((pair.overlap, pair.kappa, pair.agreement), (4, 1.0, 1.0));
        assert_eq!(verdict_tallies(&records)["i0"], (2, 0));
    }
}
