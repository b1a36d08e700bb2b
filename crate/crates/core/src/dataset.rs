//! Converters from the three upstream causal-extraction layouts to the
//! line-delimited interchange format, plus corpus statistics.
//!
//! Accepted input layouts:
//!
//! * **FCR**: a JSON array or one JSON object per line. Each record has
//!   `text` (alias `context`), `cause` and `effect` as `[start, end)` character
//!   offset pairs (or lists of pairs, of which the first is used), a
//!   `relation` (alias `label`) and an optional `id`.
//! * **FinCausal**: semicolon-separated CSV with header columns `Index`,
//!   `Text`, `Cause`, `Effect` (case and surrounding spaces ignored).
//! * **SCITE**: XML `<item id="..">` elements holding a `<sentence>` whose
//!   spans are wrapped in `<e1>`, `<e2>`, … and a `<label>` such as
//!   `Cause-Effect((e1,e2),(e3,e4))`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use quick_xml::events::Event;
use quick_xml::Reader;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::metrics::normalize_tokens;
use crate::tagged::{normalize_ws, Extraction, FormatError, Relation};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("malformed record {id}: {msg}")]
    Malformed { id: String, msg: String },
    #[error("record {id}: {field} index {index} out of range for context of length {len}")]
    IndexOutOfRange { id: String, field: &'static str, index: usize, len: usize },
    #[error("record {id}: {field} is empty")]
    EmptyField { id: String, field: &'static str },
    #[error("record {id}: {field} is not a substring of the context")]
    NotSubstring { id: String, field: &'static str },
    #[error("record {id}: {source}")]
    Format { id: String, source: FormatError },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column {0:?}")]
    MissingColumn(&'static str),
    #[error("markup: {0}")]
    Markup(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    /// Guess the split from a file name (`train`, `dev`/`val`, `test`).
    pub fn infer(path: &Path) -> Option<Split> {
        let name = path.file_name()?.to_string_lossy().to_lowercase();
        if name.contains("train") {
            Some(Split::Train)
        } else if name.contains("dev") || name.contains("val") {
            Some(Split::Dev)
        } else if name.contains("test") {
            Some(Split::Test)
        } else {
            None
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "dev" | "val" | "validation" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Fcr,
    Fincausal,
    Scite,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Fcr => "fcr",
            DatasetKind::Fincausal => "fincausal",
            DatasetKind::Scite => "scite",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_lowercase().as_str() {
            "fcr" => Ok(DatasetKind::Fcr),
            "fincausal" => Ok(DatasetKind::Fincausal),
            "scite" => Ok(DatasetKind::Scite),
            other => Err(format!("unknown dataset {other:?}")),
        }
    }
}

impl DatasetKind {
    /// Only FCR carries relation labels; the others are fixed to `cause`.
    pub fn has_relations(self) -> bool {
        self == DatasetKind::Fcr
    }
}

/// One interchange record: a passage and its gold extraction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "InstanceRecord", try_from = "InstanceRecord")]
pub struct CausalInstance {
    pub id: String,
    pub context: String,
    pub gold: Extraction,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    id: String,
    context: String,
    cause: String,
    effect: String,
    relation: Relation,
    split: Split,
}

impl From<CausalInstance> for InstanceRecord {
    fn from(i: CausalInstance) -> Self {
        Self {
            id: i.id,
            context: i.context,
            cause: i.gold.cause().to_string(),
            effect: i.gold.effect().to_string(),
            relation: i.gold.relation(),
            split: i.split,
        }
    }
}

impl TryFrom<InstanceRecord> for CausalInstance {
    type Error = FormatError;

    fn try_from(r: InstanceRecord) -> Result<Self, Self::Error> {
        Ok(Self {
            gold: Extraction::new(&r.cause, r.relation, &r.effect)?,
            id: r.id,
            context: r.context,
            split: r.split,
        })
    }
}

impl CausalInstance {
    /// Whether both gold fields occur verbatim (after whitespace
    /// normalization) inside the context.
    pub fn spans_in_context(&self) -> bool {
        let ctx = normalize_ws(&self.context);
        ctx.contains(self.gold.cause()) && ctx.contains(self.gold.effect())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ConvertOptions {
    /// Fail instead of flagging when a span is not a substring of the context.
    pub strict: bool,
    /// Interpret FCR offsets as UTF-8 byte offsets instead of characters.
    pub byte_offsets: bool,
    pub split: Split,
}

/// Converted instances plus ids flagged for annotation noise.
#[derive(Debug, Clone, Default)]
pub struct Converted {
    pub instances: Vec<CausalInstance>,
    pub flagged: Vec<String>,
    pub skipped: Vec<String>,
}

pub fn convert(kind: DatasetKind, text: &str, opts: &ConvertOptions) -> Result<Converted, DatasetError> {
    match kind {
        DatasetKind::Fcr => convert_fcr(text, opts),
        DatasetKind::Fincausal => convert_fincausal(text, opts),
        DatasetKind::Scite => convert_scite(text, opts),
    }
}

pub fn convert_file(kind: DatasetKind, path: &Path, opts: &ConvertOptions) -> Result<Converted, DatasetError> {
    let text = std::fs::read_to_string(path)?;
    convert(kind, &text, opts)
}

fn build(
    id: String,
    context: &str,
    cause: &str,
    effect: &str,
    relation: Relation,
    split: Split,
) -> Result<CausalInstance, DatasetError> {
    let gold = Extraction::new(cause, relation, effect).map_err(|source| match source {
        FormatError::EmptyField(t) => DatasetError::EmptyField {
            id: id.clone(),
            field: if t == crate::tagged::Tag::Cause { "cause" } else { "effect" },
        },
        source => DatasetError::Format { id: id.clone(), source },
    })?;
    Ok(CausalInstance { id, context: context.to_string(), gold, split })
}

fn check_substrings(inst: &CausalInstance, opts: &ConvertOptions, out: &mut Converted) -> Result<(), DatasetError> {
    if inst.spans_in_context() {
        return Ok(());
    }
    let ctx = normalize_ws(&inst.context);
    let field = if ctx.contains(inst.gold.cause()) { "effect" } else { "cause" };
    if opts.strict {
        return Err(DatasetError::NotSubstring { id: inst.id.clone(), field });
    }
    warn!("record {}: {field} is not a substring of the context", inst.id);
    out.flagged.push(inst.id.clone());
    Ok(())
}

// ---------------------------------------------------------------- FCR

fn fcr_records(text: &str) -> Result<Vec<Value>, DatasetError> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        return match serde_json::from_str::<Value>(trimmed) {
            Ok(Value::Array(items)) => Ok(items),
            Ok(_) => unreachable!("leading bracket parses to an array"),
            Err(e) => Err(DatasetError::Malformed { id: "<file>".into(), msg: e.to_string() }),
        };
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| DatasetError::Malformed { id: format!("line {}", i + 1), msg: e.to_string() })
        })
        .collect()
}

fn id_of(rec: &Value, index: usize) -> String {
    match rec.get("id").or_else(|| rec.get("idx")) {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => index.to_string(),
    }
}

/// First `[start, end)` pair of a span field that is either a pair or a list of pairs.
fn first_span(rec: &Value, field: &'static str, id: &str) -> Result<(usize, usize), DatasetError> {
    let malformed = |msg: &str| DatasetError::Malformed { id: id.to_string(), msg: format!("{field}: {msg}") };
    let v = rec.get(field).ok_or_else(|| malformed("missing"))?;
    let pair = match v {
        Value::Array(items) if items.first().is_some_and(Value::is_array) => &items[0],
        other => other,
    };
    let nums = pair.as_array().ok_or_else(|| malformed("expected [start, end]"))?;
    match nums.as_slice() {
        [a, b] => {
            let a = a.as_u64().ok_or_else(|| malformed("non-integer offset"))?;
            let b = b.as_u64().ok_or_else(|| malformed("non-integer offset"))?;
            Ok((a as usize, b as usize))
        }
        _ => Err(malformed("expected [start, end]")),
    }
}

fn slice_span<'a>(
    context: &'a str,
    (start, end): (usize, usize),
    field: &'static str,
    id: &str,
    byte_offsets: bool,
) -> Result<&'a str, DatasetError> {
    let len = if byte_offsets { context.len() } else { context.chars().count() };
    if end > len || start > end {
        return Err(DatasetError::IndexOutOfRange { id: id.to_string(), field, index: end.max(start), len });
    }
    let text = if byte_offsets {
        context.get(start..end).ok_or_else(|| DatasetError::Malformed {
            id: id.to_string(),
            msg: format!("{field}: byte offsets split a character"),
        })?
    } else {
        let byte_at = |c: usize| context.char_indices().nth(c).map_or(context.len(), |(b, _)| b);
        &context[byte_at(start)..byte_at(end)]
    };
    if text.trim().is_empty() {
        return Err(DatasetError::EmptyField { id: id.to_string(), field });
    }
    Ok(text)
}

pub fn convert_fcr(text: &str, opts: &ConvertOptions) -> Result<Converted, DatasetError> {
    let mut out = Converted::default();
    for (i, rec) in fcr_records(text)?.iter().enumerate() {
        let id = id_of(rec, i);
        let context = rec
            .get("text")
            .or_else(|| rec.get("context"))
            .and_then(Value::as_str)
            .ok_or_else(|| DatasetError::Malformed { id: id.clone(), msg: "missing text".into() })?;
        let relation = rec
            .get("relation")
            .or_else(|| rec.get("label"))
            .and_then(Value::as_str)
            .ok_or_else(|| DatasetError::Malformed { id: id.clone(), msg: "missing relation".into() })?;
        let relation: Relation =
            relation.parse().map_err(|source| DatasetError::Format { id: id.clone(), source })?;
        let cause = slice_span(context, first_span(rec, "cause", &id)?, "cause", &id, opts.byte_offsets)?;
        let effect = slice_span(context, first_span(rec, "effect", &id)?, "effect", &id, opts.byte_offsets)?;
        let inst = build(id, context, cause, effect, relation, opts.split)?;
        // Slices of the context always satisfy the substring property.
        debug_assert!(inst.spans_in_context());
        out.instances.push(inst);
    }
    Ok(out)
}

// ---------------------------------------------------------- FinCausal

pub fn convert_fincausal(text: &str, opts: &ConvertOptions) -> Result<Converted, DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b';')
        .flexible(false)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_lowercase()).collect();
    let col = |name: &'static str| {
        headers.iter().position(|h| h == name).ok_or(DatasetError::MissingColumn(name))
    };
    let (ci, ct, cc, ce) = (col("index")?, col("text")?, col("cause")?, col("effect")?);
    let mut out = Converted::default();
    for row in reader.records() {
        let row = row?;
        let get = |i: usize| row.get(i).unwrap_or("").trim();
        let inst = build(get(ci).to_string(), get(ct), get(cc), get(ce), Relation::Cause, opts.split)?;
        check_substrings(&inst, opts, &mut out)?;
        out.instances.push(inst);
    }
    Ok(out)
}

// -------------------------------------------------------------- SCITE

struct SciteItem {
    id: String,
    sentence: String,
    spans: HashMap<String, (usize, usize)>,
    label: String,
}

fn markup_err(reader: &Reader<&[u8]>, e: impl fmt::Display) -> DatasetError {
    DatasetError::Markup(format!("at byte {}: {e}", reader.buffer_position()))
}

fn resolve_entity(name: &str) -> Option<String> {
    if let Some(num) = name.strip_prefix('#') {
        let code = match num.strip_prefix(['x', 'X']) {
            Some(hex) => u32::from_str_radix(hex, 16).ok()?,
            None => num.parse().ok()?,
        };
        return char::from_u32(code).map(String::from);
    }
    quick_xml::escape::resolve_predefined_entity(name).map(str::to_string)
}

fn parse_scite_items(text: &str) -> Result<Vec<SciteItem>, DatasetError> {
    let mut reader = Reader::from_str(text);
    let mut items = Vec::new();
    let mut current: Option<SciteItem> = None;
    // Innermost open element inside an item: "sentence", "label", or "eN".
    let mut stack: Vec<String> = Vec::new();
    let mut open_spans: Vec<(String, usize)> = Vec::new();

    loop {
        let ev = reader.read_event().map_err(|e| markup_err(&reader, e))?;
        match ev {
            Event::Start(start) => {
                let name = String::from_utf8_lossy(start.name().as_ref()).to_string();
                if name == "item" {
                    if current.is_some() {
                        return Err(markup_err(&reader, "nested <item>"));
                    }
                    let mut id = (items.len() + 1).to_string();
                    for attr in start.attributes() {
                        let attr = attr.map_err(|e| markup_err(&reader, e))?;
                        if attr.key.as_ref() == b"id" {
                            id = attr
                                .unescape_value()
                                .map_err(|e| markup_err(&reader, e))?
                                .to_string();
                        }
                    }
                    current = Some(SciteItem { id, sentence: String::new(), spans: HashMap::new(), label: String::new() });
                } else if let Some(item) = current.as_ref() {
                    if stack.last().is_some_and(|s| s == "sentence") || stack.iter().any(|s| s == "sentence") {
                        open_spans.push((name.clone(), item.sentence.len()));
                    }
                    stack.push(name);
                }
            }
            Event::End(end) => {
                let name = String::from_utf8_lossy(end.name().as_ref()).to_string();
                if name == "item" {
                    if !stack.is_empty() {
                        return Err(markup_err(&reader, "unclosed element inside <item>"));
                    }
                    items.extend(current.take());
                } else if current.is_some() {
                    if stack.pop().as_deref() != Some(name.as_str()) {
                        return Err(markup_err(&reader, format!("mismatched </{name}>")));
                    }
                    if let Some(pos) = open_spans.iter().rposition(|(n, _)| *n == name) {
                        let (n, start) = open_spans.remove(pos);
                        let item = current.as_mut().expect("inside item");
                        item.spans.entry(n).or_insert((start, item.sentence.len()));
                    }
                }
            }
            Event::Text(t) => {
                if let Some(item) = current.as_mut() {
                    let s = t.decode().map_err(|e| markup_err(&reader, e))?;
                    push_text(item, &stack, &s);
                }
            }
            Event::GeneralRef(r) => {
                if let Some(item) = current.as_mut() {
                    let name = r.decode().map_err(|e| markup_err(&reader, e))?;
                    let resolved = resolve_entity(&name)
                        .ok_or_else(|| markup_err(&reader, format!("unknown entity &{name};")))?;
                    push_text(item, &stack, &resolved);
                }
            }
            Event::CData(c) => {
                if let Some(item) = current.as_mut() {
                    push_text(item, &stack, &String::from_utf8_lossy(&c));
                }
            }
            Event::Eof => break,
            _ => {}
        }
    }
    if current.is_some() {
        return Err(DatasetError::Markup("unterminated <item>".into()));
    }
    Ok(items)
}

fn push_text(item: &mut SciteItem, stack: &[String], s: &str) {
    if stack.iter().any(|n| n == "sentence") {
        item.sentence.push_str(s);
    } else if stack.last().is_some_and(|n| n == "label") {
        item.label.push_str(s);
    }
}

/// Ordered `(cause, effect)` tag pairs of a label such as
/// `Cause-Effect((e1,e2),(e3,e4))`.
pub fn scite_label_pairs(label: &str) -> Vec<(String, String)> {
    if !label.trim().to_lowercase().starts_with("cause-effect") {
        return Vec::new();
    }
    let mut pairs = Vec::new();
    let mut rest = label;
    while let Some(open) = rest.find('(') {
        rest = &rest[open + 1..];
        let Some(close) = rest.find(')') else { break };
        let inner = &rest[..close];
        if let Some((a, b)) = inner.split_once(',') {
            let (a, b) = (a.trim(), b.trim());
            if a.starts_with('e') && b.starts_with('e') && !a.contains('(') {
                pairs.push((a.to_string(), b.to_string()));
            }
        }
    }
    pairs
}

pub fn convert_scite(text: &str, opts: &ConvertOptions) -> Result<Converted, DatasetError> {
    let mut out = Converted::default();
    for item in parse_scite_items(text)? {
        let pairs = scite_label_pairs(&item.label);
        let Some((c, e)) = pairs.first() else {
            warn!("item {}: no causal relation, skipped", item.id);
            out.skipped.push(item.id);
            continue;
        };
        let span = |tag: &str| {
            item.spans.get(tag).map(|&(a, b)| &item.sentence[a..b]).ok_or_else(|| DatasetError::Malformed {
                id: item.id.clone(),
                msg: format!("label references missing span <{tag}>"),
            })
        };
        let (cause, effect) = (span(c)?, span(e)?);
        let context = normalize_ws(&item.sentence);
        let inst = build(item.id.clone(), &context, cause, effect, Relation::Cause, opts.split)?;
        check_substrings(&inst, opts, &mut out)?;
        out.instances.push(inst);
    }
    Ok(out)
}

// -------------------------------------------------------------- stats

/// Per-split counts and mean word counts per part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub counts: BTreeMap<Split, usize>,
    pub total: usize,
    pub mean_context_words: f64,
    pub mean_cause_words: f64,
    pub mean_effect_words: f64,
    /// Set when the input was empty and the means are placeholders.
    pub empty: bool,
}

pub fn dataset_stats(instances: &[CausalInstance]) -> StatsReport {
    let mut counts: BTreeMap<Split, usize> = Split::ALL.iter().map(|s| (*s, 0)).collect();
    let (mut ctx, mut cause, mut effect) = (0usize, 0usize, 0usize);
    for inst in instances {
        *counts.entry(inst.split).or_default() += 1;
        ctx += normalize_tokens(&inst.context).len();
        cause += normalize_tokens(inst.gold.cause()).len();
        effect += normalize_tokens(inst.gold.effect()).len();
    }
    let n = instances.len();
    let mean = |total: usize| if n == 0 { 0.0 } else { total as f64 / n as f64 };
    StatsReport {
        counts,
        total: n,
        mean_context_words: mean(ctx),
        mean_cause_words: mean(cause),
        mean_effect_words: mean(effect),
        empty: n == 0,
    }
}
