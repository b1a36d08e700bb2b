//! The `[Cause] … [Relation] … [Effect] …` representation shared by every
//! file and wire payload that carries an extraction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// One of the three markers of the tagged format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tag {
    Cause,
    Relation,
    Effect,
}

impl Tag {
    pub const ALL: [Tag; 3] = [Tag::Cause, Tag::Relation, Tag::Effect];

    pub fn marker(self) -> &'static str {
        match self {
            Tag::Cause => "[Cause]",
            Tag::Relation => "[Relation]",
            Tag::Effect => "[Effect]",
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.marker())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("missing {0} marker")]
    MissingTag(Tag),
    #[error("{0} marker is duplicated or out of order")]
    TagOrder(Tag),
    #[error("unknown relation {0:?} after [Relation]")]
    UnknownRelation(String),
    #[error("{0} field is empty")]
    EmptyField(Tag),
    #[error("{0} field contains a tag marker")]
    MarkerInField(Tag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum Relation {
    #[default]
    Cause,
    Prevent,
    Enable,
}

impl Relation {
    pub const ALL: [Relation; 3] = [Relation::Cause, Relation::Prevent, Relation::Enable];

    pub fn as_str(self) -> &'static str {
        match self {
            Relation::Cause => "cause",
            Relation::Prevent => "prevent",
            Relation::Enable => "enable",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Relation> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Relation {
    type Err = FormatError;

    /// Case-insensitive, surrounding whitespace ignored.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_lowercase();
        match t.as_str() {
            "cause" => Ok(Relation::Cause),
            "prevent" => Ok(Relation::Prevent),
            "enable" => Ok(Relation::Enable),
            _ => Err(FormatError::UnknownRelation(s.trim().to_string())),
        }
    }
}

impl Serialize for Relation {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Relation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Trim and collapse every run of Unicode whitespace to a single space.
pub fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// A (cause, relation, effect) triple with whitespace-normalized fields.
///
/// Fields are non-empty and never contain one of the three tag markers, so
/// every value serializes to a string that parses back to itself.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Extraction {
    cause: String,
    relation: Relation,
    effect: String,
}

fn check_field(tag: Tag, text: &str) -> Result<String, FormatError> {
    let norm = normalize_ws(text);
    if norm.is_empty() {
        return Err(FormatError::EmptyField(tag));
    }
    if Tag::ALL.iter().any(|t| norm.contains(t.marker())) {
        return Err(FormatError::MarkerInField(tag));
    }
    Ok(norm)
}

impl Extraction {
    pub fn new(cause: &str, relation: Relation, effect: &str) -> Result<Self, FormatError> {
        Ok(Self {
            cause: check_field(Tag::Cause, cause)?,
            relation,
            effect: check_field(Tag::Effect, effect)?,
        })
    }

    pub fn cause(&self) -> &str {
        &self.cause
    }

    pub fn effect(&self) -> &str {
        &self.effect
    }

    pub fn relation(&self) -> Relation {
        self.relation
    }

    pub fn with_relation(mut self, relation: Relation) -> Self {
        self.relation = relation;
        self
    }

    pub fn to_tagged(&self) -> TaggedString {
        serialize_extraction(self)
    }
}

impl fmt::Display for Extraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[Cause] {} [Relation] {} [Effect] {}",
            self.cause, self.relation, self.effect
        )
    }
}

impl FromStr for Extraction {
    type Err = FormatError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_extraction(s)
    }
}

impl Serialize for Extraction {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Extraction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_extraction(&s).map_err(serde::de::Error::custom)
    }
}

/// A string in the exact form `[Cause] <c> [Relation] <r> [Effect] <e>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaggedString(String);

impl TaggedString {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl fmt::Display for TaggedString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn serialize_extraction(e: &Extraction) -> TaggedString {
    TaggedString(e.to_string())
}

/// Parse a tagged string. Text before `[Cause]` is ignored.
pub fn parse_extraction(s: &str) -> Result<Extraction, FormatError> {
    let mut positions = [0usize; 3];
    for (slot, tag) in positions.iter_mut().zip(Tag::ALL) {
        let mut found = s.match_indices(tag.marker());
        match (found.next(), found.next()) {
            (None, _) => return Err(FormatError::MissingTag(tag)),
            (Some(_), Some(_)) => return Err(FormatError::TagOrder(tag)),
            (Some((i, _)), None) => *slot = i,
        }
    }
    let [c, r, e] = positions;
    if r < c {
        return Err(FormatError::TagOrder(Tag::Relation));
    }
    if e < r {
        return Err(FormatError::TagOrder(Tag::Effect));
    }
    let cause = &s[c + Tag::Cause.marker().len()..r];
    let relation = &s[r + Tag::Relation.marker().len()..e];
    let effect = &s[e + Tag::Effect.marker().len()..];
    let relation: Relation = relation.parse()?;
    Extraction::new(cause, relation, effect)
}
