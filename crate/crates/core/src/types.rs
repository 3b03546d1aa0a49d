//! Shared domain vocabulary: consultations, tokens, mentions and annotation sets.
//!
//! All offsets are 0-based, half-open and counted in Unicode scalar values
//! (`char`s), never bytes.

use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of `char`s in `text`.
pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

/// Byte offset of every char boundary in `text`, including the end.
pub fn char_boundaries(text: &str) -> Vec<usize> {
    let mut out: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
    out.push(text.len());
    out
}

/// Slice `text` by char offsets.
pub fn char_slice(text: &str, start: usize, end: usize) -> Result<&str> {
    let bounds = char_boundaries(text);
    let len = bounds.len() - 1;
    if start > end || end > len {
        return Err(Error::Offset { start, end, len });
    }
    Ok(&text[bounds[start]..bounds[end]])
}

/// Half-open char span `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub const fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    /// Length of the char intersection with `other` (0 when disjoint or touching).
    pub fn overlap_len(&self, other: &Span) -> usize {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        hi.saturating_sub(lo)
    }

    pub fn intersects(&self, other: &Span) -> bool {
        self.overlap_len(other) > 0
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Category {
    KeyFinding,
    NormalFinding,
}

impl Category {
    pub fn as_str(&self) -> &'static str {
        match self {
            Category::KeyFinding => "KEY_FINDING",
            Category::NormalFinding => "NORMAL_FINDING",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "KEY_FINDING" | "KEY" => Ok(Category::KeyFinding),
            "NORMAL_FINDING" | "NORMAL" => Ok(Category::NormalFinding),
            other => Err(Error::Validation(format!("unknown category {other:?}"))),
        }
    }
}

/// An HPO identifier of the form `HP:#######`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct HpoId(String);

impl HpoId {
    pub fn new(raw: impl Into<String>) -> Result<Self> {
        let raw = raw.into();
        if Self::is_valid(&raw) {
            Ok(HpoId(raw))
        } else {
            Err(Error::Validation(format!("malformed HPO id {raw:?}")))
        }
    }

    pub fn is_valid(raw: &str) -> bool {
        raw.len() == 10 && raw.starts_with("HP:") && raw[3..].bytes().all(|b| b.is_ascii_digit())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for HpoId {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        HpoId::new(value)
    }
}

impl From<HpoId> for String {
    fn from(id: HpoId) -> Self {
        id.0
    }
}

impl FromStr for HpoId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HpoId::new(s)
    }
}

impl fmt::Display for HpoId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A possibly discontinuous entity mention.
///
/// Equality and hashing consider the fragment list and `hpo_id` only; the
/// category is ignored, matching how predictions are scored.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RawMention", into = "RawMention")]
pub struct Mention {
    fragments: Vec<Span>,
    pub category: Category,
    pub hpo_id: Option<HpoId>,
}

#[derive(Serialize, Deserialize)]
struct RawMention {
    fragments: Vec<(usize, usize)>,
    category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hpo_id: Option<HpoId>,
}

impl TryFrom<RawMention> for Mention {
    type Error = Error;

    fn try_from(raw: RawMention) -> Result<Self> {
        let spans = raw
            .fragments
            .into_iter()
            .map(|(s, e)| Span::new(s, e))
            .collect();
        Mention::new(spans, raw.category, raw.hpo_id)
    }
}

impl From<Mention> for RawMention {
    fn from(m: Mention) -> Self {
        RawMention {
            fragments: m.fragments.iter().map(|s| (s.start, s.end)).collect(),
            category: m.category,
            hpo_id: m.hpo_id,
        }
    }
}

impl Mention {
    /// Builds a mention, sorting fragments by start. Empty fragment lists,
    /// empty fragments and intersecting fragments are rejected.
    pub fn new(
        mut fragments: Vec<Span>,
        category: Category,
        hpo_id: Option<HpoId>,
    ) -> Result<Self> {
        if fragments.is_empty() {
            return Err(Error::InvalidMention("no fragments".into()));
        }
        fragments.sort();
        for f in &fragments {
            if f.is_empty() {
                return Err(Error::InvalidMention(format!("empty fragment {f}")));
            }
        }
        for pair in fragments.windows(2) {
            if pair[0].end > pair[1].start {
                return Err(Error::InvalidMention(format!(
                    "fragments {} and {} intersect",
                    pair[0], pair[1]
                )));
            }
        }
        Ok(Mention {
            fragments,
            category,
            hpo_id,
        })
    }

    pub fn single(start: usize, end: usize, category: Category) -> Result<Self> {
        Mention::new(vec![Span::new(start, end)], category, None)
    }

    pub fn with_hpo(mut self, id: Option<HpoId>) -> Self {
        self.hpo_id = id;
        self
    }

    pub fn fragments(&self) -> &[Span] {
        &self.fragments
    }

    pub fn is_discontinuous(&self) -> bool {
        self.fragments.len() >= 2
    }

    /// Total number of chars covered by the fragments.
    pub fn covered_len(&self) -> usize {
        self.fragments.iter().map(Span::len).sum()
    }

    pub fn start(&self) -> usize {
        self.fragments[0].start
    }

    pub fn end(&self) -> usize {
        self.fragments[self.fragments.len() - 1].end
    }

    /// Fragment substrings of `text` joined by a single space.
    pub fn text(&self, text: &str) -> Result<String> {
        let bounds = char_boundaries(text);
        let len = bounds.len() - 1;
        let mut parts = Vec::with_capacity(self.fragments.len());
        for f in &self.fragments {
            if f.end > len {
                return Err(Error::Offset {
                    start: f.start,
                    end: f.end,
                    len,
                });
            }
            parts.push(&text[bounds[f.start]..bounds[f.end]]);
        }
        Ok(parts.join(" "))
    }

    /// True iff some fragment of `self` intersects some fragment of `other`.
    pub fn overlaps(&self, other: &Mention) -> bool {
        self.overlap_len(other) > 0
    }

    /// Sum of pairwise fragment intersections.
    pub fn overlap_len(&self, other: &Mention) -> usize {
        let mut total = 0;
        for a in &self.fragments {
            for b in &other.fragments {
                total += a.overlap_len(b);
            }
        }
        total
    }

    /// `"s-e;s-e"` rendering used by the annotation TSV.
    pub fn fragments_string(&self) -> String {
        self.fragments
            .iter()
            .map(Span::to_string)
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn parse_fragments(raw: &str) -> Result<Vec<Span>> {
        raw.split(';')
            .map(|part| {
                let (s, e) = part
                    .split_once('-')
                    .ok_or_else(|| Error::Validation(format!("bad fragment {part:?}")))?;
                let start = s
                    .trim()
                    .parse()
                    .map_err(|_| Error::Validation(format!("bad fragment start {s:?}")))?;
                let end = e
                    .trim()
                    .parse()
                    .map_err(|_| Error::Validation(format!("bad fragment end {e:?}")))?;
                Ok(Span::new(start, end))
            })
            .collect()
    }

    /// Ordering key: fragments, then HPO id.
    pub fn sort_key(&self) -> (&[Span], Option<&HpoId>) {
        (&self.fragments, self.hpo_id.as_ref())
    }
}

impl PartialEq for Mention {
    fn eq(&self, other: &Self) -> bool {
        self.fragments == other.fragments && self.hpo_id == other.hpo_id
    }
}

impl Eq for Mention {}

impl Hash for Mention {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.fragments.hash(state);
        self.hpo_id.hash(state);
    }
}

/// Free-function form of [`Mention::text`].
pub fn mention_text(m: &Mention, text: &str) -> Result<String> {
    m.text(text)
}

/// Free-function form of [`Mention::overlaps`].
pub fn fragments_overlap(a: &Mention, b: &Mention) -> bool {
    a.overlaps(b)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub start: usize,
    pub end: usize,
    pub surface: String,
}

impl Token {
    pub fn span(&self) -> Span {
        Span::new(self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub start: usize,
    pub tokens: Vec<Token>,
}

impl Sentence {
    pub fn end(&self) -> usize {
        self.tokens.last().map_or(self.start, |t| t.end)
    }

    pub fn span(&self) -> Span {
        Span::new(self.start, self.end())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Index of the token starting exactly at `start`.
    pub fn token_starting_at(&self, start: usize) -> Option<usize> {
        self.tokens.binary_search_by_key(&start, |t| t.start).ok()
    }

    /// Index of the token ending exactly at `end`.
    pub fn token_ending_at(&self, end: usize) -> Option<usize> {
        self.tokens.iter().position(|t| t.end == end)
    }

    /// Builds a standalone sentence by splitting `text` on whitespace and
    /// punctuation, using the tokenizer rules of [`crate::preprocess`].
    pub fn from_text(text: &str) -> Sentence {
        let tokens = crate::preprocess::tokenize(text, 0);
        Sentence {
            start: tokens.first().map_or(0, |t| t.start),
            tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Consultation {
    pub id: String,
    pub text: String,
    pub sentences: Vec<Sentence>,
}

impl Consultation {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Validation("consultation id is empty".into()));
        }
        let len = char_len(&self.text);
        let bounds = char_boundaries(&self.text);
        let mut prev_end = 0;
        for s in &self.sentences {
            if s.start < prev_end {
                return Err(Error::Validation(format!(
                    "sentence at {} overlaps its predecessor",
                    s.start
                )));
            }
            let mut tok_end = s.start;
            for t in &s.tokens {
                if t.start >= t.end || t.start < tok_end || t.end > len {
                    return Err(Error::Validation(format!(
                        "token {}..{} is empty, unsorted or out of bounds",
                        t.start, t.end
                    )));
                }
                if self.text[bounds[t.start]..bounds[t.end]] != t.surface {
                    return Err(Error::Validation(format!(
                        "token surface {:?} does not match text",
                        t.surface
                    )));
                }
                tok_end = t.end;
            }
            prev_end = s.end();
        }
        Ok(())
    }
}

/// Mentions attached to one consultation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub consultation_id: String,
    pub mentions: Vec<Mention>,
}

impl AnnotationSet {
    pub fn new(consultation_id: impl Into<String>) -> Self {
        AnnotationSet {
            consultation_id: consultation_id.into(),
            mentions: Vec::new(),
        }
    }

    /// Adds `m` unless an equal mention is already present. Returns whether it was added.
    pub fn push_unique(&mut self, m: Mention) -> bool {
        if self.mentions.contains(&m) {
            false
        } else {
            self.mentions.push(m);
            true
        }
    }

    pub fn sort(&mut self) {
        self.mentions.sort_by(|a, b| {
            a.sort_key()
                .cmp(&b.sort_key())
                .then(a.category.cmp(&b.category))
        });
    }

    pub fn key_findings(&self) -> impl Iterator<Item = &Mention> {
        self.mentions
            .iter()
            .filter(|m| m.category == Category::KeyFinding)
    }

    pub fn validate(&self, text: &str) -> Result<()> {
        let len = char_len(text);
        for (i, m) in self.mentions.iter().enumerate() {
            if m.end() > len {
                return Err(Error::Offset {
                    start: m.start(),
                    end: m.end(),
                    len,
                });
            }
            if self.mentions[..i].contains(m) {
                return Err(Error::Validation(format!(
                    "duplicate mention {} in {}",
                    m.fragments_string(),
                    self.consultation_id
                )));
            }
        }
        Ok(())
    }
}
