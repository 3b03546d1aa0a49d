//! Clinical text rewriting (abbreviation and percentile-expression expansion),
//! sentence splitting and tokenization.
//!
//! Every rewrite produces a [`RewriteTrace`] so that spans found on the
//! rewritten text can be projected back onto the original text, which is
//! where gold annotations live.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;

use crate::error::{Error, Result};
use crate::types::{char_len, Consultation, Mention, Sentence, Span, Token};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbbreviationLexicon {
    entries: BTreeMap<String, String>,
    case_sensitive: bool,
    /// Keys as char vectors, longest first.
    keys: Vec<(Vec<char>, String)>,
}

impl AbbreviationLexicon {
    /// Rejects empty entries and any expansion that itself contains a
    /// token-bounded lexicon key.
    pub fn new(entries: BTreeMap<String, String>, case_sensitive: bool) -> Result<Self> {
        for (abbr, expansion) in &entries {
            if abbr.trim().is_empty() || expansion.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "empty abbreviation entry {abbr:?} -> {expansion:?}"
                )));
            }
        }
        let mut keys: Vec<(Vec<char>, String)> = entries
            .keys()
            .map(|k| {
                let chars: Vec<char> = if case_sensitive {
                    k.chars().collect()
                } else {
                    k.to_lowercase().chars().collect()
                };
                (chars, k.clone())
            })
            .collect();
        keys.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.1.cmp(&b.1)));
        let lex = AbbreviationLexicon {
            entries,
            case_sensitive,
            keys,
        };
        for (abbr, expansion) in &lex.entries {
            if let Some((_, key)) = lex.find_matches(expansion).first() {
                return Err(Error::Validation(format!(
                    "expansion of {abbr:?} ({expansion:?}) contains abbreviation {key:?}"
                )));
            }
        }
        Ok(lex)
    }

    /// Reads `abbreviation<TAB>expansion` lines; `#` starts a comment line.
    pub fn from_tsv(source: &str, case_sensitive: bool) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, line) in source.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (abbr, expansion) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(idx + 1, "expected abbreviation<TAB>expansion"))?;
            if entries
                .insert(abbr.trim().to_string(), expansion.trim().to_string())
                .is_some()
            {
                return Err(Error::parse(
                    idx + 1,
                    format!("duplicate abbreviation {abbr:?}"),
                ));
            }
        }
        Self::new(entries, case_sensitive)
    }

    pub fn load(path: &Path, case_sensitive: bool) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&raw, case_sensitive)
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    pub fn is_case_sensitive(&self) -> bool {
        self.case_sensitive
    }

    /// Token-bounded, non-overlapping, leftmost-longest key occurrences as
    /// `(char span, original key)`.
    fn find_matches(&self, text: &str) -> Vec<(Span, String)> {
        let chars: Vec<char> = text.chars().collect();
        let folded: Vec<char> = if self.case_sensitive {
            chars.clone()
        } else {
            // Per-char folding keeps offsets aligned with `chars`.
            chars
                .iter()
                .map(|c| {
                    let mut low = c.to_lowercase();
                    match (low.next(), low.next()) {
                        (Some(l), None) => l,
                        _ => *c,
                    }
                })
                .collect()
        };
        let boundary = |i: usize| i >= chars.len() || !chars[i].is_alphanumeric();
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < chars.len() {
            if pos > 0 && chars[pos - 1].is_alphanumeric() {
                pos += 1;
                continue;
            }
            let hit = self.keys.iter().find(|(key, _)| {
                let end = pos + key.len();
                end <= folded.len() && folded[pos..end] == key[..] && boundary(end)
            });
            match hit {
                Some((key, original)) => {
                    out.push((Span::new(pos, pos + key.len()), original.clone()));
                    pos += key.len();
                }
                None => pos += 1,
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edit {
    /// Span in the original text.
    pub orig: Span,
    /// Span in the rewritten text.
    pub new: Span,
    pub rule: String,
}

/// A rewrite of `original` into `rewritten` with the edits that produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewriteTrace {
    pub original: String,
    pub rewritten: String,
    pub edits: Vec<Edit>,
}

impl RewriteTrace {
    pub fn identity(text: &str) -> Self {
        RewriteTrace {
            original: text.to_string(),
            rewritten: text.to_string(),
            edits: Vec::new(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.edits.is_empty()
    }

    /// Builds a trace by replacing each `(orig span, replacement, rule)` in `text`.
    /// Replacements must be sorted and disjoint.
    fn from_replacements(text: &str, replacements: Vec<(Span, String, String)>) -> Self {
        let chars: Vec<char> = text.chars().collect();
        let mut rewritten = String::with_capacity(text.len());
        let mut edits = Vec::with_capacity(replacements.len());
        let mut cursor = 0;
        let mut out_len = 0;
        for (span, replacement, rule) in replacements {
            rewritten.extend(&chars[cursor..span.start]);
            out_len += span.start - cursor;
            let rep_len = char_len(&replacement);
            rewritten.push_str(&replacement);
            edits.push(Edit {
                orig: span,
                new: Span::new(out_len, out_len + rep_len),
                rule,
            });
            out_len += rep_len;
            cursor = span.end;
        }
        rewritten.extend(&chars[cursor..]);
        RewriteTrace {
            original: text.to_string(),
            rewritten,
            edits,
        }
    }

    /// Rebuilds the rewritten text from the original plus each edit's
    /// replacement and checks the edit list is sorted and disjoint.
    pub fn validate(&self) -> Result<()> {
        let orig: Vec<char> = self.original.chars().collect();
        let new: Vec<char> = self.rewritten.chars().collect();
        let mut rebuilt: Vec<char> = Vec::with_capacity(new.len());
        let mut cursor = 0;
        for e in &self.edits {
            if e.orig.start < cursor || e.orig.end > orig.len() || e.new.end > new.len() {
                return Err(Error::Validation("edits unsorted or out of bounds".into()));
            }
            rebuilt.extend(&orig[cursor..e.orig.start]);
            if rebuilt.len() != e.new.start {
                return Err(Error::Validation("edit offsets inconsistent".into()));
            }
            rebuilt.extend(&new[e.new.start..e.new.end]);
            cursor = e.orig.end;
        }
        rebuilt.extend(&orig[cursor..]);
        if rebuilt != new {
            return Err(Error::Validation(
                "edits do not reproduce the rewritten text".into(),
            ));
        }
        Ok(())
    }

    /// Rewritten-text position of a span start, original coordinates in.
    pub fn forward_start(&self, p: usize) -> usize {
        map_start(&self.edits, p, |e| e.orig, |e| e.new)
    }

    pub fn forward_end(&self, p: usize) -> usize {
        map_end(&self.edits, p, |e| e.orig, |e| e.new)
    }

    /// Original-text position of a span start, rewritten coordinates in.
    pub fn backward_start(&self, p: usize) -> usize {
        map_start(&self.edits, p, |e| e.new, |e| e.orig)
    }

    pub fn backward_end(&self, p: usize) -> usize {
        map_end(&self.edits, p, |e| e.new, |e| e.orig)
    }

    /// Trace from `self.original` to `next.rewritten`. `next` must rewrite
    /// `self.rewritten`. Edits that touch the same intermediate chars fuse.
    pub fn then(&self, next: &RewriteTrace) -> RewriteTrace {
        debug_assert_eq!(self.rewritten, next.original);
        let mut intervals: Vec<(Span, &str)> = self
            .edits
            .iter()
            .map(|e| (e.new, e.rule.as_str()))
            .chain(next.edits.iter().map(|e| (e.orig, e.rule.as_str())))
            .collect();
        intervals.sort_by_key(|(s, _)| (s.start, s.end));

        let mut clusters: Vec<(Span, Vec<&str>)> = Vec::new();
        for (span, rule) in intervals {
            match clusters.last_mut() {
                Some((cur, rules)) if span.start < cur.end => {
                    cur.end = cur.end.max(span.end);
                    if !rules.contains(&rule) {
                        rules.push(rule);
                    }
                }
                _ => clusters.push((span, vec![rule])),
            }
        }
        let edits = clusters
            .into_iter()
            .map(|(span, rules)| Edit {
                orig: Span::new(self.backward_start(span.start), self.backward_end(span.end)),
                new: Span::new(next.forward_start(span.start), next.forward_end(span.end)),
                rule: rules.join("+"),
            })
            .collect();
        RewriteTrace {
            original: self.original.clone(),
            rewritten: next.rewritten.clone(),
            edits,
        }
    }
}

fn map_start(
    edits: &[Edit],
    p: usize,
    from: impl Fn(&Edit) -> Span,
    to: impl Fn(&Edit) -> Span,
) -> usize {
    let mut shift_from = 0;
    let mut shift_to = 0;
    for e in edits {
        let (f, t) = (from(e), to(e));
        if f.start <= p && p < f.end {
            return t.start;
        }
        if f.end <= p {
            shift_from = f.end;
            shift_to = t.end;
        } else {
            break;
        }
    }
    p - shift_from + shift_to
}

fn map_end(
    edits: &[Edit],
    p: usize,
    from: impl Fn(&Edit) -> Span,
    to: impl Fn(&Edit) -> Span,
) -> usize {
    let mut shift_from = 0;
    let mut shift_to = 0;
    for e in edits {
        let (f, t) = (from(e), to(e));
        if f.start < p && p <= f.end {
            return t.end;
        }
        if f.end < p || (f.end == p && f.start == p) {
            shift_from = f.end;
            shift_to = t.end;
        } else {
            break;
        }
    }
    p - shift_from + shift_to
}

/// Replaces each token-bounded lexicon key with its expansion in one pass.
pub fn expand_abbreviations(text: &str, lex: &AbbreviationLexicon) -> RewriteTrace {
    let replacements = lex
        .find_matches(text)
        .into_iter()
        .map(|(span, key)| {
            let rule = format!("abbrev:{key}");
            (span, lex.entries[&key].clone(), rule)
        })
        .collect();
    RewriteTrace::from_replacements(text, replacements)
}

fn percentile_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(<=|>=|≤|≥|<|>|=)[ \t]*(\d+(?:\.\d+)?)[ \t]*%[ \t]+(?i:for)[ \t]+(?i:age)\b")
            .expect("static regex")
    })
}

fn relation(cmp: &str) -> &'static str {
    match cmp {
        "<" => "below",
        ">" => "above",
        "≤" | "<=" => "at or below",
        "≥" | ">=" => "at or above",
        _ => "at",
    }
}

/// English ordinal: 1st, 2nd, 3rd, 4th, 11th, 12th, 13th, 21st, ...
pub fn ordinal(number: &str) -> String {
    let suffix = match number.parse::<u64>() {
        Ok(n) if (11..=13).contains(&(n % 100)) => "th",
        Ok(n) if n % 10 == 1 => "st",
        Ok(n) if n % 10 == 2 => "nd",
        Ok(n) if n % 10 == 3 => "rd",
        _ => "th",
    };
    format!("{number}{suffix}")
}

/// Rewrites `<measurement> <cmp> <n>% for age` into
/// `<measurement> is <relation> the <nth> percentile for age`.
pub fn expand_statistical_expressions(text: &str) -> RewriteTrace {
    let bounds = crate::types::char_boundaries(text);
    let to_char = |byte: usize| bounds.partition_point(|&b| b < byte);
    let mut replacements = Vec::new();
    for caps in percentile_regex().captures_iter(text) {
        let whole = caps.get(0).expect("match");
        let before = &text[..whole.start()];
        let trimmed = before.trim_end_matches([' ', '\t']);
        // A measurement word must precede the comparison.
        if !trimmed.chars().last().is_some_and(char::is_alphanumeric) {
            continue;
        }
        let lead = if trimmed.len() == before.len() {
            " "
        } else {
            ""
        };
        let replacement = format!(
            "{lead}is {} the {} percentile for age",
            relation(&caps[1]),
            ordinal(&caps[2])
        );
        let span = Span::new(to_char(whole.start()), to_char(whole.end()));
        replacements.push((span, replacement, "percentile".to_string()));
    }
    RewriteTrace::from_replacements(text, replacements)
}

/// Optional abbreviation expansion followed by optional percentile expansion.
pub fn rewrite(
    text: &str,
    lexicon: Option<&AbbreviationLexicon>,
    statistical: bool,
) -> RewriteTrace {
    let first = match lexicon {
        Some(lex) => expand_abbreviations(text, lex),
        None => RewriteTrace::identity(text),
    };
    if statistical {
        let second = expand_statistical_expressions(&first.rewritten);
        first.then(&second)
    } else {
        first
    }
}

/// Tokens are maximal alphanumeric runs or single punctuation chars.
/// `offset` is added to every position.
pub(crate) fn tokenize(text: &str, offset: usize) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut run: Option<(usize, String)> = None;
    for (i, c) in text.chars().enumerate() {
        if c.is_alphanumeric() {
            match run.as_mut() {
                Some((_, s)) => s.push(c),
                None => run = Some((i, c.to_string())),
            }
            continue;
        }
        if let Some((start, surface)) = run.take() {
            let end = start + surface.chars().count();
            tokens.push(Token {
                start: offset + start,
                end: offset + end,
                surface,
            });
        }
        if !c.is_whitespace() {
            tokens.push(Token {
                start: offset + i,
                end: offset + i + 1,
                surface: c.to_string(),
            });
        }
    }
    if let Some((start, surface)) = run {
        let end = start + surface.chars().count();
        tokens.push(Token {
            start: offset + start,
            end: offset + end,
            surface,
        });
    }
    tokens
}

/// A tokenized consultation (over the rewritten text) and the trace back to the original.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedText {
    pub consultation: Consultation,
    pub trace: RewriteTrace,
}

impl PreparedText {
    pub fn to_original(&self, m: &Mention) -> Mention {
        project_to_original(m, &self.trace)
    }
}

/// Splits after `.`, `!` or `?` followed by whitespace (or end of text) and at newlines.
pub fn sentence_split_and_tokenize(id: &str, trace: RewriteTrace) -> Result<PreparedText> {
    let text = &trace.rewritten;
    if text.trim().is_empty() {
        return Err(Error::Validation(format!(
            "consultation {id:?} has no text"
        )));
    }
    let chars: Vec<char> = text.chars().collect();
    let mut sentences = Vec::new();
    let mut start = 0;
    let mut push = |from: usize, to: usize| {
        let piece: String = chars[from..to].iter().collect();
        let tokens = tokenize(&piece, from);
        if let Some(first) = tokens.first() {
            sentences.push(Sentence {
                start: first.start,
                tokens,
            });
        }
    };
    for i in 0..chars.len() {
        let c = chars[i];
        let terminal =
            matches!(c, '.' | '!' | '?') && chars.get(i + 1).is_none_or(|n| n.is_whitespace());
        if c == '\n' || terminal {
            push(start, i + 1);
            start = i + 1;
        }
    }
    if start < chars.len() {
        push(start, chars.len());
    }
    let consultation = Consultation {
        id: id.to_string(),
        text: text.clone(),
        sentences,
    };
    Ok(PreparedText {
        consultation,
        trace,
    })
}

fn merge_fragments(mut spans: Vec<Span>) -> Vec<Span> {
    spans.sort();
    let mut out: Vec<Span> = Vec::with_capacity(spans.len());
    for s in spans {
        match out.last_mut() {
            Some(last) if s.start < last.end => last.end = last.end.max(s.end),
            _ => out.push(s),
        }
    }
    out
}

/// Maps a mention on the rewritten text back to original offsets. Fragments
/// touching an edited region widen to the edit's full original span;
/// fragments that end up intersecting are merged.
pub fn project_to_original(m: &Mention, trace: &RewriteTrace) -> Mention {
    if trace.is_identity() {
        return m.clone();
    }
    let spans = m
        .fragments()
        .iter()
        .map(|f| Span::new(trace.backward_start(f.start), trace.backward_end(f.end)))
        .collect();
    Mention::new(merge_fragments(spans), m.category, m.hpo_id.clone())
        .expect("projection of a valid mention stays valid")
}

/// Inverse direction of [`project_to_original`], used to move gold spans
/// onto the rewritten text.
pub fn project_to_rewritten(m: &Mention, trace: &RewriteTrace) -> Mention {
    if trace.is_identity() {
        return m.clone();
    }
    let spans = m
        .fragments()
        .iter()
        .map(|f| Span::new(trace.forward_start(f.start), trace.forward_end(f.end)))
        .collect();
    Mention::new(merge_fragments(spans), m.category, m.hpo_id.clone())
        .expect("projection of a valid mention stays valid")
}
