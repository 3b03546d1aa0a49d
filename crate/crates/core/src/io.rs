//! Corpus and annotation file formats.
//!
//! * corpus JSONL: `{"id", "text", "mentions": [{"fragments": [[s, e]], "category", "hpo_id"}]}`
//! * annotation TSV: `consultation_id, fragments, mention_text, category, hpo_id`
//! * official observation TSV with `ObservationID`, `Text`, `HPO Term`, `Spans` columns

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AnnotationSet, Category, HpoId, Mention};

pub const ANNOTATION_HEADER: &str = "consultation_id\tfragments\tmention_text\tcategory\thpo_id";

/// A consultation text with its gold annotations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub mentions: Vec<Mention>,
}

impl Document {
    pub fn gold(&self) -> AnnotationSet {
        let mut s = AnnotationSet::new(self.id.clone());
        s.mentions = self.mentions.clone();
        s.sort();
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.gold().validate(&self.text)
    }
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_text(path: &Path, body: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn check_unique_ids(docs: &[Document]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for d in docs {
        if !seen.insert(d.id.as_str()) {
            return Err(Error::Validation(format!(
                "duplicate consultation id {:?}",
                d.id
            )));
        }
    }
    Ok(())
}

pub fn parse_corpus(source: &str) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (i, line) in source.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document =
            serde_json::from_str(line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        doc.validate()
            .map_err(|e| Error::parse(i + 1, e.to_string()))?;
        docs.push(doc);
    }
    check_unique_ids(&docs)?;
    Ok(docs)
}

pub fn read_corpus(path: &Path) -> Result<Vec<Document>> {
    parse_corpus(&read_text(path)?).map_err(|e| with_path(e, path))
}

pub fn corpus_to_jsonl(docs: &[Document]) -> Result<String> {
    let mut out = String::new();
    for d in docs {
        out.push_str(&serde_json::to_string(d)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, docs: &[Document]) -> Result<()> {
    write_text(path, &corpus_to_jsonl(docs)?)
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    }
}

fn clean_cell(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_whitespace() { ' ' } else { c })
        .collect()
}

/// Renders prediction or gold sets as annotation TSV (with header), sorted by
/// consultation id and mention order. `texts` supplies mention text.
pub fn annotations_to_tsv(
    sets: &[AnnotationSet],
    texts: &BTreeMap<String, String>,
) -> Result<String> {
    annotations_to_tsv_with(sets, |id, m| match texts.get(id) {
        Some(t) => m.text(t).map(Some),
        None => Ok(None),
    })
}

/// Like [`annotations_to_tsv`], with mention text supplied per mention.
pub fn annotations_to_tsv_with<F>(sets: &[AnnotationSet], text_of: F) -> Result<String>
where
    F: Fn(&str, &Mention) -> Result<Option<String>>,
{
    let mut sorted: Vec<AnnotationSet> = sets.to_vec();
    sorted.sort_by(|a, b| a.consultation_id.cmp(&b.consultation_id));
    let mut out = String::from(ANNOTATION_HEADER);
    out.push('\n');
    for set in &mut sorted {
        set.sort();
        for m in &set.mentions {
            let text = text_of(&set.consultation_id, m)?
                .map(|t| clean_cell(&t))
                .unwrap_or_default();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                set.consultation_id,
                m.fragments_string(),
                text,
                m.category.as_str(),
                m.hpo_id.as_ref().map_or("", HpoId::as_str)
            ));
        }
    }
    Ok(out)
}

pub fn write_annotations(
    path: &Path,
    sets: &[AnnotationSet],
    texts: &BTreeMap<String, String>,
) -> Result<()> {
    write_text(path, &annotations_to_tsv(sets, texts)?)
}

pub fn parse_annotations(source: &str) -> Result<Vec<AnnotationSet>> {
    let mut by_id: BTreeMap<String, AnnotationSet> = BTreeMap::new();
    for (i, line) in source.lines().enumerate() {
        let n = i + 1;
        if line.is_empty() || (n == 1 && line == ANNOTATION_HEADER) {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(Error::parse(
                n,
                format!("expected 5 tab-separated columns, found {}", cols.len()),
            ));
        }
        if cols[0].is_empty() {
            return Err(Error::parse(n, "empty consultation id"));
        }
        let fragments =
            Mention::parse_fragments(cols[1]).map_err(|e| Error::parse(n, e.to_string()))?;
        let category: Category = cols[3]
            .parse()
            .map_err(|e: Error| Error::parse(n, e.to_string()))?;
        let hpo_id = match cols[4] {
            "" => None,
            raw => Some(HpoId::new(raw).map_err(|e| Error::parse(n, e.to_string()))?),
        };
        let m = Mention::new(fragments, category, hpo_id)
            .map_err(|e| Error::parse(n, e.to_string()))?;
        let set = by_id
            .entry(cols[0].to_string())
            .or_insert_with(|| AnnotationSet::new(cols[0]));
        if !set.push_unique(m) {
            return Err(Error::parse(
                n,
                format!("duplicate mention {} for {}", cols[1], cols[0]),
            ));
        }
    }
    Ok(by_id
        .into_values()
        .map(|mut s| {
            s.sort();
            s
        })
        .collect())
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationSet>> {
    parse_annotations(&read_text(path)?).map_err(|e| with_path(e, path))
}

/// Mention text column of an annotation TSV, keyed by (consultation id, fragments).
pub type MentionTexts = BTreeMap<(String, String), String>;

pub fn read_annotations_with_text(path: &Path) -> Result<(Vec<AnnotationSet>, MentionTexts)> {
    let source = read_text(path)?;
    let sets = parse_annotations(&source).map_err(|e| with_path(e, path))?;
    let mut texts = MentionTexts::new();
    for line in source
        .lines()
        .filter(|l| !l.is_empty() && *l != ANNOTATION_HEADER)
    {
        let cols: Vec<&str> = line.split('\t').collect();
        texts.insert(
            (cols[0].to_string(), cols[1].to_string()),
            cols[2].to_string(),
        );
    }
    Ok((sets, texts))
}

fn parse_official_spans(raw: &str, line: usize) -> Result<Vec<crate::types::Span>> {
    let joined: Vec<&str> = raw
        .split([',', ';'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    Mention::parse_fragments(&joined.join(";")).map_err(|e| Error::parse(line, e.to_string()))
}

/// Official observation table: one row per (observation, HPO term). Rows
/// sharing an `ObservationID` form one document; `NA` marks an observation
/// without findings. Every annotated finding is a key finding.
pub fn parse_official(source: &str) -> Result<Vec<Document>> {
    let mut lines = source.lines().enumerate();
    let header = lines.next().map(|(_, h)| h).unwrap_or_default();
    let names: Vec<String> = header
        .split('\t')
        .map(|h| h.trim().to_ascii_lowercase())
        .collect();
    let col = |want: &str| {
        names
            .iter()
            .position(|n| n == want)
            .ok_or_else(|| Error::parse(1, format!("missing column {want:?}")))
    };
    let (c_id, c_text, c_term, c_spans) = (
        col("observationid")?,
        col("text")?,
        col("hpo term")?,
        col("spans")?,
    );
    let width = names.len();
    let mut docs: BTreeMap<String, Document> = BTreeMap::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != width {
            return Err(Error::parse(
                n,
                format!("expected {width} columns, found {}", cells.len()),
            ));
        }
        let id = cells[c_id].trim();
        let text = cells[c_text];
        let doc = docs.entry(id.to_string()).or_insert_with(|| Document {
            id: id.to_string(),
            text: text.to_string(),
            mentions: Vec::new(),
        });
        if doc.text != text {
            return Err(Error::parse(
                n,
                format!("observation {id} has conflicting texts"),
            ));
        }
        let term = cells[c_term].trim();
        if term.eq_ignore_ascii_case("NA") || term.is_empty() {
            continue;
        }
        let hpo = HpoId::new(term).map_err(|e| Error::parse(n, e.to_string()))?;
        let frags = parse_official_spans(cells[c_spans], n)?;
        let m = Mention::new(frags, Category::KeyFinding, Some(hpo))
            .map_err(|e| Error::parse(n, e.to_string()))?;
        if !doc.mentions.contains(&m) {
            doc.mentions.push(m);
        }
    }
    let docs: Vec<Document> = docs.into_values().collect();
    for d in &docs {
        d.validate()?;
    }
    Ok(docs)
}

pub fn read_official(path: &Path) -> Result<Vec<Document>> {
    parse_official(&read_text(path)?).map_err(|e| with_path(e, path))
}

/// Reads a corpus by extension: `.jsonl`/`.json` as corpus JSONL, anything
/// else as the official observation table.
pub fn load_documents(path: &Path) -> Result<Vec<Document>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("json") => read_corpus(path),
        _ => read_official(path),
    }
}
