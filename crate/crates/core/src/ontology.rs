//! HPO ontology loading and dictionary flattening.
//!
//! Two input formats are accepted: the OBO 1.2 flat file and obographs JSON.
//! [`observable_subset`] keeps the descendants of the phenotypic-abnormality
//! root, and [`flatten`] turns the kept terms into a `surface -> id` lexicon.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::HpoId;

/// "Phenotypic abnormality".
pub const PHENOTYPIC_ABNORMALITY: &str = "HP:0000118";
/// HPO release the dictionary is pinned to unless configured otherwise.
pub const DEFAULT_VERSION_TAG: &str = "v2022-06-11";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HpoTerm {
    pub id: HpoId,
    pub name: String,
    pub synonyms: Vec<String>,
    pub parents: Vec<HpoId>,
    pub obsolete: bool,
    pub replaced_by: Option<HpoId>,
}

pub type TermMap = BTreeMap<HpoId, HpoTerm>;

/// Loads an ontology, choosing the parser from the file extension
/// (`.json` for obographs, anything else for OBO).
pub fn load_ontology(path: &Path) -> Result<TermMap> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("json") => parse_obographs(&raw),
        _ => parse_obo(&raw),
    }
}

#[derive(Default)]
struct StanzaBuilder {
    line: usize,
    id: Option<HpoId>,
    name: Option<String>,
    synonyms: Vec<String>,
    parents: Vec<HpoId>,
    obsolete: bool,
    replaced_by: Option<HpoId>,
}

impl StanzaBuilder {
    fn finish(self) -> Result<HpoTerm> {
        let id = self
            .id
            .ok_or_else(|| Error::parse(self.line, "[Term] stanza without id"))?;
        let name = self
            .name
            .filter(|n| !n.is_empty())
            .ok_or_else(|| Error::parse(self.line, format!("{id} has no name")))?;
        Ok(HpoTerm {
            id,
            name,
            synonyms: self.synonyms,
            parents: self.parents,
            obsolete: self.obsolete,
            replaced_by: self.replaced_by,
        })
    }
}

fn parse_hp(value: &str, line: usize) -> Result<HpoId> {
    let token = value.split_whitespace().next().unwrap_or("");
    HpoId::new(token)
        .map_err(|_| Error::parse(line, format!("expected an HPO id, found {value:?}")))
}

/// Reads the leading quoted string of an OBO synonym value, honouring `\"` escapes.
fn parse_quoted(value: &str, line: usize) -> Result<String> {
    let rest = value
        .strip_prefix('"')
        .ok_or_else(|| Error::parse(line, "synonym text must be quoted"))?;
    let mut out = String::new();
    let mut chars = rest.chars();
    while let Some(c) = chars.next() {
        match c {
            '\\' => match chars.next() {
                Some('n') => out.push('\n'),
                Some('t') => out.push('\t'),
                Some(other) => out.push(other),
                None => break,
            },
            '"' => return Ok(out),
            c => out.push(c),
        }
    }
    Err(Error::parse(line, "unterminated synonym string"))
}

/// Parses an OBO 1.2 file. Only `[Term]` stanzas are kept.
pub fn parse_obo(source: &str) -> Result<TermMap> {
    let mut terms = TermMap::new();
    let mut current: Option<StanzaBuilder> = None;
    let flush = |builder: Option<StanzaBuilder>, terms: &mut TermMap| -> Result<()> {
        if let Some(b) = builder {
            let line = b.line;
            let term = b.finish()?;
            if terms.contains_key(&term.id) {
                return Err(Error::parse(line, format!("duplicate term {}", term.id)));
            }
            terms.insert(term.id.clone(), term);
        }
        Ok(())
    };

    for (idx, raw) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('!') {
            continue;
        }
        if line.starts_with('[') {
            if !line.ends_with(']') {
                return Err(Error::parse(
                    line_no,
                    format!("malformed stanza header {line:?}"),
                ));
            }
            flush(current.take(), &mut terms)?;
            if line == "[Term]" {
                current = Some(StanzaBuilder {
                    line: line_no,
                    ..Default::default()
                });
            }
            continue;
        }
        let (tag, value) = line.split_once(':').ok_or_else(|| {
            Error::parse(line_no, format!("expected `tag: value`, found {line:?}"))
        })?;
        let value = value.trim();
        // header lines and non-Term stanzas
        let Some(builder) = current.as_mut() else {
            continue;
        };
        match tag.trim() {
            "id" => builder.id = Some(parse_hp(value, line_no)?),
            "name" => builder.name = Some(value.to_string()),
            "synonym" => builder.synonyms.push(parse_quoted(value, line_no)?),
            "is_a" => builder.parents.push(parse_hp(value, line_no)?),
            "is_obsolete" => builder.obsolete = value == "true",
            "replaced_by" => builder.replaced_by = Some(parse_hp(value, line_no)?),
            _ => {}
        }
    }
    flush(current.take(), &mut terms)?;
    validate_parents(&terms)?;
    Ok(terms)
}

#[derive(Deserialize)]
struct ObographsDoc {
    #[serde(default)]
    graphs: Vec<ObographsGraph>,
}

#[derive(Deserialize)]
struct ObographsGraph {
    #[serde(default)]
    nodes: Vec<ObographsNode>,
    #[serde(default)]
    edges: Vec<ObographsEdge>,
}

#[derive(Deserialize)]
struct ObographsNode {
    id: String,
    lbl: Option<String>,
    #[serde(default)]
    meta: ObographsMeta,
}

#[derive(Deserialize, Default)]
struct ObographsMeta {
    #[serde(default)]
    synonyms: Vec<ObographsValue>,
    #[serde(default)]
    deprecated: bool,
    #[serde(default, rename = "basicPropertyValues")]
    basic_property_values: Vec<ObographsValue>,
}

#[derive(Deserialize)]
struct ObographsValue {
    #[serde(default)]
    pred: String,
    val: String,
}

#[derive(Deserialize)]
struct ObographsEdge {
    sub: String,
    pred: String,
    obj: String,
}

const REPLACED_BY_IRI: &str = "http://purl.obolibrary.org/obo/IAO_0100001";

/// `http://purl.obolibrary.org/obo/HP_0000118`, `HP_0000118` or `HP:0000118` to an id.
fn hp_from_iri(iri: &str) -> Option<HpoId> {
    let local = iri.rsplit('/').next().unwrap_or(iri);
    let curie = local.replacen('_', ":", 1);
    HpoId::new(curie).ok()
}

/// Parses an obographs JSON document. Non-HP nodes and edges are skipped.
pub fn parse_obographs(source: &str) -> Result<TermMap> {
    if source.trim().is_empty() {
        return Ok(TermMap::new());
    }
    let doc: ObographsDoc =
        serde_json::from_str(source).map_err(|e| Error::parse(e.line(), e.to_string()))?;
    let mut terms = TermMap::new();
    for graph in &doc.graphs {
        for node in &graph.nodes {
            let Some(id) = hp_from_iri(&node.id) else {
                continue;
            };
            let name = node
                .lbl
                .clone()
                .filter(|l| !l.trim().is_empty())
                .ok_or_else(|| Error::Validation(format!("{id} has no label")))?;
            let replaced_by = node
                .meta
                .basic_property_values
                .iter()
                .find(|v| v.pred == REPLACED_BY_IRI || v.pred.ends_with("replaced_by"))
                .and_then(|v| hp_from_iri(&v.val));
            let term = HpoTerm {
                id: id.clone(),
                name: name.trim().to_string(),
                synonyms: node.meta.synonyms.iter().map(|s| s.val.clone()).collect(),
                parents: Vec::new(),
                obsolete: node.meta.deprecated,
                replaced_by,
            };
            if terms.insert(id.clone(), term).is_some() {
                return Err(Error::Validation(format!("duplicate node {id}")));
            }
        }
        for edge in &graph.edges {
            if edge.pred != "is_a" && !edge.pred.ends_with("subClassOf") {
                continue;
            }
            let (Some(sub), Some(obj)) = (hp_from_iri(&edge.sub), hp_from_iri(&edge.obj)) else {
                continue;
            };
            if let Some(term) = terms.get_mut(&sub) {
                if !term.parents.contains(&obj) {
                    term.parents.push(obj);
                }
            }
        }
    }
    validate_parents(&terms)?;
    Ok(terms)
}

fn validate_parents(terms: &TermMap) -> Result<()> {
    let dangling: BTreeSet<&HpoId> = terms
        .values()
        .flat_map(|t| t.parents.iter())
        .filter(|p| !terms.contains_key(*p))
        .collect();
    if dangling.is_empty() {
        Ok(())
    } else {
        let ids: Vec<&str> = dangling.iter().map(|id| id.as_str()).collect();
        Err(Error::Validation(format!(
            "dangling parent references: {}",
            ids.join(", ")
        )))
    }
}

fn escape_obo(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out
}

/// Canonical OBO rendering; [`parse_obo`] reads it back to an identical map.
pub fn to_obo(terms: &TermMap) -> String {
    let mut out = String::from("format-version: 1.2\n");
    for term in terms.values() {
        out.push_str("\n[Term]\n");
        let _ = writeln!(out, "id: {}", term.id);
        let _ = writeln!(out, "name: {}", term.name);
        for syn in &term.synonyms {
            let _ = writeln!(out, "synonym: \"{}\" EXACT []", escape_obo(syn));
        }
        for parent in &term.parents {
            let _ = writeln!(out, "is_a: {parent}");
        }
        if term.obsolete {
            out.push_str("is_obsolete: true\n");
        }
        if let Some(r) = &term.replaced_by {
            let _ = writeln!(out, "replaced_by: {r}");
        }
    }
    out
}

/// Non-obsolete strict descendants of `root` over the transitive `is_a` closure.
pub fn observable_subset(terms: &TermMap, root: &HpoId) -> Result<BTreeSet<HpoId>> {
    if !terms.contains_key(root) {
        return Err(Error::Config(format!(
            "observable root {root} is not in the ontology"
        )));
    }
    let mut children: BTreeMap<&HpoId, Vec<&HpoId>> = BTreeMap::new();
    for term in terms.values() {
        for parent in &term.parents {
            children.entry(parent).or_default().push(&term.id);
        }
    }
    let mut seen: BTreeSet<&HpoId> = BTreeSet::new();
    let mut queue = VecDeque::from([root]);
    while let Some(id) = queue.pop_front() {
        for &child in children.get(id).into_iter().flatten() {
            if seen.insert(child) {
                queue.push_back(child);
            }
        }
    }
    Ok(seen
        .into_iter()
        .filter(|id| *id != root && !terms[*id].obsolete)
        .cloned()
        .collect())
}

/// Map from each obsolete id to its (transitively followed) live replacement.
pub fn obsolete_remap(terms: &TermMap) -> BTreeMap<HpoId, HpoId> {
    let mut out = BTreeMap::new();
    for term in terms.values().filter(|t| t.obsolete) {
        let mut target = term.replaced_by.clone();
        let mut hops = 0;
        while let Some(t) = &target {
            match terms.get(t) {
                Some(next) if next.obsolete && next.replaced_by.is_some() && hops < terms.len() => {
                    target = next.replaced_by.clone();
                    hops += 1;
                }
                _ => break,
            }
        }
        if let Some(t) = target {
            out.insert(term.id.clone(), t);
        }
    }
    out
}

pub fn remap_to_tsv(remap: &BTreeMap<HpoId, HpoId>) -> String {
    remap
        .iter()
        .map(|(from, to)| format!("{from}\t{to}\n"))
        .collect()
}

pub fn remap_from_tsv(source: &str) -> Result<BTreeMap<HpoId, HpoId>> {
    let mut out = BTreeMap::new();
    for (idx, line) in source.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (from, to) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(idx + 1, "expected obsolete_id<TAB>replacement_id"))?;
        let from = HpoId::new(from).map_err(|e| Error::parse(idx + 1, e.to_string()))?;
        let to = HpoId::new(to).map_err(|e| Error::parse(idx + 1, e.to_string()))?;
        out.insert(from, to);
    }
    Ok(out)
}

/// Lowercase, trim, and collapse internal whitespace runs to one space.
pub fn normalize_surface(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DictEntry {
    pub surface: String,
    pub hpo_id: HpoId,
}

/// Flattened `surface -> HPO id` lexicon, kept sorted by `(surface, hpo_id)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlatDictionary {
    entries: Vec<DictEntry>,
    pub version_tag: String,
}

impl FlatDictionary {
    /// Normalizes surfaces, drops empty ones, sorts and dedupes.
    pub fn new(
        entries: impl IntoIterator<Item = DictEntry>,
        version_tag: impl Into<String>,
    ) -> Self {
        let mut entries: Vec<DictEntry> = entries
            .into_iter()
            .map(|e| DictEntry {
                surface: normalize_surface(&e.surface),
                hpo_id: e.hpo_id,
            })
            .filter(|e| !e.surface.is_empty())
            .collect();
        entries.sort();
        entries.dedup();
        FlatDictionary {
            entries,
            version_tag: version_tag.into(),
        }
    }

    pub fn entries(&self) -> &[DictEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> BTreeSet<&HpoId> {
        self.entries.iter().map(|e| &e.hpo_id).collect()
    }

    pub fn contains_id(&self, id: &HpoId) -> bool {
        self.entries.iter().any(|e| &e.hpo_id == id)
    }

    /// `surface<TAB>hpo_id` lines, LF terminated, sorted.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&e.surface);
            out.push('\t');
            out.push_str(e.hpo_id.as_str());
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(source: &str, version_tag: impl Into<String>) -> Result<Self> {
        let mut entries = Vec::new();
        for (idx, line) in source.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (surface, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(idx + 1, "expected surface<TAB>hpo_id"))?;
            let hpo_id = HpoId::new(id).map_err(|e| Error::parse(idx + 1, e.to_string()))?;
            entries.push(DictEntry {
                surface: surface.to_string(),
                hpo_id,
            });
        }
        Ok(FlatDictionary::new(entries, version_tag))
    }

    /// SHA-256 of the TSV rendering, hex encoded.
    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(self.to_tsv().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Emits the normalized name and every synonym of each kept term.
pub fn flatten(terms: &TermMap, keep: &BTreeSet<HpoId>, version_tag: &str) -> FlatDictionary {
    let entries = keep.iter().filter_map(|id| terms.get(id)).flat_map(|term| {
        std::iter::once(&term.name)
            .chain(term.synonyms.iter())
            .map(|s| DictEntry {
                surface: s.clone(),
                hpo_id: term.id.clone(),
            })
    });
    FlatDictionary::new(entries, version_tag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn id(s: &str) -> HpoId {
        HpoId::new(s).unwrap()
    }

    fn term(i: &str, name: &str, syns: &[&str], parents: &[&str]) -> HpoTerm {
        HpoTerm {
            id: id(i),
            name: name.into(),
            synonyms: syns.iter().map(|s| s.to_string()).collect(),
            parents: parents.iter().map(|p| id(p)).collect(),
            obsolete: false,
            replaced_by: None,
        }
    }

    fn map(terms: Vec<HpoTerm>) -> TermMap {
        terms.into_iter().map(|t| (t.id.clone(), t)).collect()
    }

    const SAMPLE: &str = r#"format-version: 1.2
data-version: hp/releases/2022-06-11

[Term]
id: HP:0000001
name: All

[Term]
id: HP:0000118
name: Phenotypic abnormality
is_a: HP:0000001 ! All

[Term]
id: HP:0000256
name: Macrocephaly
synonym: "Large head" EXACT []
synonym: "Increased size of skull" RELATED []
synonym: "Big \"head\"" BROAD [HPO:skoehler]
is_a: HP:0000118 ! Phenotypic abnormality

[Typedef]
id: part_of
name: part of
"#;

    #[test]
    fn parses_obo_sample() {
        let terms = parse_obo(SAMPLE).unwrap();
        assert_eq!(terms.len(), 3);
        let root = &terms[&id("HP:0000118")];
        assert_eq!(root.name, "Phenotypic abnormality");
        assert!(root.synonyms.is_empty());
        let macro_ = &terms[&id("HP:0000256")];
        assert_eq!(macro_.synonyms.len(), 3);
        assert_eq!(macro_.synonyms[2], "Big \"head\"");
        assert_eq!(macro_.parents, vec![id("HP:0000118")]);
    }

    #[test]
    fn empty_file_is_empty_map() {
        assert!(parse_obo("").unwrap().is_empty());
        assert!(parse_obographs("").unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let src = "[Term]\nid: HP:0000001\nname: All\nthis line has no colon\n";
        match parse_obo(src).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
        let unquoted = "[Term]\nid: HP:0000001\nname: All\nsynonym: bare EXACT []\n";
        assert!(matches!(
            parse_obo(unquoted),
            Err(Error::Parse { line: 4, .. })
        ));
    }

    #[test]
    fn dangling_parent_lists_ids() {
        let src = "[Term]\nid: HP:0000002\nname: X\nis_a: HP:0000999\nis_a: HP:0000998\n";
        match parse_obo(src).unwrap_err() {
            Error::Validation(msg) => {
                assert!(
                    msg.contains("HP:0000998") && msg.contains("HP:0000999"),
                    "{msg}"
                )
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parses_obographs() {
        let src = r#"{"graphs":[{"nodes":[
            {"id":"http://purl.obolibrary.org/obo/HP_0000118","lbl":"Phenotypic abnormality","type":"CLASS"},
            {"id":"http://purl.obolibrary.org/obo/HP_0000256","lbl":"Macrocephaly","type":"CLASS",
             "meta":{"synonyms":[{"pred":"hasExactSynonym","val":"Large head"},{"pred":"hasRelatedSynonym","val":"Big skull"}]}},
            {"id":"http://purl.obolibrary.org/obo/HP_0000002","lbl":"obsolete thing","type":"CLASS",
             "meta":{"deprecated":true,"basicPropertyValues":[{"pred":"http://purl.obolibrary.org/obo/IAO_0100001","val":"http://purl.obolibrary.org/obo/HP_0000256"}]}},
            {"id":"http://purl.obolibrary.org/obo/UBERON_0000033","lbl":"head"}
          ],
          "edges":[{"sub":"http://purl.obolibrary.org/obo/HP_0000256","pred":"is_a","obj":"http://purl.obolibrary.org/obo/HP_0000118"}]}]}"#;
        let terms = parse_obographs(src).unwrap();
        assert_eq!(terms.len(), 3);
        assert_eq!(terms[&id("HP:0000256")].synonyms.len(), 2);
        assert_eq!(terms[&id("HP:0000256")].parents, vec![id("HP:0000118")]);
        assert!(terms[&id("HP:0000002")].obsolete);
        assert_eq!(terms[&id("HP:0000002")].replaced_by, Some(id("HP:0000256")));
    }

    fn toy() -> TermMap {
        let mut obsolete = term("HP:0000005", "obsolete B", &[], &["HP:0000003"]);
        obsolete.obsolete = true;
        obsolete.replaced_by = Some(id("HP:0000004"));
        map(vec![
            term("HP:0000001", "All", &[], &[]),
            term("HP:0000118", "Phenotypic abnormality", &[], &["HP:0000001"]),
            term("HP:0000003", "A", &[], &["HP:0000118"]),
            term("HP:0000004", "B", &[], &["HP:0000003"]),
            term("HP:0000006", "Mode of inheritance", &[], &["HP:0000001"]),
            term("HP:0000007", "Autosomal recessive", &[], &["HP:0000006"]),
            obsolete,
        ])
    }

    #[test]
    fn observable_subset_is_strict_live_subtree() {
        let keep = observable_subset(&toy(), &id("HP:0000118")).unwrap();
        let want: BTreeSet<HpoId> = [id("HP:0000003"), id("HP:0000004")].into();
        assert_eq!(keep, want);
    }

    #[test]
    fn missing_root_is_config_error() {
        let err = observable_subset(&toy(), &id("HP:0009999")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn remap_follows_replaced_by() {
        let remap = obsolete_remap(&toy());
        assert_eq!(remap.get(&id("HP:0000005")), Some(&id("HP:0000004")));
        assert_eq!(remap_from_tsv(&remap_to_tsv(&remap)).unwrap(), remap);
    }

    #[test]
    fn flatten_cardinalities() {
        let a = term("HP:0000010", "Name", &["One", "Two", "Three"], &[]);
        let keep: BTreeSet<HpoId> = [id("HP:0000010")].into();
        assert_eq!(flatten(&map(vec![a]), &keep, DEFAULT_VERSION_TAG).len(), 4);

        let b = term("HP:0000010", "Name", &["NAME", "Two", "Three"], &[]);
        assert_eq!(flatten(&map(vec![b]), &keep, DEFAULT_VERSION_TAG).len(), 3);

        let x = term("HP:0000011", "X", &["Macrocephaly-like"], &[]);
        let y = term("HP:0000012", "Y", &["macrocephaly-like"], &[]);
        let keep: BTreeSet<HpoId> = [id("HP:0000011"), id("HP:0000012")].into();
        let dict = flatten(&map(vec![x, y]), &keep, DEFAULT_VERSION_TAG);
        let shared: Vec<&DictEntry> = dict
            .entries()
            .iter()
            .filter(|e| e.surface == "macrocephaly-like")
            .collect();
        assert_eq!(shared.len(), 2);
        assert_ne!(shared[0].hpo_id, shared[1].hpo_id);
    }

    #[test]
    fn dictionary_tsv_is_sorted_and_round_trips() {
        let t = term("HP:0000010", "  Zeta   Name ", &["alpha"], &[]);
        let keep: BTreeSet<HpoId> = [id("HP:0000010")].into();
        let dict = flatten(&map(vec![t]), &keep, DEFAULT_VERSION_TAG);
        assert_eq!(dict.to_tsv(), "alpha\tHP:0000010\nzeta name\tHP:0000010\n");
        let back = FlatDictionary::from_tsv(&dict.to_tsv(), DEFAULT_VERSION_TAG).unwrap();
        assert_eq!(back, dict);
        assert_eq!(back.checksum(), dict.checksum());
    }

    fn arb_text() -> impl Strategy<Value = String> {
        "[A-Za-z][A-Za-z0-9 \"\\\\-]{0,12}[A-Za-z0-9]".prop_map(|s| s.trim().to_string())
    }

    fn arb_terms() -> impl Strategy<Value = TermMap> {
        prop::collection::vec(
            (
                arb_text(),
                prop::collection::vec(arb_text(), 0..4),
                any::<bool>(),
            ),
            1..8,
        )
        .prop_map(|specs| {
            let ids: Vec<HpoId> = (0..specs.len())
                .map(|i| HpoId::new(format!("HP:{:07}", i + 1)).unwrap())
                .collect();
            specs
                .into_iter()
                .enumerate()
                .map(|(i, (name, synonyms, obsolete))| {
                    let parents = if i == 0 {
                        vec![]
                    } else {
                        vec![ids[i / 2].clone()]
                    };
                    let term = HpoTerm {
                        id: ids[i].clone(),
                        name,
                        synonyms,
                        parents,
                        obsolete,
                        replaced_by: obsolete.then(|| ids[0].clone()),
                    };
                    (ids[i].clone(), term)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn canonical_obo_round_trips(terms in arb_terms()) {
            prop_assert_eq!(parse_obo(&to_obo(&terms)).unwrap(), terms);
        }

        #[test]
        fn flatten_size_bound(terms in arb_terms()) {
            let keep: BTreeSet<HpoId> = terms.keys().cloned().collect();
            let dict = flatten(&terms, &keep, DEFAULT_VERSION_TAG);
            let bound: usize = terms.values().map(|t| 1 + t.synonyms.len()).sum();
            prop_assert!(dict.len() <= bound);
            let distinct: BTreeSet<(String, HpoId)> = terms.values()
                .flat_map(|t| std::iter::once(&t.name).chain(&t.synonyms)
                    .map(move |s| (normalize_surface(s), t.id.clone())))
                .collect();
            prop_assert_eq!(dict.len(), distinct.len());
        }

        #[test]
        fn adding_edge_into_subtree_is_monotone(terms in arb_terms(), from in 0usize..8, to in 0usize..8) {
            let mut terms = terms;
            let root = HpoId::new("HP:0000001").unwrap();
            let before = observable_subset(&terms, &root).unwrap();
            let ids: Vec<HpoId> = terms.keys().cloned().collect();
            let (child, parent) = (&ids[from % ids.len()], &ids[to % ids.len()]);
            if child != parent && child != &root {
                let t = terms.get_mut(child).unwrap();
                if !t.parents.contains(parent) {
                    t.parents.push(parent.clone());
                }
            }
            let after = observable_subset(&terms, &root).unwrap();
            prop_assert!(before.is_subset(&after));
        }
    }
}
