//! Deterministic synthetic data: a toy phenotype ontology, a normalization
//! benchmark with noisy synonyms and lexical variants, and a small annotated
//! consultation corpus.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::io::Document;
use crate::ontology::{HpoTerm, TermMap, PHENOTYPIC_ABNORMALITY};
use crate::types::{Category, HpoId, Mention, Span};

/// Descriptor word variants; index 0 is the canonical form.
pub const MODIFIERS: [[&str; 3]; 10] = [
    ["long", "elongated", "lengthened"],
    ["short", "shortened", "stubby"],
    ["broad", "wide", "widened"],
    ["narrow", "slender", "thin"],
    ["large", "enlarged", "big"],
    ["small", "tiny", "diminutive"],
    ["flat", "flattened", "depressed"],
    ["prominent", "protruding", "projecting"],
    ["curved", "bowed", "bent"],
    ["absent", "missing", "lacking"],
];

/// Body-part word variants; index 0 is the canonical form.
pub const ANATOMY: [[&str; 3]; 5] = [
    ["finger", "digit", "dactyl"],
    ["ear", "auricle", "pinna"],
    ["nose", "nasus", "snout"],
    ["chin", "mentum", "chinpoint"],
    ["toe", "hallux", "podal digit"],
];

/// Seed of the shipped fixtures under `data/`.
pub const FIXTURE_SEED: u64 = 7;
/// Consultations in the shipped corpus.
pub const FIXTURE_CORPUS_SIZE: usize = 120;

const ALL_ID: &str = "HP:0000001";
const INHERITANCE_ID: &str = "HP:0000005";
const DOMINANT_ID: &str = "HP:0000006";
pub const SMALL_HEAD_ID: &str = "HP:9100001";
pub const OBSOLETE_ID: &str = "HP:9099999";

fn hp(raw: &str) -> HpoId {
    HpoId::new(raw).expect("synthetic ids are well formed")
}

/// Id of the concept `(modifier, anatomy)`.
pub fn concept_id(modifier: usize, anatomy: usize) -> HpoId {
    hp(&format!(
        "HP:90{:05}",
        100 + modifier * ANATOMY.len() + anatomy
    ))
}

fn group_id(anatomy: usize) -> HpoId {
    hp(&format!("HP:90{:05}", 10 + anatomy))
}

/// One random character edit (drop, swap, double or replace) of a letter.
pub fn typo(s: &str, rng: &mut impl Rng) -> String {
    let mut chars: Vec<char> = s.chars().collect();
    let letters: Vec<usize> = (0..chars.len())
        .filter(|&i| chars[i].is_alphabetic())
        .collect();
    if letters.len() < 3 {
        return s.to_string();
    }
    let i = letters[rng.random_range(1..letters.len())];
    match rng.random_range(0..4) {
        0 => {
            chars.remove(i);
        }
        1 if i + 1 < chars.len() && chars[i + 1].is_alphabetic() => chars.swap(i, i + 1),
        2 => chars.insert(i, chars[i]),
        _ => chars[i] = *b"aeiourstln".choose(rng).expect("nonempty") as char,
    }
    chars.into_iter().collect()
}

fn term(id: HpoId, name: &str, synonyms: Vec<String>, parents: Vec<HpoId>) -> HpoTerm {
    HpoTerm {
        id,
        name: name.to_string(),
        synonyms,
        parents,
        obsolete: false,
        replaced_by: None,
    }
}

/// Root terms plus a grouping term per body part and a term per concept.
/// Each concept carries three noisy synonyms: a modifier variant, a body-part
/// variant and a misspelling of the name.
pub fn toy_ontology(seed: u64) -> TermMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut terms = TermMap::new();
    let mut add = |t: HpoTerm| {
        terms.insert(t.id.clone(), t);
    };
    add(term(hp(ALL_ID), "All", vec![], vec![]));
    add(term(
        hp(PHENOTYPIC_ABNORMALITY),
        "Phenotypic abnormality",
        vec![],
        vec![hp(ALL_ID)],
    ));
    add(term(
        hp(INHERITANCE_ID),
        "Mode of inheritance",
        vec![],
        vec![hp(ALL_ID)],
    ));
    add(term(
        hp(DOMINANT_ID),
        "Autosomal dominant inheritance",
        vec![],
        vec![hp(INHERITANCE_ID)],
    ));
    for (a, forms) in ANATOMY.iter().enumerate() {
        add(term(
            group_id(a),
            &format!("Abnormality of the {}", forms[0]),
            vec![],
            vec![hp(PHENOTYPIC_ABNORMALITY)],
        ));
    }
    for (m, mods) in MODIFIERS.iter().enumerate() {
        for (a, anat) in ANATOMY.iter().enumerate() {
            let name = format!("{} {}", mods[0], anat[0]);
            let synonyms = vec![
                format!("{} {}", mods[1], anat[0]),
                format!("{} {}", mods[0], anat[1]),
                typo(&name, &mut rng),
            ];
            add(term(concept_id(m, a), &name, synonyms, vec![group_id(a)]));
        }
    }
    terms
}

/// Which part of the benchmark a query belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum QuerySplit {
    Train,
    Test,
}

impl QuerySplit {
    pub fn as_str(self) -> &'static str {
        match self {
            QuerySplit::Train => "train",
            QuerySplit::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchmarkQuery {
    pub text: String,
    pub gold: HpoId,
    pub split: QuerySplit,
}

/// Three queries per concept (two train, one test) built from word variants
/// not used verbatim by any dictionary surface of that concept, some with a
/// misspelling. Every test query uses at least one third-form variant.
pub fn benchmark_queries(terms: &TermMap, seed: u64) -> Vec<BenchmarkQuery> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbe9c);
    let mut out = Vec::new();
    for (m, mods) in MODIFIERS.iter().enumerate() {
        for (a, anat) in ANATOMY.iter().enumerate() {
            let id = concept_id(m, a);
            let t = &terms[&id];
            let taken: Vec<String> = std::iter::once(t.name.clone())
                .chain(t.synonyms.iter().cloned())
                .collect();
            let mut used: Vec<(usize, usize)> = Vec::new();
            for q in 0..3 {
                let split = if q < 2 {
                    QuerySplit::Train
                } else {
                    QuerySplit::Test
                };
                let (mi, ai) = loop {
                    let mi = rng.random_range(0..3);
                    let ai = rng.random_range(0..3);
                    let text = format!("{} {}", mods[mi], anat[ai]);
                    let fresh = !taken.contains(&text) && !used.contains(&(mi, ai));
                    let strong = split == QuerySplit::Train || mi == 2 || ai == 2;
                    if fresh && strong {
                        break (mi, ai);
                    }
                };
                used.push((mi, ai));
                let mut text = format!("{} {}", mods[mi], anat[ai]);
                if rng.random_bool(0.3) {
                    text = typo(&text, &mut rng);
                }
                out.push(BenchmarkQuery {
                    text,
                    gold: id.clone(),
                    split,
                });
            }
        }
    }
    out
}

pub fn queries_to_tsv(queries: &[BenchmarkQuery]) -> String {
    let mut out = String::from("query\thpo_id\tsplit\n");
    for q in queries {
        out.push_str(&format!("{}\t{}\t{}\n", q.text, q.gold, q.split.as_str()));
    }
    out
}

pub fn queries_from_tsv(source: &str) -> crate::Result<Vec<BenchmarkQuery>> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(crate::Error::parse(
                i + 1,
                "expected query<TAB>hpo_id<TAB>split",
            ));
        }
        let split = match cols[2] {
            "train" => QuerySplit::Train,
            "test" => QuerySplit::Test,
            other => {
                return Err(crate::Error::parse(
                    i + 1,
                    format!("unknown split {other:?}"),
                ))
            }
        };
        let gold = HpoId::new(cols[1]).map_err(|e| crate::Error::parse(i + 1, e.to_string()))?;
        out.push(BenchmarkQuery {
            text: cols[0].to_string(),
            gold,
            split,
        });
    }
    Ok(out)
}

/// Toy ontology extended for the consultation corpus: a head-size term and
/// an obsolete alias of the first concept.
pub fn corpus_ontology(seed: u64) -> TermMap {
    let mut terms = toy_ontology(seed);
    terms.insert(
        hp(SMALL_HEAD_ID),
        term(
            hp(SMALL_HEAD_ID),
            "Decreased head circumference",
            vec![
                "head circumference is below the 3rd percentile for age".into(),
                "head circumference is below the 1st percentile for age".into(),
                "small head circumference".into(),
            ],
            vec![hp(PHENOTYPIC_ABNORMALITY)],
        ),
    );
    let mut obsolete = term(hp(OBSOLETE_ID), "obsolete long fingers", vec![], vec![]);
    obsolete.obsolete = true;
    obsolete.replaced_by = Some(concept_id(0, 0));
    terms.insert(obsolete.id.clone(), obsolete);
    terms
}

pub const ABBREVIATIONS_TSV: &str = "# abbreviation\texpansion\n\
HC\tHead Circumference\n\
OFC\toccipitofrontal circumference\n\
NAD\tno abnormality detected\n";

const NORMAL_PARTS: [&str; 5] = ["lips", "palate", "philtrum", "eyebrows", "hands"];
const NO_FINDING: [&str; 4] = [
    "Family history is unremarkable.",
    "Development is appropriate for age.",
    "NAD.",
    "Seen with both parents today.",
];
const PERCENTILES: [(&str, &str); 2] = [("1", "1"), ("3", "3")];

struct Builder {
    text: String,
    mentions: Vec<Mention>,
}

impl Builder {
    fn len(&self) -> usize {
        self.text.chars().count()
    }

    fn push(&mut self, s: &str) -> Span {
        let start = self.len();
        self.text.push_str(s);
        Span::new(start, self.len())
    }

    fn sentence_gap(&mut self) {
        if !self.text.is_empty() {
            self.text.push(' ');
        }
    }

    fn mention(&mut self, frags: Vec<Span>, category: Category, id: Option<HpoId>) {
        self.mentions
            .push(Mention::new(frags, category, id).expect("builder spans are disjoint"));
    }
}

fn plural(word: &str) -> String {
    format!("{word}s")
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn key_sentence(b: &mut Builder, rng: &mut ChaCha8Rng, obsolete_rate: f64) {
    let m = rng.random_range(0..MODIFIERS.len());
    let a = rng.random_range(0..ANATOMY.len());
    let mw = MODIFIERS[m][rng.random_range(0..3)];
    let aw = plural(ANATOMY[a][rng.random_range(0..2)]);
    let mut id = concept_id(m, a);
    if (m, a) == (0, 0) && rng.random_bool(obsolete_rate) {
        id = hp(OBSOLETE_ID);
    }
    b.sentence_gap();
    match rng.random_range(0..3) {
        0 => {
            b.push("The child has ");
            let s = b.push(&format!("{mw} {aw}"));
            b.push(".");
            b.mention(vec![s], Category::KeyFinding, Some(id));
        }
        1 => {
            let s = b.push(&capitalize(&format!("{mw} {aw}")));
            b.push(" noted on examination.");
            b.mention(vec![s], Category::KeyFinding, Some(id));
        }
        _ => {
            b.push("There are ");
            let s = b.push(&format!("{mw} {aw}"));
            b.push(" bilaterally.");
            b.mention(vec![s], Category::KeyFinding, Some(id));
        }
    }
}

fn discontinuous_sentence(b: &mut Builder, rng: &mut ChaCha8Rng) {
    let m = rng.random_range(0..MODIFIERS.len());
    let a1 = rng.random_range(0..ANATOMY.len());
    let a2 = (a1 + 1 + rng.random_range(0..ANATOMY.len() - 1)) % ANATOMY.len();
    let mw = MODIFIERS[m][rng.random_range(0..3)];
    b.sentence_gap();
    b.push("Examination shows ");
    let mod_span = b.push(mw);
    b.push(" ");
    let first = b.push(&plural(ANATOMY[a1][0]));
    b.push(" and ");
    let second = b.push(&plural(ANATOMY[a2][0]));
    b.push(".");
    b.mention(
        vec![Span::new(mod_span.start, first.end)],
        Category::KeyFinding,
        Some(concept_id(m, a1)),
    );
    b.mention(
        vec![mod_span, second],
        Category::KeyFinding,
        Some(concept_id(m, a2)),
    );
}

fn normal_sentence(b: &mut Builder, rng: &mut ChaCha8Rng) {
    let part = NORMAL_PARTS.choose(rng).expect("nonempty");
    b.sentence_gap();
    if rng.random_bool(0.5) {
        let s = b.push(&format!("Normal {part}"));
        b.push(".");
        b.mention(vec![s], Category::NormalFinding, None);
    } else {
        b.push("The ");
        let p = b.push(part);
        b.push(" appear ");
        let n = b.push("normal");
        b.push(".");
        b.mention(vec![p, n], Category::NormalFinding, None);
    }
}

fn percentile_sentence(b: &mut Builder, rng: &mut ChaCha8Rng) {
    let (n, _) = PERCENTILES.choose(rng).expect("nonempty");
    b.sentence_gap();
    let s = b.push(&format!("HC < {n}% for age"));
    b.push(".");
    b.mention(vec![s], Category::KeyFinding, Some(hp(SMALL_HEAD_ID)));
}

fn filler_sentence(b: &mut Builder, rng: &mut ChaCha8Rng) {
    b.sentence_gap();
    b.push(NO_FINDING.choose(rng).expect("nonempty"));
}

/// Annotated consultations covering all four edge cases.
pub fn corpus(n: usize, seed: u64) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0de);
    let mut docs = Vec::with_capacity(n);
    for i in 0..n {
        let mut b = Builder {
            text: String::new(),
            mentions: Vec::new(),
        };
        match i % 4 {
            0 => {
                let k = rng.random_range(0..3);
                for _ in 0..k {
                    filler_sentence(&mut b, &mut rng);
                }
                if k == 0 {
                    filler_sentence(&mut b, &mut rng);
                }
            }
            1 => {
                normal_sentence(&mut b, &mut rng);
                if rng.random_bool(0.5) {
                    normal_sentence(&mut b, &mut rng);
                }
            }
            2 => {
                discontinuous_sentence(&mut b, &mut rng);
                if rng.random_bool(0.5) {
                    key_sentence(&mut b, &mut rng, 0.5);
                }
            }
            _ => {
                key_sentence(&mut b, &mut rng, 0.5);
                match rng.random_range(0..3) {
                    0 => percentile_sentence(&mut b, &mut rng),
                    1 => normal_sentence(&mut b, &mut rng),
                    _ => key_sentence(&mut b, &mut rng, 0.5),
                }
            }
        }
        let mut seen = Vec::new();
        b.mentions.retain(|m| {
            let fresh = !seen.contains(m);
            seen.push(m.clone());
            fresh
        });
        docs.push(Document {
            id: format!("c{i:04}"),
            text: b.text,
            mentions: b.mentions,
        });
    }
    docs
}

/// Relative path and contents of every generated fixture file.
pub fn fixture_files() -> crate::Result<Vec<(&'static str, String)>> {
    let nen_terms = toy_ontology(FIXTURE_SEED);
    Ok(vec![
        (
            "nen_benchmark/ontology.obo",
            crate::ontology::to_obo(&nen_terms),
        ),
        (
            "nen_benchmark/queries.tsv",
            queries_to_tsv(&benchmark_queries(&nen_terms, FIXTURE_SEED)),
        ),
        (
            "synthetic/ontology.obo",
            crate::ontology::to_obo(&corpus_ontology(FIXTURE_SEED)),
        ),
        ("synthetic/abbreviations.tsv", ABBREVIATIONS_TSV.to_string()),
        (
            "synthetic/corpus.jsonl",
            crate::io::corpus_to_jsonl(&corpus(FIXTURE_CORPUS_SIZE, FIXTURE_SEED))?,
        ),
    ])
}

/// Count of terms per parent, for quick sanity checks.
pub fn children_count(terms: &TermMap) -> BTreeMap<HpoId, usize> {
    let mut out = BTreeMap::new();
    for t in terms.values() {
        for p in &t.parents {
            *out.entry(p.clone()).or_default() += 1;
        }
    }
    out
}
