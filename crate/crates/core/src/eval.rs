//! Micro precision/recall/F1 for the three metric families.
//!
//! Only KEY_FINDING mentions carrying an HPO id are scored.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AnnotationSet, Category, HpoId, Mention};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Family {
    NormOnly,
    ExactExtNorm,
    OverExtNorm,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::NormOnly, Family::ExactExtNorm, Family::OverExtNorm];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MatchMode {
    Exact,
    Overlap,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(flatten)]
    pub counts: Counts,
}

impl From<Counts> for FamilyScore {
    /// P = 0 without predictions, R = 0 without gold, F1 = 0 when P + R = 0.
    fn from(c: Counts) -> Self {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        FamilyScore {
            precision,
            recall,
            f1,
            counts: c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub norm_only: FamilyScore,
    pub exact_ext_norm: FamilyScore,
    pub over_ext_norm: FamilyScore,
    /// Predicted consultations with no gold entry (scored against empty gold).
    pub skipped_documents: Vec<String>,
}

impl EvalReport {
    pub fn family(&self, f: Family) -> &FamilyScore {
        match f {
            Family::NormOnly => &self.norm_only,
            Family::ExactExtNorm => &self.exact_ext_norm,
            Family::OverExtNorm => &self.over_ext_norm,
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} {:>9} {:>9} {:>9} {:>6} {:>6} {:>6}",
            "family", "precision", "recall", "f1", "tp", "fp", "fn"
        );
        for (name, s) in [
            ("NormOnly", &self.norm_only),
            ("ExactExtNorm", &self.exact_ext_norm),
            ("OverExtNorm", &self.over_ext_norm),
        ] {
            let _ = writeln!(
                out,
                "{name:<14} {:>9.4} {:>9.4} {:>9.4} {:>6} {:>6} {:>6}",
                s.precision, s.recall, s.f1, s.counts.tp, s.counts.fp, s.counts.fn_
            );
        }
        if !self.skipped_documents.is_empty() {
            let _ = writeln!(
                out,
                "predictions without gold: {}",
                self.skipped_documents.join(", ")
            );
        }
        out
    }
}

fn scored(set: &AnnotationSet) -> Vec<&Mention> {
    set.mentions
        .iter()
        .filter(|m| m.category == Category::KeyFinding && m.hpo_id.is_some())
        .collect()
}

fn index(sets: &[AnnotationSet], side: &str) -> Result<BTreeMap<String, Vec<Mention>>> {
    let mut out = BTreeMap::new();
    for s in sets {
        let kept = scored(s).into_iter().cloned().collect();
        if out.insert(s.consultation_id.clone(), kept).is_some() {
            return Err(Error::Validation(format!(
                "duplicate consultation id {:?} in {side}",
                s.consultation_id
            )));
        }
    }
    Ok(out)
}

/// Per-document gold/pred pairs over the union of ids, plus pred-only ids.
fn align(
    gold: &[AnnotationSet],
    pred: &[AnnotationSet],
) -> Result<(Vec<(Vec<Mention>, Vec<Mention>)>, Vec<String>)> {
    let g = index(gold, "gold")?;
    let p = index(pred, "predictions")?;
    let ids: BTreeSet<&String> = g.keys().chain(p.keys()).collect();
    let mut docs = Vec::with_capacity(ids.len());
    let mut skipped = Vec::new();
    for id in ids {
        if !g.contains_key(id) {
            skipped.push(id.clone());
        }
        docs.push((
            g.get(id).cloned().unwrap_or_default(),
            p.get(id).cloned().unwrap_or_default(),
        ));
    }
    Ok((docs, skipped))
}

pub fn norm_only_counts(gold: &[Mention], pred: &[Mention]) -> Counts {
    let ids = |ms: &[Mention]| -> BTreeSet<HpoId> {
        ms.iter().filter_map(|m| m.hpo_id.clone()).collect()
    };
    let (g, p) = (ids(gold), ids(pred));
    let tp = g.intersection(&p).count();
    Counts {
        tp,
        fp: p.len() - tp,
        fn_: g.len() - tp,
    }
}

fn compatible(g: &Mention, p: &Mention, mode: MatchMode) -> bool {
    g.hpo_id == p.hpo_id
        && match mode {
            MatchMode::Exact => g.fragments() == p.fragments(),
            MatchMode::Overlap => g.overlaps(p),
        }
}

/// One-to-one matching: greedy by descending overlap (ties by gold then pred
/// order), completed to a maximum matching with augmenting paths.
pub fn match_mentions(gold: &[Mention], pred: &[Mention], mode: MatchMode) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); gold.len()];
    for (gi, g) in gold.iter().enumerate() {
        for (pi, p) in pred.iter().enumerate() {
            if compatible(g, p, mode) {
                pairs.push((g.overlap_len(p), gi, pi));
                adj[gi].push(pi);
            }
        }
    }
    pairs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gold_to: Vec<Option<usize>> = vec![None; gold.len()];
    let mut pred_to: Vec<Option<usize>> = vec![None; pred.len()];
    for (_, gi, pi) in pairs {
        if gold_to[gi].is_none() && pred_to[pi].is_none() {
            gold_to[gi] = Some(pi);
            pred_to[pi] = Some(gi);
        }
    }
    fn augment(
        g: usize,
        adj: &[Vec<usize>],
        seen: &mut [bool],
        gold_to: &mut [Option<usize>],
        pred_to: &mut [Option<usize>],
    ) -> bool {
        for &p in &adj[g] {
            if seen[p] {
                continue;
            }
            seen[p] = true;
            if pred_to[p].is_none_or(|other| augment(other, adj, seen, gold_to, pred_to)) {
                gold_to[g] = Some(p);
                pred_to[p] = Some(g);
                return true;
            }
        }
        false
    }
    for g in 0..gold.len() {
        if gold_to[g].is_none() {
            let mut seen = vec![false; pred.len()];
            augment(g, &adj, &mut seen, &mut gold_to, &mut pred_to);
        }
    }
    gold_to
        .iter()
        .enumerate()
        .filter_map(|(g, p)| p.map(|p| (g, p)))
        .collect()
}

pub fn ext_norm_counts(gold: &[Mention], pred: &[Mention], mode: MatchMode) -> Counts {
    let tp = match_mentions(gold, pred, mode).len();
    Counts {
        tp,
        fp: pred.len() - tp,
        fn_: gold.len() - tp,
    }
}

pub fn eval_norm_only(gold: &[AnnotationSet], pred: &[AnnotationSet]) -> Result<FamilyScore> {
    let (docs, _) = align(gold, pred)?;
    let mut c = Counts::default();
    for (g, p) in &docs {
        c += norm_only_counts(g, p);
    }
    Ok(c.into())
}

pub fn eval_ext_norm(
    gold: &[AnnotationSet],
    pred: &[AnnotationSet],
    mode: MatchMode,
) -> Result<FamilyScore> {
    let (docs, _) = align(gold, pred)?;
    let mut c = Counts::default();
    for (g, p) in &docs {
        c += ext_norm_counts(g, p, mode);
    }
    Ok(c.into())
}

/// All three families in one pass.
pub fn evaluate(gold: &[AnnotationSet], pred: &[AnnotationSet]) -> Result<EvalReport> {
    let (docs, skipped) = align(gold, pred)?;
    let (mut n, mut e, mut o) = (Counts::default(), Counts::default(), Counts::default());
    for (g, p) in &docs {
        n += norm_only_counts(g, p);
        e += ext_norm_counts(g, p, MatchMode::Exact);
        o += ext_norm_counts(g, p, MatchMode::Overlap);
    }
    Ok(EvalReport {
        norm_only: n.into(),
        exact_ext_norm: e.into(),
        over_ext_norm: o.into(),
        skipped_documents: skipped,
    })
}

/// Loads two annotation TSV files and scores them.
pub fn score_run(gold_path: &std::path::Path, pred_path: &std::path::Path) -> Result<EvalReport> {
    let gold = crate::io::read_annotations(gold_path)?;
    let pred = crate::io::read_annotations(pred_path)?;
    evaluate(&gold, &pred)
}
