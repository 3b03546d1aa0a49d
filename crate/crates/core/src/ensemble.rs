//! Merging the outputs of two extraction backends.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AnnotationSet, Category};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MergeRule {
    #[default]
    UnionDedup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergePolicy {
    pub rule: MergeRule,
    /// Overlapping mentions with the same HPO id keep only the one from `a`.
    pub overlap_same_id_collapse: bool,
}

impl Default for MergePolicy {
    fn default() -> Self {
        MergePolicy {
            rule: MergeRule::UnionDedup,
            overlap_same_id_collapse: true,
        }
    }
}

pub fn merge(a: &AnnotationSet, b: &AnnotationSet, policy: MergePolicy) -> Result<AnnotationSet> {
    if a.consultation_id != b.consultation_id {
        return Err(Error::Validation(format!(
            "cannot merge predictions for {:?} with {:?}",
            a.consultation_id, b.consultation_id
        )));
    }
    let MergeRule::UnionDedup = policy.rule;
    let mut out = AnnotationSet::new(a.consultation_id.clone());
    for m in &a.mentions {
        out.push_unique(m.clone());
    }
    for m in &b.mentions {
        // Duplicates that disagree on category keep the key finding.
        if let Some(kept) = out.mentions.iter_mut().find(|x| *x == m) {
            if m.category == Category::KeyFinding {
                kept.category = Category::KeyFinding;
            }
            continue;
        }
        let shadowed = policy.overlap_same_id_collapse
            && m.hpo_id.is_some()
            && a.mentions
                .iter()
                .any(|x| x.hpo_id == m.hpo_id && x.overlaps(m));
        if !shadowed {
            out.mentions.push(m.clone());
        }
    }
    out.sort();
    Ok(out)
}

/// Merges two corpora of prediction sets by consultation id; ids present on
/// one side only pass through unchanged.
pub fn merge_all(
    a: &[AnnotationSet],
    b: &[AnnotationSet],
    policy: MergePolicy,
) -> Result<Vec<AnnotationSet>> {
    use std::collections::BTreeMap;
    let mut by_id: BTreeMap<&str, (Option<&AnnotationSet>, Option<&AnnotationSet>)> =
        BTreeMap::new();
    for s in a {
        by_id.entry(&s.consultation_id).or_default().0 = Some(s);
    }
    for s in b {
        by_id.entry(&s.consultation_id).or_default().1 = Some(s);
    }
    by_id
        .into_iter()
        .map(|(id, pair)| match pair {
            (Some(x), Some(y)) => merge(x, y, policy),
            (Some(x), None) | (None, Some(x)) => merge(x, &AnnotationSet::new(id), policy),
            (None, None) => unreachable!("every id comes from one side"),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{HpoId, Mention};

    fn m(s: usize, e: usize, id: &str) -> Mention {
        Mention::single(s, e, Category::KeyFinding)
            .unwrap()
            .with_hpo(Some(HpoId::new(id).unwrap()))
    }

    fn set(ms: Vec<Mention>) -> AnnotationSet {
        let mut s = AnnotationSet::new("c");
        for x in ms {
            s.push_unique(x);
        }
        s.sort();
        s
    }

    #[test]
    fn idempotent() {
        let a = set(vec![m(0, 4, "HP:0000001"), m(6, 9, "HP:0000002")]);
        assert_eq!(merge(&a, &a, MergePolicy::default()).unwrap(), a);
    }

    #[test]
    fn disjoint_sets_add_up() {
        let a = set(vec![m(0, 1, "HP:0000001"), m(2, 3, "HP:0000001")]);
        let b = set(vec![
            m(4, 5, "HP:0000001"),
            m(6, 7, "HP:0000002"),
            m(8, 9, "HP:0000003"),
        ]);
        assert_eq!(
            merge(&a, &b, MergePolicy::default())
                .unwrap()
                .mentions
                .len(),
            5
        );
    }

    #[test]
    fn overlap_with_same_id_keeps_first_argument() {
        let a = set(vec![m(0, 4, "HP:0000001")]);
        let b = set(vec![m(2, 6, "HP:0000001")]);
        assert_eq!(merge(&a, &b, MergePolicy::default()).unwrap(), a);
        let off = MergePolicy {
            overlap_same_id_collapse: false,
            ..Default::default()
        };
        assert_eq!(merge(&a, &b, off).unwrap().mentions.len(), 2);
        assert_eq!(merge(&a, &b, off).unwrap(), merge(&b, &a, off).unwrap());
    }

    #[test]
    fn duplicate_with_conflicting_category_keeps_key_finding() {
        let mut normal = m(0, 4, "HP:0000001");
        normal.category = Category::NormalFinding;
        let a = set(vec![normal]);
        let b = set(vec![m(0, 4, "HP:0000001")]);
        for policy in [
            MergePolicy::default(),
            MergePolicy {
                overlap_same_id_collapse: false,
                ..Default::default()
            },
        ] {
            for merged in [
                merge(&a, &b, policy).unwrap(),
                merge(&b, &a, policy).unwrap(),
            ] {
                assert_eq!(merged.mentions.len(), 1);
                assert_eq!(merged.mentions[0].category, Category::KeyFinding);
            }
        }
    }

    #[test]
    fn mismatched_consultations_fail() {
        let a = AnnotationSet::new("x");
        let b = AnnotationSet::new("y");
        assert!(merge(&a, &b, MergePolicy::default()).is_err());
    }
}
