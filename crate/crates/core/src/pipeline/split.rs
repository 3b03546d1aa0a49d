use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Document;
use crate::types::{AnnotationSet, Category};

/// Stratum of a consultation for the train/validation split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EdgeCaseLabel {
    NoFinding,
    HasDiscontinuous,
    NormalOnly,
    ContinuousOnly,
}

impl EdgeCaseLabel {
    pub const ALL: [EdgeCaseLabel; 4] = [
        EdgeCaseLabel::NoFinding,
        EdgeCaseLabel::HasDiscontinuous,
        EdgeCaseLabel::NormalOnly,
        EdgeCaseLabel::ContinuousOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EdgeCaseLabel::NoFinding => "NO_FINDING",
            EdgeCaseLabel::HasDiscontinuous => "HAS_DISCONTINUOUS",
            EdgeCaseLabel::NormalOnly => "NORMAL_ONLY",
            EdgeCaseLabel::ContinuousOnly => "CONTINUOUS_ONLY",
        }
    }
}

impl fmt::Display for EdgeCaseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Precedence: no finding, then discontinuous, then normal-only.
pub fn label_edge_case(gold: &AnnotationSet) -> EdgeCaseLabel {
    let ms = &gold.mentions;
    if ms.is_empty() {
        EdgeCaseLabel::NoFinding
    } else if ms.iter().any(|m| m.is_discontinuous()) {
        EdgeCaseLabel::HasDiscontinuous
    } else if ms.iter().all(|m| m.category == Category::NormalFinding) {
        EdgeCaseLabel::NormalOnly
    } else {
        EdgeCaseLabel::ContinuousOnly
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<Document>,
    pub validation: Vec<Document>,
    /// Label of every consultation, by id.
    pub labels: BTreeMap<String, EdgeCaseLabel>,
}

impl Split {
    /// `id<TAB>label<TAB>part` rows, sorted by id.
    pub fn strata_tsv(&self) -> String {
        let train: std::collections::BTreeSet<&str> =
            self.train.iter().map(|d| d.id.as_str()).collect();
        let mut out = String::from("consultation_id\tedge_case\tpart\n");
        for (id, label) in &self.labels {
            let part = if train.contains(id.as_str()) {
                "train"
            } else {
                "validation"
            };
            out.push_str(&format!("{id}\t{label}\t{part}\n"));
        }
        out
    }
}

/// Per stratum: sort by id, shuffle with the seeded RNG, put the first
/// `floor(n * ratio)` in train and the rest in validation. A stratum of one
/// consultation goes to train.
pub fn stratified_split(corpus: &[Document], ratio: f64, seed: u64) -> Result<Split> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!(
            "split ratio must be in (0, 1), got {ratio}"
        )));
    }
    let mut labels = BTreeMap::new();
    let mut strata: BTreeMap<EdgeCaseLabel, Vec<&Document>> = BTreeMap::new();
    for doc in corpus {
        let label = label_edge_case(&doc.gold());
        if labels.insert(doc.id.clone(), label).is_some() {
            return Err(Error::Validation(format!(
                "duplicate consultation id {:?}",
                doc.id
            )));
        }
        strata.entry(label).or_default().push(doc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut validation) = (Vec::new(), Vec::new());
    for (label, mut docs) in strata {
        docs.sort_by(|a, b| a.id.cmp(&b.id));
        docs.shuffle(&mut rng);
        let cut = if docs.len() == 1 {
            log::warn!("stratum {label} has a single consultation; assigning it to train");
            1
        } else {
            (docs.len() as f64 * ratio).floor() as usize
        };
        train.extend(docs[..cut].iter().map(|d| (*d).clone()));
        validation.extend(docs[cut..].iter().map(|d| (*d).clone()));
    }
    train.sort_by(|a, b| a.id.cmp(&b.id));
    validation.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Split {
        train,
        validation,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Mention;
    use proptest::prelude::*;

    fn doc(id: String, mentions: Vec<Mention>) -> Document {
        Document {
            id,
            text: "a b c d e f g h".into(),
            mentions,
        }
    }

    fn key(frags: &[(usize, usize)]) -> Mention {
        let spans = frags
            .iter()
            .map(|&(s, e)| crate::types::Span::new(s, e))
            .collect();
        Mention::new(spans, Category::KeyFinding, None).unwrap()
    }

    fn normal(frags: &[(usize, usize)]) -> Mention {
        let mut m = key(frags);
        m.category = Category::NormalFinding;
        m
    }

    fn labelled(label: EdgeCaseLabel, i: usize) -> Document {
        let ms = match label {
            EdgeCaseLabel::NoFinding => vec![],
            EdgeCaseLabel::HasDiscontinuous => vec![key(&[(0, 1), (4, 5)])],
            EdgeCaseLabel::NormalOnly => vec![normal(&[(0, 1)])],
            EdgeCaseLabel::ContinuousOnly => vec![key(&[(0, 3)])],
        };
        doc(format!("{}-{i:03}", label.as_str()), ms)
    }

    #[test]
    fn labels_follow_precedence() {
        assert_eq!(
            label_edge_case(&doc("a".into(), vec![]).gold()),
            EdgeCaseLabel::NoFinding
        );
        assert_eq!(
            label_edge_case(&doc("a".into(), vec![key(&[(0, 1), (2, 3)])]).gold()),
            EdgeCaseLabel::HasDiscontinuous
        );
        let all_normal_one_disc = doc(
            "a".into(),
            vec![normal(&[(0, 1)]), normal(&[(2, 3), (6, 7)])],
        );
        assert_eq!(
            label_edge_case(&all_normal_one_disc.gold()),
            EdgeCaseLabel::HasDiscontinuous
        );
        assert_eq!(
            label_edge_case(&doc("a".into(), vec![normal(&[(0, 1)])]).gold()),
            EdgeCaseLabel::NormalOnly
        );
        let mixed = doc("a".into(), vec![normal(&[(0, 1)]), key(&[(2, 3)])]);
        assert_eq!(
            label_edge_case(&mixed.gold()),
            EdgeCaseLabel::ContinuousOnly
        );
    }

    #[test]
    fn ten_per_stratum_splits_seven_three() {
        let corpus: Vec<Document> = EdgeCaseLabel::ALL
            .iter()
            .flat_map(|&l| (0..10).map(move |i| labelled(l, i)))
            .collect();
        let split = stratified_split(&corpus, 0.7, 5).unwrap();
        for label in EdgeCaseLabel::ALL {
            let count =
                |docs: &[Document]| docs.iter().filter(|d| split.labels[&d.id] == label).count();
            assert_eq!((count(&split.train), count(&split.validation)), (7, 3));
        }
        assert_eq!(split, stratified_split(&corpus, 0.7, 5).unwrap());
        assert_ne!(
            split.train,
            stratified_split(&corpus, 0.7, 6).unwrap().train
        );
    }

    #[test]
    fn singleton_stratum_goes_to_train() {
        let corpus = vec![labelled(EdgeCaseLabel::NormalOnly, 0)];
        let split = stratified_split(&corpus, 0.7, 1).unwrap();
        assert_eq!(split.train.len(), 1);
        assert!(split.validation.is_empty());
    }

    #[test]
    fn ratio_bounds_and_duplicates() {
        assert!(matches!(
            stratified_split(&[], 1.0, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            stratified_split(&[], 0.0, 0),
            Err(Error::Config(_))
        ));
        let d = labelled(EdgeCaseLabel::NoFinding, 0);
        assert!(matches!(
            stratified_split(&[d.clone(), d], 0.5, 0),
            Err(Error::Validation(_))
        ));
    }

    proptest! {
        #[test]
        fn per_stratum_proportion_within_one(sizes in proptest::collection::vec(0usize..25, 4), ratio in 0.05f64..0.95, seed in any::<u64>()) {
            let corpus: Vec<Document> = EdgeCaseLabel::ALL
                .iter()
                .zip(&sizes)
                .flat_map(|(&l, &n)| (0..n).map(move |i| labelled(l, i)))
                .collect();
            let split = stratified_split(&corpus, ratio, seed).unwrap();
            prop_assert_eq!(split.train.len() + split.validation.len(), corpus.len());
            for (label, &n) in EdgeCaseLabel::ALL.iter().zip(&sizes) {
                let t = split.train.iter().filter(|d| split.labels[&d.id] == *label).count();
                prop_assert!((t as f64 - n as f64 * ratio).abs() <= 1.0);
            }
        }
    }
}
