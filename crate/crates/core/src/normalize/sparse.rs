//! TF-IDF over character n-grams with cosine similarity.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn;
use crate::ontology::{normalize_surface, FlatDictionary};

/// Sorted `(feature index, weight)` pairs, L2-normalized.
pub type SparseVec = Vec<(u64, f64)>;

const UNSEEN: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseEncoder {
    ngram_sizes: Vec<usize>,
    documents: usize,
    index: BTreeMap<String, u32>,
    idf: Vec<f64>,
}

/// Unpadded character n-grams of the normalized surface, for every size.
pub fn char_ngrams(surface: &str, sizes: &[usize]) -> Vec<String> {
    let chars: Vec<char> = normalize_surface(surface).chars().collect();
    let mut out = Vec::new();
    for &n in sizes {
        if n == 0 || chars.len() < n {
            continue;
        }
        out.extend(chars.windows(n).map(|w| w.iter().collect::<String>()));
    }
    out
}

impl SparseEncoder {
    /// Smooth idf `ln((1 + N) / (1 + df)) + 1` over dictionary surfaces.
    pub fn fit(dictionary: &FlatDictionary, ngram_sizes: &[usize]) -> Result<Self> {
        if dictionary.is_empty() {
            return Err(Error::Data(
                "cannot fit sparse encoder on an empty dictionary".into(),
            ));
        }
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for e in dictionary.entries() {
            let mut grams = char_ngrams(&e.surface, ngram_sizes);
            grams.sort();
            grams.dedup();
            for g in grams {
                *df.entry(g).or_default() += 1;
            }
        }
        let n = dictionary.len() as f64;
        let mut index = BTreeMap::new();
        let mut idf = Vec::with_capacity(df.len());
        for (i, (g, d)) in df.into_iter().enumerate() {
            index.insert(g, i as u32);
            idf.push(((1.0 + n) / (1.0 + d as f64)).ln() + 1.0);
        }
        Ok(SparseEncoder {
            ngram_sizes: ngram_sizes.to_vec(),
            documents: dictionary.len(),
            index,
            idf,
        })
    }

    pub fn ngram_sizes(&self) -> &[usize] {
        &self.ngram_sizes
    }

    pub fn vocabulary_len(&self) -> usize {
        self.idf.len()
    }

    pub fn idf(&self, gram: &str) -> Option<f64> {
        self.index.get(gram).map(|&i| self.idf[i as usize])
    }

    /// Raw term counts times idf, L2-normalized. N-grams outside the
    /// dictionary inventory get the `df = 0` idf under a hashed index.
    pub fn encode(&self, surface: &str) -> SparseVec {
        let unseen_idf = (1.0 + self.documents as f64).ln() + 1.0;
        let mut counts: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
        for g in char_ngrams(surface, &self.ngram_sizes) {
            let (i, w) = match self.index.get(&g) {
                Some(&i) => (u64::from(i), self.idf[i as usize]),
                None => (UNSEEN | (nn::fnv1a(g.as_bytes()) >> 24), unseen_idf),
            };
            counts.entry(i).or_insert((0.0, w)).0 += 1.0;
        }
        let mut v: SparseVec = counts.into_iter().map(|(i, (c, w))| (i, c * w)).collect();
        let norm = v.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|(_, x)| *x /= norm);
        }
        v
    }

    pub fn similarity(&self, a: &str, b: &str) -> f64 {
        sparse_dot(&self.encode(a), &self.encode(b))
    }

    /// `ngram<TAB>idf` lines preceded by `#sizes` and `#documents` headers.
    pub fn to_tsv(&self) -> String {
        let sizes: Vec<String> = self.ngram_sizes.iter().map(usize::to_string).collect();
        let mut out = format!(
            "#sizes\t{}\n#documents\t{}\n",
            sizes.join(","),
            self.documents
        );
        for (g, &i) in &self.index {
            out.push_str(&format!("{g}\t{:?}\n", self.idf[i as usize]));
        }
        out
    }

    pub fn from_tsv(source: &str) -> Result<Self> {
        let mut lines = source.lines().enumerate();
        let sizes = match lines.next() {
            Some((_, header)) => header
                .strip_prefix("#sizes\t")
                .ok_or_else(|| Error::parse(1, "expected #sizes header"))?
                .split(',')
                .map(|s| {
                    s.parse::<usize>()
                        .map_err(|e| Error::parse(1, e.to_string()))
                })
                .collect::<Result<Vec<_>>>()?,
            None => return Err(Error::parse(1, "empty idf table")),
        };
        let documents = match lines.next() {
            Some((_, header)) => header
                .strip_prefix("#documents\t")
                .and_then(|n| n.parse::<usize>().ok())
                .ok_or_else(|| Error::parse(2, "expected #documents header"))?,
            None => return Err(Error::parse(2, "expected #documents header")),
        };
        let mut index = BTreeMap::new();
        let mut idf = Vec::new();
        for (n, line) in lines {
            let (g, w) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::parse(n + 1, "expected ngram<TAB>idf"))?;
            let w: f64 = w
                .parse()
                .map_err(|_| Error::parse(n + 1, format!("bad idf {w:?}")))?;
            if w < 0.0 {
                return Err(Error::parse(n + 1, "negative idf"));
            }
            index.insert(g.to_string(), idf.len() as u32);
            idf.push(w);
        }
        Ok(SparseEncoder {
            ngram_sizes: sizes,
            documents,
            index,
            idf,
        })
    }
}

/// Dot product of two sorted sparse vectors.
pub fn sparse_dot(a: &SparseVec, b: &SparseVec) -> f64 {
    let (mut i, mut j, mut acc) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::DictEntry;
    use crate::types::HpoId;
    use std::collections::HashMap;

    fn dict(surfaces: &[&str]) -> FlatDictionary {
        FlatDictionary::new(
            surfaces.iter().enumerate().map(|(i, s)| DictEntry {
                surface: s.to_string(),
                hpo_id: HpoId::new(format!("HP:{:07}", i + 1)).unwrap(),
            }),
            "t",
        )
    }

    #[test]
    fn single_surface_has_uniform_idf() {
        let enc = SparseEncoder::fit(&dict(&["long toe"]), &[2, 3]).unwrap();
        for g in char_ngrams("long toe", &[2, 3]) {
            assert_eq!(enc.idf(&g), Some(1.0));
        }
        assert!((enc.similarity("long toe", "long toe") - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_grams_have_zero_similarity() {
        let enc = SparseEncoder::fit(&dict(&["abc", "xyz"]), &[2, 3]).unwrap();
        assert_eq!(enc.similarity("abc", "xyz"), 0.0);
    }

    #[test]
    fn empty_dictionary_is_an_error() {
        assert!(SparseEncoder::fit(&dict(&[]), &[2, 3]).is_err());
    }

    #[test]
    fn long_toes_against_long_toe_matches_hand_computation() {
        let surfaces = ["long toe", "short neck"];
        let enc = SparseEncoder::fit(&dict(&surfaces), &[2, 3]).unwrap();
        let grams = |s: &str| {
            let c: Vec<char> = s.chars().collect();
            let mut v = Vec::new();
            for n in [2, 3] {
                for w in c.windows(n) {
                    v.push(w.iter().collect::<String>());
                }
            }
            v
        };
        let mut df: HashMap<String, f64> = HashMap::new();
        for s in surfaces {
            let mut g = grams(s);
            g.sort();
            g.dedup();
            for x in g {
                *df.entry(x).or_default() += 1.0;
            }
        }
        let vec_of = |s: &str| {
            let mut tf: HashMap<String, f64> = HashMap::new();
            for g in grams(s) {
                let d = df.get(&g).copied().unwrap_or(0.0);
                *tf.entry(g).or_default() += (3.0 / (1.0 + d)).ln() + 1.0;
            }
            let norm = tf.values().map(|x| x * x).sum::<f64>().sqrt();
            tf.into_iter()
                .map(|(k, v)| (k, v / norm))
                .collect::<HashMap<_, _>>()
        };
        let (a, b) = (vec_of("long toes"), vec_of("long toe"));
        let expected: f64 = a
            .iter()
            .map(|(k, v)| v * b.get(k).copied().unwrap_or(0.0))
            .sum();
        let got = enc.similarity("long toes", "long toe");
        assert!(got > 0.0 && got < 1.0);
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn idf_table_round_trips() {
        let enc =
            SparseEncoder::fit(&dict(&["long toe", "short neck", "a\u{e9}b"]), &[2, 3]).unwrap();
        let back = SparseEncoder::from_tsv(&enc.to_tsv()).unwrap();
        assert_eq!(back, enc);
    }
}
