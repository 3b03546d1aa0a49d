//! Mention normalization: rank dictionary entries by
//! `dense + lambda * sparse` similarity and return the best HPO id.

pub mod dense;
pub mod sparse;
pub mod train;

use std::cmp::Ordering;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::ontology::{DictEntry, FlatDictionary};
use crate::types::{HpoId, Mention};

pub use dense::{DenseConfig, DenseEncoder};
pub use sparse::{SparseEncoder, SparseVec};
pub use train::{
    alignment_metric, marginal_loss_and_grad, pre_finetune, train_normalizer, AlignmentReport,
    ScorerParams, TrainingStats,
};

pub const ADDITIVE_CHOICES: [usize; 4] = [0, 1, 3, 5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizerConfig {
    pub top_k: usize,
    /// Gold synonyms guaranteed in each training candidate set.
    pub additive_k: usize,
    pub lambda_init: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub refresh_every: usize,
    pub exclude_normal_findings: bool,
    pub ngram_sizes: Vec<usize>,
    pub dense: DenseConfig,
    pub pre_finetune_epochs: usize,
    pub pre_finetune_batch_size: usize,
    pub pre_finetune_learning_rate: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for NormalizerConfig {
    fn default() -> Self {
        NormalizerConfig {
            top_k: 20,
            additive_k: 1,
            lambda_init: 1.0,
            epochs: 10,
            batch_size: 16,
            learning_rate: 0.01,
            refresh_every: 1,
            exclude_normal_findings: false,
            ngram_sizes: vec![2, 3],
            dense: DenseConfig::default(),
            pre_finetune_epochs: 10,
            pre_finetune_batch_size: 16,
            pre_finetune_learning_rate: 0.01,
            temperature: 0.1,
            seed: 0,
        }
    }
}

impl NormalizerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.top_k == 0 {
            return fail("normalizer.top_k must be at least 1".into());
        }
        if !ADDITIVE_CHOICES.contains(&self.additive_k) {
            return fail(format!(
                "normalizer.additive_k must be one of {ADDITIVE_CHOICES:?}"
            ));
        }
        if self.additive_k >= self.top_k {
            return fail("normalizer.additive_k must be smaller than top_k".into());
        }
        if self.batch_size == 0 || self.refresh_every == 0 || self.pre_finetune_batch_size == 0 {
            return fail("normalizer batch sizes and refresh_every must be positive".into());
        }
        if !(self.learning_rate > 0.0
            && self.pre_finetune_learning_rate > 0.0
            && self.temperature > 0.0)
        {
            return fail("normalizer learning rates and temperature must be positive".into());
        }
        if self.ngram_sizes.is_empty() || self.ngram_sizes.contains(&0) {
            return fail("normalizer.ngram_sizes must be nonempty and positive".into());
        }
        self.dense.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredCandidate {
    pub surface: String,
    pub hpo_id: HpoId,
    pub s_sparse: f64,
    pub s_dense: f64,
    pub score: f64,
    pub is_positive: bool,
}

impl ScoredCandidate {
    /// Ranking order: score descending, then `(hpo_id, surface)` ascending.
    pub fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then_with(|| self.hpo_id.cmp(&other.hpo_id))
            .then_with(|| self.surface.cmp(&other.surface))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateSet {
    pub mention_surface: String,
    pub gold_id: Option<HpoId>,
    pub candidates: Vec<ScoredCandidate>,
}

impl CandidateSet {
    pub fn positives(&self) -> usize {
        self.candidates.iter().filter(|c| c.is_positive).count()
    }
}

/// Scores one mention against one dictionary entry from scratch.
pub fn score_pair(
    mention: &str,
    entry: &DictEntry,
    dense: &DenseEncoder,
    sparse: &SparseEncoder,
    lambda: f64,
) -> ScoredCandidate {
    let s_dense = dense::dot(
        dense.embed(mention).view(),
        dense.embed(&entry.surface).view(),
    );
    let s_sparse = sparse::sparse_dot(&sparse.encode(mention), &sparse.encode(&entry.surface));
    ScoredCandidate {
        surface: entry.surface.clone(),
        hpo_id: entry.hpo_id.clone(),
        s_sparse,
        s_dense,
        score: s_dense + lambda * s_sparse,
        is_positive: false,
    }
}

/// `-log` of the softmax mass on positive candidates; 0 when none is positive.
pub fn marginal_loss(cs: &CandidateSet) -> f64 {
    let scores: Vec<f64> = cs.candidates.iter().map(|c| c.score).collect();
    let pos: Vec<f64> = cs
        .candidates
        .iter()
        .filter(|c| c.is_positive)
        .map(|c| c.score)
        .collect();
    if pos.is_empty() {
        return 0.0;
    }
    (nn::log_sum_exp(&scores) - nn::log_sum_exp(&pos)).max(0.0)
}

/// A dictionary indexed under fixed encoders.
#[derive(Debug, Clone)]
pub struct Normalizer {
    pub config: NormalizerConfig,
    pub sparse: SparseEncoder,
    pub dense: DenseEncoder,
    pub lambda: f64,
    dictionary: FlatDictionary,
    dict_dense: Array2<f64>,
    dict_sparse: Vec<SparseVec>,
}

impl Normalizer {
    pub fn new(
        config: NormalizerConfig,
        dictionary: FlatDictionary,
        sparse: SparseEncoder,
        dense: DenseEncoder,
        lambda: f64,
    ) -> Result<Self> {
        config.validate()?;
        if dictionary.is_empty() {
            return Err(Error::Data("normalization dictionary is empty".into()));
        }
        let dict_sparse = dictionary
            .entries()
            .iter()
            .map(|e| sparse.encode(&e.surface))
            .collect();
        let mut n = Normalizer {
            config,
            sparse,
            dense,
            lambda,
            dictionary,
            dict_dense: Array2::zeros((0, 0)),
            dict_sparse,
        };
        n.refresh();
        Ok(n)
    }

    /// Untrained normalizer: fitted sparse arm, randomly initialized dense arm.
    pub fn untrained(config: NormalizerConfig, dictionary: FlatDictionary) -> Result<Self> {
        let sparse = SparseEncoder::fit(&dictionary, &config.ngram_sizes)?;
        let dense = DenseEncoder::new(config.dense.clone())?;
        let lambda = config.lambda_init;
        Normalizer::new(config, dictionary, sparse, dense, lambda)
    }

    /// Re-embeds the dictionary with the current dense encoder.
    pub fn refresh(&mut self) {
        self.dict_dense = self
            .dense
            .embed_all(self.dictionary.entries().iter().map(|e| e.surface.as_str()));
    }

    pub fn dictionary(&self) -> &FlatDictionary {
        &self.dictionary
    }

    /// Every dictionary entry scored against `mention`, in ranking order.
    pub fn score_all(&self, mention: &str) -> Vec<ScoredCandidate> {
        let q_dense = self.dense.embed(mention);
        let q_sparse = self.sparse.encode(mention);
        let mut out: Vec<ScoredCandidate> = self
            .dictionary
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let s_dense = dense::dot(q_dense.view(), self.dict_dense.row(i));
                let s_sparse = sparse::sparse_dot(&q_sparse, &self.dict_sparse[i]);
                ScoredCandidate {
                    surface: e.surface.clone(),
                    hpo_id: e.hpo_id.clone(),
                    s_sparse,
                    s_dense,
                    score: s_dense + self.lambda * s_sparse,
                    is_positive: false,
                }
            })
            .collect();
        out.sort_by(ScoredCandidate::rank_cmp);
        out
    }

    /// Top-`top_k` candidates. With a gold id and `additive_k > 0`, missing gold
    /// synonyms (up to `additive_k` positives in total) replace the
    /// lowest-ranked non-positives and are appended in ranking order.
    pub fn retrieve(
        &self,
        mention: &str,
        gold: Option<&HpoId>,
        top_k: usize,
        additive_k: usize,
    ) -> CandidateSet {
        let mut all = self.score_all(mention);
        if let Some(g) = gold {
            all.iter_mut().for_each(|c| c.is_positive = &c.hpo_id == g);
        }
        let rest = all.split_off(top_k.min(all.len()));
        let mut top = all;
        if gold.is_some() && additive_k > 0 {
            let available = top.iter().chain(&rest).filter(|c| c.is_positive).count();
            let present = top.iter().filter(|c| c.is_positive).count();
            let deficit = additive_k.min(available).saturating_sub(present);
            if deficit > 0 {
                let mut dropped = 0;
                let mut i = top.len();
                while dropped < deficit && i > 0 {
                    i -= 1;
                    if !top[i].is_positive {
                        top.remove(i);
                        dropped += 1;
                    }
                }
                top.extend(rest.into_iter().filter(|c| c.is_positive).take(dropped));
            }
        }
        CandidateSet {
            mention_surface: mention.to_string(),
            gold_id: gold.cloned(),
            candidates: top,
        }
    }

    /// Best-scoring id for a surface string.
    pub fn normalize_text(&self, surface: &str) -> Result<(HpoId, f64)> {
        self.score_all(surface)
            .into_iter()
            .next()
            .map(|c| (c.hpo_id, c.score))
            .ok_or_else(|| Error::Data("normalization dictionary is empty".into()))
    }

    /// Best-scoring id for a mention of `text`.
    pub fn normalize(&self, mention: &Mention, text: &str) -> Result<(HpoId, f64)> {
        self.normalize_text(&mention.text(text)?)
    }

    /// Writes config, dense blob, idf table, lambda and dictionary checksum.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, body: String| {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        put("config.json", serde_json::to_string_pretty(&self.config)?)?;
        put("sparse_idf.tsv", self.sparse.to_tsv())?;
        put("lambda", format!("{:?}\n", self.lambda))?;
        put(
            "dictionary.sha256",
            format!("{}\n", self.dictionary.checksum()),
        )?;
        nn::write_blob(&self.dense, &dir.join("dense.bin"))
    }

    /// Loads an artifact saved by [`save`](Self::save); refuses a dictionary
    /// other than the one it was trained against.
    pub fn load(dir: &Path, dictionary: FlatDictionary) -> Result<Self> {
        let get = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let expected = get("dictionary.sha256")?;
        let actual = dictionary.checksum();
        if expected.trim() != actual {
            return Err(Error::Validation(format!(
                "normalizer in {} was trained against dictionary {}, got {actual}",
                dir.display(),
                expected.trim()
            )));
        }
        let config: NormalizerConfig = serde_json::from_str(&get("config.json")?)?;
        let sparse = SparseEncoder::from_tsv(&get("sparse_idf.tsv")?)?;
        let raw = get("lambda")?;
        let lambda: f64 = raw
            .trim()
            .parse()
            .map_err(|_| Error::Validation(format!("bad lambda value {:?}", raw.trim())))?;
        let mut dense = DenseEncoder::new(config.dense.clone())?;
        nn::read_blob(&mut dense, &dir.join("dense.bin"))?;
        Normalizer::new(config, dictionary, sparse, dense, lambda)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn id(n: usize) -> HpoId {
        HpoId::new(format!("HP:{n:07}")).unwrap()
    }

    fn dict(pairs: &[(&str, usize)]) -> FlatDictionary {
        FlatDictionary::new(
            pairs.iter().map(|&(s, n)| DictEntry {
                surface: s.into(),
                hpo_id: id(n),
            }),
            "t",
        )
    }

    fn small_config() -> NormalizerConfig {
        NormalizerConfig {
            dense: DenseConfig {
                dim: 16,
                buckets: 256,
                seed: 1,
            },
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(NormalizerConfig::default().validate().is_ok());
        for bad in [
            NormalizerConfig {
                top_k: 0,
                ..Default::default()
            },
            NormalizerConfig {
                additive_k: 2,
                ..Default::default()
            },
            NormalizerConfig {
                top_k: 1,
                additive_k: 1,
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn identity_scores_one_plus_lambda() {
        let d = dict(&[("long toe", 1), ("short neck", 2)]);
        let n = Normalizer::untrained(small_config(), d.clone()).unwrap();
        let c = score_pair("long toe", &d.entries()[0], &n.dense, &n.sparse, 0.7);
        assert!((c.score - 1.7).abs() < 1e-12);
        let c0 = score_pair("long toe", &d.entries()[1], &n.dense, &n.sparse, 0.0);
        assert_eq!(c0.score, c0.s_dense);
    }

    #[test]
    fn marginal_loss_examples() {
        let cand = |score: f64, pos: bool| ScoredCandidate {
            surface: "x".into(),
            hpo_id: id(1),
            s_sparse: 0.0,
            s_dense: score,
            score,
            is_positive: pos,
        };
        let cs = |c: Vec<ScoredCandidate>| CandidateSet {
            mention_surface: "m".into(),
            gold_id: Some(id(1)),
            candidates: c,
        };
        assert_eq!(
            marginal_loss(&cs(vec![cand(0.3, true), cand(-1.0, true)])),
            0.0
        );
        let half = marginal_loss(&cs(vec![cand(0.5, true), cand(0.5, false)]));
        assert!((half - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(marginal_loss(&cs(vec![cand(0.5, false)])), 0.0);
    }

    #[test]
    fn normalize_prefers_close_surface_and_breaks_ties_by_id() {
        let d = dict(&[
            ("long toe", 5),
            ("short neck", 6),
            ("cleft palate", 7),
            ("same", 9),
            ("same", 8),
        ]);
        let n = Normalizer::untrained(small_config(), d).unwrap();
        assert_eq!(n.normalize_text("short neck").unwrap().0, id(6));
        assert_eq!(n.normalize_text("long toes").unwrap().0, id(5));
        assert_eq!(n.normalize_text("same").unwrap().0, id(8));
    }

    fn toy_25() -> FlatDictionary {
        let mut pairs: Vec<(String, usize)> = (0..24)
            .map(|i| (format!("finding number {i}"), 100 + i))
            .collect();
        pairs.push(("zzz qqq".into(), 1));
        FlatDictionary::new(
            pairs.into_iter().map(|(s, n)| DictEntry {
                surface: s,
                hpo_id: id(n),
            }),
            "t",
        )
    }

    #[test]
    fn additive_injection_displaces_last_candidate() {
        let cfg = NormalizerConfig {
            top_k: 20,
            ..small_config()
        };
        let n = Normalizer::untrained(cfg, toy_25()).unwrap();
        let plain = n.retrieve("finding number", Some(&id(1)), 20, 0);
        assert_eq!(plain.positives(), 0);
        let injected = n.retrieve("finding number", Some(&id(1)), 20, 1);
        assert_eq!(injected.candidates.len(), 20);
        assert_eq!(injected.candidates[..19], plain.candidates[..19]);
        assert_eq!(injected.candidates[19].hpo_id, id(1));
        assert!(injected.candidates[19].is_positive);

        let top = n.retrieve("finding number 3", Some(&id(103)), 20, 1);
        assert!(top.candidates[0].is_positive);
        let mut unlabeled = n.retrieve("finding number 3", None, 20, 0);
        unlabeled
            .candidates
            .iter_mut()
            .for_each(|c| c.is_positive = c.hpo_id == id(103));
        assert_eq!(top.candidates, unlabeled.candidates);
    }

    #[test]
    fn small_dictionary_returns_everything() {
        let n = Normalizer::untrained(small_config(), dict(&[("a b", 1), ("c d", 2)])).unwrap();
        assert_eq!(n.retrieve("a", None, 20, 0).candidates.len(), 2);
    }

    #[test]
    fn larger_lambda_never_demotes_best_sparse_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let words = [
            "long", "short", "broad", "toe", "nose", "ear", "thin", "lip",
        ];
        let pairs: Vec<(String, usize)> = (0..30)
            .map(|i| {
                let a = words[rng.random_range(0..words.len())];
                let b = words[rng.random_range(0..words.len())];
                (format!("{a} {b}"), i + 1)
            })
            .collect();
        let d = FlatDictionary::new(
            pairs.into_iter().map(|(s, n)| DictEntry {
                surface: s,
                hpo_id: id(n),
            }),
            "t",
        );
        let mut n = Normalizer::untrained(small_config(), d).unwrap();
        let query = "long nose";
        let best_sparse = n
            .score_all(query)
            .into_iter()
            .max_by(|a, b| {
                a.s_sparse
                    .total_cmp(&b.s_sparse)
                    .then_with(|| b.rank_cmp(a))
            })
            .unwrap();
        let mut prev_rank = usize::MAX;
        for lambda in [0.0, 0.5, 1.0, 2.0, 5.0, 20.0] {
            n.lambda = lambda;
            let rank = n
                .score_all(query)
                .iter()
                .position(|c| c.surface == best_sparse.surface && c.hpo_id == best_sparse.hpo_id)
                .unwrap();
            assert!(rank <= prev_rank);
            prev_rank = rank;
        }
    }

    #[test]
    fn artifact_round_trip_and_checksum_guard() {
        let d = dict(&[("long toe", 1), ("short neck", 2)]);
        let n = Normalizer::untrained(small_config(), d.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        n.save(dir.path()).unwrap();
        let back = Normalizer::load(dir.path(), d).unwrap();
        assert_eq!(back.dense, n.dense);
        assert_eq!(back.sparse, n.sparse);
        assert_eq!(back.lambda, n.lambda);
        let other = dict(&[("long toe", 1)]);
        assert!(matches!(
            Normalizer::load(dir.path(), other),
            Err(Error::Validation(_))
        ));
    }
}
