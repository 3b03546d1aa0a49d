//! Dictionary pre-finetuning and synonym-marginalization training.

use std::collections::BTreeMap;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dense::{dot, DenseEncoder, Embedding};
use super::{CandidateSet, Normalizer, NormalizerConfig, SparseEncoder};
use crate::error::{Error, Result};
use crate::nn::{self, Adam, ParamGroup, Parameters};
use crate::ontology::FlatDictionary;
use crate::types::HpoId;

/// Trainable state of the scorer: dense encoder plus the sparse weight.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams {
    pub dense: DenseEncoder,
    pub lambda: f64,
}

impl Parameters for ScorerParams {
    fn tensors(&self) -> Vec<(&'static str, ParamGroup, &[f64])> {
        let mut t = self.dense.tensors();
        t.push((
            "lambda",
            ParamGroup::Head,
            std::slice::from_ref(&self.lambda),
        ));
        t
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, ParamGroup, &mut [f64])> {
        let mut t = self.dense.tensors_mut();
        t.push((
            "lambda",
            ParamGroup::Head,
            std::slice::from_mut(&mut self.lambda),
        ));
        t
    }
}

/// Mean marginal loss over `batch` (skipped sets count as zero) with its
/// gradient. Dense similarities are recomputed from `params`; sparse
/// similarities are taken from the candidate sets.
pub fn marginal_loss_and_grad(
    params: &ScorerParams,
    batch: &[CandidateSet],
) -> (f64, ScorerParams, usize) {
    let mut grads = ScorerParams {
        dense: params.dense.zeros_like(),
        lambda: 0.0,
    };
    let mut total = 0.0;
    let mut skipped = 0;
    let scale = 1.0 / batch.len().max(1) as f64;
    for cs in batch {
        if cs.positives() == 0 || cs.candidates.is_empty() {
            skipped += 1;
            continue;
        }
        let query = params.dense.forward(&cs.mention_surface);
        let mut cache: BTreeMap<&str, Embedding> = BTreeMap::new();
        for c in &cs.candidates {
            cache
                .entry(c.surface.as_str())
                .or_insert_with(|| params.dense.forward(&c.surface));
        }
        let scores: Vec<f64> = cs
            .candidates
            .iter()
            .map(|c| {
                dot(query.vector.view(), cache[c.surface.as_str()].vector.view())
                    + params.lambda * c.s_sparse
            })
            .collect();
        let pos: Vec<f64> = scores
            .iter()
            .zip(&cs.candidates)
            .filter(|(_, c)| c.is_positive)
            .map(|(s, _)| *s)
            .collect();
        let lse_all = nn::log_sum_exp(&scores);
        let lse_pos = nn::log_sum_exp(&pos);
        total += lse_all - lse_pos;

        let mut d_query = Array1::<f64>::zeros(query.vector.len());
        let mut d_cand: BTreeMap<&str, Array1<f64>> = BTreeMap::new();
        for (c, &s) in cs.candidates.iter().zip(&scores) {
            let p = (s - lse_all).exp();
            let q = if c.is_positive {
                (s - lse_pos).exp()
            } else {
                0.0
            };
            let g = (p - q) * scale;
            if g == 0.0 {
                continue;
            }
            let emb = &cache[c.surface.as_str()];
            d_query.scaled_add(g, &emb.vector);
            d_cand
                .entry(c.surface.as_str())
                .or_insert_with(|| Array1::zeros(query.vector.len()))
                .scaled_add(g, &query.vector);
            grads.lambda += g * c.s_sparse;
        }
        params
            .dense
            .backward(&query, d_query.view(), &mut grads.dense);
        for (surface, d) in &d_cand {
            params
                .dense
                .backward(&cache[surface], d.view(), &mut grads.dense);
        }
    }
    (total * scale, grads, skipped)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    pub before: f64,
    pub after: f64,
    /// Metric after each epoch.
    pub per_epoch: Vec<f64>,
}

/// Mean similarity of same-id surface pairs minus mean similarity of
/// different-id pairs.
pub fn alignment_metric(dense: &DenseEncoder, groups: &[Vec<String>]) -> f64 {
    let embedded: Vec<Vec<Array1<f64>>> = groups
        .iter()
        .map(|g| g.iter().map(|s| dense.embed(s)).collect())
        .collect();
    let (mut pos, mut npos, mut neg, mut nneg) = (0.0, 0usize, 0.0, 0usize);
    for (gi, g) in embedded.iter().enumerate() {
        for (a, ea) in g.iter().enumerate() {
            for eb in &g[a + 1..] {
                pos += dot(ea.view(), eb.view());
                npos += 1;
            }
            for h in &embedded[gi + 1..] {
                for eb in h {
                    neg += dot(ea.view(), eb.view());
                    nneg += 1;
                }
            }
        }
    }
    pos / npos.max(1) as f64 - neg / nneg.max(1) as f64
}

fn synonym_groups(dict: &FlatDictionary) -> Vec<Vec<String>> {
    let mut by_id: BTreeMap<&HpoId, Vec<String>> = BTreeMap::new();
    for e in dict.entries() {
        by_id.entry(&e.hpo_id).or_default().push(e.surface.clone());
    }
    by_id.into_values().filter(|g| g.len() >= 2).collect()
}

/// Contrastive alignment of the dense encoder on dictionary synonyms:
/// two surfaces of one id form a positive pair, other ids in the batch are
/// negatives. The alignment metric is measured on held-out ids.
pub fn pre_finetune(
    dense: &DenseEncoder,
    dict: &FlatDictionary,
    cfg: &NormalizerConfig,
) -> Result<(DenseEncoder, AlignmentReport)> {
    let mut groups = synonym_groups(dict);
    if groups.is_empty() {
        return Err(Error::Data(
            "pre-finetuning needs at least one id with two or more synonyms".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_a119);
    groups.shuffle(&mut rng);
    let (held, train) = if groups.len() >= 5 {
        let h = (groups.len() / 5).max(1);
        (groups[..h].to_vec(), groups[h..].to_vec())
    } else {
        (groups.clone(), groups)
    };
    let before = alignment_metric(dense, &held);
    let mut enc = dense.clone();
    let mut per_epoch = Vec::with_capacity(cfg.pre_finetune_epochs);
    let mut adam = Adam::default();
    let tau = cfg.temperature;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.pre_finetune_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.pre_finetune_batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let pairs: Vec<(Embedding, Embedding)> = chunk
                .iter()
                .map(|&g| {
                    let syn = &train[g];
                    let a = rng.random_range(0..syn.len());
                    let mut p = rng.random_range(0..syn.len() - 1);
                    if p >= a {
                        p += 1;
                    }
                    (enc.forward(&syn[a]), enc.forward(&syn[p]))
                })
                .collect();
            let grads = info_nce_grad(&enc, &pairs, tau);
            adam.step(&mut enc, &grads, |_| cfg.pre_finetune_learning_rate);
        }
        per_epoch.push(alignment_metric(&enc, &held));
    }
    let after = per_epoch.last().copied().unwrap_or(before);
    Ok((
        enc,
        AlignmentReport {
            before,
            after,
            per_epoch,
        },
    ))
}

/// Gradient of the symmetric in-batch InfoNCE loss.
fn info_nce_grad(enc: &DenseEncoder, pairs: &[(Embedding, Embedding)], tau: f64) -> DenseEncoder {
    let b = pairs.len();
    let mut logits = vec![vec![0.0; b]; b];
    for (i, (a, _)) in pairs.iter().enumerate() {
        for (j, (_, p)) in pairs.iter().enumerate() {
            logits[i][j] = dot(a.vector.view(), p.vector.view()) / tau;
        }
    }
    let mut g = vec![vec![0.0; b]; b];
    for i in 0..b {
        let row = nn::softmax(&logits[i]);
        let col_in: Vec<f64> = (0..b).map(|k| logits[k][i]).collect();
        let col = nn::softmax(&col_in);
        for j in 0..b {
            g[i][j] += row[j] / (2.0 * b as f64);
            g[j][i] += col[j] / (2.0 * b as f64);
        }
        g[i][i] -= 1.0 / b as f64;
    }
    let dim = enc.dim();
    let mut grads = enc.zeros_like();
    for i in 0..b {
        let mut d_a = Array1::<f64>::zeros(dim);
        let mut d_p = Array1::<f64>::zeros(dim);
        for j in 0..b {
            d_a.scaled_add(g[i][j] / tau, &pairs[j].1.vector);
            d_p.scaled_add(g[j][i] / tau, &pairs[j].0.vector);
        }
        enc.backward(&pairs[i].0, d_a.view(), &mut grads);
        enc.backward(&pairs[i].1, d_p.view(), &mut grads);
    }
    grads
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingStats {
    pub epoch_losses: Vec<f64>,
    pub skipped_per_epoch: Vec<usize>,
}

impl TrainingStats {
    pub fn skipped(&self) -> usize {
        self.skipped_per_epoch.iter().sum()
    }
}

/// Trains the scorer on `(mention surface, gold id)` pairs. Starts from
/// `init` when given (e.g. a pre-finetuned encoder), otherwise from a fresh
/// random encoder.
pub fn train_normalizer(
    train: &[(String, HpoId)],
    dict: &FlatDictionary,
    cfg: &NormalizerConfig,
    init: Option<DenseEncoder>,
) -> Result<(Normalizer, TrainingStats)> {
    cfg.validate()?;
    let missing: Vec<&str> = train
        .iter()
        .filter(|(_, g)| !dict.contains_id(g))
        .map(|(_, g)| g.as_str())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "gold ids absent from the dictionary: {}",
            missing.join(", ")
        )));
    }
    let sparse = SparseEncoder::fit(dict, &cfg.ngram_sizes)?;
    let dense = match init {
        Some(d) => d,
        None => DenseEncoder::new(cfg.dense.clone())?,
    };
    let mut params = ScorerParams {
        dense,
        lambda: cfg.lambda_init,
    };
    let mut index = Normalizer::new(
        cfg.clone(),
        dict.clone(),
        sparse,
        params.dense.clone(),
        params.lambda,
    )?;
    let mut stats = TrainingStats::default();
    let mut adam = Adam::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        if epoch % cfg.refresh_every == 0 {
            index.dense = params.dense.clone();
            index.lambda = params.lambda;
            index.refresh();
        }
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches, mut skipped) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let sets: Vec<CandidateSet> = chunk
                .iter()
                .map(|&i| index.retrieve(&train[i].0, Some(&train[i].1), cfg.top_k, cfg.additive_k))
                .collect();
            let (loss, grads, skip) = marginal_loss_and_grad(&params, &sets);
            adam.step(&mut params, &grads, |_| cfg.learning_rate);
            loss_sum += loss;
            batches += 1;
            skipped += skip;
        }
        let mean = loss_sum / batches.max(1) as f64;
        log::debug!("normalizer epoch {epoch}: loss {mean:.5}, skipped {skipped}");
        stats.epoch_losses.push(mean);
        stats.skipped_per_epoch.push(skipped);
    }
    index.dense = params.dense;
    index.lambda = params.lambda;
    index.refresh();
    Ok((index, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normalize::DenseConfig;
    use crate::ontology::DictEntry;

    fn id(n: usize) -> HpoId {
        HpoId::new(format!("HP:{n:07}")).unwrap()
    }

    fn cfg() -> NormalizerConfig {
        NormalizerConfig {
            top_k: 4,
            epochs: 30,
            batch_size: 4,
            dense: DenseConfig {
                dim: 16,
                buckets: 512,
                seed: 2,
            },
            ..Default::default()
        }
    }

    fn noisy_dict() -> FlatDictionary {
        let heads = [
            "broad nose",
            "long toe",
            "short neck",
            "thin lip",
            "small ear",
            "wide mouth",
            "flat face",
            "deep eye",
            "high palate",
            "low hairline",
            "round chin",
            "narrow jaw",
            "big hand",
            "tiny foot",
            "pale skin",
            "thick brow",
            "sparse hair",
            "short finger",
            "long arm",
            "curved spine",
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut entries = Vec::new();
        for (i, h) in heads.iter().enumerate() {
            entries.push(DictEntry {
                surface: h.to_string(),
                hpo_id: id(i + 1),
            });
            for _ in 0..2 {
                let mut chars: Vec<char> = h.chars().collect();
                let k = rng.random_range(0..chars.len());
                if chars[k] != ' ' {
                    chars.remove(k);
                }
                let noisy: String = chars.into_iter().collect();
                entries.push(DictEntry {
                    surface: format!("{noisy} finding"),
                    hpo_id: id(i + 1),
                });
            }
        }
        FlatDictionary::new(entries, "t")
    }

    #[test]
    fn marginal_loss_gradient_matches_finite_differences() {
        let d = noisy_dict();
        let index = Normalizer::untrained(cfg(), d).unwrap();
        let sets: Vec<CandidateSet> = ["broad nos", "short nek", "tin lip"]
            .iter()
            .zip([1, 3, 4])
            .map(|(q, g)| index.retrieve(q, Some(&id(g)), 5, 1))
            .collect();
        let mut params = ScorerParams {
            dense: index.dense.clone(),
            lambda: 0.8,
        };
        let (_, grads, _) = marginal_loss_and_grad(&params, &sets);
        let h = 1e-6;
        let n = params.num_params();
        let mut checked = 0;
        for idx in (0..n).filter(|&i| grads.get_flat(i) != 0.0 || i == n - 1) {
            let orig = params.get_flat(idx);
            params.set_flat(idx, orig + h);
            let up = marginal_loss_and_grad(&params, &sets).0;
            params.set_flat(idx, orig - h);
            let down = marginal_loss_and_grad(&params, &sets).0;
            params.set_flat(idx, orig);
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get_flat(idx);
            let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-6);
            assert!(
                rel < 1e-4,
                "param {idx}: numeric {numeric} analytic {analytic}"
            );
            checked += 1;
        }
        assert!(checked > 50);
    }

    #[test]
    fn pre_finetune_raises_alignment() {
        let d = noisy_dict();
        let c = NormalizerConfig {
            pre_finetune_epochs: 20,
            pre_finetune_batch_size: 8,
            ..cfg()
        };
        let start = DenseEncoder::new(c.dense.clone()).unwrap();
        let (_, report) = pre_finetune(&start, &d, &c).unwrap();
        assert!(report.after > report.before, "{report:?}");
    }

    #[test]
    fn pre_finetune_edge_cases() {
        let d = noisy_dict();
        let c = NormalizerConfig {
            pre_finetune_epochs: 0,
            ..cfg()
        };
        let start = DenseEncoder::new(c.dense.clone()).unwrap();
        let (same, report) = pre_finetune(&start, &d, &c).unwrap();
        assert_eq!(same, start);
        assert_eq!(report.before, report.after);
        let singles = FlatDictionary::new(
            (1..4).map(|i| DictEntry {
                surface: format!("term {i}"),
                hpo_id: id(i),
            }),
            "t",
        );
        assert!(matches!(
            pre_finetune(&start, &singles, &c),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn overfits_one_instance() {
        let d = noisy_dict();
        let c = NormalizerConfig {
            epochs: 200,
            batch_size: 1,
            ..cfg()
        };
        let train = vec![("shrt neck".to_string(), id(3))];
        let (n, stats) = train_normalizer(&train, &d, &c, None).unwrap();
        assert!(
            stats.epoch_losses.last().unwrap() < &0.05,
            "{:?}",
            stats.epoch_losses.last()
        );
        assert_eq!(n.normalize_text("shrt neck").unwrap().0, id(3));
        assert_eq!(stats.skipped(), 0);
    }

    #[test]
    fn unknown_gold_id_is_reported() {
        let train = vec![("x".to_string(), id(999)), ("y".to_string(), id(998))];
        match train_normalizer(&train, &noisy_dict(), &cfg(), None) {
            Err(Error::Data(msg)) => {
                assert!(msg.contains("HP:0000999") && msg.contains("HP:0000998"))
            }
            other => panic!("expected data error, got {other:?}"),
        }
    }
}
