//! Hashed embedding-bag encoder: word and character-trigram features summed
//! into a fixed-size vector, then L2-normalized.

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, init_matrix, slice2, slice2_mut, ParamGroup, Parameters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenseConfig {
    pub dim: usize,
    pub buckets: usize,
    pub seed: u64,
}

impl Default for DenseConfig {
    fn default() -> Self {
        DenseConfig {
            dim: 64,
            buckets: 8192,
            seed: 0,
        }
    }
}

impl DenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.buckets == 0 {
            return Err(Error::Config(
                "dense.dim and dense.buckets must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseEncoder {
    pub config: DenseConfig,
    pub table: Array2<f64>,
}

/// Forward state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Embedding {
    features: Vec<(usize, f64)>,
    norm: f64,
    pub vector: Array1<f64>,
}

impl Parameters for DenseEncoder {
    fn tensors(&self) -> Vec<(&'static str, ParamGroup, &[f64])> {
        vec![("dense.table", ParamGroup::Encoder, slice2(&self.table))]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, ParamGroup, &mut [f64])> {
        vec![(
            "dense.table",
            ParamGroup::Encoder,
            slice2_mut(&mut self.table),
        )]
    }
}

/// Sequential dot product; every similarity in the normalizer goes through it
/// so that scores computed along different paths are bit-identical.
pub fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

impl DenseEncoder {
    pub fn new(config: DenseConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let table = init_matrix(
            config.buckets,
            config.dim,
            1.0 / (config.dim as f64).sqrt(),
            &mut rng,
        );
        Ok(DenseEncoder { config, table })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Bucketed features with summed weights, sorted by bucket.
    pub fn features(&self, surface: &str) -> Vec<(usize, f64)> {
        let lower = surface.to_lowercase();
        let mut raw: Vec<(usize, f64)> = Vec::new();
        for word in lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
        {
            raw.push((nn::bucket(&format!("w:{word}"), self.config.buckets), 1.0));
            let grams = nn::padded_char_ngrams(word, 3);
            let w = 1.0 / grams.len() as f64;
            for g in grams {
                raw.push((nn::bucket(&format!("c:{g}"), self.config.buckets), w));
            }
        }
        raw.sort_by_key(|&(b, _)| b);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(raw.len());
        for (b, w) in raw {
            match merged.last_mut() {
                Some(last) if last.0 == b => last.1 += w,
                _ => merged.push((b, w)),
            }
        }
        merged
    }

    pub fn forward(&self, surface: &str) -> Embedding {
        let features = self.features(surface);
        let mut raw = Array1::<f64>::zeros(self.config.dim);
        for &(b, w) in &features {
            raw.scaled_add(w, &self.table.row(b));
        }
        let norm = dot(raw.view(), raw.view()).sqrt();
        let vector = if norm > 0.0 { raw / norm } else { raw };
        Embedding {
            features,
            norm,
            vector,
        }
    }

    /// Unit-length embedding (zero for surfaces without features).
    pub fn embed(&self, surface: &str) -> Array1<f64> {
        self.forward(surface).vector
    }

    /// Embeds every surface into the rows of a matrix.
    pub fn embed_all<'a>(&self, surfaces: impl IntoIterator<Item = &'a str>) -> Array2<f64> {
        let rows: Vec<Array1<f64>> = surfaces.into_iter().map(|s| self.embed(s)).collect();
        let mut out = Array2::zeros((rows.len(), self.config.dim));
        for (i, r) in rows.iter().enumerate() {
            out.row_mut(i).assign(r);
        }
        out
    }

    /// Accumulates into `grads` the gradient of a loss whose derivative with
    /// respect to the unit output is `d_out`.
    pub fn backward(&self, emb: &Embedding, d_out: ArrayView1<f64>, grads: &mut DenseEncoder) {
        if emb.norm == 0.0 {
            return;
        }
        let along = dot(emb.vector.view(), d_out);
        let d_raw = (&d_out - &(&emb.vector * along)) / emb.norm;
        for &(b, w) in &emb.features {
            grads.table.row_mut(b).scaled_add(w, &d_raw);
        }
    }

    pub fn zeros_like(&self) -> DenseEncoder {
        DenseEncoder {
            config: self.config.clone(),
            table: Array2::zeros(self.table.raw_dim()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DenseEncoder {
        DenseEncoder::new(DenseConfig {
            dim: 8,
            buckets: 64,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn output_is_unit_length_and_deterministic() {
        let enc = small();
        let a = enc.embed("Long toes");
        assert_eq!(a.len(), 8);
        assert!((dot(a.view(), a.view()) - 1.0).abs() < 1e-12);
        assert_eq!(a, enc.embed("long   toes"));
        assert!(enc.embed("").iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_through_normalization() {
        let mut enc = small();
        let probe = Array1::from_shape_fn(8, |i| (i as f64 * 0.7).sin());
        let f = |e: &DenseEncoder| dot(e.embed("broad nose").view(), probe.view());
        let emb = enc.forward("broad nose");
        let mut grads = enc.zeros_like();
        enc.backward(&emb, probe.view(), &mut grads);
        let h = 1e-6;
        for idx in (0..enc.num_params()).step_by(5) {
            let g = grads.get_flat(idx);
            let orig = enc.get_flat(idx);
            enc.set_flat(idx, orig + h);
            let up = f(&enc);
            enc.set_flat(idx, orig - h);
            let down = f(&enc);
            enc.set_flat(idx, orig);
            let numeric = (up - down) / (2.0 * h);
            let rel = (numeric - g).abs() / (numeric.abs() + g.abs()).max(1e-6);
            assert!(rel < 1e-4, "param {idx}: {numeric} vs {g}");
        }
    }
}
