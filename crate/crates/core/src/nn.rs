//! Minimal numeric machinery shared by the trainable models: parameter
//! visiting, Adam, softmax helpers, feature hashing and parameter blobs.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr_lite::normal;

use crate::error::{Error, Result};

/// Learning-rate group of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Head,
}

/// A model (or gradient buffer) exposed as a fixed, ordered list of flat tensors.
pub trait Parameters {
    fn tensors(&self) -> Vec<(&'static str, ParamGroup, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<(&'static str, ParamGroup, &mut [f64])>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    fn fill_zero(&mut self) {
        for (_, _, t) in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    fn scale(&mut self, factor: f64) {
        for (_, _, t) in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// `self += other`, tensor by tensor.
    fn add_assign(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for ((_, _, dst), (_, _, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }

    /// All values flattened in tensor order.
    fn flat(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, _, t)| t.iter().copied())
            .collect()
    }

    fn get_flat(&self, index: usize) -> f64 {
        let mut i = index;
        for (_, _, t) in self.tensors() {
            if i < t.len() {
                return t[i];
            }
            i -= t.len();
        }
        panic!("parameter index {index} out of range")
    }

    fn set_flat(&mut self, index: usize, value: f64) {
        let mut i = index;
        for (_, _, t) in self.tensors_mut() {
            if i < t.len() {
                t[i] = value;
                return;
            }
            i -= t.len();
        }
        panic!("parameter index {index} out of range")
    }
}

pub(crate) fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

pub(crate) fn slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

pub(crate) fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

pub(crate) fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

/// Gaussian-initialized matrix with the given standard deviation.
pub fn init_matrix<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| normal(rng) * std)
}

/// Adam with bias correction and per-group learning rates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    pub fn step<P: Parameters>(
        &mut self,
        params: &mut P,
        grads: &P,
        lr: impl Fn(ParamGroup) -> f64,
    ) {
        let grads = grads.tensors();
        if self.m.is_empty() {
            self.m = grads.iter().map(|(_, _, g)| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, (_, group, p)) in params.tensors_mut().into_iter().enumerate() {
            let rate = lr(group);
            let g = grads[k].2;
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Numerically stable `log(sum(exp(xs)))`; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn bucket(feature: &str, buckets: usize) -> usize {
    (fnv1a(feature.as_bytes()) % buckets as u64) as usize
}

/// Character n-grams of `s` padded with `<` and `>`.
pub fn padded_char_ngrams(s: &str, n: usize) -> Vec<String> {
    let chars: Vec<char> = std::iter::once('<')
        .chain(s.chars())
        .chain(std::iter::once('>'))
        .collect();
    if chars.len() < n {
        return vec![chars.iter().collect()];
    }
    chars.windows(n).map(|w| w.iter().collect()).collect()
}

const BLOB_MAGIC: &[u8; 8] = b"PPBLOB01";

/// Writes every tensor as little-endian `f64`s after a magic header and count.
pub fn write_blob<P: Parameters>(params: &P, path: &Path) -> Result<()> {
    let flat = params.flat();
    let mut bytes = Vec::with_capacity(16 + flat.len() * 8);
    bytes.extend_from_slice(BLOB_MAGIC);
    bytes.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for x in flat {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Fills `params` (already shaped) from a blob written by [`write_blob`].
pub fn read_blob<P: Parameters>(params: &mut P, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != BLOB_MAGIC {
        return Err(Error::Validation(format!(
            "{} is not a parameter blob",
            path.display()
        )));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if count != params.num_params() || bytes.len() != 16 + count * 8 {
        return Err(Error::Validation(format!(
            "{} holds {count} parameters, model expects {}",
            path.display(),
            params.num_params()
        )));
    }
    let mut values = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for (_, _, t) in params.tensors_mut() {
        for x in t.iter_mut() {
            *x = values.next().expect("length checked");
        }
    }
    Ok(())
}

/// Box-Muller standard normal sampling, kept local to avoid a distribution crate.
mod rand_distr_lite {
    use rand::Rng;

    pub fn normal<R: Rng>(rng: &mut R) -> f64 {
        let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        let p = softmax(&[0.0, 0.0]);
        assert!((p[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn ngrams_are_padded() {
        assert_eq!(padded_char_ngrams("ab", 3), vec!["<ab", "ab>"]);
        assert_eq!(padded_char_ngrams("", 3), vec!["<>"]);
    }
}
