//! Trainable word-pair grid tagger.
//!
//! A token encoder produces one vector per token; a pair head scores every
//! ordered token pair over the four [`GridLabel`]s. Training minimizes the
//! mean per-cell cross-entropy against [`encode_entities`] targets.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grid::{decode_grid, encode_entities, GridLabel, WordPairGrid};
use super::ExtractionBackend;
use crate::error::{Error, Result};
use crate::nn::{
    self, init_matrix, slice1, slice1_mut, slice2, slice2_mut, Adam, ParamGroup, Parameters,
};
use crate::preprocess::{project_to_original, PreparedText};
use crate::types::{AnnotationSet, Category, Consultation, Mention, Sentence, Token};

const REGIONS: usize = 3;
const DISTANCE_BUCKETS: usize = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridModelConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub encoder_learning_rate: f64,
    pub dropout: f64,
    pub token_encoder: String,
    pub word_dim: usize,
    pub hidden_dim: usize,
    pub pair_dim: usize,
    pub char_buckets: usize,
    pub region_features: bool,
    pub distance_features: bool,
    /// Drop NORMAL_FINDING mentions from the training targets.
    pub key_only: bool,
    pub seed: u64,
}

impl Default for GridModelConfig {
    fn default() -> Self {
        GridModelConfig {
            epochs: 15,
            batch_size: 8,
            learning_rate: 1e-3,
            encoder_learning_rate: 5e-5,
            dropout: 0.3,
            token_encoder: "birnn".into(),
            word_dim: 32,
            hidden_dim: 32,
            pair_dim: 64,
            char_buckets: 1024,
            region_features: false,
            distance_features: false,
            key_only: true,
            seed: 0,
        }
    }
}

impl GridModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("word_dim", self.word_dim),
            ("hidden_dim", self.hidden_dim),
            ("pair_dim", self.pair_dim),
            ("char_buckets", self.char_buckets),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("grid.{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0 && self.encoder_learning_rate > 0.0) {
            return Err(Error::Config("grid learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "grid.dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.token_encoder != "birnn" {
            return Err(Error::Config(format!(
                "unknown token encoder {:?} (available: birnn)",
                self.token_encoder
            )));
        }
        Ok(())
    }
}

/// Pluggable per-token encoder. Parameters live outside the encoder so the
/// same type doubles as a gradient buffer.
pub trait TokenEncoder {
    type Params: Parameters + Clone;
    type Cache;

    fn output_dim(&self) -> usize;
    fn forward(&self, params: &Self::Params, tokens: &[Token]) -> (Array2<f64>, Self::Cache);
    fn backward(
        &self,
        params: &Self::Params,
        cache: &Self::Cache,
        d_out: &Array2<f64>,
        grads: &mut Self::Params,
    );
}

/// Word + hashed char-trigram embeddings feeding a bidirectional tanh RNN.
#[derive(Debug, Clone, PartialEq)]
pub struct BiRnnEncoder {
    vocab: BTreeMap<String, usize>,
    words: Vec<String>,
    char_buckets: usize,
    hidden_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiRnnParams {
    pub word_emb: Array2<f64>,
    pub char_emb: Array2<f64>,
    pub fwd_in: Array2<f64>,
    pub fwd_rec: Array2<f64>,
    pub fwd_bias: Array1<f64>,
    pub bwd_in: Array2<f64>,
    pub bwd_rec: Array2<f64>,
    pub bwd_bias: Array1<f64>,
}

impl Parameters for BiRnnParams {
    fn tensors(&self) -> Vec<(&'static str, ParamGroup, &[f64])> {
        use ParamGroup::Encoder as E;
        vec![
            ("word_emb", E, slice2(&self.word_emb)),
            ("char_emb", E, slice2(&self.char_emb)),
            ("fwd_in", E, slice2(&self.fwd_in)),
            ("fwd_rec", E, slice2(&self.fwd_rec)),
            ("fwd_bias", E, slice1(&self.fwd_bias)),
            ("bwd_in", E, slice2(&self.bwd_in)),
            ("bwd_rec", E, slice2(&self.bwd_rec)),
            ("bwd_bias", E, slice1(&self.bwd_bias)),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, ParamGroup, &mut [f64])> {
        use ParamGroup::Encoder as E;
        vec![
            ("word_emb", E, slice2_mut(&mut self.word_emb)),
            ("char_emb", E, slice2_mut(&mut self.char_emb)),
            ("fwd_in", E, slice2_mut(&mut self.fwd_in)),
            ("fwd_rec", E, slice2_mut(&mut self.fwd_rec)),
            ("fwd_bias", E, slice1_mut(&mut self.fwd_bias)),
            ("bwd_in", E, slice2_mut(&mut self.bwd_in)),
            ("bwd_rec", E, slice2_mut(&mut self.bwd_rec)),
            ("bwd_bias", E, slice1_mut(&mut self.bwd_bias)),
        ]
    }
}

pub struct BiRnnCache {
    ids: Vec<usize>,
    chars: Vec<Vec<usize>>,
    x: Array2<f64>,
    fwd: Array2<f64>,
    bwd: Array2<f64>,
}

impl BiRnnEncoder {
    /// Vocabulary from `words` (lowercased, deduplicated); id 0 is reserved for unknown words.
    pub fn new<'a>(
        words: impl IntoIterator<Item = &'a str>,
        char_buckets: usize,
        hidden_dim: usize,
    ) -> Self {
        let mut sorted: Vec<String> = words.into_iter().map(str::to_lowercase).collect();
        sorted.sort();
        sorted.dedup();
        let vocab = sorted
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i + 1))
            .collect();
        BiRnnEncoder {
            vocab,
            words: sorted,
            char_buckets,
            hidden_dim,
        }
    }

    pub fn vocab_words(&self) -> &[String] {
        &self.words
    }

    pub fn init_params<R: Rng>(&self, word_dim: usize, rng: &mut R) -> BiRnnParams {
        let h = self.hidden_dim;
        let rec_std = 1.0 / (h as f64).sqrt();
        let in_std = 1.0 / (word_dim as f64).sqrt();
        BiRnnParams {
            word_emb: init_matrix(self.words.len() + 1, word_dim, 0.3, rng),
            char_emb: init_matrix(self.char_buckets, word_dim, 0.3, rng),
            fwd_in: init_matrix(word_dim, h, in_std, rng),
            fwd_rec: init_matrix(h, h, rec_std * 0.5, rng),
            fwd_bias: Array1::zeros(h),
            bwd_in: init_matrix(word_dim, h, in_std, rng),
            bwd_rec: init_matrix(h, h, rec_std * 0.5, rng),
            bwd_bias: Array1::zeros(h),
        }
    }

    fn token_features(&self, token: &Token) -> (usize, Vec<usize>) {
        let lower = token.surface.to_lowercase();
        let id = self.vocab.get(&lower).copied().unwrap_or(0);
        let chars = nn::padded_char_ngrams(&lower, 3)
            .iter()
            .map(|g| nn::bucket(g, self.char_buckets))
            .collect();
        (id, chars)
    }
}

impl TokenEncoder for BiRnnEncoder {
    type Params = BiRnnParams;
    type Cache = BiRnnCache;

    fn output_dim(&self) -> usize {
        2 * self.hidden_dim
    }

    fn forward(&self, p: &BiRnnParams, tokens: &[Token]) -> (Array2<f64>, BiRnnCache) {
        let n = tokens.len();
        let d = p.word_emb.ncols();
        let h = self.hidden_dim;
        let mut ids = Vec::with_capacity(n);
        let mut chars = Vec::with_capacity(n);
        let mut x = Array2::zeros((n, d));
        for (t, tok) in tokens.iter().enumerate() {
            let (id, grams) = self.token_features(tok);
            let mut row = x.row_mut(t);
            row += &p.word_emb.row(id);
            let w = 1.0 / grams.len() as f64;
            for &g in &grams {
                row.scaled_add(w, &p.char_emb.row(g));
            }
            ids.push(id);
            chars.push(grams);
        }
        let xin_f = x.dot(&p.fwd_in);
        let xin_b = x.dot(&p.bwd_in);
        let mut fwd = Array2::zeros((n, h));
        let mut bwd = Array2::zeros((n, h));
        for t in 0..n {
            let mut pre = xin_f.row(t).to_owned() + &p.fwd_bias;
            if t > 0 {
                pre += &fwd.row(t - 1).dot(&p.fwd_rec);
            }
            fwd.row_mut(t).assign(&pre.mapv(f64::tanh));
        }
        for t in (0..n).rev() {
            let mut pre = xin_b.row(t).to_owned() + &p.bwd_bias;
            if t + 1 < n {
                pre += &bwd.row(t + 1).dot(&p.bwd_rec);
            }
            bwd.row_mut(t).assign(&pre.mapv(f64::tanh));
        }
        let mut out = Array2::zeros((n, 2 * h));
        out.slice_mut(ndarray::s![.., ..h]).assign(&fwd);
        out.slice_mut(ndarray::s![.., h..]).assign(&bwd);
        (
            out,
            BiRnnCache {
                ids,
                chars,
                x,
                fwd,
                bwd,
            },
        )
    }

    fn backward(&self, p: &BiRnnParams, c: &BiRnnCache, d_out: &Array2<f64>, g: &mut BiRnnParams) {
        let n = c.ids.len();
        let h = self.hidden_dim;
        let d_fwd = d_out.slice(ndarray::s![.., ..h]);
        let d_bwd = d_out.slice(ndarray::s![.., h..]);
        let mut dx = Array2::<f64>::zeros(c.x.raw_dim());

        let mut carry = Array1::<f64>::zeros(h);
        for t in (0..n).rev() {
            let dh = &d_fwd.row(t) + &carry;
            let da = dh * c.fwd.row(t).mapv(|v| 1.0 - v * v);
            outer_add(&mut g.fwd_in, c.x.row(t), da.view());
            g.fwd_bias += &da;
            if t > 0 {
                outer_add(&mut g.fwd_rec, c.fwd.row(t - 1), da.view());
            }
            carry = p.fwd_rec.dot(&da);
            dx.row_mut(t).scaled_add(1.0, &p.fwd_in.dot(&da));
        }
        let mut carry = Array1::<f64>::zeros(h);
        for t in 0..n {
            let dh = &d_bwd.row(t) + &carry;
            let da = dh * c.bwd.row(t).mapv(|v| 1.0 - v * v);
            outer_add(&mut g.bwd_in, c.x.row(t), da.view());
            g.bwd_bias += &da;
            if t + 1 < n {
                outer_add(&mut g.bwd_rec, c.bwd.row(t + 1), da.view());
            }
            carry = p.bwd_rec.dot(&da);
            dx.row_mut(t).scaled_add(1.0, &p.bwd_in.dot(&da));
        }
        for t in 0..n {
            g.word_emb.row_mut(c.ids[t]).scaled_add(1.0, &dx.row(t));
            let w = 1.0 / c.chars[t].len() as f64;
            for &b in &c.chars[t] {
                g.char_emb.row_mut(b).scaled_add(w, &dx.row(t));
            }
        }
    }
}

/// `m += a^T b` for row vectors `a`, `b`.
fn outer_add(m: &mut Array2<f64>, a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) {
    for (i, &ai) in a.iter().enumerate() {
        if ai != 0.0 {
            m.row_mut(i).scaled_add(ai, &b);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub left: Array2<f64>,
    pub right: Array2<f64>,
    pub product: Array2<f64>,
    pub bias: Array1<f64>,
    pub region: Array2<f64>,
    pub distance: Array2<f64>,
    pub out: Array2<f64>,
    pub out_bias: Array1<f64>,
}

impl HeadParams {
    fn init<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let in_std = 1.0 / (input as f64).sqrt();
        HeadParams {
            left: init_matrix(input, hidden, in_std, rng),
            right: init_matrix(input, hidden, in_std, rng),
            product: init_matrix(input, hidden, in_std, rng),
            bias: Array1::zeros(hidden),
            region: init_matrix(REGIONS, hidden, 0.1, rng),
            distance: init_matrix(DISTANCE_BUCKETS, hidden, 0.1, rng),
            out: init_matrix(hidden, GridLabel::COUNT, 1.0 / (hidden as f64).sqrt(), rng),
            out_bias: Array1::zeros(GridLabel::COUNT),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridParams<P> {
    pub encoder: P,
    pub head: HeadParams,
}

impl<P: Parameters> Parameters for GridParams<P> {
    fn tensors(&self) -> Vec<(&'static str, ParamGroup, &[f64])> {
        use ParamGroup::Head as H;
        let h = &self.head;
        let mut out = self.encoder.tensors();
        out.extend([
            ("head.left", H, slice2(&h.left)),
            ("head.right", H, slice2(&h.right)),
            ("head.product", H, slice2(&h.product)),
            ("head.bias", H, slice1(&h.bias)),
            ("head.region", H, slice2(&h.region)),
            ("head.distance", H, slice2(&h.distance)),
            ("head.out", H, slice2(&h.out)),
            ("head.out_bias", H, slice1(&h.out_bias)),
        ]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, ParamGroup, &mut [f64])> {
        use ParamGroup::Head as H;
        let h = &mut self.head;
        let mut out = self.encoder.tensors_mut();
        out.extend([
            ("head.left", H, slice2_mut(&mut h.left)),
            ("head.right", H, slice2_mut(&mut h.right)),
            ("head.product", H, slice2_mut(&mut h.product)),
            ("head.bias", H, slice1_mut(&mut h.bias)),
            ("head.region", H, slice2_mut(&mut h.region)),
            ("head.distance", H, slice2_mut(&mut h.distance)),
            ("head.out", H, slice2_mut(&mut h.out)),
            ("head.out_bias", H, slice1_mut(&mut h.out_bias)),
        ]);
        out
    }
}

fn region_of(i: usize, j: usize) -> usize {
    match i.cmp(&j) {
        std::cmp::Ordering::Less => 0,
        std::cmp::Ordering::Equal => 1,
        std::cmp::Ordering::Greater => 2,
    }
}

/// Signed log-scale bucket of `j - i`.
fn distance_bucket(i: usize, j: usize) -> usize {
    let d = j as isize - i as isize;
    let mag = match d.unsigned_abs() {
        0 => return 0,
        1 => 1,
        2 => 2,
        3..=4 => 3,
        5..=8 => 4,
        _ => 5,
    };
    if d > 0 {
        mag
    } else {
        mag + 5
    }
}

struct Pass<C> {
    n: usize,
    reps: Array2<f64>,
    enc: C,
    prod: Array2<f64>,
    act: Array2<f64>,
    mask: Option<Array2<f64>>,
    dropped: Array2<f64>,
    probs: Array2<f64>,
}

/// One training example: tokens plus the target grid.
pub type GridExample<'a> = (&'a [Token], &'a WordPairGrid);

#[derive(Debug, Clone)]
pub struct GridModel<E: TokenEncoder = BiRnnEncoder> {
    pub config: GridModelConfig,
    pub encoder: E,
    params: GridParams<E::Params>,
    epoch_losses: Vec<f64>,
}

impl GridModel<BiRnnEncoder> {
    /// Untrained model over the given vocabulary.
    pub fn new<'a>(
        config: GridModelConfig,
        vocab: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self> {
        config.validate()?;
        let encoder = BiRnnEncoder::new(vocab, config.char_buckets, config.hidden_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let enc_params = encoder.init_params(config.word_dim, &mut rng);
        let head = HeadParams::init(encoder.output_dim(), config.pair_dim, &mut rng);
        Ok(GridModel {
            config,
            encoder,
            params: GridParams {
                encoder: enc_params,
                head,
            },
            epoch_losses: Vec::new(),
        })
    }

    /// Writes `config.json`, `params.bin` and `vocab.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = serde_json::to_string_pretty(&self.config)?;
        write_file(&dir.join("config.json"), cfg.as_bytes())?;
        let mut vocab = String::new();
        for w in self.encoder.vocab_words() {
            vocab.push_str(w);
            vocab.push('\n');
        }
        write_file(&dir.join("vocab.txt"), vocab.as_bytes())?;
        nn::write_blob(&self.params, &dir.join("params.bin"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("config.json");
        let raw = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config: GridModelConfig = serde_json::from_str(&raw)?;
        let vocab_path = dir.join("vocab.txt");
        let vocab = std::fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        let mut model = GridModel::new(config, vocab.lines())?;
        nn::read_blob(&mut model.params, &dir.join("params.bin"))?;
        Ok(model)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

impl<E: TokenEncoder> GridModel<E> {
    pub fn params(&self) -> &GridParams<E::Params> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut GridParams<E::Params> {
        &mut self.params
    }

    /// Mean training loss of each epoch, in order.
    pub fn epoch_losses(&self) -> &[f64] {
        &self.epoch_losses
    }

    fn forward(&self, tokens: &[Token], dropout_rng: Option<&mut ChaCha8Rng>) -> Pass<E::Cache> {
        let n = tokens.len();
        let hp = &self.params.head;
        let (reps, enc) = self.encoder.forward(&self.params.encoder, tokens);
        let dim = reps.ncols();
        let left = reps.dot(&hp.left);
        let right = reps.dot(&hp.right);
        let mut prod = Array2::zeros((n * n, dim));
        for i in 0..n {
            for j in 0..n {
                let cell = &reps.row(i) * &reps.row(j);
                prod.row_mut(i * n + j).assign(&cell);
            }
        }
        let mut pre = prod.dot(&hp.product);
        for i in 0..n {
            for j in 0..n {
                let mut row = pre.row_mut(i * n + j);
                row += &left.row(i);
                row += &right.row(j);
                row += &hp.bias;
                if self.config.region_features {
                    row += &hp.region.row(region_of(i, j));
                }
                if self.config.distance_features {
                    row += &hp.distance.row(distance_bucket(i, j));
                }
            }
        }
        let act = pre.mapv(f64::tanh);
        let (mask, dropped) = match dropout_rng {
            Some(rng) if self.config.dropout > 0.0 => {
                let keep = 1.0 - self.config.dropout;
                let mask = Array2::from_shape_fn(act.raw_dim(), |_| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                let dropped = &act * &mask;
                (Some(mask), dropped)
            }
            _ => (None, act.clone()),
        };
        let mut logits = dropped.dot(&hp.out);
        logits += &hp.out_bias;
        let mut probs = logits;
        for mut row in probs.rows_mut() {
            let p = nn::softmax(row.as_slice().expect("contiguous"));
            row.assign(&Array1::from(p));
        }
        Pass {
            n,
            reps,
            enc,
            prod,
            act,
            mask,
            dropped,
            probs,
        }
    }

    fn backward(
        &self,
        pass: &Pass<E::Cache>,
        target: &WordPairGrid,
        scale: f64,
        grads: &mut GridParams<E::Params>,
    ) {
        let n = pass.n;
        let hp = &self.params.head;
        let gh = &mut grads.head;
        let mut dlogits = pass.probs.clone();
        for (k, label) in target.labels().iter().enumerate() {
            dlogits[[k, label.index()]] -= 1.0;
        }
        dlogits *= scale;
        gh.out += &pass.dropped.t().dot(&dlogits);
        gh.out_bias += &dlogits.sum_axis(Axis(0));
        let mut dact = dlogits.dot(&hp.out.t());
        if let Some(mask) = &pass.mask {
            dact *= mask;
        }
        let dpre = dact * pass.act.mapv(|a| 1.0 - a * a);
        gh.bias += &dpre.sum_axis(Axis(0));
        gh.product += &pass.prod.t().dot(&dpre);
        let dprod = dpre.dot(&hp.product.t());

        let m = dpre.ncols();
        let mut dleft = Array2::<f64>::zeros((n, m));
        let mut dright = Array2::<f64>::zeros((n, m));
        let mut dreps = Array2::<f64>::zeros(pass.reps.raw_dim());
        for i in 0..n {
            for j in 0..n {
                let k = i * n + j;
                let row = dpre.row(k);
                dleft.row_mut(i).scaled_add(1.0, &row);
                dright.row_mut(j).scaled_add(1.0, &row);
                if self.config.region_features {
                    gh.region.row_mut(region_of(i, j)).scaled_add(1.0, &row);
                }
                if self.config.distance_features {
                    gh.distance
                        .row_mut(distance_bucket(i, j))
                        .scaled_add(1.0, &row);
                }
                let dp = dprod.row(k);
                let di = &dp * &pass.reps.row(j);
                let dj = &dp * &pass.reps.row(i);
                dreps.row_mut(i).scaled_add(1.0, &di);
                dreps.row_mut(j).scaled_add(1.0, &dj);
            }
        }
        gh.left += &pass.reps.t().dot(&dleft);
        gh.right += &pass.reps.t().dot(&dright);
        dreps += &dleft.dot(&hp.left.t());
        dreps += &dright.dot(&hp.right.t());
        self.encoder
            .backward(&self.params.encoder, &pass.enc, &dreps, &mut grads.encoder);
    }

    fn cell_loss(pass: &Pass<E::Cache>, target: &WordPairGrid) -> f64 {
        target
            .labels()
            .iter()
            .enumerate()
            .map(|(k, l)| -pass.probs[[k, l.index()]].max(f64::MIN_POSITIVE).ln())
            .sum()
    }

    /// Mean per-cell cross-entropy over every cell of the batch (no dropout).
    pub fn loss(&self, batch: &[GridExample<'_>]) -> f64 {
        let cells: usize = batch.iter().map(|(t, _)| t.len() * t.len()).sum();
        let total: f64 = batch
            .iter()
            .map(|(tokens, target)| Self::cell_loss(&self.forward(tokens, None), target))
            .sum();
        total / cells.max(1) as f64
    }

    /// Loss and its gradient. Dropout is applied only when `rng` is given.
    pub fn loss_and_grad(
        &self,
        batch: &[GridExample<'_>],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (f64, GridParams<E::Params>) {
        let mut grads = self.params.clone();
        grads.fill_zero();
        let cells: usize = batch.iter().map(|(t, _)| t.len() * t.len()).sum();
        let scale = 1.0 / cells.max(1) as f64;
        let mut total = 0.0;
        for (tokens, target) in batch {
            if tokens.is_empty() {
                continue;
            }
            let pass = self.forward(tokens, rng.as_deref_mut());
            total += Self::cell_loss(&pass, target);
            self.backward(&pass, target, scale, &mut grads);
        }
        (total * scale, grads)
    }

    /// Argmax labels with illegal cells reset.
    pub fn predict_grid(&self, sentence: &Sentence) -> WordPairGrid {
        let n = sentence.len();
        let mut grid = WordPairGrid::new(n);
        if n == 0 {
            return grid;
        }
        let pass = self.forward(&sentence.tokens, None);
        for i in 0..n {
            for j in 0..n {
                let row = pass.probs.row(i * n + j);
                let best = row
                    .iter()
                    .enumerate()
                    .fold(0, |b, (k, &p)| if p > row[b] { k } else { b });
                grid.set(i, j, GridLabel::from_index(best));
            }
        }
        grid.repair();
        grid
    }

    /// Decoded mentions (in consultation offsets) for every sentence.
    pub fn predict(&self, consultation: &Consultation) -> AnnotationSet {
        let mut out = AnnotationSet::new(consultation.id.clone());
        for sentence in &consultation.sentences {
            for m in decode_grid(&self.predict_grid(sentence), sentence) {
                out.push_unique(m);
            }
        }
        out.sort();
        out
    }

    /// Like [`predict`](Self::predict), with mentions projected onto the original text.
    pub fn predict_prepared(&self, prepared: &PreparedText) -> AnnotationSet {
        let mut raw = self.predict(&prepared.consultation);
        if !prepared.trace.is_identity() {
            let projected: Vec<Mention> = raw
                .mentions
                .iter()
                .map(|m| project_to_original(m, &prepared.trace))
                .collect();
            raw.mentions.clear();
            for m in projected {
                raw.push_unique(m);
            }
            raw.sort();
        }
        raw
    }
}

impl<E: TokenEncoder + Send + Sync> ExtractionBackend for GridModel<E>
where
    E::Params: Send + Sync,
{
    fn name(&self) -> &str {
        "grid"
    }

    fn extract(&self, consultation: &Consultation) -> Result<AnnotationSet> {
        Ok(self.predict(consultation))
    }
}

/// Trains a grid model on `(sentence, gold mentions)` pairs.
pub fn train_grid_model(
    corpus: &[(Sentence, Vec<Mention>)],
    cfg: &GridModelConfig,
) -> Result<GridModel> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("grid training corpus is empty".into()));
    }
    let mut targets = Vec::with_capacity(corpus.len());
    for (sentence, gold) in corpus {
        let kept: Vec<Mention> = gold
            .iter()
            .filter(|m| !cfg.key_only || m.category == Category::KeyFinding)
            .cloned()
            .collect();
        targets.push(encode_entities(sentence, &kept)?);
    }
    let vocab = corpus
        .iter()
        .flat_map(|(s, _)| s.tokens.iter().map(|t| t.surface.as_str()));
    let mut model = GridModel::new(cfg.clone(), vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut adam = Adam::default();
    let mut order: Vec<usize> = (0..corpus.len())
        .filter(|&i| !corpus[i].0.is_empty())
        .collect();
    let lr = |g: ParamGroup| match g {
        ParamGroup::Encoder => cfg.encoder_learning_rate,
        ParamGroup::Head => cfg.learning_rate,
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<GridExample<'_>> = chunk
                .iter()
                .map(|&i| (corpus[i].0.tokens.as_slice(), &targets[i]))
                .collect();
            let (loss, grads) = model.loss_and_grad(&batch, Some(&mut rng));
            adam.step(&mut model.params, &grads, lr);
            epoch_loss += loss;
            batches += 1;
        }
        let mean = epoch_loss / batches.max(1) as f64;
        log::debug!("grid epoch {epoch}: loss {mean:.5}");
        model.epoch_losses.push(mean);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ner::grid::path_fragments;

    fn example() -> (Sentence, Vec<Mention>) {
        let s = Sentence::from_text("long fingers and toes");
        let long_fingers =
            Mention::new(path_fragments(&s, &[0, 1]), Category::KeyFinding, None).unwrap();
        let long_toes =
            Mention::new(path_fragments(&s, &[0, 3]), Category::KeyFinding, None).unwrap();
        (s, vec![long_fingers, long_toes])
    }

    #[test]
    fn config_validation() {
        assert!(GridModelConfig::default().validate().is_ok());
        let cfg = GridModelConfig {
            dropout: 1.0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = GridModelConfig {
            token_encoder: "bert".into(),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn defaults_match_reported_grid_search() {
        let cfg = GridModelConfig::default();
        assert_eq!(cfg.epochs, 15);
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.learning_rate, 0.001);
        assert_eq!(cfg.encoder_learning_rate, 5e-5);
        assert_eq!(cfg.dropout, 0.3);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(
            train_grid_model(&[], &GridModelConfig::default()),
            Err(Error::Data(_))
        ));
    }

    fn overfit_config() -> GridModelConfig {
        GridModelConfig {
            epochs: 200,
            batch_size: 1,
            learning_rate: 0.01,
            encoder_learning_rate: 0.01,
            dropout: 0.0,
            word_dim: 16,
            hidden_dim: 16,
            pair_dim: 32,
            char_buckets: 64,
            ..Default::default()
        }
    }

    #[test]
    fn overfits_one_sentence() {
        let (s, mut gold) = example();
        let model = train_grid_model(&[(s.clone(), gold.clone())], &overfit_config()).unwrap();
        gold.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        let losses = model.epoch_losses();
        let warmup = 20;
        for w in losses[warmup..].windows(2) {
            assert!(
                w[1] <= w[0] * (1.0 + 1e-9),
                "loss rose: {} -> {}",
                w[0],
                w[1]
            );
        }
        assert!(losses[losses.len() - 1] < 0.05 * losses[0]);
        assert_eq!(decode_grid(&model.predict_grid(&s), &s), gold);
    }

    #[test]
    fn key_only_on_normal_corpus_predicts_nothing() {
        let s = Sentence::from_text("normal lips");
        let normal =
            Mention::new(path_fragments(&s, &[0, 1]), Category::NormalFinding, None).unwrap();
        let cfg = GridModelConfig {
            epochs: 60,
            ..overfit_config()
        };
        let model = train_grid_model(&[(s.clone(), vec![normal])], &cfg).unwrap();
        assert!(model.predict_grid(&s).is_all_none());
    }

    #[test]
    fn save_and_load_round_trip() {
        let (s, gold) = example();
        let cfg = GridModelConfig {
            epochs: 3,
            ..overfit_config()
        };
        let model = train_grid_model(&[(s.clone(), gold)], &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let back = GridModel::load(dir.path()).unwrap();
        assert_eq!(back.params(), model.params());
        assert_eq!(back.predict_grid(&s), model.predict_grid(&s));
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let (s, gold) = example();
        let target = encode_entities(&s, &gold).unwrap();
        let cfg = GridModelConfig {
            word_dim: 5,
            hidden_dim: 4,
            pair_dim: 6,
            char_buckets: 16,
            region_features: true,
            distance_features: true,
            ..Default::default()
        };
        let words = s.tokens.iter().map(|t| t.surface.as_str());
        let mut model = GridModel::new(cfg, words).unwrap();
        let batch = [(s.tokens.as_slice(), &target)];
        let (_, grads) = model.loss_and_grad(&batch, None);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let total = model.params().num_params();
        for idx in (0..total).step_by(7) {
            let orig = model.params().get_flat(idx);
            model.params_mut().set_flat(idx, orig + h);
            let up = model.loss(&batch);
            model.params_mut().set_flat(idx, orig - h);
            let down = model.loss(&batch);
            model.params_mut().set_flat(idx, orig);
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get_flat(idx);
            let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative gradient error {worst}");
    }

    #[test]
    fn distance_buckets_are_signed() {
        assert_eq!(distance_bucket(3, 3), 0);
        assert_eq!(distance_bucket(0, 1), 1);
        assert_eq!(distance_bucket(1, 0), 6);
        assert_eq!(distance_bucket(0, 20), 5);
        assert_eq!(distance_bucket(20, 0), 10);
    }
}
