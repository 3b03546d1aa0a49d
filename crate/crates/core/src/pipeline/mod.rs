//! Stage orchestration over an artifacts directory.
//!
//! Layout (version [`LAYOUT_VERSION`]):
//!
//! ```text
//! dictionary.tsv              build-dict   surface<TAB>hpo_id
//! obsolete_remap.tsv          build-dict   obsolete<TAB>replacement
//! split/train.jsonl           split
//! split/validation.jsonl      split
//! split/validation_gold.tsv   split        annotation TSV of the validation gold
//! split/strata.tsv            split        id<TAB>edge case<TAB>part
//! ner_model/                  train-ner    config.json, vocab.txt, params.bin
//! nen_model/                  train-nen    normalizer artifact + training.json
//! predictions/{grid,llm}.tsv  predict
//! predictions/ensemble.tsv    ensemble
//! report.json, report.txt     evaluate     scores of the primary predictions
//! reports/<run>.{json,txt}    evaluate     scores of every prediction file
//! manifests/<command>.json    every command
//! llm_audit.jsonl             predict      remote backend requests, when used
//! ```

mod split;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::{merge_all, MergePolicy};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::io::{self, Document};
use crate::ner::{ExtractionBackend, GridModel, GridModelConfig, HttpLlmClient, LlmBackend};
use crate::normalize::{
    pre_finetune, train_normalizer, DenseEncoder, Normalizer, NormalizerConfig,
};
use crate::ontology::{self, FlatDictionary, DEFAULT_VERSION_TAG, PHENOTYPIC_ABNORMALITY};
use crate::preprocess::{
    project_to_rewritten, rewrite, sentence_split_and_tokenize, AbbreviationLexicon, RewriteTrace,
};
use crate::types::{AnnotationSet, Category, HpoId, Mention, Sentence};

pub use split::{label_edge_case, stratified_split, EdgeCaseLabel, Split};

pub const LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    BuildDict,
    Split,
    TrainNer,
    TrainNen,
    Predict,
    Ensemble,
    Evaluate,
    End2end,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::BuildDict,
        Command::Split,
        Command::TrainNer,
        Command::TrainNen,
        Command::Predict,
        Command::Ensemble,
        Command::Evaluate,
        Command::End2end,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::BuildDict => "build-dict",
            Command::Split => "split",
            Command::TrainNer => "train-ner",
            Command::TrainNen => "train-nen",
            Command::Predict => "predict",
            Command::Ensemble => "ensemble",
            Command::Evaluate => "evaluate",
            Command::End2end => "end2end",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendChoice {
    #[default]
    Grid,
    Llm,
    Both,
}

impl BackendChoice {
    fn uses_grid(self) -> bool {
        matches!(self, BackendChoice::Grid | BackendChoice::Both)
    }

    fn uses_llm(self) -> bool {
        matches!(self, BackendChoice::Llm | BackendChoice::Both)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub ontology: PathBuf,
    pub abbrev_lexicon: Option<PathBuf>,
    pub corpus: PathBuf,
    pub artifacts: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OntologyConfig {
    /// Root of the observable subtree.
    pub root: String,
    pub version_tag: String,
}

impl Default for OntologyConfig {
    fn default() -> Self {
        OntologyConfig {
            root: PHENOTYPIC_ABNORMALITY.to_string(),
            version_tag: DEFAULT_VERSION_TAG.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_ratio: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train_ratio: 0.7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub max_in_flight: usize,
    pub timeout_secs: u64,
    pub audit_log: bool,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            max_in_flight: 4,
            timeout_secs: 60,
            audit_log: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NerConfig {
    pub backend: BackendChoice,
    /// Use the grid model for a consultation whose remote extraction fails.
    pub fallback_to_grid: bool,
    pub llm: LlmConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewriteSwitches {
    pub abbreviations: bool,
    pub statistical: bool,
}

impl Default for RewriteSwitches {
    fn default() -> Self {
        RewriteSwitches {
            abbreviations: true,
            statistical: true,
        }
    }
}

impl RewriteSwitches {
    pub const OFF: RewriteSwitches = RewriteSwitches {
        abbreviations: false,
        statistical: false,
    };
}

/// Text rewriting applied before each consumer sees a consultation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub grid: RewriteSwitches,
    pub llm: RewriteSwitches,
    /// View from which mention surfaces are taken for normalization, in
    /// training and prediction alike.
    pub normalizer: RewriteSwitches,
    pub case_sensitive_abbreviations: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            grid: RewriteSwitches::OFF,
            llm: RewriteSwitches::default(),
            normalizer: RewriteSwitches::default(),
            case_sensitive_abbreviations: true,
        }
    }
}

/// Everything a run depends on. Component seeds are derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub seed: u64,
    pub split: SplitConfig,
    pub ontology: OntologyConfig,
    pub ner: NerConfig,
    pub preprocess: PreprocessConfig,
    pub grid: GridModelConfig,
    pub normalizer: NormalizerConfig,
    pub ensemble: MergePolicy,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            paths: Paths {
                artifacts: PathBuf::from("artifacts"),
                ..Default::default()
            },
            seed: 0,
            split: SplitConfig::default(),
            ontology: OntologyConfig::default(),
            ner: NerConfig::default(),
            preprocess: PreprocessConfig::default(),
            grid: GridModelConfig::default(),
            normalizer: NormalizerConfig::default(),
            ensemble: MergePolicy::default(),
        }
    }
}

impl PipelineConfig {
    /// Makes relative paths relative to `base` and propagates the seed.
    pub fn resolve(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.ontology);
        fix(&mut self.paths.corpus);
        fix(&mut self.paths.artifacts);
        if let Some(p) = self.paths.abbrev_lexicon.as_mut() {
            fix(p);
        }
        let seed = self.seed;
        self.with_seed(seed)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.grid.seed = seed;
        self.normalizer.seed = seed;
        self.normalizer.dense.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.split.train_ratio;
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::Config(format!(
                "split.train_ratio must be in (0, 1), got {r}"
            )));
        }
        if self.paths.artifacts.as_os_str().is_empty() {
            return Err(Error::Config("paths.artifacts is not set".into()));
        }
        HpoId::new(self.ontology.root.as_str()).map_err(|_| {
            Error::Config(format!(
                "ontology.root {:?} is not an HPO id",
                self.ontology.root
            ))
        })?;
        if self.ner.llm.max_in_flight == 0 {
            return Err(Error::Config(
                "ner.llm.max_in_flight must be at least 1".into(),
            ));
        }
        self.grid.validate()?;
        self.normalizer.validate()
    }

    /// SHA-256 of the canonical JSON rendering.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Hash of a file, or of every file below a directory (names included).
fn digest_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut names: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
            .collect::<Result<_>>()?;
        names.sort();
        let mut hasher = Sha256::new();
        for p in names {
            hasher.update(
                p.file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default(),
            );
            hasher.update(digest_path(&p)?);
        }
        Ok(hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    } else {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub layout_version: u32,
    pub command: String,
    pub tool_version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub dictionary_version: String,
    pub dictionary_checksum: Option<String>,
    /// Path (relative to the artifacts directory when inside it) to content hash.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Paths of every artifact under the artifacts root.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub root: PathBuf,
}

impl Artifacts {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Artifacts { root: root.into() }
    }

    pub fn dictionary(&self) -> PathBuf {
        self.root.join("dictionary.tsv")
    }
    pub fn remap(&self) -> PathBuf {
        self.root.join("obsolete_remap.tsv")
    }
    pub fn train_split(&self) -> PathBuf {
        self.root.join("split/train.jsonl")
    }
    pub fn validation_split(&self) -> PathBuf {
        self.root.join("split/validation.jsonl")
    }
    pub fn validation_gold(&self) -> PathBuf {
        self.root.join("split/validation_gold.tsv")
    }
    pub fn strata(&self) -> PathBuf {
        self.root.join("split/strata.tsv")
    }
    pub fn ner_model(&self) -> PathBuf {
        self.root.join("ner_model")
    }
    pub fn nen_model(&self) -> PathBuf {
        self.root.join("nen_model")
    }
    pub fn predictions(&self, run: &str) -> PathBuf {
        self.root.join("predictions").join(format!("{run}.tsv"))
    }
    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn report_txt(&self) -> PathBuf {
        self.root.join("report.txt")
    }
    pub fn run_report(&self, run: &str, ext: &str) -> PathBuf {
        self.root.join("reports").join(format!("{run}.{ext}"))
    }
    pub fn manifest(&self, command: Command) -> PathBuf {
        self.root
            .join("manifests")
            .join(format!("{}.json", command.name()))
    }
    pub fn audit_log(&self) -> PathBuf {
        self.root.join("llm_audit.jsonl")
    }

    fn require(&self, path: PathBuf, producer: Command) -> Result<PathBuf> {
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::MissingArtifact {
                path,
                producer: producer.name(),
            })
        }
    }

    fn label(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .display()
            .to_string()
    }
}

pub const RUN_NAMES: [&str; 3] = ["grid", "llm", "ensemble"];

fn run_in_parallel<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    if items.is_empty() {
        return Vec::new();
    }
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(items.len());
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<U>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("prediction worker panicked"))
            .collect()
    })
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub artifacts: Artifacts,
    lexicon: Option<AbbreviationLexicon>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let lexicon = match &config.paths.abbrev_lexicon {
            Some(p) => {
                check_exists(p, "paths.abbrev_lexicon")?;
                Some(AbbreviationLexicon::load(
                    p,
                    config.preprocess.case_sensitive_abbreviations,
                )?)
            }
            None => None,
        };
        Ok(Pipeline {
            artifacts: Artifacts::new(config.paths.artifacts.clone()),
            config,
            lexicon,
        })
    }

    fn trace(&self, text: &str, switches: RewriteSwitches) -> RewriteTrace {
        let lex = self.lexicon.as_ref().filter(|_| switches.abbreviations);
        rewrite(text, lex, switches.statistical)
    }

    fn load_dictionary(&self) -> Result<FlatDictionary> {
        let path = self
            .artifacts
            .require(self.artifacts.dictionary(), Command::BuildDict)?;
        FlatDictionary::from_tsv(
            &io::read_text(&path)?,
            self.config.ontology.version_tag.clone(),
        )
    }

    fn load_remap(&self) -> Result<BTreeMap<HpoId, HpoId>> {
        let path = self
            .artifacts
            .require(self.artifacts.remap(), Command::BuildDict)?;
        ontology::remap_from_tsv(&io::read_text(&path)?)
    }

    fn load_split(&self, path: PathBuf) -> Result<Vec<Document>> {
        io::read_corpus(&self.artifacts.require(path, Command::Split)?)
    }

    fn write_manifest(
        &self,
        command: Command,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
    ) -> Result<()> {
        let hash_all = |paths: &[PathBuf]| -> Result<BTreeMap<String, String>> {
            paths
                .iter()
                .filter(|p| p.exists())
                .map(|p| Ok((self.artifacts.label(p), digest_path(p)?)))
                .collect()
        };
        let dict_path = self.artifacts.dictionary();
        let dictionary_checksum = if dict_path.exists() {
            Some(self.load_dictionary()?.checksum())
        } else {
            None
        };
        let manifest = Manifest {
            layout_version: LAYOUT_VERSION,
            command: command.name().to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: self.config.digest()?,
            seed: self.config.seed,
            dictionary_version: self.config.ontology.version_tag.clone(),
            dictionary_checksum,
            inputs: hash_all(inputs)?,
            outputs: hash_all(outputs)?,
        };
        let body = serde_json::to_string_pretty(&manifest)? + "\n";
        io::write_text(&self.artifacts.manifest(command), &body)
    }

    /// Flattens the observable subtree and records obsolete-id replacements.
    pub fn build_dict(&self) -> Result<FlatDictionary> {
        let path = &self.config.paths.ontology;
        check_exists(path, "paths.ontology")?;
        let terms = ontology::load_ontology(path)?;
        let root = HpoId::new(self.config.ontology.root.as_str())?;
        let keep = ontology::observable_subset(&terms, &root)?;
        let dict = ontology::flatten(&terms, &keep, &self.config.ontology.version_tag);
        if dict.is_empty() {
            return Err(Error::Data(format!(
                "no terms below {root} in {}",
                path.display()
            )));
        }
        io::write_text(&self.artifacts.dictionary(), &dict.to_tsv())?;
        io::write_text(
            &self.artifacts.remap(),
            &ontology::remap_to_tsv(&ontology::obsolete_remap(&terms)),
        )?;
        log::info!(
            "dictionary: {} surfaces for {} ids",
            dict.len(),
            dict.ids().len()
        );
        self.write_manifest(
            Command::BuildDict,
            &[path.clone()],
            &[self.artifacts.dictionary(), self.artifacts.remap()],
        )?;
        Ok(dict)
    }

    pub fn split(&self) -> Result<Split> {
        let path = &self.config.paths.corpus;
        check_exists(path, "paths.corpus")?;
        let corpus = io::load_documents(path)?;
        let split = stratified_split(&corpus, self.config.split.train_ratio, self.config.seed)?;
        io::write_corpus(&self.artifacts.train_split(), &split.train)?;
        io::write_corpus(&self.artifacts.validation_split(), &split.validation)?;
        let gold: Vec<AnnotationSet> = split.validation.iter().map(Document::gold).collect();
        io::write_annotations(
            &self.artifacts.validation_gold(),
            &gold,
            &texts_of(&split.validation),
        )?;
        io::write_text(&self.artifacts.strata(), &split.strata_tsv())?;
        log::info!(
            "split: {} train, {} validation",
            split.train.len(),
            split.validation.len()
        );
        self.write_manifest(
            Command::Split,
            &[path.clone()],
            &[
                self.artifacts.train_split(),
                self.artifacts.validation_split(),
                self.artifacts.validation_gold(),
                self.artifacts.strata(),
            ],
        )?;
        Ok(split)
    }

    fn needs_grid(&self) -> bool {
        self.config.ner.backend.uses_grid() || self.config.ner.fallback_to_grid
    }

    /// Sentences of the grid view with the gold mentions that align to
    /// their tokens. Misaligned mentions are dropped with a warning.
    pub fn grid_training_corpus(&self, docs: &[Document]) -> Result<Vec<(Sentence, Vec<Mention>)>> {
        let mut out = Vec::new();
        let mut dropped = 0usize;
        for doc in docs.iter().filter(|d| !d.text.trim().is_empty()) {
            let prepared = sentence_split_and_tokenize(
                &doc.id,
                self.trace(&doc.text, self.config.preprocess.grid),
            )?;
            let mut per_sentence: Vec<Vec<Mention>> =
                vec![Vec::new(); prepared.consultation.sentences.len()];
            for m in &doc.mentions {
                let r = project_to_rewritten(m, &prepared.trace);
                let home = prepared.consultation.sentences.iter().position(|s| {
                    r.fragments().iter().all(|f| {
                        f.start >= s.start
                            && f.end <= s.end()
                            && s.token_starting_at(f.start).is_some()
                            && s.token_ending_at(f.end).is_some()
                    })
                });
                match home {
                    Some(i) => per_sentence[i].push(r),
                    None => dropped += 1,
                }
            }
            out.extend(
                prepared
                    .consultation
                    .sentences
                    .into_iter()
                    .zip(per_sentence),
            );
        }
        if dropped > 0 {
            log::warn!("grid training: dropped {dropped} gold mentions not aligned to tokens of a single sentence");
        }
        Ok(out)
    }

    pub fn train_ner(&self) -> Result<()> {
        if !self.needs_grid() {
            log::info!("train-ner: backend is llm without grid fallback; nothing to train");
            return self.write_manifest(Command::TrainNer, &[], &[]);
        }
        let train = self.load_split(self.artifacts.train_split())?;
        let corpus = self.grid_training_corpus(&train)?;
        let model = crate::ner::train_grid_model(&corpus, &self.config.grid)?;
        let dir = self.artifacts.ner_model();
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        model.save(&dir)?;
        if let Some(last) = model.epoch_losses().last() {
            log::info!(
                "train-ner: {} sentences, final loss {last:.5}",
                corpus.len()
            );
        }
        self.write_manifest(Command::TrainNer, &[self.artifacts.train_split()], &[dir])
    }

    /// Surface of `m` (original offsets) in the normalizer view of `text`.
    fn normalizer_surface(&self, m: &Mention, text: &str) -> Result<String> {
        let trace = self.trace(text, self.config.preprocess.normalizer);
        project_to_rewritten(m, &trace).text(&trace.rewritten)
    }

    /// `(surface, gold id)` pairs of the training gold, with obsolete ids remapped.
    pub fn normalizer_training_pairs(
        &self,
        docs: &[Document],
        remap: &BTreeMap<HpoId, HpoId>,
    ) -> Result<Vec<(String, HpoId)>> {
        let mut out = Vec::new();
        for doc in docs {
            for m in &doc.mentions {
                let Some(id) = &m.hpo_id else { continue };
                if m.category == Category::NormalFinding
                    && self.config.normalizer.exclude_normal_findings
                {
                    continue;
                }
                let id = remap.get(id).unwrap_or(id).clone();
                out.push((self.normalizer_surface(m, &doc.text)?, id));
            }
        }
        Ok(out)
    }

    pub fn train_nen(&self) -> Result<Normalizer> {
        let dict = self.load_dictionary()?;
        let remap = self.load_remap()?;
        let train = self.load_split(self.artifacts.train_split())?;
        let pairs = self.normalizer_training_pairs(&train, &remap)?;
        if pairs.is_empty() {
            return Err(Error::Data(
                "training split has no gold mentions with HPO ids".into(),
            ));
        }
        let cfg = &self.config.normalizer;
        let mut summary = serde_json::Map::new();
        let init = if cfg.pre_finetune_epochs > 0 {
            let (dense, report) = pre_finetune(&DenseEncoder::new(cfg.dense.clone())?, &dict, cfg)?;
            log::info!(
                "pre-finetune alignment {:.4} -> {:.4}",
                report.before,
                report.after
            );
            summary.insert("alignment".into(), serde_json::json!({"before": report.before, "after": report.after, "per_epoch": report.per_epoch}));
            Some(dense)
        } else {
            None
        };
        let (normalizer, stats) = train_normalizer(&pairs, &dict, cfg, init)?;
        log::info!(
            "train-nen: {} instances, {} skipped candidate sets",
            pairs.len(),
            stats.skipped()
        );
        summary.insert("instances".into(), pairs.len().into());
        summary.insert("epoch_losses".into(), serde_json::json!(stats.epoch_losses));
        summary.insert(
            "skipped_per_epoch".into(),
            serde_json::json!(stats.skipped_per_epoch),
        );
        summary.insert("lambda".into(), serde_json::json!(normalizer.lambda));
        let dir = self.artifacts.nen_model();
        normalizer.save(&dir)?;
        io::write_text(
            &dir.join("training.json"),
            &(serde_json::to_string_pretty(&summary)? + "\n"),
        )?;
        self.write_manifest(
            Command::TrainNen,
            &[
                self.artifacts.dictionary(),
                self.artifacts.remap(),
                self.artifacts.train_split(),
            ],
            &[dir],
        )?;
        Ok(normalizer)
    }

    fn load_grid(&self) -> Result<GridModel> {
        let dir = self
            .artifacts
            .require(self.artifacts.ner_model(), Command::TrainNer)?;
        self.artifacts
            .require(dir.join("params.bin"), Command::TrainNer)?;
        GridModel::load(&dir)
    }

    fn load_normalizer(&self) -> Result<Normalizer> {
        let dict = self.load_dictionary()?;
        let dir = self
            .artifacts
            .require(self.artifacts.nen_model(), Command::TrainNen)?;
        self.artifacts
            .require(dir.join("dense.bin"), Command::TrainNen)?;
        Normalizer::load(&dir, dict)
    }

    /// Runs one backend on one consultation and maps mentions back to
    /// original offsets.
    fn extract(
        &self,
        backend: &dyn ExtractionBackend,
        switches: RewriteSwitches,
        doc: &Document,
    ) -> Result<AnnotationSet> {
        let mut out = AnnotationSet::new(doc.id.clone());
        if doc.text.trim().is_empty() {
            return Ok(out);
        }
        let prepared = sentence_split_and_tokenize(&doc.id, self.trace(&doc.text, switches))?;
        for m in backend.extract(&prepared.consultation)?.mentions {
            out.push_unique(prepared.to_original(&m));
        }
        Ok(out)
    }

    /// Links every key finding to its best-scoring id.
    fn link(
        &self,
        normalizer: &Normalizer,
        mut set: AnnotationSet,
        text: &str,
    ) -> Result<AnnotationSet> {
        let mut linked = AnnotationSet::new(set.consultation_id.clone());
        for mut m in std::mem::take(&mut set.mentions) {
            m.hpo_id = match m.category {
                Category::KeyFinding => Some(
                    normalizer
                        .normalize_text(&self.normalizer_surface(&m, text)?)?
                        .0,
                ),
                Category::NormalFinding => None,
            };
            linked.push_unique(m);
        }
        linked.sort();
        Ok(linked)
    }

    fn predict_with(
        &self,
        docs: &[Document],
        normalizer: &Normalizer,
        primary: (&dyn ExtractionBackend, RewriteSwitches),
        fallback: Option<(&dyn ExtractionBackend, RewriteSwitches)>,
    ) -> Result<Vec<AnnotationSet>> {
        run_in_parallel(docs, |doc| {
            let set = match (self.extract(primary.0, primary.1, doc), fallback) {
                (Ok(s), _) => s,
                (Err(e), Some((fb, sw))) => {
                    log::warn!(
                        "{} failed on {}: {e}; using {}",
                        primary.0.name(),
                        doc.id,
                        fb.name()
                    );
                    self.extract(fb, sw, doc)?
                }
                (Err(e), None) => return Err(e),
            };
            self.link(normalizer, set, &doc.text)
        })
        .into_iter()
        .collect()
    }

    /// Predicts on `input` (default: the validation split) with every
    /// configured backend and writes one TSV per backend.
    pub fn predict(&self, input: Option<&Path>) -> Result<Vec<PathBuf>> {
        let (docs, input_path) = match input {
            Some(p) => {
                check_exists(p, "--input")?;
                (io::load_documents(p)?, p.to_path_buf())
            }
            None => (
                self.load_split(self.artifacts.validation_split())?,
                self.artifacts.validation_split(),
            ),
        };
        let grid = if self.needs_grid() {
            Some(self.load_grid()?)
        } else {
            None
        };
        let normalizer = self.load_normalizer()?;
        let texts = texts_of(&docs);
        let pre = &self.config.preprocess;
        let mut written = Vec::new();
        let grid_pair = grid
            .as_ref()
            .map(|g| (g as &dyn ExtractionBackend, pre.grid));
        if self.config.ner.backend.uses_grid() {
            let sets = self.predict_with(
                &docs,
                &normalizer,
                grid_pair.expect("grid model loaded"),
                None,
            )?;
            let out = self.artifacts.predictions("grid");
            io::write_annotations(&out, &sets, &texts)?;
            written.push(out);
        }
        if self.config.ner.backend.uses_llm() {
            let llm_cfg = &self.config.ner.llm;
            let mut client = HttpLlmClient::from_env(
                llm_cfg.max_in_flight,
                Duration::from_secs(llm_cfg.timeout_secs),
            )?;
            if llm_cfg.audit_log {
                std::fs::create_dir_all(&self.artifacts.root)
                    .map_err(|e| Error::io(&self.artifacts.root, e))?;
                client = client.with_audit_log(&self.artifacts.audit_log())?;
            }
            let backend = LlmBackend::new(client);
            let fallback = grid_pair.filter(|_| self.config.ner.fallback_to_grid);
            let sets = self.predict_with(&docs, &normalizer, (&backend, pre.llm), fallback)?;
            let out = self.artifacts.predictions("llm");
            io::write_annotations(&out, &sets, &texts)?;
            written.push(out);
        }
        let mut inputs = vec![
            input_path,
            self.artifacts.dictionary(),
            self.artifacts.nen_model(),
        ];
        if grid.is_some() {
            inputs.push(self.artifacts.ner_model());
        }
        self.write_manifest(Command::Predict, &inputs, &written)?;
        Ok(written)
    }

    /// Merges the grid and remote predictions into `predictions/ensemble.tsv`.
    pub fn ensemble(&self) -> Result<PathBuf> {
        let a = self
            .artifacts
            .require(self.artifacts.predictions("grid"), Command::Predict)?;
        let b = self
            .artifacts
            .require(self.artifacts.predictions("llm"), Command::Predict)?;
        let out = self.artifacts.predictions("ensemble");
        ensemble_files(&a, &b, &out, self.config.ensemble)?;
        self.write_manifest(Command::Ensemble, &[a, b], std::slice::from_ref(&out))?;
        Ok(out)
    }

    fn primary_run(&self) -> &'static str {
        match self.config.ner.backend {
            BackendChoice::Grid => "grid",
            BackendChoice::Llm => "llm",
            BackendChoice::Both => "ensemble",
        }
    }

    /// Scores every prediction file against the remapped validation gold;
    /// `report.json` holds the primary run.
    pub fn evaluate(&self) -> Result<EvalReport> {
        let remap = self.load_remap()?;
        let gold_docs = self.load_split(self.artifacts.validation_split())?;
        let gold: Vec<AnnotationSet> = gold_docs
            .iter()
            .map(|d| {
                let mut g = d.gold();
                for m in &mut g.mentions {
                    if let Some(new) = m.hpo_id.as_ref().and_then(|id| remap.get(id)) {
                        m.hpo_id = Some(new.clone());
                    }
                }
                g.sort();
                g
            })
            .collect();
        let primary = self.primary_run();
        let primary_path = self.artifacts.require(
            self.artifacts.predictions(primary),
            if primary == "ensemble" {
                Command::Ensemble
            } else {
                Command::Predict
            },
        )?;
        let mut inputs = vec![self.artifacts.validation_split(), self.artifacts.remap()];
        let mut outputs = Vec::new();
        let mut primary_report = None;
        for run in RUN_NAMES {
            let path = self.artifacts.predictions(run);
            if !path.exists() {
                continue;
            }
            let report = evaluate(&gold, &io::read_annotations(&path)?)?;
            let (json, txt) = (
                self.artifacts.run_report(run, "json"),
                self.artifacts.run_report(run, "txt"),
            );
            write_report(&report, &json, &txt)?;
            inputs.push(path.clone());
            outputs.extend([json, txt]);
            if path == primary_path {
                primary_report = Some(report);
            }
        }
        let report = primary_report.expect("primary predictions were scored");
        write_report(
            &report,
            &self.artifacts.report_json(),
            &self.artifacts.report_txt(),
        )?;
        outputs.extend([self.artifacts.report_json(), self.artifacts.report_txt()]);
        self.write_manifest(Command::Evaluate, &inputs, &outputs)?;
        Ok(report)
    }

    pub fn end2end(&self) -> Result<EvalReport> {
        self.build_dict()?;
        self.split()?;
        self.train_ner()?;
        self.train_nen()?;
        self.predict(None)?;
        if self.config.ner.backend == BackendChoice::Both {
            self.ensemble()?;
        }
        let report = self.evaluate()?;
        let mut outputs = vec![self.artifacts.report_json()];
        outputs.extend(RUN_NAMES.iter().map(|r| self.artifacts.predictions(r)));
        self.write_manifest(
            Command::End2end,
            &[
                self.config.paths.ontology.clone(),
                self.config.paths.corpus.clone(),
            ],
            &outputs,
        )?;
        Ok(report)
    }
}

fn check_exists(path: &Path, key: &str) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(Error::Config(format!("{key} is not set")));
    }
    if !path.exists() {
        return Err(Error::Config(format!(
            "{key}: {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

fn texts_of(docs: &[Document]) -> BTreeMap<String, String> {
    docs.iter()
        .map(|d| (d.id.clone(), d.text.clone()))
        .collect()
}

fn write_report(report: &EvalReport, json: &Path, txt: &Path) -> Result<()> {
    io::write_text(json, &(serde_json::to_string_pretty(report)? + "\n"))?;
    io::write_text(txt, &report.to_table())
}

/// Merges two annotation TSV files; mention text is carried over from the inputs.
pub fn ensemble_files(a: &Path, b: &Path, out: &Path, policy: MergePolicy) -> Result<()> {
    let (sa, mut texts) = io::read_annotations_with_text(a)?;
    let (sb, tb) = io::read_annotations_with_text(b)?;
    for (k, v) in tb {
        texts.entry(k).or_insert(v);
    }
    let merged = merge_all(&sa, &sb, policy)?;
    let body = io::annotations_to_tsv_with(&merged, |id, m| {
        Ok(texts.get(&(id.to_string(), m.fragments_string())).cloned())
    })?;
    io::write_text(out, &body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    fn fixture(dir: &Path) -> PipelineConfig {
        let terms = synthetic::corpus_ontology(1);
        io::write_text(&dir.join("onto.obo"), &ontology::to_obo(&terms)).unwrap();
        io::write_text(&dir.join("abbrev.tsv"), synthetic::ABBREVIATIONS_TSV).unwrap();
        io::write_corpus(&dir.join("corpus.jsonl"), &synthetic::corpus(24, 1)).unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.paths = Paths {
            ontology: "onto.obo".into(),
            abbrev_lexicon: Some("abbrev.tsv".into()),
            corpus: "corpus.jsonl".into(),
            artifacts: "out".into(),
        };
        cfg.grid.epochs = 2;
        cfg.grid.word_dim = 8;
        cfg.grid.hidden_dim = 8;
        cfg.grid.pair_dim = 8;
        cfg.normalizer.epochs = 2;
        cfg.normalizer.pre_finetune_epochs = 1;
        cfg.normalizer.dense.dim = 16;
        cfg.normalizer.dense.buckets = 512;
        cfg.resolve(dir)
    }

    #[test]
    fn stages_report_their_producers() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(fixture(dir.path())).unwrap();
        let err = p.predict(None).unwrap_err();
        assert!(
            matches!(
                err,
                Error::MissingArtifact {
                    producer: "split",
                    ..
                }
            ),
            "{err}"
        );
        p.build_dict().unwrap();
        p.split().unwrap();
        let err = p.predict(None).unwrap_err();
        assert!(
            matches!(
                err,
                Error::MissingArtifact {
                    producer: "train-ner",
                    ..
                }
            ),
            "{err}"
        );
        assert!(err.to_string().contains("phenopipe train-ner"));
        p.train_ner().unwrap();
        let err = p.predict(None).unwrap_err();
        assert!(
            matches!(
                err,
                Error::MissingArtifact {
                    producer: "train-nen",
                    ..
                }
            ),
            "{err}"
        );
        let err = p.ensemble().unwrap_err();
        assert!(
            matches!(
                err,
                Error::MissingArtifact {
                    producer: "predict",
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn end2end_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = fixture(dir.path());
        let p = Pipeline::new(cfg.clone()).unwrap();
        let report = p.end2end().unwrap();
        assert!(report.norm_only.f1 >= 0.0 && report.norm_only.f1 <= 1.0);
        let first = std::fs::read(p.artifacts.predictions("grid")).unwrap();
        let manifest: Manifest =
            serde_json::from_str(&io::read_text(&p.artifacts.manifest(Command::Predict)).unwrap())
                .unwrap();
        assert_eq!(manifest.seed, cfg.seed);
        assert!(manifest.dictionary_checksum.is_some());
        p.end2end().unwrap();
        assert_eq!(
            first,
            std::fs::read(p.artifacts.predictions("grid")).unwrap()
        );
        for c in [
            Command::BuildDict,
            Command::Split,
            Command::TrainNer,
            Command::TrainNen,
            Command::Predict,
            Command::Evaluate,
            Command::End2end,
        ] {
            assert!(p.artifacts.manifest(c).exists(), "{}", c.name());
        }
    }

    #[test]
    fn training_pairs_remap_obsolete_ids() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(fixture(dir.path())).unwrap();
        p.build_dict().unwrap();
        let docs = synthetic::corpus(60, 1);
        assert!(docs.iter().flat_map(|d| &d.mentions).any(|m| m
            .hpo_id
            .as_ref()
            .map(HpoId::as_str)
            == Some(synthetic::OBSOLETE_ID)));
        let pairs = p
            .normalizer_training_pairs(&docs, &p.load_remap().unwrap())
            .unwrap();
        assert!(pairs
            .iter()
            .all(|(_, id)| id.as_str() != synthetic::OBSOLETE_ID));
        assert!(pairs
            .iter()
            .any(|(s, _)| s.starts_with("Head Circumference is below the")));
    }

    #[test]
    fn grid_corpus_keeps_aligned_mentions() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(fixture(dir.path())).unwrap();
        let docs = synthetic::corpus(20, 2);
        let corpus = p.grid_training_corpus(&docs).unwrap();
        let kept: usize = corpus.iter().map(|(_, m)| m.len()).sum();
        let total: usize = docs.iter().map(|d| d.mentions.len()).sum();
        assert_eq!(kept, total);
    }

    #[test]
    fn seed_override_reaches_components() {
        let cfg = PipelineConfig::default().with_seed(42);
        assert_eq!(
            (
                cfg.grid.seed,
                cfg.normalizer.seed,
                cfg.normalizer.dense.seed
            ),
            (42, 42, 42)
        );
        let mut bad = cfg.clone();
        bad.split.train_ratio = 1.0;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn ensemble_files_keep_mention_text() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.tsv");
        let b = dir.path().join("b.tsv");
        std::fs::write(
            &a,
            format!(
                "{}\nc1\t0-4\tlong\tKEY_FINDING\tHP:0000001\n",
                io::ANNOTATION_HEADER
            ),
        )
        .unwrap();
        std::fs::write(
            &b,
            format!(
                "{}\nc1\t6-9\ttoe\tKEY_FINDING\tHP:0000002\nc2\t0-1\tx\tNORMAL_FINDING\t\n",
                io::ANNOTATION_HEADER
            ),
        )
        .unwrap();
        let out = dir.path().join("m.tsv");
        ensemble_files(&a, &b, &out, MergePolicy::default()).unwrap();
        let body = std::fs::read_to_string(&out).unwrap();
        assert!(
            body.contains("c1\t0-4\tlong\t")
                && body.contains("c1\t6-9\ttoe\t")
                && body.contains("c2\t0-1\tx\t")
        );
    }
}
