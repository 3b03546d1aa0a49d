//! `phenopipe`: dictionary build, split, training, prediction, ensembling and
//! scoring of phenotype key findings.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use phenopipe_core::ensemble::MergePolicy;
use phenopipe_core::eval::{score_run, EvalReport};
use phenopipe_core::pipeline::{ensemble_files, Pipeline, PipelineConfig};

#[derive(Parser)]
#[command(
    name = "phenopipe",
    version,
    about = "Phenotype key-finding extraction and HPO normalization"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline configuration (YAML).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured abbreviation lexicon.
    #[arg(long)]
    abbrev_lexicon: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Flatten the observable ontology subtree into the dictionary.
    BuildDict(Common),
    /// Edge-case stratified train/validation split of the corpus.
    Split(Common),
    /// Train the word-pair grid extraction model.
    TrainNer(Common),
    /// Pre-finetune and train the normalizer.
    TrainNen(Common),
    /// Extract and normalize findings.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Documents to predict on (JSONL corpus or observation TSV);
        /// defaults to the validation split.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Merge two prediction files.
    Ensemble {
        #[command(flatten)]
        common: Common,
        #[arg(long, requires_all = ["b", "out"])]
        a: Option<PathBuf>,
        #[arg(long, requires_all = ["a", "out"])]
        b: Option<PathBuf>,
        #[arg(long, requires_all = ["a", "b"])]
        out: Option<PathBuf>,
        /// Keep overlapping mentions with the same id from both inputs.
        #[arg(long)]
        no_collapse: bool,
    },
    /// Score predictions against gold annotations.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, requires = "pred")]
        gold: Option<PathBuf>,
        #[arg(long, requires = "gold")]
        pred: Option<PathBuf>,
        /// Write the JSON report here (with --gold/--pred).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage in order and print the report.
    End2end(Common),
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let Some(path) = &common.config else {
        bail!("--config is required for this command");
    };
    let raw =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: PipelineConfig =
        serde_yaml::from_str(&raw).with_context(|| format!("parsing {}", path.display()))?;
    let base = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut cfg = cfg.resolve(base);
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(lex) = &common.abbrev_lexicon {
        cfg.paths.abbrev_lexicon = Some(lex.clone());
    }
    Ok(cfg)
}

fn pipeline(common: &Common) -> Result<Pipeline> {
    Ok(Pipeline::new(load_config(common)?)?)
}

fn print_report(report: &EvalReport) {
    print!("{}", report.to_table());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::BuildDict(c) => {
            let dict = pipeline(&c)?.build_dict()?;
            println!("{} dictionary entries", dict.len());
        }
        Cmd::Split(c) => {
            let split = pipeline(&c)?.split()?;
            println!(
                "{} train, {} validation",
                split.train.len(),
                split.validation.len()
            );
        }
        Cmd::TrainNer(c) => pipeline(&c)?.train_ner()?,
        Cmd::TrainNen(c) => {
            pipeline(&c)?.train_nen()?;
        }
        Cmd::Predict { common, input } => {
            for path in pipeline(&common)?.predict(input.as_deref())? {
                println!("{}", path.display());
            }
        }
        Cmd::Ensemble {
            common,
            a,
            b,
            out,
            no_collapse,
        } => match (a, b, out) {
            (Some(a), Some(b), Some(out)) => {
                let mut policy = match &common.config {
                    Some(_) => load_config(&common)?.ensemble,
                    None => MergePolicy::default(),
                };
                if no_collapse {
                    policy.overlap_same_id_collapse = false;
                }
                ensemble_files(&a, &b, &out, policy)?;
                println!("{}", out.display());
            }
            _ => {
                let mut p = pipeline(&common)?;
                if no_collapse {
                    p.config.ensemble.overlap_same_id_collapse = false;
                }
                println!("{}", p.ensemble()?.display());
            }
        },
        Cmd::Evaluate {
            common,
            gold,
            pred,
            out,
        } => {
            let report = match (gold, pred) {
                (Some(g), Some(p)) => {
                    let report = score_run(&g, &p)?;
                    if let Some(out) = out {
                        std::fs::write(&out, serde_json::to_string_pretty(&report)? + "\n")
                            .with_context(|| format!("writing {}", out.display()))?;
                    }
                    report
                }
                _ => pipeline(&common)?.evaluate()?,
            };
            print_report(&report);
        }
        Cmd::End2end(c) => print_report(&pipeline(&c)?.end2end()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
