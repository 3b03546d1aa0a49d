use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use phenopipe_core::eval::evaluate;
use phenopipe_core::ner::{decode_grid, GridLabel, WordPairGrid};
use phenopipe_core::normalize::{Normalizer, NormalizerConfig};
use phenopipe_core::ontology::{
    flatten, observable_subset, DictEntry, FlatDictionary, PHENOTYPIC_ABNORMALITY,
};
use phenopipe_core::preprocess::{rewrite, AbbreviationLexicon};
use phenopipe_core::synthetic::{benchmark_queries, corpus, toy_ontology, ABBREVIATIONS_TSV};
use phenopipe_core::{AnnotationSet, Sentence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_grid(rng: &mut ChaCha8Rng, n: usize) -> WordPairGrid {
    let mut g = WordPairGrid::new(n);
    for i in 0..n {
        for j in 0..n {
            if rng.random_bool(0.08) {
                g.set(
                    i,
                    j,
                    if i < j {
                        GridLabel::Nnw
                    } else {
                        GridLabel::ThwKey
                    },
                );
            }
        }
    }
    g
}

fn grid_decode(c: &mut Criterion) {
    let mut group = c.benchmark_group("grid_decode");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [16, 48] {
        let words: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        let sentence = Sentence::from_text(&words.join(" "));
        let grids: Vec<WordPairGrid> = (0..16).map(|_| random_grid(&mut rng, n)).collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &grids, |b, grids| {
            b.iter(|| {
                grids
                    .iter()
                    .map(|g| decode_grid(black_box(g), &sentence).len())
                    .sum::<usize>()
            })
        });
    }
    group.finish();
}

fn retrieval(c: &mut Criterion) {
    let ontology = toy_ontology(3);
    let root = phenopipe_core::HpoId::new(PHENOTYPIC_ABNORMALITY).unwrap();
    let dict = flatten(
        &ontology,
        &observable_subset(&ontology, &root).unwrap(),
        "bench",
    );
    let big = FlatDictionary::new(
        (0..5000).map(|i| {
            let e = &dict.entries()[i % dict.len()];
            DictEntry {
                surface: format!("{} {}", e.surface, i / dict.len()),
                hpo_id: e.hpo_id.clone(),
            }
        }),
        "bench",
    );
    let queries: Vec<String> = benchmark_queries(&ontology, 3)
        .into_iter()
        .map(|q| q.text)
        .take(50)
        .collect();
    let mut group = c.benchmark_group("retrieve_top20");
    for (name, d) in [("toy", dict), ("5k", big)] {
        let index = Normalizer::untrained(NormalizerConfig::default(), d).unwrap();
        group.bench_function(name, |b| {
            b.iter(|| {
                queries
                    .iter()
                    .map(|q| index.retrieve(black_box(q), None, 20, 0).candidates.len())
                    .sum::<usize>()
            })
        });
    }
    group.finish();
}

fn scoring_and_rewrite(c: &mut Criterion) {
    let docs = corpus(400, 7);
    let gold: Vec<AnnotationSet> = docs.iter().map(|d| d.gold()).collect();
    let mut pred = gold.clone();
    for (i, set) in pred.iter_mut().enumerate() {
        if i % 3 == 0 {
            set.mentions.pop();
        }
    }
    c.bench_function("evaluate_400_docs", |b| {
        b.iter(|| evaluate(black_box(&gold), black_box(&pred)).unwrap())
    });

    let lexicon = AbbreviationLexicon::from_tsv(ABBREVIATIONS_TSV, true).unwrap();
    c.bench_function("rewrite_400_docs", |b| {
        b.iter(|| {
            docs.iter()
                .map(|d| {
                    rewrite(black_box(&d.text), Some(&lexicon), true)
                        .edits
                        .len()
                })
                .sum::<usize>()
        })
    });
}

criterion_group!(benches, grid_decode, retrieval, scoring_and_rewrite);
criterion_main!(benches);
