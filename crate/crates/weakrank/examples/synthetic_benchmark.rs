//! Generate the seeded synthetic instance-retrieval benchmark and export it
//! in the interchange formats the other stages consume.
//!
//! ```bash
//! cargo run --example synthetic_benchmark
//! ```

use weakrank::attrs::build_vocab;
use weakrank::eval::{mar_at_k, RecallDenominator};
use weakrank::search::{top_n_search, Metric, SearchParams};
use weakrank::synth::{export, generate, reference_config};

fn main() -> weakrank::Result<()> {
    let cfg = reference_config();
    let ds = generate(&cfg)?;
    println!(
        "generated {} classes x {} instances x {} views = {} feature rows (d = {})",
        cfg.num_coarse_classes,
        cfg.instances_per_class,
        cfg.views_per_instance,
        ds.views.len(),
        ds.features.dim()
    );

    let sample = &ds.views[0];
    println!(
        "sample view: id = {}, class = {}, title = {:?}",
        sample.id, sample.coarse_label, sample.title
    );

    // Titles carry a long-tailed token distribution.
    let corpus = ds.db_corpus();
    let titles: Vec<&str> = corpus.iter().map(|(_, t)| t.as_str()).collect();
    let vocab = build_vocab(&titles, 1)?;
    let counts: Vec<u64> = vocab.entries().iter().map(|e| e.count).collect();
    println!(
        "mined vocabulary: {} tokens, counts from {} down to {}",
        vocab.len(),
        counts.first().unwrap(),
        counts.last().unwrap()
    );

    // Raw features already allow some retrieval; the pipeline improves on it.
    let queries = ds.queries()?;
    let db = ds.db()?;
    let params = SearchParams::new(Metric::Cosine, 10, 10)?;
    let ranked = top_n_search(&queries, &db, &params)?;
    let report = mar_at_k(&ranked, &ds.gt, 10, RecallDenominator::Min)?;
    println!(
        "raw-feature MAR@10 = {:.4} over {} queries",
        report.mar, report.num_queries
    );

    let dir = std::env::temp_dir().join("weakrank_synthetic_benchmark");
    export(&ds, &dir)?;
    println!(
        "exported corpus/labels/embeddings/ground-truth to {}",
        dir.display()
    );
    Ok(())
}
