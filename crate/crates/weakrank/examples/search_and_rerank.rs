//! Exact top-N retrieval and k-reciprocal re-ranking on trained embeddings,
//! with MAR@10 before and after. Runs the reference benchmark end to end for
//! one model, so it takes a few seconds.
//!
//! ```bash
//! cargo run --example search_and_rerank
//! ```

use weakrank::attrs::{build_soft_targets, build_vocab, encode_corpus};
use weakrank::embedding::{l2_normalize, whiten_pair};
use weakrank::eval::{mar_at_k, RecallDenominator};
use weakrank::model::EncoderConfig;
use weakrank::search::{
    distance, k_reciprocal_rerank, top_n_search, Metric, RerankParams, SearchParams,
};
use weakrank::synth::{generate, reference_config};
use weakrank::trainer::{train, TrainConfig};

fn main() -> weakrank::Result<()> {
    let ds = generate(&reference_config())?;
    let raw_db = ds.db()?;
    let raw_queries = ds.queries()?;

    // Weak supervision from titles, then a quick encoder fit.
    let corpus = ds.db_corpus();
    let titles: Vec<&str> = corpus.iter().map(|(_, t)| t.as_str()).collect();
    let vocab = build_vocab(&titles, 1)?;
    let (items, _) = encode_corpus(&corpus, &vocab, true);
    let targets = build_soft_targets(items, vocab.len())?;
    let encoder = EncoderConfig {
        input_dim: raw_db.dim(),
        hidden_dim: 256,
        num_blocks: 2,
        embed_dim: 64,
        drop_path_prob: 0.1,
        head_init_scale: 0.01,
    };
    let trainer = TrainConfig {
        base_lr: 1e-3,
        epochs: 20,
        warmup_epochs: 5,
        batch_size: 64,
        ema_decay: 0.99,
        seed: 1,
        ..TrainConfig::default()
    };
    eprintln!("training encoder ({} samples)...", raw_db.num_rows());
    let (model, _) = train(&raw_db, &targets, &encoder, &trainer)?;

    // Embed with the EMA weights, whiten on database statistics, normalize.
    let (db, queries) = {
        let (db_w, q_w) = whiten_pair(
            &model.embed(&raw_db, true)?,
            &model.embed(&raw_queries, true)?,
            1e-6,
        )?;
        (l2_normalize(&db_w)?, l2_normalize(&q_w)?)
    };

    println!(
        "cosine distance of first query to its first relevant item: {:.4}",
        distance(
            queries.row(0),
            db.row(
                db.ids()
                    .iter()
                    .position(|id| id == &ds.gt.entries()[0].1[0])
                    .unwrap()
            ),
            Metric::Cosine,
        )?
    );

    // Retrieve a deep candidate list, then re-rank it down to the top 10.
    let params = SearchParams::new(Metric::Cosine, 100, 10)?;
    let initial = top_n_search(&queries, &db, &params)?;
    let reranked = k_reciprocal_rerank(
        &queries,
        &db,
        &initial,
        &RerankParams::default(), // k1 = 8, k2 = 5, alpha = 0.5
        10,
        Metric::Cosine,
    )?;

    let before = mar_at_k(&initial, &ds.gt, 10, RecallDenominator::Min)?;
    let after = mar_at_k(&reranked, &ds.gt, 10, RecallDenominator::Min)?;
    println!("MAR@10 before re-ranking: {:.4}", before.mar);
    println!("MAR@10 after  re-ranking: {:.4}", after.mar);

    // One query whose relevant item was promoted into the top 10.
    for (init, rer) in initial.iter().zip(&reranked) {
        let relevant = ds.gt.relevant(&init.query_id).unwrap();
        let hits = |entries: &[weakrank::search::RankedEntry]| {
            entries
                .iter()
                .take(10)
                .filter(|e| relevant.contains(&e.db_id))
                .count()
        };
        if hits(&rer.entries) > hits(&init.entries) {
            println!(
                "\nquery {}: re-ranking promoted a relevant item",
                init.query_id
            );
            let show = |entries: &[weakrank::search::RankedEntry]| -> Vec<String> {
                entries
                    .iter()
                    .take(5)
                    .map(|e| {
                        let mark = if relevant.contains(&e.db_id) { "*" } else { "" };
                        format!("{}{mark}", e.db_id)
                    })
                    .collect()
            };
            println!("  before: {:?}", show(&init.entries));
            println!("  after:  {:?}", show(&rer.entries));
            break;
        }
    }
    Ok(())
}
