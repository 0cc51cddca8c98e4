//! The whole retrieval pipeline end to end: mine attributes, train, embed,
//! whiten, normalize, concatenate a 2-member ensemble, search, re-rank, and
//! evaluate. Every stage writes its artifact, so the run can be resumed.
//!
//! ```bash
//! cargo run --example full_pipeline
//! ```

use weakrank::attrs::CountMode;
use weakrank::eval::RecallDenominator;
use weakrank::model::EncoderConfig;
use weakrank::pipeline::{run_pipeline, MemberConfig, PipelineConfig};
use weakrank::search::{Metric, RerankParams};
use weakrank::synth::{export, generate, reference_config};
use weakrank::trainer::TrainConfig;

fn main() -> weakrank::Result<()> {
    let root = std::env::temp_dir().join("weakrank_full_pipeline");
    let data = root.join("data");
    let work = root.join("work");
    let _ = std::fs::remove_dir_all(&work);

    export(&generate(&reference_config())?, &data)?;
    println!("dataset in {}", data.display());

    let pipeline = PipelineConfig {
        corpus: data.join("corpus.tsv"),
        queries: data.join("queries.emb"),
        db: data.join("db.emb"),
        gt: data.join("gt.tsv"),
        workdir: work.clone(),
        min_count: 1,
        lowercase: true,
        count_mode: CountMode::Occurrences,
        encoder: EncoderConfig {
            input_dim: 0, // inferred from the database features
            hidden_dim: 256,
            num_blocks: 2,
            embed_dim: 64,
            drop_path_prob: 0.1,
            head_init_scale: 0.01,
        },
        trainer: TrainConfig {
            base_lr: 1e-3,
            epochs: 20,
            warmup_epochs: 5,
            batch_size: 64,
            ema_decay: 0.99,
            seed: 1,
            ..TrainConfig::default()
        },
        use_ema: true,
        members: vec![
            MemberConfig { seed: 1, lr: 1e-3 },
            MemberConfig {
                seed: 2,
                lr: 1.2e-3,
            },
        ],
        metric: Metric::Cosine,
        top_n: 100,
        final_k: 10,
        rerank: Some(RerankParams::default()),
        eval_k: 10,
        denominator: RecallDenominator::Min,
        whiten_eps: 1e-6,
        threads: None,
    };

    let report = run_pipeline(&pipeline, false)?;
    println!(
        "\nMAR@{} = {:.4} over {} queries",
        report.k, report.mar, report.num_queries
    );
    println!("worst queries:");
    let mut per_query = report.per_query.clone();
    per_query.sort_by(|a, b| a.recall.total_cmp(&b.recall));
    for q in per_query.iter().take(3) {
        println!("  {}: recall {:.2}", q.id, q.recall);
    }
    println!("\nstage artifacts in {}:", work.display());
    let mut names: Vec<String> = std::fs::read_dir(&work)?
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    for name in names {
        println!("  {name}");
    }
    Ok(())
}
