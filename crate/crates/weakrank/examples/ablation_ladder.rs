//! Run the cumulative ablation ladder: baseline, +whitening, +rerank,
//! +ensemble, each evaluated as MAR@10 on the same synthetic benchmark.
//!
//! ```bash
//! cargo run --example ablation_ladder
//! ```

use weakrank::attrs::CountMode;
use weakrank::eval::RecallDenominator;
use weakrank::model::EncoderConfig;
use weakrank::pipeline::{ablation_run, write_ladder_csv, MemberConfig, PipelineConfig, LADDER};
use weakrank::search::{Metric, RerankParams};
use weakrank::synth::{export, generate, reference_config};
use weakrank::trainer::TrainConfig;

fn main() -> weakrank::Result<()> {
    let root = std::env::temp_dir().join("weakrank_ablation_ladder");
    let data = root.join("data");
    export(&generate(&reference_config())?, &data)?;

    let pipeline = PipelineConfig {
        corpus: data.join("corpus.tsv"),
        queries: data.join("queries.emb"),
        db: data.join("db.emb"),
        gt: data.join("gt.tsv"),
        workdir: root.join("work"),
        min_count: 1,
        lowercase: true,
        count_mode: CountMode::Occurrences,
        encoder: EncoderConfig {
            input_dim: 0,
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

    let variants: Vec<String> = LADDER.iter().map(|s| s.to_string()).collect();
    let rows = ablation_run(&pipeline, &variants)?;
    println!("{:<12} MAR@10", "variant");
    for (variant, mar) in &rows {
        println!("{variant:<12} {mar:.4}");
    }

    let csv = root.join("ladder.csv");
    write_ladder_csv(&rows, &csv)?;
    println!("\nladder written to {}", csv.display());
    Ok(())
}
