//! Train the residual-MLP encoder on synthetic features with soft targets,
//! then embed with the live and EMA weights.
//!
//! ```bash
//! cargo run --example train_encoder
//! ```

use weakrank::attrs::{build_soft_targets, build_vocab, encode_corpus};
use weakrank::model::EncoderConfig;
use weakrank::synth::{generate, SynthConfig};
use weakrank::trainer::{lr_at, train, TrainConfig};

fn main() -> weakrank::Result<()> {
    let synth = SynthConfig {
        num_coarse_classes: 5,
        instances_per_class: 20,
        views_per_instance: 3,
        feature_dim: 32,
        vocab_size: 80,
        attrs_per_instance: 4,
        class_signal: 1.0,
        instance_signal: 1.0,
        noise_sigma: 0.5,
        seed: 3,
    };
    let ds = generate(&synth)?;
    let db = ds.db()?;

    let corpus = ds.db_corpus();
    let titles: Vec<&str> = corpus.iter().map(|(_, t)| t.as_str()).collect();
    let vocab = build_vocab(&titles, 1)?;
    let (items, _) = encode_corpus(&corpus, &vocab, true);
    let targets = build_soft_targets(items, vocab.len())?;

    let encoder = EncoderConfig {
        input_dim: db.dim(),
        hidden_dim: 64,
        num_blocks: 2,
        embed_dim: 32,
        drop_path_prob: 0.1,
        head_init_scale: 0.01,
    };
    let trainer = TrainConfig {
        base_lr: 1e-3,
        epochs: 10,
        warmup_epochs: 2,
        batch_size: 32,
        ema_decay: 0.98,
        seed: 1,
        ..TrainConfig::default()
    };

    // The schedule warms up linearly, then follows a cosine to ~zero.
    let steps_per_epoch = db.num_rows().div_ceil(trainer.batch_size);
    let total = trainer.epochs * steps_per_epoch;
    let warmup = trainer.warmup_epochs * steps_per_epoch;
    println!("learning-rate schedule samples:");
    for step in [0, warmup - 1, warmup + (total - warmup) / 2, total - 1] {
        println!(
            "  step {step:>3}: lr = {:.6}",
            lr_at(step, total, warmup, trainer.base_lr)
        );
    }

    let (model, report) = train(&db, &targets, &encoder, &trainer)?;
    println!("\nper-epoch mean poly loss:");
    for (epoch, loss) in report.epoch_losses.iter().enumerate() {
        println!("  epoch {epoch:>2}: {loss:.4}");
    }

    let live = model.embed(&db, false)?;
    let ema = model.embed(&db, true)?;
    println!(
        "\nembeddings: {} rows x {} dims (live), EMA copy differs by max {:.2e}",
        live.num_rows(),
        live.dim(),
        live.data()
            .iter()
            .zip(ema.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max)
    );

    let dir = std::env::temp_dir().join("weakrank_train_encoder_example");
    std::fs::create_dir_all(&dir)?;
    let ckpt = dir.join("model.ckpt");
    model.save(&ckpt)?;
    let loaded = weakrank::model::ModelWeights::load(&ckpt)?;
    let reloaded = loaded.embed(&db, false)?;
    assert_eq!(live.data(), reloaded.data());
    println!("checkpoint round trip OK: {}", ckpt.display());
    Ok(())
}
