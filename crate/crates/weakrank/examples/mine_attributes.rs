//! Mine pseudo-attributes from product titles and build soft targets.
//!
//! ```bash
//! cargo run --example mine_attributes
//! ```

use weakrank::attrs::{build_soft_targets, build_vocab, encode_item, histogram, tokenize};

fn main() -> weakrank::Result<()> {
    let corpus = [
        ("p1", "Apple iPhone 13 Pro 128GB blue"),
        ("p2", "apple iphone 13 mini 256gb RED"),
        ("p3", "Samsung Galaxy S22 128gb black"),
        ("p4", "samsung galaxy s22 ultra 256gb"),
        ("p5", "Apple iPhone 13 Pro case blue"),
        ("p6", "galaxy s22 case black leather"),
    ];

    println!("tokenized first title: {:?}", tokenize(corpus[0].1));

    // Keep tokens that appear strictly more than once.
    let titles: Vec<&str> = corpus.iter().map(|(_, t)| *t).collect();
    let vocab = build_vocab(&titles, 1)?;
    println!("\nvocabulary ({} pseudo-attributes):", vocab.len());
    for (token, count) in histogram(&vocab, 100) {
        println!("  {token:<8} count {count}");
    }

    // Per-item attribute sets; items without any vocabulary token are dropped.
    let mut items = Vec::new();
    for (id, title) in &corpus {
        match encode_item(id, title, &vocab) {
            Some(item) => items.push(item),
            None => println!("  (dropped {id}: no vocabulary token)"),
        }
    }

    let targets = build_soft_targets(items, vocab.len())?;
    println!("\nsoft targets (each row sums to 1, mass 1/K per attribute):");
    for i in 0..targets.num_samples() {
        let row = &targets.rows()[i];
        println!(
            "  {}: K={} attrs={:?} -> target value {:.3}",
            row.item_id,
            row.k(),
            row.attr_ids,
            1.0 / row.k() as f64
        );
    }
    Ok(())
}
