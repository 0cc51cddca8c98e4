//! Recall@k and MAR@k on a hand-checkable fixture, with both denominator
//! conventions for queries that have more matches than k.
//!
//! ```bash
//! cargo run --example evaluate_mar
//! ```

use weakrank::eval::{mar_at_k, recall_at_k, GroundTruth, RecallDenominator};
use weakrank::search::{RankedEntry, RankedList};

fn ranked(query_id: &str, ids: &[&str]) -> RankedList {
    RankedList {
        query_id: query_id.into(),
        entries: ids
            .iter()
            .enumerate()
            .map(|(rank, id)| RankedEntry {
                db_id: id.to_string(),
                distance: 0.1 * (rank + 1) as f64,
            })
            .collect(),
    }
}

fn main() -> weakrank::Result<()> {
    let gt = GroundTruth::new(vec![
        ("q_easy".into(), vec!["a".into()]),
        ("q_partial".into(), vec!["b".into(), "c".into()]),
        ("q_many".into(), (0..5).map(|i| format!("m{i}")).collect()),
    ])?;

    let lists = vec![
        ranked("q_easy", &["a", "x", "y"]),
        ranked("q_partial", &["b", "x", "y"]),
        ranked("q_many", &["m0", "m1", "m2", "x"]),
    ];

    let k = 3;
    for list in &lists {
        let relevant = gt.relevant(&list.query_id).unwrap();
        let min = recall_at_k(list, relevant, k, RecallDenominator::Min)?;
        let full = recall_at_k(list, relevant, k, RecallDenominator::Full)?;
        println!(
            "{:<10} |relevant| = {}: recall@{k} min = {min:.3}, full = {full:.3}",
            list.query_id,
            relevant.len()
        );
    }

    // q_many recovers 3 of 5 relevant items in the top 3: with the min
    // denominator that's 3/min(5,3) = 1.0; with the full one it's 3/5.
    let report = mar_at_k(&lists, &gt, k, RecallDenominator::Min)?;
    println!("\nMAR@{k} (min denominator) = {:.4}", report.mar);
    println!("report JSON:\n{}", report.to_json()?);
    Ok(())
}
