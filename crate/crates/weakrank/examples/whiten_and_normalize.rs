//! Fit whitening on database features only, apply it to queries and database,
//! and L2-normalize, as the retrieval post-processing stack does.
//!
//! ```bash
//! cargo run --example whiten_and_normalize
//! ```

use rand::{Rng, SeedableRng};
use weakrank::embedding::{
    apply_whitening, compute_mean_cov, fit_whitening, l2_normalize, EmbeddingMatrix,
};

fn correlated_matrix(prefix: &str, n: usize, seed: u64) -> EmbeddingMatrix {
    // Two dominant latent factors smeared over four dimensions plus a little
    // independent jitter: strongly correlated but full rank.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * 4);
    for _ in 0..n {
        let a: f32 = rng.random_range(-1.0..1.0);
        let b: f32 = rng.random_range(-1.0..1.0);
        let mut row = [3.0 * a + b, 3.0 * a - b, 0.5 * b + 1.0, a + 0.1 * b];
        for v in row.iter_mut() {
            *v += rng.random_range(-0.05f32..0.05);
        }
        data.extend_from_slice(&row);
    }
    let ids = (0..n).map(|i| format!("{prefix}{i}")).collect();
    EmbeddingMatrix::new(ids, data, 4).unwrap()
}

fn print_cov(label: &str, cov: &[f64], d: usize) {
    println!("{label}:");
    for r in 0..d {
        let row: Vec<String> = (0..d).map(|c| format!("{:+.3}", cov[r * d + c])).collect();
        println!("  [{}]", row.join(", "));
    }
}

fn main() -> weakrank::Result<()> {
    let db = correlated_matrix("db", 400, 1);
    let queries = correlated_matrix("q", 10, 2);

    let (mean, cov) = compute_mean_cov(&db)?;
    print_cov("database covariance before whitening", &cov, 4);

    // Statistics come from the database only; queries reuse the transform.
    let transform = fit_whitening(&mean, &cov, 1e-6)?;
    let db_white = apply_whitening(&db, &transform)?;
    let q_white = apply_whitening(&queries, &transform)?;

    let (_, cov_after) = compute_mean_cov(&db_white)?;
    print_cov("\ndatabase covariance after whitening", &cov_after, 4);

    let db_unit = l2_normalize(&db_white)?;
    let q_unit = l2_normalize(&q_white)?;
    let norm = |m: &EmbeddingMatrix| -> f64 {
        m.row(0)
            .iter()
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    println!(
        "\nafter L2 normalization: first db row norm = {:.6}, first query norm = {:.6}",
        norm(&db_unit),
        norm(&q_unit)
    );
    Ok(())
}
