//! Soft multi-label classification objectives.
//!
//! The cross-entropy takes softmax probabilities against sparse soft targets
//! (1/K mass per present attribute). The poly variant adds an epsilon-scaled
//! sum of (1 - Y*P) terms. Everything is computed in f64 via log-softmax with
//! max subtraction; reductions are row-major sequential so results are
//! bit-stable regardless of caller parallelism.

use crate::attrs::SoftTargets;
use crate::error::{Error, Result};

/// A dense B x T matrix of finite logits, row-major.
#[derive(Debug, Clone)]
pub struct LogitsBatch {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl LogitsBatch {
    pub fn new(data: Vec<f64>, rows: usize, cols: usize) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: format!("{rows}x{cols}"),
                got: format!("{} values", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteInput { context: "logits" });
        }
        Ok(LogitsBatch { data, rows, cols })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// PolyLoss regularization scale.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveConfig {
    pub epsilon: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        // Table-1 recipe value.
        ObjectiveConfig { epsilon: 0.5 }
    }
}

impl ObjectiveConfig {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "poly epsilon must be finite and >= 0, got {epsilon}"
            )));
        }
        Ok(ObjectiveConfig { epsilon })
    }
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - max;
        sum += o.exp();
    }
    let log_sum = sum.ln();
    for o in out.iter_mut() {
        *o -= log_sum;
    }
}

/// Row-wise softmax probabilities. Rows sum to 1 within 1e-7.
pub fn softmax(logits: &LogitsBatch) -> Vec<f64> {
    let mut probs = vec![0.0; logits.rows * logits.cols];
    let mut scratch = vec![0.0; logits.cols];
    for i in 0..logits.rows {
        log_softmax_row(logits.row(i), &mut scratch);
        for (p, &ls) in probs[i * logits.cols..(i + 1) * logits.cols]
            .iter_mut()
            .zip(&scratch)
        {
            *p = ls.exp();
        }
    }
    probs
}

fn check_shapes(logits: &LogitsBatch, targets: &SoftTargets) -> Result<()> {
    if logits.rows != targets.num_samples() || logits.cols != targets.num_classes() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", targets.num_samples(), targets.num_classes()),
            got: format!("{}x{}", logits.rows, logits.cols),
        });
    }
    Ok(())
}

/// -(1/B) sum_i sum_t Y_t log P_t with Y the 1/K soft targets.
pub fn soft_cross_entropy(logits: &LogitsBatch, targets: &SoftTargets) -> Result<f64> {
    check_shapes(logits, targets)?;
    let mut scratch = vec![0.0; logits.cols];
    let mut total = 0.0;
    for (i, item) in targets.rows().iter().enumerate() {
        log_softmax_row(logits.row(i), &mut scratch);
        let y = 1.0 / item.k() as f64;
        for &t in &item.attr_ids {
            total -= y * scratch[t];
        }
    }
    Ok(total / logits.rows as f64)
}

/// Cross-entropy plus (epsilon/B) sum_i sum_t (1 - Y_t P_t), summed over all
/// T classes as written (absent classes contribute their full 1).
pub fn poly_loss(logits: &LogitsBatch, targets: &SoftTargets, cfg: ObjectiveConfig) -> Result<f64> {
    check_shapes(logits, targets)?;
    let ce = soft_cross_entropy(logits, targets)?;
    let probs = softmax(logits);
    let cols = logits.cols;
    let mut reg = 0.0;
    for (i, item) in targets.rows().iter().enumerate() {
        let y = 1.0 / item.k() as f64;
        let mut next = 0;
        let prow = &probs[i * cols..(i + 1) * cols];
        for (t, &p) in prow.iter().enumerate() {
            let yt = if next < item.attr_ids.len() && item.attr_ids[next] == t {
                next += 1;
                y
            } else {
                0.0
            };
            reg += 1.0 - yt * p;
        }
    }
    Ok(ce + cfg.epsilon * reg / logits.rows as f64)
}

/// Gradient of [`poly_loss`] with respect to the logits, B x T row-major.
///
/// Per row: g_j = (P_j * sum(Y) - Y_j - eps * P_j * (Y_j - sum_t Y_t P_t)) / B.
pub fn grad_poly_loss(
    logits: &LogitsBatch,
    targets: &SoftTargets,
    cfg: ObjectiveConfig,
) -> Result<Vec<f64>> {
    check_shapes(logits, targets)?;
    let probs = softmax(logits);
    let cols = logits.cols;
    let inv_b = 1.0 / logits.rows as f64;
    let mut grad = vec![0.0; probs.len()];
    for (i, item) in targets.rows().iter().enumerate() {
        let y = 1.0 / item.k() as f64;
        let prow = &probs[i * cols..(i + 1) * cols];
        let sum_y = y * item.k() as f64;
        let s: f64 = item.attr_ids.iter().map(|&t| y * prow[t]).sum();
        let grow = &mut grad[i * cols..(i + 1) * cols];
        for (g, &p) in grow.iter_mut().zip(prow) {
            *g = (p * sum_y + cfg.epsilon * p * s) * inv_b;
        }
        for &t in &item.attr_ids {
            grow[t] -= (y + cfg.epsilon * prow[t] * y) * inv_b;
        }
    }
    Ok(grad)
}

/// Result of the finite-difference gradient audit.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOutcome {
    pub instances: usize,
    pub max_rel_error: f64,
}

/// Compare [`grad_poly_loss`] against central finite differences of
/// [`poly_loss`] (step 1e-4) on seeded random instances with B <= 4 and
/// T <= 16. Relative error uses a 1e-3 denominator floor for near-zero
/// coordinates. Fails when the worst coordinate exceeds 1e-4.
pub fn finite_difference_check(instances: usize, seed: u64) -> Result<GradCheckOutcome> {
    use crate::attrs::{build_soft_targets, ItemAttributes};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    let step = 1e-4;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    for _ in 0..instances {
        let rows = rng.random_range(1..=4usize);
        let cols = rng.random_range(2..=16usize);
        let values: Vec<f64> = (0..rows * cols)
            .map(|_| rng.random_range(-3.0..3.0))
            .collect();
        let mut items = Vec::with_capacity(rows);
        for i in 0..rows {
            let k = rng.random_range(1..=cols.min(4));
            let mut ids: Vec<usize> = (0..cols).collect();
            ids.shuffle(&mut rng);
            ids.truncate(k);
            ids.sort_unstable();
            items.push(ItemAttributes {
                item_id: format!("i{i}"),
                attr_ids: ids,
            });
        }
        let targets = build_soft_targets(items, cols)?;
        let cfg = ObjectiveConfig {
            epsilon: rng.random_range(0.0..1.0),
        };
        let logits = LogitsBatch::new(values.clone(), rows, cols)?;
        let analytic = grad_poly_loss(&logits, &targets, cfg)?;
        for j in 0..values.len() {
            let mut plus = values.clone();
            plus[j] += step;
            let mut minus = values.clone();
            minus[j] -= step;
            let lp = poly_loss(&LogitsBatch::new(plus, rows, cols)?, &targets, cfg)?;
            let lm = poly_loss(&LogitsBatch::new(minus, rows, cols)?, &targets, cfg)?;
            let numeric = (lp - lm) / (2.0 * step);
            let rel = (analytic[j] - numeric).abs() / numeric.abs().max(1e-3);
            max_rel = max_rel.max(rel);
        }
    }
    if max_rel >= 1e-4 {
        return Err(Error::InvalidConfig(format!(
            "gradient check failed: max relative error {max_rel:.3e} >= 1e-4"
        )));
    }
    Ok(GradCheckOutcome {
        instances,
        max_rel_error: max_rel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attrs::{build_soft_targets, ItemAttributes};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn targets_from(ids: &[&[usize]], num_classes: usize) -> SoftTargets {
        let items = ids
            .iter()
            .enumerate()
            .map(|(i, attr_ids)| ItemAttributes {
                item_id: format!("i{i}"),
                attr_ids: attr_ids.to_vec(),
            })
            .collect();
        build_soft_targets(items, num_classes).unwrap()
    }

    #[test]
    fn softmax_symmetry_and_shift() {
        let l = LogitsBatch::new(vec![0.0, 0.0], 1, 2).unwrap();
        assert_eq!(softmax(&l), vec![0.5, 0.5]);
        let l = LogitsBatch::new(vec![3.7; 4], 1, 4).unwrap();
        for p in softmax(&l) {
            assert_abs_diff_eq!(p, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let l = LogitsBatch::new(vec![1f64.ln(), 2f64.ln(), 3f64.ln()], 1, 3).unwrap();
        let p = softmax(&l);
        assert_abs_diff_eq!(p[0], 1.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 2.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[2], 3.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn logits_reject_non_finite() {
        assert!(matches!(
            LogitsBatch::new(vec![0.0, f64::NAN], 1, 2),
            Err(Error::NonFiniteInput { .. })
        ));
    }

    #[test]
    fn cross_entropy_confident_correct() {
        let t = targets_from(&[&[0]], 2);
        let l = LogitsBatch::new(vec![20.0, -20.0], 1, 2).unwrap();
        assert!(soft_cross_entropy(&l, &t).unwrap() < 1e-8);
    }

    #[test]
    fn cross_entropy_uniform_two_attrs() {
        let t = targets_from(&[&[0, 1]], 4);
        let l = LogitsBatch::new(vec![0.0; 4], 1, 4).unwrap();
        assert_abs_diff_eq!(
            soft_cross_entropy(&l, &t).unwrap(),
            4f64.ln(),
            epsilon = 1e-6
        );
    }

    #[test]
    fn cross_entropy_batch_mean() {
        // Rows from the two cases above; the mean is ~ln(4)/2.
        let t = targets_from(&[&[0], &[0, 1]], 4);
        let l =
            LogitsBatch::new(vec![50.0, -50.0, -50.0, -50.0, 0.0, 0.0, 0.0, 0.0], 2, 4).unwrap();
        assert_abs_diff_eq!(
            soft_cross_entropy(&l, &t).unwrap(),
            4f64.ln() / 2.0,
            epsilon = 1e-6
        );
    }

    #[test]
    fn cross_entropy_shape_mismatch() {
        let t = targets_from(&[&[0]], 2);
        let l = LogitsBatch::new(vec![0.0; 3], 1, 3).unwrap();
        assert!(matches!(
            soft_cross_entropy(&l, &t),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn poly_zero_epsilon_equals_cross_entropy() {
        let t = targets_from(&[&[0, 2], &[1]], 5);
        let l = LogitsBatch::new(
            vec![0.3, -1.2, 0.8, 2.0, -0.5, 1.1, 0.0, -0.7, 0.2, 0.9],
            2,
            5,
        )
        .unwrap();
        let ce = soft_cross_entropy(&l, &t).unwrap();
        let poly = poly_loss(&l, &t, ObjectiveConfig { epsilon: 0.0 }).unwrap();
        assert_eq!(ce, poly);
    }

    #[test]
    fn poly_uniform_hand_value() {
        let t = targets_from(&[&[0, 1]], 4);
        let l = LogitsBatch::new(vec![0.0; 4], 1, 4).unwrap();
        let got = poly_loss(&l, &t, ObjectiveConfig { epsilon: 0.5 }).unwrap();
        // ln 4 + 0.5 * (4 - 0.25)
        assert_abs_diff_eq!(got, 3.261294, epsilon = 1e-6);
    }

    #[test]
    fn poly_confident_one_hot() {
        let t = targets_from(&[&[0]], 2);
        let l = LogitsBatch::new(vec![20.0, -20.0], 1, 2).unwrap();
        let got = poly_loss(&l, &t, ObjectiveConfig { epsilon: 0.5 }).unwrap();
        assert_abs_diff_eq!(got, 0.5, epsilon = 1e-6);
    }

    fn finite_difference_grad(
        logits: &LogitsBatch,
        targets: &SoftTargets,
        cfg: ObjectiveConfig,
        step: f64,
    ) -> Vec<f64> {
        let mut grad = vec![0.0; logits.data().len()];
        for j in 0..logits.data().len() {
            let mut plus = logits.data().to_vec();
            plus[j] += step;
            let mut minus = logits.data().to_vec();
            minus[j] -= step;
            let lp = poly_loss(
                &LogitsBatch::new(plus, logits.rows(), logits.cols()).unwrap(),
                targets,
                cfg,
            )
            .unwrap();
            let lm = poly_loss(
                &LogitsBatch::new(minus, logits.rows(), logits.cols()).unwrap(),
                targets,
                cfg,
            )
            .unwrap();
            grad[j] = (lp - lm) / (2.0 * step);
        }
        grad
    }

    #[test]
    fn grad_one_hot_epsilon_zero_is_p_minus_y() {
        let t = targets_from(&[&[1]], 3);
        let l = LogitsBatch::new(vec![0.4, -0.3, 1.7], 1, 3).unwrap();
        let g = grad_poly_loss(&l, &t, ObjectiveConfig { epsilon: 0.0 }).unwrap();
        let p = softmax(&l);
        let y = [0.0, 1.0, 0.0];
        for j in 0..3 {
            assert_abs_diff_eq!(g[j], p[j] - y[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn grad_zero_at_stationary_point() {
        // Uniform targets + uniform logits is a stationary point.
        let t = targets_from(&[&[0, 1, 2, 3]], 4);
        let l = LogitsBatch::new(vec![0.0; 4], 1, 4).unwrap();
        let g = grad_poly_loss(&l, &t, ObjectiveConfig { epsilon: 0.5 }).unwrap();
        for v in g {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn grad_matches_finite_differences() {
        let t = targets_from(&[&[0, 3], &[2], &[1, 2, 4]], 5);
        let l = LogitsBatch::new(
            vec![
                0.3, -1.2, 0.8, 2.0, -0.5, 1.1, 0.0, -0.7, 0.2, 0.9, -0.4, 0.6, 1.4, -1.0, 0.1,
            ],
            3,
            5,
        )
        .unwrap();
        let cfg = ObjectiveConfig { epsilon: 0.5 };
        let analytic = grad_poly_loss(&l, &t, cfg).unwrap();
        let numeric = finite_difference_grad(&l, &t, cfg, 1e-4);
        for (a, n) in analytic.iter().zip(&numeric) {
            let denom = n.abs().max(1e-3);
            assert!((a - n).abs() / denom < 1e-4, "analytic {a} vs fd {n}");
        }
    }

    #[test]
    fn poly_decomposition_term_by_term() {
        let t = targets_from(&[&[0, 2], &[1]], 4);
        let l = LogitsBatch::new(vec![0.3, -1.2, 0.8, 2.0, -0.5, 1.1, 0.0, -0.7], 2, 4).unwrap();
        let eps = 0.7;
        let ce = soft_cross_entropy(&l, &t).unwrap();
        let poly = poly_loss(&l, &t, ObjectiveConfig { epsilon: eps }).unwrap();
        // Reduced form of the regularizer: T - sum_t Y_t P_t per row.
        let p = softmax(&l);
        let mut reg = 0.0;
        for (i, item) in t.rows().iter().enumerate() {
            let y = 1.0 / item.k() as f64;
            let s: f64 = item.attr_ids.iter().map(|&c| y * p[i * 4 + c]).sum();
            reg += 4.0 - s;
        }
        assert_abs_diff_eq!(poly - ce, eps * reg / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn finite_difference_suite_passes() {
        let outcome = finite_difference_check(20, 99).unwrap();
        assert_eq!(outcome.instances, 20);
        assert!(outcome.max_rel_error < 1e-4);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(values in proptest::collection::vec(-30.0f64..30.0, 8)) {
            let l = LogitsBatch::new(values, 2, 4).unwrap();
            let p = softmax(&l);
            for i in 0..2 {
                let s: f64 = p[i * 4..(i + 1) * 4].iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-7);
            }
        }

        #[test]
        fn losses_shift_invariant(
            values in proptest::collection::vec(-10.0f64..10.0, 6),
            shift in -100.0f64..100.0,
        ) {
            let t = targets_from(&[&[0, 2], &[1]], 3);
            let cfg = ObjectiveConfig { epsilon: 0.5 };
            let base = LogitsBatch::new(values.clone(), 2, 3).unwrap();
            let shifted = LogitsBatch::new(
                values.iter().map(|v| v + shift).collect(),
                2,
                3,
            ).unwrap();
            let (l0, l1) = (
                poly_loss(&base, &t, cfg).unwrap(),
                poly_loss(&shifted, &t, cfg).unwrap(),
            );
            prop_assert!((l0 - l1).abs() < 1e-6);
            let (g0, g1) = (
                grad_poly_loss(&base, &t, cfg).unwrap(),
                grad_poly_loss(&shifted, &t, cfg).unwrap(),
            );
            for (a, b) in g0.iter().zip(&g1) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
