//! Training loop: adaptive-moment optimizer with decoupled weight decay,
//! linear warmup into cosine decay, and an EMA shadow of the weights.
//!
//! Training is sequential by design; a (seed, config, dataset) triple fully
//! determines every output.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attrs::{build_soft_targets, ItemAttributes, SoftTargets};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::model::{init_encoder, EncoderConfig, Mode, ModelWeights};
use crate::objective::{grad_poly_loss, poly_loss, LogitsBatch, ObjectiveConfig};

const ADAM_EPS: f64 = 1e-8;

/// Optimization hyper-parameters. Defaults are the large-scale recipe;
/// desk-scale runs usually override the learning rate and EMA decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub ema_decay: f64,
    pub poly_epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 64,
            epochs: 20,
            warmup_epochs: 5,
            ema_decay: 0.9999,
            poly_epsilon: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::InvalidConfig(
                "base_lr must be finite and >= 0".into(),
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0 < b && b < 1.0) {
                return Err(Error::InvalidConfig(format!("{name} must be in (0,1)")));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig(
                "batch_size and epochs must be >= 1".into(),
            ));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::InvalidConfig(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidConfig("ema_decay must be in [0,1)".into()));
        }
        if !(self.poly_epsilon >= 0.0 && self.poly_epsilon.is_finite()) {
            return Err(Error::InvalidConfig("poly_epsilon must be >= 0".into()));
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then cosine decay to ~0 at the final step.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    debug_assert!(step < total_steps && warmup_steps <= total_steps);
    if step < warmup_steps {
        base_lr * (step + 1) as f64 / warmup_steps as f64
    } else {
        let span = (total_steps - warmup_steps) as f64;
        let progress = (step - warmup_steps) as f64 / span;
        base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// First/second moment estimates, one pair per tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl AdamState {
    pub fn new(model: &ModelWeights) -> Self {
        AdamState {
            m: model
                .tensors
                .iter()
                .map(|t| vec![0.0; t.data.len()])
                .collect(),
            v: model
                .tensors
                .iter()
                .map(|t| vec![0.0; t.data.len()])
                .collect(),
            t: 0,
        }
    }
}

/// One decoupled-weight-decay Adam step. Decay is applied to the weights
/// before the moment update (w *= 1 - lr*wd); all parameters are decayed.
pub fn optimizer_step(
    model: &mut ModelWeights,
    grads: &[Vec<f32>],
    lr: f64,
    cfg: &TrainConfig,
    state: &mut AdamState,
) -> Result<()> {
    if grads.len() != model.tensors.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} tensors", model.tensors.len()),
            got: format!("{} tensors", grads.len()),
        });
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (ti, tensor) in model.tensors.iter_mut().enumerate() {
        if grads[ti].len() != tensor.data.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", tensor.data.len()),
                got: format!("{} values", grads[ti].len()),
            });
        }
        let m = &mut state.m[ti];
        let v = &mut state.v[ti];
        for (i, w) in tensor.data.iter_mut().enumerate() {
            let g = grads[ti][i] as f64;
            let mut w64 = *w as f64;
            w64 *= 1.0 - lr * cfg.weight_decay;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w64 -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            *w = w64 as f32;
        }
    }
    Ok(())
}

/// shadow <- decay * shadow + (1 - decay) * live, elementwise in f64.
pub fn ema_update(shadow: &mut [Vec<f64>], model: &ModelWeights, decay: f64) -> Result<()> {
    if shadow.len() != model.tensors.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} tensors", model.tensors.len()),
            got: format!("{} tensors", shadow.len()),
        });
    }
    for (s, t) in shadow.iter_mut().zip(&model.tensors) {
        if s.len() != t.data.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", t.data.len()),
                got: format!("{} values", s.len()),
            });
        }
        for (sv, &lv) in s.iter_mut().zip(&t.data) {
            *sv += (1.0 - decay) * (lv as f64 - *sv);
        }
    }
    Ok(())
}

/// Per-epoch mean losses and alignment diagnostics from one training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub skipped_rows: usize,
    pub num_samples: usize,
}

/// Train an encoder on (feature row, soft target) pairs joined by item id.
/// Feature rows without a target are skipped and counted in the report.
pub fn train(
    features: &EmbeddingMatrix,
    targets: &SoftTargets,
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<(ModelWeights, TrainReport)> {
    cfg.validate()?;
    enc_cfg.validate()?;
    if features.dim() != enc_cfg.input_dim {
        return Err(Error::DimensionMismatch {
            expected: enc_cfg.input_dim,
            got: features.dim(),
        });
    }
    let by_id: HashMap<&str, &ItemAttributes> = targets
        .rows()
        .iter()
        .map(|r| (r.item_id.as_str(), r))
        .collect();
    let mut sample_rows: Vec<(usize, &ItemAttributes)> = Vec::new();
    let mut skipped = 0usize;
    for (i, id) in features.ids().iter().enumerate() {
        match by_id.get(id.as_str()) {
            Some(item) => sample_rows.push((i, item)),
            None => skipped += 1,
        }
    }
    if sample_rows.is_empty() {
        return Err(Error::InvalidConfig(
            "no feature row has a matching target".into(),
        ));
    }

    let n = sample_rows.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    let objective = ObjectiveConfig::new(cfg.poly_epsilon)?;

    let mut model = init_encoder(enc_cfg, targets.num_classes(), cfg.seed)?;
    let mut state = AdamState::new(&model);
    // Separate stream so shuffling/drop-path draws are independent of init.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let dim = features.dim();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let rows = batch.len();
            let mut inputs = Vec::with_capacity(rows * dim);
            let mut items = Vec::with_capacity(rows);
            for &s in batch {
                let (feat_row, item) = sample_rows[s];
                inputs.extend_from_slice(features.row(feat_row));
                items.push(item.clone());
            }
            let batch_targets = build_soft_targets(items, targets.num_classes())?;
            let cache = model.forward_cached(&inputs, rows, Mode::Train, Some(&mut rng))?;
            let logits = LogitsBatch::new(
                cache.logits.iter().map(|&v| v as f64).collect(),
                rows,
                targets.num_classes(),
            )?;
            let loss = poly_loss(&logits, &batch_targets, objective)?;
            if !loss.is_finite() {
                return Err(Error::DivergenceDetected { step });
            }
            let dlogits: Vec<f32> = grad_poly_loss(&logits, &batch_targets, objective)?
                .into_iter()
                .map(|v| v as f32)
                .collect();
            let grads = model.backward(&cache, &dlogits);
            let lr = lr_at(step, total_steps, warmup_steps, cfg.base_lr);
            optimizer_step(&mut model, &grads, lr, cfg, &mut state)?;
            let shadow = std::mem::take(&mut model.shadow);
            let mut shadow = shadow;
            ema_update(&mut shadow, &model, cfg.ema_decay)?;
            model.shadow = shadow;
            epoch_loss += loss * rows as f64;
            step += 1;
        }
        epoch_losses.push(epoch_loss / n as f64);
    }
    Ok((
        model,
        TrainReport {
            epoch_losses,
            skipped_rows: skipped,
            num_samples: n,
        },
    ))
}
