//! Residual-MLP encoder: a linear stem, residual blocks with stochastic
//! depth, a linear projection to the retrieval embedding, and a
//! classification head over the pseudo-attribute classes.
//!
//! The retrieval feature is the pre-head representation. Weights are f32;
//! the EMA shadow is kept in f64 and rounded only when written to disk.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};

const CKPT_MAGIC: &[u8; 4] = b"WRKC";
const CKPT_VERSION: u32 = 1;

/// Encoder architecture parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub embed_dim: usize,
    pub drop_path_prob: f64,
    pub head_init_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 64,
            hidden_dim: 256,
            num_blocks: 2,
            embed_dim: 64,
            drop_path_prob: 0.4,
            head_init_scale: 0.01,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidConfig("encoder dims must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.drop_path_prob) {
            return Err(Error::InvalidConfig(format!(
                "drop_path_prob must be in [0,1), got {}",
                self.drop_path_prob
            )));
        }
        if !(self.head_init_scale >= 0.0 && self.head_init_scale.is_finite()) {
            return Err(Error::InvalidConfig(
                "head_init_scale must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Forward-pass mode: training applies stochastic depth, eval is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    fn zeros(name: &str, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            name: name.to_string(),
            shape,
            data: vec![0.0; len],
        }
    }
}

/// Live parameter tensors plus an EMA shadow copy of identical shapes.
///
/// Tensor order is fixed: stem.w, stem.b, then per block w1, b1, w2, b2,
/// then proj.w, proj.b, head.w, head.b.
#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub cfg: EncoderConfig,
    pub num_classes: usize,
    pub tensors: Vec<Tensor>,
    pub shadow: Vec<Vec<f64>>,
}

fn tensor_layout(cfg: &EncoderConfig, num_classes: usize) -> Vec<(String, Vec<usize>)> {
    let mut layout = vec![
        ("stem.w".to_string(), vec![cfg.hidden_dim, cfg.input_dim]),
        ("stem.b".to_string(), vec![cfg.hidden_dim]),
    ];
    for i in 0..cfg.num_blocks {
        layout.push((format!("block{i}.w1"), vec![cfg.hidden_dim, cfg.hidden_dim]));
        layout.push((format!("block{i}.b1"), vec![cfg.hidden_dim]));
        layout.push((format!("block{i}.w2"), vec![cfg.hidden_dim, cfg.hidden_dim]));
        layout.push((format!("block{i}.b2"), vec![cfg.hidden_dim]));
    }
    layout.push(("proj.w".to_string(), vec![cfg.embed_dim, cfg.hidden_dim]));
    layout.push(("proj.b".to_string(), vec![cfg.embed_dim]));
    layout.push(("head.w".to_string(), vec![num_classes, cfg.embed_dim]));
    layout.push(("head.b".to_string(), vec![num_classes]));
    layout
}

/// Fan-in-scaled normal init for weights, zero biases, and a head scaled by
/// `head_init_scale` after drawing. Deterministic given the seed.
pub fn init_encoder(cfg: &EncoderConfig, num_classes: usize, seed: u64) -> Result<ModelWeights> {
    cfg.validate()?;
    if num_classes == 0 {
        return Err(Error::InvalidConfig("num_classes must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::new();
    for (name, shape) in tensor_layout(cfg, num_classes) {
        let mut t = Tensor::zeros(&name, shape);
        if t.shape.len() == 2 {
            let fan_in = t.shape[1] as f64;
            let normal = Normal::new(0.0, (1.0 / fan_in).sqrt()).expect("valid std");
            for v in t.data.iter_mut() {
                *v = normal.sample(&mut rng) as f32;
            }
            if name == "head.w" {
                for v in t.data.iter_mut() {
                    *v = (*v as f64 * cfg.head_init_scale) as f32;
                }
            }
        }
        tensors.push(t);
    }
    let shadow = tensors
        .iter()
        .map(|t| t.data.iter().map(|&v| v as f64).collect())
        .collect();
    Ok(ModelWeights {
        cfg: *cfg,
        num_classes,
        tensors,
        shadow,
    })
}

fn linear_forward(
    w: &[f32],
    b: &[f32],
    x: &[f32],
    rows: usize,
    in_dim: usize,
    out_dim: usize,
) -> Vec<f32> {
    let mut y = vec![0.0f32; rows * out_dim];
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let yr = &mut y[r * out_dim..(r + 1) * out_dim];
        for (o, yo) in yr.iter_mut().enumerate() {
            let wr = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = b[o];
            for (xi, wi) in xr.iter().zip(wr) {
                acc += xi * wi;
            }
            *yo = acc;
        }
    }
    y
}

/// Everything the backward pass needs from one forward evaluation.
pub(crate) struct ForwardCache {
    pub rows: usize,
    pub inputs: Vec<f32>,
    /// Per block: (input, pre-activation, post-activation, mask).
    pub blocks: Vec<BlockCache>,
    pub trunk_out: Vec<f32>,
    pub embeddings: Vec<f32>,
    pub logits: Vec<f32>,
}

pub(crate) struct BlockCache {
    pub input: Vec<f32>,
    pub pre_act: Vec<f32>,
    pub post_act: Vec<f32>,
    pub mask: Vec<f32>,
}

impl ModelWeights {
    fn tensor(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    fn block_base(&self, b: usize) -> usize {
        2 + b * 4
    }

    pub(crate) fn forward_cached(
        &self,
        inputs: &[f32],
        rows: usize,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardCache> {
        let cfg = &self.cfg;
        if inputs.len() != rows * cfg.input_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{rows}x{}", cfg.input_dim),
                got: format!("{} values", inputs.len()),
            });
        }
        if !inputs.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteInput {
                context: "encoder inputs",
            });
        }
        let p = cfg.drop_path_prob;
        if mode == Mode::Train && p > 0.0 && rng.is_none() {
            return Err(Error::InvalidConfig(
                "train-mode forward with drop_path_prob > 0 needs an rng".into(),
            ));
        }

        let stem = self.tensor(0);
        let mut x = linear_forward(
            &stem.data,
            &self.tensor(1).data,
            inputs,
            rows,
            cfg.input_dim,
            cfg.hidden_dim,
        );
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for b in 0..cfg.num_blocks {
            let base = self.block_base(b);
            let pre_act = linear_forward(
                &self.tensor(base).data,
                &self.tensor(base + 1).data,
                &x,
                rows,
                cfg.hidden_dim,
                cfg.hidden_dim,
            );
            let post_act: Vec<f32> = pre_act.iter().map(|&v| v.max(0.0)).collect();
            let branch = linear_forward(
                &self.tensor(base + 2).data,
                &self.tensor(base + 3).data,
                &post_act,
                rows,
                cfg.hidden_dim,
                cfg.hidden_dim,
            );
            // Per-sample Bernoulli mask scaled by 1/(1-p); identity at eval.
            let mask: Vec<f32> = if mode == Mode::Train && p > 0.0 {
                let rng = rng.as_deref_mut().expect("checked above");
                let keep = 1.0 - p;
                (0..rows)
                    .map(|_| {
                        use rand::Rng;
                        if rng.random::<f64>() < keep {
                            (1.0 / keep) as f32
                        } else {
                            0.0
                        }
                    })
                    .collect()
            } else {
                vec![1.0; rows]
            };
            let input_snapshot = x.clone();
            for r in 0..rows {
                let m = mask[r];
                if m != 0.0 {
                    for h in 0..cfg.hidden_dim {
                        x[r * cfg.hidden_dim + h] += m * branch[r * cfg.hidden_dim + h];
                    }
                }
            }
            blocks.push(BlockCache {
                input: input_snapshot,
                pre_act,
                post_act,
                mask,
            });
        }

        let proj_base = 2 + cfg.num_blocks * 4;
        let embeddings = linear_forward(
            &self.tensor(proj_base).data,
            &self.tensor(proj_base + 1).data,
            &x,
            rows,
            cfg.hidden_dim,
            cfg.embed_dim,
        );
        let logits = linear_forward(
            &self.tensor(proj_base + 2).data,
            &self.tensor(proj_base + 3).data,
            &embeddings,
            rows,
            cfg.embed_dim,
            self.num_classes,
        );
        if !logits.iter().all(|v| v.is_finite()) || !embeddings.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteActivation);
        }
        Ok(ForwardCache {
            rows,
            inputs: inputs.to_vec(),
            blocks,
            trunk_out: x,
            embeddings,
            logits,
        })
    }

    /// Run the encoder; returns (embeddings, logits), both row-major.
    pub fn forward(
        &self,
        inputs: &[f32],
        rows: usize,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<f32>, Vec<f32>)> {
        let cache = self.forward_cached(inputs, rows, mode, rng)?;
        Ok((cache.embeddings, cache.logits))
    }

    /// Gradients for every tensor (same order as `tensors`) given
    /// dLoss/dlogits. Consumes the forward cache.
    pub(crate) fn backward(&self, cache: &ForwardCache, dlogits: &[f32]) -> Vec<Vec<f32>> {
        let cfg = &self.cfg;
        let rows = cache.rows;
        let h = cfg.hidden_dim;
        let mut grads: Vec<Vec<f32>> = self
            .tensors
            .iter()
            .map(|t| vec![0.0f32; t.data.len()])
            .collect();

        let proj_base = 2 + cfg.num_blocks * 4;
        // Head.
        let (gh, rest) = grads.split_at_mut(proj_base + 3);
        let d_emb = linear_backward(
            &self.tensor(proj_base + 2).data,
            &cache.embeddings,
            dlogits,
            rows,
            cfg.embed_dim,
            self.num_classes,
            &mut gh[proj_base + 2],
            &mut rest[0],
        );
        // Projection.
        let (gp, rest) = grads.split_at_mut(proj_base + 1);
        let mut dx = linear_backward(
            &self.tensor(proj_base).data,
            &cache.trunk_out,
            &d_emb,
            rows,
            h,
            cfg.embed_dim,
            &mut gp[proj_base],
            &mut rest[0],
        );
        // Blocks in reverse.
        for b in (0..cfg.num_blocks).rev() {
            let base = self.block_base(b);
            let block = &cache.blocks[b];
            let mut d_branch = vec![0.0f32; rows * h];
            for r in 0..rows {
                let m = block.mask[r];
                if m != 0.0 {
                    for i in 0..h {
                        d_branch[r * h + i] = m * dx[r * h + i];
                    }
                }
            }
            let (g2, rest) = grads.split_at_mut(base + 3);
            let mut d_post = linear_backward(
                &self.tensor(base + 2).data,
                &block.post_act,
                &d_branch,
                rows,
                h,
                h,
                &mut g2[base + 2],
                &mut rest[0],
            );
            for (dp, &pre) in d_post.iter_mut().zip(&block.pre_act) {
                if pre <= 0.0 {
                    *dp = 0.0;
                }
            }
            let (g1, rest) = grads.split_at_mut(base + 1);
            let d_in = linear_backward(
                &self.tensor(base).data,
                &block.input,
                &d_post,
                rows,
                h,
                h,
                &mut g1[base],
                &mut rest[0],
            );
            for (dxv, div) in dx.iter_mut().zip(&d_in) {
                *dxv += div;
            }
        }
        // Stem.
        let (g0, rest) = grads.split_at_mut(1);
        linear_backward(
            &self.tensor(0).data,
            &cache.inputs,
            &dx,
            rows,
            cfg.input_dim,
            h,
            &mut g0[0],
            &mut rest[0],
        );
        grads
    }

    /// Eval-mode pre-head embeddings for every row of `features`.
    pub fn embed(&self, features: &EmbeddingMatrix, use_ema: bool) -> Result<EmbeddingMatrix> {
        let source;
        let model = if use_ema {
            source = self.materialize_ema();
            &source
        } else {
            self
        };
        let rows = features.num_rows();
        let mut data = Vec::with_capacity(rows * self.cfg.embed_dim);
        let chunk = 256;
        let mut start = 0;
        while start < rows {
            let end = (start + chunk).min(rows);
            let slice = &features.data()[start * features.dim()..end * features.dim()];
            let (emb, _) = model.forward(slice, end - start, Mode::Eval, None)?;
            data.extend(emb);
            start = end;
        }
        EmbeddingMatrix::new(features.ids().to_vec(), data, self.cfg.embed_dim)
    }

    /// A copy whose live tensors hold the EMA shadow (rounded to f32).
    pub fn materialize_ema(&self) -> ModelWeights {
        let mut out = self.clone();
        for (t, s) in out.tensors.iter_mut().zip(&self.shadow) {
            for (v, &sv) in t.data.iter_mut().zip(s) {
                *v = sv as f32;
            }
        }
        out
    }

    /// Write the versioned binary checkpoint with live and EMA tensors.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(CKPT_MAGIC)?;
        out.write_all(&CKPT_VERSION.to_le_bytes())?;
        for v in [
            self.cfg.input_dim,
            self.cfg.hidden_dim,
            self.cfg.num_blocks,
            self.cfg.embed_dim,
            self.num_classes,
        ] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        out.write_all(&(self.cfg.drop_path_prob as f32).to_le_bytes())?;
        out.write_all(&(self.cfg.head_init_scale as f32).to_le_bytes())?;
        out.write_all(&((self.tensors.len() * 2) as u32).to_le_bytes())?;
        let write_tensor =
            |out: &mut BufWriter<File>, name: &str, shape: &[usize], data: &[f32]| -> Result<()> {
                out.write_all(&(name.len() as u16).to_le_bytes())?;
                out.write_all(name.as_bytes())?;
                out.write_all(&(shape.len() as u32).to_le_bytes())?;
                for &d in shape {
                    out.write_all(&(d as u32).to_le_bytes())?;
                }
                for &v in data {
                    out.write_all(&v.to_le_bytes())?;
                }
                Ok(())
            };
        for t in &self.tensors {
            write_tensor(&mut out, &t.name, &t.shape, &t.data)?;
        }
        for (t, s) in self.tensors.iter().zip(&self.shadow) {
            let data: Vec<f32> = s.iter().map(|&v| v as f32).collect();
            write_tensor(&mut out, &format!("ema.{}", t.name), &t.shape, &data)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::CorruptFile {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut reader = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        reader
            .read_exact(&mut magic)
            .map_err(|_| corrupt("truncated header"))?;
        if &magic != CKPT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = read_u32(&mut reader).map_err(|_| corrupt("truncated header"))?;
        if version != CKPT_VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                expected: CKPT_VERSION,
                got: version,
            });
        }
        let mut dims = [0usize; 5];
        for d in dims.iter_mut() {
            *d = read_u32(&mut reader).map_err(|_| corrupt("truncated header"))? as usize;
        }
        let mut fbuf = [0u8; 4];
        reader
            .read_exact(&mut fbuf)
            .map_err(|_| corrupt("truncated header"))?;
        let drop_path_prob = f32::from_le_bytes(fbuf) as f64;
        reader
            .read_exact(&mut fbuf)
            .map_err(|_| corrupt("truncated header"))?;
        let head_init_scale = f32::from_le_bytes(fbuf) as f64;
        let cfg = EncoderConfig {
            input_dim: dims[0],
            hidden_dim: dims[1],
            num_blocks: dims[2],
            embed_dim: dims[3],
            drop_path_prob,
            head_init_scale,
        };
        let num_classes = dims[4];
        let count = read_u32(&mut reader).map_err(|_| corrupt("truncated header"))? as usize;
        let layout = tensor_layout(&cfg, num_classes);
        if count != layout.len() * 2 {
            return Err(corrupt("unexpected tensor count"));
        }
        let mut read_tensor = |expect_name: &str, expect_shape: &[usize]| -> Result<Vec<f32>> {
            let mut lbuf = [0u8; 2];
            reader
                .read_exact(&mut lbuf)
                .map_err(|_| corrupt("truncated tensor"))?;
            let len = u16::from_le_bytes(lbuf) as usize;
            let mut nbuf = vec![0u8; len];
            reader
                .read_exact(&mut nbuf)
                .map_err(|_| corrupt("truncated tensor"))?;
            let name = String::from_utf8(nbuf).map_err(|_| corrupt("tensor name not UTF-8"))?;
            if name != expect_name {
                return Err(corrupt(&format!(
                    "unexpected tensor {name:?} (wanted {expect_name:?})"
                )));
            }
            let ndim = read_u32(&mut reader).map_err(|_| corrupt("truncated tensor"))? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape
                    .push(read_u32(&mut reader).map_err(|_| corrupt("truncated tensor"))? as usize);
            }
            if shape != expect_shape {
                return Err(corrupt(&format!("tensor {name} has shape {shape:?}")));
            }
            let total: usize = shape.iter().product();
            let mut data = vec![0.0f32; total];
            let mut buf = [0u8; 4];
            for v in data.iter_mut() {
                reader
                    .read_exact(&mut buf)
                    .map_err(|_| corrupt("truncated tensor data"))?;
                *v = f32::from_le_bytes(buf);
            }
            Ok(data)
        };
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape) in &layout {
            tensors.push(Tensor {
                name: name.clone(),
                shape: shape.clone(),
                data: read_tensor(name, shape)?,
            });
        }
        let mut shadow = Vec::with_capacity(layout.len());
        for (name, shape) in &layout {
            let data = read_tensor(&format!("ema.{name}"), shape)?;
            shadow.push(data.into_iter().map(|v| v as f64).collect());
        }
        let mut trailing = [0u8; 1];
        if reader.read(&mut trailing)? != 0 {
            return Err(corrupt("trailing bytes"));
        }
        Ok(ModelWeights {
            cfg,
            num_classes,
            tensors,
            shadow,
        })
    }
}

/// Backprop through y = x W^T + b. Accumulates dW and db, returns dx.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    w: &[f32],
    x: &[f32],
    dy: &[f32],
    rows: usize,
    in_dim: usize,
    out_dim: usize,
    dw: &mut [f32],
    db: &mut [f32],
) -> Vec<f32> {
    let mut dx = vec![0.0f32; rows * in_dim];
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let dyr = &dy[r * out_dim..(r + 1) * out_dim];
        let dxr = &mut dx[r * in_dim..(r + 1) * in_dim];
        for (o, &g) in dyr.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            let wr = &w[o * in_dim..(o + 1) * in_dim];
            let dwr = &mut dw[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                dwr[i] += g * xr[i];
                dxr[i] += g * wr[i];
            }
        }
    }
    dx
}

fn read_u32<R: Read>(reader: &mut R) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
