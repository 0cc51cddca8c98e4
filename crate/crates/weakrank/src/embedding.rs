//! Embedding store and feature transformations: L2 normalization, whitening
//! fitted on database statistics, and ensemble concatenation.
//!
//! Matrices are row-major f32; means, covariances and norms accumulate in f64.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const EMB_MAGIC: &[u8; 4] = b"WRK1";
const EMB_VERSION: u32 = 1;

/// N x d dense feature store with one string id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    data: Vec<f32>,
    dim: usize,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, data: Vec<f32>, dim: usize) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{dim}", ids.len()),
                got: format!("{} values", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteInput {
                context: "embedding matrix",
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate row id {id:?}")));
            }
        }
        Ok(EmbeddingMatrix { ids, data, dim })
    }

    pub fn num_rows(&self) -> usize {
        self.ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Write the binary `.emb` format: magic, version, N, d (u32 LE), the
    /// row-major f32 payload, then the id table.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(EMB_MAGIC)?;
        out.write_all(&EMB_VERSION.to_le_bytes())?;
        out.write_all(&(self.num_rows() as u32).to_le_bytes())?;
        out.write_all(&(self.dim as u32).to_le_bytes())?;
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&(self.ids.len() as u32).to_le_bytes())?;
        for id in &self.ids {
            let bytes = id.as_bytes();
            out.write_all(&(bytes.len() as u16).to_le_bytes())?;
            out.write_all(bytes)?;
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
        if &magic != EMB_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = read_u32(&mut reader).map_err(|_| corrupt("truncated header"))?;
        if version != EMB_VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                expected: EMB_VERSION,
                got: version,
            });
        }
        let n = read_u32(&mut reader).map_err(|_| corrupt("truncated header"))? as usize;
        let d = read_u32(&mut reader).map_err(|_| corrupt("truncated header"))? as usize;
        let mut data = vec![0f32; n * d];
        let mut buf = [0u8; 4];
        for v in data.iter_mut() {
            reader
                .read_exact(&mut buf)
                .map_err(|_| corrupt("truncated data"))?;
            *v = f32::from_le_bytes(buf);
        }
        let count = read_u32(&mut reader).map_err(|_| corrupt("truncated id table"))? as usize;
        if count != n {
            return Err(corrupt("id count does not match row count"));
        }
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let mut lbuf = [0u8; 2];
            reader
                .read_exact(&mut lbuf)
                .map_err(|_| corrupt("truncated id table"))?;
            let len = u16::from_le_bytes(lbuf) as usize;
            let mut sbuf = vec![0u8; len];
            reader
                .read_exact(&mut sbuf)
                .map_err(|_| corrupt("truncated id table"))?;
            ids.push(String::from_utf8(sbuf).map_err(|_| corrupt("id not UTF-8"))?);
        }
        let mut trailing = [0u8; 1];
        if reader.read(&mut trailing)? != 0 {
            return Err(corrupt("trailing bytes"));
        }
        EmbeddingMatrix::new(ids, data, d).map_err(|e| match e {
            Error::NonFiniteInput { .. } => corrupt("non-finite entries"),
            Error::InvalidConfig(msg) => corrupt(&msg),
            other => other,
        })
    }
}

fn read_u32<R: Read>(reader: &mut R) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Affine whitening fitted from database features only: x -> (x - mean) * W.
#[derive(Debug, Clone)]
pub struct WhiteningTransform {
    pub mean: Vec<f64>,
    /// d x d row-major; output_j = sum_i (x_i - mean_i) * matrix[i*d + j].
    pub matrix: Vec<f64>,
    pub eps_reg: f64,
}

/// Scale every row to unit Euclidean norm.
pub fn l2_normalize(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut data = Vec::with_capacity(m.data().len());
    for i in 0..m.num_rows() {
        let row = m.row(i);
        let norm = row
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNormRow(i));
        }
        data.extend(row.iter().map(|&v| ((v as f64) / norm) as f32));
    }
    EmbeddingMatrix::new(m.ids().to_vec(), data, m.dim())
}

/// Column mean and population covariance (1/N) (X - mu)^T (X - mu).
pub fn compute_mean_cov(db: &EmbeddingMatrix) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = db.num_rows();
    let d = db.dim();
    if n < 2 {
        return Err(Error::TooFewRows { rows: n });
    }
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(db.row(i)) {
            *m += v as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0f64; d * d];
    let mut centered = vec![0.0f64; d];
    for i in 0..n {
        for (c, (&v, &mu)) in centered.iter_mut().zip(db.row(i).iter().zip(&mean)) {
            *c = v as f64 - mu;
        }
        for a in 0..d {
            let ca = centered[a];
            for b in a..d {
                cov[a * d + b] += ca * centered[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / n as f64;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    Ok((mean, cov))
}

/// Eigendecompose the covariance and build W = U diag((lambda + eps)^-1/2).
///
/// Eigenvalues are sorted descending (stable on ties); each eigenvector's
/// largest-magnitude component is made positive so the transform is
/// reproducible across runs.
pub fn fit_whitening(mean: &[f64], cov: &[f64], eps_reg: f64) -> Result<WhiteningTransform> {
    let d = mean.len();
    if cov.len() != d * d {
        return Err(Error::DimensionMismatch {
            expected: d * d,
            got: cov.len(),
        });
    }
    if eps_reg < 0.0 {
        return Err(Error::InvalidConfig("eps_reg must be >= 0".into()));
    }
    let sym = DMatrix::from_fn(d, d, |r, c| 0.5 * (cov[r * d + c] + cov[c * d + r]));
    let eig = nalgebra::linalg::SymmetricEigen::try_new(sym, f64::EPSILON, 10_000)
        .ok_or(Error::EigenFailure)?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut matrix = vec![0.0f64; d * d];
    for (j, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        let mut max_idx = 0;
        for i in 1..d {
            if col[i].abs() > col[max_idx].abs() {
                max_idx = i;
            }
        }
        let sign = if col[max_idx] < 0.0 { -1.0 } else { 1.0 };
        let lambda = eig.eigenvalues[src].max(0.0);
        let scale = sign / (lambda + eps_reg).sqrt();
        if !scale.is_finite() {
            return Err(Error::InvalidConfig(
                "zero eigenvalue with eps_reg = 0; increase eps_reg".into(),
            ));
        }
        for i in 0..d {
            matrix[i * d + j] = col[i] * scale;
        }
    }
    Ok(WhiteningTransform {
        mean: mean.to_vec(),
        matrix,
        eps_reg,
    })
}

/// Apply x -> (x - mean) * W to every row; ids preserved.
pub fn apply_whitening(m: &EmbeddingMatrix, t: &WhiteningTransform) -> Result<EmbeddingMatrix> {
    let d = m.dim();
    if t.mean.len() != d {
        return Err(Error::DimensionMismatch {
            expected: t.mean.len(),
            got: d,
        });
    }
    let mut data = Vec::with_capacity(m.data().len());
    let mut centered = vec![0.0f64; d];
    for i in 0..m.num_rows() {
        for (c, (&v, &mu)) in centered.iter_mut().zip(m.row(i).iter().zip(&t.mean)) {
            *c = v as f64 - mu;
        }
        for j in 0..d {
            let mut acc = 0.0f64;
            for (k, &c) in centered.iter().enumerate() {
                acc += c * t.matrix[k * d + j];
            }
            data.push(acc as f32);
        }
    }
    EmbeddingMatrix::new(m.ids().to_vec(), data, d)
}

/// Fit whitening on `db` and apply it to both `db` and `queries`.
pub fn whiten_pair(
    db: &EmbeddingMatrix,
    queries: &EmbeddingMatrix,
    eps_reg: f64,
) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
    let (mean, cov) = compute_mean_cov(db)?;
    let t = fit_whitening(&mean, &cov, eps_reg)?;
    Ok((apply_whitening(db, &t)?, apply_whitening(queries, &t)?))
}

/// Concatenate member matrices along the feature dimension, in list order.
/// All members must share the same id list in the same order.
pub fn ensemble_concat(models: &[EmbeddingMatrix]) -> Result<EmbeddingMatrix> {
    let first = models.first().ok_or(Error::EmptyEnsemble)?;
    for m in &models[1..] {
        if m.num_rows() != first.num_rows() {
            return Err(Error::IdMismatch {
                row: first.num_rows().min(m.num_rows()),
            });
        }
        for (row, (a, b)) in first.ids().iter().zip(m.ids()).enumerate() {
            if a != b {
                return Err(Error::IdMismatch { row });
            }
        }
    }
    let total_dim: usize = models.iter().map(|m| m.dim()).sum();
    let mut data = Vec::with_capacity(first.num_rows() * total_dim);
    for i in 0..first.num_rows() {
        for m in models {
            data.extend_from_slice(m.row(i));
        }
    }
    EmbeddingMatrix::new(first.ids().to_vec(), data, total_dim)
}
