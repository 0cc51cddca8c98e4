//! Exact top-N retrieval and k-reciprocal re-ranking.
//!
//! Search is brute force: every query is scored against every database row.
//! Queries are processed in parallel chunks while the database is walked in
//! cache-sized tiles; the per-query reduction is always sequential in
//! ascending row order, so results do not depend on the worker count.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};

/// Name of the environment variable that caps the worker count.
pub const THREADS_ENV: &str = "WEAKRANK_THREADS";

const QUERY_CHUNK: usize = 32;
const DB_TILE: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::InvalidConfig(format!(
                "unknown metric {other:?} (expected cosine or euclidean)"
            ))),
        }
    }
}

/// Candidate depth and output depth for search.
#[derive(Debug, Clone, Copy)]
pub struct SearchParams {
    pub metric: Metric,
    pub top_n: usize,
    pub final_k: usize,
}

impl SearchParams {
    pub fn new(metric: Metric, top_n: usize, final_k: usize) -> Result<Self> {
        if top_n == 0 || final_k == 0 || final_k > top_n {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= final_k <= top_n, got final_k={final_k}, top_n={top_n}"
            )));
        }
        Ok(SearchParams {
            metric,
            top_n,
            final_k,
        })
    }
}

/// k-reciprocal re-ranking parameters; defaults are (8, 5, 0.5).
#[derive(Debug, Clone, Copy)]
pub struct RerankParams {
    pub k1: usize,
    pub k2: usize,
    /// Weight of the original distance in the final blend.
    pub alpha: f64,
}

impl Default for RerankParams {
    fn default() -> Self {
        RerankParams {
            k1: 8,
            k2: 5,
            alpha: 0.5,
        }
    }
}

impl RerankParams {
    pub fn new(k1: usize, k2: usize, alpha: f64) -> Result<Self> {
        if k1 == 0 || k2 == 0 || k2 > k1 {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= k2 <= k1, got k1={k1}, k2={k2}"
            )));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be in [0,1], got {alpha}"
            )));
        }
        Ok(RerankParams { k1, k2, alpha })
    }
}

/// One scored database item.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedEntry {
    pub db_id: String,
    pub distance: f64,
}

/// Ordered candidates for one query; distances are non-decreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<RankedEntry>,
}

/// Worker count: explicit request, capped by `WEAKRANK_THREADS` when set.
pub fn effective_threads(requested: Option<usize>) -> Result<usize> {
    let mut threads = requested.unwrap_or_else(rayon::current_num_threads);
    if let Ok(raw) = std::env::var(THREADS_ENV) {
        let cap: usize = raw.parse().map_err(|_| {
            Error::InvalidConfig(format!(
                "{THREADS_ENV} must be a positive integer, got {raw:?}"
            ))
        })?;
        if cap == 0 {
            return Err(Error::InvalidConfig(format!("{THREADS_ENV} must be >= 1")));
        }
        threads = threads.min(cap);
    }
    Ok(threads.max(1))
}

/// Dot product of pre-widened values, 4 lanes with a fixed summation order.
fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let pairs = a
        .chunks_exact(4)
        .map(|c| <&[f64; 4]>::try_from(c).expect("exact chunk"))
        .zip(
            b.chunks_exact(4)
                .map(|c| <&[f64; 4]>::try_from(c).expect("exact chunk")),
        );
    for (ca, cb) in pairs {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    let tail = a.len() - a.len() % 4;
    for j in tail..a.len() {
        acc[0] += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

fn squared_distance_f64(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let pairs = a
        .chunks_exact(4)
        .map(|c| <&[f64; 4]>::try_from(c).expect("exact chunk"))
        .zip(
            b.chunks_exact(4)
                .map(|c| <&[f64; 4]>::try_from(c).expect("exact chunk")),
        );
    for (ca, cb) in pairs {
        let d0 = ca[0] - cb[0];
        let d1 = ca[1] - cb[1];
        let d2 = ca[2] - cb[2];
        let d3 = ca[3] - cb[3];
        acc[0] += d0 * d0;
        acc[1] += d1 * d1;
        acc[2] += d2 * d2;
        acc[3] += d3 * d3;
    }
    let tail = a.len() - a.len() % 4;
    for j in tail..a.len() {
        let d = a[j] - b[j];
        acc[0] += d * d;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Dot product with f64 accumulation. Widening is exact, so this matches
/// [`dot_f64`] on pre-widened copies bit for bit.
fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0.0f64; 4];
    let pairs = a
        .chunks_exact(4)
        .map(|c| <&[f32; 4]>::try_from(c).expect("exact chunk"))
        .zip(
            b.chunks_exact(4)
                .map(|c| <&[f32; 4]>::try_from(c).expect("exact chunk")),
        );
    for (ca, cb) in pairs {
        acc[0] += ca[0] as f64 * cb[0] as f64;
        acc[1] += ca[1] as f64 * cb[1] as f64;
        acc[2] += ca[2] as f64 * cb[2] as f64;
        acc[3] += ca[3] as f64 * cb[3] as f64;
    }
    let tail = a.len() - a.len() % 4;
    for j in tail..a.len() {
        acc[0] += a[j] as f64 * b[j] as f64;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    let wa = widen(a);
    let wb = widen(b);
    squared_distance_f64(&wa, &wb)
}

fn norm(v: &[f32]) -> f64 {
    dot(v, v).sqrt()
}

/// Pairwise distance. Cosine is 1 - x.y/(|x||y|) clamped to [0, 2].
pub fn distance(x: &[f32], y: &[f32], metric: Metric) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    match metric {
        Metric::Cosine => {
            let nx = norm(x);
            let ny = norm(y);
            if nx == 0.0 || ny == 0.0 {
                return Err(Error::ZeroVector);
            }
            Ok((1.0 - dot(x, y) / (nx * ny)).clamp(0.0, 2.0))
        }
        Metric::Euclidean => Ok(squared_distance(x, y).sqrt()),
    }
}

/// Max-heap entry ordered by (distance, row index); the heap root is the
/// worst candidate currently kept.
#[derive(Debug, PartialEq)]
struct HeapEntry {
    dist: f64,
    row: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.row.cmp(&other.row))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct QueryScan {
    heap: BinaryHeap<HeapEntry>,
    top_n: usize,
}

impl QueryScan {
    fn new(top_n: usize) -> Self {
        QueryScan {
            heap: BinaryHeap::with_capacity(top_n + 1),
            top_n,
        }
    }

    #[inline]
    fn offer(&mut self, dist: f64, row: usize) {
        if self.heap.len() < self.top_n {
            self.heap.push(HeapEntry { dist, row });
        } else {
            let worst = self.heap.peek().expect("heap nonempty");
            if (HeapEntry { dist, row }) < *worst {
                self.heap.pop();
                self.heap.push(HeapEntry { dist, row });
            }
        }
    }

    fn finish(self) -> Vec<HeapEntry> {
        self.heap.into_sorted_vec()
    }
}

/// Exact top-N nearest database rows per query. Ties break on ascending
/// database row index. Identical output for any worker count.
pub fn top_n_search(
    queries: &EmbeddingMatrix,
    db: &EmbeddingMatrix,
    params: &SearchParams,
) -> Result<Vec<RankedList>> {
    top_n_search_with_threads(queries, db, params, None)
}

/// [`top_n_search`] with an explicit worker count (still capped by the env var).
pub fn top_n_search_with_threads(
    queries: &EmbeddingMatrix,
    db: &EmbeddingMatrix,
    params: &SearchParams,
    threads: Option<usize>,
) -> Result<Vec<RankedList>> {
    if queries.dim() != db.dim() {
        return Err(Error::DimensionMismatch {
            expected: db.dim(),
            got: queries.dim(),
        });
    }
    if params.top_n > db.num_rows() {
        return Err(Error::TopNTooLarge {
            top_n: params.top_n,
            db_len: db.num_rows(),
        });
    }
    let db_norms: Option<Vec<f64>> = match params.metric {
        Metric::Cosine => {
            let mut norms = Vec::with_capacity(db.num_rows());
            for i in 0..db.num_rows() {
                let n = norm(db.row(i));
                if n == 0.0 {
                    return Err(Error::ZeroVector);
                }
                norms.push(n);
            }
            Some(norms)
        }
        Metric::Euclidean => None,
    };
    let query_norms: Option<Vec<f64>> = match params.metric {
        Metric::Cosine => {
            let mut norms = Vec::with_capacity(queries.num_rows());
            for i in 0..queries.num_rows() {
                let n = norm(queries.row(i));
                if n == 0.0 {
                    return Err(Error::ZeroVector);
                }
                norms.push(n);
            }
            Some(norms)
        }
        Metric::Euclidean => None,
    };

    let dim = db.dim();
    let scan_chunk = |chunk: &[usize]| -> Vec<RankedList> {
        let mut scans: Vec<QueryScan> =
            chunk.iter().map(|_| QueryScan::new(params.top_n)).collect();
        // Widening to f64 is exact, so hoisting it out of the inner loop
        // leaves every distance bit-identical to the unblocked formula.
        let wide_queries: Vec<Vec<f64>> = chunk.iter().map(|&qi| widen(queries.row(qi))).collect();
        let mut wide_tile: Vec<f64> = Vec::with_capacity(DB_TILE * dim);
        let mut tile_start = 0;
        while tile_start < db.num_rows() {
            let tile_end = (tile_start + DB_TILE).min(db.num_rows());
            wide_tile.clear();
            wide_tile.extend(
                db.data()[tile_start * dim..tile_end * dim]
                    .iter()
                    .map(|&v| v as f64),
            );
            for (ci, scan) in scans.iter_mut().enumerate() {
                let q = &wide_queries[ci];
                match params.metric {
                    Metric::Cosine => {
                        let qn = query_norms.as_ref().expect("cosine norms")[chunk[ci]];
                        let dn = db_norms.as_ref().expect("cosine norms");
                        for row in tile_start..tile_end {
                            let r =
                                &wide_tile[(row - tile_start) * dim..(row - tile_start + 1) * dim];
                            let d = (1.0 - dot_f64(q, r) / (qn * dn[row])).clamp(0.0, 2.0);
                            scan.offer(d, row);
                        }
                    }
                    Metric::Euclidean => {
                        for row in tile_start..tile_end {
                            let r =
                                &wide_tile[(row - tile_start) * dim..(row - tile_start + 1) * dim];
                            scan.offer(squared_distance_f64(q, r).sqrt(), row);
                        }
                    }
                }
            }
            tile_start = tile_end;
        }
        scans
            .into_iter()
            .zip(chunk)
            .map(|(scan, &qi)| RankedList {
                query_id: queries.ids()[qi].clone(),
                entries: scan
                    .finish()
                    .into_iter()
                    .map(|e| RankedEntry {
                        db_id: db.ids()[e.row].clone(),
                        distance: e.dist,
                    })
                    .collect(),
            })
            .collect()
    };

    let indices: Vec<usize> = (0..queries.num_rows()).collect();
    let workers = effective_threads(threads)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let chunked: Vec<Vec<RankedList>> =
        pool.install(|| indices.par_chunks(QUERY_CHUNK).map(scan_chunk).collect());
    Ok(chunked.into_concat())
}

trait ConcatVecs<T> {
    fn into_concat(self) -> Vec<T>;
}

impl<T> ConcatVecs<T> for Vec<Vec<T>> {
    fn into_concat(self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.iter().map(Vec::len).sum());
        for v in self {
            out.extend(v);
        }
        out
    }
}

/// Re-rank each query's top-N candidates with k-reciprocal encoding and
/// Jaccard distance, restricted to {query} union its candidates.
///
/// Neighbor lists within the restricted set are sorted by (distance, local
/// index) and include the point itself at distance zero; kNN(p, k) means the
/// first k+1 entries (self plus k others), and the local query expansion
/// averages the encodings of the first k2 entries of that list. The final
/// distance is `alpha * original + (1 - alpha) * jaccard`; the output keeps
/// the top `final_k` candidates, ties broken by ascending original distance
/// then ascending database row index.
pub fn k_reciprocal_rerank(
    queries: &EmbeddingMatrix,
    db: &EmbeddingMatrix,
    initial: &[RankedList],
    params: &RerankParams,
    final_k: usize,
    metric: Metric,
) -> Result<Vec<RankedList>> {
    k_reciprocal_rerank_with_threads(queries, db, initial, params, final_k, metric, None)
}

/// [`k_reciprocal_rerank`] with an explicit worker count (capped by the env var).
#[allow(clippy::too_many_arguments)]
pub fn k_reciprocal_rerank_with_threads(
    queries: &EmbeddingMatrix,
    db: &EmbeddingMatrix,
    initial: &[RankedList],
    params: &RerankParams,
    final_k: usize,
    metric: Metric,
    threads: Option<usize>,
) -> Result<Vec<RankedList>> {
    let needed = (params.k1 + 1).max(final_k);
    let db_index: HashMap<&str, usize> = db
        .ids()
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let query_index: HashMap<&str, usize> = queries
        .ids()
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();

    let rerank_list = |list: &RankedList| -> Result<RankedList> {
        if list.entries.len() < needed {
            return Err(Error::InsufficientCandidates {
                query_id: list.query_id.clone(),
                needed,
                got: list.entries.len(),
            });
        }
        let qi = *query_index.get(list.query_id.as_str()).ok_or_else(|| {
            Error::InvalidConfig(format!("query id {:?} not in query matrix", list.query_id))
        })?;
        let cand_rows: Vec<usize> = list
            .entries
            .iter()
            .map(|e| {
                db_index.get(e.db_id.as_str()).copied().ok_or_else(|| {
                    Error::InvalidConfig(format!("db id {:?} not in database", e.db_id))
                })
            })
            .collect::<Result<_>>()?;
        rerank_one(
            queries.row(qi),
            list,
            &cand_rows,
            db,
            params,
            final_k,
            metric,
        )
    };

    // Queries are independent; the ordered collect keeps output deterministic
    // for any worker count.
    let workers = effective_threads(threads)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| initial.par_iter().map(rerank_list).collect())
}

fn rerank_one(
    query: &[f32],
    list: &RankedList,
    cand_rows: &[usize],
    db: &EmbeddingMatrix,
    params: &RerankParams,
    final_k: usize,
    metric: Metric,
) -> Result<RankedList> {
    // Local point 0 is the query; 1..=n are the candidates in initial order.
    let n = cand_rows.len();
    let total = n + 1;
    let point = |i: usize| -> &[f32] {
        if i == 0 {
            query
        } else {
            db.row(cand_rows[i - 1])
        }
    };

    let mut dist = vec![0.0f64; total * total];
    for i in 0..total {
        for j in (i + 1)..total {
            let d = if i == 0 {
                list.entries[j - 1].distance
            } else {
                distance(point(i), point(j), metric)?
            };
            dist[i * total + j] = d;
            dist[j * total + i] = d;
        }
    }

    // pos[p][q]: rank of q in p's neighbor list (0 = nearest, normally self).
    let mut pos = vec![0usize; total * total];
    let mut order: Vec<usize> = (0..total).collect();
    for p in 0..total {
        order.sort_by(|&a, &b| {
            dist[p * total + a]
                .total_cmp(&dist[p * total + b])
                .then(a.cmp(&b))
        });
        for (rank, &q) in order.iter().enumerate() {
            pos[p * total + q] = rank;
        }
        order.sort_unstable();
    }
    let in_knn = |p: usize, q: usize, k: usize| pos[p * total + q] <= k;

    let reciprocal = |p: usize, k: usize| -> Vec<usize> {
        (0..total)
            .filter(|&g| in_knn(p, g, k) && in_knn(g, p, k))
            .collect()
    };

    let half = params.k1.div_ceil(2);
    let mut encodings = vec![0.0f64; total * total];
    for p in 0..total {
        let r_p = reciprocal(p, params.k1);
        let mut member = vec![false; total];
        for &g in &r_p {
            member[g] = true;
        }
        let mut expanded = member.clone();
        for &g in &r_p {
            let s = reciprocal(g, half);
            let overlap = s.iter().filter(|&&x| member[x]).count();
            if 3 * overlap >= 2 * s.len() {
                for &x in &s {
                    expanded[x] = true;
                }
            }
        }
        for (g, &inside) in expanded.iter().enumerate() {
            if inside {
                encodings[p * total + g] = (-dist[p * total + g]).exp();
            }
        }
    }

    // Local query expansion: mean encoding of the k2 nearest (self included).
    let mut expanded_enc = vec![0.0f64; total * total];
    let mut neighbor_order: Vec<usize> = (0..total).collect();
    for p in 0..total {
        neighbor_order.sort_by(|&a, &b| {
            dist[p * total + a]
                .total_cmp(&dist[p * total + b])
                .then(a.cmp(&b))
        });
        for &g in neighbor_order.iter().take(params.k2) {
            for t in 0..total {
                expanded_enc[p * total + t] += encodings[g * total + t];
            }
        }
        for t in 0..total {
            expanded_enc[p * total + t] /= params.k2 as f64;
        }
        neighbor_order.sort_unstable();
    }

    let jaccard = |a: &[f64], b: &[f64]| -> f64 {
        let mut min_sum = 0.0;
        let mut max_sum = 0.0;
        for (&x, &y) in a.iter().zip(b) {
            min_sum += x.min(y);
            max_sum += x.max(y);
        }
        if max_sum == 0.0 {
            1.0
        } else {
            1.0 - min_sum / max_sum
        }
    };

    let q_enc = &expanded_enc[0..total];
    let mut scored: Vec<(f64, f64, usize, usize)> = (1..total)
        .map(|j| {
            let d_j = jaccard(q_enc, &expanded_enc[j * total..(j + 1) * total]);
            let d_orig = list.entries[j - 1].distance;
            let d_star = params.alpha * d_orig + (1.0 - params.alpha) * d_j;
            (d_star, d_orig, cand_rows[j - 1], j - 1)
        })
        .collect();
    scored.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    Ok(RankedList {
        query_id: list.query_id.clone(),
        entries: scored
            .into_iter()
            .take(final_k)
            .map(|(d_star, _, _, entry_idx)| RankedEntry {
                db_id: list.entries[entry_idx].db_id.clone(),
                distance: d_star,
            })
            .collect(),
    })
}

/// Write ranked lists as TSV `query_id<TAB>db_id<TAB>rank<TAB>distance`
/// with 1-based ranks.
pub fn write_ranked(lists: &[RankedList], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for list in lists {
        for (rank, e) in list.entries.iter().enumerate() {
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                list.query_id,
                e.db_id,
                rank + 1,
                e.distance
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Read a file written by [`write_ranked`], preserving query order.
pub fn read_ranked(path: &Path) -> Result<Vec<RankedList>> {
    let file = File::open(path)?;
    let mut lists: Vec<RankedList> = Vec::new();
    let mut by_query: HashMap<String, usize> = HashMap::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            reason,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse_err("expected 4 tab-separated fields".into()));
        }
        let rank: usize = fields[2]
            .parse()
            .map_err(|_| parse_err(format!("bad rank {:?}", fields[2])))?;
        let distance: f64 = fields[3]
            .parse()
            .map_err(|_| parse_err(format!("bad distance {:?}", fields[3])))?;
        let idx = *by_query.entry(fields[0].to_string()).or_insert_with(|| {
            lists.push(RankedList {
                query_id: fields[0].to_string(),
                entries: Vec::new(),
            });
            lists.len() - 1
        });
        let list = &mut lists[idx];
        if rank != list.entries.len() + 1 {
            return Err(parse_err(format!(
                "rank {rank} out of sequence for query {}",
                fields[0]
            )));
        }
        if let Some(prev) = list.entries.last() {
            if distance < prev.distance {
                return Err(parse_err("distances must be non-decreasing".into()));
            }
        }
        if list.entries.iter().any(|e| e.db_id == fields[1]) {
            return Err(Error::DuplicateDbId {
                query_id: fields[0].to_string(),
                db_id: fields[1].to_string(),
            });
        }
        list.entries.push(RankedEntry {
            db_id: fields[1].to_string(),
            distance,
        });
    }
    Ok(lists)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mat(prefix: &str, rows: &[&[f32]]) -> EmbeddingMatrix {
        let dim = rows[0].len();
        let ids = (0..rows.len()).map(|i| format!("{prefix}{i}")).collect();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        EmbeddingMatrix::new(ids, data, dim).unwrap()
    }

    fn random_matrix(prefix: &str, n: usize, d: usize, seed: u64) -> EmbeddingMatrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ids = (0..n).map(|i| format!("{prefix}{i}")).collect();
        EmbeddingMatrix::new(ids, data, d).unwrap()
    }

    #[test]
    fn distance_basics() {
        let x = [1.0f32, 0.0];
        let y = [0.0f32, 1.0];
        assert_abs_diff_eq!(distance(&x, &x, Metric::Cosine).unwrap(), 0.0);
        assert_abs_diff_eq!(distance(&x, &y, Metric::Cosine).unwrap(), 1.0);
        let z = [1.0f32, 1.0];
        assert_abs_diff_eq!(
            distance(&z, &x, Metric::Cosine).unwrap(),
            1.0 - 1.0 / 2f64.sqrt(),
            epsilon = 1e-7
        );
        assert_abs_diff_eq!(distance(&x, &y, Metric::Euclidean).unwrap(), 2f64.sqrt());
    }

    #[test]
    fn distance_errors() {
        let x = [0.0f32, 0.0];
        let y = [1.0f32, 0.0];
        assert!(matches!(
            distance(&x, &y, Metric::Cosine),
            Err(Error::ZeroVector)
        ));
        assert!(matches!(
            distance(&y, &[1.0f32, 0.0, 0.0], Metric::Cosine),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn search_finds_exact_copy_first() {
        let db = mat("d", &[&[0.3, 0.7], &[1.0, 2.0], &[-0.5, 0.1]]);
        let q = EmbeddingMatrix::new(vec!["q0".into()], vec![1.0, 2.0], 2).unwrap();
        let params = SearchParams::new(Metric::Cosine, 3, 3).unwrap();
        let out = top_n_search(&q, &db, &params).unwrap();
        assert_eq!(out[0].entries[0].db_id, "d1");
        assert!(out[0].entries[0].distance < 1e-9);
    }

    #[test]
    fn search_hand_ordering() {
        let db = mat("e", &[&[1.0, 0.0], &[0.0, 1.0], &[0.9, 0.1]]);
        let q = EmbeddingMatrix::new(vec!["q0".into()], vec![1.0, 0.0], 2).unwrap();
        let params = SearchParams::new(Metric::Cosine, 2, 2).unwrap();
        let out = top_n_search(&q, &db, &params).unwrap();
        let ids: Vec<&str> = out[0].entries.iter().map(|e| e.db_id.as_str()).collect();
        assert_eq!(ids, vec!["e0", "e2"]);
        // 1 - 0.9 / sqrt(0.82)
        assert_abs_diff_eq!(
            out[0].entries[1].distance,
            1.0 - 0.9 / 0.82f64.sqrt(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn search_tie_breaks_by_row_index() {
        let db = mat("d", &[&[2.0, 0.0], &[1.0, 1.0], &[1.0, 1.0]]);
        let q = EmbeddingMatrix::new(vec!["q0".into()], vec![1.0, 1.0], 2).unwrap();
        let params = SearchParams::new(Metric::Euclidean, 3, 3).unwrap();
        let out = top_n_search(&q, &db, &params).unwrap();
        let ids: Vec<&str> = out[0].entries.iter().map(|e| e.db_id.as_str()).collect();
        assert_eq!(ids, vec!["d1", "d2", "d0"]);
    }

    #[test]
    fn search_top_n_too_large() {
        let db = mat("d", &[&[1.0, 0.0]]);
        let q = mat("q", &[&[1.0, 0.0]]);
        let params = SearchParams::new(Metric::Cosine, 2, 1).unwrap();
        assert!(matches!(
            top_n_search(&q, &db, &params),
            Err(Error::TopNTooLarge { .. })
        ));
    }

    #[test]
    fn search_agrees_with_naive_scan() {
        for seed in 0..6 {
            let db = random_matrix("d", 120, 9, seed);
            let q = random_matrix("q", 7, 9, 1000 + seed);
            for metric in [Metric::Cosine, Metric::Euclidean] {
                let params = SearchParams::new(metric, 15, 15).unwrap();
                let got = top_n_search(&q, &db, &params).unwrap();
                for (qi, list) in got.iter().enumerate() {
                    let mut all: Vec<(f64, usize)> = (0..db.num_rows())
                        .map(|r| (distance(q.row(qi), db.row(r), metric).unwrap(), r))
                        .collect();
                    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                    for (entry, (d, r)) in list.entries.iter().zip(&all) {
                        assert_eq!(entry.db_id, db.ids()[*r]);
                        assert!((entry.distance - d).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn search_metric_identity_after_normalization() {
        use crate::embedding::l2_normalize;
        for seed in 0..5 {
            let db = l2_normalize(&random_matrix("d", 80, 6, seed)).unwrap();
            let q = l2_normalize(&random_matrix("q", 5, 6, 500 + seed)).unwrap();
            let pc = SearchParams::new(Metric::Cosine, 10, 10).unwrap();
            let pe = SearchParams::new(Metric::Euclidean, 10, 10).unwrap();
            let cos = top_n_search(&q, &db, &pc).unwrap();
            let euc = top_n_search(&q, &db, &pe).unwrap();
            for (a, b) in cos.iter().zip(&euc) {
                let ids_a: Vec<&str> = a.entries.iter().map(|e| e.db_id.as_str()).collect();
                let ids_b: Vec<&str> = b.entries.iter().map(|e| e.db_id.as_str()).collect();
                assert_eq!(ids_a, ids_b);
            }
        }
    }

    #[test]
    fn search_thread_invariant() {
        let db = random_matrix("d", 200, 8, 42);
        let q = random_matrix("q", 40, 8, 7);
        let params = SearchParams::new(Metric::Cosine, 12, 12).unwrap();
        let one = top_n_search_with_threads(&q, &db, &params, Some(1)).unwrap();
        let two = top_n_search_with_threads(&q, &db, &params, Some(2)).unwrap();
        let eight = top_n_search_with_threads(&q, &db, &params, Some(8)).unwrap();
        assert_eq!(one, two);
        assert_eq!(one, eight);
    }

    #[test]
    fn rerank_alpha_one_preserves_order() {
        let db = random_matrix("d", 60, 5, 3);
        let q = random_matrix("q", 4, 5, 11);
        let params = SearchParams::new(Metric::Cosine, 20, 20).unwrap();
        let initial = top_n_search(&q, &db, &params).unwrap();
        let rp = RerankParams::new(8, 5, 1.0).unwrap();
        let out = k_reciprocal_rerank(&q, &db, &initial, &rp, 10, Metric::Cosine).unwrap();
        for (list, orig) in out.iter().zip(&initial) {
            let got: Vec<&str> = list.entries.iter().map(|e| e.db_id.as_str()).collect();
            let expect: Vec<&str> = orig.entries[..10]
                .iter()
                .map(|e| e.db_id.as_str())
                .collect();
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn rerank_restricted_to_candidates() {
        let db = random_matrix("d", 100, 4, 9);
        let q = random_matrix("q", 3, 4, 21);
        let params = SearchParams::new(Metric::Cosine, 15, 15).unwrap();
        let initial = top_n_search(&q, &db, &params).unwrap();
        let rp = RerankParams::default();
        let out = k_reciprocal_rerank(&q, &db, &initial, &rp, 10, Metric::Cosine).unwrap();
        for (list, orig) in out.iter().zip(&initial) {
            let allowed: std::collections::HashSet<&str> =
                orig.entries.iter().map(|e| e.db_id.as_str()).collect();
            assert_eq!(list.entries.len(), 10);
            for e in &list.entries {
                assert!(allowed.contains(e.db_id.as_str()));
            }
        }
    }

    #[test]
    fn rerank_well_separated_small_instance() {
        // Three well-separated db points, k1 = 2, k2 = 1: the blended
        // distance keeps the original (correct) ordering.
        let db = mat("d", &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let q = EmbeddingMatrix::new(vec!["q0".into()], vec![0.9, 0.1, 0.05], 3).unwrap();
        let params = SearchParams::new(Metric::Cosine, 3, 3).unwrap();
        let initial = top_n_search(&q, &db, &params).unwrap();
        let rp = RerankParams::new(2, 1, 0.5).unwrap();
        let out = k_reciprocal_rerank(&q, &db, &initial, &rp, 3, Metric::Cosine).unwrap();
        let got: Vec<&str> = out[0].entries.iter().map(|e| e.db_id.as_str()).collect();
        let expect: Vec<&str> = initial[0]
            .entries
            .iter()
            .map(|e| e.db_id.as_str())
            .collect();
        assert_eq!(got, expect);
        assert_eq!(got[0], "d0");
        // Blended distances stay sorted and finite.
        for w in out[0].entries.windows(2) {
            assert!(w[0].distance <= w[1].distance);
        }
    }

    #[test]
    fn rerank_insufficient_candidates() {
        let db = random_matrix("d", 30, 4, 5);
        let q = random_matrix("q", 1, 4, 6);
        let params = SearchParams::new(Metric::Cosine, 5, 5).unwrap();
        let initial = top_n_search(&q, &db, &params).unwrap();
        let rp = RerankParams::default(); // needs k1 + 1 = 9 candidates
        assert!(matches!(
            k_reciprocal_rerank(&q, &db, &initial, &rp, 5, Metric::Cosine),
            Err(Error::InsufficientCandidates { .. })
        ));
    }

    #[test]
    fn ranked_tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ranked.tsv");
        let lists = vec![
            RankedList {
                query_id: "q0".into(),
                entries: vec![
                    RankedEntry {
                        db_id: "a".into(),
                        distance: 0.125,
                    },
                    RankedEntry {
                        db_id: "b".into(),
                        distance: 0.5,
                    },
                ],
            },
            RankedList {
                query_id: "q1".into(),
                entries: vec![RankedEntry {
                    db_id: "c".into(),
                    distance: 0.0078125,
                }],
            },
        ];
        write_ranked(&lists, &path).unwrap();
        assert_eq!(read_ranked(&path).unwrap(), lists);
    }

    #[test]
    fn ranked_tsv_rejects_bad_rank_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ranked.tsv");
        std::fs::write(&path, "q0\ta\t2\t0.5\n").unwrap();
        assert!(matches!(read_ranked(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn ranked_tsv_rejects_duplicate_db_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ranked.tsv");
        std::fs::write(&path, "q0\ta\t1\t0.5\nq0\ta\t2\t0.6\n").unwrap();
        assert!(matches!(
            read_ranked(&path),
            Err(Error::DuplicateDbId { .. })
        ));
    }
}
