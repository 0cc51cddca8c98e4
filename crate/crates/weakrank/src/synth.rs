//! Seeded synthetic instance-retrieval benchmark.
//!
//! Coarse classes contain many look-alike instances. Each instance owns a
//! distinct set of title tokens, and its feature offset is a linear map of
//! that attribute set, so titles carry real instance-identifying signal while
//! coarse labels do not. Tokens are drawn from a class-striped slice of the
//! vocabulary with Zipf-like weights by global rank: the histogram keeps its
//! long tail, and instances of one class overlap in several attributes,
//! which makes them genuinely confusable. Every instance contributes one
//! query view; the remaining views form the database.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::eval::GroundTruth;

/// Exponent of the Zipf-like token frequency law.
const ZIPF_EXPONENT: f64 = 1.1;

/// Instance offsets are this fraction of the class scale: instance identity
/// is a fine-grained signal, much weaker than the category signal and below
/// the per-coordinate noise floor, so retrieval has to exploit its structure.
const INSTANCE_SCALE: f64 = 0.5;

const SET_RESAMPLE_LIMIT: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub num_coarse_classes: usize,
    pub instances_per_class: usize,
    pub views_per_instance: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub attrs_per_instance: usize,
    pub class_signal: f64,
    pub instance_signal: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_coarse_classes == 0
            || self.instances_per_class == 0
            || self.feature_dim == 0
            || self.vocab_size == 0
            || self.attrs_per_instance == 0
        {
            return Err(Error::InvalidConfig("synth sizes must be >= 1".into()));
        }
        if self.views_per_instance < 2 {
            return Err(Error::InvalidConfig(
                "views_per_instance must be >= 2 (one query view plus database views)".into(),
            ));
        }
        if self.attrs_per_instance > self.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "attrs_per_instance {} exceeds vocab_size {}",
                self.attrs_per_instance, self.vocab_size
            )));
        }
        // Each class samples from its own stripe of the vocabulary.
        if self.vocab_size / self.num_coarse_classes < self.attrs_per_instance {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} gives classes fewer than attrs_per_instance {} tokens each",
                self.vocab_size, self.attrs_per_instance
            )));
        }
        for (name, v) in [
            ("class_signal", self.class_signal),
            ("instance_signal", self.instance_signal),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// The acceptance-bench configuration: 10 classes x 50 instances x 3 views,
/// d = 64, vocab 200, 5 attributes, signals 1.0 / 1.0, sigma 0.6, seed 7.
pub fn reference_config() -> SynthConfig {
    SynthConfig {
        num_coarse_classes: 10,
        instances_per_class: 50,
        views_per_instance: 3,
        feature_dim: 64,
        vocab_size: 200,
        attrs_per_instance: 5,
        class_signal: 1.0,
        instance_signal: 1.0,
        noise_sigma: 0.6,
        seed: 7,
    }
}

/// One generated view and its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewRecord {
    pub id: String,
    pub coarse_label: usize,
    pub title: String,
    pub is_query: bool,
}

/// A full generated benchmark: all view features, per-view annotations, and
/// instance-level ground truth (query view -> sibling database views).
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub features: EmbeddingMatrix,
    pub views: Vec<ViewRecord>,
    pub gt: GroundTruth,
    pub tokens: Vec<String>,
}

impl SynthDataset {
    fn select(&self, queries: bool) -> Result<EmbeddingMatrix> {
        let dim = self.features.dim();
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for (i, view) in self.views.iter().enumerate() {
            if view.is_query == queries {
                ids.push(view.id.clone());
                data.extend_from_slice(self.features.row(i));
            }
        }
        EmbeddingMatrix::new(ids, data, dim)
    }

    /// Query views (one per instance).
    pub fn queries(&self) -> Result<EmbeddingMatrix> {
        self.select(true)
    }

    /// Database views.
    pub fn db(&self) -> Result<EmbeddingMatrix> {
        self.select(false)
    }

    /// Database corpus records `(id, title)` used for vocabulary mining.
    pub fn db_corpus(&self) -> Vec<(String, String)> {
        self.views
            .iter()
            .filter(|v| !v.is_query)
            .map(|v| (v.id.clone(), v.title.clone()))
            .collect()
    }

    /// Database coarse labels `(id, class)`.
    pub fn db_labels(&self) -> Vec<(String, usize)> {
        self.views
            .iter()
            .filter(|v| !v.is_query)
            .map(|v| (v.id.clone(), v.coarse_label))
            .collect()
    }
}

/// Zipf-weighted sample of `count` distinct entries from `pool` (token ids
/// whose weights are given by `cumulative` over pool positions).
fn sample_attr_set(
    rng: &mut ChaCha8Rng,
    pool: &[usize],
    cumulative: &[f64],
    count: usize,
) -> Vec<usize> {
    let total = *cumulative.last().expect("nonempty pool");
    let mut picked = Vec::with_capacity(count);
    while picked.len() < count {
        let u = rng.random::<f64>() * total;
        let idx = cumulative.partition_point(|&c| c <= u);
        let token = pool[idx.min(pool.len() - 1)];
        if !picked.contains(&token) {
            picked.push(token);
        }
    }
    picked.sort_unstable();
    picked
}

/// Generate the benchmark. Single-threaded and fully determined by the seed.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let d = cfg.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let standard = Normal::new(0.0f64, 1.0).expect("valid std");

    let tokens: Vec<String> = (0..cfg.vocab_size).map(|i| format!("tok{i:04}")).collect();
    // Class stripes interleave global ranks, so every class pool spans the
    // head and the tail of the frequency law.
    let pools: Vec<Vec<usize>> = (0..cfg.num_coarse_classes)
        .map(|c| {
            (c..cfg.vocab_size)
                .step_by(cfg.num_coarse_classes)
                .collect()
        })
        .collect();
    let pool_cumulative: Vec<Vec<f64>> = pools
        .iter()
        .map(|pool| {
            let mut acc = 0.0;
            pool.iter()
                .map(|&rank| {
                    acc += 1.0 / ((rank + 1) as f64).powf(ZIPF_EXPONENT);
                    acc
                })
                .collect()
        })
        .collect();

    // Attribute map: d x vocab, fixed per dataset.
    let attr_map: Vec<f64> = (0..d * cfg.vocab_size)
        .map(|_| standard.sample(&mut rng))
        .collect();

    let scaled_direction = |raw: &[f64], target_norm: f64| -> Vec<f64> {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || target_norm == 0.0 {
            vec![0.0; raw.len()]
        } else {
            raw.iter().map(|v| v / norm * target_norm).collect()
        }
    };

    let num_instances = cfg.num_coarse_classes * cfg.instances_per_class;
    let mut seen_sets = std::collections::HashSet::with_capacity(num_instances);
    let mut views = Vec::with_capacity(num_instances * cfg.views_per_instance);
    let mut data = Vec::with_capacity(num_instances * cfg.views_per_instance * d);
    let mut gt_entries = Vec::with_capacity(num_instances);

    for class in 0..cfg.num_coarse_classes {
        let raw: Vec<f64> = (0..d).map(|_| standard.sample(&mut rng)).collect();
        let centroid = scaled_direction(&raw, cfg.class_signal * (d as f64).sqrt());

        for inst in 0..cfg.instances_per_class {
            // Distinct attribute sets keep the ground truth clean.
            let mut attrs;
            let mut attempts = 0;
            loop {
                attrs = sample_attr_set(
                    &mut rng,
                    &pools[class],
                    &pool_cumulative[class],
                    cfg.attrs_per_instance,
                );
                if seen_sets.insert(attrs.clone()) {
                    break;
                }
                attempts += 1;
                if attempts >= SET_RESAMPLE_LIMIT {
                    return Err(Error::InvalidConfig(
                        "could not sample distinct attribute sets; vocab too small".into(),
                    ));
                }
            }
            let mut raw_offset = vec![0.0f64; d];
            for &a in &attrs {
                for i in 0..d {
                    raw_offset[i] += attr_map[i * cfg.vocab_size + a];
                }
            }
            let offset = scaled_direction(
                &raw_offset,
                cfg.instance_signal * INSTANCE_SCALE * (d as f64).sqrt(),
            );

            let mut sibling_ids = Vec::with_capacity(cfg.views_per_instance - 1);
            let query_id = format!("c{class:02}_i{inst:03}_v0");
            let mut title_tokens: Vec<&str> = attrs.iter().map(|&a| tokens[a].as_str()).collect();
            for view in 0..cfg.views_per_instance {
                let id = format!("c{class:02}_i{inst:03}_v{view}");
                for i in 0..d {
                    let noise = if cfg.noise_sigma > 0.0 {
                        standard.sample(&mut rng) * cfg.noise_sigma
                    } else {
                        0.0
                    };
                    data.push((centroid[i] + offset[i] + noise) as f32);
                }
                title_tokens.shuffle(&mut rng);
                views.push(ViewRecord {
                    id: id.clone(),
                    coarse_label: class,
                    title: title_tokens.join(" "),
                    is_query: view == 0,
                });
                if view > 0 {
                    sibling_ids.push(id);
                }
            }
            gt_entries.push((query_id, sibling_ids));
        }
    }

    let ids = views.iter().map(|v| v.id.clone()).collect();
    let features = EmbeddingMatrix::new(ids, data, d)?;
    let gt = GroundTruth::new(gt_entries)?;
    Ok(SynthDataset {
        features,
        views,
        gt,
        tokens,
    })
}

/// File names produced by [`export`].
pub mod files {
    pub const CORPUS: &str = "corpus.tsv";
    pub const LABELS: &str = "labels.tsv";
    pub const DB: &str = "db.emb";
    pub const QUERIES: &str = "queries.emb";
    pub const GROUND_TRUTH: &str = "gt.tsv";
}

/// Write the dataset in the interchange formats used by the other stages:
/// corpus and coarse labels for the database views, query/db feature files,
/// and the ground-truth TSV.
pub fn export(ds: &SynthDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    use std::io::Write;
    let mut corpus = std::io::BufWriter::new(std::fs::File::create(dir.join(files::CORPUS))?);
    for (id, title) in ds.db_corpus() {
        writeln!(corpus, "{id}\t{title}")?;
    }
    corpus.flush()?;
    let mut labels = std::io::BufWriter::new(std::fs::File::create(dir.join(files::LABELS))?);
    for (id, class) in ds.db_labels() {
        writeln!(labels, "{id}\t{class}")?;
    }
    labels.flush()?;
    ds.db()?.save(&dir.join(files::DB))?;
    ds.queries()?.save(&dir.join(files::QUERIES))?;
    ds.gt.save(&dir.join(files::GROUND_TRUTH))?;
    Ok(())
}

/// Read a coarse-label TSV written by [`export`].
pub fn read_labels(path: &Path) -> Result<Vec<(String, usize)>> {
    use std::io::BufRead;
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            reason,
        };
        let (id, label) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected item_id<TAB>class".into()))?;
        let class: usize = label
            .parse()
            .map_err(|_| parse_err(format!("bad class {label:?}")))?;
        out.push((id.to_string(), class));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attrs::{build_vocab, tokenize};
    use crate::eval::{mar_at_k, RecallDenominator};
    use crate::search::{top_n_search, Metric, SearchParams};

    fn small_config() -> SynthConfig {
        SynthConfig {
            num_coarse_classes: 4,
            instances_per_class: 8,
            views_per_instance: 3,
            feature_dim: 16,
            vocab_size: 60,
            attrs_per_instance: 4,
            class_signal: 1.0,
            instance_signal: 1.0,
            noise_sigma: 0.3,
            seed: 21,
        }
    }

    #[test]
    fn noiseless_views_coincide_and_mar_is_one() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            ..small_config()
        };
        let ds = generate(&cfg).unwrap();
        let queries = ds.queries().unwrap();
        let db = ds.db().unwrap();
        let params = SearchParams::new(Metric::Euclidean, 10, 10).unwrap();
        let ranked = top_n_search(&queries, &db, &params).unwrap();
        let report = mar_at_k(&ranked, &ds.gt, 10, RecallDenominator::Min).unwrap();
        assert_eq!(report.mar, 1.0);
    }

    #[test]
    fn same_seed_identical_dataset() {
        let cfg = small_config();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.views, b.views);
    }

    #[test]
    fn attribute_sets_distinct_and_titles_share_tokens() {
        let ds = generate(&small_config()).unwrap();
        let mut by_instance: std::collections::HashMap<String, Vec<&ViewRecord>> =
            std::collections::HashMap::new();
        for v in &ds.views {
            let instance = v.id.rsplit_once("_v").unwrap().0.to_string();
            by_instance.entry(instance).or_default().push(v);
        }
        let mut sets = std::collections::HashSet::new();
        for views in by_instance.values() {
            let mut tokens0 = tokenize(&views[0].title);
            tokens0.sort_unstable();
            for v in views.iter().skip(1) {
                let mut t = tokenize(&v.title);
                t.sort_unstable();
                assert_eq!(t, tokens0, "views of one instance share tokens");
            }
            assert!(sets.insert(tokens0), "instance attribute sets are distinct");
        }
    }

    #[test]
    fn vocab_recovery_on_reference_config() {
        let ds = generate(&reference_config()).unwrap();
        let titles: Vec<String> = ds.db_corpus().into_iter().map(|(_, t)| t).collect();
        let vocab = build_vocab(&titles, 1).unwrap();
        let mined: std::collections::HashSet<&str> =
            vocab.entries().iter().map(|e| e.token.as_str()).collect();
        let recovered = ds
            .tokens
            .iter()
            .filter(|t| mined.contains(t.as_str()))
            .count();
        let fraction = recovered as f64 / ds.tokens.len() as f64;
        assert!(fraction >= 0.95, "recovered {fraction:.3}");
    }

    #[test]
    fn histogram_is_non_increasing_and_long_tailed() {
        let ds = generate(&reference_config()).unwrap();
        let titles: Vec<String> = ds.db_corpus().into_iter().map(|(_, t)| t).collect();
        let vocab = build_vocab(&titles, 1).unwrap();
        let counts: Vec<u64> = vocab.entries().iter().map(|e| e.count).collect();
        assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        assert!(counts[0] > *counts.last().unwrap());
    }

    #[test]
    fn separability_ordering_on_reference_seed() {
        let ds = generate(&reference_config()).unwrap();
        let mut sums = [0.0f64; 3];
        let mut counts = [0usize; 3];
        let n = ds.views.len();
        let instance_of = |v: &ViewRecord| v.id.rsplit_once("_v").unwrap().0.to_string();
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (&ds.views[i], &ds.views[j]);
                let bucket = if instance_of(a) == instance_of(b) {
                    0
                } else if a.coarse_label == b.coarse_label {
                    1
                } else {
                    2
                };
                let mut d2 = 0.0f64;
                for (x, y) in ds.features.row(i).iter().zip(ds.features.row(j)) {
                    let diff = *x as f64 - *y as f64;
                    d2 += diff * diff;
                }
                sums[bucket] += d2.sqrt();
                counts[bucket] += 1;
            }
        }
        let means: Vec<f64> = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| s / c as f64)
            .collect();
        assert!(
            means[0] < means[1] && means[1] < means[2],
            "expected within-instance < within-class < cross-class, got {means:?}"
        );
    }

    #[test]
    fn export_round_trips_and_gt_references_db_only() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small_config()).unwrap();
        export(&ds, dir.path()).unwrap();

        let db = EmbeddingMatrix::load(&dir.path().join(files::DB)).unwrap();
        let queries = EmbeddingMatrix::load(&dir.path().join(files::QUERIES)).unwrap();
        assert_eq!(db, ds.db().unwrap());
        assert_eq!(queries, ds.queries().unwrap());

        let corpus = crate::attrs::read_corpus(&dir.path().join(files::CORPUS)).unwrap();
        assert_eq!(corpus, ds.db_corpus());
        let labels = read_labels(&dir.path().join(files::LABELS)).unwrap();
        assert_eq!(labels, ds.db_labels());

        let gt = GroundTruth::load(&dir.path().join(files::GROUND_TRUTH)).unwrap();
        let db_ids: std::collections::HashSet<&str> = db.ids().iter().map(String::as_str).collect();
        for (qid, relevant) in gt.entries() {
            assert!(queries.ids().contains(qid));
            assert!(!relevant.is_empty());
            for id in relevant {
                assert!(db_ids.contains(id.as_str()));
            }
        }
    }

    #[test]
    fn export_file_size_matches_header_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let ds = generate(&cfg).unwrap();
        export(&ds, dir.path()).unwrap();
        let db = ds.db().unwrap();
        let expected: usize = 4
            + 4
            + 4
            + 4
            + db.num_rows() * db.dim() * 4
            + 4
            + db.ids().iter().map(|id| 2 + id.len()).sum::<usize>();
        let actual = std::fs::metadata(dir.path().join(files::DB)).unwrap().len();
        assert_eq!(actual as usize, expected);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = small_config();
        cfg.views_per_instance = 1;
        assert!(generate(&cfg).is_err());
        let mut cfg = small_config();
        cfg.attrs_per_instance = cfg.vocab_size + 1;
        assert!(generate(&cfg).is_err());
        let mut cfg = small_config();
        cfg.noise_sigma = -1.0;
        assert!(generate(&cfg).is_err());
    }
}
