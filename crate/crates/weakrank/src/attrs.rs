//! Pseudo-attribute mining from product titles.
//!
//! Titles are tokenized on whitespace, frequent tokens become the attribute
//! vocabulary, and each item's unique attribute set turns into a soft
//! multi-label target assigning mass 1/K to each of its K attributes.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How token frequency is counted when building the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CountMode {
    /// Total occurrences across the corpus; duplicates within a title count.
    #[default]
    Occurrences,
    /// Number of titles containing the token at least once.
    Titles,
}

/// One vocabulary entry. `id` equals the entry's position in the vocab.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub token: String,
    pub count: u64,
    pub id: usize,
}

/// Mined token vocabulary, ordered by descending count then ascending token.
#[derive(Debug, Clone)]
pub struct AttributeVocab {
    entries: Vec<VocabEntry>,
    min_count: u64,
    index: HashMap<String, usize>,
}

impl AttributeVocab {
    /// Number of pseudo classes T.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    fn from_entries(entries: Vec<VocabEntry>, min_count: u64) -> Self {
        let index = entries
            .iter()
            .map(|e| (e.token.clone(), e.id))
            .collect::<HashMap<_, _>>();
        AttributeVocab {
            entries,
            min_count,
            index,
        }
    }

    /// Serialize as a JSON array of `{"token","count","id"}` in vocab order.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.entries)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(self.to_json()?.as_bytes())?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    /// Load a vocabulary written by [`AttributeVocab::save`].
    ///
    /// The JSON carries no threshold, so `min_count` is reconstructed as the
    /// largest threshold consistent with the stored counts.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let entries: Vec<VocabEntry> = serde_json::from_reader(BufReader::new(file))?;
        for (pos, e) in entries.iter().enumerate() {
            if e.id != pos {
                return Err(Error::CorruptFile {
                    path: path.to_path_buf(),
                    reason: format!("vocab id {} at position {pos}", e.id),
                });
            }
        }
        for w in entries.windows(2) {
            let ordered =
                w[0].count > w[1].count || (w[0].count == w[1].count && w[0].token < w[1].token);
            if !ordered {
                return Err(Error::CorruptFile {
                    path: path.to_path_buf(),
                    reason: format!("vocab entries out of order near token {}", w[1].token),
                });
            }
        }
        let min_count = entries
            .iter()
            .map(|e| e.count)
            .min()
            .unwrap_or(1)
            .saturating_sub(1);
        Ok(AttributeVocab::from_entries(entries, min_count))
    }
}

/// An item's deduplicated, strictly increasing attribute ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemAttributes {
    pub item_id: String,
    pub attr_ids: Vec<usize>,
}

impl ItemAttributes {
    /// K, the number of pseudo-attributes for this item.
    pub fn k(&self) -> usize {
        self.attr_ids.len()
    }
}

/// Sparse soft multi-label targets: row i assigns 1/K to each present id.
#[derive(Debug, Clone)]
pub struct SoftTargets {
    num_classes: usize,
    rows: Vec<ItemAttributes>,
}

impl SoftTargets {
    pub fn num_samples(&self) -> usize {
        self.rows.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn rows(&self) -> &[ItemAttributes] {
        &self.rows
    }

    /// Dense expansion of one row; sums to 1 within 1e-9.
    pub fn dense_row(&self, i: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.num_classes];
        let k = self.rows[i].k() as f64;
        for &id in &self.rows[i].attr_ids {
            row[id] = 1.0 / k;
        }
        row
    }
}

/// Split on runs of Unicode whitespace, lowercase, drop empty tokens.
/// Order and duplicates are preserved.
pub fn tokenize(title: &str) -> Vec<String> {
    tokenize_with(title, true)
}

/// [`tokenize`] with lowercasing optional.
pub fn tokenize_with(title: &str, lowercase: bool) -> Vec<String> {
    title
        .split_whitespace()
        .map(|t| {
            if lowercase {
                t.to_lowercase()
            } else {
                t.to_string()
            }
        })
        .collect()
}

/// Keep tokens appearing strictly more than `min_count` times across `titles`.
pub fn build_vocab<S: AsRef<str>>(titles: &[S], min_count: u64) -> Result<AttributeVocab> {
    build_vocab_with(titles, min_count, CountMode::Occurrences, true)
}

/// [`build_vocab`] with the counting mode and lowercasing explicit.
pub fn build_vocab_with<S: AsRef<str>>(
    titles: &[S],
    min_count: u64,
    mode: CountMode,
    lowercase: bool,
) -> Result<AttributeVocab> {
    if min_count < 1 {
        return Err(Error::InvalidConfig("min_count must be >= 1".into()));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for title in titles {
        let mut tokens = tokenize_with(title.as_ref(), lowercase);
        if mode == CountMode::Titles {
            tokens.sort_unstable();
            tokens.dedup();
        }
        for tok in tokens {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(String, u64)> = counts.into_iter().filter(|(_, c)| *c > min_count).collect();
    if kept.is_empty() {
        return Err(Error::EmptyVocab { min_count });
    }
    kept.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let entries = kept
        .into_iter()
        .enumerate()
        .map(|(id, (token, count))| VocabEntry { token, count, id })
        .collect();
    Ok(AttributeVocab::from_entries(entries, min_count))
}

/// Map a title to its unique vocabulary ids; `None` when no token is in vocab.
pub fn encode_item(item_id: &str, title: &str, vocab: &AttributeVocab) -> Option<ItemAttributes> {
    encode_item_with(item_id, title, vocab, true)
}

/// [`encode_item`] with lowercasing optional; must match the vocab's build.
pub fn encode_item_with(
    item_id: &str,
    title: &str,
    vocab: &AttributeVocab,
    lowercase: bool,
) -> Option<ItemAttributes> {
    let mut ids: Vec<usize> = tokenize_with(title, lowercase)
        .iter()
        .filter_map(|t| vocab.id_of(t))
        .collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        None
    } else {
        Some(ItemAttributes {
            item_id: item_id.to_string(),
            attr_ids: ids,
        })
    }
}

/// Encode a whole corpus, dropping items with no vocabulary token.
/// Returns the kept rows (corpus order) and the number dropped.
pub fn encode_corpus(
    corpus: &[(String, String)],
    vocab: &AttributeVocab,
    lowercase: bool,
) -> (Vec<ItemAttributes>, usize) {
    let mut rows = Vec::with_capacity(corpus.len());
    let mut dropped = 0;
    for (id, title) in corpus {
        match encode_item_with(id, title, vocab, lowercase) {
            Some(item) => rows.push(item),
            None => dropped += 1,
        }
    }
    (rows, dropped)
}

/// Bundle encoded items into soft targets over `vocab.len()` classes.
pub fn build_soft_targets(items: Vec<ItemAttributes>, num_classes: usize) -> Result<SoftTargets> {
    for item in &items {
        if item.attr_ids.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "item {} has no attributes",
                item.item_id
            )));
        }
        for &id in &item.attr_ids {
            if id >= num_classes {
                return Err(Error::InvalidAttributeId { id, num_classes });
            }
        }
    }
    Ok(SoftTargets {
        num_classes,
        rows: items,
    })
}

/// First `min(top_n, T)` vocab entries as `(token, count)` pairs.
pub fn histogram(vocab: &AttributeVocab, top_n: usize) -> Vec<(String, u64)> {
    vocab
        .entries
        .iter()
        .take(top_n)
        .map(|e| (e.token.clone(), e.count))
        .collect()
}

/// Write a histogram as CSV with columns `rank,token,count` (1-based ranks).
pub fn write_histogram_csv(vocab: &AttributeVocab, top_n: usize, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "rank,token,count")?;
    for (i, (token, count)) in histogram(vocab, top_n).iter().enumerate() {
        writeln!(out, "{},{},{}", i + 1, token, count)?;
    }
    out.flush()?;
    Ok(())
}

/// Read a corpus file: one `item_id<TAB>title` record per line.
pub fn read_corpus(path: &Path) -> Result<Vec<(String, String)>> {
    let file = File::open(path)?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        match line.split_once('\t') {
            Some((id, title)) => records.push((id.to_string(), title.to_string())),
            None => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    reason: "expected item_id<TAB>title".into(),
                })
            }
        }
    }
    Ok(records)
}

/// Write targets as `item_id<TAB>comma-separated attr_ids`, one item per line.
pub fn write_targets(items: &[ItemAttributes], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        let ids: Vec<String> = item.attr_ids.iter().map(|i| i.to_string()).collect();
        writeln!(out, "{}\t{}", item.item_id, ids.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Read a targets file written by [`write_targets`].
pub fn read_targets(path: &Path) -> Result<Vec<ItemAttributes>> {
    let file = File::open(path)?;
    let mut items = Vec::new();
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
        let (id, ids_str) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected item_id<TAB>attr_ids".into()))?;
        let mut attr_ids = Vec::new();
        for part in ids_str.split(',') {
            let v: usize = part
                .parse()
                .map_err(|_| parse_err(format!("bad attribute id {part:?}")))?;
            attr_ids.push(v);
        }
        if attr_ids.is_empty() || attr_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(parse_err("attr ids must be strictly increasing".into()));
        }
        items.push(ItemAttributes {
            item_id: id.to_string(),
            attr_ids,
        });
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_vocab() -> AttributeVocab {
        let titles = ["red apple phone", "red case", "apple case"];
        build_vocab(&titles, 1).unwrap()
    }

    #[test]
    fn tokenize_empty() {
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn tokenize_lowercases_and_keeps_duplicates() {
        assert_eq!(tokenize("Red  APPLE apple"), vec!["red", "apple", "apple"]);
        assert_eq!(tokenize("iphone 13 pro"), vec!["iphone", "13", "pro"]);
    }

    #[test]
    fn tokenize_no_lowercase() {
        assert_eq!(tokenize_with("Red APPLE", false), vec!["Red", "APPLE"]);
    }

    #[test]
    fn vocab_orders_by_count_then_token() {
        let vocab = toy_vocab();
        let got: Vec<(&str, u64, usize)> = vocab
            .entries()
            .iter()
            .map(|e| (e.token.as_str(), e.count, e.id))
            .collect();
        assert_eq!(got, vec![("apple", 2, 0), ("case", 2, 1), ("red", 2, 2)]);
    }

    #[test]
    fn vocab_single_token() {
        let vocab = build_vocab(&["a a a"], 2).unwrap();
        assert_eq!(vocab.len(), 1);
        assert_eq!(vocab.entries()[0].token, "a");
        assert_eq!(vocab.entries()[0].count, 3);
    }

    #[test]
    fn vocab_empty_is_error() {
        assert!(matches!(
            build_vocab(&["x y"], 5),
            Err(Error::EmptyVocab { min_count: 5 })
        ));
    }

    #[test]
    fn vocab_title_count_mode() {
        // "a" occurs 3 times but in only 1 title.
        let vocab = build_vocab_with(&["a a a b", "b c"], 1, CountMode::Titles, true).unwrap();
        assert_eq!(vocab.id_of("b"), Some(0));
        assert_eq!(vocab.id_of("a"), None);
    }

    #[test]
    fn encode_dedups_and_sorts() {
        let vocab = toy_vocab();
        let item = encode_item("i1", "red APPLE apple", &vocab).unwrap();
        assert_eq!(item.attr_ids, vec![0, 2]);
        assert_eq!(item.k(), 2);
    }

    #[test]
    fn encode_no_attributes() {
        let vocab = toy_vocab();
        assert!(encode_item("i2", "zzz", &vocab).is_none());
    }

    #[test]
    fn encode_single() {
        let vocab = toy_vocab();
        let item = encode_item("i3", "case", &vocab).unwrap();
        assert_eq!(item.attr_ids, vec![1]);
        assert_eq!(item.k(), 1);
    }

    #[test]
    fn soft_targets_dense_rows() {
        let items = vec![
            ItemAttributes {
                item_id: "a".into(),
                attr_ids: vec![0, 2],
            },
            ItemAttributes {
                item_id: "b".into(),
                attr_ids: vec![1],
            },
        ];
        let targets = build_soft_targets(items, 3).unwrap();
        assert_eq!(targets.dense_row(0), vec![0.5, 0.0, 0.5]);
        assert_eq!(targets.dense_row(1), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn soft_targets_one_third_rows() {
        let items = vec![
            ItemAttributes {
                item_id: "a".into(),
                attr_ids: vec![0],
            },
            ItemAttributes {
                item_id: "b".into(),
                attr_ids: vec![0, 1, 2],
            },
        ];
        let targets = build_soft_targets(items, 3).unwrap();
        assert_eq!(targets.dense_row(0), vec![1.0, 0.0, 0.0]);
        let row = targets.dense_row(1);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn soft_targets_reject_out_of_range() {
        let items = vec![ItemAttributes {
            item_id: "a".into(),
            attr_ids: vec![3],
        }];
        assert!(matches!(
            build_soft_targets(items, 3),
            Err(Error::InvalidAttributeId {
                id: 3,
                num_classes: 3
            })
        ));
    }

    #[test]
    fn histogram_clamps() {
        let vocab = toy_vocab();
        assert_eq!(
            histogram(&vocab, 2),
            vec![("apple".to_string(), 2), ("case".to_string(), 2)]
        );
        assert_eq!(histogram(&vocab, 100).len(), 3);
        let single = build_vocab(&["a a a"], 2).unwrap();
        assert_eq!(histogram(&single, 1), vec![("a".to_string(), 3)]);
    }

    #[test]
    fn vocab_json_deterministic_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        let a = toy_vocab();
        a.save(&path).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        let b = AttributeVocab::load(&path).unwrap();
        assert_eq!(a.entries(), b.entries());
        b.save(&path).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn targets_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("targets.tsv");
        let items = vec![
            ItemAttributes {
                item_id: "i1".into(),
                attr_ids: vec![0, 2, 7],
            },
            ItemAttributes {
                item_id: "i2".into(),
                attr_ids: vec![1],
            },
        ];
        write_targets(&items, &path).unwrap();
        assert_eq!(read_targets(&path).unwrap(), items);
    }

    #[test]
    fn corpus_rejects_missing_tab() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.tsv");
        std::fs::write(&path, "no-tab-here\n").unwrap();
        assert!(matches!(read_corpus(&path), Err(Error::Parse { .. })));
    }

    proptest::proptest! {
        #[test]
        fn tokenize_join_idempotent(title in "[a-zA-Z0-9 \\t]{0,40}") {
            let once = tokenize(&title);
            let again = tokenize(&once.join(" "));
            proptest::prop_assert_eq!(once, again);
        }

        #[test]
        fn threshold_monotone(
            titles in proptest::collection::vec("[a-e]( [a-e]){0,5}", 1..20),
            lo in 1u64..4,
            extra in 0u64..4,
        ) {
            let hi = lo + extra;
            let loose = build_vocab(&titles, lo);
            let strict = build_vocab(&titles, hi);
            if let Ok(strict) = strict {
                let loose = loose.expect("higher threshold kept tokens, lower must too");
                for e in strict.entries() {
                    proptest::prop_assert!(loose.id_of(&e.token).is_some());
                }
            }
        }

        #[test]
        fn soft_target_rows_sum_to_one(
            ids in proptest::collection::btree_set(0usize..30, 1..8),
        ) {
            let items = vec![ItemAttributes {
                item_id: "x".into(),
                attr_ids: ids.into_iter().collect(),
            }];
            let targets = build_soft_targets(items, 30).unwrap();
            let sum: f64 = targets.dense_row(0).iter().sum();
            proptest::prop_assert!((sum - 1.0).abs() < 1e-9);
        }
    }
}
