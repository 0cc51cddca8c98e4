//! Recall@k and MAR@k against instance-level ground truth.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search::RankedList;

/// Recall denominator convention for queries with more matches than k.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RecallDenominator {
    /// min(|relevant|, k): recall stays attainable at 1.0.
    #[default]
    Min,
    /// |relevant|: classic recall, capped below 1.0 when |relevant| > k.
    Full,
}

impl std::str::FromStr for RecallDenominator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min" => Ok(RecallDenominator::Min),
            "full" => Ok(RecallDenominator::Full),
            other => Err(Error::InvalidConfig(format!(
                "unknown denominator {other:?} (expected min or full)"
            ))),
        }
    }
}

/// Query id -> nonempty list of relevant database ids, in file order.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    entries: Vec<(String, Vec<String>)>,
    index: HashMap<String, usize>,
}

impl GroundTruth {
    pub fn new(entries: Vec<(String, Vec<String>)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (qid, relevant)) in entries.iter().enumerate() {
            if relevant.is_empty() {
                return Err(Error::EmptyRelevantSet(qid.clone()));
            }
            let mut seen = HashSet::with_capacity(relevant.len());
            for id in relevant {
                if !seen.insert(id.as_str()) {
                    return Err(Error::InvalidConfig(format!(
                        "query {qid}: duplicate relevant id {id:?}"
                    )));
                }
            }
            if index.insert(qid.clone(), i).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate query id {qid:?}")));
            }
        }
        Ok(GroundTruth { entries, index })
    }

    pub fn relevant(&self, query_id: &str) -> Option<&[String]> {
        self.index
            .get(query_id)
            .map(|&i| self.entries[i].1.as_slice())
    }

    pub fn entries(&self) -> &[(String, Vec<String>)] {
        &self.entries
    }

    /// Read TSV `query_id<TAB>comma-separated relevant db ids`.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let mut entries = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (qid, rest) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                reason: "expected query_id<TAB>relevant_ids".into(),
            })?;
            let relevant: Vec<String> = rest
                .split(',')
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect();
            entries.push((qid.to_string(), relevant));
        }
        GroundTruth::new(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for (qid, relevant) in &self.entries {
            writeln!(out, "{}\t{}", qid, relevant.join(","))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Per-query recalls and their macro average.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub mar: f64,
    pub num_queries: usize,
    pub per_query: Vec<PerQueryRecall>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerQueryRecall {
    pub id: String,
    pub recall: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(self.to_json()?.as_bytes())?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

fn check_unique_ids(list: &RankedList) -> Result<()> {
    let mut seen = HashSet::with_capacity(list.entries.len());
    for e in &list.entries {
        if !seen.insert(e.db_id.as_str()) {
            return Err(Error::DuplicateDbId {
                query_id: list.query_id.clone(),
                db_id: e.db_id.clone(),
            });
        }
    }
    Ok(())
}

/// |top-k hits| / min(|relevant|, k) (or / |relevant| with [`RecallDenominator::Full`]).
pub fn recall_at_k(
    ranked: &RankedList,
    relevant: &[String],
    k: usize,
    denominator: RecallDenominator,
) -> Result<f64> {
    if k < 1 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    if relevant.is_empty() {
        return Err(Error::EmptyRelevantSet(ranked.query_id.clone()));
    }
    check_unique_ids(ranked)?;
    let relevant_set: HashSet<&str> = relevant.iter().map(String::as_str).collect();
    let hits = ranked
        .entries
        .iter()
        .take(k)
        .filter(|e| relevant_set.contains(e.db_id.as_str()))
        .count();
    let denom = match denominator {
        RecallDenominator::Min => relevant.len().min(k),
        RecallDenominator::Full => relevant.len(),
    };
    Ok(hits as f64 / denom as f64)
}

/// Macro-average recall@k over every ranked query, in ranked order.
pub fn mar_at_k(
    ranked: &[RankedList],
    gt: &GroundTruth,
    k: usize,
    denominator: RecallDenominator,
) -> Result<EvalReport> {
    let mut per_query = Vec::with_capacity(ranked.len());
    let mut total = 0.0;
    for list in ranked {
        let relevant = gt
            .relevant(&list.query_id)
            .ok_or_else(|| Error::MissingGroundTruth(list.query_id.clone()))?;
        let recall = recall_at_k(list, relevant, k, denominator)?;
        total += recall;
        per_query.push(PerQueryRecall {
            id: list.query_id.clone(),
            recall,
        });
    }
    let mar = if per_query.is_empty() {
        0.0
    } else {
        total / per_query.len() as f64
    };
    Ok(EvalReport {
        k,
        mar,
        num_queries: per_query.len(),
        per_query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::RankedEntry;
    use approx::assert_abs_diff_eq;

    fn list(qid: &str, ids: &[&str]) -> RankedList {
        RankedList {
            query_id: qid.into(),
            entries: ids
                .iter()
                .enumerate()
                .map(|(i, id)| RankedEntry {
                    db_id: id.to_string(),
                    distance: i as f64 * 0.1,
                })
                .collect(),
        }
    }

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn recall_half() {
        let l = list("q", &["a", "x", "y", "z", "w", "u", "v", "t", "s", "r"]);
        let r = recall_at_k(&l, &ids(&["a", "b"]), 10, RecallDenominator::Min).unwrap();
        assert_abs_diff_eq!(r, 0.5);
    }

    #[test]
    fn recall_perfect_single() {
        let l = list("q", &["a", "x"]);
        let r = recall_at_k(&l, &ids(&["a"]), 10, RecallDenominator::Min).unwrap();
        assert_abs_diff_eq!(r, 1.0);
    }

    #[test]
    fn recall_min_denominator_with_many_relevant() {
        let top: Vec<String> = (0..10).map(|i| format!("r{i}")).collect();
        let top_refs: Vec<&str> = top.iter().map(String::as_str).collect();
        let l = list("q", &top_refs);
        let relevant: Vec<String> = (0..15).map(|i| format!("r{i}")).collect();
        let min = recall_at_k(&l, &relevant, 10, RecallDenominator::Min).unwrap();
        assert_abs_diff_eq!(min, 1.0);
        let full = recall_at_k(&l, &relevant, 10, RecallDenominator::Full).unwrap();
        assert_abs_diff_eq!(full, 10.0 / 15.0);
    }

    #[test]
    fn recall_empty_relevant_set() {
        let l = list("q", &["a"]);
        assert!(matches!(
            recall_at_k(&l, &[], 10, RecallDenominator::Min),
            Err(Error::EmptyRelevantSet(_))
        ));
    }

    #[test]
    fn recall_rejects_duplicates() {
        let l = list("q", &["a", "a"]);
        assert!(matches!(
            recall_at_k(&l, &ids(&["a"]), 10, RecallDenominator::Min),
            Err(Error::DuplicateDbId { .. })
        ));
    }

    #[test]
    fn recall_monotone_in_k() {
        let l = list("q", &["x", "a", "y", "b", "z"]);
        let relevant = ids(&["a", "b"]);
        let mut prev = 0.0;
        for k in 1..=5 {
            let r = recall_at_k(&l, &relevant, k, RecallDenominator::Full).unwrap();
            assert!(r >= prev);
            prev = r;
        }
    }

    #[test]
    fn recall_unchanged_by_appending_below_k() {
        let short = list("q", &["a", "x", "y"]);
        let long = list("q", &["a", "x", "y", "junk1", "junk2"]);
        let relevant = ids(&["a", "y"]);
        let k = 3;
        let a = recall_at_k(&short, &relevant, k, RecallDenominator::Min).unwrap();
        let b = recall_at_k(&long, &relevant, k, RecallDenominator::Min).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mar_is_mean_of_recalls() {
        let gt = GroundTruth::new(vec![
            ("q0".into(), ids(&["a", "b"])),
            ("q1".into(), ids(&["c"])),
        ])
        .unwrap();
        let ranked = vec![list("q0", &["a", "x"]), list("q1", &["c", "y"])];
        let report = mar_at_k(&ranked, &gt, 10, RecallDenominator::Min).unwrap();
        assert_abs_diff_eq!(report.mar, 0.75);
        assert_eq!(report.num_queries, 2);
    }

    #[test]
    fn mar_all_perfect() {
        let gt =
            GroundTruth::new(vec![("q0".into(), ids(&["a"])), ("q1".into(), ids(&["b"]))]).unwrap();
        let ranked = vec![list("q0", &["a"]), list("q1", &["b"])];
        let report = mar_at_k(&ranked, &gt, 1, RecallDenominator::Min).unwrap();
        assert_abs_diff_eq!(report.mar, 1.0);
    }

    #[test]
    fn mar_hand_fixture() {
        // 5-item db {a,b,c,d,e}; three queries with hand recalls at k=2:
        // q0: relevant {a,b}, top2 = [a,b] -> 1.0
        // q1: relevant {c,d,e}, top2 = [c,x] -> 1/2 (denominator min(3,2)=2)
        // q2: relevant {e}, top2 = [a,b] -> 0.0
        let gt = GroundTruth::new(vec![
            ("q0".into(), ids(&["a", "b"])),
            ("q1".into(), ids(&["c", "d", "e"])),
            ("q2".into(), ids(&["e"])),
        ])
        .unwrap();
        let ranked = vec![
            list("q0", &["a", "b"]),
            list("q1", &["c", "x"]),
            list("q2", &["a", "b"]),
        ];
        let report = mar_at_k(&ranked, &gt, 2, RecallDenominator::Min).unwrap();
        assert_abs_diff_eq!(report.mar, (1.0 + 0.5 + 0.0) / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn mar_missing_ground_truth() {
        let gt = GroundTruth::new(vec![("q0".into(), ids(&["a"]))]).unwrap();
        let ranked = vec![list("q9", &["a"])];
        assert!(matches!(
            mar_at_k(&ranked, &gt, 10, RecallDenominator::Min),
            Err(Error::MissingGroundTruth(q)) if q == "q9"
        ));
    }

    #[test]
    fn mar_permutation_invariant() {
        let gt = GroundTruth::new(vec![
            ("q0".into(), ids(&["a"])),
            ("q1".into(), ids(&["b"])),
            ("q2".into(), ids(&["c"])),
        ])
        .unwrap();
        let a = vec![list("q0", &["a"]), list("q1", &["x"]), list("q2", &["c"])];
        let b = vec![list("q2", &["c"]), list("q0", &["a"]), list("q1", &["x"])];
        let ra = mar_at_k(&a, &gt, 1, RecallDenominator::Min).unwrap();
        let rb = mar_at_k(&b, &gt, 1, RecallDenominator::Min).unwrap();
        assert_abs_diff_eq!(ra.mar, rb.mar, epsilon = 1e-12);
    }

    #[test]
    fn gt_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.tsv");
        let gt = GroundTruth::new(vec![
            ("q0".into(), ids(&["a", "b"])),
            ("q1".into(), ids(&["c"])),
        ])
        .unwrap();
        gt.save(&path).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        let loaded = GroundTruth::load(&path).unwrap();
        loaded.save(&path).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());

        assert!(GroundTruth::new(vec![("q".into(), vec![])]).is_err());
    }

    #[test]
    fn report_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let report = EvalReport {
            k: 10,
            mar: 0.625,
            num_queries: 2,
            per_query: vec![
                PerQueryRecall {
                    id: "q0".into(),
                    recall: 0.25,
                },
                PerQueryRecall {
                    id: "q1".into(),
                    recall: 1.0,
                },
            ],
        };
        report.save(&path).unwrap();
        let loaded = EvalReport::load(&path).unwrap();
        assert_eq!(loaded.k, 10);
        assert_eq!(loaded.num_queries, 2);
        assert_abs_diff_eq!(loaded.mar, 0.625);
    }
}
