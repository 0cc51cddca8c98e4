//! End-to-end retrieval pipeline and the ablation ladder.
//!
//! Per ensemble member: train on database features, embed queries and
//! database, fit whitening on the database embeddings only, whiten and
//! L2-normalize both sides. Members are concatenated along the feature
//! dimension, searched exactly, re-ranked, and evaluated. Every stage
//! persists its artifact so a run can resume from any prefix.

use std::path::{Path, PathBuf};

use crate::attrs::{
    build_soft_targets, build_vocab_with, encode_corpus, read_corpus, read_targets, write_targets,
    AttributeVocab, CountMode, SoftTargets,
};
use crate::config::Config;
use crate::embedding::{ensemble_concat, l2_normalize, whiten_pair, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::eval::{mar_at_k, EvalReport, GroundTruth, RecallDenominator};
use crate::model::{EncoderConfig, ModelWeights};
use crate::search::{
    k_reciprocal_rerank_with_threads, top_n_search_with_threads, write_ranked, Metric, RankedList,
    RerankParams, SearchParams,
};
use crate::trainer::{train, TrainConfig};

/// One ensemble member: a seed and a learning rate.
#[derive(Debug, Clone, Copy)]
pub struct MemberConfig {
    pub seed: u64,
    pub lr: f64,
}

/// Fully resolved pipeline configuration.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub corpus: PathBuf,
    pub queries: PathBuf,
    pub db: PathBuf,
    pub gt: PathBuf,
    pub workdir: PathBuf,
    pub min_count: u64,
    pub lowercase: bool,
    pub count_mode: CountMode,
    pub encoder: EncoderConfig,
    pub trainer: TrainConfig,
    pub use_ema: bool,
    pub members: Vec<MemberConfig>,
    pub metric: Metric,
    pub top_n: usize,
    pub final_k: usize,
    pub rerank: Option<RerankParams>,
    pub eval_k: usize,
    pub denominator: RecallDenominator,
    pub whiten_eps: f64,
    pub threads: Option<usize>,
}

/// Build an [`EncoderConfig`] from `prefix`-ed keys ("input_dim", ...).
/// A missing or zero input_dim is inferred from the features at train time.
pub fn encoder_config_from(cfg: &Config, prefix: &str) -> Result<EncoderConfig> {
    let key = |name: &str| format!("{prefix}{name}");
    let default = EncoderConfig::default();
    Ok(EncoderConfig {
        input_dim: cfg.get_or(&key("input_dim"), 0)?,
        hidden_dim: cfg.get_or(&key("hidden_dim"), default.hidden_dim)?,
        num_blocks: cfg.get_or(&key("num_blocks"), default.num_blocks)?,
        embed_dim: cfg.get_or(&key("embed_dim"), default.embed_dim)?,
        drop_path_prob: cfg.get_or(&key("drop_path_prob"), default.drop_path_prob)?,
        head_init_scale: cfg.get_or(&key("head_init_scale"), default.head_init_scale)?,
    })
}

/// Build a [`TrainConfig`] from `prefix`-ed keys ("base_lr", "epochs", ...).
pub fn train_config_from(cfg: &Config, prefix: &str) -> Result<TrainConfig> {
    let key = |name: &str| format!("{prefix}{name}");
    let default = TrainConfig::default();
    let out = TrainConfig {
        base_lr: cfg.get_or(&key("base_lr"), default.base_lr)?,
        weight_decay: cfg.get_or(&key("weight_decay"), default.weight_decay)?,
        beta1: cfg.get_or(&key("beta1"), default.beta1)?,
        beta2: cfg.get_or(&key("beta2"), default.beta2)?,
        batch_size: cfg.get_or(&key("batch_size"), default.batch_size)?,
        epochs: cfg.get_or(&key("epochs"), default.epochs)?,
        warmup_epochs: cfg.get_or(&key("warmup_epochs"), default.warmup_epochs)?,
        ema_decay: cfg.get_or(&key("ema_decay"), default.ema_decay)?,
        poly_epsilon: cfg.get_or(&key("poly_epsilon"), default.poly_epsilon)?,
        seed: cfg.get_or(&key("seed"), default.seed)?,
    };
    out.validate()?;
    Ok(out)
}

/// Build a [`crate::synth::SynthConfig`] from bare field-name keys.
pub fn synth_config_from(cfg: &Config) -> Result<crate::synth::SynthConfig> {
    let default = crate::synth::reference_config();
    let out = crate::synth::SynthConfig {
        num_coarse_classes: cfg.get_or("num_coarse_classes", default.num_coarse_classes)?,
        instances_per_class: cfg.get_or("instances_per_class", default.instances_per_class)?,
        views_per_instance: cfg.get_or("views_per_instance", default.views_per_instance)?,
        feature_dim: cfg.get_or("feature_dim", default.feature_dim)?,
        vocab_size: cfg.get_or("vocab_size", default.vocab_size)?,
        attrs_per_instance: cfg.get_or("attrs_per_instance", default.attrs_per_instance)?,
        class_signal: cfg.get_or("class_signal", default.class_signal)?,
        instance_signal: cfg.get_or("instance_signal", default.instance_signal)?,
        noise_sigma: cfg.get_or("noise_sigma", default.noise_sigma)?,
        seed: cfg.get_or("seed", default.seed)?,
    };
    out.validate()?;
    Ok(out)
}

fn count_mode_from(cfg: &Config, key: &str) -> Result<CountMode> {
    match cfg.get(key).unwrap_or("occurrences") {
        "occurrences" => Ok(CountMode::Occurrences),
        "titles" => Ok(CountMode::Titles),
        other => Err(Error::InvalidConfig(format!(
            "bad {key} {other:?} (expected occurrences or titles)"
        ))),
    }
}

/// Resolve a full [`PipelineConfig`] from dotted keys.
pub fn pipeline_config_from(cfg: &Config) -> Result<PipelineConfig> {
    let trainer = train_config_from(cfg, "trainer.")?;
    let num_members: usize = cfg.get_or("ensemble.size", 1)?;
    if num_members == 0 {
        return Err(Error::InvalidConfig("ensemble.size must be >= 1".into()));
    }
    let mut members = Vec::with_capacity(num_members);
    for i in 0..num_members {
        members.push(MemberConfig {
            seed: cfg.get_or(&format!("ensemble.{i}.seed"), trainer.seed + i as u64)?,
            lr: cfg.get_or(&format!("ensemble.{i}.lr"), trainer.base_lr)?,
        });
    }
    let metric: Metric = cfg.get_or("search.metric", Metric::Cosine)?;
    let top_n = cfg.get_or("search.top_n", 100)?;
    let final_k = cfg.get_or("search.final_k", 10)?;
    SearchParams::new(metric, top_n, final_k)?;
    let rerank = if cfg.get_bool("rerank.enabled", true)? {
        let d = RerankParams::default();
        Some(RerankParams::new(
            cfg.get_or("rerank.k1", d.k1)?,
            cfg.get_or("rerank.k2", d.k2)?,
            cfg.get_or("rerank.alpha", d.alpha)?,
        )?)
    } else {
        None
    };
    Ok(PipelineConfig {
        corpus: cfg.require_path("paths.corpus")?,
        queries: cfg.require_path("paths.queries")?,
        db: cfg.require_path("paths.db")?,
        gt: cfg.require_path("paths.gt")?,
        workdir: cfg.require_path("paths.workdir")?,
        min_count: cfg.get_or("miner.min_count", 30)?,
        lowercase: cfg.get_bool("miner.lowercase", true)?,
        count_mode: count_mode_from(cfg, "miner.count_mode")?,
        encoder: encoder_config_from(cfg, "encoder.")?,
        trainer,
        use_ema: cfg.get_bool("trainer.use_ema", true)?,
        members,
        metric,
        top_n,
        final_k,
        rerank,
        eval_k: cfg.get_or("eval.k", 10)?,
        denominator: cfg.get_or("eval.denominator", RecallDenominator::Min)?,
        whiten_eps: cfg.get_or("whiten.eps", 1e-6)?,
        threads: match cfg.get("threads") {
            Some(raw) => {
                Some(raw.parse().map_err(|_| {
                    Error::InvalidConfig(format!("bad value {raw:?} for key threads"))
                })?)
            }
            None => None,
        },
    })
}

/// Write `bytes` to `path` via a temp file and rename, so failed stages never
/// leave partial outputs behind.
fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    write(&tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn require_input(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingInput(path.to_path_buf()))
    }
}

/// Truncate ranked lists to `k` entries.
fn truncate_lists(lists: &[RankedList], k: usize) -> Vec<RankedList> {
    lists
        .iter()
        .map(|l| RankedList {
            query_id: l.query_id.clone(),
            entries: l.entries[..k.min(l.entries.len())].to_vec(),
        })
        .collect()
}

/// Artifact names inside the pipeline work directory.
pub mod artifacts {
    pub const VOCAB: &str = "vocab.json";
    pub const TARGETS: &str = "targets.tsv";
    pub const CANDIDATES: &str = "candidates.tsv";
    pub const RANKED: &str = "ranked.tsv";
    pub const REPORT: &str = "report.json";

    pub fn model(member: usize) -> String {
        format!("model_{member}.ckpt")
    }
    pub fn member_emb(member: usize, side: &str) -> String {
        format!("{side}_{member}.emb")
    }
    pub fn member_whitened(member: usize, side: &str) -> String {
        format!("{side}_{member}_wn.emb")
    }
    pub fn ensemble(side: &str) -> String {
        format!("{side}_ens.emb")
    }
}

/// Run the whole pipeline. With `resume`, stages whose artifacts already
/// exist are skipped and their outputs reloaded.
pub fn run_pipeline(p: &PipelineConfig, resume: bool) -> Result<EvalReport> {
    for input in [&p.corpus, &p.queries, &p.db, &p.gt] {
        require_input(input)?;
    }
    std::fs::create_dir_all(&p.workdir)?;
    let art = |name: &str| p.workdir.join(name);
    let fresh = |path: &Path| !(resume && path.is_file());

    // Pseudo-attribute vocabulary.
    let vocab_path = art(artifacts::VOCAB);
    if fresh(&vocab_path) {
        (|| -> Result<()> {
            let corpus = read_corpus(&p.corpus)?;
            let titles: Vec<&str> = corpus.iter().map(|(_, t)| t.as_str()).collect();
            let vocab = build_vocab_with(&titles, p.min_count, p.count_mode, p.lowercase)?;
            write_atomic(&vocab_path, |tmp| vocab.save(tmp))
        })()
        .map_err(|e| e.in_stage("mine-attrs"))?;
    }
    let vocab = AttributeVocab::load(&vocab_path).map_err(|e| e.in_stage("mine-attrs"))?;

    // Soft targets.
    let targets_path = art(artifacts::TARGETS);
    if fresh(&targets_path) {
        (|| -> Result<()> {
            let corpus = read_corpus(&p.corpus)?;
            let (items, dropped) = encode_corpus(&corpus, &vocab, p.lowercase);
            if dropped > 0 {
                eprintln!("build-targets: dropped {dropped} items with no vocabulary token");
            }
            write_atomic(&targets_path, |tmp| write_targets(&items, tmp))
        })()
        .map_err(|e| e.in_stage("build-targets"))?;
    }
    let targets: SoftTargets = (|| build_soft_targets(read_targets(&targets_path)?, vocab.len()))()
        .map_err(|e| e.in_stage("build-targets"))?;

    // Per-member training, embedding, whitening.
    let mut member_q = Vec::with_capacity(p.members.len());
    let mut member_db = Vec::with_capacity(p.members.len());
    for (i, member) in p.members.iter().enumerate() {
        let model_path = art(&artifacts::model(i));
        if fresh(&model_path) {
            (|| -> Result<()> {
                let features = EmbeddingMatrix::load(&p.db)?;
                let mut enc = p.encoder;
                if enc.input_dim == 0 {
                    enc.input_dim = features.dim();
                }
                let tc = TrainConfig {
                    seed: member.seed,
                    base_lr: member.lr,
                    ..p.trainer
                };
                let (model, report) = train(&features, &targets, &enc, &tc)?;
                eprintln!(
                    "train[{i}]: {} samples, loss {:.4} -> {:.4}",
                    report.num_samples,
                    report.epoch_losses.first().unwrap_or(&f64::NAN),
                    report.epoch_losses.last().unwrap_or(&f64::NAN),
                );
                write_atomic(&model_path, |tmp| model.save(tmp))
            })()
            .map_err(|e| e.in_stage("train"))?;
        }

        let q_path = art(&artifacts::member_emb(i, "queries"));
        let db_path = art(&artifacts::member_emb(i, "db"));
        if fresh(&q_path) || fresh(&db_path) {
            (|| -> Result<()> {
                let model = ModelWeights::load(&model_path)?;
                let queries = EmbeddingMatrix::load(&p.queries)?;
                let db = EmbeddingMatrix::load(&p.db)?;
                write_atomic(&q_path, |tmp| model.embed(&queries, p.use_ema)?.save(tmp))?;
                write_atomic(&db_path, |tmp| model.embed(&db, p.use_ema)?.save(tmp))
            })()
            .map_err(|e| e.in_stage("embed"))?;
        }

        let q_wn_path = art(&artifacts::member_whitened(i, "queries"));
        let db_wn_path = art(&artifacts::member_whitened(i, "db"));
        if fresh(&q_wn_path) || fresh(&db_wn_path) {
            (|| -> Result<()> {
                let q = EmbeddingMatrix::load(&q_path)?;
                let db = EmbeddingMatrix::load(&db_path)?;
                let (db_w, q_w) = whiten_pair(&db, &q, p.whiten_eps)?;
                write_atomic(&q_wn_path, |tmp| l2_normalize(&q_w)?.save(tmp))?;
                write_atomic(&db_wn_path, |tmp| l2_normalize(&db_w)?.save(tmp))
            })()
            .map_err(|e| e.in_stage("whiten"))?;
        }
        member_q.push(q_wn_path);
        member_db.push(db_wn_path);
    }

    // Ensemble concatenation.
    let q_ens_path = art(&artifacts::ensemble("queries"));
    let db_ens_path = art(&artifacts::ensemble("db"));
    if fresh(&q_ens_path) || fresh(&db_ens_path) {
        (|| -> Result<()> {
            let qs: Vec<EmbeddingMatrix> = member_q
                .iter()
                .map(|p| EmbeddingMatrix::load(p))
                .collect::<Result<_>>()?;
            let dbs: Vec<EmbeddingMatrix> = member_db
                .iter()
                .map(|p| EmbeddingMatrix::load(p))
                .collect::<Result<_>>()?;
            write_atomic(&q_ens_path, |tmp| ensemble_concat(&qs)?.save(tmp))?;
            write_atomic(&db_ens_path, |tmp| ensemble_concat(&dbs)?.save(tmp))
        })()
        .map_err(|e| e.in_stage("ensemble"))?;
    }

    // Exact top-N search.
    let candidates_path = art(artifacts::CANDIDATES);
    if fresh(&candidates_path) {
        (|| -> Result<()> {
            let q = EmbeddingMatrix::load(&q_ens_path)?;
            let db = EmbeddingMatrix::load(&db_ens_path)?;
            let params = SearchParams::new(p.metric, p.top_n.min(db.num_rows()), p.final_k)?;
            let lists = top_n_search_with_threads(&q, &db, &params, p.threads)?;
            write_atomic(&candidates_path, |tmp| write_ranked(&lists, tmp))
        })()
        .map_err(|e| e.in_stage("search"))?;
    }

    // Re-ranking (or truncation) to the final k.
    let ranked_path = art(artifacts::RANKED);
    if fresh(&ranked_path) {
        (|| -> Result<()> {
            let initial = crate::search::read_ranked(&candidates_path)?;
            let lists = match p.rerank {
                Some(params) => {
                    let q = EmbeddingMatrix::load(&q_ens_path)?;
                    let db = EmbeddingMatrix::load(&db_ens_path)?;
                    k_reciprocal_rerank_with_threads(
                        &q, &db, &initial, &params, p.final_k, p.metric, p.threads,
                    )?
                }
                None => truncate_lists(&initial, p.final_k),
            };
            write_atomic(&ranked_path, |tmp| write_ranked(&lists, tmp))
        })()
        .map_err(|e| e.in_stage("rerank"))?;
    }

    // Evaluation.
    let report_path = art(artifacts::REPORT);
    if fresh(&report_path) {
        (|| -> Result<()> {
            let ranked = crate::search::read_ranked(&ranked_path)?;
            let gt = GroundTruth::load(&p.gt)?;
            let report = mar_at_k(&ranked, &gt, p.eval_k, p.denominator)?;
            write_atomic(&report_path, |tmp| report.save(tmp))
        })()
        .map_err(|e| e.in_stage("eval"))?;
    }
    EvalReport::load(&report_path).map_err(|e| e.in_stage("eval"))
}

/// Ladder variants for [`ablation_run`].
pub const LADDER: [&str; 4] = ["baseline", "+whitening", "+rerank", "+ensemble"];

/// Run the cumulative ablation ladder in memory and return (variant, MAR@k)
/// rows in ladder order. Nothing is written until every variant has run.
pub fn ablation_run(p: &PipelineConfig, variants: &[String]) -> Result<Vec<(String, f64)>> {
    for input in [&p.corpus, &p.queries, &p.db, &p.gt] {
        require_input(input)?;
    }
    for v in variants {
        if !LADDER.contains(&v.as_str()) {
            return Err(Error::InvalidConfig(format!(
                "unknown ablation variant {v:?} (expected one of {LADDER:?})"
            )));
        }
    }
    let corpus = read_corpus(&p.corpus)?;
    let titles: Vec<&str> = corpus.iter().map(|(_, t)| t.as_str()).collect();
    let vocab = build_vocab_with(&titles, p.min_count, p.count_mode, p.lowercase)?;
    let (items, _) = encode_corpus(&corpus, &vocab, p.lowercase);
    let targets = build_soft_targets(items, vocab.len())?;
    let db = EmbeddingMatrix::load(&p.db)?;
    let queries = EmbeddingMatrix::load(&p.queries)?;
    let gt = GroundTruth::load(&p.gt)?;
    let mut enc = p.encoder;
    if enc.input_dim == 0 {
        enc.input_dim = db.dim();
    }

    let train_member = |member: &MemberConfig| -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
        let tc = TrainConfig {
            seed: member.seed,
            base_lr: member.lr,
            ..p.trainer
        };
        let (model, _) = train(&db, &targets, &enc, &tc)?;
        Ok((
            model.embed(&queries, p.use_ema)?,
            model.embed(&db, p.use_ema)?,
        ))
    };

    let mar_of = |q: &EmbeddingMatrix, dbm: &EmbeddingMatrix, rerank: bool| -> Result<f64> {
        let top_n = if rerank {
            p.top_n.min(dbm.num_rows())
        } else {
            p.final_k
        };
        let params = SearchParams::new(p.metric, top_n, p.final_k)?;
        let initial = top_n_search_with_threads(q, dbm, &params, p.threads)?;
        let lists = if rerank {
            let rp = p.rerank.unwrap_or_default();
            k_reciprocal_rerank_with_threads(q, dbm, &initial, &rp, p.final_k, p.metric, p.threads)?
        } else {
            truncate_lists(&initial, p.final_k)
        };
        Ok(mar_at_k(&lists, &gt, p.eval_k, p.denominator)?.mar)
    };

    let (q0, db0) = train_member(&p.members[0])?;
    let mut whitened: Option<(EmbeddingMatrix, EmbeddingMatrix)> = None;
    let mut rows = Vec::with_capacity(variants.len());
    for variant in variants {
        let mar = match variant.as_str() {
            "baseline" => mar_of(&q0, &db0, false)?,
            "+whitening" => {
                let (db_w, q_w) = whiten_pair(&db0, &q0, p.whiten_eps)?;
                let pair = (l2_normalize(&q_w)?, l2_normalize(&db_w)?);
                let mar = mar_of(&pair.0, &pair.1, false)?;
                whitened = Some(pair);
                mar
            }
            "+rerank" => {
                let (q_w, db_w) = match &whitened {
                    Some(pair) => pair.clone(),
                    None => {
                        let (db_w, q_w) = whiten_pair(&db0, &q0, p.whiten_eps)?;
                        (l2_normalize(&q_w)?, l2_normalize(&db_w)?)
                    }
                };
                mar_of(&q_w, &db_w, true)?
            }
            "+ensemble" => {
                if p.members.len() < 2 {
                    return Err(Error::InvalidConfig(
                        "+ensemble needs ensemble.size >= 2".into(),
                    ));
                }
                let mut qs = Vec::with_capacity(p.members.len());
                let mut dbs = Vec::with_capacity(p.members.len());
                for member in &p.members {
                    let (q, dbm) = train_member(member)?;
                    let (db_w, q_w) = whiten_pair(&dbm, &q, p.whiten_eps)?;
                    qs.push(l2_normalize(&q_w)?);
                    dbs.push(l2_normalize(&db_w)?);
                }
                mar_of(&ensemble_concat(&qs)?, &ensemble_concat(&dbs)?, true)?
            }
            _ => unreachable!("validated above"),
        };
        rows.push((variant.clone(), mar));
    }
    Ok(rows)
}

/// Write ablation rows as CSV with a `variant,mar` header.
pub fn write_ladder_csv(rows: &[(String, f64)], path: &Path) -> Result<()> {
    write_atomic(path, |tmp| {
        use std::io::Write;
        let mut out = std::io::BufWriter::new(std::fs::File::create(tmp)?);
        writeln!(out, "variant,mar")?;
        for (variant, mar) in rows {
            writeln!(out, "{variant},{mar}")?;
        }
        out.flush()?;
        Ok(())
    })
}
