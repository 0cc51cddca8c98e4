//! `weakrank` command-line interface. Every subcommand is a thin wrapper
//! around the library; machine-readable outputs go to files, diagnostics to
//! stderr. Exit codes: 0 success, 1 validation error, 2 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use weakrank::attrs::{
    build_soft_targets, build_vocab_with, encode_corpus, read_corpus, read_targets,
    write_histogram_csv, write_targets, AttributeVocab, CountMode,
};
use weakrank::config::Config;
use weakrank::embedding::{
    apply_whitening, compute_mean_cov, ensemble_concat, fit_whitening, l2_normalize,
    EmbeddingMatrix,
};
use weakrank::error::{Error, Result};
use weakrank::eval::{mar_at_k, GroundTruth, RecallDenominator};
use weakrank::model::ModelWeights;
use weakrank::pipeline::{
    ablation_run, encoder_config_from, pipeline_config_from, run_pipeline, synth_config_from,
    train_config_from, write_ladder_csv, LADDER,
};
use weakrank::search::{
    k_reciprocal_rerank_with_threads, top_n_search_with_threads, write_ranked, Metric, RankedList,
    RerankParams, SearchParams,
};
use weakrank::synth::{export, generate};
use weakrank::trainer::train;

#[derive(Parser)]
#[command(
    name = "weakrank",
    version,
    about = "Weakly-supervised product retrieval toolchain"
)]
struct Cli {
    /// Override the seed used by gen-synth, train, ablate, and pipeline.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker count for search (capped by WEAKRANK_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Skip pipeline stages whose artifacts already exist.
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mine the pseudo-attribute vocabulary from a corpus.
    MineAttrs {
        #[arg(long)]
        corpus: PathBuf,
        /// Keep tokens appearing strictly more than this many times.
        #[arg(long, default_value_t = 30)]
        min_count: u64,
        #[arg(long)]
        out: PathBuf,
        /// Keep token case instead of lowercasing.
        #[arg(long)]
        no_lowercase: bool,
        /// Frequency counting: occurrences or titles.
        #[arg(long, default_value = "occurrences")]
        count_mode: String,
    },
    /// Encode corpus items against a vocabulary into soft-target attributes.
    BuildTargets {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_lowercase: bool,
    },
    /// Emit the top-N vocabulary histogram as CSV.
    Histogram {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 100)]
        top: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate and export the synthetic benchmark.
    GenSynth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override config keys, e.g. --set noise_sigma=0.4 (repeatable).
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Train an encoder on features + targets.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Number of classes T; inferred as max id + 1 when omitted.
        #[arg(long)]
        num_classes: Option<usize>,
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Produce embeddings from a trained checkpoint.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use the EMA weights instead of the live weights.
        #[arg(long)]
        ema: bool,
    },
    /// Whiten features with statistics fitted on the database only.
    Whiten {
        #[arg(long)]
        db: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        /// Skip the L2 normalization applied after whitening.
        #[arg(long)]
        no_l2: bool,
    },
    /// Concatenate member embeddings along the feature dimension.
    Ensemble {
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact top-N search, optionally followed by k-reciprocal re-ranking.
    Search {
        #[arg(long)]
        q: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long, default_value = "cosine")]
        metric: String,
        #[arg(long, default_value_t = 100)]
        top_n: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rerank: bool,
        #[arg(long, default_value_t = 8)]
        k1: usize,
        #[arg(long, default_value_t = 5)]
        k2: usize,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
    },
    /// Compute MAR@k for a ranked file against ground truth.
    Eval {
        #[arg(long)]
        ranked: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        /// Recall denominator: min (of |relevant| and k) or full.
        #[arg(long, default_value = "min")]
        denominator: String,
    },
    /// Run the ablation ladder and emit a CSV.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Audit analytic gradients against finite differences.
    LossCheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Run the full retrieval pipeline from a config file.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        /// Print the resolved configuration before running.
        #[arg(long)]
        print_config: bool,
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
}

fn load_config(path: Option<&PathBuf>, overrides: &[String]) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::from_file(p)?,
        None => Config::new(),
    };
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingInput(path.to_path_buf()))
    }
}

fn count_mode(s: &str) -> Result<CountMode> {
    match s {
        "occurrences" => Ok(CountMode::Occurrences),
        "titles" => Ok(CountMode::Titles),
        other => Err(Error::InvalidConfig(format!(
            "unknown count mode {other:?} (expected occurrences or titles)"
        ))),
    }
}

fn truncate_lists(lists: Vec<RankedList>, k: usize) -> Vec<RankedList> {
    lists
        .into_iter()
        .map(|mut l| {
            l.entries.truncate(k);
            l
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MineAttrs {
            corpus,
            min_count,
            out,
            no_lowercase,
            count_mode: mode,
        } => {
            require_file(&corpus)?;
            let mode = count_mode(&mode)?;
            let records = read_corpus(&corpus)?;
            let titles: Vec<&str> = records.iter().map(|(_, t)| t.as_str()).collect();
            let vocab = build_vocab_with(&titles, min_count, mode, !no_lowercase)?;
            vocab.save(&out)?;
            eprintln!(
                "mine-attrs: {} titles -> {} pseudo-attributes (count > {min_count})",
                titles.len(),
                vocab.len()
            );
        }
        Command::BuildTargets {
            corpus,
            vocab,
            out,
            no_lowercase,
        } => {
            require_file(&corpus)?;
            require_file(&vocab)?;
            let records = read_corpus(&corpus)?;
            let vocab = AttributeVocab::load(&vocab)?;
            let (items, dropped) = encode_corpus(&records, &vocab, !no_lowercase);
            write_targets(&items, &out)?;
            eprintln!(
                "build-targets: kept {} items, dropped {dropped} with no vocabulary token",
                items.len()
            );
        }
        Command::Histogram { vocab, top, out } => {
            require_file(&vocab)?;
            if top < 1 {
                return Err(Error::InvalidConfig("--top must be >= 1".into()));
            }
            let vocab = AttributeVocab::load(&vocab)?;
            write_histogram_csv(&vocab, top, &out)?;
        }
        Command::GenSynth {
            config,
            out,
            overrides,
        } => {
            let mut cfg = load_config(config.as_ref(), &overrides)?;
            if let Some(seed) = cli.seed {
                cfg.set("seed", &seed.to_string());
            }
            let synth_cfg = synth_config_from(&cfg)?;
            let ds = generate(&synth_cfg)?;
            export(&ds, &out)?;
            eprintln!(
                "gen-synth: {} views ({} queries) written to {}",
                ds.views.len(),
                ds.gt.entries().len(),
                out.display()
            );
        }
        Command::Train {
            features,
            targets,
            config,
            out,
            num_classes,
            overrides,
        } => {
            require_file(&features)?;
            require_file(&targets)?;
            let mut cfg = load_config(config.as_ref(), &overrides)?;
            if let Some(seed) = cli.seed {
                cfg.set("seed", &seed.to_string());
            }
            let features = EmbeddingMatrix::load(&features)?;
            let items = read_targets(&targets)?;
            let from_cfg: usize = cfg.get_or("num_classes", 0)?;
            let classes = match num_classes.or((from_cfg > 0).then_some(from_cfg)) {
                Some(c) => c,
                None => {
                    let inferred = items
                        .iter()
                        .flat_map(|i| i.attr_ids.iter())
                        .max()
                        .map(|&m| m + 1)
                        .unwrap_or(0);
                    eprintln!("train: inferred num_classes = {inferred} from targets");
                    inferred
                }
            };
            let soft = build_soft_targets(items, classes)?;
            let mut enc = encoder_config_from(&cfg, "")?;
            if enc.input_dim == 0 {
                enc.input_dim = features.dim();
            }
            let tc = train_config_from(&cfg, "")?;
            let (model, report) = train(&features, &soft, &enc, &tc)?;
            model.save(&out)?;
            eprintln!(
                "train: {} samples ({} skipped), epoch loss {:.4} -> {:.4}",
                report.num_samples,
                report.skipped_rows,
                report.epoch_losses.first().unwrap_or(&f64::NAN),
                report.epoch_losses.last().unwrap_or(&f64::NAN)
            );
        }
        Command::Embed {
            model,
            features,
            out,
            ema,
        } => {
            require_file(&model)?;
            require_file(&features)?;
            let model = ModelWeights::load(&model)?;
            let features = EmbeddingMatrix::load(&features)?;
            model.embed(&features, ema)?.save(&out)?;
        }
        Command::Whiten {
            db,
            input,
            out,
            eps,
            no_l2,
        } => {
            require_file(&db)?;
            require_file(&input)?;
            let db = EmbeddingMatrix::load(&db)?;
            let input = EmbeddingMatrix::load(&input)?;
            let (mean, cov) = compute_mean_cov(&db)?;
            let transform = fit_whitening(&mean, &cov, eps)?;
            let mut whitened = apply_whitening(&input, &transform)?;
            if !no_l2 {
                whitened = l2_normalize(&whitened)?;
            }
            whitened.save(&out)?;
        }
        Command::Ensemble { inputs, out } => {
            for p in &inputs {
                require_file(p)?;
            }
            let members: Vec<EmbeddingMatrix> = inputs
                .iter()
                .map(|p| EmbeddingMatrix::load(p))
                .collect::<Result<_>>()?;
            ensemble_concat(&members)?.save(&out)?;
        }
        Command::Search {
            q,
            db,
            metric,
            top_n,
            k,
            out,
            rerank,
            k1,
            k2,
            alpha,
        } => {
            require_file(&q)?;
            require_file(&db)?;
            let metric: Metric = metric.parse()?;
            let params = SearchParams::new(metric, top_n, k)?;
            let queries = EmbeddingMatrix::load(&q)?;
            let db = EmbeddingMatrix::load(&db)?;
            let initial = top_n_search_with_threads(&queries, &db, &params, cli.threads)?;
            let lists = if rerank {
                let rp = RerankParams::new(k1, k2, alpha)?;
                k_reciprocal_rerank_with_threads(
                    &queries,
                    &db,
                    &initial,
                    &rp,
                    k,
                    metric,
                    cli.threads,
                )?
            } else {
                truncate_lists(initial, k)
            };
            write_ranked(&lists, &out)?;
            eprintln!("search: wrote top-{k} of {} queries", lists.len());
        }
        Command::Eval {
            ranked,
            gt,
            k,
            out,
            denominator,
        } => {
            require_file(&ranked)?;
            require_file(&gt)?;
            let denominator: RecallDenominator = denominator.parse()?;
            let lists = weakrank::search::read_ranked(&ranked)?;
            let gt = GroundTruth::load(&gt)?;
            let report = mar_at_k(&lists, &gt, k, denominator)?;
            report.save(&out)?;
            eprintln!(
                "eval: MAR@{k} = {:.4} over {} queries",
                report.mar, report.num_queries
            );
        }
        Command::Ablate {
            config,
            out,
            overrides,
        } => {
            let mut cfg = Config::from_file(&config)?;
            cfg.apply_overrides(&overrides)?;
            if let Some(seed) = cli.seed {
                cfg.set("trainer.seed", &seed.to_string());
            }
            if let Some(threads) = cli.threads {
                cfg.set("threads", &threads.to_string());
            }
            let p = pipeline_config_from(&cfg)?;
            let variants: Vec<String> = match cfg.get("ablate.variants") {
                Some(raw) => raw.split(',').map(|s| s.trim().to_string()).collect(),
                None => LADDER.iter().map(|s| s.to_string()).collect(),
            };
            let rows = ablation_run(&p, &variants)?;
            for (variant, mar) in &rows {
                eprintln!("ablate: {variant:<12} MAR@{} = {mar:.4}", p.eval_k);
            }
            write_ladder_csv(&rows, &out)?;
        }
        Command::LossCheck { instances } => {
            let outcome =
                weakrank::objective::finite_difference_check(instances, cli.seed.unwrap_or(0))?;
            eprintln!(
                "loss-check: {} instances, max relative error {:.3e} (< 1e-4)",
                outcome.instances, outcome.max_rel_error
            );
        }
        Command::Pipeline {
            config,
            print_config,
            overrides,
        } => {
            let mut cfg = Config::from_file(&config)?;
            cfg.apply_overrides(&overrides)?;
            if let Some(seed) = cli.seed {
                cfg.set("trainer.seed", &seed.to_string());
            }
            if let Some(threads) = cli.threads {
                cfg.set("threads", &threads.to_string());
            }
            if print_config {
                print!("{}", cfg.dump());
            }
            let p = pipeline_config_from(&cfg)?;
            let report = run_pipeline(&p, cli.resume)?;
            eprintln!(
                "pipeline: MAR@{} = {:.4} over {} queries (report in {})",
                report.k,
                report.mar,
                report.num_queries,
                p.workdir.join("report.json").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            return match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{err}");
                    ExitCode::SUCCESS
                }
                // Usage text goes to stderr; exit 1 marks a validation error.
                _ => {
                    eprint!("{err}");
                    ExitCode::from(1)
                }
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
