use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use conformity_fairness::clustering::{kmeans, profile_clusters};
use conformity_fairness::conformity::{build_delta_sets, GoldSource};
use conformity_fairness::corpus::{
    corpus_stats, load_corpus, write_corpus, AnnotationCorpus, EthnicityMap, IngestionConfig,
    LabelSpace, TiePolicy,
};
use conformity_fairness::divergence::demographic_divergence;
use conformity_fairness::fingerprint::{bin_sweep, FingerprintMatrix};
use conformity_fairness::oracle::{check_instance, random_instance};
use conformity_fairness::performance::{F1Reference, F1Variant};
use conformity_fairness::pipeline::{
    run_pipeline, sanitize_id, write_atomic, write_json, OutputOptions,
};
use conformity_fairness::predictions::{load_predictions, write_predictions};
use conformity_fairness::report::{rank, ModelReport, RankMetric, RunConfig};
use conformity_fairness::synth::{generate, SynthSpec};
use conformity_fairness::Error;

#[derive(Parser)]
#[command(name = "cfair", version, about = "Conformity-based fairness evaluation of text classifiers")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalOpts {
    /// Seed for k-means restarts and synthetic generation.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Additive smoothing for every divergence.
    #[arg(long, global = true, default_value_t = 1e-9)]
    epsilon: f64,
    /// Fingerprint bin count.
    #[arg(long, global = true, default_value_t = 40)]
    bins: usize,
    /// Reference label for group delta sets: global or group.
    #[arg(long, global = true, default_value = "global")]
    gold_source: GoldSource,
    #[arg(long, global = true, default_value_t = 20)]
    min_annotations: usize,
    /// macro or binary-positive.
    #[arg(long = "f1", global = true, default_value = "macro")]
    f1_variant: F1Variant,
    /// disaggregated or gold.
    #[arg(long, global = true, default_value = "disaggregated")]
    f1_reference: F1Reference,
    /// tie_negative or tie_drop.
    #[arg(long, global = true, default_value = "tie_negative")]
    tie_policy: TiePolicy,
    /// Whether annotators outside the four groups join the pool and gold vote.
    #[arg(long, global = true, default_value_t = true, action = clap::ArgAction::Set)]
    include_excluded_in_pool: bool,
    /// CSV `value,class` overriding the raw-ethnicity classification.
    #[arg(long, global = true)]
    ethnicity_map: Option<PathBuf>,
    /// Comma-separated label space.
    #[arg(long, global = true, default_value = "hate,not_hate")]
    labels: String,
    /// Label preferred by the tie-negative rule; `none` disables it.
    #[arg(long, global = true, default_value = "not_hate")]
    negative_label: String,
    #[arg(long, global = true, default_value_t = 4)]
    k: usize,
    #[arg(long, global = true, default_value_t = 10)]
    n_init: usize,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    annotators: PathBuf,
    /// Defaults to the annotations file stem.
    #[arg(long)]
    corpus_id: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate a corpus, write its statistics.
    Ingest {
        #[command(flatten)]
        corpus: CorpusArgs,
    },
    /// Full pipeline over one or more prediction files.
    Evaluate {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, num_args = 1..)]
        predictions: Vec<PathBuf>,
        /// Every `*.jsonl` file in this directory is a model.
        #[arg(long)]
        models_dir: Option<PathBuf>,
        /// Also write every conformity record.
        #[arg(long)]
        dump_records: bool,
    },
    /// K-means inertia across fingerprint bin counts for one model.
    SweepBins {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "10,20,30,40,50,60,80")]
        bin_counts: Vec<usize>,
    },
    /// Fingerprints, clusters and cluster profiles for one model.
    Cluster {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Rank the reports found under a corpus output directory.
    Rank {
        /// Directory holding `<model>/report.json` files.
        #[arg(long)]
        reports: PathBuf,
        #[arg(long, default_value = "demographic_divergence")]
        metric: String,
    },
    /// Write a synthetic corpus and one prediction file per spec.
    Synth {
        /// JSON synthetic spec; repeat for several models over one corpus.
        #[arg(long)]
        spec: Vec<PathBuf>,
        #[arg(long)]
        n_texts: Option<usize>,
    },
    /// Compare the engine with the brute-force oracle.
    OracleCheck {
        #[arg(long, default_value_t = 200)]
        instances: u64,
        #[arg(long, default_value_t = 1e-9)]
        tolerance: f64,
    },
}

impl GlobalOpts {
    fn run_config(&self) -> RunConfig {
        RunConfig {
            seed: self.seed,
            epsilon: self.epsilon,
            bin_count: self.bins,
            gold_source: self.gold_source,
            f1_variant: self.f1_variant,
            f1_reference: self.f1_reference,
            k: self.k,
            n_init: self.n_init,
            min_annotations: self.min_annotations,
            tie_policy: self.tie_policy,
            include_excluded_in_pool: self.include_excluded_in_pool,
            ..Default::default()
        }
    }

    fn ingestion(&self) -> anyhow::Result<IngestionConfig> {
        let labels: Vec<&str> = self.labels.split(',').map(str::trim).collect();
        let negative = (self.negative_label != "none").then_some(self.negative_label.as_str());
        let ethnicity_map = match &self.ethnicity_map {
            Some(p) => EthnicityMap::from_csv(p)?,
            None => EthnicityMap::default(),
        };
        Ok(IngestionConfig {
            label_space: LabelSpace::new(labels, negative)?,
            min_annotations: self.min_annotations,
            tie_policy: self.tie_policy,
            include_excluded_in_pool: self.include_excluded_in_pool,
            ethnicity_map,
        })
    }
}

impl CorpusArgs {
    fn id(&self) -> String {
        self.corpus_id.clone().unwrap_or_else(|| {
            self.annotations
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "corpus".into())
        })
    }

    fn load(&self, global: &GlobalOpts) -> anyhow::Result<AnnotationCorpus> {
        Ok(load_corpus(&self.annotations, &self.annotators, &global.ingestion()?)?)
    }
}

fn prediction_files(explicit: &[PathBuf], dir: Option<&Path>) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = explicit.to_vec();
    if let Some(dir) = dir {
        for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "jsonl") {
                out.push(path);
            }
        }
    }
    if out.is_empty() {
        bail!(Error::InvalidConfig("give --predictions or --models-dir".into()));
    }
    out.sort();
    out.dedup();
    Ok(out)
}

/// Exit status for a finished run.
enum Outcome {
    Ok,
    Partial,
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    let g = &cli.global;
    match &cli.command {
        Command::Ingest { corpus } => {
            let c = corpus.load(g)?;
            let stats = corpus_stats(&c);
            let path = g.out.join(sanitize_id(&corpus.id())).join("corpus_stats.json");
            write_json(&path, &stats)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::Evaluate {
            corpus,
            predictions,
            models_dir,
            dump_records,
        } => {
            let c = corpus.load(g)?;
            let files = prediction_files(predictions, models_dir.as_deref())?;
            let outcome = run_pipeline(
                &c,
                &corpus.id(),
                &files,
                &g.run_config(),
                &g.out,
                &OutputOptions {
                    dump_records: *dump_records,
                },
            )?;
            for r in &outcome.reports {
                println!(
                    "{}: total_f1 {:.4}, mean delta {:+.4e}, demographic divergence {}",
                    r.model_id,
                    r.f1_report.total_f1,
                    r.divergence_report.total_mean_delta,
                    r.demographic_divergence
                        .value()
                        .map(|v| format!("{v:.4e}"))
                        .unwrap_or_else(|| "absent".into())
                );
            }
            for f in &outcome.failures {
                eprintln!("failed: {}: {}", f.source, f.error);
            }
            println!("outputs in {}", outcome.output_dir.display());
            if outcome.reports.is_empty() {
                let validation = outcome.failures.iter().all(|f| f.validation);
                let msg = "every model failed";
                return if validation {
                    Err(Error::InvalidConfig(msg.into()).into())
                } else {
                    bail!(msg)
                };
            }
            if !outcome.failures.is_empty() {
                return Ok(Outcome::Partial);
            }
        }
        Command::SweepBins {
            corpus,
            predictions,
            bin_counts,
        } => {
            let c = corpus.load(g)?;
            let preds = load_predictions(predictions, &c)?;
            let cfg = g.run_config();
            let sets = build_delta_sets(&c, &preds, cfg.gold_source)?;
            let rows = bin_sweep(&preds.model_id, &sets, bin_counts, &cfg.kmeans())?;
            let path = g
                .out
                .join(sanitize_id(&corpus.id()))
                .join(format!("sweep_{}.json", sanitize_id(&preds.model_id)));
            write_json(&path, &json!({ "model_id": preds.model_id, "seed": cfg.seed, "rows": rows }))?;
            println!("bin_count,inertia");
            for r in &rows {
                println!("{},{}", r.bin_count, r.inertia);
            }
        }
        Command::Cluster { corpus, predictions } => {
            let c = corpus.load(g)?;
            let preds = load_predictions(predictions, &c)?;
            let cfg = g.run_config();
            let sets = build_delta_sets(&c, &preds, cfg.gold_source)?;
            let matrix = FingerprintMatrix::build(&preds.model_id, &sets, cfg.bin_count)?;
            let result = kmeans(&matrix, &cfg.kmeans())?;
            let profiles = profile_clusters(&result, &c, &sets);
            let jsd = demographic_divergence(&profiles, cfg.epsilon)?;
            let dir = g
                .out
                .join(sanitize_id(&corpus.id()))
                .join(sanitize_id(&preds.model_id));
            fs::create_dir_all(&dir)?;
            matrix.write_csv(&dir.join("fingerprints.csv"))?;
            result.write_assignments_csv(&dir.join("assignments.csv"), &c)?;
            write_json(
                &dir.join("clusters.json"),
                &json!({
                    "model_id": preds.model_id,
                    "inertia": result.inertia,
                    "iterations_run": result.iterations_run,
                    "demographic_divergence": jsd,
                    "profiles": profiles,
                }),
            )?;
            println!("demographic divergence {jsd:.6e}, inertia {:.6}", result.inertia);
        }
        Command::Rank { reports, metric } => {
            let metric: RankMetric = metric.parse()?;
            let mut loaded: Vec<ModelReport> = Vec::new();
            let mut dirs: Vec<PathBuf> = fs::read_dir(reports)
                .with_context(|| format!("reading {}", reports.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join("report.json").is_file())
                .collect();
            dirs.sort();
            for d in dirs {
                let path = d.join("report.json");
                let text = fs::read_to_string(&path)?;
                loaded.push(
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
                );
            }
            let table = rank(&loaded, metric)?;
            println!("{}", serde_json::to_string_pretty(&table)?);
        }
        Command::Synth { spec, n_texts } => {
            let mut specs: Vec<SynthSpec> = Vec::new();
            for p in spec {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                specs.push(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?);
            }
            if specs.is_empty() {
                specs.push(SynthSpec {
                    seed: g.seed,
                    ..Default::default()
                });
            }
            if let Some(n) = n_texts {
                for s in &mut specs {
                    s.n_texts = *n;
                }
            }
            fs::create_dir_all(&g.out)?;
            let mut corpus: Option<AnnotationCorpus> = None;
            let mut ids = BTreeMap::new();
            for s in &specs {
                let (c, preds) = generate(s)?;
                match &corpus {
                    None => {
                        write_corpus(&c, &g.out.join("annotations.csv"), &g.out.join("annotators.csv"))?;
                        corpus = Some(c);
                    }
                    Some(first) if *first != c => bail!(Error::InvalidConfig(format!(
                        "spec for `{}` draws a different corpus; only model fields may differ",
                        s.model_id
                    ))),
                    Some(_) => {}
                }
                if ids.insert(s.model_id.clone(), ()).is_some() {
                    bail!(Error::InvalidConfig(format!("duplicate model_id `{}`", s.model_id)));
                }
                let path = g.out.join(format!("{}.jsonl", sanitize_id(&s.model_id)));
                write_predictions(&path, &preds, corpus.as_ref().expect("set above").label_space())?;
                println!("wrote {}", path.display());
            }
            println!("wrote corpus to {}", g.out.display());
        }
        Command::OracleCheck { instances, tolerance } => {
            let mut failed = 0;
            for seed in 0..*instances {
                let seed = g.seed.wrapping_add(seed);
                let (c, preds, cfg) = random_instance(seed)?;
                let diffs = check_instance(&c, &preds, &cfg, *tolerance)?;
                if !diffs.is_empty() {
                    failed += 1;
                    eprintln!("instance {seed}: {} mismatches, first: {}", diffs.len(), diffs[0]);
                }
            }
            let summary = json!({ "instances": instances, "failed": failed, "tolerance": tolerance });
            write_atomic(
                &g.out.join("oracle_check.json"),
                format!("{}\n", serde_json::to_string_pretty(&summary)?).as_bytes(),
            )?;
            println!("{} of {instances} instances match the oracle", instances - failed);
            if failed > 0 {
                bail!("{failed} instances disagree with the oracle");
            }
        }
    }
    Ok(Outcome::Ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(err) if err.is_validation() => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
