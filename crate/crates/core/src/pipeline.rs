//! End-to-end evaluation of one corpus against a set of models.
//!
//! Output layout under `<out>/<corpus_id>/`:
//!
//! ```text
//! corpus_stats.json  kappa.csv  table1.csv  table2.csv
//! rankings.json  ttest.json  clusters_<model>.json  failures.json
//! <model>/report.json  <model>/fingerprints.csv  <model>/assignments.csv
//! <model>/records.csv            (only with `dump_records`)
//! ```
//!
//! Every file is written to a temporary sibling and renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::clustering::{kmeans, profile_clusters, ClusteringResult};
use crate::conformity::{build_delta_sets, write_records_csv, DeltaSets};
use crate::corpus::{corpus_stats, AnnotationCorpus, Group};
use crate::divergence::{demographic_divergence, uncertainty_divergence};
use crate::error::{Error, Result};
use crate::fingerprint::FingerprintMatrix;
use crate::performance::{f1_report, f1_uncertainty_ttest, kappa_matrix};
use crate::predictions::{load_predictions, PredictionSet};
use crate::report::{
    rank, table1_csv, table2_csv, ClusteringSummary, FingerprintSummary, ModelReport, RankMetric,
    Reported, RunConfig,
};

/// A report together with the intermediate artifacts it was built from.
#[derive(Clone, Debug)]
pub struct ModelEvaluation {
    pub report: ModelReport,
    pub delta_sets: DeltaSets,
    pub fingerprints: FingerprintMatrix,
    pub clustering: Option<ClusteringResult>,
}

pub fn evaluate_model(
    corpus: &AnnotationCorpus,
    corpus_id: &str,
    preds: &PredictionSet,
    config: &RunConfig,
) -> Result<ModelEvaluation> {
    preds.check_coverage(corpus)?;
    let model_id = preds.model_id.as_str();
    let sets = build_delta_sets(corpus, preds, config.gold_source)?;
    let divergence_report = uncertainty_divergence(model_id, &sets, config.epsilon)?;
    let fingerprints = FingerprintMatrix::build(model_id, &sets, config.bin_count)?;

    let (clustering, clustering_summary, cluster_profiles, jsd) =
        match kmeans(&fingerprints, &config.kmeans()) {
            Ok(result) => {
                let profiles = profile_clusters(&result, corpus, &sets);
                let jsd = demographic_divergence(&profiles, config.epsilon).into();
                let summary = ClusteringSummary {
                    k: result.k(),
                    inertia: result.inertia,
                    iterations_run: result.iterations_run,
                    sizes: profiles.iter().map(|p| p.size).collect(),
                };
                (Some(result), Reported::Value(summary), profiles, jsd)
            }
            Err(Error::InsufficientData(reason)) => (
                None,
                Reported::absent(&reason),
                Vec::new(),
                Reported::absent(&reason),
            ),
            Err(e) => return Err(e),
        };

    let f1 = f1_report(corpus, preds, config.f1_variant, config.f1_reference)?;

    let n_rows = fingerprints.len();
    let mut mean_fingerprint = vec![0.0; fingerprints.bin_count];
    for row in fingerprints.rows.values() {
        for (m, b) in mean_fingerprint.iter_mut().zip(&row.bins) {
            *m += b / n_rows as f64;
        }
    }
    let fingerprint_summary = FingerprintSummary {
        bin_count: fingerprints.bin_count,
        annotators: n_rows,
        mean_records_per_annotator: if n_rows == 0 {
            0.0
        } else {
            fingerprints.rows.values().map(|r| r.n_texts).sum::<usize>() as f64 / n_rows as f64
        },
        mean_fingerprint,
    };

    Ok(ModelEvaluation {
        report: ModelReport {
            model_id: model_id.to_string(),
            corpus_id: corpus_id.to_string(),
            f1_report: f1,
            divergence_report,
            demographic_divergence: jsd,
            clustering: clustering_summary,
            cluster_profiles,
            fingerprint_summary,
            run_metadata: config.metadata(),
        },
        delta_sets: sets,
        fingerprints,
        clustering,
    })
}

/// File-system safe rendering of a model id.
pub fn sanitize_id(id: &str) -> String {
    let s: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect();
    if s.is_empty() || s.chars().all(|c| c == '.') {
        "_".into()
    } else {
        s
    }
}

pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = dir.join(tmp_name);
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

/// Runs `write` against a temporary path, then renames it into place.
fn write_atomic_with(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = dir.join(tmp_name);
    write(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Default)]
pub struct OutputOptions {
    pub dump_records: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelFailure {
    pub source: String,
    pub error: String,
    pub validation: bool,
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub output_dir: PathBuf,
    pub reports: Vec<ModelReport>,
    pub failures: Vec<ModelFailure>,
}

fn cluster_plot_data(report: &ModelReport) -> serde_json::Value {
    let clusters: Vec<_> = report
        .cluster_profiles
        .iter()
        .map(|p| {
            let bar: BTreeMap<String, f64> = Group::DEMOGRAPHIC
                .iter()
                .zip(p.demo_dist)
                .map(|(g, v)| (g.to_string(), v))
                .collect();
            let line: BTreeMap<String, Option<f64>> = p
                .group_mean_delta
                .iter()
                .map(|(g, v)| (g.to_string(), v.value().copied()))
                .collect();
            json!({
                "cluster_id": p.cluster_id,
                "size": p.size,
                "bar_demographic_share": bar,
                "line_group_mean_delta": line,
                "mean_delta": p.mean_delta,
                "normalized_mean_delta": p.normalized_mean_delta,
            })
        })
        .collect();
    json!({
        "model_id": report.model_id,
        "corpus_id": report.corpus_id,
        "demographic_divergence": report.demographic_divergence,
        "clusters": clusters,
    })
}

fn write_model_outputs(
    root: &Path,
    corpus: &AnnotationCorpus,
    eval: &ModelEvaluation,
    options: &OutputOptions,
) -> Result<()> {
    let report = &eval.report;
    let dir = root.join(sanitize_id(&report.model_id));
    write_json(&dir.join("report.json"), report)?;
    write_atomic_with(&dir.join("fingerprints.csv"), |p| eval.fingerprints.write_csv(p))?;
    if let Some(c) = &eval.clustering {
        write_atomic_with(&dir.join("assignments.csv"), |p| c.write_assignments_csv(p, corpus))?;
    }
    if options.dump_records {
        write_atomic_with(&dir.join("records.csv"), |p| {
            write_records_csv(p, &report.model_id, &eval.delta_sets)
        })?;
    }
    write_json(
        &root.join(format!("clusters_{}.json", sanitize_id(&report.model_id))),
        &cluster_plot_data(report),
    )
}

/// Evaluates every prediction file against `corpus` and writes all outputs.
///
/// A model that fails to load or evaluate is recorded in `failures` and the
/// remaining models still run.
pub fn run_pipeline(
    corpus: &AnnotationCorpus,
    corpus_id: &str,
    prediction_paths: &[PathBuf],
    config: &RunConfig,
    out_dir: &Path,
    options: &OutputOptions,
) -> Result<PipelineOutcome> {
    if prediction_paths.is_empty() {
        return Err(Error::InvalidConfig("no prediction files given".into()));
    }
    let root = out_dir.join(sanitize_id(corpus_id));

    let mut paths = prediction_paths.to_vec();
    paths.sort();
    let results: Vec<(PathBuf, Result<ModelEvaluation>)> = paths
        .par_iter()
        .map(|p| {
            let eval = load_predictions(p, corpus)
                .and_then(|preds| evaluate_model(corpus, corpus_id, &preds, config));
            (p.clone(), eval)
        })
        .collect();

    let mut evaluations: BTreeMap<String, ModelEvaluation> = BTreeMap::new();
    let mut failures = Vec::new();
    for (path, result) in results {
        match result {
            Ok(eval) => {
                let id = eval.report.model_id.clone();
                if evaluations.contains_key(&id) || evaluations.keys().any(|k| sanitize_id(k) == sanitize_id(&id)) {
                    failures.push(ModelFailure {
                        source: path.display().to_string(),
                        error: format!("duplicate model_id `{id}`"),
                        validation: true,
                    });
                } else {
                    evaluations.insert(id, eval);
                }
            }
            Err(e) => failures.push(ModelFailure {
                source: path.display().to_string(),
                error: e.to_string(),
                validation: e.is_validation(),
            }),
        }
    }

    write_json(&root.join("corpus_stats.json"), &corpus_stats(corpus))?;
    write_atomic(&root.join("kappa.csv"), kappa_matrix(corpus).to_csv().as_bytes())?;

    for eval in evaluations.values() {
        write_model_outputs(&root, corpus, eval, options)?;
    }
    let reports: Vec<ModelReport> = evaluations.into_values().map(|e| e.report).collect();

    write_atomic(&root.join("table1.csv"), table1_csv(&reports).as_bytes())?;
    write_atomic(&root.join("table2.csv"), table2_csv(&reports).as_bytes())?;
    write_cross_model(&root, &reports)?;

    let failures_path = root.join("failures.json");
    if failures.is_empty() {
        if failures_path.exists() {
            fs::remove_file(&failures_path).map_err(|e| Error::io(&failures_path, e))?;
        }
    } else {
        write_json(&failures_path, &failures)?;
    }

    Ok(PipelineOutcome {
        output_dir: root,
        reports,
        failures,
    })
}

/// `rankings.json` and `ttest.json` for a set of reports.
pub fn write_cross_model(root: &Path, reports: &[ModelReport]) -> Result<()> {
    let rankings: BTreeMap<String, Reported<_>> = RankMetric::all()
        .into_iter()
        .map(|m| (m.name(), rank(reports, m).into()))
        .collect();
    write_json(&root.join("rankings.json"), &rankings)?;

    let f1s: Vec<f64> = reports.iter().map(|r| r.f1_report.total_f1).collect();
    let deltas: Vec<f64> = reports
        .iter()
        .map(|r| r.divergence_report.total_mean_delta)
        .collect();
    let ttest: Reported<_> = f1_uncertainty_ttest(&f1s, &deltas).into();
    write_json(
        &root.join("ttest.json"),
        &json!({
            "test": "welch_two_sample",
            "samples": ["total_f1", "total_mean_delta"],
            "models": reports.iter().map(|r| r.model_id.as_str()).collect::<Vec<_>>(),
            "result": ttest,
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sanitize() {
        assert_eq!(sanitize_id("org/model v1"), "org_model_v1");
        assert_eq!(sanitize_id(".."), "_");
        assert_eq!(sanitize_id("Mistral-7B"), "Mistral-7B");
    }
}
