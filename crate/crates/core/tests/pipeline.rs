use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use conformity_fairness::corpus::{load_corpus, Group, IngestionConfig};
use conformity_fairness::pipeline::{run_pipeline, OutputOptions};
use conformity_fairness::predictions::write_predictions;
use conformity_fairness::report::{rank, ModelReport, RankMetric, RunConfig};
use conformity_fairness::synth::{generate, SynthSpec};
use conformity_fairness::Error;
use serde_json::Value;
use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn fixture_corpus() -> conformity_fairness::corpus::AnnotationCorpus {
    load_corpus(
        &fixture("annotations.csv"),
        &fixture("annotators.csv"),
        &IngestionConfig::default(),
    )
    .unwrap()
}

fn fixture_models() -> Vec<PathBuf> {
    vec![fixture("fair-model.jsonl"), fixture("biased-model.jsonl")]
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

#[test]
fn fixture_pipeline_writes_every_output() {
    let dir = TempDir::new().unwrap();
    let corpus = fixture_corpus();
    let outcome = run_pipeline(
        &corpus,
        "fixture",
        &fixture_models(),
        &RunConfig::default(),
        dir.path(),
        &OutputOptions { dump_records: true },
    )
    .unwrap();
    assert!(outcome.failures.is_empty());
    assert_eq!(outcome.reports.len(), 2);
    let root = dir.path().join("fixture");
    assert_eq!(outcome.output_dir, root);

    for model in ["fair-model", "biased-model"] {
        let report: ModelReport =
            serde_json::from_str(&fs::read_to_string(root.join(model).join("report.json")).unwrap()).unwrap();
        assert_eq!(report.model_id, model);
        assert_eq!(report.corpus_id, "fixture");
        assert_eq!(report.fingerprint_summary.annotators, 12);
        assert_eq!(report.fingerprint_summary.bin_count, 40);
        assert_eq!(report.divergence_report.per_group.len(), 4);
        assert!(report.demographic_divergence.value().is_some());
        for f in ["fingerprints.csv", "assignments.csv", "records.csv"] {
            assert!(root.join(model).join(f).is_file(), "{model}/{f}");
        }
        let plot = read_json(&root.join(format!("clusters_{model}.json")));
        let clusters = plot["clusters"].as_array().unwrap();
        assert_eq!(clusters.len(), 4);
        let total: u64 = clusters.iter().map(|c| c["size"].as_u64().unwrap()).sum();
        assert_eq!(total, 12);
    }

    // 40 texts x 13 annotators, one record per annotation
    let records = fs::read_to_string(root.join("fair-model/records.csv")).unwrap();
    assert_eq!(records.lines().count(), 1 + 520);

    let stats = read_json(&root.join("corpus_stats.json"));
    assert_eq!(stats["messages"], 40);
    assert_eq!(fs::read_to_string(root.join("kappa.csv")).unwrap().lines().count(), 5);
    assert_eq!(fs::read_to_string(root.join("table1.csv")).unwrap().lines().count(), 3);
    assert_eq!(fs::read_to_string(root.join("table2.csv")).unwrap().lines().count(), 3);

    let rankings = read_json(&root.join("rankings.json"));
    for m in RankMetric::all() {
        let rows = rankings[m.name()]["rows"].as_array().unwrap();
        assert_eq!(rows.len(), 2, "{}", m.name());
    }
    // two models are too few for the t-test
    let ttest = read_json(&root.join("ttest.json"));
    assert!(ttest["result"]["absent"].as_str().unwrap().contains("3 models"));
    assert!(!root.join("failures.json").exists());
}

#[test]
fn rerun_is_byte_identical() {
    let corpus = fixture_corpus();
    let mut snaps = Vec::new();
    for _ in 0..2 {
        let dir = TempDir::new().unwrap();
        run_pipeline(
            &corpus,
            "fixture",
            &fixture_models(),
            &RunConfig::default(),
            dir.path(),
            &OutputOptions { dump_records: true },
        )
        .unwrap();
        snaps.push(snapshot(dir.path()));
    }
    assert!(snaps[0].len() > 10);
    assert_eq!(snaps[0], snaps[1]);
}

#[test]
fn failing_model_is_isolated() {
    let dir = TempDir::new().unwrap();
    let corpus = fixture_corpus();
    let bad = dir.path().join("bad.jsonl");
    fs::write(
        &bad,
        "{\"model_id\":\"bad\"}\n{\"text_id\":\"t0000\",\"probs\":{\"hate\":0.9,\"not_hate\":0.9}}\n",
    )
    .unwrap();
    let mut paths = fixture_models();
    paths.push(bad);
    let out = dir.path().join("out");
    let outcome = run_pipeline(
        &corpus,
        "fixture",
        &paths,
        &RunConfig::default(),
        &out,
        &OutputOptions::default(),
    )
    .unwrap();
    assert_eq!(outcome.reports.len(), 2);
    assert_eq!(outcome.failures.len(), 1);
    assert!(outcome.failures[0].validation);
    assert!(outcome.failures[0].source.ends_with("bad.jsonl"));
    let failures = read_json(&out.join("fixture/failures.json"));
    assert_eq!(failures.as_array().unwrap().len(), 1);
    assert!(out.join("fixture/fair-model/report.json").is_file());
    assert!(!out.join("fixture/bad").exists());
}

#[test]
fn duplicate_model_ids_are_rejected() {
    let dir = TempDir::new().unwrap();
    let corpus = fixture_corpus();
    let copy = dir.path().join("again.jsonl");
    fs::copy(fixture("fair-model.jsonl"), &copy).unwrap();
    let mut paths = fixture_models();
    paths.push(copy);
    let outcome = run_pipeline(
        &corpus,
        "fixture",
        &paths,
        &RunConfig::default(),
        dir.path(),
        &OutputOptions::default(),
    )
    .unwrap();
    assert_eq!(outcome.reports.len(), 2);
    assert_eq!(outcome.failures.len(), 1);
    assert!(outcome.failures[0].error.contains("duplicate"));
}

#[test]
fn eleven_models_fill_both_tables() {
    let dir = TempDir::new().unwrap();
    let base = SynthSpec {
        n_texts: 60,
        group_flip_rate: Group::DEMOGRAPHIC.iter().map(|g| (*g, 0.15)).collect(),
        seed: 3,
        ..Default::default()
    };
    let mut paths = Vec::new();
    let mut corpus = None;
    for i in 0..11 {
        let spec = SynthSpec {
            model_id: format!("model-{i:02}"),
            model_noise: 0.02 * i as f64,
            model_group_miscalibration: [(Group::Nwm, 0.03 * i as f64)].into(),
            ..base.clone()
        };
        let (c, preds) = generate(&spec).unwrap();
        let p = dir.path().join(format!("model-{i:02}.jsonl"));
        write_predictions(&p, &preds, c.label_space()).unwrap();
        paths.push(p);
        corpus = Some(c);
    }
    let corpus = corpus.unwrap();
    let config = RunConfig {
        min_annotations: 1,
        ..Default::default()
    };
    let outcome = run_pipeline(&corpus, "synth", &paths, &config, &dir.path().join("out"), &OutputOptions::default()).unwrap();
    assert!(outcome.failures.is_empty());
    let root = dir.path().join("out/synth");
    for table in ["table1.csv", "table2.csv"] {
        let text = fs::read_to_string(root.join(table)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 12, "{table}");
        assert!(lines[0].ends_with(",wm,wf,nwm,nwf"));
        for line in &lines[1..] {
            assert_eq!(line.split(',').count(), 6, "{line}");
        }
    }
    let ttest = read_json(&root.join("ttest.json"));
    assert_eq!(ttest["result"]["n"], 11);
    let p = ttest["result"]["p"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
}

#[test]
fn fair_model_outranks_biased_model_on_divergence() {
    let dir = TempDir::new().unwrap();
    let flips: BTreeMap<Group, f64> = Group::DEMOGRAPHIC.iter().map(|g| (*g, 0.15)).collect();
    let base = SynthSpec {
        n_texts: 300,
        annotators_per_group: Group::DEMOGRAPHIC.iter().map(|g| (*g, 6)).collect(),
        annotations_per_text: 24,
        group_flip_rate: flips,
        model_noise: 0.05,
        seed: 5,
        ..Default::default()
    };
    let fair = SynthSpec {
        model_id: "fair".into(),
        ..base.clone()
    };
    let biased = SynthSpec {
        model_id: "biased".into(),
        model_group_miscalibration: [(Group::Nwf, 0.3)].into(),
        ..base
    };
    let mut paths = Vec::new();
    let mut corpus = None;
    for spec in [fair, biased] {
        let (c, preds) = generate(&spec).unwrap();
        let p = dir.path().join(format!("{}.jsonl", spec.model_id));
        write_predictions(&p, &preds, c.label_space()).unwrap();
        paths.push(p);
        corpus = Some(c);
    }
    let config = RunConfig {
        min_annotations: 1,
        ..Default::default()
    };
    let outcome =
        run_pipeline(&corpus.unwrap(), "synth", &paths, &config, dir.path(), &OutputOptions::default()).unwrap();
    for metric in [RankMetric::Kl(Group::Nwf), RankMetric::DemographicDivergence] {
        let table = rank(&outcome.reports, metric).unwrap();
        assert_eq!(table.rows[0].model_id, "fair", "{}: {table:?}", metric.name());
        assert!(table.rows[0].value < table.rows[1].value, "{table:?}");
    }
}

fn report_with_mean(model_id: &str, mean: f64) -> ModelReport {
    let corpus = fixture_corpus();
    let preds = conformity_fairness::predictions::load_predictions(&fixture("fair-model.jsonl"), &corpus).unwrap();
    let mut report = conformity_fairness::pipeline::evaluate_model(&corpus, "fixture", &preds, &RunConfig::default())
        .unwrap()
        .report;
    report.model_id = model_id.into();
    report.divergence_report.total_mean_delta = mean;
    report
}

#[test]
fn rank_orders_by_value_then_model_id() {
    let reports = vec![
        report_with_mean("B", 0.3),
        report_with_mean("A", 0.1),
        report_with_mean("D", 0.2),
        report_with_mean("C", 0.2),
    ];
    let table = rank(&reports, RankMetric::MeanUncertainty).unwrap();
    let order: Vec<&str> = table.rows.iter().map(|r| r.model_id.as_str()).collect();
    assert_eq!(order, ["A", "C", "D", "B"]);
    assert_eq!(table.rows.iter().map(|r| r.rank).collect::<Vec<_>>(), [1, 2, 3, 4]);
    assert_eq!(table.order, "ascending");

    let f1 = rank(&reports, RankMetric::TotalF1).unwrap();
    assert_eq!(f1.order, "descending");
    // identical F1 everywhere, so model id decides
    let order: Vec<&str> = f1.rows.iter().map(|r| r.model_id.as_str()).collect();
    assert_eq!(order, ["A", "B", "C", "D"]);
}

#[test]
fn unknown_metric_lists_valid_names() {
    let err = "accuracy".parse::<RankMetric>().unwrap_err();
    match &err {
        Error::UnknownMetric { name, valid } => {
            assert_eq!(name, "accuracy");
            assert_eq!(valid.len(), 7);
            for m in RankMetric::all() {
                assert!(valid.contains(&m.name()));
            }
        }
        e => panic!("unexpected {e}"),
    }
    assert!(err.is_validation());
}
