use std::fs;
use std::path::{Path, PathBuf};

use conformity_fairness::corpus::{
    corpus_stats, load_corpus, write_corpus, Group, IngestionConfig, LabelId,
};
use conformity_fairness::predictions::{load_predictions, read_predictions, write_predictions};
use conformity_fairness::Error;
use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn write(dir: &TempDir, name: &str, contents: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, contents).unwrap();
    p
}

fn lenient() -> IngestionConfig {
    IngestionConfig {
        min_annotations: 1,
        ..Default::default()
    }
}

const ANNOTATORS: &str = "annotator_id,gender,ethnicity\na1,male,White\na2,female,Caucasian\na3,female,Black\n";

#[test]
fn fixture_corpus_loads() {
    let c = load_corpus(
        &fixture("annotations.csv"),
        &fixture("annotators.csv"),
        &IngestionConfig::default(),
    )
    .unwrap();
    let stats = corpus_stats(&c);
    assert_eq!(stats.messages, 40);
    assert_eq!(stats.annotators, 13);
    assert_eq!(stats.annotations, 520);
    assert_eq!(stats.mean_annotations_per_message, 13.0);
    for g in Group::DEMOGRAPHIC {
        assert_eq!(stats.group_annotators[&g], 3);
    }
    let preds = load_predictions(&fixture("fair-model.jsonl"), &c).unwrap();
    assert_eq!(preds.model_id, "fair-model");
    assert_eq!(preds.len(), 40);
}

#[test]
fn loading_written_corpus_is_idempotent() {
    let dir = TempDir::new().unwrap();
    let config = IngestionConfig::default();
    let c = load_corpus(&fixture("annotations.csv"), &fixture("annotators.csv"), &config).unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write_corpus(&c, &a, &b).unwrap();
    let again = load_corpus(&a, &b, &config).unwrap();
    assert_eq!(c, again);
    let (a2, b2) = (dir.path().join("a2.csv"), dir.path().join("b2.csv"));
    write_corpus(&again, &a2, &b2).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&a2).unwrap());
    assert_eq!(fs::read(&b).unwrap(), fs::read(&b2).unwrap());
}

#[test]
fn gold_is_invariant_under_row_order() {
    let dir = TempDir::new().unwrap();
    let text = fs::read_to_string(fixture("annotations.csv")).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let header = lines.remove(0);
    lines.reverse();
    // interleave to break any grouping by text
    let (even, odd): (Vec<_>, Vec<_>) = lines.iter().enumerate().partition(|(i, _)| i % 2 == 0);
    let shuffled: Vec<&str> = odd.into_iter().chain(even).map(|(_, l)| *l).collect();
    let p = write(&dir, "shuffled.csv", &format!("{header}\n{}\n", shuffled.join("\n")));

    let config = IngestionConfig::default();
    let original = load_corpus(&fixture("annotations.csv"), &fixture("annotators.csv"), &config).unwrap();
    let permuted = load_corpus(&p, &fixture("annotators.csv"), &config).unwrap();
    assert_eq!(original.gold(), permuted.gold());
    assert_eq!(original.group_gold(), permuted.group_gold());
    assert_eq!(original, permuted);
}

#[test]
fn ethnicity_and_groups_from_csv() {
    let dir = TempDir::new().unwrap();
    let ann = write(
        &dir,
        "ann.csv",
        "text_id,annotator_id,label\nt1,a1,hate\nt1,a2,hate\nt1,a3,not_hate\n",
    );
    let who = write(&dir, "who.csv", ANNOTATORS);
    let c = load_corpus(&ann, &who, &lenient()).unwrap();
    assert_eq!(c.group_of("a1"), Some(Group::Wm));
    assert_eq!(c.group_of("a2"), Some(Group::Wf));
    assert_eq!(c.group_of("a3"), Some(Group::Nwf));
    assert_eq!(c.gold_of("t1"), Some(LabelId(0)));
}

#[test]
fn optional_original_gold_column() {
    let dir = TempDir::new().unwrap();
    let ann = write(
        &dir,
        "ann.csv",
        "text_id,annotator_id,label,gold\nt1,a1,hate,not_hate\nt1,a2,hate,not_hate\nt1,a3,not_hate,not_hate\n",
    );
    let who = write(&dir, "who.csv", ANNOTATORS);
    let c = load_corpus(&ann, &who, &lenient()).unwrap();
    assert_eq!(c.original_gold()["t1"], LabelId(1));
    let stats = corpus_stats(&c);
    assert!((stats.divergent_fraction - 1.0 / 3.0).abs() < 1e-12);
    assert!((stats.divergent_fraction_original_gold.unwrap() - 2.0 / 3.0).abs() < 1e-12);
}

fn load_err(annotations: &str, annotators: &str) -> Error {
    let dir = TempDir::new().unwrap();
    let ann = write(&dir, "ann.csv", annotations);
    let who = write(&dir, "who.csv", annotators);
    load_corpus(&ann, &who, &lenient()).unwrap_err()
}

#[test]
fn load_errors_carry_line_numbers() {
    match load_err("text_id,annotator_id,label\nt1,a1,hate\nt1,zz,hate\n", ANNOTATORS) {
        Error::UnknownAnnotator { line, annotator_id, .. } => {
            assert_eq!(line, 3);
            assert_eq!(annotator_id, "zz");
        }
        e => panic!("unexpected {e}"),
    }
    match load_err("text_id,annotator_id,label\nt1,a1,hate\nt2,a1,hate\nt1,a1,not_hate\n", ANNOTATORS) {
        Error::DuplicateAnnotation { line, .. } => assert_eq!(line, 4),
        e => panic!("unexpected {e}"),
    }
    match load_err("text_id,annotator_id,label\nt1,a1,spam\n", ANNOTATORS) {
        Error::Malformed { line, message, .. } => {
            assert_eq!(line, 2);
            assert!(message.contains("spam"), "{message}");
        }
        e => panic!("unexpected {e}"),
    }
    match load_err("text_id,annotator_id,label\nt1,a1,hate\n", "annotator_id,gender,ethnicity\na1,robot,White\n") {
        Error::Malformed { line, .. } => assert_eq!(line, 2),
        e => panic!("unexpected {e}"),
    }
    match load_err("text_id,annotator_id,label\nt1,a1\n", ANNOTATORS) {
        Error::Malformed { line, .. } => assert_eq!(line, 2),
        e => panic!("unexpected {e}"),
    }
    let e = load_err("text,annotator,label\nt1,a1,hate\n", ANNOTATORS);
    assert!(matches!(e, Error::Malformed { line: 1, .. }), "{e}");
    assert!(e.is_validation());
}

#[test]
fn prediction_errors() {
    let dir = TempDir::new().unwrap();
    let ann = write(&dir, "ann.csv", "text_id,annotator_id,label\nt1,a1,hate\nt2,a1,not_hate\n");
    let who = write(&dir, "who.csv", ANNOTATORS);
    let c = load_corpus(&ann, &who, &lenient()).unwrap();

    let missing = write(
        &dir,
        "p1.jsonl",
        "{\"model_id\":\"m\"}\n{\"text_id\":\"t1\",\"probs\":{\"hate\":0.7,\"not_hate\":0.3}}\n",
    );
    match load_predictions(&missing, &c).unwrap_err() {
        Error::MissingPredictions(ids) => assert_eq!(ids, vec!["t2".to_string()]),
        e => panic!("unexpected {e}"),
    }

    let unknown = write(
        &dir,
        "p2.jsonl",
        "{\"model_id\":\"m\"}\n{\"text_id\":\"t1\",\"probs\":{\"hate\":0.7,\"spam\":0.3}}\n",
    );
    let e = load_predictions(&unknown, &c).unwrap_err();
    assert!(e.to_string().contains("spam"), "{e}");

    let bad_sum = write(
        &dir,
        "p3.jsonl",
        "{\"model_id\":\"m\"}\n{\"text_id\":\"t1\",\"probs\":{\"hate\":0.7,\"not_hate\":0.4}}\n",
    );
    let e = load_predictions(&bad_sum, &c).unwrap_err();
    assert!(e.is_validation());

    let no_header = write(&dir, "p4.jsonl", "{\"text_id\":\"t1\",\"probs\":{\"hate\":0.7,\"not_hate\":0.3}}\n");
    assert!(load_predictions(&no_header, &c).is_err());
}

#[test]
fn prediction_files_round_trip() {
    let dir = TempDir::new().unwrap();
    let c = load_corpus(
        &fixture("annotations.csv"),
        &fixture("annotators.csv"),
        &IngestionConfig::default(),
    )
    .unwrap();
    let preds = load_predictions(&fixture("biased-model.jsonl"), &c).unwrap();
    let out = dir.path().join("copy.jsonl");
    write_predictions(&out, &preds, c.label_space()).unwrap();
    assert_eq!(read_predictions(&out, c.label_space()).unwrap(), preds);
}
