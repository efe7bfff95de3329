//! Per-model probability vectors over the label space.
//!
//! Interchange format: JSON lines. The first line is a header object
//! `{"model_id": "..."}`; each following line is
//! `{"text_id": "...", "probs": {"hate": 0.7, "not_hate": 0.3}}`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;
use serde_json::json;

use crate::corpus::{AnnotationCorpus, LabelId, LabelSpace};
use crate::error::{Error, Result};

/// Largest tolerated deviation of a probability vector's sum from 1.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub model_id: String,
    entries: BTreeMap<String, Vec<f64>>,
}

impl PredictionSet {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            entries: BTreeMap::new(),
        }
    }

    /// Validates `probs` against the simplex and stores it, re-normalized.
    pub fn insert(&mut self, text_id: impl Into<String>, probs: Vec<f64>) -> Result<()> {
        let text_id = text_id.into();
        let probs = validate_simplex(&text_id, probs)?;
        self.entries.insert(text_id, probs);
        Ok(())
    }

    pub fn get(&self, text_id: &str) -> Option<&[f64]> {
        self.entries.get(text_id).map(Vec::as_slice)
    }

    pub fn entries(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Errors with every corpus text that has no prediction.
    pub fn check_coverage(&self, corpus: &AnnotationCorpus) -> Result<()> {
        let missing: Vec<String> = corpus
            .texts()
            .iter()
            .filter(|t| !self.entries.contains_key(&t.text_id))
            .map(|t| t.text_id.clone())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingPredictions(missing))
        }
    }
}

/// Index of the most probable label; ties go to the first label.
pub fn argmax(probs: &[f64]) -> LabelId {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate().skip(1) {
        if *p > probs[best] {
            best = i;
        }
    }
    LabelId(best)
}

fn validate_simplex(text_id: &str, mut probs: Vec<f64>) -> Result<Vec<f64>> {
    let invalid = |reason: String| Error::InvalidProbabilities {
        text_id: text_id.to_string(),
        reason,
    };
    if probs.is_empty() {
        return Err(invalid("empty probability vector".into()));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(invalid(format!("component {p} outside [0, 1]")));
    }
    let sum: f64 = probs.iter().sum();
    let deviation = (sum - 1.0).abs();
    if deviation > SIMPLEX_TOLERANCE {
        return Err(invalid(format!(
            "components sum to {sum} (deviation {deviation:.3e} exceeds {SIMPLEX_TOLERANCE:e})"
        )));
    }
    // leave rounding-level drift alone so normalized vectors are a fixed point
    if deviation > 4.0 * f64::EPSILON * probs.len() as f64 {
        for p in &mut probs {
            *p /= sum;
        }
    }
    Ok(probs)
}

#[derive(Deserialize)]
struct Header {
    model_id: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Row {
    text_id: String,
    probs: BTreeMap<String, f64>,
}

/// Reads a prediction interchange file and checks it covers every text of
/// `corpus`.
pub fn load_predictions(path: &Path, corpus: &AnnotationCorpus) -> Result<PredictionSet> {
    let set = read_predictions(path, corpus.label_space())?;
    set.check_coverage(corpus)?;
    Ok(set)
}

/// Reads a prediction interchange file without a coverage check.
pub fn read_predictions(path: &Path, labels: &LabelSpace) -> Result<PredictionSet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let malformed = |line: u64, message: String| Error::Malformed {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut set: Option<PredictionSet> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let Some(set) = set.as_mut() else {
            let header: Header = serde_json::from_str(&line)
                .map_err(|e| malformed(line_no, format!("expected model_id header: {e}")))?;
            set = Some(PredictionSet::new(header.model_id));
            continue;
        };
        let row: Row = serde_json::from_str(&line).map_err(|e| malformed(line_no, e.to_string()))?;
        if let Some(unknown) = row.probs.keys().find(|k| labels.id(k).is_none()) {
            return Err(malformed(
                line_no,
                format!("unknown label column `{unknown}`"),
            ));
        }
        let mut probs = Vec::with_capacity(labels.len());
        for label in labels.labels() {
            let p = row
                .probs
                .get(label)
                .ok_or_else(|| malformed(line_no, format!("missing label column `{label}`")))?;
            probs.push(*p);
        }
        if set.entries.contains_key(&row.text_id) {
            return Err(malformed(
                line_no,
                format!("duplicate text_id `{}`", row.text_id),
            ));
        }
        set.insert(row.text_id, probs).map_err(|e| malformed(line_no, e.to_string()))?;
    }
    set.ok_or_else(|| malformed(1, "missing model_id header".into()))
}

pub fn write_predictions(path: &Path, set: &PredictionSet, labels: &LabelSpace) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", json!({ "model_id": set.model_id })).map_err(io)?;
    for (text_id, probs) in &set.entries {
        let probs: serde_json::Map<String, serde_json::Value> = labels
            .labels()
            .iter()
            .zip(probs)
            .map(|(l, p)| (l.clone(), json!(p)))
            .collect();
        writeln!(w, "{}", json!({ "text_id": text_id, "probs": probs })).map_err(io)?;
    }
    w.flush().map_err(io)
}
