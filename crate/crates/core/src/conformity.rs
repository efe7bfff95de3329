//! Brier-score conformity and per-annotation conformity deltas.
//!
//! A delta compares how well the model conforms to one annotator's label
//! against how well it conforms to a reference majority label. Agreement
//! with the reference yields exactly zero.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotationCorpus, Group, LabelId};
use crate::error::{Error, Result};
use crate::predictions::PredictionSet;

/// Mean squared difference between the one-hot target and `probs`.
pub fn brier(probs: &[f64], target: LabelId) -> Result<f64> {
    if target.0 >= probs.len() {
        return Err(Error::UnknownLabel(format!("#{}", target.0)));
    }
    let sum: f64 = probs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let o = if i == target.0 { 1.0 } else { 0.0 };
            (o - p) * (o - p)
        })
        .sum();
    Ok(sum / probs.len() as f64)
}

/// `brier(probs, annotator_label) - brier(probs, reference_label)`.
///
/// Expanding both Brier scores, the squared terms cancel and the difference
/// is `2 / |labels| * (p[reference] - p[annotator])`. For two labels this is
/// `±(2 p0 - 1)`, which is evaluated with a single rounding so that the
/// result is exactly one of `0`, `2 p0 - 1`, `1 - 2 p0`.
pub fn conformity_delta(probs: &[f64], annotator_label: LabelId, reference_label: LabelId) -> Result<f64> {
    let n = probs.len();
    for l in [annotator_label, reference_label] {
        if l.0 >= n {
            return Err(Error::UnknownLabel(format!("#{}", l.0)));
        }
    }
    if annotator_label == reference_label {
        return Ok(0.0);
    }
    if n == 2 {
        let d = 2.0 * probs[0] - 1.0;
        return Ok(if reference_label.0 == 0 { d } else { -d });
    }
    Ok(2.0 / n as f64 * (probs[reference_label.0] - probs[annotator_label.0]))
}

/// Which majority label a group's deltas are measured against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoldSource {
    /// Everyone is measured against the majority of the full pool.
    #[default]
    GlobalMajority,
    /// Group members are measured against their own group's majority.
    GroupMajority,
}

impl FromStr for GoldSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "global" | "global_majority" => Ok(GoldSource::GlobalMajority),
            "group" | "group_majority" => Ok(GoldSource::GroupMajority),
            other => Err(format!("unknown gold source `{other}` (expected global or group)")),
        }
    }
}

impl fmt::Display for GoldSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GoldSource::GlobalMajority => "global_majority",
            GoldSource::GroupMajority => "group_majority",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    All,
    Group(Group),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConformityRecord {
    pub annotator_id: String,
    pub text_id: String,
    pub group: Group,
    pub delta: f64,
    /// The annotator's label equals the reference label.
    pub agrees: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaSet {
    pub scope: Scope,
    pub records: Vec<ConformityRecord>,
}

impl DeltaSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Arithmetic mean of the deltas; `None` for an empty set.
    pub fn mean_delta(&self) -> Option<f64> {
        mean(self.records.iter().map(|r| r.delta))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// The full-pool delta set plus one set per demographic group.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaSets {
    pub gold_source: GoldSource,
    pub all: DeltaSet,
    /// Always holds all four demographic groups, possibly empty.
    pub groups: BTreeMap<Group, DeltaSet>,
}

impl DeltaSets {
    /// Pool mean restricted to annotators of the four demographic groups.
    pub fn pool_mean_without_excluded(&self) -> Option<f64> {
        mean(
            self.all
                .records
                .iter()
                .filter(|r| r.group != Group::Excluded)
                .map(|r| r.delta),
        )
    }

    /// Group-set records keyed by annotator, each list in text order.
    pub fn records_by_annotator(&self) -> BTreeMap<&str, Vec<&ConformityRecord>> {
        let mut out: BTreeMap<&str, Vec<&ConformityRecord>> = BTreeMap::new();
        for set in self.groups.values() {
            for r in &set.records {
                out.entry(r.annotator_id.as_str()).or_default().push(r);
            }
        }
        out
    }
}

/// Computes one record per annotation whose reference gold exists.
///
/// The pool set is always measured against the global majority. Group sets
/// use the global or group majority depending on `gold_source`. Records are
/// ordered by `(text_id, annotator_id)`.
pub fn build_delta_sets(
    corpus: &AnnotationCorpus,
    preds: &PredictionSet,
    gold_source: GoldSource,
) -> Result<DeltaSets> {
    let texts: Vec<_> = corpus.texts_with_annotations().collect();
    let per_text: Vec<(Vec<ConformityRecord>, Vec<ConformityRecord>)> = texts
        .par_iter()
        .map(|(text, anns)| {
            let probs = preds
                .get(&text.text_id)
                .ok_or_else(|| Error::MissingPredictions(vec![text.text_id.clone()]))?;
            let global = corpus.gold_of(&text.text_id);
            let mut pool = Vec::new();
            let mut grouped = Vec::new();
            for ann in anns.iter() {
                let group = corpus
                    .group_of(&ann.annotator_id)
                    .expect("annotations reference retained annotators");
                let record = |reference: LabelId| -> Result<ConformityRecord> {
                    Ok(ConformityRecord {
                        annotator_id: ann.annotator_id.clone(),
                        text_id: ann.text_id.clone(),
                        group,
                        delta: conformity_delta(probs, ann.label, reference)?,
                        agrees: ann.label == reference,
                    })
                };
                if let Some(g) = global {
                    pool.push(record(g)?);
                }
                if group == Group::Excluded {
                    continue;
                }
                let reference = match gold_source {
                    GoldSource::GlobalMajority => global,
                    GoldSource::GroupMajority => corpus.group_gold_of(group, &text.text_id),
                };
                if let Some(r) = reference {
                    grouped.push(record(r)?);
                }
            }
            Ok((pool, grouped))
        })
        .collect::<Result<_>>()?;

    let mut all = Vec::new();
    let mut groups: BTreeMap<Group, DeltaSet> = Group::DEMOGRAPHIC
        .iter()
        .map(|g| {
            (
                *g,
                DeltaSet {
                    scope: Scope::Group(*g),
                    records: Vec::new(),
                },
            )
        })
        .collect();
    for (pool, grouped) in per_text {
        all.extend(pool);
        for r in grouped {
            groups
                .get_mut(&r.group)
                .expect("non-excluded group")
                .records
                .push(r);
        }
    }
    Ok(DeltaSets {
        gold_source,
        all: DeltaSet {
            scope: Scope::All,
            records: all,
        },
        groups,
    })
}

/// Writes `model_id,text_id,annotator_id,group,delta,agrees` for the pool set.
pub fn write_records_csv(path: &Path, model_id: &str, sets: &DeltaSets) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let err = |e: csv::Error| Error::io(path, e.into());
    w.write_record(["model_id", "text_id", "annotator_id", "group", "delta", "agrees"])
        .map_err(err)?;
    for r in &sets.all.records {
        w.write_record([
            model_id,
            &r.text_id,
            &r.annotator_id,
            r.group.as_str(),
            &r.delta.to_string(),
            if r.agrees { "true" } else { "false" },
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Annotation, Annotator, Ethnicity, Gender, IngestionConfig, RawCorpus};
    use proptest::prelude::*;

    const HATE: LabelId = LabelId(0);
    const NOT: LabelId = LabelId(1);

    #[test]
    fn brier_examples() {
        assert_eq!(brier(&[1.0, 0.0], HATE).unwrap(), 0.0);
        assert_eq!(brier(&[0.5, 0.5], HATE).unwrap(), 0.25);
        assert_eq!(brier(&[0.5, 0.5], NOT).unwrap(), 0.25);
        // ((0.3)^2 + (0.3)^2) / 2
        assert!((brier(&[0.7, 0.3], HATE).unwrap() - 0.09).abs() < 1e-15);
        assert!(brier(&[0.7, 0.3], LabelId(2)).is_err());
    }

    #[test]
    fn delta_examples() {
        assert_eq!(conformity_delta(&[0.3, 0.7], HATE, HATE).unwrap(), 0.0);
        // oracle: two brier() calls, 0.49 - 0.09
        let p = [0.7, 0.3];
        let oracle = brier(&p, NOT).unwrap() - brier(&p, HATE).unwrap();
        assert!((oracle - 0.40).abs() < 1e-15);
        let d = conformity_delta(&p, NOT, HATE).unwrap();
        assert!((d - oracle).abs() < 1e-15);
        assert_eq!(conformity_delta(&p, HATE, NOT).unwrap(), -d);
    }

    #[test]
    fn delta_general_label_space_matches_brier_difference() {
        let p = [0.5, 0.3, 0.2];
        for a in 0..3 {
            for b in 0..3 {
                let oracle = brier(&p, LabelId(a)).unwrap() - brier(&p, LabelId(b)).unwrap();
                let d = conformity_delta(&p, LabelId(a), LabelId(b)).unwrap();
                assert!((d - oracle).abs() < 1e-15, "{a} {b}");
            }
        }
    }

    fn two_annotator_corpus() -> AnnotationCorpus {
        // a1 (wm) says hate, a2 (nwf) says not_hate. The 1-1 tie resolves to
        // hate because hate is declared the tie-break class here.
        let raw = RawCorpus {
            annotators: vec![
                Annotator::new("a1", Gender::Male, Ethnicity::White),
                Annotator::new("a2", Gender::Female, Ethnicity::NonWhite),
            ],
            annotations: vec![
                Annotation { text_id: "t".into(), annotator_id: "a1".into(), label: HATE },
                Annotation { text_id: "t".into(), annotator_id: "a2".into(), label: NOT },
            ],
            ..Default::default()
        };
        let cfg = IngestionConfig {
            min_annotations: 0,
            label_space: crate::corpus::LabelSpace::new(vec!["hate", "not_hate"], Some("hate")).unwrap(),
            ..Default::default()
        };
        AnnotationCorpus::build(raw, &cfg).unwrap()
    }

    #[test]
    fn worked_two_annotation_example() {
        let corpus = two_annotator_corpus();
        assert_eq!(corpus.gold_of("t"), Some(HATE));
        let mut preds = PredictionSet::new("m");
        preds.insert("t", vec![0.9, 0.1]).unwrap();

        let sets = build_delta_sets(&corpus, &preds, GoldSource::GlobalMajority).unwrap();
        let deltas: Vec<f64> = sets.all.records.iter().map(|r| r.delta).collect();
        assert_eq!(deltas[0], 0.0);
        assert!((deltas[1] - 0.8).abs() < 1e-15);
        assert!((sets.all.mean_delta().unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(sets.groups[&Group::Wm].records.len(), 1);
        assert_eq!(sets.groups[&Group::Wm].records[0].delta, 0.0);
        assert!((sets.groups[&Group::Nwf].records[0].delta - 0.8).abs() < 1e-15);
        assert!(sets.groups[&Group::Wf].is_empty());

        let sets = build_delta_sets(&corpus, &preds, GoldSource::GroupMajority).unwrap();
        assert_eq!(sets.groups[&Group::Nwf].records[0].delta, 0.0);
        assert!(sets.groups[&Group::Nwf].records[0].agrees);
        assert!((sets.all.mean_delta().unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn missing_prediction_is_an_error() {
        let corpus = two_annotator_corpus();
        let preds = PredictionSet::new("m");
        assert!(matches!(
            build_delta_sets(&corpus, &preds, GoldSource::GlobalMajority),
            Err(Error::MissingPredictions(_))
        ));
    }

    fn label() -> impl Strategy<Value = LabelId> {
        (0usize..2).prop_map(LabelId)
    }

    proptest! {
        #[test]
        fn delta_binary_closed_form(p in 0.0f64..=1.0, a in label(), r in label()) {
            let probs = [p, 1.0 - p];
            let d = conformity_delta(&probs, a, r).unwrap();
            prop_assert!(d == 0.0 || d == 2.0 * p - 1.0 || d == 1.0 - 2.0 * p);
            prop_assert!((-1.0..=1.0).contains(&d));
            let via_brier = brier(&probs, a).unwrap() - brier(&probs, r).unwrap();
            prop_assert!((d - via_brier).abs() < 1e-12);
            prop_assert_eq!(d, -conformity_delta(&probs, r, a).unwrap());
        }

        #[test]
        fn zero_iff_agreement(p in 0.0f64..=1.0, a in label(), r in label()) {
            let probs = [p, 1.0 - p];
            let d = conformity_delta(&probs, a, r).unwrap();
            if p != 0.5 {
                prop_assert_eq!(d == 0.0, a == r);
            } else {
                prop_assert_eq!(d, 0.0);
            }
        }
    }
}
