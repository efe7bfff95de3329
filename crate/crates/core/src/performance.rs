//! Disaggregated F1, F1-vs-uncertainty significance test, and Cohen's kappa
//! between demographic groups.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::{AnnotationCorpus, Group, LabelId};
use crate::error::{Error, Result};
use crate::predictions::{argmax, PredictionSet};
use crate::report::Reported;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Variant {
    /// Unweighted mean of per-class F1 over classes that occur in the truth
    /// or in the predictions.
    #[default]
    Macro,
    /// F1 of the positive (harmful) class only.
    BinaryPositive,
}

impl FromStr for F1Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "macro" => Ok(F1Variant::Macro),
            "binary-positive" | "binary_positive" => Ok(F1Variant::BinaryPositive),
            other => Err(format!("unknown F1 variant `{other}` (expected macro or binary-positive)")),
        }
    }
}

impl fmt::Display for F1Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            F1Variant::Macro => "macro",
            F1Variant::BinaryPositive => "binary_positive",
        })
    }
}

/// What each prediction is scored against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Reference {
    /// Every individual annotation is an evaluation instance.
    #[default]
    Disaggregated,
    /// Every annotation is scored against its text's gold label instead.
    Gold,
}

impl FromStr for F1Reference {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "disaggregated" => Ok(F1Reference::Disaggregated),
            "gold" => Ok(F1Reference::Gold),
            other => Err(format!("unknown F1 reference `{other}`")),
        }
    }
}

impl fmt::Display for F1Reference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            F1Reference::Disaggregated => "disaggregated",
            F1Reference::Gold => "gold",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum F1Scope {
    All,
    Group(Group),
}

/// F1 from paired `(truth, predicted)` labels.
pub fn f1_from_pairs(pairs: &[(LabelId, LabelId)], n_labels: usize, variant: F1Variant, positive: LabelId) -> f64 {
    let mut tp = vec![0usize; n_labels];
    let mut fp = vec![0usize; n_labels];
    let mut fn_ = vec![0usize; n_labels];
    for &(truth, pred) in pairs {
        if truth == pred {
            tp[truth.0] += 1;
        } else {
            fp[pred.0] += 1;
            fn_[truth.0] += 1;
        }
    }
    let class_f1 = |c: usize| -> Option<f64> {
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        (denom > 0).then(|| 2.0 * tp[c] as f64 / denom as f64)
    };
    match variant {
        F1Variant::Macro => {
            let scores: Vec<f64> = (0..n_labels).filter_map(class_f1).collect();
            if scores.is_empty() {
                0.0
            } else {
                scores.iter().sum::<f64>() / scores.len() as f64
            }
        }
        // Neither truth nor prediction ever positive: nothing was missed.
        F1Variant::BinaryPositive => class_f1(positive.0).unwrap_or(1.0),
    }
}

pub fn disaggregated_f1(
    corpus: &AnnotationCorpus,
    preds: &PredictionSet,
    scope: F1Scope,
    variant: F1Variant,
    reference: F1Reference,
) -> Result<f64> {
    let mut pairs = Vec::new();
    for (text, anns) in corpus.texts_with_annotations() {
        let probs = preds
            .get(&text.text_id)
            .ok_or_else(|| Error::MissingPredictions(vec![text.text_id.clone()]))?;
        let predicted = argmax(probs);
        for ann in anns {
            if let F1Scope::Group(g) = scope {
                if corpus.group_of(&ann.annotator_id) != Some(g) {
                    continue;
                }
            }
            let truth = match reference {
                F1Reference::Disaggregated => Some(ann.label),
                F1Reference::Gold => corpus.gold_of(&text.text_id),
            };
            if let Some(truth) = truth {
                pairs.push((truth, predicted));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no annotations in F1 scope {scope:?}"
        )));
    }
    let space = corpus.label_space();
    Ok(f1_from_pairs(&pairs, space.len(), variant, space.positive()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub model_id: String,
    pub variant: F1Variant,
    pub reference: F1Reference,
    pub total_f1: f64,
    pub group_f1: BTreeMap<Group, Reported<f64>>,
    /// `group F1 - total F1`.
    pub per_group: BTreeMap<Group, Reported<f64>>,
}

pub fn f1_report(
    corpus: &AnnotationCorpus,
    preds: &PredictionSet,
    variant: F1Variant,
    reference: F1Reference,
) -> Result<F1Report> {
    let total_f1 = disaggregated_f1(corpus, preds, F1Scope::All, variant, reference)?;
    let mut group_f1 = BTreeMap::new();
    let mut per_group = BTreeMap::new();
    for g in Group::DEMOGRAPHIC {
        match disaggregated_f1(corpus, preds, F1Scope::Group(g), variant, reference) {
            Ok(f) => {
                group_f1.insert(g, Reported::Value(f));
                per_group.insert(g, Reported::Value(f - total_f1));
            }
            Err(Error::InsufficientData(reason)) => {
                group_f1.insert(g, Reported::absent(&reason));
                per_group.insert(g, Reported::absent(&reason));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(F1Report {
        model_id: preds.model_id.clone(),
        variant,
        reference,
        total_f1,
        group_f1,
        per_group,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub p: f64,
    pub df: f64,
    pub n: usize,
    /// `None` when either sample is constant.
    pub pearson_r: Option<f64>,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Welch two-sample t-test between per-model F1 scores and per-model mean
/// deltas, with Pearson's r of the paired values.
pub fn f1_uncertainty_ttest(f1s: &[f64], mean_deltas: &[f64]) -> Result<TTestResult> {
    if f1s.len() != mean_deltas.len() {
        return Err(Error::InvalidConfig(format!(
            "t-test samples differ in length ({} vs {})",
            f1s.len(),
            mean_deltas.len()
        )));
    }
    let n = f1s.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!(
            "t-test needs at least 3 models, got {n}"
        )));
    }
    let (m1, v1) = mean_var(f1s);
    let (m2, v2) = mean_var(mean_deltas);
    if v1 == 0.0 && v2 == 0.0 {
        return Err(Error::InsufficientData(
            "both samples have zero variance".into(),
        ));
    }
    let nf = n as f64;
    let se2 = v1 / nf + v2 / nf;
    let t = (m1 - m2) / se2.sqrt();
    let df = se2 * se2 / ((v1 / nf).powi(2) / (nf - 1.0) + (v2 / nf).powi(2) / (nf - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::InvalidConfig(format!("Student t with df {df}: {e}")))?;
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);

    let pearson_r = (v1 > 0.0 && v2 > 0.0).then(|| {
        let cov = f1s
            .iter()
            .zip(mean_deltas)
            .map(|(a, b)| (a - m1) * (b - m2))
            .sum::<f64>()
            / (nf - 1.0);
        cov / (v1.sqrt() * v2.sqrt())
    });
    Ok(TTestResult {
        t,
        p,
        df,
        n,
        pearson_r,
    })
}

/// Cohen's kappa from paired labels. A perfectly agreeing constant pair has
/// kappa 1.
pub fn cohen_kappa(pairs: &[(LabelId, LabelId)], n_labels: usize) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let mut confusion = vec![0usize; n_labels * n_labels];
    for (a, b) in pairs {
        confusion[a.0 * n_labels + b.0] += 1;
    }
    Some(kappa_from_confusion(&confusion, n_labels))
}

fn kappa_from_confusion(confusion: &[usize], n_labels: usize) -> f64 {
    let total: usize = confusion.iter().sum();
    let n = total as f64;
    let observed = (0..n_labels).map(|i| confusion[i * n_labels + i]).sum::<usize>() as f64 / n;
    let expected: f64 = (0..n_labels)
        .map(|i| {
            let row: usize = (0..n_labels).map(|j| confusion[i * n_labels + j]).sum();
            let col: usize = (0..n_labels).map(|j| confusion[j * n_labels + i]).sum();
            (row as f64 / n) * (col as f64 / n)
        })
        .sum();
    if expected >= 1.0 {
        // both raters constant: agreement is total iff they chose the same label
        return if observed >= 1.0 { 1.0 } else { 0.0 };
    }
    (observed - expected) / (1.0 - expected)
}

/// Minimum shared texts for an annotator pair to enter a diagonal cell.
pub const MIN_SHARED_TEXTS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaCell {
    pub kappa: f64,
    /// Paired texts (off-diagonal) or contributing annotator pairs (diagonal).
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaMatrix {
    pub groups: [Group; 4],
    pub cells: Vec<Vec<Reported<KappaCell>>>,
}

impl KappaMatrix {
    pub fn get(&self, a: Group, b: Group) -> Option<f64> {
        let (i, j) = (a.index()?, b.index()?);
        self.cells[i][j].value().map(|c| c.kappa)
    }

    /// Heatmap rows: `group,wm,wf,nwm,nwf` with empty cells for absent values.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,wm,wf,nwm,nwf\n");
        for (i, g) in self.groups.iter().enumerate() {
            out.push_str(g.as_str());
            for cell in &self.cells[i] {
                out.push(',');
                if let Some(c) = cell.value() {
                    out.push_str(&c.kappa.to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}

fn strict_majority(counts: &[usize]) -> Option<LabelId> {
    let max = *counts.iter().max()?;
    let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == max);
    let (i, _) = winners.next()?;
    if max == 0 || winners.next().is_some() {
        None
    } else {
        Some(LabelId(i))
    }
}

/// Agreement between the four demographic groups.
///
/// Off-diagonal cells pair each group's within-text majority label over texts
/// both groups annotated; tied majorities skip the text. Diagonal cells
/// average pairwise kappa over annotator pairs of the group sharing at least
/// [`MIN_SHARED_TEXTS`] texts.
pub fn kappa_matrix(corpus: &AnnotationCorpus) -> KappaMatrix {
    let n_labels = corpus.label_space().len();
    let mut majorities: Vec<[Option<LabelId>; 4]> = Vec::new();
    // pair (a, b) with a < b in annotator order -> confusion counts
    let mut pair_confusion: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    let index: HashMap<&str, usize> = corpus
        .annotators()
        .iter()
        .enumerate()
        .map(|(i, a)| (a.annotator_id.as_str(), i))
        .collect();

    for (_, anns) in corpus.texts_with_annotations() {
        let mut counts = [(); 4].map(|_| vec![0usize; n_labels]);
        let mut members: [Vec<(usize, LabelId)>; 4] = Default::default();
        for ann in anns {
            let Some(gi) = corpus.group_of(&ann.annotator_id).and_then(Group::index) else {
                continue;
            };
            counts[gi][ann.label.0] += 1;
            members[gi].push((index[ann.annotator_id.as_str()], ann.label));
        }
        majorities.push(counts.map(|c| strict_majority(&c)));
        for group in &members {
            for (x, &(a, la)) in group.iter().enumerate() {
                for &(b, lb) in &group[x + 1..] {
                    let (key, (l1, l2)) = if a < b { ((a, b), (la, lb)) } else { ((b, a), (lb, la)) };
                    pair_confusion
                        .entry(key)
                        .or_insert_with(|| vec![0; n_labels * n_labels])[l1.0 * n_labels + l2.0] += 1;
                }
            }
        }
    }

    let mut diag_sums = [(0.0f64, 0usize); 4];
    let mut pairs: Vec<_> = pair_confusion.into_iter().collect();
    pairs.sort_by_key(|(k, _)| *k);
    for ((a, _), confusion) in pairs {
        if confusion.iter().sum::<usize>() < MIN_SHARED_TEXTS {
            continue;
        }
        let gi = corpus.annotators()[a].group().index().expect("demographic group");
        diag_sums[gi].0 += kappa_from_confusion(&confusion, n_labels);
        diag_sums[gi].1 += 1;
    }

    let cells = (0..4)
        .map(|i| {
            (0..4)
                .map(|j| {
                    if i == j {
                        let (s, n) = diag_sums[i];
                        return if n > 0 {
                            Reported::Value(KappaCell { kappa: s / n as f64, support: n })
                        } else {
                            Reported::absent("no annotator pair shares enough texts")
                        };
                    }
                    let paired: Vec<(LabelId, LabelId)> = majorities
                        .iter()
                        .filter_map(|m| Some((m[i]?, m[j]?)))
                        .collect();
                    match cohen_kappa(&paired, n_labels) {
                        Some(k) => Reported::Value(KappaCell { kappa: k, support: paired.len() }),
                        None => Reported::absent("no co-annotated texts with a clear majority"),
                    }
                })
                .collect()
        })
        .collect();
    KappaMatrix {
        groups: Group::DEMOGRAPHIC,
        cells,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const H: LabelId = LabelId(0);
    const N: LabelId = LabelId(1);

    #[test]
    fn perfect_predictions_score_one() {
        let pairs = vec![(H, H), (N, N), (H, H)];
        assert_eq!(f1_from_pairs(&pairs, 2, F1Variant::Macro, H), 1.0);
        assert_eq!(f1_from_pairs(&[(H, H)], 2, F1Variant::Macro, H), 1.0);
        assert_eq!(f1_from_pairs(&[(N, N)], 2, F1Variant::BinaryPositive, H), 1.0);
    }

    #[test]
    fn constant_negative_prediction() {
        // confusion-matrix hand computation: hate F1 = 0, not_hate P = .25 R = 1
        let pairs = vec![(H, N), (H, N), (H, N), (N, N)];
        let oracle: f64 = (0.0 + 2.0 * 0.25 * 1.0 / (0.25 + 1.0)) / 2.0;
        assert!((oracle - 0.2).abs() < 1e-15);
        assert!((f1_from_pairs(&pairs, 2, F1Variant::Macro, H) - oracle).abs() < 1e-15);
        assert_eq!(f1_from_pairs(&pairs, 2, F1Variant::BinaryPositive, H), 0.0);
    }

    #[test]
    fn ttest_identical_lists() {
        let xs = [0.1, 0.4, 0.3, 0.9];
        let r = f1_uncertainty_ttest(&xs, &xs).unwrap();
        assert_eq!(r.t, 0.0);
        assert_eq!(r.p, 1.0);
        assert!((r.pearson_r.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ttest_shifted_lists() {
        let a = [1.0, 2.0, 3.0];
        let b = [11.0, 12.0, 13.0];
        let r = f1_uncertainty_ttest(&a, &b).unwrap();
        // closed-form Welch: t = -10 / sqrt(1/3 + 1/3), df = 4
        assert!((r.t - (-10.0 / (2.0f64 / 3.0).sqrt())).abs() < 1e-12);
        assert!((r.df - 4.0).abs() < 1e-12);
        assert!(r.p < 0.01);
        // Student t with 4 df: F(t) = 1/2 + 3/4 u (1 - u^2 / 3), u = t / sqrt(4 + t^2)
        let u = r.t / (4.0 + r.t * r.t).sqrt();
        let p = 2.0 * (0.5 + 0.75 * u * (1.0 - u * u / 3.0));
        assert!((r.p - p).abs() < 1e-12, "{} vs {p}", r.p);
    }

    #[test]
    fn ttest_errors() {
        assert!(f1_uncertainty_ttest(&[1.0, 1.0, 1.0], &[2.0, 2.0, 2.0]).is_err());
        assert!(f1_uncertainty_ttest(&[1.0, 2.0], &[2.0, 3.0]).is_err());
        assert!(f1_uncertainty_ttest(&[1.0, 2.0, 3.0], &[2.0, 3.0]).is_err());
    }

    #[test]
    fn kappa_basics() {
        let agree = vec![(H, H), (N, N), (H, H), (N, N)];
        assert_eq!(cohen_kappa(&agree, 2), Some(1.0));
        let flipped = vec![(H, N), (N, H), (H, N), (N, H)];
        assert!(cohen_kappa(&flipped, 2).unwrap() < 0.0);
        assert_eq!(cohen_kappa(&[(H, H), (H, H)], 2), Some(1.0));
        assert_eq!(cohen_kappa(&[], 2), None);
    }
}
