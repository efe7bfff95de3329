//! Per-model reports, cross-model rankings and the CSV tables built from
//! them.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clustering::KMeansConfig;
use crate::conformity::GoldSource;
use crate::corpus::{Group, TiePolicy};
use crate::divergence::{ClusterProfile, DivergenceReport, DEFAULT_EPSILON};
use crate::error::{Error, Result};
use crate::fingerprint::DEFAULT_BIN_COUNT;
use crate::performance::{F1Reference, F1Report, F1Variant};

/// A metric value, or the reason it could not be computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Reported<T> {
    Value(T),
    Absent { absent: String },
}

impl<T> Reported<T> {
    pub fn absent(reason: &str) -> Self {
        Reported::Absent {
            absent: reason.to_string(),
        }
    }

    pub fn value(&self) -> Option<&T> {
        match self {
            Reported::Value(v) => Some(v),
            Reported::Absent { .. } => None,
        }
    }

    pub fn is_absent(&self) -> bool {
        matches!(self, Reported::Absent { .. })
    }
}

impl<T> From<Result<T>> for Reported<T> {
    fn from(r: Result<T>) -> Self {
        match r {
            Ok(v) => Reported::Value(v),
            Err(e) => Reported::Absent {
                absent: e.to_string(),
            },
        }
    }
}

/// Every configurable choice that affects a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub epsilon: f64,
    pub bin_count: usize,
    pub gold_source: GoldSource,
    pub f1_variant: F1Variant,
    pub f1_reference: F1Reference,
    pub k: usize,
    pub n_init: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub min_annotations: usize,
    pub tie_policy: TiePolicy,
    pub include_excluded_in_pool: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let km = KMeansConfig::default();
        Self {
            seed: 0,
            epsilon: DEFAULT_EPSILON,
            bin_count: DEFAULT_BIN_COUNT,
            gold_source: GoldSource::GlobalMajority,
            f1_variant: F1Variant::Macro,
            f1_reference: F1Reference::Disaggregated,
            k: km.k,
            n_init: km.n_init,
            max_iter: km.max_iter,
            tol: km.tol,
            min_annotations: 20,
            tie_policy: TiePolicy::TieNegative,
            include_excluded_in_pool: true,
        }
    }
}

impl RunConfig {
    pub fn kmeans(&self) -> KMeansConfig {
        KMeansConfig {
            k: self.k,
            seed: self.seed,
            max_iter: self.max_iter,
            tol: self.tol,
            n_init: self.n_init,
        }
    }

    pub fn metadata(&self) -> RunMetadata {
        RunMetadata {
            config: self.clone(),
            log_base: "e".into(),
            engine_version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    #[serde(flatten)]
    pub config: RunConfig,
    pub log_base: String,
    pub engine_version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringSummary {
    pub k: usize,
    pub inertia: f64,
    pub iterations_run: usize,
    pub sizes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FingerprintSummary {
    pub bin_count: usize,
    pub annotators: usize,
    pub mean_records_per_annotator: f64,
    /// Column means of the fingerprint matrix.
    pub mean_fingerprint: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model_id: String,
    pub corpus_id: String,
    pub f1_report: F1Report,
    pub divergence_report: DivergenceReport,
    pub demographic_divergence: Reported<f64>,
    pub clustering: Reported<ClusteringSummary>,
    pub cluster_profiles: Vec<ClusterProfile>,
    pub fingerprint_summary: FingerprintSummary,
    pub run_metadata: RunMetadata,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMetric {
    MeanUncertainty,
    Kl(Group),
    DemographicDivergence,
    TotalF1,
}

impl RankMetric {
    pub fn all() -> Vec<RankMetric> {
        let mut out = vec![RankMetric::MeanUncertainty];
        out.extend(Group::DEMOGRAPHIC.iter().map(|g| RankMetric::Kl(*g)));
        out.push(RankMetric::DemographicDivergence);
        out.push(RankMetric::TotalF1);
        out
    }

    pub fn name(&self) -> String {
        match self {
            RankMetric::MeanUncertainty => "mean_uncertainty".into(),
            RankMetric::Kl(g) => format!("kl_{g}"),
            RankMetric::DemographicDivergence => "demographic_divergence".into(),
            RankMetric::TotalF1 => "total_f1".into(),
        }
    }

    /// Lower is better for everything except F1.
    pub fn ascending(&self) -> bool {
        !matches!(self, RankMetric::TotalF1)
    }

    pub fn value(&self, report: &ModelReport) -> Option<f64> {
        match self {
            RankMetric::MeanUncertainty => Some(report.divergence_report.total_mean_delta),
            RankMetric::Kl(g) => report
                .divergence_report
                .per_group
                .get(g)
                .and_then(|d| d.value())
                .map(|d| d.kl),
            RankMetric::DemographicDivergence => report.demographic_divergence.value().copied(),
            RankMetric::TotalF1 => Some(report.f1_report.total_f1),
        }
    }
}

impl FromStr for RankMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RankMetric::all()
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMetric {
                name: s.to_string(),
                valid: RankMetric::all().iter().map(RankMetric::name).collect(),
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingRow {
    pub rank: usize,
    pub model_id: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingTable {
    pub metric: String,
    pub order: String,
    pub rows: Vec<RankingRow>,
    /// Models for which the metric is absent, in model order.
    pub unranked: Vec<String>,
}

/// Orders reports by `metric`; equal values fall back to model id order.
pub fn rank(reports: &[ModelReport], metric: RankMetric) -> Result<RankingTable> {
    if reports.is_empty() {
        return Err(Error::InsufficientData("nothing to rank".into()));
    }
    let mut rows: Vec<(String, f64)> = Vec::new();
    let mut unranked = Vec::new();
    for r in reports {
        match metric.value(r) {
            Some(v) => rows.push((r.model_id.clone(), v)),
            None => unranked.push(r.model_id.clone()),
        }
    }
    rows.sort_by(|a, b| {
        let by_value = if metric.ascending() {
            a.1.total_cmp(&b.1)
        } else {
            b.1.total_cmp(&a.1)
        };
        by_value.then_with(|| a.0.cmp(&b.0))
    });
    unranked.sort();
    Ok(RankingTable {
        metric: metric.name(),
        order: if metric.ascending() { "ascending" } else { "descending" }.into(),
        rows: rows
            .into_iter()
            .enumerate()
            .map(|(i, (model_id, value))| RankingRow {
                rank: i + 1,
                model_id,
                value,
            })
            .collect(),
        unranked,
    })
}

fn sci(v: Option<f64>, signed: bool) -> String {
    match v {
        Some(v) if signed => format!("{v:+.3e}"),
        Some(v) => format!("{v:.3e}"),
        None => String::new(),
    }
}

/// Rows = models, columns = total F1 and the four per-group F1 deltas.
pub fn table1_csv(reports: &[ModelReport]) -> String {
    let mut out = String::from("model_id,total_f1,wm,wf,nwm,nwf\n");
    for r in reports {
        let _ = write!(out, "{},{:.4}", r.model_id, r.f1_report.total_f1);
        for g in Group::DEMOGRAPHIC {
            let d = r.f1_report.per_group.get(&g).and_then(|d| d.value()).copied();
            let _ = write!(out, ",{}", sci(d, true));
        }
        out.push('\n');
    }
    out
}

/// Rows = models, columns = pool mean delta and the four group divergences.
pub fn table2_csv(reports: &[ModelReport]) -> String {
    let mut out = String::from("model_id,total,wm,wf,nwm,nwf\n");
    for r in reports {
        let _ = write!(
            out,
            "{},{}",
            r.model_id,
            sci(Some(r.divergence_report.total_mean_delta), true)
        );
        for g in Group::DEMOGRAPHIC {
            let _ = write!(out, ",{}", sci(RankMetric::Kl(g).value(r), false));
        }
        out.push('\n');
    }
    out
}
