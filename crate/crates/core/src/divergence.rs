//! Uncertainty Divergence (KL between trinary delta distributions of the
//! pool and of each group) and Demographic Divergence (cluster-size weighted
//! Jensen-Shannon divergence of demographic distributions across clusters).
//!
//! All logarithms are natural. Distributions are smoothed by adding
//! `epsilon` to every component and re-normalizing before any logarithm is
//! taken, so empty categories never produce infinities.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::conformity::{DeltaSet, DeltaSets};
use crate::corpus::Group;
use crate::error::{Error, Result};
use crate::report::Reported;

pub const DEFAULT_EPSILON: f64 = 1e-9;

/// Shares of deltas below, at, and above zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrinaryDistribution {
    pub p_neg: f64,
    pub p_zero: f64,
    pub p_pos: f64,
}

impl TrinaryDistribution {
    pub fn as_array(&self) -> [f64; 3] {
        [self.p_neg, self.p_zero, self.p_pos]
    }
}

/// Counts records by delta sign. Agreeing records are the zero class; a
/// disagreeing record only lands there when the model is exactly uniform
/// between the two labels, which makes its delta exactly zero.
pub fn trinary(deltas: &DeltaSet) -> Result<TrinaryDistribution> {
    if deltas.is_empty() {
        return Err(Error::InsufficientData(format!(
            "empty delta set for {:?}",
            deltas.scope
        )));
    }
    let (mut neg, mut zero, mut pos) = (0usize, 0usize, 0usize);
    for r in &deltas.records {
        if r.agrees || r.delta == 0.0 {
            zero += 1;
        } else if r.delta < 0.0 {
            neg += 1;
        } else {
            pos += 1;
        }
    }
    let n = deltas.len() as f64;
    Ok(TrinaryDistribution {
        p_neg: neg as f64 / n,
        p_zero: zero as f64 / n,
        p_pos: pos as f64 / n,
    })
}

/// Adds `epsilon` to every component and re-normalizes.
pub fn smooth(p: &[f64], epsilon: f64) -> Vec<f64> {
    let total: f64 = p.iter().map(|x| x + epsilon).sum();
    p.iter().map(|x| (x + epsilon) / total).collect()
}

/// `sum p_i ln(p_i / q_i)` over already strictly positive vectors.
fn kl_positive(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(pi, qi)| if pi == qi { 0.0 } else { pi * (pi / qi).ln() })
        .sum::<f64>()
        .max(0.0)
}

/// KL divergence between two smoothed categorical vectors of equal length.
pub fn kl_smoothed(p: &[f64], q: &[f64], epsilon: f64) -> f64 {
    assert_eq!(p.len(), q.len(), "distributions over different supports");
    kl_positive(&smooth(p, epsilon), &smooth(q, epsilon))
}

pub fn kl_divergence(p: &TrinaryDistribution, q: &TrinaryDistribution, epsilon: f64) -> f64 {
    kl_smoothed(&p.as_array(), &q.as_array(), epsilon)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupDivergence {
    pub kl: f64,
    pub mean_delta: f64,
    pub n: usize,
    pub trinary: TrinaryDistribution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub model_id: String,
    pub epsilon: f64,
    pub log_base: String,
    /// Mean delta over the whole pool.
    pub total_mean_delta: f64,
    /// Mean delta over the pool without excluded annotators.
    pub total_mean_delta_demographic_only: Reported<f64>,
    pub pool_trinary: TrinaryDistribution,
    pub pool_n: usize,
    pub per_group: BTreeMap<Group, Reported<GroupDivergence>>,
}

impl DivergenceReport {
    /// Groups present in the report, most divergent first. Equal values keep
    /// group order.
    pub fn groups_by_divergence(&self) -> Vec<(Group, f64)> {
        let mut out: Vec<(Group, f64)> = self
            .per_group
            .iter()
            .filter_map(|(g, d)| d.value().map(|d| (*g, d.kl)))
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        out
    }
}

/// KL(pool ‖ group) for each group, plus the pool's mean delta.
pub fn uncertainty_divergence(
    model_id: &str,
    sets: &DeltaSets,
    epsilon: f64,
) -> Result<DivergenceReport> {
    check_epsilon(epsilon)?;
    let pool = trinary(&sets.all)?;
    let per_group = sets
        .groups
        .iter()
        .map(|(g, set)| {
            let entry = match (trinary(set), set.mean_delta()) {
                (Ok(q), Some(mean_delta)) => Reported::Value(GroupDivergence {
                    kl: kl_divergence(&pool, &q, epsilon),
                    mean_delta,
                    n: set.len(),
                    trinary: q,
                }),
                _ => Reported::absent("group has no conformity records"),
            };
            (*g, entry)
        })
        .collect();
    Ok(DivergenceReport {
        model_id: model_id.to_string(),
        epsilon,
        log_base: "e".into(),
        total_mean_delta: sets.all.mean_delta().expect("non-empty pool"),
        total_mean_delta_demographic_only: sets
            .pool_mean_without_excluded()
            .map(Reported::Value)
            .unwrap_or_else(|| Reported::absent("no demographic-group records")),
        pool_trinary: pool,
        pool_n: sets.all.len(),
        per_group,
    })
}

pub(crate) fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("epsilon must be > 0, got {epsilon}")))
    }
}

/// Size and demographic composition of one cluster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterProfile {
    pub cluster_id: usize,
    pub size: usize,
    /// Counts per group in `Group::DEMOGRAPHIC` order.
    pub group_counts: [usize; 4],
    /// `group_counts / size`.
    pub demo_dist: [f64; 4],
    pub mean_delta: Reported<f64>,
    /// Min-max normalization of `mean_delta` across the clusters.
    pub normalized_mean_delta: Reported<f64>,
    /// Mean delta of each group's members within this cluster.
    pub group_mean_delta: BTreeMap<Group, Reported<f64>>,
}

/// `sum_i pi_i KL(P_i ‖ M)` with `pi_i` proportional to cluster size and
/// `M = sum_i pi_i P_i`, every `P_i` smoothed first.
pub fn demographic_divergence(profiles: &[ClusterProfile], epsilon: f64) -> Result<f64> {
    check_epsilon(epsilon)?;
    let dists: Vec<&[f64]> = profiles.iter().map(|p| &p.demo_dist[..]).collect();
    let sizes: Vec<usize> = profiles.iter().map(|p| p.size).collect();
    weighted_jsd(&dists, &sizes, epsilon)
}

/// Size-weighted generalized Jensen-Shannon divergence.
pub fn weighted_jsd(dists: &[&[f64]], sizes: &[usize], epsilon: f64) -> Result<f64> {
    if dists.is_empty() || dists.len() != sizes.len() {
        return Err(Error::InsufficientData(
            "demographic divergence needs at least one cluster".into(),
        ));
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::InsufficientData("all clusters are empty".into()));
    }
    let smoothed: Vec<Vec<f64>> = dists.iter().map(|d| smooth(d, epsilon)).collect();
    if smoothed.windows(2).all(|w| w[0] == w[1]) {
        return Ok(0.0);
    }
    let weights: Vec<f64> = sizes.iter().map(|s| *s as f64 / total as f64).collect();
    let dim = smoothed[0].len();
    let mut mixture = vec![0.0; dim];
    for (w, p) in weights.iter().zip(&smoothed) {
        for (m, x) in mixture.iter_mut().zip(p) {
            *m += w * x;
        }
    }
    Ok(weights
        .iter()
        .zip(&smoothed)
        .map(|(w, p)| w * kl_positive(p, &mixture))
        .sum())
}
