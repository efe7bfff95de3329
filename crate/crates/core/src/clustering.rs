//! K-means over annotator fingerprints and per-cluster profiles.
//!
//! Lloyd iterations with k-means++ seeding and `n_init` restarts. Restart
//! `r` draws from a ChaCha stream keyed on `(seed, r)`, so results do not
//! depend on how restarts are scheduled across threads. Clusters are
//! relabeled by descending size, then by lexicographic centroid order.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformity::DeltaSets;
use crate::corpus::{AnnotationCorpus, Group};
use crate::divergence::ClusterProfile;
use crate::error::{Error, Result};
use crate::fingerprint::FingerprintMatrix;
use crate::report::Reported;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    pub n_init: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 4,
            seed: 0,
            max_iter: 300,
            tol: 1e-6,
            n_init: 10,
        }
    }
}

impl KMeansConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.max_iter == 0 || self.n_init == 0 || self.tol.is_nan() || self.tol <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "k-means needs k >= 1, max_iter >= 1, n_init >= 1, tol > 0 (got {self:?})"
            )));
        }
        Ok(())
    }
}

/// Raw k-means output over a row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations_run: usize,
    /// Inertia after each Lloyd iteration of the selected restart.
    pub inertia_trace: Vec<f64>,
    pub restart: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(row: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(row, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn inertia_of(rows: &[Vec<f64>], labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    rows.iter()
        .zip(labels)
        .map(|(r, &l)| sq_dist(r, &centroids[l]))
        .sum()
}

fn seed_plus_plus(rows: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut centroids = vec![rows[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut idx = n - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    idx = i;
                    break;
                }
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        let c = rows[pick].clone();
        for (d, r) in d2.iter_mut().zip(rows) {
            *d = d.min(sq_dist(r, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn means(rows: &[Vec<f64>], labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = rows[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (r, &l) in rows.iter().zip(labels) {
        counts[l] += 1;
        for (s, x) in sums[l].iter_mut().zip(r) {
            *s += x;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        for x in s.iter_mut() {
            *x /= c as f64;
        }
    }
    sums
}

/// Moves the point farthest from its centroid (among clusters with more
/// than one member) into each empty cluster.
fn repair_empty(rows: &[Vec<f64>], labels: &mut [usize], centroids: &[Vec<f64>], k: usize) {
    let mut sizes = vec![0usize; k];
    for &l in labels.iter() {
        sizes[l] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, r) in rows.iter().enumerate() {
            if sizes[labels[i]] < 2 {
                continue;
            }
            let d = sq_dist(r, &centroids[labels[i]]);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("rows.len() >= k leaves a donor cluster");
        sizes[labels[i]] -= 1;
        labels[i] = empty;
        sizes[empty] = 1;
    }
}

fn single_run(rows: &[Vec<f64>], config: &KMeansConfig, restart: usize) -> KMeansFit {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(restart as u64);
    let k = config.k;
    let mut centroids = seed_plus_plus(rows, k, &mut rng);
    let mut labels = vec![0usize; rows.len()];
    let mut trace: Vec<f64> = Vec::new();
    let mut iterations = 0;
    for _ in 0..config.max_iter {
        iterations += 1;
        for (l, r) in labels.iter_mut().zip(rows) {
            *l = nearest(r, &centroids).0;
        }
        repair_empty(rows, &mut labels, &centroids, k);
        let updated = means(rows, &labels, k);
        let inertia = inertia_of(rows, &labels, &updated);
        if let Some(prev) = trace.last() {
            debug_assert!(
                inertia <= prev + 1e-12 * prev.max(1.0),
                "inertia increased from {prev} to {inertia}"
            );
        }
        trace.push(inertia);
        let shift: f64 = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| sq_dist(a, b))
            .sum();
        centroids = updated;
        if shift <= config.tol {
            break;
        }
    }
    KMeansFit {
        inertia: *trace.last().expect("at least one iteration"),
        labels,
        centroids,
        iterations_run: iterations,
        inertia_trace: trace,
        restart,
    }
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Relabels clusters by descending size, ties by centroid order.
fn canonicalize(mut fit: KMeansFit) -> KMeansFit {
    let k = fit.centroids.len();
    let mut sizes = vec![0usize; k];
    for &l in &fit.labels {
        sizes[l] += 1;
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        sizes[b]
            .cmp(&sizes[a])
            .then_with(|| lexicographic(&fit.centroids[a], &fit.centroids[b]))
            .then(a.cmp(&b))
    });
    let mut remap = vec![0; k];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new;
    }
    for l in &mut fit.labels {
        *l = remap[*l];
    }
    fit.centroids = order.iter().map(|&old| fit.centroids[old].clone()).collect();
    fit
}

/// Best-of-`n_init` k-means over `rows`.
pub fn kmeans_rows(rows: &[Vec<f64>], config: &KMeansConfig) -> Result<KMeansFit> {
    config.validate()?;
    if rows.len() < config.k {
        return Err(Error::InsufficientData(format!(
            "k-means with k = {} needs at least {} rows, got {}",
            config.k,
            config.k,
            rows.len()
        )));
    }
    let dim = rows[0].len();
    if dim == 0 || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::InvalidConfig("rows must share a non-zero dimension".into()));
    }
    let fits: Vec<KMeansFit> = (0..config.n_init)
        .into_par_iter()
        .map(|r| single_run(rows, config, r))
        .collect();
    let best = fits
        .into_iter()
        .min_by(|a, b| a.inertia.total_cmp(&b.inertia).then(a.restart.cmp(&b.restart)))
        .expect("n_init >= 1");
    Ok(canonicalize(best))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringResult {
    pub assignments: BTreeMap<String, usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations_run: usize,
}

impl ClusteringResult {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// `annotator_id,group,cluster_id`.
    pub fn write_assignments_csv(&self, path: &Path, corpus: &AnnotationCorpus) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
        let err = |e: csv::Error| Error::io(path, e.into());
        w.write_record(["annotator_id", "group", "cluster_id"]).map_err(err)?;
        for (id, c) in &self.assignments {
            let group = corpus.group_of(id).map(|g| g.to_string()).unwrap_or_default();
            w.write_record([id.as_str(), &group, &c.to_string()]).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn kmeans(matrix: &FingerprintMatrix, config: &KMeansConfig) -> Result<ClusteringResult> {
    let ids = matrix.annotator_ids();
    let fit = kmeans_rows(&matrix.vectors(), config)?;
    Ok(ClusteringResult {
        assignments: ids
            .into_iter()
            .map(String::from)
            .zip(fit.labels.iter().copied())
            .collect(),
        centroids: fit.centroids,
        inertia: fit.inertia,
        iterations_run: fit.iterations_run,
    })
}

/// Min-max scaling to `[0, 1]`; constant inputs map to 0.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|v| if max > min { (v - min) / (max - min) } else { 0.0 })
        .collect()
}

pub fn profile_clusters(
    result: &ClusteringResult,
    corpus: &AnnotationCorpus,
    sets: &DeltaSets,
) -> Vec<ClusterProfile> {
    let k = result.k();
    let by_annotator = sets.records_by_annotator();
    let mut counts = vec![[0usize; 4]; k];
    let mut sums = vec![(0.0f64, 0usize); k];
    let mut group_sums = vec![[(0.0f64, 0usize); 4]; k];
    for (id, &c) in &result.assignments {
        let Some(gi) = corpus.group_of(id).and_then(Group::index) else {
            continue;
        };
        counts[c][gi] += 1;
        for r in by_annotator.get(id.as_str()).into_iter().flatten() {
            sums[c].0 += r.delta;
            sums[c].1 += 1;
            group_sums[c][gi].0 += r.delta;
            group_sums[c][gi].1 += 1;
        }
    }
    let means: Vec<Option<f64>> = sums
        .iter()
        .map(|(s, n)| (*n > 0).then(|| s / *n as f64))
        .collect();
    let present: Vec<f64> = means.iter().flatten().copied().collect();
    let mut normalized = min_max_normalize(&present).into_iter();

    (0..k)
        .map(|c| {
            let size: usize = counts[c].iter().sum();
            ClusterProfile {
                cluster_id: c,
                size,
                group_counts: counts[c],
                demo_dist: counts[c].map(|n| if size > 0 { n as f64 / size as f64 } else { 0.0 }),
                mean_delta: match means[c] {
                    Some(m) => Reported::Value(m),
                    None => Reported::absent("cluster has no conformity records"),
                },
                normalized_mean_delta: match means[c] {
                    Some(_) => Reported::Value(normalized.next().expect("one per present mean")),
                    None => Reported::absent("cluster has no conformity records"),
                },
                group_mean_delta: Group::DEMOGRAPHIC
                    .iter()
                    .enumerate()
                    .map(|(gi, g)| {
                        let (s, n) = group_sums[c][gi];
                        let v = if n > 0 {
                            Reported::Value(s / n as f64)
                        } else {
                            Reported::absent("no members of this group")
                        };
                        (*g, v)
                    })
                    .collect(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_matrix(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.random::<f64>()).collect())
            .collect()
    }

    fn point_masses() -> Vec<Vec<f64>> {
        let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]];
        let sizes = [5, 4, 3, 2];
        let mut rows = Vec::new();
        for (c, s) in centers.iter().zip(sizes) {
            for _ in 0..s {
                rows.push(c.to_vec());
            }
        }
        rows
    }

    #[test]
    fn recovers_separated_point_masses() {
        let rows = point_masses();
        let fit = kmeans_rows(&rows, &KMeansConfig::default()).unwrap();
        assert_eq!(fit.inertia, 0.0);
        // canonical labels follow descending size
        assert_eq!(fit.labels, vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 3, 3]);
    }

    #[test]
    fn identical_rows_repair_to_singletons() {
        let rows = vec![vec![0.5, 0.5]; 10];
        let fit = kmeans_rows(&rows, &KMeansConfig::default()).unwrap();
        assert_eq!(fit.inertia, 0.0);
        let mut sizes = [0; 4];
        for l in &fit.labels {
            sizes[*l] += 1;
        }
        assert_eq!(sizes, [7, 1, 1, 1]);
    }

    #[test]
    fn too_few_rows() {
        let rows = vec![vec![0.0]; 3];
        assert!(kmeans_rows(&rows, &KMeansConfig::default()).is_err());
    }

    #[test]
    fn deterministic_under_seed() {
        let rows = random_matrix(7, 100, 40);
        let cfg = KMeansConfig { seed: 42, ..Default::default() };
        let a = kmeans_rows(&rows, &cfg).unwrap();
        let b = kmeans_rows(&rows, &cfg).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.inertia.to_bits(), b.inertia.to_bits());
    }

    #[test]
    fn inertia_trace_never_increases() {
        for seed in 0..20 {
            let rows = random_matrix(seed, 60, 8);
            let cfg = KMeansConfig { seed, n_init: 1, ..Default::default() };
            let fit = kmeans_rows(&rows, &cfg).unwrap();
            for w in fit.inertia_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12 * w[0].max(1.0), "seed {seed}: {w:?}");
            }
            let direct: f64 = rows
                .iter()
                .zip(&fit.labels)
                .map(|(r, &l)| sq_dist(r, &fit.centroids[l]))
                .sum();
            assert!((direct - fit.inertia).abs() < 1e-9);
        }
    }

    #[test]
    fn row_permutation_only_relabels() {
        let rows = point_masses();
        let fit = kmeans_rows(&rows, &KMeansConfig::default()).unwrap();
        let perm: Vec<usize> = (0..rows.len()).rev().collect();
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let pfit = kmeans_rows(&permuted, &KMeansConfig::default()).unwrap();
        for (pi, &orig) in perm.iter().enumerate() {
            assert_eq!(pfit.labels[pi], fit.labels[orig]);
        }
    }

    #[test]
    fn min_max_examples() {
        let n = min_max_normalize(&[0.1, 0.2, 0.3, 0.5]);
        for (a, b) in n.iter().zip([0.0, 0.25, 0.5, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(min_max_normalize(&[0.3]), vec![0.0]);
    }
}
