//! Annotator uncertainty fingerprints: normalized histograms of an
//! annotator's deltas over equal-width bins covering `[-1, 1]`.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans_rows, KMeansConfig};
use crate::conformity::{ConformityRecord, DeltaSets};
use crate::corpus::Group;
use crate::error::{Error, Result};

pub const DEFAULT_BIN_COUNT: usize = 40;

/// Lower edge of 1-based bin `j`: `-1 + (j - 1) * 2 / bin_count`.
pub fn bin_lower_edge(j: usize, bin_count: usize) -> f64 {
    -1.0 + (j - 1) as f64 * 2.0 / bin_count as f64
}

/// 1-based bin holding `delta`. Bins are half-open `[lower, upper)`; `+1`
/// belongs to the last bin.
pub fn bin_index(delta: f64, bin_count: usize) -> Result<usize> {
    if bin_count == 0 {
        return Err(Error::InvalidConfig("bin_count must be >= 1".into()));
    }
    if !(-1.0..=1.0).contains(&delta) {
        return Err(Error::OutOfRange {
            what: "delta",
            value: delta,
            min: -1.0,
            max: 1.0,
        });
    }
    let estimate = ((delta + 1.0) * bin_count as f64 / 2.0).floor() as usize + 1;
    let mut j = estimate.clamp(1, bin_count);
    // The floor estimate can be off by one next to an edge; the edges as
    // computed by `bin_lower_edge` are authoritative.
    while j > 1 && delta < bin_lower_edge(j, bin_count) {
        j -= 1;
    }
    while j < bin_count && delta >= bin_lower_edge(j + 1, bin_count) {
        j += 1;
    }
    Ok(j)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FingerprintVector {
    pub annotator_id: String,
    pub group: Group,
    /// Per-bin counts; `bins[j] = counts[j] / n_texts`.
    pub counts: Vec<u32>,
    pub bins: Vec<f64>,
    pub n_texts: usize,
}

pub fn fingerprint(records: &[&ConformityRecord], bin_count: usize) -> Result<FingerprintVector> {
    let first = records
        .first()
        .ok_or_else(|| Error::InsufficientData("fingerprint of an empty record set".into()))?;
    let mut counts = vec![0u32; bin_count];
    for r in records {
        counts[bin_index(r.delta, bin_count)? - 1] += 1;
    }
    let n = records.len();
    Ok(FingerprintVector {
        annotator_id: first.annotator_id.clone(),
        group: first.group,
        bins: counts.iter().map(|c| *c as f64 / n as f64).collect(),
        counts,
        n_texts: n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FingerprintMatrix {
    pub model_id: String,
    pub bin_count: usize,
    pub rows: BTreeMap<String, FingerprintVector>,
}

impl FingerprintMatrix {
    /// One row per demographic-group annotator with at least one record.
    pub fn build(model_id: &str, sets: &DeltaSets, bin_count: usize) -> Result<Self> {
        if bin_count == 0 {
            return Err(Error::InvalidConfig("bin_count must be >= 1".into()));
        }
        let by_annotator: Vec<(&str, Vec<&ConformityRecord>)> =
            sets.records_by_annotator().into_iter().collect();
        let rows = by_annotator
            .par_iter()
            .map(|(id, recs)| Ok((id.to_string(), fingerprint(recs, bin_count)?)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .collect();
        Ok(Self {
            model_id: model_id.to_string(),
            bin_count,
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn annotator_ids(&self) -> Vec<&str> {
        self.rows.keys().map(String::as_str).collect()
    }

    /// Row vectors in annotator order.
    pub fn vectors(&self) -> Vec<Vec<f64>> {
        self.rows.values().map(|r| r.bins.clone()).collect()
    }

    /// `annotator_id,group,b1..bN`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
        let err = |e: csv::Error| Error::io(path, e.into());
        let mut header = vec!["annotator_id".to_string(), "group".to_string()];
        header.extend((1..=self.bin_count).map(|j| format!("b{j}")));
        w.write_record(&header).map_err(err)?;
        for row in self.rows.values() {
            let mut rec = vec![row.annotator_id.clone(), row.group.to_string()];
            rec.extend(row.bins.iter().map(|b| b.to_string()));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub bin_count: usize,
    pub inertia: f64,
    pub annotators: usize,
}

/// Final k-means inertia for each bin count, with the same seed throughout.
pub fn bin_sweep(
    model_id: &str,
    sets: &DeltaSets,
    bin_counts: &[usize],
    config: &KMeansConfig,
) -> Result<Vec<SweepRow>> {
    if bin_counts.is_empty() {
        return Err(Error::InvalidConfig("bin sweep needs at least one bin count".into()));
    }
    bin_counts
        .iter()
        .map(|&b| {
            let matrix = FingerprintMatrix::build(model_id, sets, b)?;
            let fit = kmeans_rows(&matrix.vectors(), config)?;
            Ok(SweepRow {
                bin_count: b,
                inertia: fit.inertia,
                annotators: matrix.len(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Literal interval scan over the half-open bin definition.
    fn scan(delta: f64, bins: usize) -> Vec<usize> {
        (1..=bins)
            .filter(|&j| {
                let lo = -1.0 + (j - 1) as f64 * 2.0 / bins as f64;
                let hi = -1.0 + j as f64 * 2.0 / bins as f64;
                lo <= delta && delta < hi
            })
            .collect()
    }

    fn rec(delta: f64) -> ConformityRecord {
        ConformityRecord {
            annotator_id: "a".into(),
            text_id: "t".into(),
            group: Group::Wf,
            delta,
            agrees: delta == 0.0,
        }
    }

    #[test]
    fn bin_examples() {
        assert_eq!(scan(-1.0, 40), vec![1]);
        assert_eq!(bin_index(-1.0, 40).unwrap(), 1);
        assert_eq!(scan(0.0, 40), vec![21]);
        assert_eq!(bin_index(0.0, 40).unwrap(), 21);
        assert_eq!(scan(1.0, 40), Vec::<usize>::new());
        assert_eq!(bin_index(1.0, 40).unwrap(), 40);
        assert!(bin_index(1.0000001, 40).is_err());
        assert!(bin_index(-1.5, 40).is_err());
        assert!(bin_index(f64::NAN, 40).is_err());
    }

    #[test]
    fn fingerprint_examples() {
        let zeros: Vec<_> = (0..5).map(|_| rec(0.0)).collect();
        let f = fingerprint(&zeros.iter().collect::<Vec<_>>(), 40).unwrap();
        assert_eq!(f.bins[20], 1.0);
        assert_eq!(f.bins.iter().sum::<f64>(), 1.0);

        assert_eq!(scan(0.4, 40), vec![29]);
        assert_eq!(scan(-0.4, 40), vec![13]);
        let recs: Vec<_> = [0.0, 0.0, 0.4, -0.4].into_iter().map(rec).collect();
        let f = fingerprint(&recs.iter().collect::<Vec<_>>(), 40).unwrap();
        assert_eq!(f.bins[20], 0.5);
        assert_eq!(f.bins[28], 0.25);
        assert_eq!(f.bins[12], 0.25);
        assert_eq!(f.n_texts, 4);

        assert_eq!(scan(0.97, 40), vec![40]);
        let one = [rec(0.97)];
        let f = fingerprint(&one.iter().collect::<Vec<_>>(), 40).unwrap();
        assert_eq!(f.bins[39], 1.0);

        assert!(fingerprint(&[], 40).is_err());
    }

    #[test]
    fn single_bin() {
        let recs: Vec<_> = [-1.0, 0.3, 1.0].into_iter().map(rec).collect();
        let f = fingerprint(&recs.iter().collect::<Vec<_>>(), 1).unwrap();
        assert_eq!(f.bins, vec![1.0]);
    }

    proptest! {
        #[test]
        fn bin_index_agrees_with_scan(delta in -1.0f64..=1.0, bins in 1usize..120) {
            let j = bin_index(delta, bins).unwrap();
            let hits = scan(delta, bins);
            if delta < 1.0 {
                prop_assert_eq!(hits, vec![j]);
            } else {
                prop_assert!(hits.is_empty());
                prop_assert_eq!(j, bins);
            }
        }

        #[test]
        fn fingerprint_is_normalized_and_order_free(
            deltas in prop::collection::vec(-1.0f64..=1.0, 1..200)
        ) {
            let recs: Vec<_> = deltas.iter().copied().map(rec).collect();
            let refs: Vec<_> = recs.iter().collect();
            let f = fingerprint(&refs, 40).unwrap();
            prop_assert!((f.bins.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(f.bins.iter().all(|b| (0.0..=1.0).contains(b)));

            let rev: Vec<_> = refs.iter().rev().copied().collect();
            prop_assert_eq!(&fingerprint(&rev, 40).unwrap().counts, &f.counts);

            // pairwise aggregation of 40 bins gives the 20-bin fingerprint
            let coarse = fingerprint(&refs, 20).unwrap();
            let merged: Vec<u32> = f.counts.chunks(2).map(|c| c[0] + c[1]).collect();
            prop_assert_eq!(&merged, &coarse.counts);
            for (pair, c) in f.bins.chunks(2).zip(&coarse.bins) {
                prop_assert!((pair[0] + pair[1] - c).abs() < 1e-12);
            }
        }
    }
}
