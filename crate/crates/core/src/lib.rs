//! Fairness evaluation of probabilistic text classifiers through the lens of
//! annotator disagreement.
//!
//! A model's predicted class probabilities are compared against every
//! individual annotator label. The resulting conformity deltas are grouped by
//! annotator demographics, summarized as divergences and histogram
//! fingerprints, clustered, and reported next to disaggregated F1.

pub mod clustering;
pub mod conformity;
pub mod corpus;
pub mod divergence;
pub mod error;
pub mod fingerprint;
pub mod oracle;
pub mod performance;
pub mod pipeline;
pub mod predictions;
pub mod report;
pub mod synth;

pub use error::{Error, Result};
