//! Objective evaluation: feature distortion, a speaker probe, the tie
//! gap, and statistics for pairwise preference votes.

mod experiment;
mod metrics;
mod probe;
mod stats;

pub use experiment::{
    conversion_eval, corpus_probe, cross_lingual_eval, heldout_sources, CrossLingualItem, CrossLingualReport,
};
pub use metrics::{
    export_metrics, format_value, metrics_to_string, parse_metrics, read_metrics, read_votes, tally_votes,
    MetricRecord, PairTally, Vote, METRICS_HEADER,
};
pub use probe::{speaker_similarity, train_speaker_probe, ProbeConfig, SpeakerProbe};
pub use stats::{binomial_two_sided_p, preference_analysis, wilson_interval, PreferenceResult, Z_95};

use crate::corpus::Utterance;
use crate::error::{ensure_dim, Error, Result};
use crate::losses::tie_loss;
use crate::model::ModelParams;
use crate::numerics::Tensor;

/// Frame-averaged Euclidean distance between equal-shape feature
/// matrices.
pub fn mel_distortion(a: &Tensor, b: &Tensor) -> Result<f64> {
    ensure_dim("distortion frames", a.rows(), b.rows())?;
    ensure_dim("distortion dim", a.cols(), b.cols())?;
    if a.rows() == 0 {
        return Err(Error::Contract("distortion of empty features".into()));
    }
    let total: f64 = (0..a.rows())
        .map(|t| {
            a.row(t)
                .iter()
                .zip(b.row(t))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / a.rows() as f64)
}

/// Mean tied-layer divergence over transcribed utterances.
pub fn tie_gap(pairs: &[&Utterance], m: &ModelParams) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("tie gap needs at least one pair".into()));
    }
    let mut total = 0.0;
    for u in pairs {
        total += tie_loss(u.phonemes()?, &u.features.to_tensor(), m)?;
    }
    Ok(total / pairs.len() as f64)
}
