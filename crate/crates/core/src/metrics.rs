//! Behavioral metrics over slider histories.
//!
//! Distances and step sizes are L1 over slider positions. Both are computed in
//! integer hundredths and divided once at the end, so a 0.1 step is exactly
//! `0.1` and never `0.09999999999999998`.

use alloc::vec::Vec;

use crate::latent::BlendWeights;

/// Metric input errors.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    /// No data to measure.
    #[error("empty input")]
    EmptyInput,
    /// Weight vectors of different lengths.
    #[error("weight vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    /// Thresholds not in ascending order.
    #[error("thresholds must be ascending")]
    UnsortedThresholds,
}

/// Total slider travel between the current weights and the target.
pub fn challenge_distance(weights: &BlendWeights, target: &BlendWeights) -> Result<f64, MetricError> {
    if weights.len() != target.len() {
        return Err(MetricError::LengthMismatch(weights.len(), target.len()));
    }
    Ok(f64::from(weights.l1_hundredths(target)) / 100.0)
}

/// Per-generation slider change, measured from an all-zero baseline for the
/// first generation of a mode.
pub fn step_sizes(history: &[BlendWeights]) -> Result<Vec<f64>, MetricError> {
    let first = history.first().ok_or(MetricError::EmptyInput)?;
    let mut previous = BlendWeights::zeros(first.len());
    history
        .iter()
        .map(|w| {
            if w.len() != previous.len() {
                return Err(MetricError::LengthMismatch(previous.len(), w.len()));
            }
            let delta = f64::from(w.l1_hundredths(&previous)) / 100.0;
            previous = w.clone();
            Ok(delta)
        })
        .collect()
}

/// Fraction of `deltas` at or below each threshold.
pub fn cumulative_fraction(deltas: &[f64], thresholds: &[f64]) -> Result<Vec<(f64, f64)>, MetricError> {
    if deltas.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(MetricError::UnsortedThresholds);
    }
    let mut sorted = deltas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&tau| {
            let at_or_below = sorted.partition_point(|&d| d <= tau);
            (tau, at_or_below as f64 / n)
        })
        .collect())
}

/// Distance-to-target trace for one challenge attempt.
#[derive(Debug, Clone, PartialEq)]
pub enum Convergence {
    /// One distance per generation.
    Series(Vec<f64>),
    /// The player worked on a distractor set, so no distance is defined.
    Incomparable,
}

impl Convergence {
    /// The series, if comparable.
    pub fn series(&self) -> Option<&[f64]> {
        match self {
            Convergence::Series(s) => Some(s),
            Convergence::Incomparable => None,
        }
    }
}

/// Challenge distance of every generation, or `Incomparable` when the chosen
/// set was not the one that produced the target.
pub fn convergence_series(
    history: &[BlendWeights],
    target: &BlendWeights,
    chose_correct_set: bool,
) -> Result<Convergence, MetricError> {
    if !chose_correct_set {
        return Ok(Convergence::Incomparable);
    }
    history
        .iter()
        .map(|w| challenge_distance(w, target))
        .collect::<Result<Vec<_>, _>>()
        .map(Convergence::Series)
}

/// Strict increases in a distance series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Worsenings {
    /// Number of steps where the distance went up.
    pub total: usize,
    /// Longest run of consecutive increases.
    pub max_consecutive: usize,
}

/// Counts worsenings (strict increases between neighbours).
pub fn count_worsenings(series: &[f64]) -> Worsenings {
    let mut out = Worsenings::default();
    let mut run = 0;
    for pair in series.windows(2) {
        if pair[1] > pair[0] {
            out.total += 1;
            run += 1;
            out.max_consecutive = out.max_consecutive.max(run);
        } else {
            run = 0;
        }
    }
    out
}
