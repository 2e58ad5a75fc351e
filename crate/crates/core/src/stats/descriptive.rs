use alloc::vec::Vec;

use super::{check_finite, StatsError};

/// Summary of a numeric series.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptives {
    /// Arithmetic mean.
    pub mean: f64,
    /// Sample standard deviation (n - 1); absent for a single value.
    pub sd: Option<f64>,
    /// Most frequent value, the smallest one on ties.
    pub mode: f64,
    /// Number of values.
    pub n: usize,
}

/// Mean, sample SD, mode, and count.
pub fn descriptives(series: &[f64]) -> Result<Descriptives, StatsError> {
    if series.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    check_finite(series)?;
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n as f64;
    let sd = (n > 1).then(|| {
        let ss: f64 = series.iter().map(|x| (x - mean) * (x - mean)).sum();
        libm::sqrt(ss / (n - 1) as f64)
    });

    let mut sorted: Vec<f64> = series.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut mode = sorted[0];
    let mut best = 0;
    for run in sorted.chunk_by(|a, b| a == b) {
        // Strictly greater keeps the smallest value on ties.
        if run.len() > best {
            best = run.len();
            mode = run[0];
        }
    }
    Ok(Descriptives { mean, sd, mode, n })
}
