use alloc::vec;
use alloc::vec::Vec;

use super::special::student_t_two_sided;
use super::{check_finite, Direction, EffectName, PMethod, StatisticName, StatsError, TestResult};

/// Paired two-sided t-test on `post - pre`, with Cohen's d of the differences.
pub fn paired_t_test(pre: &[f64], post: &[f64]) -> Result<TestResult, StatsError> {
    if pre.len() != post.len() {
        return Err(StatsError::LengthMismatch(pre.len(), post.len()));
    }
    if pre.len() < 2 {
        return Err(StatsError::TooFewPairs);
    }
    check_finite(pre)?;
    check_finite(post)?;

    let diffs: Vec<f64> = pre.iter().zip(post).map(|(a, b)| b - a).collect();
    let n = diffs.len();
    let df = (n - 1) as f64;

    if diffs.iter().all(|&d| d == diffs[0]) {
        if diffs[0] != 0.0 {
            return Err(StatsError::ZeroVarianceNonzeroMean);
        }
        return Ok(TestResult {
            statistic_name: StatisticName::T,
            statistic: 0.0,
            p_value: 1.0,
            p_method: PMethod::Degenerate,
            effect_name: EffectName::CohensD,
            effect: 0.0,
            direction: Direction::Neither,
            df: Some(df),
            z: None,
            n: vec![n],
            degenerate: true,
        });
    }

    let mean = diffs.iter().sum::<f64>() / n as f64;
    let ss: f64 = diffs.iter().map(|d| (d - mean) * (d - mean)).sum();
    let sd = libm::sqrt(ss / df);
    let t = mean / (sd / libm::sqrt(n as f64));
    let direction = if mean > 0.0 {
        Direction::FirstGreater
    } else if mean < 0.0 {
        Direction::SecondGreater
    } else {
        Direction::Neither
    };
    Ok(TestResult {
        statistic_name: StatisticName::T,
        statistic: t,
        p_value: student_t_two_sided(t, df),
        p_method: PMethod::StudentT,
        effect_name: EffectName::CohensD,
        effect: mean / sd,
        direction,
        df: Some(df),
        z: None,
        n: vec![n],
        degenerate: false,
    })
}
