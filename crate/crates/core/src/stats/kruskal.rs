use alloc::vec::Vec;

use super::ranks::midranks;
use super::special::chi_square_upper;
use super::{check_finite, Direction, EffectName, PMethod, StatisticName, StatsError, TestResult};

/// Kruskal-Wallis H with tie correction; p from the chi-square upper tail.
///
/// When every pooled value is identical the tie correction vanishes; the
/// result is then flagged degenerate with `H = 0` and `p = 1`.
pub fn kruskal_wallis(groups: &[&[f64]]) -> Result<TestResult, StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::TooFewGroups);
    }
    if let Some(i) = groups.iter().position(|g| g.is_empty()) {
        return Err(StatsError::EmptyGroup(i));
    }
    for g in groups {
        check_finite(g)?;
    }
    let pooled: Vec<f64> = groups.iter().flat_map(|g| g.iter().copied()).collect();
    let ranking = midranks(&pooled);
    let big_n = pooled.len() as f64;
    let df = (groups.len() - 1) as f64;
    let sizes: Vec<usize> = groups.iter().map(|g| g.len()).collect();

    let correction = 1.0 - ranking.tie_term() / (big_n * big_n * big_n - big_n);
    if correction <= 0.0 {
        return Ok(TestResult {
            statistic_name: StatisticName::H,
            statistic: 0.0,
            p_value: 1.0,
            p_method: PMethod::Degenerate,
            effect_name: EffectName::None,
            effect: 0.0,
            direction: Direction::Neither,
            df: Some(df),
            z: None,
            n: sizes,
            degenerate: true,
        });
    }

    let mut offset = 0;
    let mut weighted = 0.0;
    for g in groups {
        let rank_sum: f64 = ranking.ranks[offset..offset + g.len()].iter().sum();
        weighted += rank_sum * rank_sum / g.len() as f64;
        offset += g.len();
    }
    let raw = 12.0 / (big_n * (big_n + 1.0)) * weighted - 3.0 * (big_n + 1.0);
    let h = (raw / correction).max(0.0);
    Ok(TestResult {
        statistic_name: StatisticName::H,
        statistic: h,
        p_value: chi_square_upper(h, df),
        p_method: PMethod::ChiSquare,
        effect_name: EffectName::None,
        effect: 0.0,
        direction: Direction::Neither,
        df: Some(df),
        z: None,
        n: sizes,
        degenerate: false,
    })
}
