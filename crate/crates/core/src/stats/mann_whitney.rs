use alloc::vec;
use alloc::vec::Vec;

use super::ranks::{midranks, Ranking};
use super::special::normal_two_sided;
use super::{check_finite, Direction, EffectName, PMethod, StatisticName, StatsError, TestResult};

/// Largest pooled sample size that uses the exact null distribution.
pub const EXACT_POOLED_LIMIT: usize = 20;

struct Ranked {
    n_a: usize,
    n_b: usize,
    u_a: f64,
    ranking: Ranking,
    cross_ties: bool,
}

fn rank_groups(a: &[f64], b: &[f64]) -> Result<Ranked, StatsError> {
    if a.is_empty() {
        return Err(StatsError::EmptyGroup(0));
    }
    if b.is_empty() {
        return Err(StatsError::EmptyGroup(1));
    }
    check_finite(a)?;
    check_finite(b)?;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranking = midranks(&pooled);
    let n_a = a.len();
    let rank_sum_a: f64 = ranking.ranks[..n_a].iter().sum();
    let u_a = rank_sum_a - (n_a * (n_a + 1)) as f64 / 2.0;
    let cross_ties = a.iter().any(|x| b.contains(x));
    Ok(Ranked {
        n_a,
        n_b: b.len(),
        u_a,
        ranking,
        cross_ties,
    })
}

/// Null frequencies of `U_a = 0 ..= n_a n_b` over all `C(n_a + n_b, n_a)`
/// equally likely rank arrangements without ties.
///
/// Uses the recurrence on the largest observation: it belongs to `a` (and
/// beats all of `b`) or to `b`, so
/// `f(m, n, u) = f(m - 1, n, u - n) + f(m, n - 1, u)`.
pub fn u_null_counts(n_a: usize, n_b: usize) -> Vec<u64> {
    // table[m][n] holds the counts for sizes (m, n); built row by row.
    let mut prev_row: Vec<Vec<u64>> = (0..=n_b).map(|_| vec![1u64]).collect();
    for m in 1..=n_a {
        let mut row: Vec<Vec<u64>> = Vec::with_capacity(n_b + 1);
        row.push(vec![1u64]);
        for n in 1..=n_b {
            let mut counts = vec![0u64; m * n + 1];
            for (u, c) in prev_row[n].iter().enumerate() {
                counts[u + n] += c;
            }
            for (u, c) in row[n - 1].iter().enumerate() {
                counts[u] += c;
            }
            row.push(counts);
        }
        prev_row = row;
    }
    prev_row.swap_remove(n_b)
}

/// Exact two-sided p-value: `2 * min(P(U <= u), P(U >= u))`, capped at 1.
///
/// Requires no ties spanning the two groups and a pooled size of at most
/// [`EXACT_POOLED_LIMIT`].
pub fn mann_whitney_exact_p(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    let r = rank_groups(a, b)?;
    exact_p(&r)
}

fn exact_p(r: &Ranked) -> Result<f64, StatsError> {
    if r.cross_ties {
        return Err(StatsError::ExactUnavailable("ties span both groups"));
    }
    if r.n_a + r.n_b > EXACT_POOLED_LIMIT {
        return Err(StatsError::ExactUnavailable("pooled sample too large"));
    }
    let counts = u_null_counts(r.n_a, r.n_b);
    let total: u64 = counts.iter().sum();
    // Within-group ties only; U_a is still an integer.
    let u = libm::round(r.u_a) as usize;
    let lower: u64 = counts[..=u].iter().sum();
    let upper: u64 = counts[u..].iter().sum();
    Ok((2.0 * lower.min(upper) as f64 / total as f64).min(1.0))
}

/// Normal approximation: `(z, p)` where `z` is the uncorrected score of
/// `U_a` under the tie-corrected variance and `p` applies a 0.5 continuity
/// correction. Zero variance (all values equal) gives `(0, 1)`.
pub fn mann_whitney_normal(a: &[f64], b: &[f64]) -> Result<(f64, f64), StatsError> {
    let r = rank_groups(a, b)?;
    Ok(normal_parts(&r))
}

fn normal_parts(r: &Ranked) -> (f64, f64) {
    let (na, nb) = (r.n_a as f64, r.n_b as f64);
    let big_n = na + nb;
    let mean = na * nb / 2.0;
    let var = na * nb / 12.0 * ((big_n + 1.0) - r.ranking.tie_term() / (big_n * (big_n - 1.0)));
    if var <= 0.0 {
        return (0.0, 1.0);
    }
    let sd = libm::sqrt(var);
    let gap = r.u_a - mean;
    let z = gap / sd;
    let corrected = (gap.abs() - 0.5).max(0.0) / sd;
    (z, normal_two_sided(corrected))
}

/// Two-sided Mann-Whitney U test with rank-biserial effect size.
///
/// `U = min(U_a, U_b)` from midranks. The p-value is exact when the pooled
/// size is at most [`EXACT_POOLED_LIMIT`] and no tie spans both groups;
/// otherwise it uses the tie- and continuity-corrected normal approximation.
/// The effect `|1 - 2 U_a / (n_a n_b)|` is unsigned; `direction` says which
/// sample tends larger.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
    let r = rank_groups(a, b)?;
    let product = (r.n_a * r.n_b) as f64;
    let u_b = product - r.u_a;
    let (z, normal_p) = normal_parts(&r);
    let (p_value, p_method) = match exact_p(&r) {
        Ok(p) => (p, PMethod::Exact),
        Err(_) => (normal_p, PMethod::NormalApprox),
    };
    let signed = 1.0 - 2.0 * r.u_a / product;
    let direction = if r.u_a > u_b {
        Direction::FirstGreater
    } else if r.u_a < u_b {
        Direction::SecondGreater
    } else {
        Direction::Neither
    };
    let all_tied = r.ranking.ties.first() == Some(&(r.n_a + r.n_b));
    Ok(TestResult {
        statistic_name: StatisticName::U,
        statistic: r.u_a.min(u_b),
        p_value,
        p_method,
        effect_name: EffectName::RankBiserialRho,
        effect: signed.abs(),
        direction,
        df: None,
        z: Some(z),
        n: vec![r.n_a, r.n_b],
        degenerate: all_tied,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fully_separated_pair() {
        let r = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.effect, 1.0);
        assert_eq!(r.p_method, PMethod::Exact);
        assert!((r.p_value - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(r.direction, Direction::SecondGreater);
    }

    #[test]
    fn identical_multisets() {
        let a = [1.0, 2.0, 2.0, 5.0];
        let r = mann_whitney_u(&a, &a).unwrap();
        assert_eq!(r.statistic, 8.0);
        assert_eq!(r.effect, 0.0);
        assert_eq!(r.direction, Direction::Neither);
        assert_eq!(r.p_method, PMethod::NormalApprox);
    }

    #[test]
    fn null_counts_sum_to_binomial() {
        assert_eq!(u_null_counts(2, 2), vec![1, 1, 2, 1, 1]);
        assert_eq!(u_null_counts(10, 10).iter().sum::<u64>(), 184_756);
        assert_eq!(u_null_counts(0, 3), vec![1]);
    }

    #[test]
    fn exact_rejects_cross_ties() {
        assert!(matches!(
            mann_whitney_exact_p(&[1.0, 2.0], &[2.0, 3.0]),
            Err(StatsError::ExactUnavailable(_))
        ));
        assert_eq!(mann_whitney_u(&[], &[1.0]), Err(StatsError::EmptyGroup(0)));
    }

    #[test]
    fn all_equal_values_are_flagged() {
        let r = mann_whitney_u(&[3.0, 3.0], &[3.0, 3.0, 3.0]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_value, 1.0);
    }
}
