//! Statistical battery: descriptives, paired t, Mann-Whitney U, Kruskal-Wallis.
//!
//! Degenerate inputs never produce NaN. They either come back as a typed
//! [`StatsError`] or as a [`TestResult`] with `degenerate` set.

use alloc::vec::Vec;
use core::fmt;

mod descriptive;
mod kruskal;
mod mann_whitney;
mod ranks;
pub mod special;
mod ttest;

pub use descriptive::{descriptives, Descriptives};
pub use kruskal::kruskal_wallis;
pub use mann_whitney::{
    mann_whitney_exact_p, mann_whitney_normal, mann_whitney_u, u_null_counts, EXACT_POOLED_LIMIT,
};
pub use ranks::{midranks, Ranking};
pub use ttest::paired_t_test;

/// Errors from the statistical routines.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StatsError {
    /// No observations.
    #[error("empty input")]
    EmptyInput,
    /// One of the groups has no observations.
    #[error("group {0} is empty")]
    EmptyGroup(usize),
    /// Fewer than two groups.
    #[error("at least two groups are required")]
    TooFewGroups,
    /// Paired samples of different lengths.
    #[error("paired samples differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    /// Fewer than two pairs.
    #[error("at least two pairs are required")]
    TooFewPairs,
    /// Every paired difference is the same non-zero value.
    #[error("paired differences are constant and non-zero; t is unbounded")]
    ZeroVarianceNonzeroMean,
    /// NaN or infinite observation.
    #[error("non-finite observation")]
    NonFinite,
    /// Exact Mann-Whitney requested with ties spanning both groups or too many observations.
    #[error("exact Mann-Whitney distribution unavailable: {0}")]
    ExactUnavailable(&'static str),
}

/// Which statistic a [`TestResult`] carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatisticName {
    /// Student t.
    T,
    /// Mann-Whitney U.
    U,
    /// Kruskal-Wallis H.
    H,
}

impl fmt::Display for StatisticName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StatisticName::T => "t",
            StatisticName::U => "U",
            StatisticName::H => "H",
        })
    }
}

/// Which effect size a [`TestResult`] carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EffectName {
    /// Mean difference over the SD of differences.
    CohensD,
    /// `|1 - 2 U_a / (n_a n_b)|`.
    RankBiserialRho,
    /// No effect size.
    None,
}

impl fmt::Display for EffectName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EffectName::CohensD => "cohens_d",
            EffectName::RankBiserialRho => "rank_biserial_rho",
            EffectName::None => "none",
        })
    }
}

/// How the p-value was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PMethod {
    /// Student t distribution.
    StudentT,
    /// Exhaustive null distribution.
    Exact,
    /// Normal approximation (tie and continuity corrected).
    NormalApprox,
    /// Chi-square upper tail.
    ChiSquare,
    /// No distribution; degenerate input.
    Degenerate,
}

impl fmt::Display for PMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PMethod::StudentT => "student_t",
            PMethod::Exact => "exact",
            PMethod::NormalApprox => "normal_approx",
            PMethod::ChiSquare => "chi_square",
            PMethod::Degenerate => "degenerate",
        })
    }
}

/// Sign of an effect relative to the first sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// First sample (or post - pre) tends larger.
    FirstGreater,
    /// Second sample tends larger (or post - pre negative).
    SecondGreater,
    /// No direction.
    Neither,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::FirstGreater => "first_greater",
            Direction::SecondGreater => "second_greater",
            Direction::Neither => "none",
        })
    }
}

/// Output of a hypothesis test.
#[derive(Debug, Clone, PartialEq)]
pub struct TestResult {
    /// Statistic kind.
    pub statistic_name: StatisticName,
    /// Statistic value.
    pub statistic: f64,
    /// Two-sided p-value in `[0, 1]`.
    pub p_value: f64,
    /// Route used for `p_value`.
    pub p_method: PMethod,
    /// Effect size kind.
    pub effect_name: EffectName,
    /// Effect size value (rank-biserial is reported unsigned).
    pub effect: f64,
    /// Direction of the effect.
    pub direction: Direction,
    /// Degrees of freedom, where defined.
    pub df: Option<f64>,
    /// Uncorrected standard-normal score (Mann-Whitney only).
    pub z: Option<f64>,
    /// Sample sizes, one per group (a single entry for paired data).
    pub n: Vec<usize>,
    /// Input was degenerate and the result is a convention, not a test.
    pub degenerate: bool,
}

pub(crate) fn check_finite(values: &[f64]) -> Result<(), StatsError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(StatsError::NonFinite)
    }
}
