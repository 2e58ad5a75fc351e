//! Latent vectors, slider weights, and the weighted blend.

use alloc::vec::Vec;
use core::fmt;

/// Slider resolution; every weight is an integer multiple of this.
pub const WEIGHT_QUANTUM: f64 = 0.01;

const QUANTUM_TOLERANCE: f64 = 1e-9;

/// Errors raised while building weights or blending.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BlendError {
    /// Every slider is at zero, so no source contributes.
    #[error("all blend weights are zero")]
    AllZeroWeights,
    /// Weight count and source count disagree.
    #[error("expected {expected} weights, found {found}")]
    LengthMismatch {
        /// Number of sources.
        expected: usize,
        /// Number of weights supplied.
        found: usize,
    },
    /// A weight is outside `[0, 1]`, not finite, or off the 0.01 grid.
    #[error("weight {index} = {value} is out of range or off the 0.01 grid")]
    WeightOutOfRange {
        /// Slider index.
        index: usize,
        /// Offending value.
        value: f64,
    },
    /// A latent contains a non-finite value or has the wrong dimension.
    #[error("invalid latent vector: {0}")]
    InvalidLatent(&'static str),
}

/// Real-valued generator input of fixed dimension.
#[derive(Clone, PartialEq)]
pub struct LatentVector(Vec<f64>);

impl LatentVector {
    /// Wraps `values`, rejecting empty or non-finite input.
    pub fn new(values: Vec<f64>) -> Result<Self, BlendError> {
        if values.is_empty() {
            return Err(BlendError::InvalidLatent("empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BlendError::InvalidLatent("non-finite component"));
        }
        Ok(Self(values))
    }

    /// Dimension `D`.
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Components in order.
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Consumes the vector, returning its components.
    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Euclidean distance to `other`; both must share a dimension.
    pub fn l2_distance(&self, other: &Self) -> f64 {
        let sq: f64 = self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        libm::sqrt(sq)
    }
}

impl fmt::Debug for LatentVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LatentVector(dim={}, ", self.0.len())?;
        f.debug_list().entries(self.0.iter().take(4)).finish()?;
        write!(f, "..)")
    }
}

/// One slider value per source, stored exactly as hundredths.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BlendWeights {
    hundredths: Vec<u8>,
}

impl BlendWeights {
    /// Builds weights from slider positions in `[0, 1]` on the 0.01 grid.
    pub fn from_values(values: &[f64]) -> Result<Self, BlendError> {
        let hundredths = values
            .iter()
            .enumerate()
            .map(|(index, &value)| {
                let scaled = value * 100.0;
                let snapped = libm::round(scaled);
                let on_grid = libm::fabs(scaled - snapped) <= QUANTUM_TOLERANCE * 100.0;
                if !value.is_finite() || !(0.0..=100.0).contains(&snapped) || !on_grid {
                    return Err(BlendError::WeightOutOfRange { index, value });
                }
                Ok(snapped as u8)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { hundredths })
    }

    /// Builds weights from integer hundredths (each at most 100).
    pub fn from_hundredths(hundredths: Vec<u8>) -> Result<Self, BlendError> {
        if let Some((index, &h)) = hundredths.iter().enumerate().find(|(_, &h)| h > 100) {
            return Err(BlendError::WeightOutOfRange {
                index,
                value: f64::from(h) / 100.0,
            });
        }
        Ok(Self { hundredths })
    }

    /// All sliders at zero.
    pub fn zeros(len: usize) -> Self {
        Self {
            hundredths: alloc::vec![0; len],
        }
    }

    /// Number of sliders.
    pub fn len(&self) -> usize {
        self.hundredths.len()
    }

    /// True when there are no sliders at all.
    pub fn is_empty(&self) -> bool {
        self.hundredths.is_empty()
    }

    /// Slider positions as integer hundredths.
    pub fn hundredths(&self) -> &[u8] {
        &self.hundredths
    }

    /// Slider positions as reals in `[0, 1]`.
    pub fn values(&self) -> Vec<f64> {
        self.hundredths.iter().map(|&h| f64::from(h) / 100.0).collect()
    }

    /// True when every slider is at zero.
    pub fn is_all_zero(&self) -> bool {
        self.hundredths.iter().all(|&h| h == 0)
    }

    /// Count of sliders above zero.
    pub fn nonzero_count(&self) -> usize {
        self.hundredths.iter().filter(|&&h| h > 0).count()
    }

    /// L1 distance in hundredths; lengths must match.
    pub(crate) fn l1_hundredths(&self, other: &Self) -> u32 {
        self.hundredths
            .iter()
            .zip(&other.hundredths)
            .map(|(&a, &b)| u32::from(a.abs_diff(b)))
            .sum()
    }
}

/// Normalized convex combination `sum(w_i z_i) / sum(w_i)` of the sources.
pub fn blend(sources: &[LatentVector], weights: &BlendWeights) -> Result<LatentVector, BlendError> {
    if sources.len() != weights.len() {
        return Err(BlendError::LengthMismatch {
            expected: sources.len(),
            found: weights.len(),
        });
    }
    blend_raw(sources, &weights.values())
}

/// Blend over arbitrary non-negative real weights (no grid requirement).
///
/// Output components are clamped to the range spanned by the contributing
/// sources, so rounding can never push a result outside the convex hull.
pub fn blend_raw(sources: &[LatentVector], weights: &[f64]) -> Result<LatentVector, BlendError> {
    if sources.len() != weights.len() {
        return Err(BlendError::LengthMismatch {
            expected: sources.len(),
            found: weights.len(),
        });
    }
    if let Some((index, &value)) = weights
        .iter()
        .enumerate()
        .find(|(_, w)| !w.is_finite() || **w < 0.0)
    {
        return Err(BlendError::WeightOutOfRange { index, value });
    }
    let dim = sources.first().map(LatentVector::dim).unwrap_or(0);
    if sources.iter().any(|s| s.dim() != dim) {
        return Err(BlendError::InvalidLatent("sources differ in dimension"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(BlendError::AllZeroWeights);
    }

    let contributing: Vec<(&LatentVector, f64)> = sources
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(s, &w)| (s, w))
        .collect();

    let out = (0..dim)
        .map(|k| {
            let mut acc = 0.0;
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for (source, w) in &contributing {
                let v = source.0[k];
                acc += w * v;
                lo = lo.min(v);
                hi = hi.max(v);
            }
            (acc / total).clamp(lo, hi)
        })
        .collect();
    Ok(LatentVector(out))
}
