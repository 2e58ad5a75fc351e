//! Seeded source latents and challenge targets.

use alloc::vec::Vec;

use crate::latent::{BlendWeights, LatentVector};
use crate::rng::SeededRng;

/// Smallest source set a mode may present.
pub const MIN_SOURCES: usize = 3;
/// Largest source set a mode may present.
pub const MAX_SOURCES: usize = 6;
/// Generated source latents are clamped to `[-LATENT_BOUND, LATENT_BOUND]`.
pub const LATENT_BOUND: f64 = 3.0;
/// Minimum pairwise L2 distance between latents of one set.
pub const MIN_SOURCE_DISTANCE: f64 = 1.0;
/// Candidate draws allowed before giving up on a seed.
pub const MAX_SOURCE_ATTEMPTS: usize = 1000;
/// Smallest non-zero slider value in a challenge target, in hundredths.
pub const MIN_TARGET_HUNDREDTHS: u8 = 20;

/// Source generation failures.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SourceError {
    /// Requested count outside `[3, 6]`.
    #[error("source count {0} outside 3..=6")]
    BadCount(usize),
    /// Latent dimension of zero.
    #[error("latent dimension must be positive")]
    ZeroDimension,
    /// Could not find well-separated latents within the attempt budget.
    #[error("seed exhausted after {0} attempts")]
    SeedExhausted(usize),
    /// Challenge level outside `1..=3`.
    #[error("challenge level {0} outside 1..=3")]
    BadLevel(u8),
}

/// Derives `count` latents of dimension `dim` from `seed`.
///
/// Components are standard normals clamped to `[-3, 3]`. A candidate that
/// lands closer than [`MIN_SOURCE_DISTANCE`] to an accepted latent is
/// discarded and the stream continues, so the result stays deterministic.
pub fn source_latents(count: usize, dim: usize, seed: u64) -> Result<Vec<LatentVector>, SourceError> {
    if !(MIN_SOURCES..=MAX_SOURCES).contains(&count) {
        return Err(SourceError::BadCount(count));
    }
    if dim == 0 {
        return Err(SourceError::ZeroDimension);
    }
    let mut rng = SeededRng::new(seed);
    let mut accepted: Vec<LatentVector> = Vec::with_capacity(count);
    let mut attempts = 0;
    while accepted.len() < count {
        if attempts == MAX_SOURCE_ATTEMPTS {
            return Err(SourceError::SeedExhausted(attempts));
        }
        attempts += 1;
        let values = (0..dim)
            .map(|_| rng.standard_normal().clamp(-LATENT_BOUND, LATENT_BOUND))
            .collect();
        let candidate = LatentVector::new(values).expect("clamped normals are finite");
        if accepted
            .iter()
            .all(|z| z.l2_distance(&candidate) >= MIN_SOURCE_DISTANCE)
        {
            accepted.push(candidate);
        }
    }
    Ok(accepted)
}

/// Target weights for a three-slider challenge of the given level.
///
/// Level `n` raises exactly `n` sliders, each to a value in `[0.20, 1.00]`.
pub fn challenge_target(level: u8, rng: &mut SeededRng) -> Result<BlendWeights, SourceError> {
    if !(1..=3).contains(&level) {
        return Err(SourceError::BadLevel(level));
    }
    let mut slots = [0usize, 1, 2];
    // Fisher-Yates; the first `level` slots are raised.
    for i in (1..slots.len()).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        slots.swap(i, j);
    }
    let mut hundredths = alloc::vec![0u8; 3];
    for &slot in &slots[..usize::from(level)] {
        hundredths[slot] = rng.range_inclusive(i64::from(MIN_TARGET_HUNDREDTHS), 100) as u8;
    }
    Ok(BlendWeights::from_hundredths(hundredths).expect("targets stay within 0..=100"))
}
