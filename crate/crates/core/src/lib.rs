//! Algorithmic core of mixlab.
//!
//! Everything in here is a pure function of its inputs and seeded tables, so
//! the crate builds without `std` (only `alloc` is required). IO, the game
//! engine, persistence, and the HTTP surface live in the `mixlab` crate.

#![no_std]
#![warn(missing_docs)]

extern crate alloc;

pub mod latent;
pub mod metrics;
pub mod render;
pub mod rng;
pub mod sources;
pub mod stats;

pub use latent::{blend, blend_raw, BlendError, BlendWeights, LatentVector, WEIGHT_QUANTUM};
pub use metrics::{
    challenge_distance, convergence_series, count_worsenings, cumulative_fraction, step_sizes,
    Convergence, MetricError, Worsenings,
};
pub use render::{ImageGrid, RenderError, Renderer};
pub use sources::{source_latents, SourceError};

/// Default latent dimension.
pub const DEFAULT_LATENT_DIM: usize = 128;
/// Default rendered image edge length in pixels.
pub const DEFAULT_IMAGE_SIZE: u32 = 256;
