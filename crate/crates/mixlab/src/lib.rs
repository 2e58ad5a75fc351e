//! Game server, telemetry store, simulated players, and study analysis for
//! the mixlab image-blending game. Blending, rendering, metrics, and
//! statistics come from `mixlab-core`.

pub mod analysis;
pub mod clock;
pub mod engine;
pub mod generator;
pub mod imaging;
pub mod materials;
pub mod model;
pub mod service;
pub mod sim;
pub mod telemetry;
