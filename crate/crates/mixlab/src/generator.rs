//! Image backends: the seeded procedural renderer and an HTTP client for an
//! external generator service.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use mixlab_core::{ImageGrid, LatentVector, RenderError, Renderer};
use rayon::prelude::*;
use serde::Serialize;

use crate::imaging::decode_png;

/// Default timeout for one remote generate call.
pub const REMOTE_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, thiserror::Error)]
pub enum GeneratorError {
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("remote generator unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("malformed remote response: {0}")]
    MalformedRemoteResponse(String),
    #[error("remote generator timed out")]
    Timeout,
}

/// Renderer geometry and wave-table seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RenderSpec {
    pub latent_dim: usize,
    pub width: u32,
    pub height: u32,
    pub generator_seed: u64,
}

/// Shares tabulated renderers between sessions with the same spec.
#[derive(Debug, Default)]
pub struct RendererCache {
    renderers: Mutex<HashMap<RenderSpec, Arc<Renderer>>>,
}

impl RendererCache {
    pub fn get(&self, spec: RenderSpec) -> Result<Arc<Renderer>, RenderError> {
        let mut map = self.renderers.lock().expect("renderer cache poisoned");
        if let Some(r) = map.get(&spec) {
            return Ok(Arc::clone(r));
        }
        let r = Arc::new(Renderer::new(
            spec.latent_dim,
            spec.width,
            spec.height,
            spec.generator_seed,
        )?);
        map.insert(spec, Arc::clone(&r));
        Ok(r)
    }
}

/// Renders with rows split across the rayon pool. Output is identical to
/// [`Renderer::render`].
pub fn render_parallel(renderer: &Renderer, latent: &LatentVector) -> Result<ImageGrid, RenderError> {
    const BAND: usize = 16;
    let row_bytes = renderer.width() as usize * 3;
    let mut pixels = vec![0u8; row_bytes * renderer.height() as usize];
    pixels
        .par_chunks_mut(row_bytes * BAND)
        .enumerate()
        .try_for_each(|(i, band)| renderer.render_rows(latent, (i * BAND) as u32, band))?;
    ImageGrid::new(renderer.width(), renderer.height(), pixels)
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    latent: &'a [f64],
    width: u32,
    height: u32,
}

/// Client for `POST {endpoint}/generate`.
#[derive(Debug, Clone)]
pub struct RemoteGenerator {
    endpoint: String,
    agent: ureq::Agent,
}

impl RemoteGenerator {
    pub fn new(endpoint: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Self {
            endpoint: endpoint.trim_end_matches('/').to_owned(),
            agent,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// Sends the latent and decodes the PNG reply, which must match the
    /// requested size.
    pub fn generate(
        &self,
        latent: &LatentVector,
        width: u32,
        height: u32,
    ) -> Result<ImageGrid, GeneratorError> {
        let url = format!("{}/generate", self.endpoint);
        let request = RemoteRequest {
            latent: latent.as_slice(),
            width,
            height,
        };
        let response = self.agent.post(&url).send_json(&request).map_err(map_ureq)?;
        let status = response.status().as_u16();
        if status != 200 {
            return Err(GeneratorError::RemoteUnavailable(format!("status {status}")));
        }
        let bytes = response.into_body().read_to_vec().map_err(map_ureq)?;
        let image = decode_png(&bytes)
            .map_err(|e| GeneratorError::MalformedRemoteResponse(e.to_string()))?;
        if image.width() != width || image.height() != height {
            return Err(GeneratorError::MalformedRemoteResponse(format!(
                "expected {width}x{height}, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        Ok(image)
    }
}

fn map_ureq(e: ureq::Error) -> GeneratorError {
    match e {
        ureq::Error::Timeout(_) => GeneratorError::Timeout,
        ureq::Error::Io(ref io) if io.kind() == std::io::ErrorKind::TimedOut => {
            GeneratorError::Timeout
        }
        other => GeneratorError::RemoteUnavailable(other.to_string()),
    }
}

/// Backend used for player generate calls.
#[derive(Debug, Clone, Default)]
pub enum Backend {
    #[default]
    Procedural,
    Remote(RemoteGenerator),
}

impl Backend {
    pub fn generate(
        &self,
        renderer: &Renderer,
        latent: &LatentVector,
    ) -> Result<ImageGrid, GeneratorError> {
        match self {
            Backend::Procedural => Ok(render_parallel(renderer, latent)?),
            Backend::Remote(remote) => remote.generate(latent, renderer.width(), renderer.height()),
        }
    }
}
