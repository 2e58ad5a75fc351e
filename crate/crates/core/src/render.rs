//! Procedural stand-in for a trained image generator.
//!
//! Each output channel is a logistic squash of a sum of `D` seeded sinusoids,
//! weighted by the latent components:
//!
//! ```text
//! pixel_c(x, y) = round(255 * logistic(sum_k z_k sin(a_kc x + b_kc y + phi_kc) / sqrt(D)))
//! ```
//!
//! with `(x, y)` the pixel centre mapped into `[-1, 1]^2`, `a, b` uniform in
//! `[-4, 4]` and `phi` uniform in `[0, 2 pi)`. Because `|sin| <= 1` and the
//! logistic slope is at most 1/4, a change `dz` moves any channel by at most
//! `(255/4) * sum|dz_k| / sqrt(D)` before rounding.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::TAU;

use crate::latent::LatentVector;
use crate::rng::SeededRng;

/// Smallest accepted image edge.
pub const MIN_IMAGE_EDGE: u32 = 16;

/// Rendering failures.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RenderError {
    /// Latent dimension differs from the renderer's.
    #[error("latent has dimension {found}, renderer expects {expected}")]
    InvalidLatent {
        /// Renderer dimension.
        expected: usize,
        /// Latent dimension.
        found: usize,
    },
    /// Width or height below [`MIN_IMAGE_EDGE`], or a zero latent dimension.
    #[error("degenerate render size {width}x{height} (dim {dim})")]
    DegenerateSize {
        /// Requested width.
        width: u32,
        /// Requested height.
        height: u32,
        /// Requested latent dimension.
        dim: usize,
    },
    /// Pixel buffer length is not `width * height * 3`.
    #[error("pixel buffer has {found} bytes, expected {expected}")]
    BadBuffer {
        /// `width * height * 3`.
        expected: usize,
        /// Actual length.
        found: usize,
    },
}

/// Row-major RGB image, 8 bits per channel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImageGrid {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl ImageGrid {
    /// Wraps an RGB buffer, checking its length.
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, RenderError> {
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(RenderError::BadBuffer {
                expected,
                found: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Width in pixels.
    pub fn width(&self) -> u32 {
        self.width
    }

    /// Height in pixels.
    pub fn height(&self) -> u32 {
        self.height
    }

    /// Raw RGB bytes.
    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// RGB triple at column `x`, row `y`.
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Maps a pre-squash channel sum to `[0, 255]` without rounding.
pub fn squash(field: f64) -> f64 {
    255.0 / (1.0 + libm::exp(-field))
}

/// Final 8-bit channel value for a pre-squash sum.
pub fn quantize(field: f64) -> u8 {
    libm::round(squash(field)) as u8
}

/// Rows rendered together; each column table is read once per block.
const ROW_BLOCK: usize = 4;

/// Pixel-centre coordinate in `[-1, 1]` for index `i` of `n`.
fn centre(i: u32, n: u32) -> f64 {
    (2.0 * f64::from(i) + 1.0) / f64::from(n) - 1.0
}

#[derive(Debug, Clone, Copy)]
struct Wave {
    a: f64,
    b: f64,
    phase: f64,
}

/// Seeded procedural renderer for a fixed `(dim, width, height, seed)`.
///
/// Construction tabulates the separable factors `sin/cos(a x)` per column and
/// `sin/cos(b y + phi)` per row, so a render costs two multiply-adds per
/// latent component per channel per pixel.
#[derive(Debug, Clone)]
pub struct Renderer {
    dim: usize,
    width: u32,
    height: u32,
    seed: u64,
    waves: Vec<Wave>,
    // Layout: [index][channel][k]
    col_sin: Vec<f64>,
    col_cos: Vec<f64>,
    row_sin: Vec<f64>,
    row_cos: Vec<f64>,
}

impl Renderer {
    /// Draws the wave table for `seed` and tabulates it for the given size.
    pub fn new(dim: usize, width: u32, height: u32, seed: u64) -> Result<Self, RenderError> {
        if width < MIN_IMAGE_EDGE || height < MIN_IMAGE_EDGE || dim == 0 {
            return Err(RenderError::DegenerateSize { width, height, dim });
        }
        let mut rng = SeededRng::new(seed);
        // Draw order is k-major, then channel, then (a, b, phase).
        let waves: Vec<Wave> = (0..dim * 3)
            .map(|_| Wave {
                a: rng.uniform(-4.0, 4.0),
                b: rng.uniform(-4.0, 4.0),
                phase: rng.uniform(0.0, TAU),
            })
            .collect();

        let stride = 3 * dim;
        let mut col_sin = vec![0.0; width as usize * stride];
        let mut col_cos = vec![0.0; width as usize * stride];
        for x in 0..width {
            let xh = centre(x, width);
            for c in 0..3 {
                for k in 0..dim {
                    let w = waves[k * 3 + c];
                    let i = x as usize * stride + c * dim + k;
                    let (s, co) = libm::sincos(w.a * xh);
                    col_sin[i] = s;
                    col_cos[i] = co;
                }
            }
        }
        let mut row_sin = vec![0.0; height as usize * stride];
        let mut row_cos = vec![0.0; height as usize * stride];
        for y in 0..height {
            let yh = centre(y, height);
            for c in 0..3 {
                for k in 0..dim {
                    let w = waves[k * 3 + c];
                    let i = y as usize * stride + c * dim + k;
                    let (s, co) = libm::sincos(w.b * yh + w.phase);
                    row_sin[i] = s;
                    row_cos[i] = co;
                }
            }
        }
        Ok(Self {
            dim,
            width,
            height,
            seed,
            waves,
            col_sin,
            col_cos,
            row_sin,
            row_cos,
        })
    }

    /// Latent dimension this renderer accepts.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Output width.
    pub fn width(&self) -> u32 {
        self.width
    }

    /// Output height.
    pub fn height(&self) -> u32 {
        self.height
    }

    /// Seed of the wave table.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn check(&self, latent: &LatentVector) -> Result<(), RenderError> {
        if latent.dim() != self.dim {
            return Err(RenderError::InvalidLatent {
                expected: self.dim,
                found: latent.dim(),
            });
        }
        Ok(())
    }

    /// Renders the full image.
    pub fn render(&self, latent: &LatentVector) -> Result<ImageGrid, RenderError> {
        let mut pixels = vec![0u8; self.width as usize * self.height as usize * 3];
        self.render_rows(latent, 0, &mut pixels)?;
        Ok(ImageGrid {
            width: self.width,
            height: self.height,
            pixels,
        })
    }

    /// Renders whole rows starting at `first_row` into `out`, whose length
    /// must be a multiple of one row (`width * 3` bytes). Lets callers split
    /// the image across threads.
    pub fn render_rows(
        &self,
        latent: &LatentVector,
        first_row: u32,
        out: &mut [u8],
    ) -> Result<(), RenderError> {
        self.check(latent)?;
        let row_bytes = self.width as usize * 3;
        let rows = out.len() / row_bytes;
        if out.len() % row_bytes != 0 || first_row as usize + rows > self.height as usize {
            return Err(RenderError::BadBuffer {
                expected: row_bytes * (self.height - first_row.min(self.height)) as usize,
                found: out.len(),
            });
        }
        let z = latent.as_slice();
        let dim = self.dim;
        let stride = 3 * dim;
        let norm = 1.0 / libm::sqrt(dim as f64);
        // Row factors for a block of rows, interleaved so the innermost loop
        // runs over rows: u[(c * dim + k) * ROW_BLOCK + b].
        let mut u = vec![0.0; stride * ROW_BLOCK];
        let mut v = vec![0.0; stride * ROW_BLOCK];

        for (block, block_out) in out.chunks_mut(row_bytes * ROW_BLOCK).enumerate() {
            let y0 = first_row as usize + block * ROW_BLOCK;
            let rows = block_out.len() / row_bytes;
            u.fill(0.0);
            v.fill(0.0);
            for b in 0..rows {
                let y = y0 + b;
                let rc = &self.row_cos[y * stride..(y + 1) * stride];
                let rs = &self.row_sin[y * stride..(y + 1) * stride];
                for c in 0..3 {
                    for k in 0..dim {
                        let i = c * dim + k;
                        u[i * ROW_BLOCK + b] = z[k] * rc[i];
                        v[i * ROW_BLOCK + b] = z[k] * rs[i];
                    }
                }
            }
            for x in 0..self.width as usize {
                let cs = &self.col_sin[x * stride..(x + 1) * stride];
                let cc = &self.col_cos[x * stride..(x + 1) * stride];
                for c in 0..3 {
                    let mut acc = [0.0; ROW_BLOCK];
                    for i in c * dim..(c + 1) * dim {
                        let (s, co) = (cs[i], cc[i]);
                        let ub = &u[i * ROW_BLOCK..(i + 1) * ROW_BLOCK];
                        let vb = &v[i * ROW_BLOCK..(i + 1) * ROW_BLOCK];
                        for b in 0..ROW_BLOCK {
                            acc[b] += s * ub[b] + co * vb[b];
                        }
                    }
                    for (b, sum) in acc.iter().enumerate().take(rows) {
                        block_out[b * row_bytes + x * 3 + c] = quantize(sum * norm);
                    }
                }
            }
        }
        Ok(())
    }

    /// Pre-squash channel sums at one pixel, evaluated directly from the
    /// wave table (no separable tables). Used for cheap probes and checks.
    pub fn field_at(&self, latent: &LatentVector, x: u32, y: u32) -> Result<[f64; 3], RenderError> {
        self.check(latent)?;
        let xh = centre(x, self.width);
        let yh = centre(y, self.height);
        let norm = 1.0 / libm::sqrt(self.dim as f64);
        let mut out = [0.0; 3];
        for (c, slot) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, zk) in latent.as_slice().iter().enumerate() {
                let w = self.waves[k * 3 + c];
                acc += zk * libm::sin(w.a * xh + w.b * yh + w.phase);
            }
            *slot = acc * norm;
        }
        Ok(out)
    }
}
