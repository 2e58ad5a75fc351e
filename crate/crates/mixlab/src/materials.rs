//! Per-session source sets and challenge levels, derived from the session
//! seed alone so they can be rebuilt after a restart.

use mixlab_core::render::squash;
use mixlab_core::rng::{mix_seed, SeededRng};
use mixlab_core::sources::challenge_target;
use mixlab_core::{
    blend, source_latents, BlendWeights, ImageGrid, LatentVector, RenderError, Renderer,
    SourceError,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::generator::render_parallel;
use crate::imaging::{encode_png, sha256_hex};

/// Grid step, in hundredths, of the distractor scan.
pub const SCAN_STEP_HUNDREDTHS: u8 = 5;
/// Levels are redrawn at most this many times if a distractor collides.
pub const MAX_LEVEL_ATTEMPTS: u64 = 16;
const PROBE_COUNT: usize = 48;
// Slack for the probe screen: the probe and the full render reach the same
// channel sum by different floating-point routes.
const PROBE_SLACK: f64 = 0.5 + 1e-6;

const CREATURE_LABELS: [&str; 6] = ["amber", "birch", "coral", "dune", "ember", "fern"];
const SET_LABELS: [&str; 3] = ["north", "east", "south"];

#[derive(Debug, thiserror::Error)]
pub enum MaterialsError {
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("level {0}: every redraw had a distractor reproducing the target")]
    Unsound(u8),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SourceImage {
    pub id: String,
    pub label: String,
    #[serde(skip)]
    pub latent: LatentVector,
    pub thumbnail_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChallengeLevel {
    pub level: u8,
    pub sets: Vec<Vec<SourceImage>>,
    pub correct_set: u8,
    pub target_weights: BlendWeights,
    pub target_image_hash: String,
    /// Number of draws it took to get a sound level (1 in the usual case).
    pub attempts: u64,
}

impl ChallengeLevel {
    pub fn correct_sources(&self) -> &[SourceImage] {
        &self.sets[usize::from(self.correct_set)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionMaterials {
    pub seed: u64,
    pub creatures: Vec<SourceImage>,
    pub levels: Vec<ChallengeLevel>,
}

impl SessionMaterials {
    pub fn level(&self, level: u8) -> Option<&ChallengeLevel> {
        self.levels.iter().find(|l| l.level == level)
    }
}

/// A rendered image ready for the image store.
#[derive(Debug, Clone)]
pub struct EncodedImage {
    pub hash: String,
    pub png: Vec<u8>,
}

impl EncodedImage {
    pub fn from_grid(grid: &ImageGrid) -> Self {
        let png = encode_png(grid);
        Self {
            hash: sha256_hex(&png),
            png,
        }
    }
}

/// Renders a latent with the procedural renderer and encodes it.
pub fn render_encoded(renderer: &Renderer, latent: &LatentVector) -> Result<(ImageGrid, EncodedImage), RenderError> {
    let grid = render_parallel(renderer, latent)?;
    let encoded = EncodedImage::from_grid(&grid);
    Ok((grid, encoded))
}

fn make_sources(
    renderer: &Renderer,
    latents: Vec<LatentVector>,
    ids: impl Fn(usize) -> (String, String),
    images: &mut Vec<EncodedImage>,
) -> Result<Vec<SourceImage>, RenderError> {
    latents
        .into_iter()
        .enumerate()
        .map(|(i, latent)| {
            let (_, encoded) = render_encoded(renderer, &latent)?;
            let (id, label) = ids(i);
            let thumbnail_hash = encoded.hash.clone();
            images.push(encoded);
            Ok(SourceImage {
                id,
                label,
                latent,
                thumbnail_hash,
            })
        })
        .collect()
}

/// The six sources shared by the free-play modes.
pub fn creature_latents(seed: u64, dim: usize) -> Result<Vec<LatentVector>, SourceError> {
    source_latents(6, dim, mix_seed(seed, 1))
}

/// Latent sets, correct index, and target weights of one draw of a level.
pub fn level_draw(
    seed: u64,
    dim: usize,
    level: u8,
    attempt: u64,
) -> Result<(Vec<Vec<LatentVector>>, u8, BlendWeights), SourceError> {
    let base = mix_seed(mix_seed(seed, 10 + u64::from(level)), attempt);
    let sets = (0..3)
        .map(|s| source_latents(3, dim, mix_seed(base, s)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rng = SeededRng::new(mix_seed(base, 3));
    let correct = rng.below(3) as u8;
    let target = challenge_target(level, &mut rng)?;
    Ok((sets, correct, target))
}

/// Builds every source set and challenge level for a session, returning the
/// thumbnails and target images that the image store must hold.
pub fn derive_materials(
    seed: u64,
    renderer: &Renderer,
) -> Result<(SessionMaterials, Vec<EncodedImage>), MaterialsError> {
    let dim = renderer.dim();
    let mut images = Vec::new();
    let creatures = make_sources(
        renderer,
        creature_latents(seed, dim)?,
        |i| (format!("c{i}"), CREATURE_LABELS[i].to_owned()),
        &mut images,
    )?;
    let mut levels = Vec::with_capacity(3);
    for level in 1..=3u8 {
        let built = build_level(seed, level, renderer, &mut images)?;
        levels.push(built);
    }
    Ok((
        SessionMaterials {
            seed,
            creatures,
            levels,
        },
        images,
    ))
}

fn build_level(
    seed: u64,
    level: u8,
    renderer: &Renderer,
    images: &mut Vec<EncodedImage>,
) -> Result<ChallengeLevel, MaterialsError> {
    let dim = renderer.dim();
    for attempt in 0..MAX_LEVEL_ATTEMPTS {
        let (sets, correct, target) = level_draw(seed, dim, level, attempt)?;
        let target_latent = blend(&sets[usize::from(correct)], &target)
            .expect("targets have at least one raised slider");
        let (target_grid, target_image) = render_encoded(renderer, &target_latent)?;
        let collides = sets
            .par_iter()
            .enumerate()
            .filter(|(s, _)| *s != usize::from(correct))
            .map(|(_, set)| scan_distractor(renderer, set, &target_grid))
            .collect::<Result<Vec<_>, _>>()?
            .iter()
            .any(Option::is_some);
        if collides {
            log::warn!("seed {seed} level {level} attempt {attempt}: distractor reproduces target, redrawing");
            continue;
        }
        let mut level_images = Vec::new();
        let sets = sets
            .into_iter()
            .enumerate()
            .map(|(s, latents)| {
                make_sources(
                    renderer,
                    latents,
                    |i| {
                        (
                            format!("l{level}s{s}i{i}"),
                            format!("{} {}", SET_LABELS[s], i + 1),
                        )
                    },
                    &mut level_images,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        images.extend(level_images);
        let target_image_hash = target_image.hash.clone();
        images.push(target_image);
        return Ok(ChallengeLevel {
            level,
            sets,
            correct_set: correct,
            target_weights: target,
            target_image_hash,
            attempts: attempt + 1,
        });
    }
    Err(MaterialsError::Unsound(level))
}

/// Every non-zero weight vector on the scan grid for `n` sliders.
pub fn scan_grid(n: usize) -> impl Iterator<Item = Vec<u8>> {
    let steps = u32::from(100 / SCAN_STEP_HUNDREDTHS) + 1;
    let total = steps.pow(n as u32);
    (1..total).map(move |mut code| {
        (0..n)
            .map(|_| {
                let h = (code % steps) as u8 * SCAN_STEP_HUNDREDTHS;
                code /= steps;
                h
            })
            .collect()
    })
}

fn probe_pixels(width: u32, height: u32) -> Vec<(u32, u32)> {
    let mut rng = SeededRng::new(0x70_72_6f_62_65);
    (0..PROBE_COUNT)
        .map(|_| {
            (
                rng.below(u64::from(width)) as u32,
                rng.below(u64::from(height)) as u32,
            )
        })
        .collect()
}

/// Searches the scan grid over `sources` for weights whose render equals
/// `target` pixel for pixel. Candidates are screened on probe pixels, where
/// the blended channel sum is the weighted mean of each source's sum; only
/// survivors get a full render.
pub fn scan_distractor(
    renderer: &Renderer,
    sources: &[LatentVector],
    target: &ImageGrid,
) -> Result<Option<BlendWeights>, RenderError> {
    let probes = probe_pixels(renderer.width(), renderer.height());
    // fields[p][i][c]
    let fields = probes
        .iter()
        .map(|&(x, y)| {
            sources
                .iter()
                .map(|z| renderer.field_at(z, x, y))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let wanted: Vec<[u8; 3]> = probes.iter().map(|&(x, y)| target.pixel(x, y)).collect();

    for hundredths in scan_grid(sources.len()) {
        let total: f64 = hundredths.iter().map(|&h| f64::from(h)).sum();
        let passes = fields.iter().zip(&wanted).all(|(per_source, px)| {
            (0..3).all(|c| {
                let field: f64 = per_source
                    .iter()
                    .zip(&hundredths)
                    .map(|(f, &h)| f[c] * f64::from(h))
                    .sum::<f64>()
                    / total;
                (squash(field) - f64::from(px[c])).abs() <= PROBE_SLACK
            })
        });
        if !passes {
            continue;
        }
        let weights = BlendWeights::from_hundredths(hundredths).expect("grid stays within 0..=100");
        let latent = blend(sources, &weights).expect("grid excludes all-zero weights");
        if render_parallel(renderer, &latent)? == *target {
            return Ok(Some(weights));
        }
    }
    Ok(None)
}
