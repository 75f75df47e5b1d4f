//! Procedurally generated image pairs with exact correspondences.
//!
//! Image A is a smooth background carrying a handful of coloured blobs;
//! image B shows the same scene translated, with the colour channels
//! remapped so that raw appearance alone is an unreliable cue.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_canonical, DatasetSplit, MatchPair, SourceKind, SplitName};
use crate::error::{Error, Result};
use crate::matching::{ImageSize, Keypoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub pairs: usize,
    pub image_size: usize,
    pub keypoints: usize,
    pub blobs: usize,
    /// Largest translation between A and B, in pixels per axis.
    pub max_shift: i32,
    /// Swap colour channels in B.
    pub permute_colors: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            pairs: 8,
            image_size: 64,
            keypoints: 8,
            blobs: 10,
            max_shift: 8,
            permute_colors: true,
            seed: 7,
        }
    }
}

/// One generated pair with its images held in memory.
#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub pair: MatchPair,
    pub image_a: RgbImage,
    pub image_b: RgbImage,
}

struct Blob {
    cx: f64,
    cy: f64,
    radius: f64,
    color: [f64; 3],
}

fn render(size: usize, blobs: &[Blob], background: [f64; 3], shift: (f64, f64), perm: [usize; 3]) -> RgbImage {
    let mut img = RgbImage::new(size as u32, size as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        // Scene coordinates of this pixel.
        let (sx, sy) = (x as f64 - shift.0, y as f64 - shift.1);
        let mut c = [
            background[0] + 0.1 * (sx * 0.09).sin(),
            background[1] + 0.1 * (sy * 0.07).cos(),
            background[2] + 0.1 * ((sx + sy) * 0.05).sin(),
        ];
        for b in blobs {
            let d2 = (sx - b.cx).powi(2) + (sy - b.cy).powi(2);
            let w = (-d2 / (2.0 * b.radius * b.radius)).exp();
            for k in 0..3 {
                c[k] = c[k] * (1.0 - w) + b.color[k] * w;
            }
        }
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        *px = Rgb([q(c[perm[0]]), q(c[perm[1]]), q(c[perm[2]])]);
    }
    img
}

/// Generates `cfg.pairs` pairs. Keypoints sit on blob centres (falling back
/// to random scene points) that stay inside both images.
pub fn generate(cfg: &SyntheticConfig) -> Result<Vec<SyntheticPair>> {
    let s = cfg.image_size as f64;
    let margin = cfg.max_shift as f64 + 2.0;
    if cfg.max_shift < 0 || 2.0 * margin >= s || cfg.keypoints == 0 {
        return Err(Error::Parameter(format!(
            "synthetic pairs need keypoints >= 1 and 0 <= max_shift < image_size / 2 - 2, got {} and {} for {} px",
            cfg.keypoints, cfg.max_shift, cfg.image_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..cfg.pairs)
        .map(|i| {
            let blobs: Vec<Blob> = (0..cfg.blobs)
                .map(|_| Blob {
                    cx: rng.random_range(margin..s - margin),
                    cy: rng.random_range(margin..s - margin),
                    radius: rng.random_range(0.04 * s..0.09 * s),
                    color: [rng.random(), rng.random(), rng.random()],
                })
                .collect();
            let background = [
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
            ];
            let shift = (
                rng.random_range(-cfg.max_shift..=cfg.max_shift) as f64,
                rng.random_range(-cfg.max_shift..=cfg.max_shift) as f64,
            );
            let perm = if cfg.permute_colors {
                [[1, 2, 0], [2, 0, 1]][rng.random_range(0..2)]
            } else {
                [0, 1, 2]
            };
            let inside = |k: &Keypoint| k.x >= 0.0 && k.y >= 0.0 && k.x <= s - 1.0 && k.y <= s - 1.0;
            let mut kps_a = Vec::new();
            let mut kps_b = Vec::new();
            let mut candidates: Vec<Keypoint> = blobs.iter().map(|b| Keypoint::new(b.cx, b.cy)).collect();
            while kps_a.len() < cfg.keypoints {
                let a = candidates.pop().unwrap_or_else(|| {
                    Keypoint::new(
                        rng.random_range(margin..s - margin),
                        rng.random_range(margin..s - margin),
                    )
                });
                let b = Keypoint::new(a.x + shift.0, a.y + shift.1);
                if inside(&a) && inside(&b) {
                    kps_a.push(a);
                    kps_b.push(b);
                }
            }
            let image_a = render(cfg.image_size, &blobs, background, (0.0, 0.0), [0, 1, 2]);
            let image_b = render(cfg.image_size, &blobs, background, shift, perm);
            let size = ImageSize::square(cfg.image_size);
            SyntheticPair {
                pair: MatchPair {
                    id: format!("synthetic-{i:03}"),
                    image_a: format!("images/{i:03}_a.png").into(),
                    image_b: format!("images/{i:03}_b.png").into(),
                    category: "synthetic".into(),
                    keypoints_a: kps_a,
                    keypoints_b: kps_b,
                    bbox_b: None,
                    size_a: size,
                    size_b: size,
                },
                image_a,
                image_b,
            }
        })
        .collect())
}

/// Writes the images and a `pairs.jsonl` index under `dir`.
pub fn write_dataset(pairs: &[SyntheticPair], dir: &Path, split: SplitName) -> Result<DatasetSplit> {
    std::fs::create_dir_all(dir.join("images"))?;
    for p in pairs {
        p.image_a.save(dir.join(&p.pair.image_a))?;
        p.image_b.save(dir.join(&p.pair.image_b))?;
    }
    let out = DatasetSplit {
        name: split,
        source: SourceKind::Canonical,
        root: dir.to_path_buf(),
        pairs: pairs.iter().map(|p| p.pair.clone()).collect(),
    };
    write_canonical(&out, &dir.join("pairs.jsonl"))?;
    Ok(out)
}
