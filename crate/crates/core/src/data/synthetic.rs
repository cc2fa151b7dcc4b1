//! Procedural classification images: a mirror-symmetric pair of crossing
//! bars whose opening angle encodes the class, a faint blob at a
//! class-dependent height, and pixel noise. Every class cue survives a
//! horizontal flip, like natural-image classes do.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, domain};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticParams {
    pub seed: u64,
    pub classes: usize,
    pub resolution: usize,
    /// Examples per base split, e.g. `{"train": 600, "test": 300}`.
    pub splits: std::collections::BTreeMap<String, usize>,
}

/// Generate `n` balanced examples of `classes` classes at `resolution`² px.
pub fn gen_synthetic(seed: u64, n: usize, classes: usize, resolution: usize) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs at least 2 classes, got {classes}"
        )));
    }
    if resolution < 4 {
        return Err(Error::InvalidArgument(format!(
            "synthetic resolution {resolution} too small"
        )));
    }
    let mut labels: Vec<u32> = (0..n).map(|i| (i % classes) as u32).collect();
    labels.shuffle(&mut rng::stream(seed, domain::SYNTHETIC, u64::MAX, 0));

    let px = resolution * resolution;
    let mut images = vec![0u8; n * px];
    for (i, (img, &label)) in images.chunks_mut(px).zip(&labels).enumerate() {
        let mut r = rng::stream(seed, domain::SYNTHETIC, i as u64, 0);
        render(img, resolution, label as usize, classes, &mut r);
    }
    Dataset::new(
        format!("synthetic-{seed}"),
        [n, resolution, resolution, 1],
        images,
        labels,
        classes,
    )
}

fn render(img: &mut [u8], res: usize, class: usize, classes: usize, r: &mut impl Rng) {
    let s = res as f64;
    let k = classes as f64;
    let c = class as f64;

    // Two bars at ±alpha from horizontal: the pattern is its own mirror
    // image, so horizontal flips never change the class.
    let spacing = (PI / 2.0) / (k + 1.0);
    let alpha = spacing * (c + 1.0) + r.gen_range(-0.5..0.5) * spacing;
    let dirs = [(alpha.cos(), alpha.sin()), (alpha.cos(), -alpha.sin())];
    let cx = s / 2.0 + r.gen_range(-0.1..0.1) * s;
    let cy = s / 2.0 + r.gen_range(-0.1..0.1) * s;
    let half_len = r.gen_range(0.25..0.38) * s;
    let half_thick = r.gen_range(0.04..0.07) * s;
    let bar_level = r.gen_range(60.0..120.0);

    // Blob height encodes the class too; its horizontal position is free.
    let rows = if classes > 1 { c / (k - 1.0) } else { 0.5 };
    let by = s * (0.2 + 0.6 * rows) + r.gen_range(-0.05..0.05) * s;
    let bx = s * r.gen_range(0.25..0.75);
    let two_sigma_sq = 2.0 * (0.08 * s).powi(2);
    let blob_level = r.gen_range(50.0..90.0);

    for y in 0..res {
        for x in 0..res {
            let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let bar = dirs
                .iter()
                .map(|&(dx, dy)| {
                    let along = px * dx + py * dy;
                    let across = (px * dy - py * dx).abs();
                    (half_thick + 0.5 - across).clamp(0.0, 1.0)
                        * (half_len + 0.5 - along.abs()).clamp(0.0, 1.0)
                })
                .fold(0.0f64, f64::max)
                * bar_level;
            let (qx, qy) = (x as f64 + 0.5 - bx, y as f64 + 0.5 - by);
            let blob = blob_level * (-(qx * qx + qy * qy) / two_sigma_sq).exp();
            let noise = r.gen_range(0.0..120.0);
            img[y * res + x] = (noise + bar + blob).round().clamp(0.0, 255.0) as u8;
        }
    }
}
