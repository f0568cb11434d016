//! Deterministic synthetic RAW scenes for tests, training and verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::raw_io::{BayerPattern, RawImage};

const BIT_DEPTH: u16 = 12;
const BLACK: u16 = 64;
const WHITE: u16 = 4095;

fn to_dn(v: f64) -> u16 {
    let span = f64::from(WHITE - BLACK);
    (f64::from(BLACK) + v.clamp(0.0, 1.0) * span).round() as u16
}

fn mosaic(width: usize, height: usize, f: impl Fn(usize, usize, usize) -> f64) -> RawImage {
    let pattern = BayerPattern::Rggb;
    let data = (0..height)
        .flat_map(|i| (0..width).map(move |j| (i, j)))
        .map(|(i, j)| to_dn(f(i, j, pattern.color_at(i, j))))
        .collect();
    RawImage::new(width, height, BIT_DEPTH, pattern, BLACK, WHITE, data)
        .expect("fixture dimensions are even and levels valid")
}

/// Uniform gray field: every photosite reads `level` after normalization.
pub fn neutral_field(width: usize, height: usize, level: f64) -> RawImage {
    mosaic(width, height, |_, _, _| level)
}

/// Smooth colored scene with per-channel tint, a diagonal gradient, a
/// bright disc and mild sensor noise. Different seeds give different
/// scenes.
pub fn scene(width: usize, height: usize, seed: u64) -> RawImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tint: [f64; 3] = [rng.gen_range(0.5..1.0), 1.0, rng.gen_range(0.4..0.9)];
    let base = rng.gen_range(0.05..0.3);
    let slope = rng.gen_range(0.2..0.5);
    let (cy, cx) = (rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7));
    let radius = rng.gen_range(0.1..0.3);
    let noise: Vec<f64> = (0..width * height).map(|_| rng.gen_range(-0.01..0.01)).collect();
    mosaic(width, height, |i, j, c| {
        let (y, x) = (i as f64 / height as f64, j as f64 / width as f64);
        let disc = if (y - cy).powi(2) + (x - cx).powi(2) < radius * radius { 0.4 } else { 0.0 };
        tint[c] * (base + slope * 0.5 * (x + y) + disc) + noise[i * width + j]
    })
}

/// Fixed scene used for golden-output checks.
pub fn golden_scene() -> RawImage {
    scene(32, 24, 0x601d)
}

/// The standard training batch: four small scenes.
pub fn training_batch(width: usize, height: usize) -> Vec<RawImage> {
    (0..4).map(|k| scene(width, height, 1000 + k)).collect()
}
