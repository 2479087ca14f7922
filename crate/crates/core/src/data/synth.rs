//! Deterministic seven-segment digit renderer producing 28×28 grey images.
//!
//! Each image draws the digit's segments as anti-aliased thick strokes under
//! a random affine transform (scale, shear, translation), with per-endpoint
//! jitter, per-stroke intensity and an occasional spurious or missing
//! segment. Rows 0 and 1 stay black.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SIDE: usize = 28;

/// Segments a–g as endpoints in a unit box (x right, y down).
const SEGMENTS: [((f64, f64), (f64, f64)); 7] = [
    ((0.0, 0.0), (1.0, 0.0)), // a
    ((1.0, 0.0), (1.0, 0.5)), // b
    ((1.0, 0.5), (1.0, 1.0)), // c
    ((0.0, 1.0), (1.0, 1.0)), // d
    ((0.0, 0.5), (0.0, 1.0)), // e
    ((0.0, 0.0), (0.0, 0.5)), // f
    ((0.0, 0.5), (1.0, 0.5)), // g
];

/// Lit segments per digit, bit i = segment i (a = bit 0).
const DIGITS: [u8; 10] = [
    0b011_1111, // 0: abcdef
    0b000_0110, // 1: bc
    0b101_1011, // 2: abdeg
    0b100_1111, // 3: abcdg
    0b110_0110, // 4: bcfg
    0b110_1101, // 5: acdfg
    0b111_1101, // 6: acdefg
    0b000_0111, // 7: abc
    0b111_1111, // 8: all
    0b110_1111, // 9: abcdfg
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Pixel jitter of each segment endpoint.
    pub endpoint_jitter: f64,
    /// Stroke width range in pixels.
    pub thickness: (f64, f64),
    /// Stroke intensity range.
    pub intensity: (f64, f64),
    /// Maximum horizontal shear.
    pub shear: f64,
    /// Probability of toggling one random segment.
    pub corrupt_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            endpoint_jitter: 1.5,
            thickness: (1.6, 3.2),
            intensity: (0.55, 1.0),
            shear: 0.35,
            corrupt_prob: 0.1,
        }
    }
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Renders one digit as `SIDE × SIDE` row-major values in `[0, 1]`.
pub fn render_digit(digit: usize, cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<f64> {
    let mut lit = DIGITS[digit % 10];
    if rng.random::<f64>() < cfg.corrupt_prob {
        lit ^= 1 << rng.random_range(0..7);
    }
    let width = rng.random_range(7.0..11.0);
    let height = rng.random_range(14.0..19.0);
    let shear = rng.random_range(-cfg.shear..=cfg.shear);
    let thick = rng.random_range(cfg.thickness.0..=cfg.thickness.1);
    // Stroke pixels must stay below row 2 and inside the frame.
    let margin = thick / 2.0 + cfg.endpoint_jitter + 1.0;
    let top_min = 2.0 + margin;
    let top_max = (SIDE as f64 - margin - height).max(top_min);
    let top = rng.random_range(top_min..=top_max);
    let lo_off = (shear * height).min(0.0);
    let hi_off = width + (shear * height).max(0.0);
    let left_min = margin - lo_off;
    let left_max = (SIDE as f64 - margin - hi_off).max(left_min);
    let left = rng.random_range(left_min..=left_max);
    let place = |(u, v): (f64, f64), rng: &mut dyn rand::RngCore| {
        let jx = rng.random_range(-cfg.endpoint_jitter..=cfg.endpoint_jitter);
        let jy = rng.random_range(-cfg.endpoint_jitter..=cfg.endpoint_jitter);
        let y = top + v * height;
        let x = left + u * width + shear * (height - v * height);
        (x + jx, (y + jy).max(top_min))
    };
    let mut strokes = Vec::new();
    for (i, &(a, b)) in SEGMENTS.iter().enumerate() {
        if lit & (1 << i) != 0 {
            let a = place(a, rng);
            let b = place(b, rng);
            let level = rng.random_range(cfg.intensity.0..=cfg.intensity.1);
            strokes.push((a, b, level));
        }
    }
    let mut img = vec![0.0; SIDE * SIDE];
    for r in 2..SIDE {
        for c in 0..SIDE {
            let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
            let mut v: f64 = 0.0;
            for &(a, b, level) in &strokes {
                let d = segment_distance(px, py, a, b);
                let cover = (thick / 2.0 + 0.5 - d).clamp(0.0, 1.0);
                v = v.max(cover * level);
            }
            // Quantize like 8-bit source images.
            img[r * SIDE + c] = (v * 255.0).round() / 255.0;
        }
    }
    img
}

/// `n` images with balanced, shuffled labels.
pub fn synthetic_digits(n: usize, seed: u64, cfg: &SynthConfig) -> Vec<(Vec<f64>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    labels.shuffle(&mut rng);
    labels
        .into_iter()
        .map(|d| (render_digit(d, cfg, &mut rng), d))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = synthetic_digits(30, 4, &SynthConfig::default());
        let b = synthetic_digits(30, 4, &SynthConfig::default());
        assert_eq!(a, b);
        for (img, label) in &a {
            assert!(*label < 10);
            assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(img[..2 * SIDE].iter().all(|&v| v == 0.0));
            assert!(img.iter().any(|&v| v > 0.3));
        }
    }

    #[test]
    fn labels_are_balanced() {
        let d = synthetic_digits(100, 1, &SynthConfig::default());
        for k in 0..10 {
            assert_eq!(d.iter().filter(|(_, l)| *l == k).count(), 10);
        }
    }
}
