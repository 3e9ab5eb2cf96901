//! Procedural motif images.
//!
//! Each class is a texture or shape drawn inside a box of random size and
//! position on a noisy background. Position jitter makes raw pixels a poor
//! linear feature; telling stripes from checkers or rings from discs needs
//! relations between patches.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Number of distinct motifs; class ids wrap around this.
pub const MOTIFS: usize = 8;

/// Whether pixel `(y, x)` (box-relative, in `[-1, 1]^2`) is foreground.
fn motif(class: usize, u: f64, v: f64, period: f64, width: f64) -> bool {
    let r = u.hypot(v);
    let stripe = |t: f64| ((t + 1.0) / period).floor() as i64 % 2 == 0;
    match class % MOTIFS {
        0 => stripe(v),
        1 => stripe(u),
        2 => stripe(u) ^ stripe(v),
        3 => r <= 0.85,
        4 => (r - 0.7).abs() <= width,
        5 => u.abs() <= width || v.abs() <= width,
        6 => stripe((u + v) / std::f64::consts::SQRT_2),
        _ => (u - v).abs() <= width * 1.4 || (u + v).abs() <= width * 1.4,
    }
}

/// Renders one `channels x size x size` image of `class` into `out`.
pub fn render(rng: &mut ChaCha8Rng, class: usize, channels: usize, size: usize, out: &mut Vec<u8>) {
    let s = size as f64;
    let extent = rng.gen_range(0.45..0.8) * s;
    let cy = rng.gen_range(extent / 2.0..=s - extent / 2.0);
    let cx = rng.gen_range(extent / 2.0..=s - extent / 2.0);
    // Stripe period in box units: 2 / period stripes across the box.
    let period = rng.gen_range(0.28..0.45);
    let width = rng.gen_range(0.14..0.24);
    let bg = rng.gen_range(0.15..0.4);
    let fg = bg + rng.gen_range(0.35..0.55);
    let noise = Normal::new(0.0, 0.06).expect("valid std");
    let tint: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.85..1.0)).collect();
    let mut mask = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let u = (y as f64 + 0.5 - cy) / (extent / 2.0);
            let v = (x as f64 + 0.5 - cx) / (extent / 2.0);
            mask[y * size + x] =
                u.abs() <= 1.0 && v.abs() <= 1.0 && motif(class, u, v, period, width);
        }
    }
    for t in &tint {
        for &m in &mask {
            let base = if m { fg } else { bg };
            let val = (base * t + noise.sample(rng)).clamp(0.0, 1.0);
            out.push((val * 255.0).round() as u8);
        }
    }
}
