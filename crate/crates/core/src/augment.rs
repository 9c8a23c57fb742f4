//! Weak (geometric) and strong (geometric + crop + colour jitter) views.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::color::{hsv_to_rgb, rgb_to_hsv};
use crate::image::RgbImage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrongAugConfig {
    /// Maximum free rotation in degrees, on top of the 90-degree turns.
    pub max_rotation_deg: f64,
    /// Smallest crop side as a fraction of the tile.
    pub min_crop: f64,
    pub hue_jitter: f64,
    pub saturation_jitter: f64,
    pub value_jitter: f64,
}

impl Default for StrongAugConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 15.0,
            min_crop: 0.85,
            hue_jitter: 0.02,
            saturation_jitter: 0.1,
            value_jitter: 0.04,
        }
    }
}

fn bilinear(img: &RgbImage, y: f64, x: f64) -> [f64; 3] {
    let n = img.size();
    let max = (n - 1) as f64;
    let (y, x) = (y.clamp(0.0, max), x.clamp(0.0, max));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(n - 1), (x0 + 1).min(n - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let (a, b, c, d) = (img.get(y0, x0), img.get(y0, x1), img.get(y1, x0), img.get(y1, x1));
    let mut out = [0.0; 3];
    for k in 0..3 {
        let top = a[k] + fx * (b[k] - a[k]);
        let bot = c[k] + fx * (d[k] - c[k]);
        out[k] = top + fy * (bot - top);
    }
    out
}

/// Random horizontal/vertical flips and a random multiple of 90 degrees.
pub fn augment_weak<R: Rng + ?Sized>(img: &RgbImage, rng: &mut R) -> RgbImage {
    let n = img.size();
    let flip_h = rng.random_bool(0.5);
    let flip_v = rng.random_bool(0.5);
    let turns = rng.random_range(0..4u8);
    let mut out = img.clone();
    for y in 0..n {
        for x in 0..n {
            let (mut sy, mut sx) = (y, x);
            for _ in 0..turns {
                (sy, sx) = (sx, n - 1 - sy);
            }
            if flip_h {
                sx = n - 1 - sx;
            }
            if flip_v {
                sy = n - 1 - sy;
            }
            out.set(y, x, img.get(sy, sx));
        }
    }
    out
}

/// Weak view plus a small free rotation, a random crop resized back to the
/// tile, and HSV colour jitter. Pixels stay in `[0, 1]`.
pub fn augment_strong<R: Rng + ?Sized>(img: &RgbImage, cfg: &StrongAugConfig, rng: &mut R) -> RgbImage {
    let base = augment_weak(img, rng);
    let n = base.size();
    let angle = rng.random_range(-1.0..=1.0) * cfg.max_rotation_deg.to_radians();
    let crop = if cfg.min_crop < 1.0 { rng.random_range(cfg.min_crop..=1.0) } else { 1.0 };
    let side = crop * n as f64;
    let oy = rng.random_range(0.0..=(n as f64 - side));
    let ox = rng.random_range(0.0..=(n as f64 - side));
    let dh = rng.random_range(-1.0..=1.0) * cfg.hue_jitter;
    let ds = 1.0 + rng.random_range(-1.0..=1.0) * cfg.saturation_jitter;
    let dv = rng.random_range(-1.0..=1.0) * cfg.value_jitter;

    let (sin, cos) = angle.sin_cos();
    let centre = side / 2.0;
    let scale = side / n as f64;
    let mut out = RgbImage::filled(n, [0.0; 3]);
    for y in 0..n {
        for x in 0..n {
            // output pixel -> crop coordinates -> rotate about crop centre
            let cy = (y as f64 + 0.5) * scale - centre;
            let cx = (x as f64 + 0.5) * scale - centre;
            let ry = sin * cx + cos * cy + centre + oy - 0.5;
            let rx = cos * cx - sin * cy + centre + ox - 0.5;
            let [h, s, v] = rgb_to_hsv(bilinear(&base, ry, rx));
            let rgb = hsv_to_rgb([(h + dh).rem_euclid(1.0), (s * ds).clamp(0.0, 1.0), (v + dv).clamp(0.0, 1.0)]);
            out.set(y, x, rgb);
        }
    }
    out.clamp_unit();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient_image(n: usize) -> RgbImage {
        let mut img = RgbImage::filled(n, [0.0; 3]);
        for y in 0..n {
            for x in 0..n {
                img.set(y, x, [x as f64 / n as f64, y as f64 / n as f64, 0.5]);
            }
        }
        img
    }

    #[test]
    fn weak_on_constant_image_is_identity() {
        let img = RgbImage::filled(8, [0.2, 0.4, 0.6]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..8 {
            assert_eq!(augment_weak(&img, &mut rng), img);
        }
    }

    #[test]
    fn weak_is_a_pixel_permutation() {
        let img = gradient_image(6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = augment_weak(&img, &mut rng);
        let mut a: Vec<[u64; 3]> = img.pixels().map(|p| p.map(f64::to_bits)).collect();
        let mut b: Vec<[u64; 3]> = out.pixels().map(|p| p.map(f64::to_bits)).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn strong_keeps_shape_range_and_is_seeded() {
        let img = gradient_image(16);
        let cfg = StrongAugConfig::default();
        let a = augment_strong(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let b = augment_strong(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert_eq!(a.size(), 16);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
