//! RGB/HSV conversion. Hue is measured in turns, so it lives in `[0, 1)`.

pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { delta / max };
    [h.rem_euclid(1.0), s, max]
}

fn sector(h: f64) -> (usize, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = (h6.floor() as usize).min(5);
    (i, h6 - i as f64)
}

pub fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let (i, f) = sector(h);
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Jacobian of [`hsv_to_rgb`]: `out[c][k] = d rgb_c / d hsv_k`.
///
/// At sector boundaries the right-hand derivative is returned.
pub fn hsv_to_rgb_jacobian([h, s, v]: [f64; 3]) -> [[f64; 3]; 3] {
    let (i, f) = sector(h);
    // rows: d/dh, d/ds, d/dv for each of the building blocks
    let dv = [0.0, 0.0, 1.0];
    let dp = [0.0, -v, 1.0 - s];
    let dq = [-6.0 * v * s, -v * f, 1.0 - s * f];
    let dt = [6.0 * v * s, -v * (1.0 - f), 1.0 - s * (1.0 - f)];
    match i {
        0 => [dv, dt, dp],
        1 => [dq, dv, dp],
        2 => [dp, dv, dt],
        3 => [dp, dq, dv],
        4 => [dt, dp, dv],
        _ => [dv, dp, dq],
    }
}

/// Mean hue of a set of RGB pixels on the circle, weighted by saturation.
///
/// Returns `None` when every pixel is achromatic.
pub fn circular_mean_hue(pixels: impl IntoIterator<Item = [f64; 3]>) -> Option<f64> {
    let (mut x, mut y) = (0.0, 0.0);
    for px in pixels {
        let [h, s, _] = rgb_to_hsv(px);
        let a = h * std::f64::consts::TAU;
        x += s * a.cos();
        y += s * a.sin();
    }
    if x.abs() + y.abs() < 1e-12 {
        None
    } else {
        Some((y.atan2(x) / std::f64::consts::TAU).rem_euclid(1.0))
    }
}

/// Signed shortest difference `a - b` between two hues, in `(-0.5, 0.5]`.
pub fn hue_difference(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    if d > 0.5 {
        d - 1.0
    } else {
        d
    }
}
