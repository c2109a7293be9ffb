//! Silhouette families, palettes, textures and the deterministic renderer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::image_ops;
use super::{ContentLatent, StyleLatent};
use crate::tensor::Tensor;

/// Procedural shape families. The first six form the task label set; all
/// twelve form the reference pretext label set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    Disk,
    Annulus,
    Triangle,
    Cross,
    BarPair,
    CheckerSquare,
    Square,
    SquareFrame,
    HalfDisk,
    LShape,
    Crescent,
    TShape,
}

pub const TASK_FAMILIES: [Family; 6] = [
    Family::Disk,
    Family::Annulus,
    Family::Triangle,
    Family::Cross,
    Family::BarPair,
    Family::CheckerSquare,
];

pub const PRETEXT_FAMILIES: [Family; 12] = [
    Family::Disk,
    Family::Annulus,
    Family::Triangle,
    Family::Cross,
    Family::BarPair,
    Family::CheckerSquare,
    Family::Square,
    Family::SquareFrame,
    Family::HalfDisk,
    Family::LShape,
    Family::Crescent,
    Family::TShape,
];

impl Family {
    /// Membership test in the shape's own frame, where the shape fits in
    /// the unit disk.
    pub fn contains(self, u: f64, v: f64) -> bool {
        let r = (u * u + v * v).sqrt();
        match self {
            Family::Disk => r <= 1.0,
            Family::Annulus => (0.55..=1.0).contains(&r),
            Family::Triangle => {
                // equilateral triangle inscribed in the unit circle, apex up
                let s3 = 3f64.sqrt();
                v >= -0.5 && s3 * u - v <= 1.0 && -s3 * u - v <= 1.0
            }
            Family::Cross => {
                (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95)
            }
            Family::BarPair => v.abs() <= 0.85 && (0.25..=0.7).contains(&u.abs()),
            Family::CheckerSquare => {
                u.abs() <= 0.7 && v.abs() <= 0.7 && ((u > 0.0) == (v > 0.0))
            }
            Family::Square => u.abs() <= 0.7 && v.abs() <= 0.7,
            Family::SquareFrame => {
                let m = u.abs().max(v.abs());
                (0.4..=0.7).contains(&m)
            }
            Family::HalfDisk => r <= 1.0 && v >= 0.0,
            Family::LShape => {
                (u.abs() <= 0.7 && (-0.7..=-0.25).contains(&v))
                    || ((-0.7..=-0.25).contains(&u) && v.abs() <= 0.7)
            }
            Family::Crescent => {
                r <= 1.0 && ((u - 0.45).powi(2) + v * v).sqrt() > 0.75
            }
            Family::TShape => {
                (u.abs() <= 0.8 && (0.35..=0.8).contains(&v))
                    || (u.abs() <= 0.22 && (-0.8..=0.8).contains(&v))
            }
        }
    }
}

/// Foreground/background colour pairs. Ids `0..8` are the flat synthetic
/// palettes, ids `8..16` the real-domain palettes.
pub const PALETTES: [([f64; 3], [f64; 3]); 16] = [
    ([0.90, 0.15, 0.15], [0.10, 0.10, 0.35]),
    ([0.15, 0.80, 0.20], [0.35, 0.05, 0.30]),
    ([0.95, 0.85, 0.10], [0.10, 0.25, 0.55]),
    ([0.10, 0.45, 0.95], [0.90, 0.80, 0.30]),
    ([0.95, 0.95, 0.95], [0.20, 0.20, 0.20]),
    ([0.85, 0.20, 0.85], [0.15, 0.45, 0.15]),
    ([0.10, 0.85, 0.85], [0.50, 0.10, 0.05]),
    ([0.95, 0.55, 0.05], [0.05, 0.15, 0.40]),
    ([0.82, 0.62, 0.40], [0.22, 0.26, 0.18]),
    ([0.86, 0.84, 0.76], [0.30, 0.28, 0.34]),
    ([0.30, 0.42, 0.20], [0.78, 0.72, 0.58]),
    ([0.88, 0.52, 0.42], [0.24, 0.30, 0.40]),
    ([0.20, 0.22, 0.36], [0.80, 0.76, 0.62]),
    ([0.92, 0.82, 0.56], [0.34, 0.22, 0.18]),
    ([0.74, 0.80, 0.86], [0.20, 0.24, 0.16]),
    ([0.40, 0.18, 0.14], [0.76, 0.80, 0.70]),
];

/// Foreground texture amplitude relative to the background's.
pub const FG_TEXTURE_RATIO: f64 = 0.35;

/// Number of non-flat texture kinds (ids `1..=TEXTURE_KINDS`).
pub const TEXTURE_KINDS: usize = 5;

/// Procedural texture value in `[0, 1]` at pixel `(x, y)`.
fn texture_value(kind: usize, params: &TextureParams, x: f64, y: f64) -> f64 {
    let TextureParams {
        period,
        angle,
        phase,
        ..
    } = *params;
    let (s, c) = angle.sin_cos();
    let (a, b) = (c * x + s * y, -s * x + c * y);
    let tau = std::f64::consts::TAU;
    match kind {
        // stripes
        1 => {
            if ((a / period + phase).rem_euclid(1.0)) < 0.5 {
                1.0
            } else {
                0.0
            }
        }
        // checkerboard
        2 => {
            let i = (a / period + phase).floor() as i64;
            let j = (b / period + phase).floor() as i64;
            ((i + j).rem_euclid(2)) as f64
        }
        // dot grid
        3 => {
            let fa = (a / period + phase).rem_euclid(1.0) - 0.5;
            let fb = (b / period + phase).rem_euclid(1.0) - 0.5;
            if fa * fa + fb * fb < 0.09 {
                1.0
            } else {
                0.0
            }
        }
        // smooth blotches: sum of plane waves
        4 => {
            let v = (tau * a / (2.0 * period) + phase * tau).sin()
                + (tau * b / (1.7 * period) + phase * 5.0).sin()
                + (tau * (a + b) / (2.3 * period) + phase * 3.0).sin();
            0.5 + v / 6.0
        }
        // concentric rings around an off-centre point
        _ => {
            let (ox, oy) = (params.origin[0], params.origin[1]);
            let r = ((x - ox).powi(2) + (y - oy).powi(2)).sqrt();
            if ((r / period + phase).rem_euclid(1.0)) < 0.5 {
                1.0
            } else {
                0.0
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct TextureParams {
    period: f64,
    angle: f64,
    phase: f64,
    origin: [f64; 2],
}

impl TextureParams {
    fn draw(seed: u64, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            period: rng.random_range(3.0..7.0),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            phase: rng.random_range(0.0..1.0),
            origin: [
                rng.random_range(0.0..size as f64),
                rng.random_range(0.0..size as f64),
            ],
        }
    }
}

/// Binary silhouette mask (`h·w`, row-major).
pub fn silhouette(family: Family, content: &ContentLatent, size: usize) -> Vec<bool> {
    let radius = content.scale * size as f64 / 2.0;
    let (cx, cy) = (
        content.position[0] * size as f64,
        content.position[1] * size as f64,
    );
    let (s, c) = content.rotation.sin_cos();
    let mut mask = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = ((x as f64 + 0.5 - cx) / radius, (cy - y as f64 - 0.5) / radius);
            let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
            mask.push(family.contains(u, v));
        }
    }
    mask
}

/// Render one `[3, size, size]` image. Pure function of its arguments.
pub fn render(family: Family, content: &ContentLatent, style: &StyleLatent, size: usize) -> Tensor {
    let mask = silhouette(family, content, size);
    let (fg, bg) = PALETTES[style.palette_id % PALETTES.len()];
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    let textured = style.texture_id > 0;
    let (bg_tex, fg_tex) = if textured {
        (
            Some(TextureParams::draw(style.texture_seed, size)),
            Some(TextureParams::draw(style.texture_seed ^ 0x9e37_79b9_7f4a_7c15, size)),
        )
    } else {
        (None, None)
    };
    for (i, &inside) in mask.iter().enumerate() {
        let (x, y) = ((i % size) as f64, (i / size) as f64);
        // the silhouette carries a fainter texture than the background
        let (color, tex, amp) = if inside {
            (fg, fg_tex, FG_TEXTURE_RATIO * style.texture_amp)
        } else {
            (bg, bg_tex, style.texture_amp)
        };
        let modulation = tex.map_or(1.0, |p| {
            let t = texture_value(style.texture_id, &p, x, y);
            1.0 - amp + 2.0 * amp * t
        });
        for ch in 0..3 {
            data[ch * plane + i] = color[ch] * modulation;
        }
    }
    let mut img = Tensor::new(vec![3, size, size], data).expect("render shape");
    image_ops::hue_rotate(&mut img, style.hue_shift);
    if style.brightness != 0.0 || style.contrast != 0.0 {
        let (b, k) = (style.brightness, 1.0 + style.contrast);
        img.data_mut()
            .iter_mut()
            .for_each(|v| *v = (*v - 0.5) * k + 0.5 + b);
    }
    image_ops::gaussian_blur(&mut img, style.blur_sigma);
    if style.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(style.noise_seed);
        img.data_mut().iter_mut().for_each(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += style.noise_sigma * z;
        });
    }
    image_ops::clamp01(&mut img);
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn families_have_distinct_silhouettes() {
        let content = ContentLatent {
            class_id: 0,
            position: [0.5, 0.5],
            scale: 0.7,
            rotation: 0.3,
        };
        let masks: Vec<Vec<bool>> = PRETEXT_FAMILIES
            .iter()
            .map(|&f| silhouette(f, &content, 32))
            .collect();
        for (i, a) in masks.iter().enumerate() {
            assert!(a.iter().filter(|&&m| m).count() > 20, "{:?} too small", PRETEXT_FAMILIES[i]);
            for b in &masks[i + 1..] {
                let diff = a.iter().zip(b).filter(|(x, y)| x != y).count();
                assert!(diff > 15);
            }
        }
    }

    #[test]
    fn task_families_prefix_pretext_families() {
        assert_eq!(&PRETEXT_FAMILIES[..6], &TASK_FAMILIES);
    }
}
