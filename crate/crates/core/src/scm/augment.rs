//! Strong style-diversifying augmentation and the photometric stylisation
//! used by the match-rate diagnostic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image_ops as ops;
use crate::tensor::Tensor;

/// The augmentation op pool. Every op is the identity at magnitude 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugOp {
    Hue,
    Saturation,
    Brightness,
    Contrast,
    Blur,
    Sharpen,
    Posterize,
    Solarize,
    Affine,
    Cutout,
}

pub const AUG_OPS: [AugOp; 10] = [
    AugOp::Hue,
    AugOp::Saturation,
    AugOp::Brightness,
    AugOp::Contrast,
    AugOp::Blur,
    AugOp::Sharpen,
    AugOp::Posterize,
    AugOp::Solarize,
    AugOp::Affine,
    AugOp::Cutout,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Ops applied per view.
    pub n_ops: usize,
    /// Shared magnitude in `[0, 1]`.
    pub magnitude: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            n_ops: 2,
            magnitude: 9.0 / 30.0,
        }
    }
}

fn signed(rng: &mut ChaCha8Rng, v: f64) -> f64 {
    if rng.random_bool(0.5) {
        v
    } else {
        -v
    }
}

/// Apply one op at magnitude `m`; the random draws only pick signs and
/// positions, never the strength.
pub fn apply_op(img: &mut Tensor, op: AugOp, m: f64, rng: &mut ChaCha8Rng) {
    let (h, w) = ops::dims(img);
    match op {
        AugOp::Hue => ops::hue_rotate(img, signed(rng, m * std::f64::consts::PI)),
        AugOp::Saturation => ops::saturate(img, 1.0 + signed(rng, m)),
        AugOp::Brightness => ops::brighten(img, 1.0 + signed(rng, m)),
        AugOp::Contrast => ops::contrast(img, 1.0 + signed(rng, m)),
        AugOp::Blur => ops::gaussian_blur(img, 2.0 * m),
        AugOp::Sharpen => ops::sharpen(img, 2.0 * m),
        AugOp::Posterize => ops::posterize(img, 8 - (m * 6.0).round() as u32),
        AugOp::Solarize => ops::solarize(img, 1.0 - m),
        AugOp::Affine => {
            let angle = signed(rng, m * std::f64::consts::PI / 6.0);
            let max_shift = (m * w as f64 / 4.0).round() as i64;
            let dx = rng.random_range(-max_shift..=max_shift) as isize;
            let dy = rng.random_range(-max_shift..=max_shift) as isize;
            ops::affine(img, angle, dx, dy, 0.5);
        }
        AugOp::Cutout => {
            let side = (m * h.min(w) as f64 / 2.0).round() as usize;
            if side > 0 {
                let x0 = rng.random_range(0..=w - side);
                let y0 = rng.random_range(0..=h - side);
                ops::cutout(img, x0, y0, side, 0.5);
            }
        }
    }
    ops::clamp01(img);
}

/// RandAugment-style view: `n_ops` ops drawn with replacement, each at the
/// configured magnitude. Deterministic in `seed`.
pub fn strong_augment(image: &Tensor, seed: u64, cfg: &AugmentConfig) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = image.clone();
    for _ in 0..cfg.n_ops {
        let op = AUG_OPS[rng.random_range(0..AUG_OPS.len())];
        apply_op(&mut img, op, cfg.magnitude, &mut rng);
    }
    img
}

/// Photometric-only stylisation: blur plus brightness, contrast,
/// saturation and hue jitter. No op moves pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StylizeParams {
    pub blur_sigma: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl StylizeParams {
    pub fn identity() -> Self {
        Self {
            blur_sigma: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
        }
    }

    /// Blur σ in `[0.5, 1.5]` and jitters in `±0.3`, all scaled by
    /// `strength` (0 gives the identity).
    pub fn sample(rng: &mut ChaCha8Rng, strength: f64) -> Self {
        Self {
            blur_sigma: strength * rng.random_range(0.5..=1.5),
            brightness: strength * rng.random_range(-0.3..=0.3),
            contrast: strength * rng.random_range(-0.3..=0.3),
            saturation: strength * rng.random_range(-0.3..=0.3),
            hue: strength * rng.random_range(-0.3..=0.3),
        }
    }

    pub fn apply(&self, image: &Tensor) -> Tensor {
        let mut img = image.clone();
        ops::gaussian_blur(&mut img, self.blur_sigma);
        ops::brighten(&mut img, 1.0 + self.brightness);
        ops::contrast(&mut img, 1.0 + self.contrast);
        ops::saturate(&mut img, 1.0 + self.saturation);
        // hue jitter expressed as a fraction of a half turn
        ops::hue_rotate(&mut img, self.hue * std::f64::consts::PI);
        if *self != Self::identity() {
            ops::clamp01(&mut img);
        }
        img
    }
}

/// Full-strength stylisation drawn from `seed`.
pub fn stylize_for_matchrate(image: &Tensor, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    StylizeParams::sample(&mut rng, 1.0).apply(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::{generate_split, DatasetSpec, Domain};

    fn image() -> Tensor {
        let spec = DatasetSpec::default();
        generate_split(&spec, Domain::Real, 1, 11).remove(0).image
    }

    #[test]
    fn zero_magnitude_is_identity_for_every_op() {
        let img = image();
        for op in AUG_OPS {
            let mut out = img.clone();
            apply_op(&mut out, op, 0.0, &mut ChaCha8Rng::seed_from_u64(1));
            assert_eq!(out, img, "{op:?}");
        }
        let cfg = AugmentConfig {
            n_ops: 2,
            magnitude: 0.0,
        };
        assert_eq!(strong_augment(&img, 5, &cfg), img);
    }

    #[test]
    fn augmentation_is_seeded() {
        let img = image();
        let cfg = AugmentConfig::default();
        assert_eq!(strong_augment(&img, 3, &cfg), strong_augment(&img, 3, &cfg));
        let differs = (0..10).any(|s| strong_augment(&img, s, &cfg) != strong_augment(&img, s + 100, &cfg));
        assert!(differs);
        let out = strong_augment(&img, 3, &cfg);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn stylization_identity_and_determinism() {
        let img = image();
        assert_eq!(StylizeParams::identity().apply(&img), img);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(StylizeParams::sample(&mut rng, 0.0).apply(&img), img);
        assert_eq!(stylize_for_matchrate(&img, 4), stylize_for_matchrate(&img, 4));
        assert_ne!(stylize_for_matchrate(&img, 4), img);
    }

    #[test]
    fn stylization_is_photometric_only() {
        // A pure-black image with one white pixel: photometric ops never
        // move the peak.
        let mut img = Tensor::zeros(&[3, 9, 9]);
        for ch in 0..3 {
            img.data_mut()[ch * 81 + 4 * 9 + 6] = 1.0;
        }
        for seed in 0..20 {
            let out = stylize_for_matchrate(&img, seed);
            let plane = &out.data()[..81];
            let argmax = (0..81)
                .max_by(|&a, &b| plane[a].partial_cmp(&plane[b]).unwrap())
                .unwrap();
            assert_eq!(argmax, 4 * 9 + 6);
        }
    }
}
