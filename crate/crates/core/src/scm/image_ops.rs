//! Per-pixel and filtering helpers on `[3, h, w]` images in `[0, 1]`.

use crate::tensor::Tensor;

pub(crate) fn dims(img: &Tensor) -> (usize, usize) {
    (img.shape()[1], img.shape()[2])
}

pub(crate) fn clamp01(img: &mut Tensor) {
    img.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Apply `f(r, g, b) -> (r, g, b)` to every pixel.
pub(crate) fn map_pixels(img: &mut Tensor, f: impl Fn(f64, f64, f64) -> (f64, f64, f64)) {
    let (h, w) = dims(img);
    let plane = h * w;
    let d = img.data_mut();
    for i in 0..plane {
        let (r, g, b) = f(d[i], d[plane + i], d[2 * plane + i]);
        d[i] = r;
        d[plane + i] = g;
        d[2 * plane + i] = b;
    }
}

/// Rotate chroma in YIQ space by `angle` radians.
pub(crate) fn hue_rotate(img: &mut Tensor, angle: f64) {
    if angle == 0.0 {
        return;
    }
    let (s, c) = angle.sin_cos();
    map_pixels(img, |r, g, b| {
        let y = luma(r, g, b);
        let i = 0.596 * r - 0.274 * g - 0.322 * b;
        let q = 0.211 * r - 0.523 * g + 0.312 * b;
        let (i2, q2) = (c * i - s * q, s * i + c * q);
        (
            y + 0.956 * i2 + 0.621 * q2,
            y - 0.272 * i2 - 0.647 * q2,
            y - 1.106 * i2 + 1.703 * q2,
        )
    });
}

/// Blend towards (factor < 1) or away from (factor > 1) the grey image.
pub(crate) fn saturate(img: &mut Tensor, factor: f64) {
    if factor == 1.0 {
        return;
    }
    map_pixels(img, |r, g, b| {
        let y = luma(r, g, b);
        (
            y + factor * (r - y),
            y + factor * (g - y),
            y + factor * (b - y),
        )
    });
}

pub(crate) fn brighten(img: &mut Tensor, factor: f64) {
    if factor == 1.0 {
        return;
    }
    img.data_mut().iter_mut().for_each(|v| *v *= factor);
}

/// Scale deviations from the mean luma by `factor`.
pub(crate) fn contrast(img: &mut Tensor, factor: f64) {
    if factor == 1.0 {
        return;
    }
    let (h, w) = dims(img);
    let plane = h * w;
    let d = img.data();
    let mean = (0..plane)
        .map(|i| luma(d[i], d[plane + i], d[2 * plane + i]))
        .sum::<f64>()
        / plane as f64;
    img.data_mut()
        .iter_mut()
        .for_each(|v| *v = mean + factor * (*v - mean));
}

/// Separable Gaussian blur with clamped borders; `sigma <= 0` is a no-op.
pub(crate) fn gaussian_blur(img: &mut Tensor, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (h, w) = dims(img);
    let mut tmp = vec![0.0; h * w];
    for ch in img.data_mut().chunks_mut(h * w) {
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| {
                        let xx = (x as isize + k as isize - radius).clamp(0, w as isize - 1);
                        kv * ch[y * w + xx as usize]
                    })
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                ch[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| {
                        let yy = (y as isize + k as isize - radius).clamp(0, h as isize - 1);
                        kv * tmp[yy as usize * w + x]
                    })
                    .sum();
            }
        }
    }
}

/// Unsharp mask: `x + amount·(x − blur(x))`.
pub(crate) fn sharpen(img: &mut Tensor, amount: f64) {
    if amount == 0.0 {
        return;
    }
    let mut blurred = img.clone();
    gaussian_blur(&mut blurred, 1.0);
    img.data_mut()
        .iter_mut()
        .zip(blurred.data())
        .for_each(|(v, b)| *v += amount * (*v - b));
}

/// Quantise to `2^bits` levels; 8 or more bits leaves the image untouched.
pub(crate) fn posterize(img: &mut Tensor, bits: u32) {
    if bits >= 8 {
        return;
    }
    let levels = (1u32 << bits) as f64;
    img.data_mut()
        .iter_mut()
        .for_each(|v| *v = ((*v * levels).floor().min(levels - 1.0)) / (levels - 1.0).max(1.0));
}

/// Invert values strictly above `threshold`.
pub(crate) fn solarize(img: &mut Tensor, threshold: f64) {
    img.data_mut().iter_mut().for_each(|v| {
        if *v > threshold {
            *v = 1.0 - *v;
        }
    });
}

/// Nearest-neighbour rotation about the centre followed by an integer
/// shift; uncovered pixels take `fill`.
pub(crate) fn affine(img: &mut Tensor, angle: f64, dx: isize, dy: isize, fill: f64) {
    if angle == 0.0 && dx == 0 && dy == 0 {
        return;
    }
    let (h, w) = dims(img);
    let (s, c) = angle.sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let src = img.clone();
    let sd = src.data();
    let d = img.data_mut();
    for y in 0..h {
        for x in 0..w {
            let (ux, uy) = ((x as isize - dx) as f64 - cx, (y as isize - dy) as f64 - cy);
            let sx = (c * ux + s * uy + cx).round();
            let sy = (-s * ux + c * uy + cy).round();
            let inside = sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64;
            for ch in 0..3 {
                d[(ch * h + y) * w + x] = if inside {
                    sd[(ch * h + sy as usize) * w + sx as usize]
                } else {
                    fill
                };
            }
        }
    }
}

/// Fill a `side×side` square whose top-left corner is `(x0, y0)`.
pub(crate) fn cutout(img: &mut Tensor, x0: usize, y0: usize, side: usize, fill: f64) {
    let (h, w) = dims(img);
    let d = img.data_mut();
    for ch in 0..3 {
        for y in y0..(y0 + side).min(h) {
            for x in x0..(x0 + side).min(w) {
                d[(ch * h + y) * w + x] = fill;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Tensor {
        let data = (0..3 * 6 * 5).map(|i| (i % 17) as f64 / 16.0).collect();
        Tensor::new(vec![3, 6, 5], data).unwrap()
    }

    #[test]
    fn neutral_parameters_are_identities() {
        let orig = ramp();
        let mut img = orig.clone();
        hue_rotate(&mut img, 0.0);
        saturate(&mut img, 1.0);
        brighten(&mut img, 1.0);
        contrast(&mut img, 1.0);
        gaussian_blur(&mut img, 0.0);
        sharpen(&mut img, 0.0);
        posterize(&mut img, 8);
        solarize(&mut img, 1.0);
        affine(&mut img, 0.0, 0, 0, 0.5);
        cutout(&mut img, 0, 0, 0, 0.5);
        assert_eq!(img, orig);
    }

    #[test]
    fn full_turn_hue_rotation_is_identity() {
        let orig = ramp();
        let mut img = orig.clone();
        hue_rotate(&mut img, std::f64::consts::TAU);
        let err = img
            .data()
            .iter()
            .zip(orig.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        // YIQ matrices are rounded to three decimals.
        assert!(err < 1e-2, "{err}");
    }

    #[test]
    fn blur_preserves_constant_images_and_mass() {
        let mut img = Tensor::full(&[3, 8, 8], 0.4);
        gaussian_blur(&mut img, 1.3);
        assert!(img.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn shift_moves_pixels() {
        let mut img = Tensor::zeros(&[3, 4, 4]);
        img.data_mut()[0] = 1.0;
        affine(&mut img, 0.0, 1, 2, 0.0);
        assert_eq!(img.data()[2 * 4 + 1], 1.0);
        assert_eq!(img.data()[0], 0.0);
    }
}
