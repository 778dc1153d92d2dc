//! PSNR and SSIM with the SR benchmark conventions: metrics run in the
//! 8-bit (0..255) domain, on the BT.601 luma channel by default, with a
//! `shave`-pixel border excluded on every side.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which planes the metric runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricMode {
    /// BT.601 luma: `Y = 65.481 R + 128.553 G + 24.966 B + 16` on [0,1]
    /// inputs, giving values on the 0..255 scale.
    Y,
    /// All three channels jointly, each scaled to 0..255.
    Rgb,
}

impl std::fmt::Display for MetricMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricMode::Y => write!(f, "y"),
            MetricMode::Rgb => write!(f, "rgb"),
        }
    }
}

/// Extract the planes the metric operates on, shaved and in the 0..255
/// domain. Output: one `H x W` plane for Y, three for RGB.
fn metric_planes(img: &Tensor<f32>, shave: usize, mode: MetricMode) -> Result<Vec<Vec<f64>>> {
    let (c, h, w) = img.dims3("metrics")?;
    if c != 3 {
        return Err(Error::shape("metrics", format!("expected 3 channels, got {c}")));
    }
    if h <= 2 * shave || w <= 2 * shave {
        return Err(Error::shape(
            "metrics",
            format!("shave {shave} leaves nothing of {h}x{w}"),
        ));
    }
    let (sh, sw) = (h - 2 * shave, w - 2 * shave);
    let plane = |ci: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(sh * sw);
        for y in 0..sh {
            for x in 0..sw {
                out.push(img.data()[(ci * h + y + shave) * w + x + shave] as f64 * 255.0);
            }
        }
        out
    };
    match mode {
        MetricMode::Rgb => Ok(vec![plane(0), plane(1), plane(2)]),
        MetricMode::Y => {
            let mut out = Vec::with_capacity(sh * sw);
            for y in 0..sh {
                for x in 0..sw {
                    let r = img.data()[(y + shave) * w + x + shave] as f64;
                    let g = img.data()[(h + y + shave) * w + x + shave] as f64;
                    let b = img.data()[(2 * h + y + shave) * w + x + shave] as f64;
                    out.push(65.481 * r + 128.553 * g + 24.966 * b + 16.0);
                }
            }
            Ok(vec![out])
        }
    }
}

fn shaved_extent(img: &Tensor<f32>, shave: usize) -> Result<(usize, usize)> {
    let (_, h, w) = img.dims3("metrics")?;
    Ok((h - 2 * shave, w - 2 * shave))
}

/// Peak signal-to-noise ratio in dB, `10 log10(255^2 / MSE)`; identical
/// images give `f64::INFINITY`.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>, shave: usize, mode: MetricMode) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "psnr",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let pa = metric_planes(a, shave, mode)?;
    let pb = metric_planes(b, shave, mode)?;
    let mut se = 0.0f64;
    let mut n = 0usize;
    for (x, y) in pa.iter().zip(&pb) {
        for (u, v) in x.iter().zip(y) {
            let d = u - v;
            se += d * d;
        }
        n += x.len();
    }
    let mse = se / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_L: f64 = 255.0;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let d2 = (y as f64 - c) * (y as f64 - c) + (x as f64 - c) * (x as f64 - c);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 255, averaged over all fully valid window
/// positions. RGB mode averages the per-channel values.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>, shave: usize, mode: MetricMode) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "ssim",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let pa = metric_planes(a, shave, mode)?;
    let pb = metric_planes(b, shave, mode)?;
    let (h, w) = shaved_extent(a, shave)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("{h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let window = gaussian_window();
    let c1 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
    let c2 = (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L);

    let mut total = 0.0f64;
    for (x_plane, y_plane) in pa.iter().zip(&pb) {
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for oy in 0..=(h - SSIM_WINDOW) {
            for ox in 0..=(w - SSIM_WINDOW) {
                let (mut mx, mut my) = (0.0f64, 0.0f64);
                let (mut sxx, mut syy, mut sxy) = (0.0f64, 0.0f64, 0.0f64);
                for wy in 0..SSIM_WINDOW {
                    for wx in 0..SSIM_WINDOW {
                        let wt = window[wy * SSIM_WINDOW + wx];
                        let xv = x_plane[(oy + wy) * w + ox + wx];
                        let yv = y_plane[(oy + wy) * w + ox + wx];
                        mx += wt * xv;
                        my += wt * yv;
                        sxx += wt * (xv * xv);
                        syy += wt * (yv * yv);
                        sxy += wt * (xv * yv);
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                acc += s;
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    Ok(total / pa.len() as f64)
}

/// Clip to [0, 1] and round to the 8-bit lattice; the evaluation front-end
/// applied before metrics so the in-memory path agrees with saved PNGs.
pub fn quantize(img: &Tensor<f32>) -> Tensor<f32> {
    img.map(|v| crate::data::quantize_u8(v) as f32 / 255.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * h * w)
            .map(|_| (rng.random_range(0..=255u32) as f32) / 255.0)
            .collect();
        Tensor::from_vec(&[3, h, w], data).unwrap()
    }

    #[test]
    fn identical_images_are_infinite_psnr_and_unit_ssim() {
        let img = random_image(24, 24, 1);
        assert!(psnr(&img, &img, 2, MetricMode::Y).unwrap().is_infinite());
        assert_eq!(ssim(&img, &img, 2, MetricMode::Y).unwrap(), 1.0);
        assert_eq!(ssim(&img, &img, 0, MetricMode::Rgb).unwrap(), 1.0);
    }

    #[test]
    fn uniform_difference_psnr_matches_formula() {
        // every channel differs by exactly 16/255: MSE = 16^2 in the 8-bit
        // domain, so PSNR = 10 log10(255^2 / 16^2) = 24.048404 dB
        let a = Tensor::full(&[3, 16, 16], 100.0 / 255.0f32);
        let b = Tensor::full(&[3, 16, 16], 116.0 / 255.0f32);
        let want = 10.0 * (255.0f64 * 255.0 / (16.0 * 16.0)).log10();
        let got = psnr(&a, &b, 0, MetricMode::Rgb).unwrap();
        // f32 cannot hold 100/255 exactly, so allow the representation error
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        assert!((got - 24.048404).abs() < 1e-4);
    }

    /// Scalar reference: PSNR from first principles, plain loops.
    fn psnr_oracle_y(a: &Tensor<f32>, b: &Tensor<f32>, shave: usize) -> f64 {
        let (_, h, w) = a.dims3("o").unwrap();
        let mut se = 0.0f64;
        let mut n = 0;
        for y in shave..h - shave {
            for x in shave..w - shave {
                let ya = 65.481 * a.data()[y * w + x] as f64
                    + 128.553 * a.data()[(h + y) * w + x] as f64
                    + 24.966 * a.data()[(2 * h + y) * w + x] as f64
                    + 16.0;
                let yb = 65.481 * b.data()[y * w + x] as f64
                    + 128.553 * b.data()[(h + y) * w + x] as f64
                    + 24.966 * b.data()[(2 * h + y) * w + x] as f64
                    + 16.0;
                se += (ya - yb) * (ya - yb);
                n += 1;
            }
        }
        10.0 * (255.0f64 * 255.0 / (se / n as f64)).log10()
    }

    #[test]
    fn psnr_matches_scalar_oracle_on_fixed_pairs() {
        for seed in 0..5 {
            let a = random_image(20, 18, seed * 2);
            let b = random_image(20, 18, seed * 2 + 1);
            for shave in [0usize, 2] {
                let got = psnr(&a, &b, shave, MetricMode::Y).unwrap();
                let want = psnr_oracle_y(&a, &b, shave);
                assert!((got - want).abs() < 1e-9, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn known_4x4_pair_value_frozen() {
        // deterministic 4x4 pair evaluated by the scalar oracle
        let a_data: Vec<f32> = (0..48).map(|i| ((i * 5) % 17) as f32 / 16.0).collect();
        let b_data: Vec<f32> = (0..48).map(|i| ((i * 7 + 3) % 19) as f32 / 18.0).collect();
        let a = Tensor::from_vec(&[3, 4, 4], a_data).unwrap();
        let b = Tensor::from_vec(&[3, 4, 4], b_data).unwrap();
        let want = psnr_oracle_y(&a, &b, 0);
        let got = psnr(&a, &b, 0, MetricMode::Y).unwrap();
        assert!((got - want).abs() < 1e-9);
    }

    /// Scalar reference SSIM on the Y plane, literal formula.
    fn ssim_oracle_y(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
        let (_, h, w) = a.dims3("o").unwrap();
        let ya: Vec<f64> = (0..h * w)
            .map(|i| {
                65.481 * a.data()[i] as f64
                    + 128.553 * a.data()[h * w + i] as f64
                    + 24.966 * a.data()[2 * h * w + i] as f64
                    + 16.0
            })
            .collect();
        let yb: Vec<f64> = (0..h * w)
            .map(|i| {
                65.481 * b.data()[i] as f64
                    + 128.553 * b.data()[h * w + i] as f64
                    + 24.966 * b.data()[2 * h * w + i] as f64
                    + 16.0
            })
            .collect();
        let win = gaussian_window();
        let c1 = (0.01 * 255.0f64).powi(2);
        let c2 = (0.03 * 255.0f64).powi(2);
        let mut acc = 0.0;
        let mut count = 0;
        for oy in 0..=(h - 11) {
            for ox in 0..=(w - 11) {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for wy in 0..11 {
                    for wx in 0..11 {
                        let wt = win[wy * 11 + wx];
                        let xv = ya[(oy + wy) * w + ox + wx];
                        let yv = yb[(oy + wy) * w + ox + wx];
                        mx += wt * xv;
                        my += wt * yv;
                        sxx += wt * xv * xv;
                        syy += wt * yv * yv;
                        sxy += wt * xv * yv;
                    }
                }
                acc += ((2.0 * mx * my + c1) * (2.0 * (sxy - mx * my) + c2))
                    / ((mx * mx + my * my + c1) * ((sxx - mx * mx) + (syy - my * my) + c2));
                count += 1;
            }
        }
        acc / count as f64
    }

    #[test]
    fn ssim_matches_scalar_oracle_on_fixed_pairs() {
        for seed in 0..5 {
            let a = random_image(16, 14, 100 + seed);
            let b = random_image(16, 14, 200 + seed);
            let got = ssim(&a, &b, 0, MetricMode::Y).unwrap();
            let want = ssim_oracle_y(&a, &b);
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn inverted_image_scores_far_below_one() {
        let a = random_image(24, 24, 7);
        let inv = a.map(|v| 1.0 - v);
        let s = ssim(&a, &inv, 0, MetricMode::Y).unwrap();
        let want = ssim_oracle_y(&a, &inv);
        assert!((s - want).abs() < 1e-9);
        assert!(s < 0.2, "inverting a high-contrast image must crater SSIM: {s}");
    }

    #[test]
    fn constant_pair_reduces_to_luminance_term() {
        // sigma terms vanish for constant planes, leaving
        // (2 mx my + C1) / (mx^2 + my^2 + C1)
        let a = Tensor::full(&[3, 16, 16], 0.4f32);
        let b = Tensor::full(&[3, 16, 16], 0.4f32 + 10.0 / 255.0);
        let got = ssim(&a, &b, 0, MetricMode::Rgb).unwrap();
        let mx = 0.4f64 * 255.0;
        let my = (0.4f64 + 10.0 / 255.0) * 255.0;
        let c1 = (0.01 * 255.0f64).powi(2);
        let want = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn metrics_are_symmetric() {
        let a = random_image(18, 18, 31);
        let b = random_image(18, 18, 32);
        assert_eq!(
            psnr(&a, &b, 1, MetricMode::Y).unwrap(),
            psnr(&b, &a, 1, MetricMode::Y).unwrap()
        );
        assert_eq!(
            ssim(&a, &b, 0, MetricMode::Y).unwrap(),
            ssim(&b, &a, 0, MetricMode::Y).unwrap()
        );
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let a = random_image(20, 20, 41);
        let mut last = f64::INFINITY;
        for amp in [0.01f32, 0.03, 0.08, 0.2] {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let data: Vec<f32> = a
                .iter()
                .map(|v| (v + rng.random_range(-amp..amp)).clamp(0.0, 1.0))
                .collect();
            let noisy = Tensor::from_vec(a.shape(), data).unwrap();
            let p = psnr(&a, &noisy, 0, MetricMode::Y).unwrap();
            assert!(p < last, "amp {amp}: {p} !< {last}");
            last = p;
        }
    }

    #[test]
    fn errors_on_bad_arguments() {
        let a = random_image(12, 12, 51);
        let b = random_image(12, 13, 52);
        assert!(psnr(&a, &b, 0, MetricMode::Y).is_err());
        assert!(psnr(&a, &a, 6, MetricMode::Y).is_err()); // shave too large
        assert!(ssim(&a, &a, 1, MetricMode::Y).is_err()); // 10 < window
    }

    #[test]
    fn quantize_matches_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        // values straddling [0,1] to exercise clipping
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let data: Vec<f32> = (0..3 * 8 * 8).map(|_| rng.random_range(-0.2..1.2)).collect();
        let img = Tensor::from_vec(&[3, 8, 8], data).unwrap();
        let q = quantize(&img);
        let path = dir.path().join("q.png");
        crate::data::save_png(&img, &path).unwrap();
        let loaded = crate::data::load_png(&path).unwrap();
        assert_eq!(q.data(), loaded.data(), "in-memory and PNG paths must agree bit-for-bit");
    }
}
