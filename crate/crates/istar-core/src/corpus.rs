//! Offline mini-corpus generator: a folder of synthetic PNG textures
//! (gradients, checkerboards, stripes, interference patterns, value noise,
//! blobs, rings) with enough mid-frequency structure to train against.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bicubic::bicubic_resize;
use crate::data::save_png;
use crate::error::Result;
use crate::tensor::Tensor;

fn fill(h: usize, w: usize, f: impl Fn(usize, f64, f64) -> f64) -> Tensor<f32> {
    let mut data = vec![0.0f32; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let v = f(c, y as f64, x as f64);
                data[(c * h + y) * w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::from_raw(vec![3, h, w], data)
}

fn soft_edge(s: f64, sharpness: f64) -> f64 {
    0.5 + 0.5 * (sharpness * s).tanh()
}

fn stripes(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let theta: f64 = rng.random_range(0.0..PI);
    let lambda: f64 = rng.random_range(5.0..9.0);
    let phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.8));
    let sharp: f64 = rng.random_range(3.0..8.0);
    fill(h, w, move |c, y, x| {
        let t = (x * theta.cos() + y * theta.sin()) * 2.0 * PI / lambda + phase[c];
        0.12 + 0.76 * soft_edge(t.sin(), sharp)
    })
}

fn blend(a: &Tensor<f32>, b: &Tensor<f32>, wa: f32) -> Tensor<f32> {
    let data: Vec<f32> = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (wa * x + (1.0 - wa) * y).clamp(0.0, 1.0))
        .collect();
    Tensor::from_raw(a.shape().to_vec(), data)
}

/// One synthetic `[3, h, w]` texture; `kind` cycles through eight families.
/// Every family carries fine structure near the x2 Nyquist limit, where
/// antialiased downscaling destroys detail a learned prior can put back.
pub fn make_image(kind: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(kind as u64));
    match kind % 8 {
        0 => {
            // color gradient under a stripe layer
            let a: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.8..0.8));
            let b: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.8..0.8));
            let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
            let grad = fill(h, w, |c, y, x| c0[c] + a[c] * x / w as f64 + b[c] * y / h as f64);
            let over = stripes(h, w, &mut rng);
            blend(&grad, &over, 0.6)
        }
        1 => {
            // fine checkerboard
            let p = *[4usize, 5, 6].get(rng.random_range(0..3)).unwrap();
            let lo: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.3));
            let hi: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.7..1.0));
            fill(h, w, move |c, y, x| {
                let cell = ((y as usize / p) + (x as usize / p)) % 2;
                if cell == 0 {
                    lo[c]
                } else {
                    hi[c]
                }
            })
        }
        2 => stripes(h, w, &mut rng),
        3 => {
            // interference of three sinusoids
            let mut waves = Vec::new();
            for _ in 0..3 {
                waves.push((
                    rng.random_range(0.0..PI),
                    rng.random_range(4.5..8.0),
                    rng.random_range(0.0..2.0 * PI),
                ));
            }
            let shift: [f64; 3] = std::array::from_fn(|i| i as f64 * rng.random_range(0.0..0.6));
            fill(h, w, move |c, y, x| {
                let mut v = 0.0;
                for &(th, lam, ph) in &waves {
                    v += ((x * th.cos() + y * th.sin()) * 2.0 * PI / lam + ph + shift[c]).sin();
                }
                0.5 + v / 6.0
            })
        }
        4 => {
            // two octaves of value noise, upsampled with the same bicubic,
            // plus a stripe layer so every patch has recoverable structure
            let coarse = |cells_y: usize, cells_x: usize, rng: &mut ChaCha8Rng| {
                let data: Vec<f32> = (0..3 * cells_y * cells_x)
                    .map(|_| rng.random_range(0.0..1.0))
                    .collect();
                Tensor::from_raw(vec![3, cells_y, cells_x], data)
            };
            let base = coarse((h / 10).max(4), (w / 10).max(4), &mut rng);
            let detail = coarse((h / 5).max(4), (w / 5).max(4), &mut rng);
            let base = bicubic_resize(&base, h, w).expect("noise upsample");
            let detail = bicubic_resize(&detail, h, w).expect("noise upsample");
            let noise = blend(&base, &detail, 0.7);
            let over = stripes(h, w, &mut rng);
            blend(&noise, &over, 0.65)
        }
        5 => {
            // soft blobs under a stripe layer
            let mut blobs = Vec::new();
            for _ in 0..rng.random_range(8..15) {
                blobs.push((
                    rng.random_range(0.0..h as f64),
                    rng.random_range(0.0..w as f64),
                    rng.random_range(2.5..7.0),
                    [
                        rng.random_range(-0.6..0.6),
                        rng.random_range(-0.6..0.6),
                        rng.random_range(-0.6..0.6),
                    ],
                ));
            }
            let base: f64 = rng.random_range(0.35..0.65);
            let field = fill(h, w, move |c, y, x| {
                let mut v = base;
                for &(cy, cx, sigma, amp) in &blobs {
                    let d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                    v += amp[c] * (-d2 / (2.0 * sigma * sigma)).exp();
                }
                v
            });
            let over = stripes(h, w, &mut rng);
            blend(&field, &over, 0.65)
        }
        6 => {
            // concentric rings
            let cy: f64 = rng.random_range(0.2..0.8) * h as f64;
            let cx: f64 = rng.random_range(0.2..0.8) * w as f64;
            let lambda: f64 = rng.random_range(6.0..12.0);
            let sharp: f64 = rng.random_range(2.0..6.0);
            let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.7..1.0));
            fill(h, w, move |c, y, x| {
                let r = ((y - cy) * (y - cy) + (x - cx) * (x - cx)).sqrt();
                tint[c] * (0.12 + 0.76 * soft_edge((2.0 * PI * r / lambda).sin(), sharp))
            })
        }
        _ => {
            // stripes over value noise
            let under = make_image(4, h, w, seed ^ 0xABCD);
            let over = make_image(2, h, w, seed ^ 0x1234);
            blend(&under, &over, 0.5)
        }
    }
}

/// Write `count` textures to `<dir>/HR/img_NN.png`. Extents vary between
/// 96 and 160 so the LR side stays comfortably larger than the training
/// patch at x2.
pub fn generate_corpus(dir: &Path, count: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let hr_dir = dir.join("HR");
    std::fs::create_dir_all(&hr_dir)?;
    let sizes = [
        (128usize, 128usize),
        (96, 144),
        (144, 96),
        (160, 112),
        (112, 160),
        (128, 96),
        (96, 128),
        (160, 160),
    ];
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let (h, w) = sizes[i % sizes.len()];
        let img = make_image(i, h, w, seed.wrapping_add(i as u64 * 101));
        let path = hr_dir.join(format!("img_{i:02}.png"));
        save_png(&img, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn images_are_in_range_and_deterministic() {
        for kind in 0..8 {
            let a = make_image(kind, 40, 48, 7);
            let b = make_image(kind, 40, 48, 7);
            assert_eq!(a.shape(), &[3, 40, 48]);
            assert_eq!(a.data(), b.data());
            assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let c = make_image(1, 40, 48, 8);
        assert_ne!(make_image(1, 40, 48, 7).data(), c.data());
    }

    #[test]
    fn corpus_generation_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let paths = generate_corpus(dir.path(), 10, 3).unwrap();
        assert_eq!(paths.len(), 10);
        for p in &paths {
            assert!(p.exists());
        }
        // regeneration is byte-identical
        let dir2 = tempfile::tempdir().unwrap();
        generate_corpus(dir2.path(), 10, 3).unwrap();
        for i in 0..10 {
            let a = std::fs::read(dir.path().join(format!("HR/img_{i:02}.png"))).unwrap();
            let b = std::fs::read(dir2.path().join(format!("HR/img_{i:02}.png"))).unwrap();
            assert_eq!(a, b);
        }
    }
}
