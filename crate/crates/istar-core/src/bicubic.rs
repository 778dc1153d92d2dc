//! Separable cubic resampling with the benchmark-chain conventions: the
//! Keys kernel with a = -0.5, center-aligned source mapping, kernel-width
//! scaling on downscale (antialiasing), weight normalization, and edge
//! replication at the borders.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Keys cubic kernel, a = -0.5.
pub fn cubic_kernel(t: f64) -> f64 {
    const A: f64 = -0.5;
    let x = t.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Contribution table for one axis: for every output index, the first
/// source tap and the normalized weights. Taps may point outside the
/// source; the caller clamps (edge replication).
fn axis_weights(in_len: usize, out_len: usize) -> Vec<(isize, Vec<f64>)> {
    let scale = out_len as f64 / in_len as f64;
    // on downscale the kernel stretches by 1/scale to antialias
    let kscale = scale.min(1.0);
    let support = 2.0 / kscale;
    let taps = (2.0 * support).ceil() as isize + 2;
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) / scale - 0.5;
            let left = (center - support).floor() as isize + 1;
            let mut weights: Vec<f64> = (0..taps)
                .map(|j| cubic_kernel(kscale * (center - (left + j) as f64)))
                .collect();
            let sum: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= sum;
            }
            (left, weights)
        })
        .collect()
}

/// Resize a `[C, H, W]` image to `out_h x out_w`. Values are interpolated
/// in f64 and cast back at the end; the output is not clamped, so cubic
/// overshoot can leave [0, 1].
pub fn bicubic_resize<T: Element>(
    img: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let (c, h, w) = img.dims3("bicubic_resize")?;
    if h < 4 || w < 4 {
        return Err(Error::invalid(
            "bicubic_resize",
            format!("input {h}x{w} too small, need at least 4x4"),
        ));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bicubic_resize", "zero output extent"));
    }

    let rows = axis_weights(h, out_h);
    let cols = axis_weights(w, out_w);

    // pass 1: resize height, f64 accumulation
    let mut tmp = vec![0.0f64; c * out_h * w];
    for ci in 0..c {
        let plane = &img.data()[ci * h * w..][..h * w];
        for (oy, (left, weights)) in rows.iter().enumerate() {
            let dst = &mut tmp[(ci * out_h + oy) * w..][..w];
            for (j, &wt) in weights.iter().enumerate() {
                let iy = (left + j as isize).clamp(0, h as isize - 1) as usize;
                let src = &plane[iy * w..][..w];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wt * s.to_f64();
                }
            }
        }
    }

    // pass 2: resize width
    let mut out = vec![T::ZERO; c * out_h * out_w];
    for ci in 0..c {
        for oy in 0..out_h {
            let src = &tmp[(ci * out_h + oy) * w..][..w];
            let dst = &mut out[(ci * out_h + oy) * out_w..][..out_w];
            for (ox, (left, weights)) in cols.iter().enumerate() {
                let mut acc = 0.0f64;
                for (j, &wt) in weights.iter().enumerate() {
                    let ix = (left + j as isize).clamp(0, w as isize - 1) as usize;
                    acc += wt * src[ix];
                }
                dst[ox] = T::from_f64(acc);
            }
        }
    }

    let t = Tensor::from_raw(vec![c, out_h, out_w], out);
    t.ensure_finite("bicubic_resize")?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_basics() {
        assert_eq!(cubic_kernel(0.0), 1.0);
        assert_eq!(cubic_kernel(1.0), 0.0);
        assert_eq!(cubic_kernel(2.0), 0.0);
        assert_eq!(cubic_kernel(2.5), 0.0);
        assert_eq!(cubic_kernel(-0.5), cubic_kernel(0.5));
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Tensor::full(&[3, 8, 10], 0.37f64);
        for (oh, ow) in [(16, 20), (4, 5), (7, 13), (8, 10)] {
            let out = bicubic_resize(&img, oh, ow).unwrap();
            assert_eq!(out.shape(), &[3, oh, ow]);
            for v in out.iter() {
                assert!((v - 0.37).abs() < 1e-12, "partition of unity violated: {v}");
            }
        }
    }

    #[test]
    fn linear_ramp_reproduced_in_interior() {
        // cubic interpolation reproduces linear polynomials exactly away
        // from the replicated borders
        let (h, w) = (10usize, 12usize);
        let ramp = |y: f64, x: f64| 0.03 * x + 0.05 * y + 0.1;
        let data: Vec<f64> = (0..h * w)
            .map(|i| ramp((i / w) as f64, (i % w) as f64))
            .collect();
        let img = Tensor::from_vec(&[1, h, w], data).unwrap();
        let (oh, ow) = (2 * h, 2 * w);
        let out = bicubic_resize(&img, oh, ow).unwrap();
        for oy in 0..oh {
            let sy = (oy as f64 + 0.5) / 2.0 - 0.5;
            if sy.floor() < 1.0 || sy.floor() + 2.0 > (h - 1) as f64 {
                continue;
            }
            for ox in 0..ow {
                let sx = (ox as f64 + 0.5) / 2.0 - 0.5;
                if sx.floor() < 1.0 || sx.floor() + 2.0 > (w - 1) as f64 {
                    continue;
                }
                let want = ramp(sy, sx);
                let got = out.data()[oy * ow + ox];
                assert!(
                    (got - want).abs() < 1e-12,
                    "at ({oy},{ox}): {got} vs {want}"
                );
            }
        }
    }

    /// Direct, non-separable evaluation of the same antialiased formula:
    /// for every output pixel loop over both tap axes, recompute weights
    /// from the kernel, normalize, clamp.
    fn resize_oracle(img: &Tensor<f64>, out_h: usize, out_w: usize) -> Tensor<f64> {
        let (c, h, w) = img.dims3("oracle").unwrap();
        let sy = out_h as f64 / h as f64;
        let sx = out_w as f64 / w as f64;
        let ky = sy.min(1.0);
        let kx = sx.min(1.0);
        let sup_y = 2.0 / ky;
        let sup_x = 2.0 / kx;
        let taps_y = (2.0 * sup_y).ceil() as isize + 2;
        let taps_x = (2.0 * sup_x).ceil() as isize + 2;
        let mut out = vec![0.0; c * out_h * out_w];
        for ci in 0..c {
            for oy in 0..out_h {
                let cy = (oy as f64 + 0.5) / sy - 0.5;
                let ly = (cy - sup_y).floor() as isize + 1;
                for ox in 0..out_w {
                    let cx = (ox as f64 + 0.5) / sx - 0.5;
                    let lx = (cx - sup_x).floor() as isize + 1;
                    let mut acc = 0.0;
                    let mut wsum = 0.0;
                    for jy in 0..taps_y {
                        let wy = cubic_kernel(ky * (cy - (ly + jy) as f64));
                        let iy = (ly + jy).clamp(0, h as isize - 1) as usize;
                        for jx in 0..taps_x {
                            let wx = cubic_kernel(kx * (cx - (lx + jx) as f64));
                            let ix = (lx + jx).clamp(0, w as isize - 1) as usize;
                            acc += wy * wx * img.data()[(ci * h + iy) * w + ix];
                            wsum += wy * wx;
                        }
                    }
                    out[(ci * out_h + oy) * out_w + ox] = acc / wsum;
                }
            }
        }
        Tensor::from_vec(&[c, out_h, out_w], out).unwrap()
    }

    #[test]
    fn downscale_matches_direct_oracle() {
        // 8x8 known pattern halved, plus an asymmetric case
        let data: Vec<f64> = (0..64)
            .map(|i| {
                let (y, x) = (i / 8, i % 8);
                (((y * 3 + x * 5) % 7) as f64) / 7.0
            })
            .collect();
        let img = Tensor::from_vec(&[1, 8, 8], data).unwrap();
        for (oh, ow) in [(4, 4), (4, 6), (3, 5), (16, 16)] {
            let got = bicubic_resize(&img, oh, ow).unwrap();
            let want = resize_oracle(&img, oh, ow);
            for (g, w) in got.iter().zip(want.iter()) {
                assert!((g - w).abs() < 1e-9, "{g} vs {w} at {oh}x{ow}");
            }
        }
    }

    #[test]
    fn rejects_degenerate_extents() {
        let img = Tensor::full(&[1, 3, 8], 0.5f32);
        assert!(bicubic_resize(&img, 6, 16).is_err());
        let img = Tensor::full(&[1, 8, 8], 0.5f32);
        assert!(bicubic_resize(&img, 0, 4).is_err());
    }
}
