//! Forward numeric kernels over [`Tensor`].
//!
//! Everything here is a pure function: identical inputs give bit-identical
//! outputs, and every result is checked finite before it is returned.
//! Convolution is cross-correlation (no kernel flip) with zero padding,
//! layout `[batch, channel, height, width]`.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output extent of a convolution along one axis: `(n + 2p - k) / stride + 1`.
fn out_extent(op: &'static str, n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let span = (n + 2 * pad) as isize - k as isize;
    if span < 0 {
        return Err(Error::shape(
            op,
            format!("kernel {k} larger than padded input {}", n + 2 * pad),
        ));
    }
    if span as usize % stride != 0 {
        return Err(Error::shape(
            op,
            format!("non-integer output extent: ({n} + 2*{pad} - {k}) not divisible by {stride}"),
        ));
    }
    Ok(span as usize / stride + 1)
}

/// 2-D cross-correlation with zero padding.
///
/// `input` is `[B, Cin, H, W]`, `weight` is `[Cout, Cin, kh, kw]` with odd
/// kernel extents, `bias` is `[Cout]`.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    zero_pad: usize,
) -> Result<Tensor<T>> {
    let (b, cin, h, w) = input.dims4("conv2d")?;
    let (cout, wcin, kh, kw) = weight.dims4("conv2d")?;
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels but weight expects {wcin}"),
        ));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?}, expected [{cout}]", bias.shape()),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be >= 1"));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel extents must be odd, got {kh}x{kw}"),
        ));
    }
    let oh = out_extent("conv2d", h, kh, stride, zero_pad)?;
    let ow = out_extent("conv2d", w, kw, stride, zero_pad)?;

    let mut out = vec![T::ZERO; b * cout * oh * ow];
    let in_data = input.data();
    let w_data = weight.data();
    let b_data = bias.data();

    for bi in 0..b {
        for co in 0..cout {
            let out_plane = &mut out[(bi * cout + co) * oh * ow..][..oh * ow];
            out_plane.fill(b_data[co]);
            for ci in 0..cin {
                let in_plane = &in_data[(bi * cin + ci) * h * w..][..h * w];
                let k_plane = &w_data[(co * cin + ci) * kh * kw..][..kh * kw];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = k_plane[ky * kw + kx];
                        accumulate_shifted(
                            out_plane, in_plane, wv, oh, ow, h, w, ky, kx, stride, zero_pad,
                        );
                    }
                }
            }
        }
    }

    let t = Tensor::from_raw(vec![b, cout, oh, ow], out);
    t.ensure_finite("conv2d")?;
    Ok(t)
}

/// out[oy][ox] += wv * in[oy*stride + ky - pad][ox*stride + kx - pad]
/// over the in-bounds part of the output plane.
#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate_shifted<T: Element>(
    out_plane: &mut [T],
    in_plane: &[T],
    wv: T,
    oh: usize,
    ow: usize,
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
    stride: usize,
    pad: usize,
) {
    // oy*stride + ky - pad must land in [0, h); likewise for x.
    let oy_lo = pad.saturating_sub(ky).div_ceil(stride);
    let ox_lo = pad.saturating_sub(kx).div_ceil(stride);
    if oy_lo >= oh || ox_lo >= ow || h + pad <= ky || w + pad <= kx {
        return;
    }
    let oy_hi = ((h + pad - ky - 1) / stride).min(oh - 1);
    let ox_hi = ((w + pad - kx - 1) / stride).min(ow - 1);
    if oy_lo > oy_hi || ox_lo > ox_hi {
        return;
    }
    let n = ox_hi - ox_lo + 1;
    for oy in oy_lo..=oy_hi {
        let iy = oy * stride + ky - pad;
        let ix0 = ox_lo * stride + kx - pad;
        let dst = &mut out_plane[oy * ow + ox_lo..][..n];
        if stride == 1 {
            let src = &in_plane[iy * w + ix0..][..n];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wv * *s;
            }
        } else {
            let src = &in_plane[iy * w..][..w];
            for (i, d) in dst.iter_mut().enumerate() {
                *d += wv * src[ix0 + i * stride];
            }
        }
    }
}

/// Elementwise `max(x, 0)`.
pub fn relu<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let t = x.map(|v| v.maximum(T::ZERO));
    t.ensure_finite("relu")?;
    Ok(t)
}

/// Elementwise logistic function `1 / (1 + exp(-x))`, values in (0, 1).
pub fn sigmoid<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let t = x.map(sigmoid_scalar);
    t.ensure_finite("sigmoid")?;
    Ok(t)
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Element>(v: T) -> T {
    T::ONE / (T::ONE + (-v).exp())
}

/// Sub-pixel rearrangement: `[B, C*r^2, H, W] -> [B, C, rH, rW]`.
///
/// Input channel `c*r^2 + dy*r + dx` supplies output pixel `(r*h + dy, r*w + dx)`
/// of channel `c`; the map is a bijection on elements.
pub fn pixel_shuffle<T: Element>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (b, c_in, h, w) = x.dims4("pixel_shuffle")?;
    if r == 0 {
        return Err(Error::invalid("pixel_shuffle", "factor must be >= 1"));
    }
    if c_in % (r * r) != 0 {
        return Err(Error::shape(
            "pixel_shuffle",
            format!("{c_in} channels not divisible by {r}^2"),
        ));
    }
    let c = c_in / (r * r);
    let (ho, wo) = (h * r, w * r);
    let mut out = vec![T::ZERO; b * c * ho * wo];
    let src = x.data();
    for bi in 0..b {
        for co in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let ci = co * r * r + dy * r + dx;
                    let in_plane = &src[(bi * c_in + ci) * h * w..][..h * w];
                    let out_plane = &mut out[(bi * c + co) * ho * wo..][..ho * wo];
                    for y in 0..h {
                        for x_ in 0..w {
                            out_plane[(y * r + dy) * wo + (x_ * r + dx)] = in_plane[y * w + x_];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![b, c, ho, wo], out))
}

/// Inverse of [`pixel_shuffle`]; used by the backward pass.
pub(crate) fn pixel_unshuffle<T: Element>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (b, c, ho, wo) = x.dims4("pixel_unshuffle")?;
    if ho % r != 0 || wo % r != 0 {
        return Err(Error::shape(
            "pixel_unshuffle",
            format!("extents {ho}x{wo} not divisible by {r}"),
        ));
    }
    let (h, w) = (ho / r, wo / r);
    let c_out = c * r * r;
    let mut out = vec![T::ZERO; b * c_out * h * w];
    let src = x.data();
    for bi in 0..b {
        for co in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let ci = co * r * r + dy * r + dx;
                    let in_plane = &src[(bi * c + co) * ho * wo..][..ho * wo];
                    let out_plane = &mut out[(bi * c_out + ci) * h * w..][..h * w];
                    for y in 0..h {
                        for x_ in 0..w {
                            out_plane[y * w + x_] = in_plane[(y * r + dy) * wo + (x_ * r + dx)];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![b, c_out, h, w], out))
}

fn binary_shape_check<T: Element>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Elementwise sum; shapes must match exactly.
pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary_shape_check("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    let t = Tensor::from_raw(a.shape().to_vec(), data);
    t.ensure_finite("add")?;
    Ok(t)
}

/// Elementwise product. Shapes must match exactly, except that either
/// operand may be a single-element tensor acting as a uniform gain (the
/// one broadcast the threshold-map construction needs).
pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let t = if a.is_scalar() && !b.is_scalar() {
        let s = a.data()[0];
        b.map(|v| v * s)
    } else if b.is_scalar() && !a.is_scalar() {
        let s = b.data()[0];
        a.map(|v| v * s)
    } else {
        binary_shape_check("mul", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        Tensor::from_raw(a.shape().to_vec(), data)
    };
    t.ensure_finite("mul")?;
    Ok(t)
}

/// Concatenate two rank-4 tensors along the channel axis.
pub fn concat_channel<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ba, ca, ha, wa) = a.dims4("concat_channel")?;
    let (bb, cb, hb, wb) = b.dims4("concat_channel")?;
    if (ba, ha, wa) != (bb, hb, wb) {
        return Err(Error::shape(
            "concat_channel",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    let plane = ha * wa;
    for bi in 0..ba {
        out.extend_from_slice(&a.data()[bi * ca * plane..(bi + 1) * ca * plane]);
        out.extend_from_slice(&b.data()[bi * cb * plane..(bi + 1) * cb * plane]);
    }
    Ok(Tensor::from_raw(vec![ba, ca + cb, ha, wa], out))
}

/// Soft threshold `sign(x) * max(|x| - theta, 0)`, the proximal operator of
/// `theta * ||.||_1`. `theta` must be elementwise nonnegative and either
/// match `x`'s shape exactly or be a single-element tensor.
pub fn soft_threshold<T: Element>(x: &Tensor<T>, theta: &Tensor<T>) -> Result<Tensor<T>> {
    if theta.data().iter().any(|&t| t < T::ZERO) {
        return Err(Error::invalid("soft_threshold", "negative threshold"));
    }
    let t = if theta.is_scalar() {
        let th = theta.data()[0];
        x.map(|v| soft_threshold_scalar(v, th))
    } else {
        binary_shape_check("soft_threshold", x, theta)?;
        let data = x
            .data()
            .iter()
            .zip(theta.data())
            .map(|(&v, &th)| soft_threshold_scalar(v, th))
            .collect();
        Tensor::from_raw(x.shape().to_vec(), data)
    };
    t.ensure_finite("soft_threshold")?;
    Ok(t)
}

#[inline]
pub(crate) fn soft_threshold_scalar<T: Element>(v: T, theta: T) -> T {
    v.sign() * (v.abs() - theta).maximum(T::ZERO)
}
