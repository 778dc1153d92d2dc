//! Image I/O, LR/HR pair synthesis, and deterministic patch sampling.
//!
//! Dataset layout on disk: `<root>/HR/*.png` holds the ground-truth images;
//! `<root>/LRx{r}/*.png`, when present, is used as the degraded input,
//! otherwise the LR side is computed on the fly by antialiased bicubic
//! downscaling. PNG (8-bit RGB) is the only image format.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bicubic::bicubic_resize;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Load an 8-bit RGB PNG as a `[3, H, W]` tensor with values `v / 255`.
pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let dynimg = image::open(path)?;
    let rgb = match dynimg {
        image::DynamicImage::ImageRgb8(img) => img,
        other => {
            return Err(Error::Parse(format!(
                "{}: expected 8-bit RGB PNG, got {other:?}",
                path.display()
            )))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[(c * h + y) * w + x] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Quantize one value to the 8-bit lattice: clip to [0, 1], scale by 255,
/// round half away from zero.
#[inline]
pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Save a `[3, H, W]` tensor as an 8-bit RGB PNG, clipping to [0, 1].
pub fn save_png(tensor: &Tensor<f32>, path: &Path) -> Result<()> {
    let (c, h, w) = tensor.dims3("save_png")?;
    if c != 3 {
        return Err(Error::shape(
            "save_png",
            format!("expected 3 channels, got {c}"),
        ));
    }
    let mut img = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let (x, y) = (x as usize, y as usize);
        for ci in 0..3 {
            px.0[ci] = quantize_u8(tensor.data()[(ci * h + y) * w + x]);
        }
    }
    img.save(path)?;
    Ok(())
}

/// Aligned LR/HR supervision pair; HR extents are exactly `scale` times
/// the LR extents.
#[derive(Clone)]
pub struct ImagePair {
    pub hr: Tensor<f32>,
    pub lr: Tensor<f32>,
    pub scale: usize,
    pub source: String,
}

/// Center-crop so both extents are multiples of `r`.
pub fn center_crop_to_multiple(img: &Tensor<f32>, r: usize) -> Result<Tensor<f32>> {
    let (_c, h, w) = img.dims3("center_crop")?;
    let (ch, cw) = (h - h % r, w - w % r);
    if ch == 0 || cw == 0 {
        return Err(Error::shape(
            "center_crop",
            format!("{h}x{w} too small for scale {r}"),
        ));
    }
    let (oy, ox) = ((h - ch) / 2, (w - cw) / 2);
    Ok(crop(img, oy, ox, ch, cw))
}

/// Cut `[3, h, w]` at offset `(y, x)`; bounds are the caller's problem.
pub(crate) fn crop(img: &Tensor<f32>, y: usize, x: usize, h: usize, w: usize) -> Tensor<f32> {
    let (c, ih, iw) = img.dims3("crop").expect("crop wants rank 3");
    debug_assert!(y + h <= ih && x + w <= iw);
    let mut out = vec![0.0f32; c * h * w];
    for ci in 0..c {
        for yy in 0..h {
            let src = &img.data()[(ci * ih + y + yy) * iw + x..][..w];
            out[(ci * h + yy) * w..][..w].copy_from_slice(src);
        }
    }
    Tensor::from_raw(vec![c, h, w], out)
}

/// Build a supervision pair: crop the HR to a multiple of `scale`, degrade
/// by antialiased bicubic, clamp the LR into [0, 1].
pub fn make_pair(hr: Tensor<f32>, scale: usize, source: impl Into<String>) -> Result<ImagePair> {
    if scale == 0 {
        return Err(Error::invalid("make_pair", "scale must be >= 1"));
    }
    let hr = center_crop_to_multiple(&hr, scale)?;
    let (_, h, w) = hr.dims3("make_pair")?;
    let lr = bicubic_resize(&hr, h / scale, w / scale)?;
    let lr = lr.map(|v| v.clamp(0.0, 1.0));
    Ok(ImagePair {
        hr,
        lr,
        scale,
        source: source.into(),
    })
}

/// Load every `<root>/HR/*.png` (sorted by file name) and pair it with
/// `<root>/LRx{scale}/<name>` when that file exists, else with a freshly
/// degraded LR.
pub fn load_dataset(root: &Path, scale: usize) -> Result<Vec<ImagePair>> {
    let hr_dir = root.join("HR");
    let mut names: Vec<PathBuf> = std::fs::read_dir(&hr_dir)
        .map_err(|e| Error::Parse(format!("{}: {e}", hr_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let lr_dir = root.join(format!("LRx{scale}"));
    let mut pairs = Vec::with_capacity(names.len());
    for path in names {
        let hr = load_png(&path)?;
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        let cached = lr_dir.join(&name);
        let mut pair = make_pair(hr, scale, name)?;
        if cached.exists() {
            let lr = load_png(&cached)?;
            let (_, h, w) = pair.hr.dims3("load_dataset")?;
            if lr.shape() != [3, h / scale, w / scale] {
                return Err(Error::shape(
                    "load_dataset",
                    format!("{}: cached LR shape {:?}", cached.display(), lr.shape()),
                ));
            }
            pair.lr = lr;
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

/// Rotate `[3, h, w]` by 90 degrees counterclockwise `k` times.
pub(crate) fn rot90(img: &Tensor<f32>, k: usize) -> Tensor<f32> {
    let mut out = img.clone();
    for _ in 0..k % 4 {
        let (c, h, w) = out.dims3("rot90").expect("rank 3");
        let mut next = vec![0.0f32; c * h * w];
        // (y, x) -> (w-1-x, y)
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    next[(ci * w + (w - 1 - x)) * h + y] = out.data()[(ci * h + y) * w + x];
                }
            }
        }
        out = Tensor::from_raw(vec![c, w, h], next);
    }
    out
}

/// Mirror `[3, h, w]` horizontally.
pub(crate) fn hflip(img: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = img.dims3("hflip").expect("rank 3");
    let mut out = vec![0.0f32; c * h * w];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ci * h + y) * w + (w - 1 - x)] = img.data()[(ci * h + y) * w + x];
            }
        }
    }
    Tensor::from_raw(vec![c, h, w], out)
}

/// Deterministic patch sampler. The batch drawn at a given step is a pure
/// function of `(seed, step, corpus)`: image order follows a per-epoch
/// permutation of the corpus, patch offsets and augmentation come from a
/// per-step ChaCha stream, so any step can be replayed bit-for-bit.
#[derive(Debug, Clone)]
pub struct PatchSampler {
    /// LR patch extent.
    pub patch: usize,
    pub seed: u64,
    /// Apply the eight flip/rotation variants.
    pub augment: bool,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(epoch)));
    let mut perm: Vec<usize> = (0..n).collect();
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

impl PatchSampler {
    pub fn new(patch: usize, seed: u64, augment: bool) -> Self {
        PatchSampler {
            patch,
            seed,
            augment,
        }
    }

    /// Cut the batch for step `step` (0-based): `[B, 3, p, p]` LR patches
    /// and the aligned `[B, 3, rp, rp]` HR patches.
    pub fn batch_at(
        &self,
        pairs: &[ImagePair],
        batch: usize,
        step: u64,
    ) -> Result<(Tensor<f32>, Tensor<f32>)> {
        if pairs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if batch == 0 {
            return Err(Error::invalid("batch_at", "batch must be >= 1"));
        }
        let r = pairs[0].scale;
        let p = self.patch;
        let n = pairs.len() as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.seed) ^ splitmix64(step + 1));

        let mut lr_out = Vec::with_capacity(batch * 3 * p * p);
        let mut hr_out = Vec::with_capacity(batch * 3 * r * p * r * p);
        for i in 0..batch {
            let counter = step * batch as u64 + i as u64;
            let perm = permutation(self.seed, counter / n, pairs.len());
            let pair = &pairs[perm[(counter % n) as usize]];
            let (_, lh, lw) = pair.lr.dims3("batch_at")?;
            if lh < p || lw < p {
                return Err(Error::shape(
                    "batch_at",
                    format!("{}: LR {lh}x{lw} smaller than patch {p}", pair.source),
                ));
            }
            let y = rng.random_range(0..=(lh - p));
            let x = rng.random_range(0..=(lw - p));
            let mut lr = crop(&pair.lr, y, x, p, p);
            let mut hr = crop(&pair.hr, r * y, r * x, r * p, r * p);
            if self.augment {
                let aug = rng.random_range(0..8u8);
                let (k, flip) = ((aug % 4) as usize, aug >= 4);
                if flip {
                    lr = hflip(&lr);
                    hr = hflip(&hr);
                }
                lr = rot90(&lr, k);
                hr = rot90(&hr, k);
            }
            lr_out.extend_from_slice(lr.data());
            hr_out.extend_from_slice(hr.data());
        }
        Ok((
            Tensor::from_raw(vec![batch, 3, p, p], lr_out),
            Tensor::from_raw(vec![batch, 3, r * p, r * p], hr_out),
        ))
    }
}
