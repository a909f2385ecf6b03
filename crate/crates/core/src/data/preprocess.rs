use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ensure_same_shape, Image};

/// Background level in normalized space.
pub const PAD_VALUE: f32 = -1.0;

/// Affine map of the image's `[min, max]` onto `[-1, 1]`.
pub fn normalize(img: &Image) -> Result<Image> {
    let (lo, hi) = img.min_max();
    normalize_with_range(img, lo, hi)
}

/// Affine map of `[lo, hi]` onto `[-1, 1]`; values outside are not clamped.
pub fn normalize_with_range(img: &Image, lo: f32, hi: f32) -> Result<Image> {
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Degenerate(format!(
            "cannot normalize intensity range [{lo}, {hi}]"
        )));
    }
    let (lo, hi) = (lo as f64, hi as f64);
    let scale = 2.0 / (hi - lo);
    Ok(img.map(|v| ((v as f64 - lo) * scale - 1.0) as f32))
}

/// Normalize every slice with one shared range taken over the whole stack.
pub fn normalize_stack(slices: &[Image]) -> Result<Vec<Image>> {
    let (lo, hi) = slices.iter().map(Image::min_max).fold(
        (f32::INFINITY, f32::NEG_INFINITY),
        |(a, b), (lo, hi)| (a.min(lo), b.max(hi)),
    );
    slices
        .iter()
        .map(|s| normalize_with_range(s, lo, hi))
        .collect()
}

/// Where the original content sits inside a padded canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Center `img` on a `target x target` canvas filled with [`PAD_VALUE`].
pub fn pad_to_square(img: &Image, target: usize) -> Result<(Image, Padding)> {
    let (h, w) = img.shape();
    if h > target || w > target {
        return Err(Error::Size(format!("{h}x{w} does not fit in {target}x{target}")));
    }
    let top = (target - h) / 2;
    let left = (target - w) / 2;
    let mut out = Image::filled(target, target, PAD_VALUE);
    out.0
        .slice_mut(ndarray::s![top..top + h, left..left + w])
        .assign(&img.0);
    Ok((
        out,
        Padding {
            top,
            left,
            height: h,
            width: w,
        },
    ))
}

/// Undo [`pad_to_square`].
pub fn crop_padding(img: &Image, pad: &Padding) -> Result<Image> {
    img.crop(pad.top, pad.left, pad.height, pad.width)
}

/// Pixel-wise mean of repeated acquisitions at one location.
pub fn average_repeats(frames: &[Image]) -> Result<Image> {
    if frames.len() < 2 {
        return Err(Error::Contract(format!(
            "need at least 2 frames to average, got {}",
            frames.len()
        )));
    }
    let first = &frames[0];
    let mut acc = ndarray::Array2::<f64>::zeros(first.shape());
    for f in frames {
        ensure_same_shape(first, f)?;
        acc.zip_mut_with(&f.0, |a, &v| *a += v as f64);
    }
    let n = frames.len() as f64;
    Ok(Image(acc.mapv(|v| (v / n) as f32)))
}
