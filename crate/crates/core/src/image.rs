//! Single-channel 2D intensity image.

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A single-channel b-scan, row-major (`height` rows of `width` pixels).
#[derive(Debug, Clone, PartialEq)]
pub struct Image(pub Array2<f32>);

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Image(Array2::zeros((height, width)))
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Image(Array2::from_elem((height, width), value))
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Array2::from_shape_vec((height, width), data)
            .map(Image)
            .map_err(|e| Error::Contract(format!("image buffer: {e}")))
    }

    pub fn from_fn(height: usize, width: usize, f: impl FnMut((usize, usize)) -> f32) -> Self {
        Image(Array2::from_shape_fn((height, width), f))
    }

    /// Standard normal noise image.
    pub fn randn<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Self {
        Image::from_fn(height, width, |_| rng.sample::<f32, _>(StandardNormal))
    }

    pub fn height(&self) -> usize {
        self.0.nrows()
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.0[[row, col]]
    }

    /// Pixels in row-major order.
    pub fn to_vec(&self) -> Vec<f32> {
        self.0.iter().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f32> {
        self.0.iter()
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image(self.0.mapv(f))
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.0
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().map(|&v| v as f64).sum::<f64>() / self.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// True when every pixel lies in `[-1 - tol, 1 + tol]`.
    pub fn is_normalized(&self, tol: f32) -> bool {
        self.0.iter().all(|&v| (-1.0 - tol..=1.0 + tol).contains(&v))
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Image {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        Zip::from(&self.0)
            .and(&other.0)
            .fold(0.0f32, |m, &a, &b| m.max((a - b).abs()))
    }

    /// Mean squared error, accumulated in double precision.
    pub fn mse(&self, other: &Image) -> Result<f64> {
        ensure_same_shape(self, other)?;
        let sum = Zip::from(&self.0).and(&other.0).fold(0.0f64, |s, &a, &b| {
            let d = a as f64 - b as f64;
            s + d * d
        });
        Ok(sum / self.len() as f64)
    }

    /// `a * self + b * other`, elementwise.
    pub fn axpby(&self, a: f32, other: &Image, b: f32) -> Result<Image> {
        ensure_same_shape(self, other)?;
        Ok(Image(Zip::from(&self.0)
            .and(&other.0)
            .map_collect(|&x, &y| a * x + b * y)))
    }

    pub fn scale(&self, s: f32) -> Image {
        self.map(|v| v * s)
    }

    /// Copy out the rectangle `[row, row + height) x [col, col + width)`.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Image> {
        if row + height > self.height() || col + width > self.width() {
            return Err(Error::Size(format!(
                "crop {height}x{width} at ({row},{col}) exceeds {}x{}",
                self.height(),
                self.width()
            )));
        }
        Ok(Image(
            self.0
                .slice(ndarray::s![row..row + height, col..col + width])
                .to_owned(),
        ))
    }
}

pub(crate) fn ensure_same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!(
            "shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axpby_and_mse() {
        let a = Image::filled(2, 3, 1.0);
        let b = Image::filled(2, 3, 2.0);
        let c = a.axpby(2.0, &b, -1.0).unwrap();
        assert!(c.iter().all(|&v| v == 0.0));
        assert_eq!(a.mse(&b).unwrap(), 1.0);
        assert!(a.axpby(1.0, &Image::zeros(3, 2), 1.0).is_err());
    }

    #[test]
    fn crop_bounds() {
        let a = Image::from_fn(4, 4, |(r, c)| (r * 4 + c) as f32);
        let c = a.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.to_vec(), vec![6.0, 7.0, 10.0, 11.0]);
        assert!(a.crop(3, 3, 2, 1).is_err());
    }
}
