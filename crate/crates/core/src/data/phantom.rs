//! Synthetic layered b-scan phantoms with speckle.
//!
//! Phantoms live in an intensity domain `[0, 1]`; the returned images are
//! mapped to normalized space with the fixed affine `x -> 2x - 1` so clean and
//! noisy share one scale (noisy intensities are clipped to `[0, 1]` first).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use super::volume::Volume;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{Roi, RoiSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum Speckle {
    /// `clean * g`, `g ~ Gamma(shape, 1 / shape)` (unit mean).
    GammaMultiplicative { shape: f64 },
    /// `clean + n`, `n ~ N(0, sigma^2)`.
    GaussianAdditive { sigma: f64 },
    /// Noise-free: noisy equals clean.
    None,
}

/// A horizontal band starting at row `top` and running to the next layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub top: usize,
    pub intensity: f64,
}

/// Dark elliptical inclusion; multiplies the underlying intensity by `factor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vessel {
    pub center_row: f64,
    pub center_col: f64,
    pub radius_rows: f64,
    pub radius_cols: f64,
    pub factor: f64,
}

impl Vessel {
    fn contains(&self, r: f64, c: f64) -> bool {
        let dr = (r - self.center_row) / self.radius_rows;
        let dc = (c - self.center_col) / self.radius_cols;
        dr * dr + dc * dc <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    /// Intensity above the first layer.
    pub background: f64,
    /// Layers sorted by `top`; the last one runs to the bottom edge.
    pub layers: Vec<Layer>,
    pub vessels: Vec<Vessel>,
    pub speckle: Speckle,
    pub seed: u64,
}

/// A clean/noisy pair in normalized space.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub clean: Image,
    pub noisy: Image,
}

impl PhantomSpec {
    /// Draw a random retina-like layer stack. Geometry and speckle both
    /// derive from `seed`.
    pub fn random(height: usize, width: usize, speckle: Speckle, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a7e_0000_0000);
        let unit = height as f64 / 64.0;
        let n_layers = rng.random_range(4..=6);
        let mut top = (height as f64 * rng.random_range(0.15..0.3)) as usize;
        let mut layers = Vec::with_capacity(n_layers + 1);
        let mut prev = 0.05;
        for _ in 0..n_layers {
            let mut level: f64 = rng.random_range(0.15..0.7);
            while (level - prev).abs() < 0.12 {
                level = rng.random_range(0.15..0.7);
            }
            layers.push(Layer {
                top,
                intensity: level,
            });
            prev = level;
            top += ((rng.random_range(4.0..12.0)) * unit).round().max(2.0) as usize;
            if top + 4 >= height {
                break;
            }
        }
        if top + 4 < height {
            layers.push(Layer {
                top,
                intensity: 0.1,
            });
        }
        let n_vessels = rng.random_range(0..=2);
        let last_bright = layers.len().saturating_sub(1);
        let vessels = (0..n_vessels)
            .filter_map(|_| {
                let li = rng.random_range(0..last_bright.max(1));
                let layer = layers.get(li)?;
                let bottom = layers.get(li + 1).map_or(height, |l| l.top);
                let thickness = (bottom - layer.top) as f64;
                Some(Vessel {
                    center_row: layer.top as f64 + thickness * rng.random_range(0.3..0.7),
                    center_col: width as f64 * rng.random_range(0.15..0.85),
                    radius_rows: (thickness * 0.4).max(1.0),
                    radius_cols: unit * rng.random_range(2.0..4.0),
                    factor: 0.35,
                })
            })
            .collect();
        PhantomSpec {
            height,
            width,
            background: 0.05,
            layers,
            vessels,
            speckle,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("phantom size must be positive".into()));
        }
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.background) || self.layers.iter().any(|l| !in_unit(l.intensity)) {
            return Err(Error::Config("phantom intensities must lie in [0, 1]".into()));
        }
        if self.layers.windows(2).any(|w| w[0].top >= w[1].top)
            || self.layers.iter().any(|l| l.top >= self.height)
        {
            return Err(Error::Config("layer tops must be increasing and inside the image".into()));
        }
        if self
            .vessels
            .iter()
            .any(|v| !(v.radius_rows > 0.0 && v.radius_cols > 0.0) || !in_unit(v.factor))
        {
            return Err(Error::Config("vessel radii must be positive, factor in [0, 1]".into()));
        }
        match self.speckle {
            Speckle::GammaMultiplicative { shape } if !(shape > 0.0 && shape.is_finite()) => {
                Err(Error::Config(format!("gamma shape must be positive, got {shape}")))
            }
            Speckle::GaussianAdditive { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(Error::Config(format!("gaussian sigma must be positive, got {sigma}")))
            }
            _ => Ok(()),
        }
    }

    fn layer_bottom(&self, i: usize) -> usize {
        self.layers.get(i + 1).map_or(self.height, |l| l.top)
    }

    /// Noise-free intensity image in `[0, 1]`.
    pub fn clean_intensity(&self) -> Result<Image> {
        self.validate()?;
        let mut img = Image::filled(self.height, self.width, self.background as f32);
        for (i, layer) in self.layers.iter().enumerate() {
            for r in layer.top..self.layer_bottom(i) {
                for c in 0..self.width {
                    img.0[[r, c]] = layer.intensity as f32;
                }
            }
        }
        for v in &self.vessels {
            for r in 0..self.height {
                for c in 0..self.width {
                    if v.contains(r as f64, c as f64) {
                        img.0[[r, c]] *= v.factor as f32;
                    }
                }
            }
        }
        Ok(img)
    }

    /// Apply the speckle model to an intensity image (result clipped to `[0, 1]`).
    pub fn speckle_intensity<R: Rng + ?Sized>(&self, clean: &Image, rng: &mut R) -> Result<Image> {
        self.validate()?;
        let noisy = match self.speckle {
            Speckle::None => clean.clone(),
            Speckle::GammaMultiplicative { shape } => {
                let g = Gamma::new(shape, 1.0 / shape).map_err(|e| Error::Config(e.to_string()))?;
                clean.map_rng(rng, |v, rng| v * g.sample(rng) as f32)
            }
            Speckle::GaussianAdditive { sigma } => {
                let n = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
                clean.map_rng(rng, |v, rng| v + n.sample(rng) as f32)
            }
        };
        Ok(noisy.clamp(0.0, 1.0))
    }

    /// ROIs matching this phantom's geometry: the band above the first layer
    /// as background, vessel-free interiors of each layer as foreground, and
    /// the brightest layer's interior as the homogeneous region.
    pub fn rois(&self) -> RoiSet {
        let mut set = RoiSet::default();
        if let Some(first) = self.layers.first() {
            if first.top >= 4 {
                set.background_rois.push(Roi {
                    row: 1,
                    col: 1,
                    height: first.top - 2,
                    width: self.width - 2,
                });
            }
        }
        let mut brightest: Option<(f64, Roi)> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let (top, bottom) = (layer.top + 1, self.layer_bottom(i).saturating_sub(1));
            if bottom < top + 2 {
                continue;
            }
            if let Some(roi) = self.vessel_free_span(top, bottom) {
                set.foreground_rois.push(roi);
                if brightest.is_none_or(|(v, _)| layer.intensity > v) {
                    brightest = Some((layer.intensity, roi));
                }
            }
        }
        if let Some((_, roi)) = brightest {
            set.homogeneous_rois.push(roi);
        }
        set
    }

    fn vessel_free_span(&self, top: usize, bottom: usize) -> Option<Roi> {
        let mut blocked = vec![false; self.width];
        for v in &self.vessels {
            let (r0, r1) = (v.center_row - v.radius_rows, v.center_row + v.radius_rows);
            if r1 < top as f64 - 1.0 || r0 > bottom as f64 + 1.0 {
                continue;
            }
            let c0 = (v.center_col - v.radius_cols - 2.0).floor().max(0.0) as usize;
            let c1 = ((v.center_col + v.radius_cols + 2.0).ceil() as usize).min(self.width);
            blocked[c0..c1].iter_mut().for_each(|b| *b = true);
        }
        let (mut best, mut start) = ((0, 0), None);
        for c in 2..=self.width.saturating_sub(2) {
            let free = c < self.width - 2 && !blocked[c];
            match (free, start) {
                (true, None) => start = Some(c),
                (false, Some(s)) => {
                    if c - s > best.1 - best.0 {
                        best = (s, c);
                    }
                    start = None;
                }
                _ => {}
            }
        }
        let width = best.1 - best.0;
        (width >= 8).then_some(Roi {
            row: top,
            col: best.0,
            height: bottom - top,
            width,
        })
    }
}

/// Map `[0, 1]` intensities to normalized `[-1, 1]`.
pub fn intensity_to_normalized(img: &Image) -> Image {
    img.map(|v| 2.0 * v - 1.0)
}

/// Inverse of [`intensity_to_normalized`].
pub fn normalized_to_intensity(img: &Image) -> Image {
    img.map(|v| 0.5 * (v + 1.0))
}

/// Generate a phantom pair. Deterministic in `spec` (including its seed).
pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    let clean = spec.clean_intensity()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noisy = spec.speckle_intensity(&clean, &mut rng)?;
    Ok(Phantom {
        clean: intensity_to_normalized(&clean),
        noisy: intensity_to_normalized(&noisy),
    })
}

/// A stack of neighbouring b-scans of one phantom: every slice shares the
/// clean structure, shifted by a small integer translation, and carries
/// independent speckle. The middle slice is unshifted.
#[derive(Debug, Clone)]
pub struct PhantomVolume {
    pub clean: Vec<Image>,
    pub noisy: Volume,
    pub shifts: Vec<(isize, isize)>,
}

pub fn make_phantom_volume(spec: &PhantomSpec, slices: usize, max_shift: usize) -> Result<PhantomVolume> {
    if slices == 0 {
        return Err(Error::Config("volume needs at least one slice".into()));
    }
    let base = spec.clean_intensity()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mid = slices / 2;
    let m = max_shift as isize;
    let mut clean = Vec::with_capacity(slices);
    let mut noisy = Vec::with_capacity(slices);
    let mut shifts = Vec::with_capacity(slices);
    for i in 0..slices {
        let shift = if i == mid || m == 0 {
            (0, 0)
        } else {
            (rng.random_range(-m as i64..=m as i64) as isize, rng.random_range(-m as i64..=m as i64) as isize)
        };
        let c = crate::fusion::shift_replicate(&base, shift.0, shift.1);
        noisy.push(intensity_to_normalized(&spec.speckle_intensity(&c, &mut rng)?));
        clean.push(intensity_to_normalized(&c));
        shifts.push(shift);
    }
    Ok(PhantomVolume {
        clean,
        noisy: Volume::new(noisy)?,
        shifts,
    })
}

impl Image {
    fn map_rng<R: Rng + ?Sized>(&self, rng: &mut R, mut f: impl FnMut(f32, &mut R) -> f32) -> Image {
        let mut out = self.clone();
        out.0.iter_mut().for_each(|v| *v = f(*v, rng));
        out
    }
}
