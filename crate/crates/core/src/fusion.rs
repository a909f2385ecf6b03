//! Self-fusion: a cleaner reference for each b-scan from its registered
//! neighbours.
//!
//! Every neighbour within `radius` slices is registered to the target and
//! weighted by `exp(-MSE / h)` against it; the target enters with weight 1.
//! The weighted average is normalized per pixel, so the result is a convex
//! combination of the (resampled) inputs.

use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::data::{load_image, save_image, Volume};
use crate::error::{Error, Result};
use crate::image::{ensure_same_shape, Image};

/// `out[y, x] = img[y - dy, x - dx]`; pixels sampled from outside the
/// image take the nearest edge value.
pub fn shift_replicate(img: &Image, dy: isize, dx: isize) -> Image {
    let (h, w) = img.shape();
    Image::from_fn(h, w, |(y, x)| {
        let sy = (y as isize - dy).clamp(0, h as isize - 1) as usize;
        let sx = (x as isize - dx).clamp(0, w as isize - 1) as usize;
        img.get(sy, sx)
    })
}

/// Like [`shift_replicate`] but pixels with no source are `fill`.
pub fn shift_fill(img: &Image, dy: isize, dx: isize, fill: f32) -> Image {
    let (h, w) = img.shape();
    Image::from_fn(h, w, |(y, x)| {
        let sy = y as isize - dy;
        let sx = x as isize - dx;
        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
            fill
        } else {
            img.get(sy as usize, sx as usize)
        }
    })
}

fn pearson_at(moving: &Image, fixed: &Image, dy: isize, dx: isize) -> Option<f64> {
    let (h, w) = moving.shape();
    let (h, w) = (h as isize, w as isize);
    let y0 = dy.max(0);
    let y1 = (h + dy).min(h);
    let x0 = dx.max(0);
    let x1 = (w + dx).min(w);
    if y1 - y0 < 2 || x1 - x0 < 2 {
        return None;
    }
    let n = ((y1 - y0) * (x1 - x0)) as f64;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for y in y0..y1 {
        for x in x0..x1 {
            let a = moving.get(y as usize, x as usize) as f64;
            let b = fixed.get((y - dy) as usize, (x - dx) as usize) as f64;
            sa += a;
            sb += b;
            saa += a * a;
            sbb += b * b;
            sab += a * b;
        }
    }
    let cov = sab - sa * sb / n;
    let va = saa - sa * sa / n;
    let vb = sbb - sb * sb / n;
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Integer shift `(dy, dx)` within `±max_shift` such that
/// `moving ≈ shift(fixed, dy, dx)`, maximizing Pearson correlation over the
/// overlap. Ties go to the shift visited first (row-major from `-max_shift`),
/// except that `(0, 0)` wins any tie it is part of.
pub fn estimate_shift(moving: &Image, fixed: &Image, max_shift: usize) -> Result<(isize, isize)> {
    ensure_same_shape(moving, fixed)?;
    let m = max_shift as isize;
    let mut best = ((0, 0), pearson_at(moving, fixed, 0, 0).unwrap_or(f64::NEG_INFINITY));
    for dy in -m..=m {
        for dx in -m..=m {
            if let Some(r) = pearson_at(moving, fixed, dy, dx) {
                if r > best.1 {
                    best = ((dy, dx), r);
                }
            }
        }
    }
    if best.1 == f64::NEG_INFINITY {
        return Err(Error::Registration(
            "no shift gives a non-constant overlap to correlate".into(),
        ));
    }
    Ok(best.0)
}

/// How exchanged images are written for an external registration command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExchangeFormat {
    /// Float32 container (`.raw`), lossless.
    #[default]
    Raw,
    /// 16-bit grayscale PNG with the value range in a text chunk.
    Png,
}

impl ExchangeFormat {
    fn extension(self) -> &'static str {
        match self {
            ExchangeFormat::Raw => "raw",
            ExchangeFormat::Png => "png",
        }
    }
}

/// A shell command template containing `{moving}`, `{fixed}` and `{out}`.
/// The command must write `moving` resampled into `fixed`'s frame to `{out}`
/// in the same format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalRegistration {
    pub command: String,
    #[serde(default)]
    pub format: ExchangeFormat,
}

impl ExternalRegistration {
    pub fn new(command: impl Into<String>) -> Self {
        ExternalRegistration {
            command: command.into(),
            format: ExchangeFormat::Raw,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for key in ["{moving}", "{fixed}", "{out}"] {
            if !self.command.contains(key) {
                return Err(Error::Config(format!(
                    "registration command template lacks {key}: {}",
                    self.command
                )));
            }
        }
        Ok(())
    }

    fn run(&self, moving: &Image, fixed: &Image) -> Result<Image> {
        self.validate()?;
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let ext = self.format.extension();
        let path = |name: &str| -> PathBuf { dir.path().join(format!("{name}.{ext}")) };
        let (mp, fp, op) = (path("moving"), path("fixed"), path("out"));
        save_image(moving, &mp)?;
        save_image(fixed, &fp)?;
        let cmd = self
            .command
            .replace("{moving}", &quote(&mp))
            .replace("{fixed}", &quote(&fp))
            .replace("{out}", &quote(&op));
        let output = Command::new("sh")
            .arg("-c")
            .arg(&cmd)
            .output()
            .map_err(|e| Error::Registration(format!("cannot spawn `{cmd}`: {e}")))?;
        if !output.status.success() {
            return Err(Error::Registration(format!(
                "`{cmd}` exited with {}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        let out = load_image(&op).map_err(|e| {
            Error::Registration(format!(
                "`{cmd}` produced no readable output ({e}); stderr: {}",
                String::from_utf8_lossy(&output.stderr).trim()
            ))
        })?;
        if out.shape() != fixed.shape() {
            return Err(Error::Registration(format!(
                "`{cmd}` returned a {:?} image for a {:?} target",
                out.shape(),
                fixed.shape()
            )));
        }
        Ok(out)
    }
}

fn quote(p: &Path) -> String {
    format!("'{}'", p.display().to_string().replace('\'', r"'\''"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum RegistrationMethod {
    None,
    /// Exhaustive integer-shift search; the output is resampled with edge
    /// replication.
    Translation { max_shift: usize },
    External(ExternalRegistration),
}

impl Default for RegistrationMethod {
    fn default() -> Self {
        RegistrationMethod::Translation { max_shift: 5 }
    }
}

/// Resample `moving` into the frame of `fixed`.
pub fn register(moving: &Image, fixed: &Image, method: &RegistrationMethod) -> Result<Image> {
    ensure_same_shape(moving, fixed)?;
    match method {
        RegistrationMethod::None => Ok(moving.clone()),
        RegistrationMethod::Translation { max_shift } => {
            let (dy, dx) = estimate_shift(moving, fixed, *max_shift)?;
            Ok(shift_replicate(moving, -dy, -dx))
        }
        RegistrationMethod::External(ext) => ext.run(moving, fixed),
    }
}

/// `exp(-MSE(a, b) / h)`.
pub fn similarity_weight(a: &Image, b: &Image, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("weight bandwidth must be positive, got {h}")));
    }
    Ok((-a.mse(b)? / h).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median registered-neighbour MSE over the whole volume.
    Auto,
    Fixed(f64),
    /// Every atlas gets weight 1.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub radius: usize,
    pub bandwidth: Bandwidth,
    pub registration: RegistrationMethod,
    /// Upper bound on concurrently running external registration commands.
    pub max_parallel_registrations: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            radius: 3,
            bandwidth: Bandwidth::Auto,
            registration: RegistrationMethod::default(),
            max_parallel_registrations: 4,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radius == 0 {
            return Err(Error::Config("fusion radius must be at least 1".into()));
        }
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::Config(format!("weight bandwidth must be positive, got {h}")));
            }
        }
        if self.max_parallel_registrations == 0 {
            return Err(Error::Config("max_parallel_registrations must be at least 1".into()));
        }
        if let RegistrationMethod::External(ext) = &self.registration {
            ext.validate()?;
        }
        Ok(())
    }
}

fn neighbours(len: usize, index: usize, radius: usize) -> impl Iterator<Item = usize> {
    let lo = index.saturating_sub(radius);
    let hi = (index + radius).min(len - 1);
    (lo..=hi).filter(move |&j| j != index)
}

/// Registered atlases of one target, with their MSE against it.
struct Atlases {
    images: Vec<Image>,
    mse: Vec<f64>,
}

fn atlases_for(volume: &Volume, index: usize, config: &FusionConfig) -> Result<Atlases> {
    let target = &volume.slices[index];
    let idx: Vec<usize> = neighbours(volume.len(), index, config.radius).collect();
    let images = match config.registration {
        RegistrationMethod::External(_) => {
            bounded(&idx, config.max_parallel_registrations, |&j| {
                register(&volume.slices[j], target, &config.registration)
            })
        }
        _ => crate::par::map_slice(&idx, |&j| register(&volume.slices[j], target, &config.registration)),
    }
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mse = images.iter().map(|a| a.mse(target)).collect::<Result<_>>()?;
    Ok(Atlases { images, mse })
}

/// Order-preserving map over `items`, at most `limit` calls in flight.
fn bounded<S: Sync, T: Send>(items: &[S], limit: usize, f: impl Fn(&S) -> T + Sync) -> Vec<T> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(limit.max(1)) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|item| s.spawn(|| f(item))).collect();
            out.extend(handles.into_iter().map(|h| h.join().expect("registration worker panicked")));
        });
    }
    out
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn weight(mse: f64, h: Option<f64>) -> f64 {
    match h {
        None => 1.0,
        Some(h) => (-mse / h).exp(),
    }
}

/// Effective bandwidth; `None` means uniform weights. An automatic bandwidth
/// of zero (all atlases identical to their targets) also degrades to uniform.
fn resolve_bandwidth(config: &FusionConfig, all_mse: impl FnOnce() -> Result<Vec<f64>>) -> Result<Option<f64>> {
    Ok(match config.bandwidth {
        Bandwidth::Uniform => None,
        Bandwidth::Fixed(h) => Some(h),
        Bandwidth::Auto => median(all_mse()?).filter(|&h| h > 0.0),
    })
}

fn combine(target: &Image, atlases: &Atlases, h: Option<f64>) -> Image {
    let mut acc = target.0.mapv(|v| v as f64);
    let mut total = 1.0;
    for (img, &mse) in atlases.images.iter().zip(&atlases.mse) {
        let w = weight(mse, h);
        acc.zip_mut_with(&img.0, |a, &b| *a += w * b as f64);
        total += w;
    }
    Image(acc.mapv(|a| (a / total) as f32))
}

fn check_volume(volume: &Volume, config: &FusionConfig) -> Result<bool> {
    config.validate()?;
    volume.validate()?;
    if volume.len() == 1 {
        log::warn!("volume has a single slice; fusion returns it unchanged");
        return Ok(false);
    }
    Ok(true)
}

/// Fuse one target slice. With [`Bandwidth::Auto`] the bandwidth is the
/// median over the whole volume, so this registers every slice's atlases;
/// use [`fuse_volume`] when fusing more than one slice.
pub fn fuse(volume: &Volume, index: usize, config: &FusionConfig) -> Result<Image> {
    if index >= volume.len() {
        return Err(Error::Contract(format!(
            "slice index {index} out of range for a volume of {}",
            volume.len()
        )));
    }
    if !check_volume(volume, config)? {
        return Ok(volume.slices[index].clone());
    }
    let atlases = atlases_for(volume, index, config)?;
    let h = resolve_bandwidth(config, || {
        let mut all = Vec::new();
        for i in 0..volume.len() {
            if i == index {
                all.extend_from_slice(&atlases.mse);
            } else {
                all.extend(atlases_for(volume, i, config)?.mse);
            }
        }
        Ok(all)
    })?;
    Ok(combine(&volume.slices[index], &atlases, h))
}

/// Fuse every slice of `volume`.
pub fn fuse_volume(volume: &Volume, config: &FusionConfig) -> Result<Vec<Image>> {
    if !check_volume(volume, config)? {
        return Ok(volume.slices.clone());
    }
    let atlases = (0..volume.len())
        .map(|i| atlases_for(volume, i, config))
        .collect::<Result<Vec<_>>>()?;
    let h = resolve_bandwidth(config, || Ok(atlases.iter().flat_map(|a| a.mse.iter().copied()).collect()))?;
    if let Some(h) = h {
        log::debug!("fusion bandwidth h = {h:.6e}");
    }
    Ok(volume
        .slices
        .iter()
        .zip(&atlases)
        .map(|(t, a)| combine(t, a, h))
        .collect())
}
