//! Image and volume files.
//!
//! * `.png`: 16-bit grayscale. The writer maps the image's `[min, max]` onto
//!   `0..=65535` and stores the range in a `tEXt` chunk keyed
//!   `speckle-ddpm-range` (`"<min> <max>"`) so the reader can undo it. PNGs
//!   without that chunk (8- or 16-bit) load as `value / max_code` in `[0, 1]`.
//! * `.tif` / `.tiff`: multi-page stack, one page per slice, written as 32-bit
//!   float; 8/16-bit and float pages are read.
//! * `.raw`: the [`crate::container`] format with a single `slices` array of
//!   shape `[n, h, w]`; lossless.
//! * a directory: every `*.png` inside, sorted lexicographically by file name
//!   (use zero-padded indices, e.g. `slice_0007.png`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::volume::Volume;
use crate::container::{self, NamedArray};
use crate::error::{Error, Result};
use crate::image::Image;

const RANGE_KEY: &str = "speckle-ddpm-range";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeFormat {
    PngDirectory,
    Tiff,
    Raw,
    Png,
}

impl VolumeFormat {
    pub fn detect(path: &Path) -> Result<Self> {
        if path.is_dir() {
            return Ok(VolumeFormat::PngDirectory);
        }
        match extension(path).as_deref() {
            Some("png") => Ok(VolumeFormat::Png),
            Some("tif" | "tiff") => Ok(VolumeFormat::Tiff),
            Some("raw") => Ok(VolumeFormat::Raw),
            _ => Err(Error::format(path, "unrecognised image format (png, tif, tiff, raw)")),
        }
    }
}

/// How to interpret a volume file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeLayout {
    /// `None` detects from the path.
    #[serde(default)]
    pub format: Option<VolumeFormat>,
    #[serde(default = "one")]
    pub repeats_per_location: usize,
    #[serde(default)]
    pub snr_label: Option<String>,
}

fn one() -> usize {
    1
}

impl Default for VolumeLayout {
    fn default() -> Self {
        VolumeLayout {
            format: None,
            repeats_per_location: 1,
            snr_label: None,
        }
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
}

pub fn load_volume(path: &Path, layout: &VolumeLayout) -> Result<Volume> {
    let format = match layout.format {
        Some(f) => f,
        None => VolumeFormat::detect(path)?,
    };
    let (slices, meta_label) = match format {
        VolumeFormat::PngDirectory => (load_png_dir(path)?, None),
        VolumeFormat::Png => (vec![load_png(path)?], None),
        VolumeFormat::Tiff => (load_tiff(path)?, None),
        VolumeFormat::Raw => load_raw(path)?,
    };
    let mut volume = Volume::new(slices)
        .map_err(|e| Error::format(path, e))?
        .with_repeats(layout.repeats_per_location)
        .map_err(|e| Error::format(path, e))?;
    volume.snr_label = layout.snr_label.clone().or(meta_label);
    volume.source = Some(path.display().to_string());
    Ok(volume)
}

/// Write a volume; the format follows the extension (`.raw`, `.tif`, or a
/// directory path without extension for a PNG series).
pub fn save_volume(volume: &Volume, path: &Path) -> Result<()> {
    match extension(path).as_deref() {
        Some("raw") => save_raw(&volume.slices, volume.snr_label.as_deref(), path),
        Some("tif" | "tiff") => save_tiff(&volume.slices, path),
        None => {
            std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
            for (i, s) in volume.slices.iter().enumerate() {
                save_png(s, &path.join(format!("slice_{i:04}.png")))?;
            }
            Ok(())
        }
        Some(_) => Err(Error::format(path, "volumes are saved as .raw, .tif or a PNG directory")),
    }
}

/// Load a single image (the first slice of a stack).
pub fn load_image(path: &Path) -> Result<Image> {
    let mut v = load_volume(path, &VolumeLayout::default())?;
    Ok(v.slices.swap_remove(0))
}

/// Save a single image; format follows the extension.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    match extension(path).as_deref() {
        Some("png") => save_png(img, path),
        Some("tif" | "tiff") => save_tiff(std::slice::from_ref(img), path),
        Some("raw") => save_raw(std::slice::from_ref(img), None, path),
        _ => Err(Error::format(path, "unrecognised image format (png, tif, tiff, raw)")),
    }
}

pub fn save_raw(slices: &[Image], snr_label: Option<&str>, path: &Path) -> Result<()> {
    let first = slices
        .first()
        .ok_or_else(|| Error::Contract("nothing to save".into()))?;
    let (h, w) = first.shape();
    let mut data = Vec::with_capacity(slices.len() * h * w);
    for s in slices {
        if s.shape() != (h, w) {
            return Err(Error::Contract("slices differ in shape".into()));
        }
        data.extend(s.iter().copied());
    }
    let meta = json!({ "kind": "volume", "snr_label": snr_label });
    container::write(
        path,
        &meta,
        &[NamedArray::new("slices", vec![slices.len(), h, w], data)],
    )
}

fn load_raw(path: &Path) -> Result<(Vec<Image>, Option<String>)> {
    let c = container::read(path)?;
    let arr = c
        .get("slices")
        .ok_or_else(|| Error::format(path, "container has no `slices` array"))?;
    let (n, h, w) = match arr.shape[..] {
        [n, h, w] => (n, h, w),
        [h, w] => (1, h, w),
        _ => return Err(Error::format(path, format!("bad slices shape {:?}", arr.shape))),
    };
    let slices = arr
        .data
        .chunks(h * w)
        .take(n)
        .map(|c| Image::from_vec(h, w, c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let label = c
        .meta
        .get("snr_label")
        .and_then(|v| v.as_str())
        .map(str::to_owned);
    Ok((slices, label))
}

/// 16-bit grayscale PNG with the value range stored alongside.
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let (lo, hi) = img.min_max();
    let span = (hi - lo) as f64;
    let mut bytes = Vec::with_capacity(img.len() * 2);
    for &v in img.iter() {
        let code = if span > 0.0 {
            (((v - lo) as f64 / span) * 65535.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        bytes.extend_from_slice(&code.to_be_bytes());
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width() as u32, img.height() as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    enc.add_text_chunk(RANGE_KEY.into(), format!("{lo:e} {hi:e}"))
        .map_err(|e| Error::format(path, e))?;
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::format(path, e))?;
    writer.finish().map_err(|e| Error::format(path, e))
}

/// Write an 8-bit grayscale PNG of `img` with `[lo, hi]` mapped to `0..=255`.
pub fn save_png8(img: &Image, lo: f32, hi: f32, path: &Path) -> Result<()> {
    let span = (hi - lo).max(f32::MIN_POSITIVE);
    let bytes: Vec<u8> = img
        .iter()
        .map(|&v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width() as u32, img.height() as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::format(path, e))?;
    writer.finish().map_err(|e| Error::format(path, e))
}

pub fn load_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| Error::format(path, e))?;
    let range = reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .find(|c| c.keyword == RANGE_KEY)
        .and_then(|c| {
            let mut it = c.text.split_whitespace().map(str::parse::<f32>);
            Some((it.next()?.ok()?, it.next()?.ok()?))
        });
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::format(path, "only grayscale PNGs are supported"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let (codes, max_code): (Vec<f64>, f64) = match info.bit_depth {
        png::BitDepth::Sixteen => (
            buf[..info.buffer_size()]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64)
                .collect(),
            65535.0,
        ),
        png::BitDepth::Eight => (buf[..w * h].iter().map(|&b| b as f64).collect(), 255.0),
        d => return Err(Error::format(path, format!("unsupported bit depth {d:?}"))),
    };
    let (lo, hi) = range.map_or((0.0, 1.0), |(a, b)| (a as f64, b as f64));
    let data = codes
        .into_iter()
        .map(|c| (lo + c / max_code * (hi - lo)) as f32)
        .collect();
    Image::from_vec(h, w, data)
}

fn load_png_dir(dir: &Path) -> Result<Vec<Image>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| extension(p).as_deref() == Some("png"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::format(dir, "directory contains no PNG files"));
    }
    files.iter().map(|p| load_png(p)).collect()
}

pub fn save_tiff(slices: &[Image], path: &Path) -> Result<()> {
    let mut buf = Cursor::new(Vec::new());
    {
        let mut enc = tiff::encoder::TiffEncoder::new(&mut buf).map_err(|e| Error::format(path, e))?;
        for s in slices {
            let data = s.to_vec();
            enc.write_image::<tiff::encoder::colortype::Gray32Float>(
                s.width() as u32,
                s.height() as u32,
                &data,
            )
            .map_err(|e| Error::format(path, e))?;
        }
    }
    std::fs::write(path, buf.into_inner()).map_err(|e| Error::io(path, e))
}

fn load_tiff(path: &Path) -> Result<Vec<Image>> {
    use tiff::decoder::{Decoder, DecodingResult};
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file)).map_err(|e| Error::format(path, e))?;
    let mut slices = Vec::new();
    loop {
        let (w, h) = dec.dimensions().map_err(|e| Error::format(path, e))?;
        let data: Vec<f32> = match dec.read_image().map_err(|e| Error::format(path, e))? {
            DecodingResult::U8(v) => v.into_iter().map(|x| x as f32 / 255.0).collect(),
            DecodingResult::U16(v) => v.into_iter().map(|x| x as f32 / 65535.0).collect(),
            DecodingResult::F32(v) => v,
            DecodingResult::F64(v) => v.into_iter().map(|x| x as f32).collect(),
            _ => return Err(Error::format(path, "unsupported TIFF sample type")),
        };
        slices.push(Image::from_vec(h as usize, w as usize, data).map_err(|e| Error::format(path, e))?);
        if !dec.more_images() {
            break;
        }
        dec.next_image().map_err(|e| Error::format(path, e))?;
    }
    Ok(slices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn raw_roundtrip_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.raw");
        let v = Volume::new(vec![random(5, 7, 1), random(5, 7, 2)]).unwrap().with_snr_label("96dB");
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p, &VolumeLayout::default()).unwrap();
        assert_eq!(back.slices, v.slices);
        assert_eq!(back.snr_label.as_deref(), Some("96dB"));
    }

    #[test]
    fn png_roundtrip_quantization_bound() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let img = random(16, 9, 3);
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        let (lo, hi) = img.min_max();
        assert!(back.max_abs_diff(&img) <= (hi - lo) / 65535.0);
    }

    #[test]
    fn tiff_stack_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.tif");
        let slices = vec![random(6, 4, 4), random(6, 4, 5), random(6, 4, 6)];
        save_tiff(&slices, &p).unwrap();
        let v = load_volume(&p, &VolumeLayout::default()).unwrap();
        assert_eq!(v.slices, slices);
    }

    #[test]
    fn png_directory_lexicographic() {
        let dir = tempfile::tempdir().unwrap();
        // Written out of order; names carry the index.
        for i in [7usize, 2, 9, 0, 5, 1, 8, 3, 6, 4] {
            let img = Image::from_fn(4, 4, |(r, c)| (i * 100 + r * 4 + c) as f32);
            save_png(&img, &dir.path().join(format!("b_{i:03}.png"))).unwrap();
        }
        let v = load_volume(dir.path(), &VolumeLayout::default()).unwrap();
        assert_eq!(v.len(), 10);
        for (i, s) in v.slices.iter().enumerate() {
            assert!((s.get(0, 0) - (i * 100) as f32).abs() < 0.01);
        }
    }

    #[test]
    fn errors_carry_path() {
        let err = load_image(Path::new("/nonexistent/file.raw")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/file.raw"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.raw");
        std::fs::write(&p, b"garbage").unwrap();
        assert!(matches!(load_image(&p), Err(Error::Format { .. })));
        assert!(load_image(&dir.path().join("x.bmp")).is_err());
    }

    #[test]
    fn inconsistent_png_dir() {
        let dir = tempfile::tempdir().unwrap();
        save_png(&random(4, 4, 1), &dir.path().join("a.png")).unwrap();
        save_png(&random(4, 5, 1), &dir.path().join("b.png")).unwrap();
        assert!(load_volume(dir.path(), &VolumeLayout::default()).is_err());
    }
}
