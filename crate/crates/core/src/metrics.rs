//! Image-quality metrics and the paired t-test.
//!
//! Definitions (standard OCT conventions):
//!
//! * SNR  = `10 log10(max_f^2 / var_b)`: `max_f` is the largest pixel over the
//!   foreground ROIs, `var_b` the pooled background variance.
//! * PSNR = `10 log10(peak^2 / MSE)`, `peak = max(ref) - min(ref)`.
//! * CNR  = mean over foreground ROIs of `(mu_f - mu_b) / sqrt((var_f + var_b) / 2)`.
//! * ENL  = mean over homogeneous ROIs of `mu^2 / var`.
//!
//! Variances are unbiased (`n - 1`).

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::image::{ensure_same_shape, Image};

/// Axis-aligned rectangle `[row, row + height) x [col, col + width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Roi {
    fn pixels<'a>(&self, img: &'a Image) -> impl Iterator<Item = f64> + 'a {
        img.0
            .slice(ndarray::s![self.row..self.row + self.height, self.col..self.col + self.width])
            .into_iter()
            .map(|&v| v as f64)
            .collect::<Vec<_>>()
            .into_iter()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoiSet {
    #[serde(default)]
    pub background_rois: Vec<Roi>,
    #[serde(default)]
    pub foreground_rois: Vec<Roi>,
    #[serde(default)]
    pub homogeneous_rois: Vec<Roi>,
}

impl RoiSet {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let all = self
            .background_rois
            .iter()
            .chain(&self.foreground_rois)
            .chain(&self.homogeneous_rois);
        for r in all {
            if r.height < 2 || r.width < 1 || r.row + r.height > height || r.col + r.width > width {
                return Err(Error::Contract(format!(
                    "ROI {r:?} is empty or outside a {height}x{width} image"
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy)]
struct Moments {
    mean: f64,
    var: f64,
    max: f64,
}

fn moments(values: impl Iterator<Item = f64>) -> Moments {
    let v: Vec<f64> = values.collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Moments { mean, var, max }
}

fn pooled<'a>(img: &'a Image, rois: &'a [Roi], what: &str) -> Result<Moments> {
    if rois.is_empty() {
        return Err(Error::Contract(format!("no {what} ROIs declared")));
    }
    Ok(moments(rois.iter().flat_map(|r| r.pixels(img))))
}

fn check(img: &Image, rois: &RoiSet) -> Result<()> {
    rois.validate(img.height(), img.width())
}

pub fn snr(img: &Image, rois: &RoiSet) -> Result<f64> {
    check(img, rois)?;
    let bg = pooled(img, &rois.background_rois, "background")?;
    let fg = pooled(img, &rois.foreground_rois, "foreground")?;
    if bg.var <= 0.0 {
        return Err(Error::Degenerate("background variance is zero".into()));
    }
    Ok(10.0 * (fg.max * fg.max / bg.var).log10())
}

/// Returns `f64::INFINITY` for identical images.
pub fn psnr(img: &Image, reference: &Image) -> Result<f64> {
    ensure_same_shape(img, reference)?;
    let mse = img.mse(reference)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let (lo, hi) = reference.min_max();
    let peak = (hi - lo) as f64;
    if peak <= 0.0 {
        return Err(Error::Degenerate("reference has zero dynamic range".into()));
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub fn cnr(img: &Image, rois: &RoiSet) -> Result<f64> {
    check(img, rois)?;
    let bg = pooled(img, &rois.background_rois, "background")?;
    if rois.foreground_rois.is_empty() {
        return Err(Error::Contract("no foreground ROIs declared".into()));
    }
    let mut total = 0.0;
    for r in &rois.foreground_rois {
        let fg = moments(r.pixels(img));
        let denom = (0.5 * (fg.var + bg.var)).sqrt();
        if denom <= 0.0 {
            return Err(Error::Degenerate("foreground and background variance both zero".into()));
        }
        total += (fg.mean - bg.mean) / denom;
    }
    Ok(total / rois.foreground_rois.len() as f64)
}

pub fn enl(img: &Image, rois: &RoiSet) -> Result<f64> {
    check(img, rois)?;
    if rois.homogeneous_rois.is_empty() {
        return Err(Error::Contract("no homogeneous ROIs declared".into()));
    }
    let mut total = 0.0;
    for r in &rois.homogeneous_rois {
        let m = moments(r.pixels(img));
        if m.var <= 0.0 {
            return Err(Error::Degenerate(format!("homogeneous ROI {r:?} has zero variance")));
        }
        total += m.mean * m.mean / m.var;
    }
    Ok(total / rois.homogeneous_rois.len() as f64)
}

/// Intensity scale the metrics were computed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityDomain {
    /// Original (un-normalized) intensities.
    Intensity,
    /// The `[-1, 1]` network space.
    Normalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub image_id: String,
    pub reference_id: String,
    pub snr: f64,
    /// `None` when the image equals its reference.
    pub psnr: Option<f64>,
    pub psnr_infinite: bool,
    pub cnr: f64,
    pub enl: f64,
    pub domain: IntensityDomain,
    pub rois: RoiSet,
}

impl MetricsReport {
    pub fn compute(
        image_id: impl Into<String>,
        img: &Image,
        reference_id: impl Into<String>,
        reference: &Image,
        rois: &RoiSet,
        domain: IntensityDomain,
    ) -> Result<Self> {
        let p = psnr(img, reference)?;
        Ok(MetricsReport {
            image_id: image_id.into(),
            reference_id: reference_id.into(),
            snr: snr(img, rois)?,
            psnr: p.is_finite().then_some(p),
            psnr_infinite: p.is_infinite(),
            cnr: cnr(img, rois)?,
            enl: enl(img, rois)?,
            domain,
            rois: rois.clone(),
        })
    }

    pub const CSV_HEADER: &'static str = "image_id,reference_id,snr,psnr,cnr,enl,domain";

    pub fn csv_row(&self) -> String {
        let psnr = self.psnr.map_or_else(|| "inf".to_string(), |v| format!("{v:.6}"));
        let domain = match self.domain {
            IntensityDomain::Intensity => "intensity",
            IntensityDomain::Normalized => "normalized",
        };
        format!(
            "{},{},{:.6},{},{:.6},{:.6},{}",
            self.image_id, self.reference_id, self.snr, psnr, self.cnr, self.enl, domain
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
    pub mean_difference: f64,
}

/// Paired two-tailed t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Contract(format!(
            "need two equal-length samples of at least 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let m = moments(d.into_iter());
    if !(m.var > 0.0) {
        return Err(Error::Degenerate("paired differences have zero variance".into()));
    }
    let t = m.mean / (m.var / n).sqrt();
    let df = a.len() - 1;
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::Domain(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest {
        t,
        p,
        df,
        mean_difference: m.mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rois() -> RoiSet {
        RoiSet {
            background_rois: vec![Roi { row: 0, col: 0, height: 4, width: 8 }],
            foreground_rois: vec![Roi { row: 4, col: 0, height: 4, width: 8 }],
            homogeneous_rois: vec![Roi { row: 4, col: 0, height: 4, width: 8 }],
        }
    }

    fn striped(bg: f32, fg: f32) -> Image {
        Image::from_fn(8, 8, |(r, c)| {
            let wiggle = if (r + c) % 2 == 0 { 0.1 } else { -0.1 };
            if r < 4 { bg + wiggle } else { fg + wiggle * 0.5 }
        })
    }

    #[test]
    fn psnr_closed_form() {
        let x = Image::from_fn(4, 4, |(r, c)| if (r + c) % 2 == 0 { -1.0 } else { 1.0 });
        let y = x.map(|v| v + 0.01);
        let p = psnr(&y, &x).unwrap();
        assert!((p - 10.0 * (4.0f64 / 1e-4).log10()).abs() < 1e-3, "{p}");
        assert!(psnr(&x, &x).unwrap().is_infinite());
        assert!(psnr(&x, &Image::zeros(3, 3)).is_err());
    }

    #[test]
    fn cnr_zero_and_sign() {
        let same = striped(0.5, 0.5);
        assert!(cnr(&same, &rois()).unwrap().abs() < 1e-6);
        let img = striped(0.2, 0.7);
        let c = cnr(&img, &rois()).unwrap();
        let swapped = RoiSet {
            background_rois: rois().foreground_rois,
            foreground_rois: rois().background_rois,
            homogeneous_rois: vec![],
        };
        let c2 = cnr(&img, &swapped).unwrap();
        assert!(c > 0.0);
        assert!(c2 < 0.0);
    }

    #[test]
    fn enl_scale_invariant() {
        let img = striped(0.2, 0.7);
        let a = enl(&img, &rois()).unwrap();
        let b = enl(&img.scale(3.7), &rois()).unwrap();
        assert!((a - b).abs() < 1e-6 * a);
    }

    #[test]
    fn degenerate_rois() {
        let flat = Image::filled(8, 8, 0.3);
        assert!(matches!(snr(&flat, &rois()), Err(Error::Degenerate(_))));
        assert!(matches!(cnr(&flat, &rois()), Err(Error::Degenerate(_))));
        assert!(matches!(enl(&flat, &rois()), Err(Error::Degenerate(_))));
        let outside = RoiSet {
            background_rois: vec![Roi { row: 6, col: 0, height: 4, width: 2 }],
            ..rois()
        };
        assert!(matches!(snr(&striped(0.1, 0.5), &outside), Err(Error::Contract(_))));
        assert!(enl(&striped(0.1, 0.5), &RoiSet::default()).is_err());
    }

    #[test]
    fn t_test_hand_value() {
        // d = [1, 1, 1, 1, -1]: mean 0.6, sd sqrt(0.8), t = 0.6 / (sqrt(0.8) / sqrt(5)) = 1.5.
        let a = [2.0, 3.0, 4.0, 5.0, 5.0];
        let b = [1.0, 2.0, 3.0, 4.0, 6.0];
        let r = paired_t_test(&a, &b).unwrap();
        assert!((r.t - 1.5).abs() < 1e-12);
        assert_eq!(r.df, 4);
        // Two-sided tail of Student's t with 4 dof at 1.5 (regularized
        // incomplete beta I_{4/6.25}(2, 1/2), which is exactly 0.208).
        assert!((r.p - 0.208).abs() < 1e-9, "{}", r.p);
        let rev = paired_t_test(&b, &a).unwrap();
        assert_eq!(rev.t, -r.t);
        assert!(matches!(paired_t_test(&a, &a), Err(Error::Degenerate(_))));
        assert!(paired_t_test(&a[..1], &b[..1]).is_err());
        assert!(paired_t_test(&a, &b[..3]).is_err());
    }
}
