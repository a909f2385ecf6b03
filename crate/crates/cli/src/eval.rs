//! `eval`: metric table plus paired t-tests against a baseline method.
//!
//! Manifest format (paths relative to the manifest):
//!
//! ```json
//! {"images": [
//!   {"id": "vol_0018", "method": "noisy",    "path": "noisy/vol_0018.raw", "slice": 3},
//!   {"id": "vol_0018", "method": "denoised", "path": "out/vol_0018.raw",
//!    "reference": "clean/vol_0018.raw", "reference_slice": 3}
//! ]}
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use speckle_ddpm::data::phantom::normalized_to_intensity;
use speckle_ddpm::data::{load_volume, VolumeLayout};
use speckle_ddpm::metrics::{paired_t_test, IntensityDomain, MetricsReport, RoiSet};
use speckle_ddpm::Image;

use crate::{Classify, CliResult, EvalArgs, Failure, Tag};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalEntry {
    id: String,
    method: String,
    path: PathBuf,
    #[serde(default)]
    slice: usize,
    #[serde(default)]
    reference: Option<PathBuf>,
    #[serde(default)]
    reference_slice: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalManifest {
    images: Vec<EvalEntry>,
}

#[derive(Debug, Serialize)]
struct MethodRow {
    method: String,
    #[serde(flatten)]
    report: MetricsReport,
}

#[derive(Debug, Serialize)]
struct Comparison {
    method: String,
    baseline: String,
    metric: &'static str,
    pairs: usize,
    method_mean: f64,
    baseline_mean: f64,
    t: Option<f64>,
    p: Option<f64>,
    df: Option<usize>,
    significant: Option<bool>,
    note: Option<String>,
}

fn load_slice(path: &Path, slice: usize) -> CliResult<Image> {
    let v = load_volume(path, &VolumeLayout::default()).classify()?;
    let n = v.len();
    v.slices
        .into_iter()
        .nth(slice)
        .ok_or_else(|| Failure::Usage(anyhow::anyhow!("{}: slice {slice} out of range ({n} slices)", path.display())))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn run(a: EvalArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&a.manifest)
        .with_context(|| format!("cannot read {}", a.manifest.display()))
        .usage()?;
    let manifest: EvalManifest = serde_json::from_str(&text)
        .with_context(|| format!("invalid evaluation manifest {}", a.manifest.display()))
        .usage()?;
    if manifest.images.is_empty() {
        return Err(Failure::Usage(anyhow::anyhow!("evaluation manifest lists no images")));
    }
    let base = a.manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let rois = RoiSet::load(&a.rois).classify()?;
    let domain = if a.normalized_domain {
        IntensityDomain::Normalized
    } else {
        IntensityDomain::Intensity
    };
    let to_domain = |img: Image| match domain {
        IntensityDomain::Intensity => normalized_to_intensity(&img),
        IntensityDomain::Normalized => img,
    };

    let mut rows = Vec::with_capacity(manifest.images.len());
    for e in &manifest.images {
        let ref_path = match (&e.reference, &a.reference) {
            (Some(r), _) => resolve(&base, r),
            (None, Some(r)) => r.clone(),
            (None, None) => {
                return Err(Failure::Usage(anyhow::anyhow!(
                    "entry {}/{} has no reference and --reference is not set",
                    e.method,
                    e.id
                )))
            }
        };
        let img = to_domain(load_slice(&resolve(&base, &e.path), e.slice)?);
        let reference = to_domain(load_slice(&ref_path, e.reference_slice)?);
        let report = MetricsReport::compute(&e.id, &img, ref_path.display().to_string(), &reference, &rois, domain)
            .with_context(|| format!("metrics for {}/{}", e.method, e.id))
            .runtime()?;
        rows.push(MethodRow {
            method: e.method.clone(),
            report,
        });
    }

    let mut csv = format!("method,{}\n", MetricsReport::CSV_HEADER);
    for r in &rows {
        csv.push_str(&format!("{},{}\n", r.method, r.report.csv_row()));
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).runtime()?;
    }
    std::fs::write(&a.out, csv)
        .with_context(|| format!("cannot write {}", a.out.display()))
        .runtime()?;

    let comparisons = compare(&rows, &a.baseline);
    let json_path = a.out.with_extension("json");
    let report = serde_json::json!({
        "domain": domain,
        "baseline": a.baseline,
        "images": rows,
        "comparisons": comparisons,
    });
    std::fs::write(&json_path, serde_json::to_string_pretty(&report).runtime()? + "\n")
        .with_context(|| format!("cannot write {}", json_path.display()))
        .runtime()?;

    for c in &comparisons {
        let test = match (c.t, c.p) {
            (Some(t), Some(p)) => format!("t = {t:+.3}, p = {p:.4}{}", if p < 0.05 { " *" } else { "" }),
            _ => c.note.clone().unwrap_or_default(),
        };
        println!(
            "{:<12} {:<5} {:>10.3} vs {:<10} {:>10.3}  n = {:<3} {test}",
            c.method, c.metric, c.method_mean, c.baseline, c.baseline_mean, c.pairs
        );
    }
    log::info!("wrote {} and {}", a.out.display(), json_path.display());
    Ok(())
}

type Getter = fn(&MetricsReport) -> Option<f64>;

const METRICS: [(&str, Getter); 4] = [
    ("snr", |r| Some(r.snr)),
    ("psnr", |r| r.psnr),
    ("cnr", |r| Some(r.cnr)),
    ("enl", |r| Some(r.enl)),
];

fn compare(rows: &[MethodRow], baseline: &str) -> Vec<Comparison> {
    let mut by_method: BTreeMap<&str, BTreeMap<&str, &MetricsReport>> = BTreeMap::new();
    for r in rows {
        by_method
            .entry(r.method.as_str())
            .or_default()
            .insert(r.report.image_id.as_str(), &r.report);
    }
    let Some(base) = by_method.get(baseline) else {
        log::warn!("baseline method {baseline:?} not in the manifest; no t-tests");
        return Vec::new();
    };
    let mut out = Vec::new();
    for (method, reports) in &by_method {
        if *method == baseline {
            continue;
        }
        for (metric, get) in METRICS {
            let pairs: Vec<(f64, f64)> = reports
                .iter()
                .filter_map(|(id, r)| Some((get(r)?, get(base.get(id)?)?)))
                .collect();
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
            let mut c = Comparison {
                method: method.to_string(),
                baseline: baseline.to_string(),
                metric,
                pairs: pairs.len(),
                method_mean: mean(&a),
                baseline_mean: mean(&b),
                t: None,
                p: None,
                df: None,
                significant: None,
                note: None,
            };
            match paired_t_test(&a, &b) {
                Ok(t) => {
                    c.t = Some(t.t);
                    c.p = Some(t.p);
                    c.df = Some(t.df);
                    c.significant = Some(t.p < 0.05);
                }
                Err(e) => c.note = Some(e.to_string()),
            }
            out.push(c);
        }
    }
    out
}
