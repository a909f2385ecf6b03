//! JSON dataset manifest.
//!
//! ```json
//! {
//!   "volumes": [
//!     {"path": "noisy/vol_0000.raw", "clean": "clean/vol_0000.raw",
//!      "repeats_per_location": 1, "snr_label": "gamma-k8", "split": "train"}
//!   ]
//! }
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::{load_volume, VolumeFormat, VolumeLayout};
use super::volume::Volume;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    /// Optional noise-free counterpart with the same slice count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<VolumeFormat>,
    #[serde(default = "one")]
    pub repeats_per_location: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

fn one() -> usize {
    1
}

impl ManifestEntry {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        ManifestEntry {
            path: path.into(),
            clean: None,
            format: None,
            repeats_per_location: 1,
            snr_label: None,
            split: None,
        }
    }

    pub fn layout(&self) -> VolumeLayout {
        VolumeLayout {
            format: self.format,
            repeats_per_location: self.repeats_per_location,
            snr_label: self.snr_label.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub volumes: Vec<ManifestEntry>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(volumes: Vec<ManifestEntry>) -> Self {
        DatasetManifest {
            volumes,
            base_dir: PathBuf::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn entries<'a>(&'a self, split: Option<&'a str>) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.volumes
            .iter()
            .filter(move |e| split.is_none() || e.split.as_deref() == split)
    }

    pub fn load_entry(&self, entry: &ManifestEntry) -> Result<Volume> {
        load_volume(&self.resolve(&entry.path), &entry.layout())
    }

    pub fn load_clean(&self, entry: &ManifestEntry) -> Result<Option<Volume>> {
        entry
            .clean
            .as_ref()
            .map(|c| load_volume(&self.resolve(c), &VolumeLayout::default()))
            .transpose()
    }

    /// Every slice of every (optionally split-filtered) volume, in manifest order.
    pub fn load_slices(&self, split: Option<&str>) -> Result<Vec<crate::image::Image>> {
        let mut out = Vec::new();
        for e in self.entries(split) {
            out.extend(self.load_entry(e)?.slices);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_defaults_and_resolve() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        std::fs::write(&p, r#"{"volumes":[{"path":"a.raw","split":"train"},{"path":"/abs/b.raw"}]}"#).unwrap();
        let m = DatasetManifest::load(&p).unwrap();
        assert_eq!(m.volumes[0].repeats_per_location, 1);
        assert_eq!(m.resolve(&m.volumes[0].path), dir.path().join("a.raw"));
        assert_eq!(m.resolve(&m.volumes[1].path), PathBuf::from("/abs/b.raw"));
        assert_eq!(m.entries(Some("train")).count(), 1);
        assert_eq!(m.entries(None).count(), 2);
    }
}
