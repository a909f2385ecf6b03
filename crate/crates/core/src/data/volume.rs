use crate::error::{Error, Result};
use crate::image::Image;

/// An ordered stack of b-scans.
///
/// When `repeats_per_location > 1`, consecutive groups of that many slices
/// are repeated acquisitions of the same location.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub slices: Vec<Image>,
    pub repeats_per_location: usize,
    pub snr_label: Option<String>,
    pub source: Option<String>,
}

impl Volume {
    pub fn new(slices: Vec<Image>) -> Result<Self> {
        let v = Volume {
            slices,
            repeats_per_location: 1,
            snr_label: None,
            source: None,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn with_repeats(mut self, repeats: usize) -> Result<Self> {
        self.repeats_per_location = repeats;
        self.validate()?;
        Ok(self)
    }

    pub fn with_snr_label(mut self, label: impl Into<String>) -> Self {
        self.snr_label = Some(label.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .slices
            .first()
            .ok_or_else(|| Error::Contract("volume has no slices".into()))?;
        if let Some(bad) = self.slices.iter().position(|s| s.shape() != first.shape()) {
            return Err(Error::Contract(format!(
                "slice {bad} is {:?}, expected {:?}",
                self.slices[bad].shape(),
                first.shape()
            )));
        }
        if self.repeats_per_location == 0 || !self.slices.len().is_multiple_of(self.repeats_per_location) {
            return Err(Error::Contract(format!(
                "{} slices not divisible into groups of {}",
                self.slices.len(),
                self.repeats_per_location
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.slices[0].shape()
    }

    pub fn locations(&self) -> usize {
        self.slices.len() / self.repeats_per_location
    }

    /// Repeated frames of location `loc`.
    pub fn repeat_group(&self, loc: usize) -> &[Image] {
        let r = self.repeats_per_location;
        &self.slices[loc * r..(loc + 1) * r]
    }

    /// Average each repeat group into one ground-truth slice.
    pub fn averaged(&self) -> Result<Volume> {
        if self.repeats_per_location == 1 {
            return Ok(self.clone());
        }
        let slices = (0..self.locations())
            .map(|l| super::average_repeats(self.repeat_group(l)))
            .collect::<Result<_>>()?;
        Ok(Volume {
            slices,
            repeats_per_location: 1,
            snr_label: self.snr_label.clone(),
            source: self.source.clone(),
        })
    }
}
