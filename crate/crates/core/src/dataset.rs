//! Training views on disk and real-patch extraction.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::DetectorConfig;
use crate::image::Image;
use crate::projector::{DatasetManifest, ViewRecord};
use crate::sampler::PatchPattern;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Image>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        let mut images = Vec::with_capacity(manifest.views.len());
        for v in &manifest.views {
            let img = Image::load_png(&dir.join(&v.file))?;
            if img.width != v.detector.w || img.height != v.detector.h {
                return Err(Error::Format {
                    what: "dataset",
                    msg: format!(
                        "{} is {}x{}, manifest says {}x{}",
                        v.file, img.width, img.height, v.detector.w, v.detector.h
                    ),
                });
            }
            images.push(img);
        }
        Self::new(manifest, images)
    }

    pub fn new(manifest: DatasetManifest, images: Vec<Image>) -> Result<Self> {
        if images.is_empty() || manifest.views.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if images.len() != manifest.views.len() {
            return Err(Error::Invalid(format!(
                "{} images for {} views",
                images.len(),
                manifest.views.len()
            )));
        }
        Ok(Self { manifest, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn view(&self, i: usize) -> &ViewRecord {
        &self.manifest.views[i]
    }

    /// Detector of the first view; training assumes all views share it.
    pub fn detector(&self) -> DetectorConfig {
        self.manifest.views[0].detector_config()
    }

    pub fn bound_radius_mm(&self) -> f64 {
        self.manifest.bound_radius_mm
    }
}

/// Bilinear samples of `img` at the pattern's grid points, row-major.
pub fn extract_patch(img: &Image, pattern: &PatchPattern) -> Vec<f32> {
    pattern
        .points()
        .into_iter()
        .map(|(x, y)| img.sample_bilinear(x, y))
        .collect()
}
