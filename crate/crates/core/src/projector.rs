//! Digitally reconstructed radiographs by fixed-step ray marching.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::geometry::{clip_box, detector_ray, pixel_center, DetectorConfig, Pose};
use crate::image::Image;
use crate::volume::VoxelVolume;

pub const DEFAULT_POLAR_DEG: f64 = 77.5;
pub const MANIFEST_FILE: &str = "views.json";

/// Half the smallest voxel spacing.
pub fn default_step(vol: &VoxelVolume) -> f64 {
    vol.spacing().iter().cloned().fold(f32::INFINITY, f32::min) as f64 / 2.0
}

/// Line integral of μ along one ray, midpoint rule.
pub fn line_integral(vol: &VoxelVolume, origin: [f64; 3], dir: [f64; 3], step_mm: f64) -> f64 {
    let half = vol.extent_mm().map(|e| e / 2.0);
    let Some((t0, t1)) = clip_box(origin, dir, half) else {
        return 0.0;
    };
    let n = ((t1 - t0) / step_mm).ceil().max(1.0) as usize;
    let h = (t1 - t0) / n as f64;
    let mut acc = 0.0;
    for i in 0..n {
        let t = t0 + (i as f64 + 0.5) * h;
        acc += vol.sample([origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]]);
    }
    acc * h
}

pub fn project(vol: &VoxelVolume, pose: &Pose, det: &DetectorConfig, step_mm: f64) -> Result<Image> {
    det.validate()?;
    if !(step_mm > 0.0) {
        return Err(Error::Invalid(format!("step must be > 0, got {step_mm}")));
    }
    let src = pose.source();
    let ext = vol.extent_mm();
    if (0..3).all(|a| src[a].abs() <= ext[a] / 2.0) {
        return Err(Error::Geometry("source lies inside the volume".into()));
    }
    let mut data = vec![0f32; det.width * det.height];
    data.par_chunks_mut(det.width).enumerate().for_each(|(row, line)| {
        for (col, px) in line.iter_mut().enumerate() {
            let (u, v) = pixel_center(det, row, col);
            let (o, d) = detector_ray(pose, det, u, v);
            let l = line_integral(vol, o, d, step_mm);
            *px = (1.0 - (-l).exp()) as f32;
        }
    });
    Image::new(det.width, det.height, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestDetector {
    pub w: usize,
    pub h: usize,
    pub pitch_mm: f64,
    pub sdd_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub file: String,
    pub azimuth_deg: f64,
    pub polar_deg: f64,
    pub radius_mm: f64,
    pub detector: ManifestDetector,
}

impl ViewRecord {
    pub fn pose(&self) -> Pose {
        Pose::new(self.azimuth_deg, self.polar_deg, self.radius_mm)
    }

    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig {
            width: self.detector.w,
            height: self.detector.h,
            pitch_mm: self.detector.pitch_mm,
            sid_mm: self.radius_mm,
            sdd_mm: self.detector.sdd_mm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Radius of the sphere enclosing the projected volume.
    pub bound_radius_mm: f64,
    pub views: Vec<ViewRecord>,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "views.json",
            msg: e.to_string(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text).map_err(io_err(&path))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetSpec {
    pub n_views: usize,
    pub azimuth_step_deg: f64,
    pub polar_deg: f64,
    pub step_mm: Option<f64>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_views: 72,
            azimuth_step_deg: 5.0,
            polar_deg: DEFAULT_POLAR_DEG,
            step_mm: None,
        }
    }
}

/// Projects `n_views` azimuths `0, step, 2·step, …` and writes them with a
/// `views.json` manifest.
pub fn generate_dataset(
    vol: &VoxelVolume,
    det: &DetectorConfig,
    out_dir: &Path,
    spec: &DatasetSpec,
) -> Result<DatasetManifest> {
    if spec.n_views == 0 {
        return Err(Error::Invalid("n_views must be >= 1".into()));
    }
    if spec.n_views as f64 * spec.azimuth_step_deg > 360.0 + 1e-9 {
        return Err(Error::Invalid(format!(
            "{} views at {}° span {}° > 360°",
            spec.n_views,
            spec.azimuth_step_deg,
            spec.n_views as f64 * spec.azimuth_step_deg
        )));
    }
    det.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let step = spec.step_mm.unwrap_or_else(|| default_step(vol));
    let mut views = Vec::with_capacity(spec.n_views);
    for i in 0..spec.n_views {
        let pose = Pose::new(i as f64 * spec.azimuth_step_deg, spec.polar_deg, det.sid_mm);
        let img = project(vol, &pose, det, step)?;
        let file = format!("view_{i:03}.png");
        img.save_png(&out_dir.join(&file))?;
        views.push(ViewRecord {
            file,
            azimuth_deg: pose.azimuth_deg,
            polar_deg: pose.polar_deg,
            radius_mm: pose.radius_mm,
            detector: ManifestDetector {
                w: det.width,
                h: det.height,
                pitch_mm: det.pitch_mm,
                sdd_mm: det.sdd_mm,
            },
        });
    }
    let manifest = DatasetManifest {
        bound_radius_mm: vol.bound_radius_mm(),
        views,
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}
