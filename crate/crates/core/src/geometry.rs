//! Cone-beam camera model shared by the projector and the ray sampler.
//!
//! The rotation axis is +z. The source sits at `radius` from the
//! isocenter, `polar` degrees away from +z and `azimuth` degrees around it,
//! and looks at the isocenter. Detector row 0 is the top of the image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Vec3, k: f64) -> Vec3 {
    [a[0] * k, a[1] * k, a[2] * k]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub width: usize,
    pub height: usize,
    pub pitch_mm: f64,
    pub sid_mm: f64,
    pub sdd_mm: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            pitch_mm: 2.0,
            sid_mm: 600.0,
            sdd_mm: 1000.0,
        }
    }
}

impl DetectorConfig {
    /// 64×64 panel covering the same field of view as the default.
    pub fn desk() -> Self {
        Self {
            width: 64,
            height: 64,
            pitch_mm: 4.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Geometry("detector has zero pixels".into()));
        }
        if !(self.pitch_mm > 0.0) || !(self.sid_mm > 0.0) || !(self.sdd_mm > 0.0) {
            return Err(Error::Geometry("pitch and distances must be > 0".into()));
        }
        if self.sdd_mm <= self.sid_mm {
            return Err(Error::Geometry(format!(
                "source-to-detector {} must exceed source-to-isocenter {}",
                self.sdd_mm, self.sid_mm
            )));
        }
        Ok(())
    }

    /// Same geometry at a different pixel count, keeping the physical panel.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pitch_mm: self.pitch_mm * self.width as f64 / width as f64,
            ..*self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub azimuth_deg: f64,
    pub polar_deg: f64,
    pub radius_mm: f64,
}

impl Pose {
    pub fn new(azimuth_deg: f64, polar_deg: f64, radius_mm: f64) -> Self {
        Self {
            azimuth_deg,
            polar_deg,
            radius_mm,
        }
    }

    pub fn source(&self) -> Vec3 {
        let (st, ct) = self.polar_deg.to_radians().sin_cos();
        let (sp, cp) = self.azimuth_deg.to_radians().sin_cos();
        scale([st * cp, st * sp, ct], self.radius_mm)
    }

    /// Orthonormal (forward, right, up) frame of the camera.
    pub fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let forward = normalize(scale(self.source(), -1.0));
        let (sp, cp) = self.azimuth_deg.to_radians().sin_cos();
        let right = [-sp, cp, 0.0];
        let up = cross(right, forward);
        (forward, right, up)
    }
}

/// Source position and unit direction of the ray through normalized
/// detector coordinates `(px, py)` in [0,1]², `py` growing downwards.
pub fn detector_ray(pose: &Pose, det: &DetectorConfig, px: f64, py: f64) -> (Vec3, Vec3) {
    let src = pose.source();
    let (f, right, up) = pose.basis();
    let center = add(src, scale(f, det.sdd_mm));
    let w = det.width as f64 * det.pitch_mm;
    let h = det.height as f64 * det.pitch_mm;
    let p = add(
        center,
        add(scale(right, (px - 0.5) * w), scale(up, (0.5 - py) * h)),
    );
    (src, normalize(sub(p, src)))
}

/// Normalized coordinates of the centre of pixel `(row, col)`.
pub fn pixel_center(det: &DetectorConfig, row: usize, col: usize) -> (f64, f64) {
    (
        (col as f64 + 0.5) / det.width as f64,
        (row as f64 + 0.5) / det.height as f64,
    )
}

/// Entry and exit distances of a ray through an axis-aligned box centred on
/// the origin, or `None` when it misses.
pub fn clip_box(origin: Vec3, dir: Vec3, half: Vec3) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let mut lo = (-half[a] - origin[a]) * inv;
        let mut hi = (half[a] - origin[a]) * inv;
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
    }
    (t1 > t0.max(0.0)).then_some((t0.max(0.0), t1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_ray_hits_isocenter() {
        let pose = Pose::new(37.0, 70.0, 600.0);
        let (o, d) = detector_ray(&pose, &DetectorConfig::default(), 0.5, 0.5);
        let to_iso = normalize(scale(o, -1.0));
        for a in 0..3 {
            assert!((d[a] - to_iso[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn basis_is_orthonormal_and_up_points_up() {
        let (f, r, u) = Pose::new(123.0, 80.0, 500.0).basis();
        assert!(dot(f, r).abs() < 1e-12 && dot(f, u).abs() < 1e-12 && dot(r, u).abs() < 1e-12);
        assert!((norm(u) - 1.0).abs() < 1e-12);
        assert!(u[2] > 0.0);
    }

    #[test]
    fn top_row_looks_upwards() {
        let pose = Pose::new(0.0, 90.0, 600.0);
        let (_, d) = detector_ray(&pose, &DetectorConfig::default(), 0.5, 0.0);
        assert!(d[2] > 0.0);
    }

    #[test]
    fn clip_box_chord() {
        let (t0, t1) = clip_box([-100.0, 0.0, 0.0], [1.0, 0.0, 0.0], [10.0; 3]).unwrap();
        assert!((t0 - 90.0).abs() < 1e-12 && (t1 - 110.0).abs() < 1e-12);
        assert!(clip_box([-100.0, 50.0, 0.0], [1.0, 0.0, 0.0], [10.0; 3]).is_none());
    }

    #[test]
    fn detector_validation() {
        let mut d = DetectorConfig::default();
        d.sdd_mm = 500.0;
        assert!(d.validate().is_err());
        assert!(DetectorConfig::desk().validate().is_ok());
    }
}
