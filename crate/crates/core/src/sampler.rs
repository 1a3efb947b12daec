//! Pose and patch-pattern sampling, patch rays and stratified depths.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{detector_ray, DetectorConfig, Pose, Vec3};

pub const DEFAULT_POLAR_RANGE: [f64; 2] = [70.0, 85.0];
pub const DEFAULT_S_MIN: f64 = 0.25;
/// Slack on the bounding sphere when placing near and far planes.
pub const BOUND_MARGIN: f64 = 1.1;

pub fn sample_pose<R: Rng>(rng: &mut R, polar_range_deg: [f64; 2], radius_mm: f64) -> Result<Pose> {
    let [lo, hi] = polar_range_deg;
    if !(lo <= hi) || !(0.0..=180.0).contains(&lo) || !(0.0..=180.0).contains(&hi) {
        return Err(Error::Invalid(format!("polar range [{lo}, {hi}] is empty or outside [0, 180]")));
    }
    if !(radius_mm > 0.0) {
        return Err(Error::Invalid("pose radius must be > 0".into()));
    }
    let azimuth = rng.random_range(0.0..360.0);
    let u: f64 = rng.random();
    Ok(Pose::new(azimuth, lo + (hi - lo) * u, radius_mm))
}

/// K×K sparse pixel grid at scale `s` centred on `u` (normalized image
/// coordinates, `u[1]` growing downwards).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchPattern {
    pub u: [f64; 2],
    pub s: f64,
    pub k: usize,
}

impl PatchPattern {
    /// The whole image at `k`×`k` pixel centres.
    pub fn full(k: usize) -> Self {
        Self { u: [0.5, 0.5], s: 1.0, k }
    }

    /// Normalized coordinates of grid point `(row, col)`.
    pub fn point(&self, row: usize, col: usize) -> (f64, f64) {
        let k = self.k as f64;
        (
            self.u[0] + self.s * ((col as f64 + 0.5) / k - 0.5),
            self.u[1] + self.s * ((row as f64 + 0.5) / k - 0.5),
        )
    }

    /// Row-major grid points.
    pub fn points(&self) -> Vec<(f64, f64)> {
        (0..self.k)
            .flat_map(|r| (0..self.k).map(move |c| (r, c)))
            .map(|(r, c)| self.point(r, c))
            .collect()
    }
}

pub fn sample_patch_pattern<R: Rng>(rng: &mut R, k: usize, s_range: [f64; 2]) -> Result<PatchPattern> {
    if k < 2 {
        return Err(Error::Invalid(format!("patch size {k} must be >= 2")));
    }
    let [lo, hi] = s_range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::Invalid(format!("scale range [{lo}, {hi}] must lie in (0, 1]")));
    }
    let s = lo + (hi - lo) * rng.random::<f64>();
    let mut u = [0.5; 2];
    for c in &mut u {
        *c = s / 2.0 + (1.0 - s) * rng.random::<f64>();
    }
    Ok(PatchPattern { u, s, k })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RayBundle {
    pub origins: Vec<Vec3>,
    pub directions: Vec<Vec3>,
    pub near: f64,
    pub far: f64,
}

impl RayBundle {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Rays `start..start+len`.
    pub fn slice(&self, start: usize, len: usize) -> RayBundle {
        RayBundle {
            origins: self.origins[start..start + len].to_vec(),
            directions: self.directions[start..start + len].to_vec(),
            near: self.near,
            far: self.far,
        }
    }
}

pub fn near_far(radius_mm: f64, bound_radius_mm: f64) -> Result<(f64, f64)> {
    let near = radius_mm - BOUND_MARGIN * bound_radius_mm;
    let far = radius_mm + BOUND_MARGIN * bound_radius_mm;
    if !(near > 0.0) {
        return Err(Error::Geometry(format!(
            "source at {radius_mm} mm is inside the bounding sphere ({bound_radius_mm} mm)"
        )));
    }
    Ok((near, far))
}

pub fn rays_for_patch(
    pose: &Pose,
    det: &DetectorConfig,
    pattern: &PatchPattern,
    bound_radius_mm: f64,
) -> Result<RayBundle> {
    let (near, far) = near_far(pose.radius_mm, bound_radius_mm)?;
    let (origins, directions) = pattern
        .points()
        .into_iter()
        .map(|(x, y)| detector_ray(pose, det, x, y))
        .unzip();
    Ok(RayBundle {
        origins,
        directions,
        near,
        far,
    })
}

/// Points along each ray; `depths` and `deltas` are R×N in mm, `positions`
/// R×N×3 in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePoints {
    pub n: usize,
    pub positions: Vec<f64>,
    pub depths: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl SamplePoints {
    pub fn rays(&self) -> usize {
        self.depths.len() / self.n
    }
}

/// One depth per equal bin between near and far: a uniform draw with
/// `jitter`, the bin midpoint otherwise. The last delta runs to `far`.
pub fn stratified_points<R: Rng>(
    bundle: &RayBundle,
    n: usize,
    rng: &mut R,
    jitter: bool,
) -> Result<SamplePoints> {
    if n < 2 {
        return Err(Error::Invalid(format!("need at least 2 samples per ray, got {n}")));
    }
    if !(bundle.near < bundle.far) {
        return Err(Error::Invalid(format!("near {} must be < far {}", bundle.near, bundle.far)));
    }
    let r = bundle.len();
    let bin = (bundle.far - bundle.near) / n as f64;
    let mut depths = Vec::with_capacity(r * n);
    let mut deltas = Vec::with_capacity(r * n);
    let mut positions = Vec::with_capacity(r * n * 3);
    for ray in 0..r {
        let first = depths.len();
        for i in 0..n {
            let t = if jitter { rng.random::<f64>() } else { 0.5 };
            depths.push(bundle.near + (i as f64 + t) * bin);
        }
        for i in 0..n {
            let d = depths[first + i];
            let next = if i + 1 < n { depths[first + i + 1] } else { bundle.far };
            deltas.push(next - d);
            let (o, dir) = (bundle.origins[ray], bundle.directions[ray]);
            positions.extend_from_slice(&[o[0] + d * dir[0], o[1] + d * dir[1], o[2] + d * dir[2]]);
        }
    }
    Ok(SamplePoints {
        n,
        positions,
        depths,
        deltas,
    })
}
