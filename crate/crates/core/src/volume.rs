//! Voxel attenuation volumes, procedural phantoms and the RVOL file format.
//!
//! Attenuation is stored as linear coefficients in mm⁻¹. Reference values
//! at roughly 60 keV: soft tissue ≈ 0.02, cortical bone ≈ 0.048.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::rng::{substream, Stream};

pub const MU_SOFT_TISSUE: f32 = 0.02;
pub const MU_CORTICAL_BONE: f32 = 0.048;

const RVOL_MAGIC: &[u8; 4] = b"RVOL";
const RVOL_VERSION: u32 = 1;
const RVOL_HEADER: usize = 4 + 4 + 3 * 4 + 3 * 4;

/// Grid of attenuation coefficients, x-fastest, centred on the isocenter.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelVolume {
    dims: [usize; 3],
    spacing: [f32; 3],
    mu: Vec<f32>,
}

impl VoxelVolume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], mu: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|d| *d < 2) {
            return Err(Error::Invalid(format!("volume dims {dims:?} must be >= 2")));
        }
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Invalid(format!("spacing {spacing:?} must be > 0")));
        }
        let n = dims.iter().product::<usize>();
        if mu.len() != n {
            return Err(Error::TruncatedPayload {
                expected: n,
                found: mu.len(),
            });
        }
        if mu.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Invalid("attenuation must be finite and >= 0".into()));
        }
        Ok(Self { dims, spacing, mu })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn mu(&self) -> &[f32] {
        &self.mu
    }

    pub fn extent_mm(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.dims[i] as f64 * self.spacing[i] as f64)
    }

    /// Radius of the sphere circumscribing the volume box.
    pub fn bound_radius_mm(&self) -> f64 {
        let e = self.extent_mm();
        0.5 * (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt()
    }

    pub fn voxel(&self, i: usize, j: usize, k: usize) -> f32 {
        self.mu[(k * self.dims[1] + j) * self.dims[0] + i]
    }

    /// Physical position (mm) of a voxel centre.
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let idx = [i, j, k];
        [0, 1, 2].map(|a| (idx[a] as f64 + 0.5 - self.dims[a] as f64 / 2.0) * self.spacing[a] as f64)
    }

    /// Trilinear interpolation between voxel centres; zero outside the box,
    /// edge-clamped in the outer half voxel.
    pub fn sample(&self, p: [f64; 3]) -> f64 {
        let ext = self.extent_mm();
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            if p[a].abs() > ext[a] / 2.0 {
                return 0.0;
            }
            let g = ((p[a] + ext[a] / 2.0) / self.spacing[a] as f64 - 0.5)
                .clamp(0.0, (self.dims[a] - 1) as f64);
            let i0 = (g.floor() as usize).min(self.dims[a] - 2);
            base[a] = i0;
            frac[a] = g - i0 as f64;
        }
        let [i, j, k] = base;
        let [fx, fy, fz] = frac;
        let v = |di, dj, dk| self.voxel(i + di, j + dj, k + dk) as f64;
        let c00 = v(0, 0, 0) * (1.0 - fx) + v(1, 0, 0) * fx;
        let c10 = v(0, 1, 0) * (1.0 - fx) + v(1, 1, 0) * fx;
        let c01 = v(0, 0, 1) * (1.0 - fx) + v(1, 0, 1) * fx;
        let c11 = v(0, 1, 1) * (1.0 - fx) + v(1, 1, 1) * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        c0 * (1.0 - fz) + c1 * fz
    }

    /// Returns a copy with every coefficient multiplied by `k`.
    pub fn scaled(&self, k: f32) -> Result<Self> {
        Self::new(self.dims, self.spacing, self.mu.iter().map(|v| v * k).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(RVOL_HEADER + 4 * self.mu.len());
        out.extend_from_slice(RVOL_MAGIC);
        out.extend_from_slice(&RVOL_VERSION.to_le_bytes());
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for s in self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for v in &self.mu {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != RVOL_MAGIC {
            return Err(Error::BadMagic {
                expected: "RVOL".into(),
                found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
            });
        }
        if bytes.len() < RVOL_HEADER {
            return Err(Error::Format {
                what: "RVOL",
                msg: format!("header needs {RVOL_HEADER} bytes, file has {}", bytes.len()),
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != RVOL_VERSION {
            return Err(Error::VersionMismatch {
                expected: RVOL_VERSION,
                found: version,
            });
        }
        let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
        let spacing = [f32_at(20), f32_at(24), f32_at(28)];
        let expected = dims.iter().product::<usize>();
        let payload = &bytes[RVOL_HEADER..];
        let found = payload.len() / 4;
        if found != expected || payload.len() % 4 != 0 {
            return Err(Error::TruncatedPayload { expected, found });
        }
        let mu = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(dims, spacing, mu)
    }
}

pub fn save_volume(vol: &VoxelVolume, path: &Path) -> Result<()> {
    fs::write(path, vol.to_bytes()).map_err(io_err(path))
}

pub fn load_volume(path: &Path) -> Result<VoxelVolume> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    VoxelVolume::from_bytes(&bytes)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Compose {
    #[default]
    Overwrite,
    Add,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    #[default]
    Z,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        mu: f32,
        #[serde(default)]
        compose: Compose,
    },
    Cylinder {
        center: [f64; 3],
        radius: f64,
        half_length: f64,
        #[serde(default)]
        axis: Axis,
        mu: f32,
        #[serde(default)]
        compose: Compose,
    },
    Shell {
        center: [f64; 3],
        inner_radius: f64,
        outer_radius: f64,
        mu: f32,
        #[serde(default)]
        compose: Compose,
    },
}

impl Primitive {
    pub fn mu(&self) -> f32 {
        match self {
            Primitive::Sphere { mu, .. } | Primitive::Cylinder { mu, .. } | Primitive::Shell { mu, .. } => *mu,
        }
    }

    pub fn compose(&self) -> Compose {
        match self {
            Primitive::Sphere { compose, .. }
            | Primitive::Cylinder { compose, .. }
            | Primitive::Shell { compose, .. } => *compose,
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let dist = |c: [f64; 3]| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt();
        match self {
            Primitive::Sphere { center, radius, .. } => dist(*center) <= *radius,
            Primitive::Shell {
                center,
                inner_radius,
                outer_radius,
                ..
            } => {
                let d = dist(*center);
                d >= *inner_radius && d <= *outer_radius
            }
            Primitive::Cylinder {
                center,
                radius,
                half_length,
                axis,
                ..
            } => {
                let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
                let (along, a, b) = match axis {
                    Axis::X => (d[0], d[1], d[2]),
                    Axis::Y => (d[1], d[0], d[2]),
                    Axis::Z => (d[2], d[0], d[1]),
                };
                along.abs() <= *half_length && (a * a + b * b).sqrt() <= *radius
            }
        }
    }

    /// Axis-aligned half extents around the centre.
    fn half_extent(&self) -> ([f64; 3], [f64; 3]) {
        match self {
            Primitive::Sphere { center, radius, .. } => (*center, [*radius; 3]),
            Primitive::Shell {
                center, outer_radius, ..
            } => (*center, [*outer_radius; 3]),
            Primitive::Cylinder {
                center,
                radius,
                half_length,
                axis,
                ..
            } => {
                let mut h = [*radius; 3];
                h[*axis as usize] = *half_length;
                (*center, h)
            }
        }
    }
}

/// Declarative phantom: primitives composed in order inside a box centred
/// on the isocenter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub extent_mm: [f64; 3],
    pub primitives: Vec<Primitive>,
    #[serde(default)]
    pub seed: u64,
    /// Relative multiplicative noise on non-zero voxels, drawn from `seed`.
    #[serde(default)]
    pub texture: f32,
}

impl PhantomSpec {
    /// Tissue cylinder with two off-axis bones (cortical shell around a
    /// marrow core) and a dense sphere, placed asymmetrically so views
    /// change with azimuth. `seed` jitters positions and sizes.
    pub fn two_material(extent_mm: f64, seed: u64) -> Self {
        let mut rng = substream(seed, Stream::Phantom);
        let e = extent_mm;
        let mut jitter = |s: f64| 1.0 + s * (2.0 * rng.random::<f64>() - 1.0);
        let body_r = 0.32 * e * jitter(0.1);
        let bone_r = 0.07 * e * jitter(0.15);
        let off = 0.12 * e;
        let a = (0.4 * jitter(0.5), -0.3 * jitter(0.5));
        let b = (-0.5 * jitter(0.5), 0.45 * jitter(0.5));
        let ball = (0.45 * jitter(0.3), 0.35 * jitter(0.3), -0.15 * e * jitter(0.3));
        let bone = |cx: f64, cy: f64, r: f64, half: f64| {
            [
                Primitive::Cylinder {
                    center: [cx, cy, 0.0],
                    radius: r,
                    half_length: half,
                    axis: Axis::Z,
                    mu: MU_CORTICAL_BONE,
                    compose: Compose::Overwrite,
                },
                Primitive::Cylinder {
                    center: [cx, cy, 0.0],
                    radius: 0.55 * r,
                    half_length: half,
                    axis: Axis::Z,
                    mu: 0.024,
                    compose: Compose::Overwrite,
                },
            ]
        };
        let mut primitives = vec![Primitive::Cylinder {
            center: [0.0, 0.0, 0.0],
            radius: body_r,
            half_length: 0.38 * e,
            axis: Axis::Z,
            mu: MU_SOFT_TISSUE,
            compose: Compose::Overwrite,
        }];
        primitives.extend(bone(a.0 * off * 2.0, a.1 * off * 2.0, bone_r, 0.3 * e));
        primitives.extend(bone(b.0 * off * 2.0, b.1 * off * 2.0, 0.8 * bone_r, 0.22 * e));
        primitives.push(Primitive::Sphere {
            center: [ball.0 * off * 2.0, ball.1 * off * 2.0 * -1.0, ball.2],
            radius: 0.06 * e,
            mu: MU_CORTICAL_BONE,
            compose: Compose::Overwrite,
        });
        Self {
            extent_mm: [e; 3],
            primitives,
            seed,
            texture: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::Invalid("phantom has no primitives".into()));
        }
        if self.extent_mm.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::Invalid("phantom extent must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.texture) {
            return Err(Error::Invalid("texture must be in [0, 1)".into()));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if !(p.mu() >= 0.0) {
                return Err(Error::Invalid(format!("primitive {i}: mu must be >= 0")));
            }
            let (c, h) = p.half_extent();
            for a in 0..3 {
                if (c[a] - h[a]) < -self.extent_mm[a] / 2.0 - 1e-9 || (c[a] + h[a]) > self.extent_mm[a] / 2.0 + 1e-9 {
                    return Err(Error::Invalid(format!("primitive {i} extends outside the phantom extent")));
                }
            }
        }
        Ok(())
    }

    /// Attenuation at a physical point, before texture noise.
    pub fn mu_at(&self, p: [f64; 3]) -> f32 {
        let mut mu = 0.0f32;
        for prim in &self.primitives {
            if prim.contains(p) {
                match prim.compose() {
                    Compose::Overwrite => mu = prim.mu(),
                    Compose::Add => mu += prim.mu(),
                }
            }
        }
        mu
    }
}

/// Evaluates `spec` at every voxel centre of a `dims` grid.
pub fn make_phantom(spec: &PhantomSpec, dims: [usize; 3], spacing: [f32; 3]) -> Result<VoxelVolume> {
    spec.validate()?;
    let mut vol = VoxelVolume::new(dims, spacing, vec![0.0; dims.iter().product()])?;
    let mut rng = substream(spec.seed, Stream::Phantom);
    let mut mu = Vec::with_capacity(vol.mu.len());
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let mut v = spec.mu_at(vol.voxel_center(i, j, k));
                if spec.texture > 0.0 && v > 0.0 {
                    v *= 1.0 + spec.texture * (2.0 * rng.random::<f32>() - 1.0);
                }
                mu.push(v.max(0.0));
            }
        }
    }
    vol.mu = mu;
    Ok(vol)
}
