#![allow(dead_code)]

use std::collections::BTreeMap;
use std::f64::consts::PI;

use radfield::autodiff::ParamSet;
use radfield::field::{FieldConfig, Generator};
use radfield::geometry::{DetectorConfig, Pose};
use radfield::sampler::{rays_for_patch, stratified_points, PatchPattern, RayBundle, SamplePoints};
use radfield::rng::{substream, Stream};

pub fn small_field() -> FieldConfig {
    FieldConfig {
        depth: 4,
        width: 32,
        shape_dim: 8,
        appearance_dim: 8,
        ..FieldConfig::default()
    }
}

pub fn small_generator(seed: u64) -> Generator {
    Generator::new(small_field(), seed).unwrap()
}

pub fn small_detector() -> DetectorConfig {
    DetectorConfig {
        width: 16,
        height: 16,
        pitch_mm: 8.0,
        sid_mm: 600.0,
        sdd_mm: 1000.0,
    }
}

pub const BOUND_MM: f64 = 90.0;

pub fn probe_rays(pattern: &PatchPattern, n: usize) -> (RayBundle, SamplePoints) {
    let pose = Pose::new(30.0, 75.0, 600.0);
    let rays = rays_for_patch(&pose, &small_detector(), pattern, BOUND_MM).unwrap();
    let pts = stratified_points(&rays, n, &mut substream(0, Stream::Jitter), false).unwrap();
    (rays, pts)
}

fn encode(v: &[f64], m: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for &p in v {
        for l in 0..m {
            let a = PI * 2f64.powi(l as i32) * p;
            out.push(a.cos());
            out.push(a.sin());
        }
    }
    out
}

pub type Params64 = BTreeMap<String, Vec<f64>>;

pub fn params64(p: &ParamSet) -> Params64 {
    p.iter().map(|(n, t)| (n.to_string(), t.data().iter().map(|v| *v as f64).collect())).collect()
}

fn tensor(p: &Params64, name: &str) -> Vec<f64> {
    p[name].clone()
}

/// `x·W` for `W` stored `[in, out]` row-major.
fn matvec(x: &[f64], w: &[f64], out: usize) -> Vec<f64> {
    let mut y = vec![0.0; out];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..out {
            y[j] += xi * w[i * out + j];
        }
    }
    y
}

fn add(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Plain f64 evaluation of the field at one point: `(sigma, color)`.
pub fn reference_point(
    cfg: &FieldConfig,
    p: &Params64,
    x_norm: [f64; 3],
    dir: [f64; 3],
    z_s: &[f64],
    z_a: &[f64],
) -> (f64, f64) {
    let w = cfg.width;
    let xe = encode(&x_norm, cfg.encoding.m_x);
    let de = encode(&dir, cfg.encoding.m_d);
    let mut h: Vec<f64> = Vec::new();
    for i in 0..cfg.depth {
        let mut pre = tensor(p, &format!("g/l{i}/b"));
        if i > 0 {
            add(&mut pre, &matvec(&h, &tensor(p, &format!("g/l{i}/w")), w));
        }
        if let Some(wx) = p.get(&format!("g/l{i}/wx")) {
            add(&mut pre, &matvec(&xe, wx, w));
            add(&mut pre, &matvec(z_s, &tensor(p, &format!("g/l{i}/wz")), w));
        }
        h = pre.into_iter().map(|v| v.max(0.0)).collect();
    }
    let s = matvec(&h, &tensor(p, "g/sigma/w"), 1)[0] + tensor(p, "g/sigma/b")[0];
    let sigma = if s > 30.0 { s } else { s.exp().ln_1p() };
    let cw = w / 2;
    let mut hc = tensor(p, "g/color/b");
    add(&mut hc, &matvec(&h, &tensor(p, "g/color/wh"), cw));
    add(&mut hc, &matvec(&de, &tensor(p, "g/color/wd"), cw));
    add(&mut hc, &matvec(z_a, &tensor(p, "g/color/wz"), cw));
    let hc: Vec<f64> = hc.into_iter().map(|v| v.max(0.0)).collect();
    let c = matvec(&hc, &tensor(p, "g/out/w"), 1)[0] + tensor(p, "g/out/b")[0];
    (sigma, 1.0 / (1.0 + (-c).exp()))
}

/// Plain f64 rendering of ray `r`.
pub fn reference_pixel(
    cfg: &FieldConfig,
    p: &Params64,
    rays: &RayBundle,
    pts: &SamplePoints,
    r: usize,
    z_s: &[f64],
    z_a: &[f64],
) -> f64 {
    let n = pts.n;
    let mut pix = 0.0;
    let mut acc = 0f64;
    for i in 0..n {
        let k = r * n + i;
        let x = [0, 1, 2].map(|a| pts.positions[k * 3 + a] / BOUND_MM);
        let (sigma, c) = reference_point(cfg, p, x, rays.directions[r], z_s, z_a);
        let sd = sigma * pts.deltas[k] / BOUND_MM;
        pix += ((-acc).exp() - (-(acc + sd)).exp()) * c;
        acc += sd;
    }
    pix + (-acc).exp() * cfg.background as f64
}

/// Five-point central difference of `f` at `x` along coordinate `i`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let at = |d: f64| {
        let mut y = x.to_vec();
        y[i] += d;
        f(&y)
    };
    (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h)
}

/// `‖a − b‖ / max(‖b‖, 1e-12)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    d / n.max(1e-12)
}
