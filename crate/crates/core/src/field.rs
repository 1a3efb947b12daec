//! Conditional radiance field, alpha compositing and rendering.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use radfield_autodiff::{Graph, ParamSet, Real, Tensor, Var};

use crate::encoding::{encode_into, EncodingConfig};
use crate::error::{Error, Result};
use crate::geometry::{DetectorConfig, Pose};
use crate::image::Image;
use crate::rng::{keyed, substream, Stream};
use crate::sampler::{rays_for_patch, stratified_points, PatchPattern, RayBundle, SamplePoints};

/// Guard for the expected-depth normalisation.
pub const DEPTH_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub depth: usize,
    pub width: usize,
    pub shape_dim: usize,
    pub appearance_dim: usize,
    pub encoding: EncodingConfig,
    /// Value composited behind the last sample.
    pub background: f32,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            depth: 8,
            width: 256,
            shape_dim: 64,
            appearance_dim: 64,
            encoding: EncodingConfig::default(),
            background: 1.0,
        }
    }
}

impl FieldConfig {
    pub fn desk() -> Self {
        Self {
            depth: 4,
            width: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoding.validate()?;
        if self.depth < 1 || self.width < 2 {
            return Err(Error::Config("field needs depth >= 1 and width >= 2".into()));
        }
        if self.shape_dim == 0 || self.appearance_dim == 0 {
            return Err(Error::Config("latent dimensions must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.background) {
            return Err(Error::Config("background must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Layer receiving the second copy of the encoded position and shape code.
    pub fn skip_layer(&self) -> Option<usize> {
        (self.depth >= 2).then_some(self.depth / 2)
    }

    fn color_width(&self) -> usize {
        self.width / 2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Latents {
    pub z_s: Vec<f32>,
    pub z_a: Vec<f32>,
}

impl Latents {
    pub fn sample<R: Rng>(rng: &mut R, cfg: &FieldConfig) -> Self {
        let mut draw = |n| (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let z_s = draw(cfg.shape_dim);
        let z_a = draw(cfg.appearance_dim);
        Self { z_s, z_a }
    }

    pub fn zeros(cfg: &FieldConfig) -> Self {
        Self {
            z_s: vec![0.0; cfg.shape_dim],
            z_a: vec![0.0; cfg.appearance_dim],
        }
    }

    /// Places both codes on the tape, differentiable when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<(Var, Var)> {
        let to = |g: &mut Graph, v: &[f32]| {
            let data = v.iter().map(|x| *x as Real).collect();
            if trainable {
                g.variable(&[1, v.len()], data)
            } else {
                g.constant(&[1, v.len()], data)
            }
        };
        Ok((to(g, &self.z_s)?, to(g, &self.z_a)?))
    }
}

#[derive(Clone, Copy)]
struct Layer {
    w: usize,
    b: usize,
    wx: Option<usize>,
    wz: Option<usize>,
}

#[derive(Clone)]
struct Slots {
    layers: Vec<Layer>,
    sigma_w: usize,
    sigma_b: usize,
    color_wh: usize,
    color_wd: usize,
    color_wz: usize,
    color_b: usize,
    out_w: usize,
    out_b: usize,
}

/// Radiance field G_θ: shape MLP with a density head and a pixel head.
#[derive(Clone)]
pub struct Generator {
    config: FieldConfig,
    params: ParamSet,
    slots: Slots,
}

/// Shapes of every generator tensor, in parameter order.
pub fn generator_layout(cfg: &FieldConfig) -> Vec<(String, Vec<usize>)> {
    let (w, px, pd) = (cfg.width, cfg.encoding.position_dim(), cfg.encoding.direction_dim());
    let cw = cfg.color_width();
    let mut out = Vec::new();
    for i in 0..cfg.depth {
        if i == 0 {
            out.push((format!("g/l{i}/wx"), vec![px, w]));
            out.push((format!("g/l{i}/wz"), vec![cfg.shape_dim, w]));
        } else {
            out.push((format!("g/l{i}/w"), vec![w, w]));
            if Some(i) == cfg.skip_layer() {
                out.push((format!("g/l{i}/wx"), vec![px, w]));
                out.push((format!("g/l{i}/wz"), vec![cfg.shape_dim, w]));
            }
        }
        out.push((format!("g/l{i}/b"), vec![w]));
    }
    out.push(("g/sigma/w".into(), vec![w, 1]));
    out.push(("g/sigma/b".into(), vec![1]));
    out.push(("g/color/wh".into(), vec![w, cw]));
    out.push(("g/color/wd".into(), vec![pd, cw]));
    out.push(("g/color/wz".into(), vec![cfg.appearance_dim, cw]));
    out.push(("g/color/b".into(), vec![cw]));
    out.push(("g/out/w".into(), vec![cw, 1]));
    out.push(("g/out/b".into(), vec![1]));
    out
}

/// He-uniform weights keyed by tensor name, zero biases.
pub(crate) fn init_params(layout: &[(String, Vec<usize>)], fan_in: impl Fn(&str, &[usize]) -> usize, seed: u64) -> Result<ParamSet> {
    let mut params = ParamSet::new();
    for (name, shape) in layout {
        let n = shape.iter().product::<usize>();
        let data = if name.ends_with("/b") {
            vec![0.0; n]
        } else {
            let bound = (6.0 / fan_in(name, shape) as f64).sqrt();
            let mut rng = keyed(seed, name);
            (0..n).map(|_| rng.random_range(-bound..bound) as Real).collect()
        };
        params.insert(name.clone(), Tensor::param(shape.clone(), data)?);
    }
    Ok(params)
}

impl Generator {
    pub fn new(config: FieldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = generator_layout(&config);
        let (px, d) = (config.encoding.position_dim(), config.shape_dim);
        let w = config.width;
        let skip = config.skip_layer();
        let fan_in = |name: &str, shape: &[usize]| -> usize {
            // Layers fed by split inputs see the width of the joint input.
            if name == "g/l0/wx" || name == "g/l0/wz" {
                px + d
            } else if name.starts_with("g/l") && (name.ends_with("/wx") || name.ends_with("/wz") || skip.map(|s| name == format!("g/l{s}/w")).unwrap_or(false)) {
                w + px + d
            } else if name.starts_with("g/color/w") {
                w + config.encoding.direction_dim() + config.appearance_dim
            } else {
                shape[0]
            }
        };
        let params = init_params(&layout, fan_in, seed)?;
        Self::from_params(config, params)
    }

    /// Wraps an existing parameter table, checking it against `config`.
    pub fn from_params(config: FieldConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        for (name, shape) in generator_layout(&config) {
            match params.get(&name) {
                None => return Err(Error::MissingTensor(name)),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::ArchitectureMismatch {
                        name,
                        expected: shape,
                        found: t.shape().to_vec(),
                    })
                }
                _ => {}
            }
        }
        let slot = |n: &str| params.slot(n).expect("checked above");
        let layers = (0..config.depth)
            .map(|i| {
                let opt = |s: &str| params.slot(&format!("g/l{i}/{s}"));
                Layer {
                    w: opt("w").unwrap_or(usize::MAX),
                    b: slot(&format!("g/l{i}/b")),
                    wx: opt("wx"),
                    wz: opt("wz"),
                }
            })
            .collect();
        let slots = Slots {
            layers,
            sigma_w: slot("g/sigma/w"),
            sigma_b: slot("g/sigma/b"),
            color_wh: slot("g/color/wh"),
            color_wd: slot("g/color/wd"),
            color_wz: slot("g/color/wz"),
            color_b: slot("g/color/b"),
            out_w: slot("g/out/w"),
            out_b: slot("g/out/b"),
        };
        Ok(Self { config, params, slots })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Binds every parameter as a constant (no gradients).
    pub fn bind_frozen(&self, g: &mut Graph) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|(_, t)| g.constant(t.shape(), t.data().to_vec()).map_err(Error::from))
            .collect()
    }

    /// Density and pixel value at `rays·n` points.
    ///
    /// `x_enc` is `[rays·n, 6·m_x]`, `d_enc` is `[rays, 6·m_d]`, latents are
    /// `[1, D]`. Returns `(sigma, color)`, both `[rays, n]`.
    #[allow(clippy::too_many_arguments)]
    pub fn field_eval(
        &self,
        g: &mut Graph,
        p: &[Var],
        x_enc: Var,
        d_enc: Var,
        z_s: Var,
        z_a: Var,
        rays: usize,
        n: usize,
    ) -> Result<(Var, Var)> {
        let cfg = &self.config;
        if g.shape(z_s) != [1, cfg.shape_dim] || g.shape(z_a) != [1, cfg.appearance_dim] {
            return Err(Error::Invalid(format!(
                "latent shapes {:?}/{:?} do not match field ({}, {})",
                g.shape(z_s),
                g.shape(z_a),
                cfg.shape_dim,
                cfg.appearance_dim
            )));
        }
        let s = &self.slots;
        let mut h = x_enc;
        for (i, layer) in s.layers.iter().enumerate() {
            let mut pre = if i == 0 {
                g.linear(x_enc, p[layer.wx.expect("first layer")], p[layer.b])?
            } else {
                g.linear(h, p[layer.w], p[layer.b])?
            };
            if i > 0 {
                if let Some(wx) = layer.wx {
                    let t = g.matmul(x_enc, p[wx])?;
                    pre = g.add(pre, t)?;
                }
            }
            if let Some(wz) = layer.wz {
                let t = g.matmul(z_s, p[wz])?;
                pre = g.add(pre, t)?;
            }
            h = g.relu(pre)?;
        }
        let sigma = g.linear(h, p[s.sigma_w], p[s.sigma_b])?;
        let sigma = g.softplus(sigma)?;
        let sigma = g.reshape(sigma, &[rays, n])?;

        let cw = cfg.color_width();
        let hc = g.linear(h, p[s.color_wh], p[s.color_b])?;
        let hc = g.reshape(hc, &[rays, n, cw])?;
        let dc = g.matmul(d_enc, p[s.color_wd])?;
        let dc = g.reshape(dc, &[rays, 1, cw])?;
        let zc = g.matmul(z_a, p[s.color_wz])?;
        let hc = g.add(hc, dc)?;
        let hc = g.add(hc, zc)?;
        let hc = g.relu(hc)?;
        let hc = g.reshape(hc, &[rays * n, cw])?;
        let c = g.linear(hc, p[s.out_w], p[s.out_b])?;
        let c = g.sigmoid(c)?;
        let c = g.reshape(c, &[rays, n])?;
        Ok((sigma, c))
    }

    /// Encodes sample positions (normalised by `bound_radius_mm`) and ray
    /// directions as tape constants.
    pub fn encode_inputs(
        &self,
        g: &mut Graph,
        rays: &RayBundle,
        pts: &SamplePoints,
        bound_radius_mm: f64,
    ) -> Result<(Var, Var)> {
        let enc = &self.config.encoding;
        let inv = 1.0 / bound_radius_mm;
        let scaled: Vec<f64> = pts.positions.iter().map(|v| v * inv).collect();
        let mut x = Vec::with_capacity(scaled.len() * 2 * enc.m_x);
        encode_into(&scaled, enc.m_x, &mut x);
        let dirs: Vec<f64> = rays.directions.iter().flatten().copied().collect();
        let mut d = Vec::with_capacity(dirs.len() * 2 * enc.m_d);
        encode_into(&dirs, enc.m_d, &mut d);
        let x_enc = g.constant(&[scaled.len() / 3, enc.position_dim()], x.into_iter().map(|v| v as Real).collect())?;
        let d_enc = g.constant(&[rays.len(), enc.direction_dim()], d.into_iter().map(|v| v as Real).collect())?;
        Ok((x_enc, d_enc))
    }

    /// Renders the rays of `pts`.
    #[allow(clippy::too_many_arguments)]
    pub fn render_rays(
        &self,
        g: &mut Graph,
        p: &[Var],
        rays: &RayBundle,
        pts: &SamplePoints,
        z_s: Var,
        z_a: Var,
        bound_radius_mm: f64,
    ) -> Result<Composited> {
        let (x_enc, d_enc) = self.encode_inputs(g, rays, pts, bound_radius_mm)?;
        let (r, n) = (rays.len(), pts.n);
        let (sigma, color) = self.field_eval(g, p, x_enc, d_enc, z_s, z_a, r, n)?;
        let inv = 1.0 / bound_radius_mm;
        let deltas = g.constant(&[r, n], pts.deltas.iter().map(|d| (d * inv) as Real).collect())?;
        composite_rays(g, sigma, color, deltas, self.config.background)
    }

    /// K×K patch prediction at `(pose, pattern)`.
    #[allow(clippy::too_many_arguments)]
    pub fn render_patch<R: Rng>(
        &self,
        g: &mut Graph,
        p: &[Var],
        pose: &Pose,
        det: &DetectorConfig,
        pattern: &PatchPattern,
        latents: (Var, Var),
        settings: &RenderSettings,
        rng: &mut R,
    ) -> Result<Var> {
        let rays = rays_for_patch(pose, det, pattern, settings.bound_radius_mm)?;
        let pts = stratified_points(&rays, settings.n_samples, rng, settings.jitter)?;
        let out = self.render_rays(g, p, &rays, &pts, latents.0, latents.1, settings.bound_radius_mm)?;
        Ok(g.reshape(out.pixels, &[pattern.k, pattern.k])?)
    }

    /// Renders every pixel of a `resolution`² image without gradients, in
    /// chunks of `chunk` rays. Returns the image and expected depth (mm).
    pub fn render_full_image(
        &self,
        pose: &Pose,
        det: &DetectorConfig,
        latents: &Latents,
        resolution: usize,
        chunk: usize,
        settings: &RenderSettings,
    ) -> Result<(Image, Image)> {
        let det = det.resized(resolution, resolution);
        let rays = rays_for_patch(pose, &det, &PatchPattern::full(resolution), settings.bound_radius_mm)?;
        let mut no_rng = substream(0, Stream::Jitter);
        let pts = stratified_points(&rays, settings.n_samples, &mut no_rng, false)?;
        let chunk = chunk.max(1);
        let mut pixels = Vec::with_capacity(rays.len());
        let mut depth = Vec::with_capacity(rays.len());
        let mut start = 0;
        while start < rays.len() {
            let len = chunk.min(rays.len() - start);
            let sub = rays.slice(start, len);
            let sub_pts = slice_points(&pts, start, len);
            let mut g = Graph::with_finite_checks(false);
            let p = self.bind_frozen(&mut g)?;
            let (zs, za) = latents.bind(&mut g, false)?;
            let out = self.render_rays(&mut g, &p, &sub, &sub_pts, zs, za, settings.bound_radius_mm)?;
            pixels.extend(g.value(out.pixels).iter().map(|v| *v as f32));
            depth.extend(expected_depth(g.value(out.weights), &sub_pts));
            start += len;
        }
        Ok((
            Image::new(resolution, resolution, pixels)?,
            Image::new(resolution, resolution, depth)?,
        ))
    }
}

/// Shared per-render settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    pub n_samples: usize,
    pub bound_radius_mm: f64,
    pub jitter: bool,
}

pub fn slice_points(pts: &SamplePoints, start: usize, len: usize) -> SamplePoints {
    let n = pts.n;
    SamplePoints {
        n,
        positions: pts.positions[start * n * 3..(start + len) * n * 3].to_vec(),
        depths: pts.depths[start * n..(start + len) * n].to_vec(),
        deltas: pts.deltas[start * n..(start + len) * n].to_vec(),
    }
}

/// `Σ depth·w / max(Σw, ε)` per ray.
pub fn expected_depth(weights: &[Real], pts: &SamplePoints) -> Vec<f32> {
    weights
        .chunks(pts.n)
        .zip(pts.depths.chunks(pts.n))
        .map(|(w, d)| {
            let total: f64 = w.iter().map(|v| *v as f64).sum();
            let acc: f64 = w.iter().zip(d).map(|(w, d)| *w as f64 * d).sum();
            (acc / total.max(DEPTH_EPS)) as f32
        })
        .collect()
}

/// Tape outputs of [`composite_rays`].
#[derive(Clone, Copy, Debug)]
pub struct Composited {
    /// `[R]`
    pub pixels: Var,
    /// `[R, N]`
    pub weights: Var,
    /// Transmittance past the last sample, `[R]`.
    pub residual: Var,
}

/// Front-to-back alpha compositing along the last axis of `[R, N]` inputs.
///
/// Weights are `Tᵢ − Tᵢ₊₁` with `Tᵢ = exp(−Σ_{j<i} σⱼδⱼ)`, which equals
/// `αᵢTᵢ`; the residual transmittance is composited over `background`.
pub fn composite_rays(g: &mut Graph, sigma: Var, color: Var, delta: Var, background: f32) -> Result<Composited> {
    let shape = g.shape(sigma).to_vec();
    if shape.len() != 2 || g.shape(color) != shape.as_slice() || g.shape(delta) != shape.as_slice() {
        return Err(Error::Invalid(format!(
            "compositing needs equal [R, N] inputs, got {:?} {:?} {:?}",
            shape,
            g.shape(color),
            g.shape(delta)
        )));
    }
    if g.value(sigma).iter().any(|v| *v < 0.0) || g.value(delta).iter().any(|v| *v < 0.0) {
        return Err(Error::Invalid("densities and deltas must be >= 0".into()));
    }
    let n = shape[1];
    let sd = g.mul(sigma, delta)?;
    let before = g.cumsum(sd, true)?;
    let through = g.add(before, sd)?;
    let t_before = g.neg(before)?;
    let t_before = g.exp(t_before)?;
    let t_after = g.neg(through)?;
    let t_after = g.exp(t_after)?;
    let weights = g.sub(t_before, t_after)?;
    let wc = g.mul(weights, color)?;
    let pix = g.sum_axis(wc, 1)?;
    let residual = g.slice(t_after, 1, n - 1, 1)?;
    let residual = g.reshape(residual, &[shape[0]])?;
    let bg = g.scale(residual, background as Real)?;
    let pixels = g.add(pix, bg)?;
    Ok(Composited {
        pixels,
        weights,
        residual,
    })
}

/// Compositing of a single ray.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub pixel: f32,
    pub weights: Vec<f32>,
    /// Transmittance past the last sample.
    pub residual: f32,
}

pub fn composite(colors: &[f32], sigmas: &[f32], deltas: &[f32], background: f32) -> Result<Composite> {
    let n = colors.len();
    if n == 0 || sigmas.len() != n || deltas.len() != n {
        return Err(Error::Invalid("compositing needs equal, non-empty sequences".into()));
    }
    let mut g = Graph::with_finite_checks(false);
    let conv = |v: &[f32]| v.iter().map(|x| *x as Real).collect::<Vec<_>>();
    let c = g.constant(&[1, n], conv(colors))?;
    let s = g.constant(&[1, n], conv(sigmas))?;
    let d = g.constant(&[1, n], conv(deltas))?;
    let out = composite_rays(&mut g, s, c, d, background)?;
    Ok(Composite {
        pixel: g.value(out.pixels)[0] as f32,
        weights: g.value(out.weights).iter().map(|v| *v as f32).collect(),
        residual: g.value(out.residual)[0] as f32,
    })
}
