//! Fitting a trained field to a single radiograph, then rendering the
//! full rotation.

use serde::{Deserialize, Serialize};

use radfield_autodiff::{Adam, AdamConfig, Graph, ParamSet, Real, Tensor};

use crate::error::{Error, Result};
use crate::features::{image_var, FrozenFeatureNet};
use crate::field::{slice_points, Generator, Latents, RenderSettings};
use crate::geometry::{DetectorConfig, Pose};
use crate::image::Image;
use crate::losses::{latent_nll, mse};
use crate::metrics::psnr;
use crate::projector::DEFAULT_POLAR_DEG;
use crate::rng::{substream, Stream};
use crate::sampler::{rays_for_patch, stratified_points, PatchPattern};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub lambda_perceptual: f32,
    pub lambda_mse: f32,
    pub lambda_prior: f32,
    pub iterations: usize,
    pub azimuth_deg: f64,
    pub polar_deg: f64,
    pub finetune: bool,
    /// Generator learning rate relative to `lr`.
    pub finetune_scale: f32,
    /// Fraction of iterations spent on the latents alone.
    pub finetune_start: f32,
    /// Rays per rendering chunk.
    pub chunk: usize,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.0,
            beta2: 0.999,
            lambda_perceptual: 0.3,
            lambda_mse: 0.1,
            lambda_prior: 0.3,
            iterations: 400,
            azimuth_deg: 0.0,
            polar_deg: DEFAULT_POLAR_DEG,
            finetune: true,
            finetune_scale: 0.1,
            finetune_start: 0.5,
            chunk: 1024,
        }
    }
}

impl InversionConfig {
    pub fn desk() -> Self {
        Self {
            iterations: 150,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("inversion lr must be > 0".into()));
        }
        let l = [self.lambda_perceptual, self.lambda_mse, self.lambda_prior];
        if l.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("inversion loss weights must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.finetune_start) {
            return Err(Error::Config("finetune_start must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn pose(&self, radius_mm: f64) -> Pose {
        Pose::new(self.azimuth_deg, self.polar_deg, radius_mm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InversionStep {
    pub iteration: usize,
    pub loss: f32,
    pub mse: f32,
    pub psnr: f64,
    /// Lowest loss seen so far.
    pub best_loss: f32,
}

pub struct Fitted {
    pub latents: Latents,
    pub render: Image,
    pub depth: Image,
    pub best_loss: f32,
    pub initial_psnr: f64,
    pub best_psnr: f64,
    pub history: Vec<InversionStep>,
}

struct Terms {
    loss: f32,
    mse: f32,
    image_grad: Vec<Real>,
    latent_grad: [Vec<Real>; 2],
}

/// Loss of a rendered image and its gradients w.r.t. the image and latents.
fn loss_terms(render: &Image, target: &Image, latents: &ParamSet, cfg: &InversionConfig, net: &FrozenFeatureNet) -> Result<Terms> {
    let mut g = Graph::new();
    let shape = [1, 1, render.height, render.width];
    let x = g.variable(&shape, render.data.iter().map(|v| *v as Real).collect())?;
    let t = image_var(&mut g, target)?;
    let zs = g.tensor(latents.at(0));
    let za = g.tensor(latents.at(1));
    let perc = net.distance(&mut g, x, t)?;
    let err = mse(&mut g, x, t)?;
    let z = g.concat(&[zs, za], 1)?;
    let prior = latent_nll(&mut g, z)?;
    let a = g.scale(perc, cfg.lambda_perceptual as Real)?;
    let b = g.scale(err, cfg.lambda_mse as Real)?;
    let c = g.scale(prior, cfg.lambda_prior as Real)?;
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    let grads = g.backward(total)?;
    let grad_of = |v| grads.get(v).map(|s| s.to_vec());
    Ok(Terms {
        loss: g.scalar(total) as f32,
        mse: g.scalar(err) as f32,
        image_grad: grad_of(x).unwrap_or_else(|| vec![0.0; render.data.len()]),
        latent_grad: [
            grad_of(zs).unwrap_or_else(|| vec![0.0; latents.at(0).len()]),
            grad_of(za).unwrap_or_else(|| vec![0.0; latents.at(1).len()]),
        ],
    })
}

fn latent_params(l: &Latents) -> Result<ParamSet> {
    let mut p = ParamSet::new();
    let to = |v: &[f32]| v.iter().map(|x| *x as Real).collect::<Vec<_>>();
    p.insert("z_s", Tensor::param(vec![1, l.z_s.len()], to(&l.z_s))?);
    p.insert("z_a", Tensor::param(vec![1, l.z_a.len()], to(&l.z_a))?);
    Ok(p)
}

fn latents_of(p: &ParamSet) -> Latents {
    let to = |t: &Tensor| t.data().iter().map(|x| *x as f32).collect();
    Latents {
        z_s: to(p.at(0)),
        z_a: to(p.at(1)),
    }
}

/// Accumulates `∂L/∂θ` and `∂L/∂z` given `∂L/∂image`, one chunk of rays at a time.
#[allow(clippy::too_many_arguments)]
fn backprop_render(
    gen: &mut Generator,
    latents: &mut ParamSet,
    pose: &Pose,
    det: &DetectorConfig,
    resolution: usize,
    settings: &RenderSettings,
    chunk: usize,
    image_grad: &[Real],
    train_generator: bool,
) -> Result<()> {
    let det = det.resized(resolution, resolution);
    let rays = rays_for_patch(pose, &det, &PatchPattern::full(resolution), settings.bound_radius_mm)?;
    let pts = stratified_points(&rays, settings.n_samples, &mut substream(0, Stream::Jitter), false)?;
    let mut start = 0;
    while start < rays.len() {
        let len = chunk.min(rays.len() - start);
        let seed = &image_grad[start..start + len];
        if seed.iter().all(|v| *v == 0.0) {
            start += len;
            continue;
        }
        let sub = rays.slice(start, len);
        let sub_pts = slice_points(&pts, start, len);
        let mut g = Graph::new();
        let bound = train_generator.then(|| gen.params().bind(&mut g));
        let p = match &bound {
            Some(b) => b.vars().to_vec(),
            None => gen.bind_frozen(&mut g)?,
        };
        let zs = g.tensor(latents.at(0));
        let za = g.tensor(latents.at(1));
        let out = gen.render_rays(&mut g, &p, &sub, &sub_pts, zs, za, settings.bound_radius_mm)?;
        let grads = g.backward_seeded(out.pixels, seed)?;
        for (i, v) in [zs, za].into_iter().enumerate() {
            if let Some(d) = grads.get(v) {
                latents.at_mut(i).accumulate_grad(d)?;
            }
        }
        if let Some(b) = &bound {
            gen.params_mut().accumulate(b, &grads)?;
        }
        start += len;
    }
    Ok(())
}

/// Minimises `λ₁·perceptual + λ₂·MSE + λ₃·mean(½z²)` of the render at the
/// configured pose against `xray`, starting from `init`. The generator is
/// left at the best iterate.
pub fn invert(
    gen: &mut Generator,
    xray: &Image,
    init: &Latents,
    settings: &RenderSettings,
    det: &DetectorConfig,
    cfg: &InversionConfig,
    net: &FrozenFeatureNet,
) -> Result<Fitted> {
    cfg.validate()?;
    if xray.width != xray.height {
        return Err(Error::Invalid("inversion expects a square radiograph".into()));
    }
    let res = xray.width;
    let pose = cfg.pose(det.sid_mm);
    let settings = RenderSettings { jitter: false, ..*settings };
    let adam = |lr: f32| AdamConfig {
        lr: lr as Real,
        beta1: cfg.beta1 as Real,
        beta2: cfg.beta2 as Real,
        eps: 1e-8,
    };
    let mut latents = latent_params(init)?;
    let mut opt_z = Adam::new(adam(cfg.lr), &latents);
    let mut opt_g = Adam::new(adam(cfg.lr * cfg.finetune_scale), gen.params());
    let start_g = (cfg.finetune_start as f64 * cfg.iterations as f64).ceil() as usize;

    let mut best: Option<(f32, Latents, Option<ParamSet>, Image, Image, f64)> = None;
    let mut history = Vec::with_capacity(cfg.iterations + 1);
    let mut initial_psnr = 0.0;
    for it in 0..=cfg.iterations {
        let current = latents_of(&latents);
        let (render, depth) = gen.render_full_image(&pose, det, &current, res, cfg.chunk, &settings)?;
        let terms = loss_terms(&render, xray, &latents, cfg, net)?;
        if !terms.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it as u64,
                loss_d: f32::NAN,
                loss_g: terms.loss,
                loss_r: f32::NAN,
            });
        }
        let p = psnr(&render, xray)?;
        if it == 0 {
            initial_psnr = p;
        }
        let finetuning = cfg.finetune && it >= start_g;
        if best.as_ref().map(|b| terms.loss < b.0).unwrap_or(true) {
            let snapshot = cfg.finetune.then(|| gen.params().clone());
            best = Some((terms.loss, current, snapshot, render, depth, p));
        }
        let best_loss = best.as_ref().map(|b| b.0).unwrap_or(terms.loss);
        history.push(InversionStep {
            iteration: it,
            loss: terms.loss,
            mse: terms.mse,
            psnr: p,
            best_loss,
        });
        if it == cfg.iterations {
            break;
        }
        latents.zero_grads();
        for i in 0..2 {
            latents.at_mut(i).accumulate_grad(&terms.latent_grad[i])?;
        }
        gen.params_mut().zero_grads();
        backprop_render(gen, &mut latents, &pose, det, res, &settings, cfg.chunk.max(1), &terms.image_grad, finetuning)?;
        opt_z.step(&mut latents)?;
        if finetuning {
            opt_g.step(gen.params_mut())?;
        }
    }
    let (best_loss, latents, snapshot, render, depth, best_psnr) = best.expect("at least one iterate");
    if let Some(p) = snapshot {
        gen.params_mut().load_values(&p)?;
    }
    Ok(Fitted {
        latents,
        render,
        depth,
        best_loss,
        initial_psnr,
        best_psnr,
        history,
    })
}

/// Full renders at `n_views` equally spaced azimuths starting from
/// `start_azimuth_deg`. Returns `(azimuth, image, depth)` per view.
#[allow(clippy::too_many_arguments)]
pub fn render_rotation(
    gen: &Generator,
    latents: &Latents,
    settings: &RenderSettings,
    det: &DetectorConfig,
    n_views: usize,
    start_azimuth_deg: f64,
    polar_deg: f64,
    resolution: usize,
    chunk: usize,
) -> Result<Vec<(f64, Image, Image)>> {
    if n_views == 0 {
        return Err(Error::Invalid("n_views must be >= 1".into()));
    }
    let settings = RenderSettings { jitter: false, ..*settings };
    (0..n_views)
        .map(|i| {
            let az = (start_azimuth_deg + i as f64 * 360.0 / n_views as f64).rem_euclid(360.0);
            let pose = Pose::new(az, polar_deg, det.sid_mm);
            let (img, depth) = gen.render_full_image(&pose, det, latents, resolution, chunk, &settings)?;
            Ok((az, img, depth))
        })
        .collect()
}
