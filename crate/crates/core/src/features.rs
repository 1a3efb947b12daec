//! Frozen convolutional feature extractor for perceptual distances and KID.
//!
//! Four stride-2 3×3 convolutions (16/32/64/128 channels, leaky ReLU 0.2)
//! with fixed seeded weights. Pretrained weights can be supplied through a
//! tensor container file holding `feat/l{i}/w` and `feat/l{i}/b`.

use std::path::Path;

use radfield_autodiff::{Graph, ParamSet, Real, Tensor, Var};
use rand::Rng;

use crate::checkpoint::read_container;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{fnv1a, keyed};

pub const FEATURE_CHANNELS: [usize; 4] = [16, 32, 64, 128];
pub const DEFAULT_FEATURE_SEED: u64 = 0x5eed_f00d;
const SLOPE: Real = 0.2;

#[derive(Clone, Debug)]
pub struct FrozenFeatureNet {
    weights: Vec<(Tensor, Tensor)>,
    norms: Vec<f32>,
    fingerprint: u64,
}

impl Default for FrozenFeatureNet {
    fn default() -> Self {
        Self::seeded(DEFAULT_FEATURE_SEED)
    }
}

impl FrozenFeatureNet {
    pub fn seeded(seed: u64) -> Self {
        let mut weights = Vec::new();
        let mut cin = 1;
        for (i, &cout) in FEATURE_CHANNELS.iter().enumerate() {
            let bound = (6.0 / (cin * 9) as f64).sqrt();
            let mut rng = keyed(seed, &format!("feat/l{i}/w"));
            let w: Vec<Real> = (0..cout * cin * 9).map(|_| rng.random_range(-bound..bound) as Real).collect();
            weights.push((
                Tensor::new(vec![cout, cin, 3, 3], w).expect("sized"),
                Tensor::zeros(&[cout]),
            ));
            cin = cout;
        }
        Self::from_weights(weights, vec![1.0; FEATURE_CHANNELS.len()]).expect("default layout")
    }

    /// Loads `feat/l{i}/w` and `feat/l{i}/b` from a tensor container.
    pub fn load(path: &Path) -> Result<Self> {
        let (_, params) = read_container(path)?;
        Self::from_params(&params)
    }

    pub fn from_params(params: &ParamSet) -> Result<Self> {
        let mut weights = Vec::new();
        let mut i = 0;
        while let Some(w) = params.get(&format!("feat/l{i}/w")) {
            let name = format!("feat/l{i}/b");
            let b = params.get(&name).ok_or(Error::MissingTensor(name))?;
            weights.push((w.clone(), b.clone()));
            i += 1;
        }
        if weights.is_empty() {
            return Err(Error::MissingTensor("feat/l0/w".into()));
        }
        let n = weights.len();
        Self::from_weights(weights, vec![1.0; n])
    }

    fn from_weights(weights: Vec<(Tensor, Tensor)>, norms: Vec<f32>) -> Result<Self> {
        let mut cin = 1;
        let mut bytes = Vec::new();
        for (i, (w, b)) in weights.iter().enumerate() {
            let s = w.shape();
            if s.len() != 4 || s[1] != cin || b.shape() != [s[0]] {
                return Err(Error::ArchitectureMismatch {
                    name: format!("feat/l{i}/w"),
                    expected: vec![s.first().copied().unwrap_or(0), cin, 3, 3],
                    found: s.to_vec(),
                });
            }
            cin = s[0];
            for v in w.data().iter().chain(b.data()) {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut w = weights;
        for (a, b) in &mut w {
            a.set_requires_grad(false);
            b.set_requires_grad(false);
        }
        Ok(Self {
            weights: w,
            norms,
            fingerprint: fnv1a(&bytes),
        })
    }

    /// Per-layer multipliers of the perceptual distance.
    pub fn with_norms(mut self, norms: Vec<f32>) -> Result<Self> {
        if norms.len() != self.weights.len() {
            return Err(Error::Config(format!(
                "{} normalisation constants for {} layers",
                norms.len(),
                self.weights.len()
            )));
        }
        self.norms = norms;
        Ok(self)
    }

    /// Hash of every weight, for checking that the net stays frozen.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    /// Feature maps of `x: [B, 1, H, W]` in [0, 1], one per layer.
    pub fn features(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let mut h = g.scale(x, 2.0)?;
        h = g.add_scalar(h, -1.0)?;
        let mut out = Vec::with_capacity(self.weights.len());
        for (w, b) in &self.weights {
            let (w, b) = (g.tensor(w), g.tensor(b));
            h = g.conv2d(h, w, Some(b), 2, 1)?;
            h = g.leaky_relu(h, SLOPE)?;
            out.push(h);
        }
        Ok(out)
    }

    /// Batch mean of `Σᵢ normᵢ·‖φᵢ(a) − φᵢ(b)‖₂ / (c·h·w)` over layers.
    pub fn distance(&self, g: &mut Graph, a: Var, b: Var) -> Result<Var> {
        if g.shape(a) != g.shape(b) || g.shape(a).len() != 4 {
            return Err(Error::Invalid(format!(
                "perceptual distance needs equal [B,1,H,W] inputs, got {:?} and {:?}",
                g.shape(a),
                g.shape(b)
            )));
        }
        let batch = g.shape(a)[0];
        let fa = self.features(g, a)?;
        let fb = self.features(g, b)?;
        let mut total: Option<Var> = None;
        for ((x, y), norm) in fa.into_iter().zip(fb).zip(&self.norms) {
            let size: usize = g.shape(x)[1..].iter().product();
            let d = g.sub(x, y)?;
            let d = g.square(d)?;
            let d = g.reshape(d, &[batch, size])?;
            let d = g.sum_axis(d, 1)?;
            let d = g.sqrt(d)?;
            let d = g.mean(d)?;
            let d = g.scale(d, *norm as Real / size as Real)?;
            total = Some(match total {
                None => d,
                Some(t) => g.add(t, d)?,
            });
        }
        Ok(total.expect("at least one layer"))
    }

    pub fn perceptual_distance(&self, a: &Image, b: &Image) -> Result<f32> {
        if !a.same_shape(b) {
            return Err(Error::Invalid(format!(
                "image shapes differ: {}x{} vs {}x{}",
                a.width, a.height, b.width, b.height
            )));
        }
        let mut g = Graph::with_finite_checks(false);
        let va = image_var(&mut g, a)?;
        let vb = image_var(&mut g, b)?;
        let d = self.distance(&mut g, va, vb)?;
        Ok(g.scalar(d) as f32)
    }

    /// Global-average-pooled activations of every layer, concatenated.
    pub fn pooled(&self, img: &Image) -> Result<Vec<f32>> {
        let mut g = Graph::with_finite_checks(false);
        let x = image_var(&mut g, img)?;
        let feats = self.features(&mut g, x)?;
        let mut out = Vec::new();
        for f in feats {
            let s = g.shape(f).to_vec();
            let plane = s[2] * s[3];
            for ch in g.value(f).chunks(plane) {
                out.push((ch.iter().map(|v| *v as f64).sum::<f64>() / plane as f64) as f32);
            }
        }
        Ok(out)
    }
}

pub fn image_var(g: &mut Graph, img: &Image) -> Result<Var> {
    Ok(g.constant(
        &[1, 1, img.height, img.width],
        img.data.iter().map(|v| *v as Real).collect(),
    )?)
}
