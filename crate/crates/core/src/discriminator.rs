//! Multi-head discriminator with self-supervised reconstruction decoders.
//!
//! A shared convolutional trunk feeds `n` heads, one per invertible patch
//! transform. Two decoders reconstruct the real patch from intermediate
//! feature maps: one from the coarse map `f2` (K/4), one from the centre
//! half of the fine map `f1` (K).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use radfield_autodiff::{Graph, ParamSet, Real, Var};

use crate::error::{Error, Result};
use crate::features::FrozenFeatureNet;
use crate::field::init_params;
use crate::image::Image;

pub const SLOPE: Real = 0.2;
pub const MAX_HEADS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscConfig {
    /// Channels of the first trunk stage; doubled at every stride-2 stage.
    pub channels: usize,
    pub heads: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self { channels: 32, heads: 4 }
    }
}

/// Trunk activations of a batch.
#[derive(Clone, Copy, Debug)]
pub struct TrunkOut {
    /// `[B, c, K, K]`
    pub f1: Var,
    /// `[B, 4c, K/4, K/4]`
    pub f2: Var,
    /// `[B, 8c, K/8, K/8]`
    pub last: Var,
}

pub struct Discriminator {
    config: DiscConfig,
    k: usize,
    params: ParamSet,
}

fn conv(name: &str, cout: usize, cin: usize) -> [(String, Vec<usize>); 2] {
    [(format!("{name}/w"), vec![cout, cin, 3, 3]), (format!("{name}/b"), vec![cout])]
}

pub fn discriminator_layout(cfg: &DiscConfig, k: usize) -> Vec<(String, Vec<usize>)> {
    let c = cfg.channels;
    let mut out = Vec::new();
    out.extend(conv("d/trunk0", c, 1));
    out.extend(conv("d/trunk1", 2 * c, c));
    out.extend(conv("d/trunk2", 4 * c, 2 * c));
    out.extend(conv("d/trunk3", 8 * c, 4 * c));
    let flat = 8 * c * (k / 8) * (k / 8);
    for h in 0..cfg.heads {
        out.extend(conv(&format!("d/head{h}/conv"), 8 * c, 8 * c));
        out.push((format!("d/head{h}/fc/w"), vec![flat, 1]));
        out.push((format!("d/head{h}/fc/b"), vec![1]));
    }
    out.extend(conv("d/dec_a0", 2 * c, 4 * c));
    out.extend(conv("d/dec_a1", c, 2 * c));
    out.extend(conv("d/dec_a2", 1, c));
    out.extend(conv("d/dec_b0", c, c));
    out.extend(conv("d/dec_b1", c, c));
    out.extend(conv("d/dec_b2", 1, c));
    out
}

impl Discriminator {
    /// `k` is the patch side; it must be a multiple of 8.
    pub fn new(config: DiscConfig, k: usize, seed: u64) -> Result<Self> {
        Self::validate(&config, k)?;
        let layout = discriminator_layout(&config, k);
        let fan_in = |_: &str, s: &[usize]| if s.len() == 4 { s[1] * s[2] * s[3] } else { s[0] };
        let params = init_params(&layout, fan_in, seed)?;
        Ok(Self { config, k, params })
    }

    fn validate(config: &DiscConfig, k: usize) -> Result<()> {
        if k < 8 || k % 8 != 0 {
            return Err(Error::Config(format!("discriminator patch size {k} must be a multiple of 8")));
        }
        if config.heads == 0 || config.heads > MAX_HEADS {
            return Err(Error::Config(format!("head count {} must be in 1..={MAX_HEADS}", config.heads)));
        }
        if config.channels == 0 {
            return Err(Error::Config("discriminator channels must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_params(config: DiscConfig, k: usize, params: ParamSet) -> Result<Self> {
        Self::validate(&config, k)?;
        for (name, shape) in discriminator_layout(&config, k) {
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
        Ok(Self { config, k, params })
    }

    pub fn config(&self) -> &DiscConfig {
        &self.config
    }

    pub fn patch_size(&self) -> usize {
        self.k
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Parameter slots private to head `k`.
    pub fn head_slots(&self, k: usize) -> Vec<usize> {
        let prefix = format!("d/head{k}/");
        (0..self.params.len()).filter(|i| self.params.name(*i).starts_with(&prefix)).collect()
    }

    fn var(&self, p: &[Var], name: &str) -> Var {
        p[self.params.slot(name).expect("layout name")]
    }

    fn conv(&self, g: &mut Graph, p: &[Var], x: Var, name: &str, stride: usize) -> Result<Var> {
        let w = self.var(p, &format!("{name}/w"));
        let b = self.var(p, &format!("{name}/b"));
        Ok(g.conv2d(x, w, Some(b), stride, 1)?)
    }

    /// Shared trunk over `x: [B, 1, K, K]` with values in [0, 1].
    pub fn trunk(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<TrunkOut> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != 1 || s[2] != self.k || s[3] != self.k {
            return Err(Error::Invalid(format!("discriminator expects [B,1,{0},{0}], got {s:?}", self.k)));
        }
        let x = g.scale(x, 2.0)?;
        let x = g.add_scalar(x, -1.0)?;
        let f1 = self.conv(g, p, x, "d/trunk0", 1)?;
        let f1 = g.leaky_relu(f1, SLOPE)?;
        let h = self.conv(g, p, f1, "d/trunk1", 2)?;
        let h = g.leaky_relu(h, SLOPE)?;
        let f2 = self.conv(g, p, h, "d/trunk2", 2)?;
        let f2 = g.leaky_relu(f2, SLOPE)?;
        let last = self.conv(g, p, f2, "d/trunk3", 2)?;
        let last = g.leaky_relu(last, SLOPE)?;
        Ok(TrunkOut { f1, f2, last })
    }

    /// Logits `[B]` of head `k` over trunk output `last`.
    pub fn head(&self, g: &mut Graph, p: &[Var], last: Var, k: usize) -> Result<Var> {
        if k >= self.config.heads {
            return Err(Error::Invalid(format!("head {k} out of range 0..{}", self.config.heads)));
        }
        let h = self.conv(g, p, last, &format!("d/head{k}/conv"), 1)?;
        let h = g.leaky_relu(h, SLOPE)?;
        let s = g.shape(h).to_vec();
        let h = g.reshape(h, &[s[0], s[1] * s[2] * s[3]])?;
        let w = self.var(p, &format!("d/head{k}/fc/w"));
        let b = self.var(p, &format!("d/head{k}/fc/b"));
        let logit = g.linear(h, w, b)?;
        Ok(g.reshape(logit, &[s[0]])?)
    }

    /// Head-`k` logits with the trunk features used for reconstruction.
    pub fn discriminate(&self, g: &mut Graph, p: &[Var], patch: Var, k: usize) -> Result<(Var, Var, Var)> {
        let t = self.trunk(g, p, patch)?;
        let logit = self.head(g, p, t.last, k)?;
        Ok((logit, t.f1, t.f2))
    }

    /// Logits of every head on its transform of `x: [B,1,K,K]`, with one
    /// batched trunk pass. Returns per-head logits and the identity-pass
    /// trunk features.
    pub fn all_heads(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<(Vec<Var>, TrunkOut)> {
        let b = g.shape(x)[0];
        let n = self.config.heads;
        let mut views = Vec::with_capacity(n);
        for k in 0..n {
            views.push(dag_transform(g, x, k)?);
        }
        let all = if n == 1 { views[0] } else { g.concat(&views, 0)? };
        let t = self.trunk(g, p, all)?;
        let mut logits = Vec::with_capacity(n);
        for k in 0..n {
            let last = if n == 1 { t.last } else { g.slice(t.last, 0, k * b, b)? };
            logits.push(self.head(g, p, last, k)?);
        }
        let ident = if n == 1 {
            t
        } else {
            TrunkOut {
                f1: g.slice(t.f1, 0, 0, b)?,
                f2: g.slice(t.f2, 0, 0, b)?,
                last: g.slice(t.last, 0, 0, b)?,
            }
        };
        Ok((logits, ident))
    }

    /// `(from f2, from the centre crop of f1)`, both `[B, 1, K, K]` in [0, 1].
    pub fn decode(&self, g: &mut Graph, p: &[Var], f1: Var, f2: Var) -> Result<(Var, Var)> {
        let c = self.config.channels;
        let (s1, s2) = (g.shape(f1).to_vec(), g.shape(f2).to_vec());
        if s1.len() != 4 || s1[1] != c || s1[2] != self.k || s2.len() != 4 || s2[1] != 4 * c || s2[2] != self.k / 4 {
            return Err(Error::Invalid(format!("decoder feature shapes {s1:?} / {s2:?} do not match the trunk")));
        }
        let mut a = g.upsample_nearest(f2, 2)?;
        a = self.conv(g, p, a, "d/dec_a0", 1)?;
        a = g.leaky_relu(a, SLOPE)?;
        a = g.upsample_nearest(a, 2)?;
        a = self.conv(g, p, a, "d/dec_a1", 1)?;
        a = g.leaky_relu(a, SLOPE)?;
        a = self.conv(g, p, a, "d/dec_a2", 1)?;
        a = g.sigmoid(a)?;

        let q = self.k / 4;
        let mut b = g.slice(f1, 2, q, self.k / 2)?;
        b = g.slice(b, 3, q, self.k / 2)?;
        b = self.conv(g, p, b, "d/dec_b0", 1)?;
        b = g.leaky_relu(b, SLOPE)?;
        b = g.upsample_nearest(b, 2)?;
        b = self.conv(g, p, b, "d/dec_b1", 1)?;
        b = g.leaky_relu(b, SLOPE)?;
        b = self.conv(g, p, b, "d/dec_b2", 1)?;
        b = g.sigmoid(b)?;
        Ok((a, b))
    }

    /// Reconstruction loss of real patches `real: [B,1,K,K]` from their
    /// identity-pass features.
    pub fn recon_loss(&self, g: &mut Graph, p: &[Var], net: &FrozenFeatureNet, real: Var, f1: Var, f2: Var) -> Result<Var> {
        let (a, b) = self.decode(g, p, f1, f2)?;
        recon_from_decoded(g, net, real, a, b)
    }
}

/// `d(a, 𝒯₂(real)) + d(b, 𝒯₁(real))` under the frozen perceptual distance.
pub fn recon_from_decoded(g: &mut Graph, net: &FrozenFeatureNet, real: Var, a: Var, b: Var) -> Result<Var> {
    let (t2, t1) = recon_targets(g, real)?;
    let la = net.distance(g, a, t2)?;
    let lb = net.distance(g, b, t1)?;
    Ok(g.add(la, lb)?)
}

/// Targets of the two decoders as constants: the patch low-passed by 2×2
/// averaging (held at full size) and the centre half upsampled ×2.
pub fn recon_targets(g: &mut Graph, real: Var) -> Result<(Var, Var)> {
    let s = g.shape(real).to_vec();
    if s.len() != 4 || s[1] != 1 || s[2] != s[3] || s[2] % 4 != 0 {
        return Err(Error::Invalid(format!("reconstruction targets need [B,1,K,K] with K % 4 == 0, got {s:?}")));
    }
    let k = s[2];
    let v = g.value(real).to_vec();
    let mut low = Vec::with_capacity(v.len());
    let mut crop = Vec::with_capacity(v.len());
    for plane in v.chunks(k * k) {
        for r in 0..k {
            for c in 0..k {
                let (r0, c0) = (r / 2 * 2, c / 2 * 2);
                let m = (plane[r0 * k + c0] + plane[r0 * k + c0 + 1] + plane[(r0 + 1) * k + c0] + plane[(r0 + 1) * k + c0 + 1]) / 4.0;
                low.push(m);
            }
        }
        let q = k / 4;
        for r in 0..k {
            for c in 0..k {
                crop.push(plane[(q + r / 2) * k + q + c / 2]);
            }
        }
    }
    Ok((g.constant(&s, low)?, g.constant(&s, crop)?))
}

/// Flat source index of every output pixel under transform `k`.
fn dag_index(shape: &[usize], k: usize) -> Vec<usize> {
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let planes: usize = shape[..shape.len() - 2].iter().product();
    let mut idx = Vec::with_capacity(planes * h * w);
    for p in 0..planes {
        for r in 0..h {
            for c in 0..w {
                let (sr, sc) = match k {
                    1 => (r, w - 1 - c),
                    2 => (h - 1 - r, w - 1 - c),
                    3 => (h - 1 - r, c),
                    _ => (r, c),
                };
                idx.push(p * h * w + sr * w + sc);
            }
        }
    }
    idx
}

/// T₀ identity, T₁ horizontal flip, T₂ 180° rotation, T₃ horizontal flip
/// after 180° rotation (a vertical flip). Applies to the last two axes.
pub fn dag_transform(g: &mut Graph, x: Var, k: usize) -> Result<Var> {
    if k >= MAX_HEADS {
        return Err(Error::Invalid(format!("transform index {k} out of range 0..{MAX_HEADS}")));
    }
    if k == 0 {
        return Ok(x);
    }
    let shape = g.shape(x).to_vec();
    if shape.len() < 2 {
        return Err(Error::Invalid(format!("transform needs at least 2 axes, got {shape:?}")));
    }
    Ok(g.gather(x, Arc::new(dag_index(&shape, k)), &shape)?)
}

/// Every transform is an involution.
pub fn dag_inverse(g: &mut Graph, x: Var, k: usize) -> Result<Var> {
    dag_transform(g, x, k)
}

pub fn dag_transform_image(img: &Image, k: usize) -> Result<Image> {
    if k >= MAX_HEADS {
        return Err(Error::Invalid(format!("transform index {k} out of range 0..{MAX_HEADS}")));
    }
    let idx = dag_index(&[img.height, img.width], k);
    Image::new(img.width, img.height, idx.into_iter().map(|i| img.data[i]).collect())
}

pub fn dag_inverse_image(img: &Image, k: usize) -> Result<Image> {
    dag_transform_image(img, k)
}
