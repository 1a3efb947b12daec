//! Image-quality metrics: PSNR, SSIM and kernel inception distance over
//! the frozen feature net.
//!
//! KID values computed here use [`FrozenFeatureNet`] features, not
//! Inception features, so they are not comparable with published KID
//! numbers.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FrozenFeatureNet;
use crate::image::Image;

pub const PSNR_CAP_DB: f64 = 99.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Invalid(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
    Ok(s / a.data.len() as f64)
}

/// `10·log10(1/MSE)` for data range 1, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over all fully contained 11×11 Gaussian windows.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::Invalid(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width, a.height
        )));
    }
    let g = gaussian_window();
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let (w, h) = (a.width, a.height);
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for r in 0..oh {
        for c in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, gi) in g.iter().enumerate() {
                for (j, gj) in g.iter().enumerate() {
                    let wgt = gi * gj;
                    let x = a.at(r + i, c + j) as f64;
                    let y = b.at(r + i, c + j) as f64;
                    ma += wgt * x;
                    mb += wgt * y;
                    saa += wgt * x * x;
                    sbb += wgt * y * y;
                    sab += wgt * x * y;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (ow * oh) as f64)
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kid {
    pub mean: f64,
    pub std: f64,
    pub subsets: Vec<f64>,
}

fn poly_kernel(x: &[f32], y: &[f32]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| *a as f64 * *b as f64).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased MMD² between two equally sized feature sets.
pub fn mmd2_unbiased(x: &[&[f32]], y: &[&[f32]]) -> f64 {
    let m = x.len() as f64;
    let (mut kxx, mut kyy, mut kxy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        for j in 0..x.len() {
            if i != j {
                kxx += poly_kernel(x[i], x[j]);
                kyy += poly_kernel(y[i], y[j]);
            }
            kxy += poly_kernel(x[i], y[j]);
        }
    }
    kxx / (m * (m - 1.0)) + kyy / (m * (m - 1.0)) - 2.0 * kxy / (m * m)
}

/// KID with kernel `(xᵀy/d + 1)³`, averaged over random subsets drawn
/// without replacement from each set.
pub fn kid<R: Rng>(a: &[Vec<f32>], b: &[Vec<f32>], subset_size: usize, n_subsets: usize, rng: &mut R) -> Result<Kid> {
    if subset_size < 2 {
        return Err(Error::Invalid(format!("KID subset size {subset_size} must be >= 2")));
    }
    if a.len() < subset_size || b.len() < subset_size {
        return Err(Error::Invalid(format!(
            "KID subsets of {subset_size} need at least that many samples per set ({} and {})",
            a.len(),
            b.len()
        )));
    }
    if n_subsets == 0 {
        return Err(Error::Invalid("KID needs at least one subset".into()));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|f| f.len() != d) {
        return Err(Error::Invalid("feature dimensions differ".into()));
    }
    let mut subsets = Vec::with_capacity(n_subsets);
    for _ in 0..n_subsets {
        let ia = sample(rng, a.len(), subset_size);
        let ib = sample(rng, b.len(), subset_size);
        let xa: Vec<&[f32]> = ia.iter().map(|i| a[i].as_slice()).collect();
        let xb: Vec<&[f32]> = ib.iter().map(|i| b[i].as_slice()).collect();
        subsets.push(mmd2_unbiased(&xa, &xb));
    }
    let (mean, std) = mean_std(&subsets);
    Ok(Kid { mean, std, subsets })
}

pub fn image_features(images: &[Image], net: &FrozenFeatureNet) -> Result<Vec<Vec<f32>>> {
    images.iter().map(|i| net.pooled(i)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pairs: Vec<PairMetrics>,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kid: Option<Kid>,
}

/// Per-pair PSNR and SSIM with their mean ± std.
pub fn compare_sets(a: &[Image], b: &[Image]) -> Result<MetricReport> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Invalid(format!("cannot pair {} with {} images", a.len(), b.len())));
    }
    let pairs = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            Ok(PairMetrics {
                psnr: psnr(x, y)?,
                ssim: ssim(x, y)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (psnr_mean, psnr_std) = mean_std(&pairs.iter().map(|p| p.psnr).collect::<Vec<_>>());
    let (ssim_mean, ssim_std) = mean_std(&pairs.iter().map(|p| p.ssim).collect::<Vec<_>>());
    Ok(MetricReport {
        pairs,
        psnr_mean,
        psnr_std,
        ssim_mean,
        ssim_std,
        kid: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn psnr_cases() {
        let a = Image::filled(8, 8, 0.3);
        let b = Image::filled(8, 8, 0.4);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &Image::filled(4, 8, 0.0)).is_err());
    }

    #[test]
    fn ssim_cases() {
        let a = Image::new(16, 16, (0..256).map(|i| ((i * 7) % 17) as f32 / 17.0).collect()).unwrap();
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let z = Image::filled(16, 16, 0.0);
        let o = Image::filled(16, 16, 1.0);
        let c1 = 1e-4;
        assert!((ssim(&z, &o).unwrap() - c1 / (1.0 + c1)).abs() < 1e-9);
        assert!(ssim(&Image::filled(8, 8, 0.0), &Image::filled(8, 8, 0.0)).is_err());
    }

    fn gaussian(rng: &mut impl Rng, n: usize, d: usize, shift: f32) -> Vec<Vec<f32>> {
        (0..n)
            .map(|_| (0..d).map(|_| { let v: f32 = StandardNormal.sample(rng); v + shift }).collect::<Vec<f32>>())
            .collect()
    }

    #[test]
    fn kid_same_vs_shifted() {
        let mut rng = substream(4, Stream::Kid);
        let all = gaussian(&mut rng, 256, 16, 0.0);
        let (a, b) = all.split_at(128);
        let same = kid(a, b, 64, 10, &mut rng).unwrap();
        assert!(same.mean.abs() < 3.0 * same.std, "{} {}", same.mean, same.std);
        let shifted: Vec<Vec<f32>> = b.iter().map(|f| f.iter().map(|v| v + 3.0).collect()).collect();
        let far = kid(a, &shifted, 64, 10, &mut rng).unwrap();
        assert!(far.mean > 10.0 * same.std, "{} {}", far.mean, same.std);
        assert!(kid(a, b, 1, 1, &mut rng).is_err());
    }
}
