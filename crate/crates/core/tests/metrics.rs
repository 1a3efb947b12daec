use proptest::prelude::*;
use radfield::features::FrozenFeatureNet;
use radfield::image::Image;
use radfield::metrics::{compare_sets, image_features, kid, psnr, ssim, PSNR_CAP_DB};
use radfield::rng::{substream, Stream};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_image(seed: u64, n: usize) -> Image {
    let mut rng = substream(seed, Stream::Init);
    Image::new(n, n, (0..n * n).map(|_| rng.random::<f32>()).collect()).unwrap()
}

#[test]
fn kid_of_one_distribution_is_indistinguishable_from_zero() {
    let mut rng = substream(11, Stream::Kid);
    let feats: Vec<Vec<f32>> = (0..256)
        .map(|_| (0..16).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let (a, b) = feats.split_at(128);
    let k = kid(a, b, 64, 20, &mut rng).unwrap();
    assert_eq!(k.subsets.len(), 20);
    assert!(k.mean.abs() < 2.0 * k.std, "{} vs std {}", k.mean, k.std);
}

#[test]
fn kid_replays_with_a_fixed_seed() {
    let imgs: Vec<Image> = (0..6).map(|s| random_image(s, 16)).collect();
    let f = image_features(&imgs, &FrozenFeatureNet::default()).unwrap();
    let run = || kid(&f[..3], &f[3..], 3, 1, &mut substream(5, Stream::Kid)).unwrap();
    assert_eq!(run(), run());
}

#[test]
fn identical_sets_report_the_cap() {
    let set: Vec<Image> = (0..3).map(|s| random_image(s, 16)).collect();
    let r = compare_sets(&set, &set).unwrap();
    assert_eq!(r.psnr_mean, PSNR_CAP_DB);
    assert_eq!(r.psnr_std, 0.0);
    assert!((r.ssim_mean - 1.0).abs() < 1e-12);
    assert!(compare_sets(&set, &set[..2]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn symmetric_and_bounded(a in 0u64..1000, b in 1000u64..2000) {
        let (x, y) = (random_image(a, 12), random_image(b, 12));
        prop_assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
        let s = ssim(&x, &y).unwrap();
        prop_assert!((s - ssim(&y, &x).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!(psnr(&x, &y).unwrap() >= 0.0);
        prop_assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP_DB);
    }
}
