mod common;

use common::*;
use proptest::prelude::*;
use radfield::autodiff::{Graph, Real};
use radfield::field::{composite, expected_depth, Latents, RenderSettings};
use radfield::geometry::Pose;
use radfield::rng::{substream, Stream};
use radfield::sampler::{PatchPattern, SamplePoints};

fn latents64(l: &Latents) -> (Vec<f64>, Vec<f64>) {
    let to = |v: &[f32]| v.iter().map(|x| *x as f64).collect();
    (to(&l.z_s), to(&l.z_a))
}

#[test]
fn tape_forward_matches_reference() {
    let gen = small_generator(3);
    let cfg = *gen.config();
    let (rays, pts) = probe_rays(&PatchPattern::full(4), 8);
    let lat = Latents::sample(&mut substream(3, Stream::Latent), &cfg);
    let mut g = Graph::new();
    let p = gen.bind_frozen(&mut g).unwrap();
    let (zs, za) = lat.bind(&mut g, false).unwrap();
    let out = gen.render_rays(&mut g, &p, &rays, &pts, zs, za, BOUND_MM).unwrap();
    let (s, a) = latents64(&lat);
    let p64 = params64(gen.params());
    for (r, v) in g.value(out.pixels).iter().enumerate() {
        let want = reference_pixel(&cfg, &p64, &rays, &pts, r, &s, &a);
        assert!((*v as f64 - want).abs() < 1e-5, "ray {r}: {v} vs {want}");
    }
}

#[test]
fn density_ignores_appearance_and_direction() {
    let gen = small_generator(5);
    let cfg = *gen.config();
    let (rays, pts) = probe_rays(&PatchPattern::full(3), 6);
    let mut rng = substream(5, Stream::Latent);
    let a = Latents::sample(&mut rng, &cfg);
    let mut b = Latents::sample(&mut rng, &cfg);
    b.z_s = a.z_s.clone();
    let sigma = |l: &Latents, flip_dirs: bool| {
        let mut rays = rays.clone();
        if flip_dirs {
            rays.directions.iter_mut().for_each(|d| *d = [-d[1], d[0], d[2]]);
        }
        let mut g = Graph::new();
        let p = gen.bind_frozen(&mut g).unwrap();
        let (x, d) = gen.encode_inputs(&mut g, &rays, &pts, BOUND_MM).unwrap();
        let (zs, za) = l.bind(&mut g, false).unwrap();
        let (s, c) = gen.field_eval(&mut g, &p, x, d, zs, za, rays.len(), pts.n).unwrap();
        (g.value(s).to_vec(), g.value(c).to_vec())
    };
    let (s0, c0) = sigma(&a, false);
    let (s1, c1) = sigma(&b, true);
    assert_eq!(s0, s1);
    assert_ne!(c0, c1);
}

#[test]
fn zeroed_heads_give_fixed_outputs() {
    let mut gen = small_generator(7);
    for name in ["g/sigma/w", "g/sigma/b", "g/out/w", "g/out/b"] {
        gen.params_mut().get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let cfg = *gen.config();
    let (rays, pts) = probe_rays(&PatchPattern::full(2), 4);
    let mut g = Graph::new();
    let p = gen.bind_frozen(&mut g).unwrap();
    let (x, d) = gen.encode_inputs(&mut g, &rays, &pts, BOUND_MM).unwrap();
    let (zs, za) = Latents::sample(&mut substream(7, Stream::Latent), &cfg).bind(&mut g, false).unwrap();
    let (s, c) = gen.field_eval(&mut g, &p, x, d, zs, za, rays.len(), pts.n).unwrap();
    assert!(g.value(s).iter().all(|v| (*v - std::f64::consts::LN_2 as Real).abs() < 1e-6));
    assert!(g.value(c).iter().all(|v| *v == 0.5));
}

#[test]
fn color_gradient_matches_finite_differences() {
    let gen = small_generator(11);
    let cfg = *gen.config();
    let (rays, pts) = probe_rays(&PatchPattern::full(2), 4);
    let lat = Latents::sample(&mut substream(11, Stream::Latent), &cfg);
    let (zs64, za64) = latents64(&lat);
    let point = 5;
    let ray = point / pts.n;
    let x = [0, 1, 2].map(|a| pts.positions[point * 3 + a] / BOUND_MM);
    for name in ["g/l1/w", "g/color/wh", "g/l0/wz"] {
        let mut g = Graph::new();
        let bound = gen.params().bind(&mut g);
        let (xe, de) = gen.encode_inputs(&mut g, &rays, &pts, BOUND_MM).unwrap();
        let (zs, za) = lat.bind(&mut g, false).unwrap();
        let (_, c) = gen.field_eval(&mut g, bound.vars(), xe, de, zs, za, rays.len(), pts.n).unwrap();
        let flat = g.reshape(c, &[rays.len() * pts.n]).unwrap();
        let one = g.slice(flat, 0, point, 1).unwrap();
        let out = g.sum(one).unwrap();
        let grads = g.backward(out).unwrap();
        let slot = gen.params().slot(name).unwrap();
        let analytic: Vec<f64> = grads.get(bound.var(slot)).unwrap().iter().map(|v| *v as f64).collect();

        let base = params64(gen.params());
        let w0 = base[name].clone();
        let numeric: Vec<f64> = (0..w0.len())
            .map(|i| {
                let f = |w: &[f64]| {
                    let mut p = base.clone();
                    p.insert(name.to_string(), w.to_vec());
                    reference_point(&cfg, &p, x, rays.directions[ray], &zs64, &za64).1
                };
                central_diff(f, &w0, i, 1e-5)
            })
            .collect();
        assert!(numeric.iter().any(|v| v.abs() > 1e-6), "{name}: zero gradient probe");
        let err = rel_err(&analytic, &numeric);
        assert!(err <= 1e-4, "{name}: rel err {err:.3e}");
    }
}

#[test]
fn pixel_gradient_wrt_shape_code_matches_finite_differences() {
    let gen = small_generator(13);
    let cfg = *gen.config();
    let (rays, pts) = probe_rays(&PatchPattern::full(2), 8);
    let lat = Latents::sample(&mut substream(13, Stream::Latent), &cfg);
    let (zs64, za64) = latents64(&lat);
    let p64 = params64(gen.params());
    for ray in 0..rays.len() {
        let mut g = Graph::new();
        let p = gen.bind_frozen(&mut g).unwrap();
        let (zs, za) = lat.bind(&mut g, true).unwrap();
        let out = gen.render_rays(&mut g, &p, &rays, &pts, zs, za, BOUND_MM).unwrap();
        let px = g.slice(out.pixels, 0, ray, 1).unwrap();
        let px = g.sum(px).unwrap();
        let grads = g.backward(px).unwrap();
        let analytic: Vec<f64> = grads.get(zs).unwrap().iter().map(|v| *v as f64).collect();
        let numeric: Vec<f64> = (0..zs64.len())
            .map(|i| central_diff(|z| reference_pixel(&cfg, &p64, &rays, &pts, ray, z, &za64), &zs64, i, 1e-5))
            .collect();
        let err = rel_err(&analytic, &numeric);
        assert!(err <= 1e-3, "ray {ray}: rel err {err:.3e}");
    }
}

#[test]
fn patch_matches_full_image_pixels() {
    let gen = small_generator(17);
    let cfg = *gen.config();
    let det = small_detector();
    let pose = Pose::new(40.0, 80.0, det.sid_mm);
    let settings = RenderSettings {
        n_samples: 8,
        bound_radius_mm: BOUND_MM,
        jitter: false,
    };
    let lat = Latents::sample(&mut substream(17, Stream::Latent), &cfg);
    let (full, _) = gen.render_full_image(&pose, &det, &lat, 64, 512, &settings).unwrap();
    let (r0, c0) = (20, 10);
    let pattern = PatchPattern {
        u: [0.125 + c0 as f64 / 64.0, 0.125 + r0 as f64 / 64.0],
        s: 0.25,
        k: 16,
    };
    let mut g = Graph::new();
    let p = gen.bind_frozen(&mut g).unwrap();
    let z = lat.bind(&mut g, false).unwrap();
    let mut rng = substream(0, Stream::Jitter);
    let patch = gen.render_patch(&mut g, &p, &pose, &det, &pattern, z, &settings, &mut rng).unwrap();
    let v = g.value(patch);
    let mut worst = 0f32;
    for r in 0..16 {
        for c in 0..16 {
            worst = worst.max((v[r * 16 + c] as f32 - full.at(r0 + r, c0 + c)).abs());
        }
    }
    assert!(worst <= 1e-5, "max abs {worst}");
}

#[test]
fn chunking_does_not_change_renders() {
    let gen = small_generator(19);
    let det = small_detector();
    let pose = Pose::new(0.0, 77.5, det.sid_mm);
    let settings = RenderSettings {
        n_samples: 6,
        bound_radius_mm: BOUND_MM,
        jitter: false,
    };
    let lat = Latents::zeros(gen.config());
    let (a, da) = gen.render_full_image(&pose, &det, &lat, 12, 1, &settings).unwrap();
    let (b, db) = gen.render_full_image(&pose, &det, &lat, 12, 4096, &settings).unwrap();
    assert_eq!(a, b);
    assert_eq!(da, db);
}

#[test]
fn zero_weights_give_zero_depth() {
    let pts = SamplePoints {
        n: 3,
        positions: vec![0.0; 9],
        depths: vec![10.0, 20.0, 30.0],
        deltas: vec![10.0; 3],
    };
    assert_eq!(expected_depth(&[0.0; 3], &pts), vec![0.0]);
    let d = expected_depth(&[0.0, 0.5, 0.5], &pts)[0];
    assert!((d - 25.0).abs() < 1e-6);
}

#[test]
fn two_sample_hand_case() {
    let ln2 = std::f32::consts::LN_2;
    let c = composite(&[1.0, 1.0], &[ln2, ln2], &[1.0, 1.0], 0.0).unwrap();
    assert_eq!(c.pixel, 0.75);
    assert_eq!(c.weights, vec![0.5, 0.25]);
}

#[test]
fn empty_and_opaque_limits() {
    let c = composite(&[0.3, 0.7], &[0.0, 0.0], &[1.0, 1.0], 1.0).unwrap();
    assert_eq!(c.pixel, 1.0);
    let c = composite(&[0.3, 0.7], &[1e4, 0.0], &[1.0, 1.0], 1.0).unwrap();
    assert!((c.pixel - 0.3).abs() < 1e-7);
    assert!(composite(&[0.3], &[-1.0], &[1.0], 1.0).is_err());
    assert!(composite(&[], &[], &[], 1.0).is_err());
}

fn ray_inputs() -> impl Strategy<Value = (Vec<f32>, Vec<f32>, Vec<f32>)> {
    (1usize..24).prop_flat_map(|n| {
        (
            prop::collection::vec(0f32..1.0, n),
            prop::collection::vec(0f32..20.0, n),
            prop::collection::vec(0f32..0.5, n),
        )
    })
}

proptest! {
    #[test]
    fn weights_and_residual_sum_to_one((c, s, d) in ray_inputs()) {
        let out = composite(&c, &s, &d, 1.0).unwrap();
        let total: f64 = out.weights.iter().map(|w| *w as f64).sum::<f64>() + out.residual as f64;
        prop_assert!((total - 1.0).abs() <= 1e-6, "{}", total);
        prop_assert!(out.weights.iter().all(|w| *w >= 0.0));
        prop_assert!((0.0..=1.0).contains(&out.pixel));
    }

    #[test]
    fn denser_never_brighter_over_white((c, s, d) in ray_inputs(), bump in 0f32..5.0) {
        let black = vec![0.0; c.len()];
        let a = composite(&black, &s, &d, 1.0).unwrap().pixel;
        let more: Vec<f32> = s.iter().map(|v| v + bump).collect();
        let b = composite(&black, &more, &d, 1.0).unwrap().pixel;
        prop_assert!(b <= a, "{} > {}", b, a);
    }

    #[test]
    fn field_outputs_in_range(seed in 0u64..1000) {
        let gen = small_generator(seed);
        let cfg = *gen.config();
        let (rays, pts) = probe_rays(&PatchPattern::full(2), 4);
        let mut g = Graph::new();
        let p = gen.bind_frozen(&mut g).unwrap();
        let (x, d) = gen.encode_inputs(&mut g, &rays, &pts, BOUND_MM).unwrap();
        let (zs, za) = Latents::sample(&mut substream(seed, Stream::Latent), &cfg).bind(&mut g, false).unwrap();
        let (s, c) = gen.field_eval(&mut g, &p, x, d, zs, za, rays.len(), pts.n).unwrap();
        prop_assert!(g.value(s).iter().all(|v| *v >= 0.0));
        prop_assert!(g.value(c).iter().all(|v| *v > 0.0 && *v < 1.0));
    }
}
