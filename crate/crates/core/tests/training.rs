use std::path::Path;

use radfield::autodiff::ParamSet;
use radfield::checkpoint::{read_container, write_container};
use radfield::dataset::Dataset;
use radfield::discriminator::DiscConfig;
use radfield::field::{FieldConfig, Latents, RenderSettings};
use radfield::geometry::{DetectorConfig, Pose};
use radfield::projector::{generate_dataset, DatasetSpec};
use radfield::trainer::{load_generator, train, LossReport, Scene, TrainConfig, TrainState, CHECKPOINT_FILE, LOSS_CSV};
use radfield::volume::{make_phantom, PhantomSpec};
use radfield::Error;

fn toy_dataset(dir: &Path) -> Dataset {
    let vol = make_phantom(&PhantomSpec::two_material(96.0, 1), [16; 3], [6.0; 3]).unwrap();
    let det = DetectorConfig {
        width: 16,
        height: 16,
        pitch_mm: 10.0,
        ..DetectorConfig::default()
    };
    let spec = DatasetSpec {
        n_views: 4,
        azimuth_step_deg: 90.0,
        ..DatasetSpec::default()
    };
    generate_dataset(&vol, &det, dir, &spec).unwrap();
    Dataset::load(dir).unwrap()
}

fn toy_config() -> TrainConfig {
    TrainConfig {
        iterations: 10,
        batch_size: 2,
        patch_size: 8,
        n_samples: 6,
        checkpoint_every: 0,
        seed: 42,
        field: FieldConfig {
            depth: 2,
            width: 16,
            shape_dim: 4,
            appearance_dim: 4,
            ..FieldConfig::default()
        },
        disc: DiscConfig { channels: 4, heads: 4 },
        ..TrainConfig::default()
    }
}

fn run(cfg: TrainConfig, data: &Dataset, steps: usize) -> (TrainState, Vec<LossReport>) {
    let mut state = TrainState::new(cfg, Scene::from_dataset(data)).unwrap();
    let reports = (0..steps).map(|_| state.step(data).unwrap()).collect();
    (state, reports)
}

fn bits(p: &ParamSet) -> Vec<Vec<u32>> {
    p.iter().map(|(_, t)| t.data().iter().map(|v| v.to_bits() as u32).collect()).collect()
}

#[test]
fn first_steps_are_finite() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(dir.path());
    let (state, reports) = run(toy_config(), &data, 3);
    assert_eq!(state.iteration, 3);
    for r in reports {
        assert!(r.loss_d.is_finite() && r.loss_g.is_finite() && r.loss_r.is_finite());
        assert!(r.loss_d >= 0.0 && r.loss_r >= 0.0);
    }
}

#[test]
fn replays_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(dir.path());
    let (a, ra) = run(toy_config(), &data, 10);
    let (b, rb) = run(toy_config(), &data, 10);
    assert_eq!(ra, rb);
    assert_eq!(bits(a.generator.params()), bits(b.generator.params()));
    assert_eq!(bits(a.discriminator.params()), bits(b.discriminator.params()));
    let (_, rc) = run(TrainConfig { seed: 43, ..toy_config() }, &data, 3);
    assert_ne!(ra[..3], rc[..]);
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(&dir.path().join("data"));
    let (_, straight) = run(toy_config(), &data, 6);
    let (state, first) = run(toy_config(), &data, 3);
    let ck = dir.path().join("mid.rfck");
    state.save(&ck).unwrap();
    let mut resumed = TrainState::load(&ck).unwrap();
    assert_eq!(resumed.iteration, 3);
    let rest: Vec<_> = (0..3).map(|_| resumed.step(&data).unwrap()).collect();
    assert_eq!([first, rest].concat(), straight);
}

#[test]
fn updates_are_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(dir.path());
    let fresh = TrainState::new(toy_config(), Scene::from_dataset(&data)).unwrap();
    let (g0, d0) = (bits(fresh.generator.params()), bits(fresh.discriminator.params()));

    let (only_d, _) = run(TrainConfig { lr_g: 0.0, ..toy_config() }, &data, 2);
    assert_eq!(bits(only_d.generator.params()), g0);
    assert_ne!(bits(only_d.discriminator.params()), d0);

    let (only_g, _) = run(TrainConfig { lr_d: 0.0, ..toy_config() }, &data, 2);
    assert_eq!(bits(only_g.discriminator.params()), d0);
    assert_ne!(bits(only_g.generator.params()), g0);
}

#[test]
fn zero_lambda_is_a_single_head_gan() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(dir.path());
    let (a, ra) = run(TrainConfig { lambda: 0.0, ..toy_config() }, &data, 10);
    let one = TrainConfig {
        heads: 1,
        disc: DiscConfig { channels: 4, heads: 1 },
        ..toy_config()
    };
    let (b, rb) = run(one, &data, 10);
    assert_eq!(ra, rb);
    assert_eq!(bits(a.generator.params()), bits(b.generator.params()));
    let fresh = TrainState::new(TrainConfig { lambda: 0.0, ..toy_config() }, Scene::from_dataset(&data)).unwrap();
    for k in 1..4 {
        for slot in a.discriminator.head_slots(k) {
            assert_eq!(a.discriminator.params().at(slot).data(), fresh.discriminator.params().at(slot).data());
        }
    }
}

#[test]
fn zero_recon_weight_leaves_decoders_alone() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(dir.path());
    let cfg = TrainConfig { recon_weight: 0.0, ..toy_config() };
    let fresh = TrainState::new(cfg.clone(), Scene::from_dataset(&data)).unwrap();
    let (state, reports) = run(cfg, &data, 4);
    assert!(reports.iter().all(|r| r.loss_r > 0.0));
    for (name, t) in state.discriminator.params().iter().filter(|(n, _)| n.contains("/dec_")) {
        assert_eq!(t.data(), fresh.discriminator.params().get(name).unwrap().data(), "{name}");
    }
}

#[test]
fn checkpoint_round_trip_renders_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(&dir.path().join("data"));
    let (state, _) = run(toy_config(), &data, 2);
    let ck = dir.path().join("ck.rfck");
    state.save(&ck).unwrap();
    let back = TrainState::load(&ck).unwrap();
    assert_eq!(back.iteration, 2);
    assert_eq!(back.config, state.config);
    assert_eq!(bits(back.discriminator.params()), bits(state.discriminator.params()));
    assert_eq!(back.adam_g.steps(), state.adam_g.steps());
    for i in 0..state.generator.params().len() {
        assert_eq!(back.adam_g.moments(i), state.adam_g.moments(i));
    }

    let (gen, scene, _) = load_generator(&ck).unwrap();
    let settings = RenderSettings {
        n_samples: 6,
        bound_radius_mm: scene.bound_radius_mm,
        jitter: false,
    };
    let pose = Pose::new(10.0, 77.5, scene.detector.sid_mm);
    let lat = Latents::zeros(&state.config.field);
    let before = state.generator.render_full_image(&pose, &scene.detector, &lat, 8, 64, &settings).unwrap();
    let after = gen.render_full_image(&pose, &scene.detector, &lat, 8, 64, &settings).unwrap();
    assert_eq!(before, after);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(&dir.path().join("data"));
    let (state, _) = run(toy_config(), &data, 1);
    let ck = dir.path().join("ck.rfck");
    state.save(&ck).unwrap();
    let bytes = std::fs::read(&ck).unwrap();

    let cut = dir.path().join("cut.rfck");
    std::fs::write(&cut, &bytes[..bytes.len() - 10]).unwrap();
    assert!(matches!(TrainState::load(&cut), Err(Error::TruncatedPayload { .. })));

    let bad = dir.path().join("bad.rfck");
    let mut b = bytes.clone();
    b[..4].copy_from_slice(b"NOPE");
    std::fs::write(&bad, &b).unwrap();
    assert!(matches!(TrainState::load(&bad), Err(Error::BadMagic { .. })));

    let wider = TrainConfig {
        field: FieldConfig {
            width: 24,
            ..toy_config().field
        },
        ..toy_config()
    };
    match TrainState::load_expecting(&ck, &wider) {
        Err(Error::ArchitectureMismatch { name, expected, found }) => {
            assert_eq!(name, "g/l0/wx");
            assert_eq!(expected[1], 24);
            assert_eq!(found[1], 16);
        }
        other => panic!("expected an architecture mismatch, got {:?}", other.err()),
    }

    let (meta, mut tensors) = read_container(&ck).unwrap();
    let mut pruned = ParamSet::new();
    for (name, t) in tensors.iter_mut().filter(|(n, _)| *n != "g/sigma/b") {
        pruned.insert(name.to_string(), t.clone());
    }
    let missing = dir.path().join("missing.rfck");
    write_container(&missing, &meta, &pruned).unwrap();
    assert!(matches!(TrainState::load(&missing), Err(Error::MissingTensor(n)) if n == "g/sigma/b"));
}

#[test]
fn train_writes_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(&dir.path().join("data"));
    let run_dir = dir.path().join("run");
    let cfg = TrainConfig {
        iterations: 4,
        checkpoint_every: 2,
        ..toy_config()
    };
    let mut state = TrainState::new(cfg, Scene::from_dataset(&data)).unwrap();
    let mut seen = 0;
    train(&mut state, &data, &run_dir, |_| seen += 1).unwrap();
    assert_eq!(seen, 4);
    let csv = std::fs::read_to_string(run_dir.join(LOSS_CSV)).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "iter,loss_d,loss_g,loss_r");
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("4,"));
    for f in [CHECKPOINT_FILE, "checkpoint_000002.rfck", "checkpoint_000004.rfck"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    assert_eq!(TrainState::load(&run_dir.join(CHECKPOINT_FILE)).unwrap().iteration, 4);
}

#[test]
fn rejects_bad_configs() {
    let scene = Scene {
        detector: DetectorConfig::desk(),
        bound_radius_mm: 100.0,
    };
    for cfg in [
        TrainConfig { batch_size: 0, ..toy_config() },
        TrainConfig { heads: 3, ..toy_config() },
        TrainConfig { lambda: -0.1, ..toy_config() },
        TrainConfig { n_samples: 1, ..toy_config() },
    ] {
        assert!(matches!(TrainState::new(cfg, scene), Err(Error::Config(_))));
    }
    let toml_err = serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#);
    assert!(toml_err.is_err());
}
