use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use radfield::dataset::Dataset;
use radfield::features::FrozenFeatureNet;
use radfield::field::{Latents, RenderSettings};
use radfield::geometry::Pose;
use radfield::image::Image;
use radfield::inversion::{invert, render_rotation};
use radfield::metrics::{compare_sets, image_features, kid, Kid, MetricReport};
use radfield::projector::{generate_dataset, DatasetSpec};
use radfield::rng::{substream, Stream};
use radfield::trainer::{load_generator, train, Scene, TrainState, CHECKPOINT_FILE};
use radfield::volume::{load_volume, make_phantom, save_volume, PhantomSpec};

use crate::config::RunConfig;
use crate::fail::{code, Failure};

type Outcome = Result<(), Failure>;

fn mkdir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Failure::io(path, e))
}

pub fn phantom(cfg: &RunConfig, out: &Path, spec_path: Option<&Path>) -> Outcome {
    let spec = match spec_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::io(p, e))?;
            serde_json::from_str::<PhantomSpec>(&text)
                .map_err(|e| Failure::config(format!("{}: {e}", p.display())))?
        }
        None => PhantomSpec::two_material(cfg.phantom.extent_mm, cfg.seed),
    };
    let n = cfg.phantom.dims;
    if n == 0 {
        return Err(Failure::config("phantom.dims must be >= 1"));
    }
    let spacing = spec.extent_mm.map(|e| (e / n as f64) as f32);
    let vol = make_phantom(&spec, [n; 3], spacing)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    save_volume(&vol, out)?;
    println!("wrote {} ({n}³ voxels, {:.3} mm spacing)", out.display(), spacing[0]);
    Ok(())
}

pub fn project(cfg: &RunConfig, volume: &Path, out: &Path) -> Outcome {
    let vol = load_volume(volume)?;
    let spec = DatasetSpec {
        n_views: cfg.project.views,
        azimuth_step_deg: cfg.project.step_deg,
        polar_deg: cfg.project.polar_deg,
        step_mm: cfg.project.step_mm,
    };
    let manifest = generate_dataset(&vol, &cfg.detector, out, &spec)?;
    println!("wrote {} views to {}", manifest.views.len(), out.display());
    Ok(())
}

pub fn train_run(cfg: &RunConfig, data: &Path, run_dir: &Path, resume: bool) -> Outcome {
    let dataset = Dataset::load(data)?;
    let latest = run_dir.join(CHECKPOINT_FILE);
    let mut state = if resume {
        let mut s = TrainState::load_expecting(&latest, &cfg.train)?;
        s.config.iterations = cfg.train.iterations;
        s
    } else {
        if latest.exists() {
            return Err(Failure::new(
                code::FAILURE,
                format!("{} already holds a run; pass --resume or pick another directory", run_dir.display()),
            ));
        }
        TrainState::new(cfg.train.clone(), Scene::from_dataset(&dataset))?
    };
    cfg.echo(run_dir)?;
    let total = state.config.iterations;
    let every = (total / 20).max(1);
    train(&mut state, &dataset, run_dir, |r| {
        if r.iteration % every == 0 || r.iteration == total {
            eprintln!("iter {:>6}/{total}  d {:.4}  g {:.4}  r {:.4}", r.iteration, r.loss_d, r.loss_g, r.loss_r);
        }
    })?;
    println!("trained to iteration {} in {}", state.iteration, run_dir.display());
    Ok(())
}

/// Maps expected depth (mm from the source) onto [0, 1] across the bound.
fn depth_png(depth: &Image, sid_mm: f64, bound_mm: f64) -> Image {
    let near = (sid_mm - bound_mm) as f32;
    let span = (2.0 * bound_mm) as f32;
    let data = depth.data.iter().map(|d| if *d > 0.0 { (d - near) / span } else { 0.0 }).collect();
    Image::new(depth.width, depth.height, data).expect("same shape")
}

/// Tiles equally sized images left to right, `per_row` to a row.
fn montage(images: &[Image], per_row: usize) -> Image {
    let (w, h) = (images[0].width, images[0].height);
    let cols = per_row.min(images.len());
    let rows = images.len().div_ceil(cols);
    let mut out = Image::filled(cols * w, rows * h, 0.0);
    for (i, img) in images.iter().enumerate() {
        let (r0, c0) = ((i / cols) * h, (i % cols) * w);
        for y in 0..h {
            let dst = (r0 + y) * out.width + c0;
            out.data[dst..dst + w].copy_from_slice(&img.data[y * w..(y + 1) * w]);
        }
    }
    out
}

fn write_views(dir: &Path, views: &[(f64, Image, Image)], sid_mm: f64, bound_mm: f64) -> Outcome {
    mkdir(dir)?;
    let mut index = String::from("file,depth_file,azimuth_deg\n");
    for (i, (az, img, depth)) in views.iter().enumerate() {
        let (f, d) = (format!("view_{i:03}.png"), format!("depth_{i:03}.png"));
        img.save_png(&dir.join(&f))?;
        depth_png(depth, sid_mm, bound_mm).save_png(&dir.join(&d))?;
        index.push_str(&format!("{f},{d},{az}\n"));
    }
    write_text(&dir.join("views.csv"), &index)?;
    let imgs: Vec<Image> = views.iter().map(|v| v.1.clone()).collect();
    let depths: Vec<Image> = views.iter().map(|v| depth_png(&v.2, sid_mm, bound_mm)).collect();
    montage(&imgs, 8).save_png(&dir.join("grid.png"))?;
    montage(&depths, 8).save_png(&dir.join("depth_grid.png"))?;
    Ok(())
}

pub fn render(cfg: &RunConfig, checkpoint: &Path, out: &Path, latent_seed: Option<u64>) -> Outcome {
    let (gen, scene, train_cfg) = load_generator(checkpoint)?;
    let latents = match latent_seed {
        Some(s) => Latents::sample(&mut substream(s, Stream::Latent), gen.config()),
        None => Latents::zeros(gen.config()),
    };
    let settings = RenderSettings {
        n_samples: train_cfg.n_samples,
        bound_radius_mm: scene.bound_radius_mm,
        jitter: false,
    };
    let rc = &cfg.render;
    if rc.azimuths_deg.is_empty() {
        return Err(Failure::config("render.azimuths_deg is empty"));
    }
    let views = rc
        .azimuths_deg
        .iter()
        .map(|az| {
            let pose = Pose::new(*az, rc.polar_deg, scene.detector.sid_mm);
            let (img, depth) = gen.render_full_image(&pose, &scene.detector, &latents, rc.resolution, rc.chunk, &settings)?;
            Ok((*az, img, depth))
        })
        .collect::<Result<Vec<_>, radfield::Error>>()?;
    write_views(out, &views, scene.detector.sid_mm, scene.bound_radius_mm)?;
    println!("rendered {} views to {}", views.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct LatentsFile<'a> {
    z_s: &'a [f32],
    z_a: &'a [f32],
}

pub fn invert_run(cfg: &RunConfig, checkpoint: &Path, xray_path: &Path, out: &Path) -> Outcome {
    let (mut gen, scene, train_cfg) = load_generator(checkpoint)?;
    let xray = Image::load_png(xray_path)?;
    let settings = RenderSettings {
        n_samples: train_cfg.n_samples,
        bound_radius_mm: scene.bound_radius_mm,
        jitter: false,
    };
    let init = Latents::zeros(gen.config());
    let inv = &cfg.inversion;
    let fit = invert(&mut gen, &xray, &init, &settings, &scene.detector, inv, &FrozenFeatureNet::default())?;
    cfg.echo(out)?;

    let csv = out.join("loss.csv");
    let mut text = String::from("iter,loss,mse,psnr,best_loss\n");
    for s in &fit.history {
        text.push_str(&format!("{},{},{},{},{}\n", s.iteration, s.loss, s.mse, s.psnr, s.best_loss));
    }
    write_text(&csv, &text)?;
    fit.render.save_png(&out.join("fitted.png"))?;
    depth_png(&fit.depth, scene.detector.sid_mm, scene.bound_radius_mm).save_png(&out.join("fitted_depth.png"))?;
    let lat = serde_json::to_string_pretty(&LatentsFile {
        z_s: &fit.latents.z_s,
        z_a: &fit.latents.z_a,
    })
    .expect("latents serialize");
    write_text(&out.join("latents.json"), &lat)?;

    let views = render_rotation(
        &gen,
        &fit.latents,
        &settings,
        &scene.detector,
        cfg.render.rotation_views,
        inv.azimuth_deg,
        inv.polar_deg,
        xray.width,
        inv.chunk,
    )?;
    write_views(&out.join("rotation"), &views, scene.detector.sid_mm, scene.bound_radius_mm)?;
    println!(
        "fitted PSNR {:.2} dB (from {:.2} dB), {} rotation views in {}",
        fit.best_psnr,
        fit.initial_psnr,
        views.len(),
        out.display()
    );
    Ok(())
}

fn load_set(dir: &Path) -> Result<(Vec<PathBuf>, Vec<Image>), Failure> {
    let entries = fs::read_dir(dir).map_err(|e| Failure::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure::new(code::MISSING_FILE, format!("{}: no PNG images", dir.display())));
    }
    let images = files.iter().map(|f| Image::load_png(f)).collect::<Result<Vec<_>, _>>()?;
    Ok((files, images))
}

pub const KID_NOTE: &str =
    "KID uses FrozenFeatureNet features, so its values are not comparable to Inception-based KID";

#[derive(Serialize)]
struct EvalReport<'a> {
    set_a: &'a Path,
    set_b: &'a Path,
    files: Vec<String>,
    psnr_db: MeanStd,
    ssim: MeanStd,
    kid: Option<MeanStd>,
    kid_note: &'static str,
    metrics: &'a MetricReport,
}

#[derive(Serialize)]
struct MeanStd {
    mean: f64,
    std: f64,
}

pub fn eval(cfg: &RunConfig, set_a: &Path, set_b: &Path, out: Option<&Path>) -> Outcome {
    let (names, a) = load_set(set_a)?;
    let (_, b) = load_set(set_b)?;
    let mut report = compare_sets(&a, &b)?;
    let n = cfg.eval.kid_subset_size.min(a.len());
    if n >= 2 && cfg.eval.kid_subsets > 0 {
        let net = FrozenFeatureNet::default();
        let (fa, fb) = (image_features(&a, &net)?, image_features(&b, &net)?);
        report.kid = Some(kid(&fa, &fb, n, cfg.eval.kid_subsets, &mut substream(cfg.seed, Stream::Kid))?);
    }
    let kid_line = match &report.kid {
        Some(Kid { mean, std, .. }) => format!("{mean:.4} ± {std:.4}"),
        None => "n/a (fewer than 2 images)".into(),
    };
    println!("pairs      {}", report.pairs.len());
    println!("PSNR (dB)  {:.2} ± {:.2}", report.psnr_mean, report.psnr_std);
    println!("SSIM       {:.4} ± {:.4}", report.ssim_mean, report.ssim_std);
    println!("KID        {kid_line}");
    println!("note: {KID_NOTE}");
    if let Some(path) = out {
        let doc = EvalReport {
            set_a,
            set_b,
            files: names.iter().map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned()).collect(),
            psnr_db: MeanStd {
                mean: report.psnr_mean,
                std: report.psnr_std,
            },
            ssim: MeanStd {
                mean: report.ssim_mean,
                std: report.ssim_std,
            },
            kid: report.kid.as_ref().map(|k| MeanStd { mean: k.mean, std: k.std }),
            kid_note: KID_NOTE,
            metrics: &report,
        };
        let mut f = fs::File::create(path).map_err(|e| Failure::io(path, e))?;
        let text = serde_json::to_string_pretty(&doc).expect("report serializes");
        writeln!(f, "{text}").map_err(|e| Failure::io(path, e))?;
    }
    Ok(())
}
