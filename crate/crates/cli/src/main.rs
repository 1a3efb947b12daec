//! `radfield`: phantoms, projections, training, rendering, inversion and
//! evaluation from the command line.

mod commands;
mod config;
mod fail;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use fail::Failure;

#[derive(Parser)]
#[command(name = "radfield", version, about = "Generative radiance fields for X-ray projections")]
struct Cli {
    /// TOML run configuration; omitted keys take the desk defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an attenuation volume (RVOL).
    Phantom {
        #[arg(long)]
        out: PathBuf,
        /// JSON phantom description; the two-material preset otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        dims: Option<usize>,
        #[arg(long)]
        extent_mm: Option<f64>,
    },
    /// Project a volume into a dataset of DRRs.
    Project {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        step_deg: Option<f64>,
    },
    /// Train a model on a DRR dataset.
    Train {
        /// Dataset directory; falls back to `paths.data`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        iterations: Option<u64>,
        /// Continue from the run directory's checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Render views of a trained model.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated azimuths in degrees.
        #[arg(long, value_delimiter = ',')]
        azimuths: Option<Vec<f64>>,
        #[arg(long)]
        resolution: Option<usize>,
        /// Draw the latent codes from this seed instead of using zeros.
        #[arg(long)]
        latent_seed: Option<u64>,
    },
    /// Fit a trained model to one X-ray and render the full rotation.
    Invert {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        xray: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        azimuth: Option<f64>,
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        no_finetune: bool,
    },
    /// Compare two directories of PNG images.
    Eval {
        set_a: PathBuf,
        set_b: PathBuf,
        /// Also write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("RADFIELD_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Failure::config(format!("RADFIELD_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::new(fail::code::FAILURE, e.to_string()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    let mut cfg = RunConfig::load(cli.config.as_deref())?.with_seed(cli.seed);
    match cli.command {
        Command::Phantom {
            out,
            spec,
            dims,
            extent_mm,
        } => {
            cfg.phantom.dims = dims.unwrap_or(cfg.phantom.dims);
            cfg.phantom.extent_mm = extent_mm.unwrap_or(cfg.phantom.extent_mm);
            commands::phantom(&cfg, &out, spec.as_deref())
        }
        Command::Project {
            volume,
            out,
            views,
            step_deg,
        } => {
            cfg.project.views = views.unwrap_or(cfg.project.views);
            cfg.project.step_deg = step_deg.unwrap_or(cfg.project.step_deg);
            commands::project(&cfg, &volume, &out)
        }
        Command::Train {
            data,
            run_dir,
            iterations,
            resume,
        } => {
            cfg.train.iterations = iterations.unwrap_or(cfg.train.iterations);
            let data = data
                .or_else(|| cfg.paths.data.clone())
                .ok_or_else(|| Failure::config("no dataset: pass --data or set paths.data"))?;
            cfg.paths.data = Some(data.clone());
            commands::train_run(&cfg, &data, &run_dir, resume)
        }
        Command::Render {
            checkpoint,
            out,
            azimuths,
            resolution,
            latent_seed,
        } => {
            cfg.render.azimuths_deg = azimuths.unwrap_or(cfg.render.azimuths_deg);
            cfg.render.resolution = resolution.unwrap_or(cfg.render.resolution);
            commands::render(&cfg, &checkpoint, &out, latent_seed)
        }
        Command::Invert {
            checkpoint,
            xray,
            out,
            iterations,
            azimuth,
            views,
            no_finetune,
        } => {
            cfg.inversion.iterations = iterations.unwrap_or(cfg.inversion.iterations);
            cfg.inversion.azimuth_deg = azimuth.unwrap_or(cfg.inversion.azimuth_deg);
            cfg.inversion.finetune &= !no_finetune;
            cfg.render.rotation_views = views.unwrap_or(cfg.render.rotation_views);
            commands::invert_run(&cfg, &checkpoint, &xray, &out)
        }
        Command::Eval { set_a, set_b, out } => commands::eval(&cfg, &set_a, &set_b, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
