//! Adversarial training of the radiance field against real projections.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use radfield_autodiff::{Adam, AdamConfig, Graph, ParamSet, Real, Tensor, Var};

use crate::checkpoint::{read_container, write_container};
use crate::dataset::{extract_patch, Dataset};
use crate::discriminator::{DiscConfig, Discriminator};
use crate::error::{io_err, Error, Result};
use crate::features::FrozenFeatureNet;
use crate::field::{FieldConfig, Generator, Latents, RenderSettings};
use crate::geometry::DetectorConfig;
use crate::losses::{hinge_d, hinge_g, total_loss};
use crate::rng::{substream, Stream, StreamState};
use crate::sampler::{sample_patch_pattern, sample_pose, DEFAULT_POLAR_RANGE, DEFAULT_S_MIN};

pub const LOSS_CSV: &str = "loss.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.rfck";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub n_samples: usize,
    pub lambda: f32,
    pub heads: usize,
    /// A learning rate of 0 freezes that network.
    pub lr_g: f32,
    pub lr_d: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Multiplier of the decoder reconstruction loss in the D objective.
    pub recon_weight: f32,
    pub polar_range_deg: [f64; 2],
    pub scale_range: [f64; 2],
    pub jitter: bool,
    pub seed: u64,
    /// Checkpoint every this many iterations; 0 keeps only the final one.
    pub checkpoint_every: u64,
    pub field: FieldConfig,
    pub disc: DiscConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 100_000,
            batch_size: 8,
            patch_size: 32,
            n_samples: 64,
            lambda: 0.2,
            heads: 4,
            lr_g: 5e-4,
            lr_d: 1e-4,
            beta1: 0.0,
            beta2: 0.999,
            eps: 1e-8,
            recon_weight: 1.0,
            polar_range_deg: DEFAULT_POLAR_RANGE,
            scale_range: [DEFAULT_S_MIN, 1.0],
            jitter: true,
            seed: 0,
            checkpoint_every: 1000,
            field: FieldConfig::default(),
            disc: DiscConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small preset that trains on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            iterations: 2000,
            batch_size: 4,
            patch_size: 16,
            n_samples: 32,
            checkpoint_every: 500,
            field: FieldConfig::desk(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if self.heads != self.disc.heads {
            return Err(Error::Config(format!(
                "heads ({}) and disc.heads ({}) disagree",
                self.heads, self.disc.heads
            )));
        }
        if !(self.lr_g >= 0.0 && self.lr_d >= 0.0) {
            return Err(Error::Config("learning rates must be >= 0".into()));
        }
        if self.n_samples < 2 {
            return Err(Error::Config("n_samples must be >= 2".into()));
        }
        self.field.validate()
    }

    fn adam(&self, lr: f32) -> AdamConfig {
        AdamConfig {
            lr: lr as Real,
            beta1: self.beta1 as Real,
            beta2: self.beta2 as Real,
            eps: self.eps as Real,
        }
    }

    /// Heads that take part in the objective; λ = 0 leaves only the identity head.
    pub fn active_heads(&self) -> usize {
        if self.lambda == 0.0 {
            1
        } else {
            self.heads
        }
    }
}

/// Imaging geometry the model is trained for.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub detector: DetectorConfig,
    pub bound_radius_mm: f64,
}

impl Scene {
    pub fn from_dataset(ds: &Dataset) -> Self {
        Self {
            detector: ds.detector(),
            bound_radius_mm: ds.bound_radius_mm(),
        }
    }
}

const STREAMS: [Stream; 5] = [Stream::Pose, Stream::Pattern, Stream::Latent, Stream::Jitter, Stream::RealImage];

fn stream_slot(s: Stream) -> usize {
    STREAMS.iter().position(|x| *x == s).expect("tracked stream")
}

pub struct TrainState {
    pub config: TrainConfig,
    pub scene: Scene,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub adam_g: Adam,
    pub adam_d: Adam,
    pub iteration: u64,
    rngs: Vec<ChaCha8Rng>,
    pub net: FrozenFeatureNet,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub iteration: u64,
    pub loss_d: f32,
    pub loss_g: f32,
    pub loss_r: f32,
}

impl LossReport {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{}", self.iteration, self.loss_d, self.loss_g, self.loss_r)
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    scene: Scene,
    iteration: u64,
    adam_g_steps: u64,
    adam_d_steps: u64,
    rng: Vec<StreamState>,
    feature_fingerprint: u64,
}

impl TrainState {
    pub fn new(config: TrainConfig, scene: Scene) -> Result<Self> {
        Self::with_net(config, scene, FrozenFeatureNet::default())
    }

    pub fn with_net(config: TrainConfig, scene: Scene, net: FrozenFeatureNet) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(config.field, config.seed)?;
        let mut discriminator = Discriminator::new(config.disc, config.patch_size, config.seed)?;
        // Heads outside the objective receive no gradient.
        for k in config.active_heads()..config.heads {
            for slot in discriminator.head_slots(k) {
                discriminator.params_mut().at_mut(slot).set_requires_grad(false);
            }
        }
        let adam_g = Adam::new(config.adam(config.lr_g), generator.params());
        let adam_d = Adam::new(config.adam(config.lr_d), discriminator.params());
        let rngs = STREAMS.iter().map(|s| substream(config.seed, *s)).collect();
        Ok(Self {
            config,
            scene,
            generator,
            discriminator,
            adam_g,
            adam_d,
            iteration: 0,
            rngs,
            net,
        })
    }

    fn rng(&mut self, s: Stream) -> &mut ChaCha8Rng {
        &mut self.rngs[stream_slot(s)]
    }

    pub fn render_settings(&self, jitter: bool) -> RenderSettings {
        RenderSettings {
            n_samples: self.config.n_samples,
            bound_radius_mm: self.scene.bound_radius_mm,
            jitter,
        }
    }

    /// One discriminator update followed by one generator update.
    pub fn step(&mut self, data: &Dataset) -> Result<LossReport> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let cfg = self.config.clone();
        let (b, k) = (cfg.batch_size, cfg.patch_size);
        let heads = cfg.active_heads();
        let det = self.scene.detector;

        let mut poses = Vec::with_capacity(b);
        let mut patterns = Vec::with_capacity(b);
        let mut latents = Vec::with_capacity(b);
        let mut real = Vec::with_capacity(b * k * k);
        for _ in 0..b {
            poses.push(sample_pose(self.rng(Stream::Pose), cfg.polar_range_deg, det.sid_mm)?);
            let pattern = sample_patch_pattern(self.rng(Stream::Pattern), k, cfg.scale_range)?;
            patterns.push(pattern);
            latents.push(Latents::sample(self.rng(Stream::Latent), &cfg.field));
            let idx = self.rng(Stream::RealImage).random_range(0..data.len());
            real.extend(extract_patch(&data.images[idx], &pattern).into_iter().map(|v| v as Real));
        }

        // Generator forward; kept alive for the generator update.
        let mut gg = Graph::new();
        let gp = self.generator.params().bind(&mut gg);
        let settings = self.render_settings(cfg.jitter);
        let mut parts = Vec::with_capacity(b);
        for i in 0..b {
            let z = latents[i].bind(&mut gg, false)?;
            let jitter = &mut self.rngs[stream_slot(Stream::Jitter)];
            let patch = self
                .generator
                .render_patch(&mut gg, gp.vars(), &poses[i], &det, &patterns[i], z, &settings, jitter)?;
            parts.push(gg.reshape(patch, &[1, 1, k, k])?);
        }
        let fake = gg.concat(&parts, 0)?;
        let fake_values = gg.value(fake).to_vec();

        // Discriminator update.
        let mut gd = Graph::new();
        let dp = self.discriminator.params().bind(&mut gd);
        let real_v = gd.constant(&[b, 1, k, k], real)?;
        let fake_v = gd.constant(&[b, 1, k, k], fake_values)?;
        let (lr, ident) = self.head_logits(&mut gd, dp.vars(), real_v, heads)?;
        let (lf, _) = self.head_logits(&mut gd, dp.vars(), fake_v, heads)?;
        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            per_head.push(hinge_d(&mut gd, lr[h], lf[h])?);
        }
        let loss_d = total_loss(&mut gd, &per_head, cfg.lambda, heads)?;
        let loss_r = self
            .discriminator
            .recon_loss(&mut gd, dp.vars(), &self.net, real_v, ident.0, ident.1)?;
        let weighted_r = gd.scale(loss_r, cfg.recon_weight as Real)?;
        let objective_d = gd.add(loss_d, weighted_r)?;
        let (ld, lrv) = (gd.scalar(loss_d) as f32, gd.scalar(loss_r) as f32);
        if !ld.is_finite() || !lrv.is_finite() {
            return Err(self.non_finite(ld, f32::NAN, lrv));
        }
        let grads = gd.backward(objective_d)?;
        let dparams = self.discriminator.params_mut();
        dparams.zero_grads();
        dparams.accumulate(&dp, &grads)?;
        self.adam_d.step(self.discriminator.params_mut())?;
        drop(gd);

        // Generator update against the updated discriminator.
        let frozen: Vec<Var> = self
            .discriminator
            .params()
            .iter()
            .map(|(_, t)| gg.constant(t.shape(), t.data().to_vec()))
            .collect::<std::result::Result<_, _>>()?;
        let (lg, _) = self.head_logits(&mut gg, &frozen, fake, heads)?;
        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            per_head.push(hinge_g(&mut gg, lg[h])?);
        }
        let loss_g = total_loss(&mut gg, &per_head, cfg.lambda, heads)?;
        let lgv = gg.scalar(loss_g) as f32;
        if !lgv.is_finite() {
            return Err(self.non_finite(ld, lgv, lrv));
        }
        let grads = gg.backward(loss_g)?;
        let gparams = self.generator.params_mut();
        gparams.zero_grads();
        gparams.accumulate(&gp, &grads)?;
        self.adam_g.step(self.generator.params_mut())?;

        self.iteration += 1;
        Ok(LossReport {
            iteration: self.iteration,
            loss_d: ld,
            loss_g: lgv,
            loss_r: lrv,
        })
    }

    fn head_logits(&self, g: &mut Graph, p: &[Var], x: Var, heads: usize) -> Result<(Vec<Var>, (Var, Var))> {
        if heads == 1 {
            let (logit, f1, f2) = self.discriminator.discriminate(g, p, x, 0)?;
            return Ok((vec![logit], (f1, f2)));
        }
        let (logits, t) = self.discriminator.all_heads(g, p, x)?;
        Ok((logits, (t.f1, t.f2)))
    }

    fn non_finite(&self, loss_d: f32, loss_g: f32, loss_r: f32) -> Error {
        Error::NonFiniteLoss {
            iteration: self.iteration + 1,
            loss_d,
            loss_g,
            loss_r,
        }
    }

    fn tensors(&self) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        let mut add_all = |prefix: &str, params: &ParamSet, adam: &Adam| -> Result<()> {
            for (i, (name, t)) in params.iter().enumerate() {
                out.insert(name.to_string(), Tensor::new(t.shape().to_vec(), t.data().to_vec())?);
                let (m, v) = adam.moments(i);
                out.insert(format!("{prefix}/m/{name}"), Tensor::new(t.shape().to_vec(), m.to_vec())?);
                out.insert(format!("{prefix}/v/{name}"), Tensor::new(t.shape().to_vec(), v.to_vec())?);
            }
            Ok(())
        };
        add_all("adam_g", self.generator.params(), &self.adam_g)?;
        add_all("adam_d", self.discriminator.params(), &self.adam_d)?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = Meta {
            config: self.config.clone(),
            scene: self.scene,
            iteration: self.iteration,
            adam_g_steps: self.adam_g.steps(),
            adam_d_steps: self.adam_d.steps(),
            rng: STREAMS
                .iter()
                .zip(&self.rngs)
                .map(|(s, r)| StreamState::capture(*s, r))
                .collect(),
            feature_fingerprint: self.net.fingerprint(),
        };
        let text = serde_json::to_string(&meta).expect("metadata serializes");
        write_container(path, &text, &self.tensors()?)
    }

    /// Restores a checkpoint using its own configuration echo.
    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = read_meta(path)?;
        Self::restore(meta, tensors, None)
    }

    /// Restores a checkpoint into the architecture of `expected`, failing at
    /// the first tensor whose shape disagrees.
    pub fn load_expecting(path: &Path, expected: &TrainConfig) -> Result<Self> {
        let (meta, tensors) = read_meta(path)?;
        Self::restore(meta, tensors, Some(expected))
    }

    fn restore(meta: Meta, tensors: ParamSet, expected: Option<&TrainConfig>) -> Result<Self> {
        let config = expected.cloned().unwrap_or(meta.config);
        let mut state = Self::new(config, meta.scene)?;
        let pick = |params: &mut ParamSet, prefix: Option<&str>| -> Result<Vec<Vec<Real>>> {
            let mut moments = Vec::new();
            for i in 0..params.len() {
                let name = params.name(i).to_string();
                let key = match prefix {
                    Some(p) => format!("{p}/{name}"),
                    None => name.clone(),
                };
                let t = tensors.get(&key).ok_or_else(|| Error::MissingTensor(key.clone()))?;
                let want = params.at(i).shape().to_vec();
                if t.shape() != want.as_slice() {
                    return Err(Error::ArchitectureMismatch {
                        name: key,
                        expected: want,
                        found: t.shape().to_vec(),
                    });
                }
                match prefix {
                    None => params.at_mut(i).data_mut().copy_from_slice(t.data()),
                    Some(_) => moments.push(t.data().to_vec()),
                }
            }
            Ok(moments)
        };
        pick(state.generator.params_mut(), None)?;
        pick(state.discriminator.params_mut(), None)?;
        let gm = pick(state.generator.params_mut(), Some("adam_g/m"))?;
        let gv = pick(state.generator.params_mut(), Some("adam_g/v"))?;
        let dm = pick(state.discriminator.params_mut(), Some("adam_d/m"))?;
        let dv = pick(state.discriminator.params_mut(), Some("adam_d/v"))?;
        state.adam_g.restore(meta.adam_g_steps, gm, gv)?;
        state.adam_d.restore(meta.adam_d_steps, dm, dv)?;
        state.iteration = meta.iteration;
        for (slot, s) in STREAMS.iter().enumerate() {
            let saved = meta
                .rng
                .iter()
                .find(|r| r.stream == *s)
                .ok_or_else(|| Error::Format {
                    what: "checkpoint",
                    msg: format!("missing rng state for {s:?}"),
                })?;
            state.rngs[slot] = saved.restore(state.config.seed);
        }
        Ok(state)
    }
}

fn read_meta(path: &Path) -> Result<(Meta, ParamSet)> {
    let (text, tensors) = read_container(path)?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::Format {
        what: "checkpoint metadata",
        msg: e.to_string(),
    })?;
    Ok((meta, tensors))
}

/// Generator weights and geometry from a checkpoint, for rendering and
/// inversion.
pub fn load_generator(path: &Path) -> Result<(Generator, Scene, TrainConfig)> {
    let (meta, tensors) = read_meta(path)?;
    let mut params = ParamSet::new();
    for (name, t) in tensors.iter().filter(|(n, _)| n.starts_with("g/")) {
        params.insert(name.to_string(), Tensor::param(t.shape().to_vec(), t.data().to_vec())?);
    }
    let generator = Generator::from_params(meta.config.field, params)?;
    Ok((generator, meta.scene, meta.config))
}

/// Runs the remaining iterations, appending to `loss.csv` and writing
/// `checkpoint.rfck` (plus numbered snapshots) into `run_dir`.
pub fn train(
    state: &mut TrainState,
    data: &Dataset,
    run_dir: &Path,
    mut on_step: impl FnMut(&LossReport),
) -> Result<()> {
    fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    let csv_path = run_dir.join(LOSS_CSV);
    let fresh = !csv_path.exists();
    let mut csv = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&csv_path)
        .map_err(io_err(&csv_path))?;
    if fresh {
        writeln!(csv, "iter,loss_d,loss_g,loss_r").map_err(io_err(&csv_path))?;
    }
    let latest = run_dir.join(CHECKPOINT_FILE);
    if state.iteration == 0 {
        state.save(&latest)?;
    }
    while state.iteration < state.config.iterations {
        let report = state.step(data)?;
        writeln!(csv, "{}", report.csv_line()).map_err(io_err(&csv_path))?;
        on_step(&report);
        let every = state.config.checkpoint_every;
        if every > 0 && state.iteration % every == 0 {
            state.save(&snapshot_path(run_dir, state.iteration))?;
            state.save(&latest)?;
        }
    }
    csv.flush().map_err(io_err(&csv_path))?;
    state.save(&latest)
}

pub fn snapshot_path(run_dir: &Path, iteration: u64) -> PathBuf {
    run_dir.join(format!("checkpoint_{iteration:06}.rfck"))
}
