//! Run configuration files.
//!
//! A config file is TOML. Anything it leaves out takes the desk-scale
//! default, and keys that are not part of [`RunConfig`] are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use radfield::geometry::DetectorConfig;
use radfield::inversion::InversionConfig;
use radfield::projector::DEFAULT_POLAR_DEG;
use radfield::trainer::TrainConfig;

use crate::fail::Failure;

pub const ECHO_FILE: &str = "config.toml";
pub const SEED_FILE: &str = "seed.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives every random stream of the run; overrides `train.seed`.
    pub seed: u64,
    pub paths: Paths,
    pub phantom: PhantomConfig,
    pub detector: DetectorConfig,
    pub project: ProjectConfig,
    pub train: TrainConfig,
    pub render: RenderConfig,
    pub inversion: InversionConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset directory used by `train` when `--data` is absent.
    pub data: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub dims: usize,
    pub extent_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectConfig {
    pub views: usize,
    pub step_deg: f64,
    pub polar_deg: f64,
    /// Ray-march step; half the smallest voxel when absent.
    pub step_mm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub resolution: usize,
    pub azimuths_deg: Vec<f64>,
    pub polar_deg: f64,
    pub chunk: usize,
    /// Views in the rotation written by `invert`.
    pub rotation_views: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub kid_subset_size: usize,
    pub kid_subsets: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            phantom: PhantomConfig::default(),
            detector: DetectorConfig::desk(),
            project: ProjectConfig::default(),
            train: TrainConfig::desk(),
            render: RenderConfig::default(),
            inversion: InversionConfig::desk(),
            eval: EvalConfig::default(),
        }
    }
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: 64,
            extent_mm: 128.0,
        }
    }
}

impl Default for ProjectConfig {
    fn default() -> Self {
        Self {
            views: 72,
            step_deg: 5.0,
            polar_deg: DEFAULT_POLAR_DEG,
            step_mm: None,
        }
    }
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            azimuths_deg: (0..8).map(|i| i as f64 * 45.0).collect(),
            polar_deg: DEFAULT_POLAR_DEG,
            chunk: 1024,
            rotation_views: 72,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            kid_subset_size: 50,
            kid_subsets: 20,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
        Self::parse(&text).map_err(|msg| Failure::config(format!("{}: {msg}", path.display())))
    }

    /// Parses `text` layered over the defaults, so a partial table keeps
    /// the desk values for the keys it omits.
    pub fn parse(text: &str) -> Result<Self, String> {
        let user: toml::Table = toml::from_str(text).map_err(|e| e.message().to_string())?;
        let mut base = toml::Table::try_from(Self::default()).map_err(|e| e.to_string())?;
        merge(&mut base, user);
        let cfg: Self = base.try_into().map_err(|e: toml::de::Error| e.message().to_string())?;
        Ok(cfg.resolved())
    }

    fn resolved(mut self) -> Self {
        self.train.seed = self.seed;
        self
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.resolved()
    }

    pub fn to_toml(&self) -> Result<String, Failure> {
        toml::to_string(self).map_err(|e| Failure::config(format!("cannot echo config: {e}")))
    }

    /// Writes the effective config and the seed into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<(), Failure> {
        std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
        let cfg = dir.join(ECHO_FILE);
        std::fs::write(&cfg, self.to_toml()?).map_err(|e| Failure::io(&cfg, e))?;
        let seed = dir.join(SEED_FILE);
        std::fs::write(&seed, format!("{}\n", self.seed)).map_err(|e| Failure::io(&seed, e))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
