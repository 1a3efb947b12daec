//! Generative radiance fields for X-ray projection synthesis.
//!
//! The pipeline: procedural attenuation volumes ([`volume`]) are projected
//! into radiographs ([`projector`]); a conditional radiance field
//! ([`field`]) is trained adversarially against them ([`trainer`]) with a
//! self-supervised multi-head discriminator ([`discriminator`]); a trained
//! model can then be fitted to a single radiograph ([`inversion`]) and
//! rendered from any azimuth.

pub mod checkpoint;
pub mod dataset;
pub mod discriminator;
pub mod encoding;
pub mod error;
pub mod features;
pub mod field;
pub mod geometry;
pub mod image;
pub mod inversion;
pub mod losses;
pub mod metrics;
pub mod projector;
pub mod rng;
pub mod sampler;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use radfield_autodiff as autodiff;
