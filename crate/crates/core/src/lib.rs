//! Diverse-skill mixture-of-experts behavior models.
//!
//! Each expert owns an energy-based observation distribution learned jointly
//! with a diffusion action model. The crate contains the numeric substrate,
//! synthetic multi-task environments, the noise-prediction network, the
//! gating EBM, the joint trainer, baselines, and evaluation tooling.

pub mod baselines;
pub mod envs;
pub mod gating;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod numeric;
pub mod model;
pub mod par;
pub mod trainer;

pub use error::{Error, Result};
