//! Many-to-one adversarial harmonization of 3D volumetric images.
//!
//! One forward generator maps every source site into a common reference
//! intensity space; per-site backward generators and discriminators keep
//! the mapping bijective and the reference distribution honest. The
//! crate also ships the classical histogram baselines, a synthetic
//! multi-site phantom cohort for end-to-end validation, and the
//! statistics used to judge harmonization quality.

pub mod config;
pub mod error;
pub mod manifest;
pub mod networks;
pub mod phantom;
pub mod sampler;
pub mod stats;
pub mod tensor;
pub mod baselines;
pub mod eval;
pub mod trainer;
pub mod volume;

pub use error::{IguaneError, Result};
