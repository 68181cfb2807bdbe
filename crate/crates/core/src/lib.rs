//! Multi-teacher knowledge distillation into a small vision transformer
//! with a mixture of LoRA experts.

pub mod ablation;
pub mod adapters;
pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod export;
pub mod gradsuite;
pub mod kd;
pub mod model;
pub mod mole;
pub mod numerics;
pub mod optim;
pub mod params;
pub mod train;
pub mod verify;
pub mod vit;

pub use error::{ConfigError, Error, Result};
