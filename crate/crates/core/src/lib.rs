//! Topology-aware multi-label diagnosis and prompt-conditioned report
//! generation on synthetic chest-finding data.

pub mod config;
pub mod datagen;
pub mod decoder;
pub mod dualcls;
mod error;
pub mod evalkit;
pub mod evaluate;
pub mod experiments;
pub mod fusion;
pub mod graphtopo;
pub mod layers;
pub mod model;
pub mod nodes;
pub mod tki;
pub mod train;
pub mod vision;

pub use error::{CoreError, Result};
