//! Reinforced self-evolving pseudo-labeling for semi-supervised referring
//! segmentation, on a synthetic world small enough to train on one core.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod probmaps;
pub mod rple;
pub mod segnet;
pub mod sesm;
pub mod simworld;
pub mod spm;
pub mod tensorcore;
pub mod trainer;

pub use error::{Error, Result};
