//! Cell counting for fluorescence microscopy: residual U-Net segmentation, connected-component
//! counting, three-tier evaluation, Grad-CAM, energy accounting, run tracking and serving.

pub mod cli;
pub mod dataset;
pub mod drift;
pub mod energy;
pub mod error;
pub mod explain;
pub mod fsutil;
pub mod hashing;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod postproc;
pub mod runstore;
pub mod service;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
