//! Sim-to-real video translation conditioned on a compressed, spatially
//! aligned feature stream from a frozen vision encoder.

pub mod aligner;
pub mod checkpoint;
pub mod config;
pub mod control;
pub mod dataset;
pub mod dit;
pub mod error;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pca;
pub mod pipeline;
pub mod scene;
pub mod train;
pub mod vfm;
pub mod video;

pub use error::{Error, Result};
pub use video::{FeatureGrid, VideoClip};
