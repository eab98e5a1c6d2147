//! 3D fusion-transformer segmentation of brain tumor volumes.
//!
//! A multimodal `C×H×W×D` block is cut into cubic patches and embedded as
//! tokens ([`sequentializer`]), passed through fusion-head attention layers
//! ([`encoder`]) and decoded back to per-voxel class logits by a
//! convolutional decoder with deformable fusion attention ([`decoder`]).
//! [`train`] ties it together with Adam, checkpoints and evaluation;
//! [`phantom`] supplies synthetic volumes with known tumor geometry.

pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
mod error;
pub mod loss;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod phantom;
pub mod sequentializer;
pub mod train;
pub mod volume_io;

pub use config::{AttentionMode, CascadeMode, ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use metrics::{LabelVolume, MetricReport};
pub use model::Brainformer;
pub use sequentializer::VolumeBlock;
