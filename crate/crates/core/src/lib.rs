//! GLOD: a windowed-attention encoder, an UpConvMixer neck with optional
//! fusion blocks, and a keypoint head producing class heatmaps, centre
//! offsets and box sizes.

pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod params;
pub mod targets;
pub mod train;

pub use error::{GlodError, Result};
pub use net::{Glod, GlodConfig, HeadOutput};
pub use params::ParamStore;
