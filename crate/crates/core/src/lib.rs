//! Multi-marker segmentation with missing channels, Monte-Carlo dropout and
//! aleatoric uncertainty maps, and regression of segmentation quality from
//! uncertainty features.

pub mod crossval;
pub mod error;
pub mod features;
pub mod forest;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod quality;
pub mod rng;
pub mod segnet;
pub mod selfcheck;
pub mod synth;
pub mod table;
pub mod uncertainty;

pub use error::{Error, Result};
pub use rng::StreamKey;
