//! Joint segmentation and tracking of bacteria in mother-machine
//! microchannels from a distance map and a Y-displacement map.
//!
//! The crate covers the post-processing side of the method: exact
//! distance maps and tracking targets from annotations, restricted
//! watershed segmentation, displacement-based frame linking, the lineage
//! evaluation protocol, a synthetic sequence generator used as a
//! perfect-prediction oracle, augmentation transforms, and a small
//! self-attention kernel with analytic gradients.

pub mod attention;
pub mod augmentation;
pub mod bench;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod segmenter;
pub mod simulator;
pub mod tensor_io;
pub mod tracker;
pub mod truth_maps;

pub use error::{Error, Result};
