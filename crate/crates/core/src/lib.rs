//! Extreme-point guided interactive 3D tumour segmentation.
//!
//! Pipeline: six boundary clicks → region of interest → exponentialized
//! geodesic distance map → small 3D U-Net ensemble with flip TTA →
//! post-processing → agreement statistics.

pub mod engine;
pub mod error;
pub mod filter;
pub mod inference;
pub mod interactions;
pub mod morphology;
pub mod nn;
pub mod par;
pub mod phantom;
pub mod planner;
pub mod postproc;
pub mod preprocess;
pub mod stats;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Geometry, Mask3D, Modality, Volume3D};
