//! Retinal vessel segmentation under noisy labels.
//!
//! The crate covers the whole experimental pipeline:
//!
//! * [`dataset`] reads DRIVE / CHASE_DB1 and persists intermediate maps;
//! * [`forge`] synthesizes incomplete labels by erasing thin vessel segments;
//! * [`augment`] samples training patches and pads images to the network grid;
//! * [`nn`] holds the two-stage enhancement + segmentation network;
//! * [`sgl`] trains K fold members, pseudo-labels held-out folds and trains
//!   the final model on the joint loss;
//! * [`eval`] runs full-image inference and computes the metric suite;
//! * [`report`] drives the (ratio, K) experiment grid and renders tables,
//!   curves and image panels.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod forge;
pub mod imageio;
pub mod nn;
pub mod raster;
pub mod report;
pub mod sgl;
pub mod synth;

pub use error::{Error, Result};
