//! Voxel-based statistical shape modeling and shape completion.
//!
//! The library implements the full pipeline for completing defective binary
//! shapes (the motivating case is cranial-defect reconstruction):
//!
//! * [`volume`] — binary voxel grids, NRRD I/O, volume algebra, phantoms
//! * [`registration`] — similarity-transform estimation and warping
//! * [`ssm`] — mean shape, PCA variation modes, projection, reconstruction
//! * [`completion`] — template-subtraction and model-based completion
//! * [`postprocess`] — implant extraction from raw subtraction output
//! * [`metrics`] — DSC, boundary DSC and HD95 evaluation
//! * [`pipeline`] — reproducible end-to-end commands used by the CLI

pub mod completion;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod postprocess;
pub mod registration;
pub mod ssm;
pub mod volume;

pub use error::{Error, ErrorClass, Result};
pub use volume::{GridGeometry, VoxelGrid};
