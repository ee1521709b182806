//! Semi-supervised segmentation of a thin tubular structure from paired T1
//! and FA volumes.
//!
//! Each sequence is split into sparse unique codes and a shared residual by an
//! unrolled convolutional sparse coder ([`cfd`]); a correlation loss pushes the
//! residuals together and the codes apart. A two-stream U-Net with T1-driven
//! attention ([`segnet`]) segments from the codes. Unlabeled slices enter
//! through a mean teacher whose consistency loss is gated per sample by how
//! much student and teacher disagree under input noise ([`ssl`]).
//!
//! [`trainer`] ties it together: training, checkpoints, evaluation and
//! ablations. [`metrics`] holds DSC/HD95/ASD and the paired t-test, and
//! [`data`] the NIfTI I/O, slicing and the synthetic phantom.

pub mod autograd;
pub mod cfd;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod segnet;
pub mod ssl;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(test)]
mod testutil;
