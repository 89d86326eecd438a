//! Weekly sea-ice concentration forecasting with an ensemble of small CNNs
//! and a climatology baseline.
//!
//! The crate covers the whole pipeline: field I/O and regridding, lagged
//! training pairs, a from-scratch convolution engine, MAE/SSIM objectives,
//! per-pixel and convolutional stacking, and ice-edge verification.

pub mod bundle;
pub mod climatology;
pub mod conv;
pub mod edge;
pub mod ensemble;
pub mod error;
pub mod forecaster;
pub mod grid;
pub mod metrics;
pub mod optim;
pub mod protocol;
pub mod regrid;
pub mod sif;
pub mod synth;
pub mod tensor;
pub mod windowing;

pub use error::{Error, Result};
