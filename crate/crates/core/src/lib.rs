//! Image denoising by learned matching of recurring patterns.
//!
//! A small Siamese network predicts, for every pair of noisy patches in a
//! search window, 30 matching scores (one per wavelet/color sub-band). The
//! scores weight an average of matched sub-band coefficients, giving an
//! initial estimate that a residual dilated-convolution network refines.

pub mod aggregate;
pub mod error;
pub mod imgio;
pub mod harness;
pub mod matcher;
pub mod nncore;
pub mod refine;
pub mod transform;

pub use error::{Error, Result};
