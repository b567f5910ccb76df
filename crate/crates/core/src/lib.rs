//! Frame-level anomaly detection with a deep residual convolutional autoencoder.
//!
//! The pipeline is unsupervised: a symmetric encoder/decoder network is trained
//! to reconstruct *normal* frames only, each frame is scored by the root mean
//! squared error between frame and reconstruction (expressed on the 8-bit pixel
//! scale), and a detection band is calibrated from the percentiles of the
//! normal-frame error distribution. At inference a frame is flagged when its
//! error leaves the band: unusually *high* error means content the model cannot
//! reconstruct, while unusually *low* error signals washed-out, low-detail
//! frames (e.g. dense smoke) that reconstruct better than real scenes do.
//!
//! Crate layout:
//!
//! * [`tensor`] — dense tensors, the fixed kernel set (conv / batch-norm / ReLU /
//!   nearest-neighbour upsample / add / MSE) with reverse-mode gradients, the
//!   Adam/SGD optimizers, and a finite-difference gradient checker.
//! * [`model`] — the residual autoencoder itself plus checkpoint persistence.
//! * [`trainer`] — mini-batch training loop with best-epoch selection.
//! * [`detector`] — frame scoring, percentile band calibration, classification.
//! * [`corpus`] — deterministic synthetic corpus generator and frame ingestion.
//! * [`eval`] — confusion matrix and recall/precision/F1 reporting.
//!
//! All randomness funnels through [`rng::RngState`]; identical seeds give
//! identical artifacts. Heavy kernels are data-parallel via rayon when the
//! `parallel` feature (default) is enabled; disabling it — or calling
//! [`exec::set_parallel`]`(false)` — selects a sequential path that produces
//! bit-identical results.

pub mod corpus;
pub mod detector;
pub mod error;
pub mod eval;
pub mod exec;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::RngState;
