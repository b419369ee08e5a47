//! NeighCNN despeckling toolkit.
//!
//! End-to-end pipeline for reducing multiplicative speckle in intensity
//! images with a residual convolutional network:
//!
//! * [`tensor`] — dense tensors with reverse-mode autodiff and a
//!   finite-difference gradient oracle;
//! * [`speckle`] — gamma-distributed multiplicative noise, synthetic
//!   dataset generation and patch extraction;
//! * [`network`] — the residual denoiser and the frozen feature extractor
//!   behind the perceptual loss;
//! * [`losses`] — the three-part training loss (pixel, perceptual,
//!   neighbourhood smoothness) with per-component ablation switches;
//! * [`metrics`] — PSNR / SSIM / UQI and per-look evaluation reports;
//! * [`trainer`] — Adam training loop with early stopping, plus the
//!   ablation and depth-sweep harnesses;
//! * [`checkpoint`] — the binary model container used by the CLI.

pub mod checkpoint;
pub mod error;
pub mod gradsuite;
pub mod image_io;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod speckle;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
