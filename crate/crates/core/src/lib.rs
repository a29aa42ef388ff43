//! Denoising pipeline for arterial spin labeling (ASL) perfusion MRI.
//!
//! ASL difference images are extremely noisy; the usual remedy is averaging
//! many control/label repetitions, which costs scan time. This crate trains a
//! small residual convolutional network to map a low-repetition mean CBF map
//! toward a high-repetition, outlier-cleaned and smoothed reference, using a
//! gray-matter prior as an extra regularization channel.
//!
//! Everything is implemented on plain `f64` buffers with hand-derived
//! gradients; no autodiff framework is involved. Determinism is a design
//! goal: given a seed, phantom generation, training, and inference reproduce
//! bit-identical results run to run.

pub mod batchnorm;
pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nifti;
pub mod optim;
pub mod patches;
pub mod phantom;
pub mod preprocess;
pub mod rawvol;
pub mod relu;
pub mod seed;
pub mod tensor;
pub mod volume;

pub use error::{Error, FormatKind, Result};
pub use tensor::Tensor;
pub use volume::{Slice2d, Volume, VolumeMeta};
