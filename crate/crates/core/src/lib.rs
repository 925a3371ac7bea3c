//! Unsupervised defect detection for tape-laid composite depth maps.
//!
//! The pipeline runs in stages, each in its own module:
//!
//! 1. [`depth`]: 3×3 median denoising and min-max normalization.
//! 2. [`tows`]: Sobel edges, axis-aligned Hough lines and tow centerlines.
//! 3. [`sampler`]: strided 32×32 windows along each centerline.
//! 4. [`nnet`]: a small convolutional autoencoder trained with Adam.
//! 5. [`anomaly`]: windowed reconstruction error, ROC threshold selection
//!    and classification metrics.
//! 6. [`localize`]: per-tow 1D scale-space blob detection and bounding boxes.
//!
//! [`synth`] generates depth maps with known tow geometry and injected
//! defects, and [`render`] writes PPM overlays.

pub mod anomaly;
pub mod depth;
pub mod localize;
pub mod nnet;
pub mod render;
pub mod sampler;
pub mod synth;
pub mod tows;

pub use depth::{DepthMap, DepthState};
pub use localize::DefectBox;
pub use sampler::{SampleLabel, SampleSet, WindowSample};
pub use tows::TowLayout;
