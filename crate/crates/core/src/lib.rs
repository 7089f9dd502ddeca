//! Dementia-screening speech classification from whole-utterance MFCC maps.
//!
//! The pipeline has four stages, one module each:
//!
//! - [`dsp`] turns a WAV recording into a `(64, t)` MFCC feature map, where `t`
//!   grows with the duration of the recording.
//! - [`nncore`] is a small reverse-mode tensor library with the layers the
//!   network needs and the RMSProp optimizer.
//! - [`model`] assembles the fully convolutional classifier: the feature map is
//!   replicated into three channels, run through a MobileNet-style backbone,
//!   pooled over frequency, projected to two classes per time step by a 1-D
//!   convolution and pooled over time. Any `t >= 32` is accepted.
//! - [`trainer`] covers two-fold training, epoch selection, ensembling of the
//!   resulting models and the evaluation metrics.
//! - [`viz`] thresholds the per-time-step class evidence with Otsu's method and
//!   renders it as a bar under the feature map.
//!
//! [`synth`] generates a self-contained corpus of synthetic recordings used by
//! the acceptance tests and the `synth` CLI subcommand.

pub mod dsp;
pub mod error;
pub mod model;
pub mod nncore;
pub mod synth;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};

/// Class index of the control (non-AD) class.
pub const NON_AD: usize = 0;
/// Class index of the AD class, the "positive" class for confusion counts.
pub const AD: usize = 1;
