//! Few-shot segmentation of single-object microscopy images.
//!
//! A trainee U-net learns the image-to-mask task from a handful of labels,
//! mentored by two helper networks: a referee trained purely on synthetic
//! corrupted/clean mask pairs, which corrects imperfect masks, and a reverse
//! network that maps masks back to input images. Consistency and
//! reconstruction losses let the trio exploit unlabeled images, with
//! curriculum learning and early stopping driving the final phase.
//!
//! The crate is organised around the training protocol:
//!
//! * [`autodiff`] - reverse-mode tensors, the ops needed by the networks, and
//!   the RMSprop optimizer;
//! * [`unet`] - the shared encoder-decoder architecture and its checkpoints;
//! * [`synthmask`] - synthetic ellipse masks and their corruptions;
//! * [`data`] - dataset splits, background suppression and a synthetic
//!   capsule benchmark;
//! * [`augment`] - the rotation/flip/noise augmentation generator;
//! * [`training`] - the four training phases, curriculum schedule and early
//!   stopping;
//! * [`evaluation`] - Jaccard metrics, multi-seed evaluation and baselines;
//! * [`pipeline`] / [`config`] - file-driven orchestration used by the CLI.
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod augment;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod img;
pub mod pipeline;
pub mod seed;
pub mod synthmask;
pub mod training;
pub mod unet;

pub use error::{Error, Result};
pub use img::Image;
