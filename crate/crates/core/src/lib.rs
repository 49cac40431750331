//! Self-prompting crack segmentation.
//!
//! The crate is organised around the stages of the segmentation workflow:
//!
//! - [`imgproc`] – images, binary masks, elliptical erosion, connected
//!   regions and box geometry.
//! - [`prompts`] – candidate point extraction from connected regions and the
//!   random / farthest-point prompt selection rules.
//! - [`kernel`] – erosion kernel candidates, IoU score sets, training
//!   targets, Huber loss and the kernel selectors.
//! - [`cmrm`] – the mask refinement module: re-segment a crop, build the
//!   difference and intersection maps, synthesise labelled point prompts and
//!   re-decode.
//! - [`convlora`] – low-rank convolution adapters (forward, merge, gradients).
//! - [`metrics`] – focal / Dice losses, confusion-count metrics and FPS.
//! - [`backends`] – segmentation and detector interfaces, the synthetic
//!   oracle backend and a small graph runtime for exported models.
//! - [`pipeline`] – end-to-end single-image runs, dataset evaluation and
//!   benchmarking with JSON reports.

pub mod backends;
pub mod cmrm;
pub mod convlora;
mod error;
pub mod imgproc;
pub mod kernel;
pub mod metrics;
pub mod pipeline;
pub mod prompts;

pub use error::{Error, ErrorKind, Result};
