//! Triplanar (2.5D) brain-tumor segmentation with an attention-gated
//! recurrent-residual U-Net, plus survival-days regression from the
//! encoder bottleneck.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense NCHW kernels with hand-written backward passes.
//! - [`network`]: recurrent conv layers, residual blocks, attention gates
//!   and the full planar U-Net.
//! - [`losses`], [`metrics`]: Dice/Focal training objectives and the
//!   volumetric evaluation metrics (DSC, HD95, sensitivity, specificity).
//! - [`data`], [`preprocess`], [`augment`], [`phantoms`]: case ingestion,
//!   intensity pipeline, slice augmentation and synthetic test cases.
//! - [`triplanar`], [`training`], [`survival`]: per-plane inference and
//!   fusion, the segmentation training loop, and the survival head.
//! - [`checkpoint`], [`config`], [`report`], [`cli`]: checkpoint files,
//!   run configuration, evaluation tables and figures, and the operator
//!   commands behind the `gliomaseg` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod phantoms;
pub mod preprocess;
pub mod report;
pub mod survival;
pub mod tensor;
pub mod training;
pub mod triplanar;

pub use error::{Error, Result};
