//! DB-KAUNet: a dual-branch Kolmogorov-Arnold U-Net for retinal vessel
//! segmentation, built on a self-contained reverse-mode f64 tensor engine.
//!
//! The crate is organized as:
//! - [`tensor`] / [`ops`] / [`gradcheck`]: the differentiation engine,
//! - [`kan`]: B-spline KAN layers, the KANConv block, group-rational layers,
//! - [`conv`]: standard / depthwise / transposed convolution and the
//!   X-pattern linear deformable convolution,
//! - [`fusion`]: SAM, PAM, cross-branch channel interaction, SFE / SFE-GAF,
//! - [`network`]: the five-level dual-branch encoder, interleaved decoders,
//!   loss, optimizer and checkpointing,
//! - [`data`]: preprocessing, patching, sliding-window inference, metrics,
//!   and a synthetic vessel generator,
//! - [`cli`]: the command-line entry points.

pub mod cli;
pub mod conv;
pub mod data;
pub mod fusion;
pub mod gradcheck;
pub mod init;
pub mod kan;
pub mod network;
pub mod ops;
pub mod tensor;

pub use tensor::{NoGradGuard, Tensor};
