//! Kolmogorov-Arnold layers: B-spline edge activations, group-rational
//! (safe Pade) activations, and the KAN convolution block.

pub mod conv_block;
pub mod linear;
pub mod rational;
pub mod spline;

pub use conv_block::{kan_channel_mix, kanconv_block_forward, KanConvBlockParams};
pub use linear::{kan_compose, kan_linear_forward, KanLinearLayer};
pub use rational::{grkan_forward, RationalGroupParams};
pub use spline::SplineGrid;
