//! Spatial convolution operators: standard / depthwise / transposed
//! convolution and the X-pattern linear deformable convolution.

pub mod bilinear;
pub mod ldconv;
pub mod standard;

pub use bilinear::bilinear_sample;
pub use ldconv::{ldconv_forward, xshape_pattern, LdconvParams, SamplingPattern, LDCONV_CENTER};
pub use standard::{conv2d, depthwise_conv2d, transposed_conv2d, ConvParams};
