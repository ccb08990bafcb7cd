//! Data pipeline: image I/O, preprocessing, patch extraction, augmentation,
//! sliding-window inference, FOV-masked metrics, and a synthetic-vessel
//! generator for desk-scale end-to-end runs.

pub mod dataset;
pub mod infer;
pub mod metrics;
pub mod patches;
pub mod preprocess;
pub mod synth;

pub use dataset::{load_dataset, save_flat_sample, DataError, DatasetLayout};
pub use infer::sliding_window_infer;
pub use metrics::{compute_metrics, MetricsReport};
pub use patches::{augment, extract_patches};
pub use preprocess::{clahe, green_channel, minmax_normalize, preprocess};
pub use synth::synth_vessel;

use crate::tensor::Tensor;

/// One fundus photograph with its field-of-view and vessel annotations.
/// `rgb_image` holds byte levels 0..255 as f64; masks are binary {0,1}.
pub struct FundusSample {
    /// [3, H, W] byte-valued color image.
    pub rgb_image: Tensor,
    /// [H, W] binary field-of-view mask; metrics are computed inside it only.
    pub fov_mask: Tensor,
    /// [H, W] binary vessel ground truth.
    pub vessel_mask: Tensor,
    pub source_id: String,
}

impl FundusSample {
    pub fn height(&self) -> usize {
        self.rgb_image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.rgb_image.shape()[2]
    }

    /// Checks the cross-field shape and binarity invariants.
    pub fn validate(&self) -> Result<(), DataError> {
        let (h, w) = (self.height(), self.width());
        if self.rgb_image.shape()[0] != 3 {
            return Err(DataError::Malformed(format!(
                "{}: expected 3 color channels, got {}",
                self.source_id,
                self.rgb_image.shape()[0]
            )));
        }
        for (name, mask) in [("fov_mask", &self.fov_mask), ("vessel_mask", &self.vessel_mask)] {
            if mask.shape() != [h, w] {
                return Err(DataError::Malformed(format!(
                    "{}: {name} shape {:?} does not match image {h}x{w}",
                    self.source_id,
                    mask.shape()
                )));
            }
            if !mask.data().iter().all(|&v| v == 0.0 || v == 1.0) {
                return Err(DataError::Malformed(format!(
                    "{}: {name} is not binary",
                    self.source_id
                )));
            }
        }
        Ok(())
    }
}
