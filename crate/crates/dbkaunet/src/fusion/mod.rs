//! Branch-interaction machinery: SAM, PAM, cross-branch channel interaction,
//! and the SFE / SFE-GAF skip-connection fusers.

pub mod attention;
pub mod interaction;

pub use attention::{pam_attention, pam_forward, sam_forward, PamParams, SamParams};
pub use interaction::{
    cci_forward, sfe_forward, sfe_gaf_forward, CciParams, SfeGafParams, SfeParams,
};
