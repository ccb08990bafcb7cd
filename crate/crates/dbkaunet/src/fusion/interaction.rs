//! Cross-Branch Channel Interaction (CCI) and the SFE / SFE-GAF skip fusers.

use super::attention::{pam_forward, sam_forward, PamParams, SamParams};
use crate::conv::{conv2d, ldconv_forward, ConvParams, LdconvParams};
use crate::init::Prng;
use crate::ops::{
    add, adaptive_avg_pool_to_1, matmul, reshape, sigmoid, softmax_along, transpose2d,
};
use crate::tensor::Tensor;

/// Per-branch SAM parameters; the branches do not share weights because CNN
/// and transformer feature statistics differ.
pub struct CciParams {
    pub sam_l: SamParams,
    pub sam_g: SamParams,
}

impl CciParams {
    pub fn new(rng: &mut Prng, c_c: usize, c_t: usize) -> CciParams {
        CciParams {
            sam_l: SamParams::new(rng, c_c),
            sam_g: SamParams::new(rng, c_t),
        }
    }
}

/// Bidirectional channel interaction:
/// attention vectors from each branch form the correlation matrix
/// R = L_attn ⊗ G_attnᵀ; each branch receives the other's channels mixed by
/// the softmax-normalized correlation (1-mode product) as an additive
/// residual. Returns (L_fuse, G_fuse).
pub fn cci_forward(l: &Tensor, g: &Tensor, p: &CciParams) -> (Tensor, Tensor) {
    assert_eq!(l.rank(), 3, "cci_forward L must be [C,H,W], got {:?}", l.shape());
    assert_eq!(g.rank(), 3, "cci_forward G must be [C,H,W], got {:?}", g.shape());
    assert_eq!(
        &l.shape()[1..],
        &g.shape()[1..],
        "cci_forward: spatial dims differ: {:?} vs {:?}",
        l.shape(),
        g.shape()
    );
    let (c_c, h, w) = (l.shape()[0], l.shape()[1], l.shape()[2]);
    let c_t = g.shape()[0];
    let hw = h * w;
    let l_attn = sigmoid(&reshape(&adaptive_avg_pool_to_1(&sam_forward(l, &p.sam_l)), &[c_c, 1]));
    let g_attn = sigmoid(&reshape(&adaptive_avg_pool_to_1(&sam_forward(g, &p.sam_g)), &[c_t, 1]));
    let r = matmul(&l_attn, &transpose2d(&g_attn)); // [C_c, C_t]
    // L→G: normalize over C_c (columns of R), contract against L's channels
    let l2g = matmul(&transpose2d(&softmax_along(&r, 0)), &reshape(l, &[c_c, hw]));
    // G→L: normalize over C_t (softmax of Rᵀ along its leading axis equals
    // row-softmax of R), contract against G's channels
    let g2l = matmul(&softmax_along(&r, 1), &reshape(g, &[c_t, hw]));
    let l_fuse = add(l, &reshape(&g2l, &[c_c, h, w]));
    let g_fuse = add(g, &reshape(&l2g, &[c_t, h, w]));
    (l_fuse, g_fuse)
}

/// SFE: X_skip = Conv5×5(PAM(L_fuse)) + Conv5×5(PAM(G_fuse)).
pub struct SfeParams {
    pub pam_l: PamParams,
    pub pam_g: PamParams,
    pub conv_l: ConvParams,
    pub conv_g: ConvParams,
}

impl SfeParams {
    pub fn new(rng: &mut Prng, c_c: usize, c_t: usize, c_skip: usize) -> SfeParams {
        SfeParams {
            pam_l: PamParams::new(rng, c_c),
            pam_g: PamParams::new(rng, c_t),
            conv_l: ConvParams::new(rng, c_c, c_skip, 5, 1, 2),
            conv_g: ConvParams::new(rng, c_t, c_skip, 5, 1, 2),
        }
    }
}

pub fn sfe_forward(l_fuse: &Tensor, g_fuse: &Tensor, p: &SfeParams) -> Tensor {
    assert_eq!(
        p.conv_l.weight.shape()[0],
        p.conv_g.weight.shape()[0],
        "sfe_forward: channel contract violated, branch convolutions map to {} vs {} channels",
        p.conv_l.weight.shape()[0],
        p.conv_g.weight.shape()[0]
    );
    add(
        &conv2d(&pam_forward(l_fuse, &p.pam_l), &p.conv_l),
        &conv2d(&pam_forward(g_fuse, &p.pam_g), &p.conv_g),
    )
}

/// SFE-GAF: identical dataflow with the fixed 5×5 convolutions replaced by
/// linear deformable convolutions.
pub struct SfeGafParams {
    pub pam_l: PamParams,
    pub pam_g: PamParams,
    pub ld_l: LdconvParams,
    pub ld_g: LdconvParams,
}

impl SfeGafParams {
    pub fn new(rng: &mut Prng, c_c: usize, c_t: usize, c_skip: usize) -> SfeGafParams {
        SfeGafParams {
            pam_l: PamParams::new(rng, c_c),
            pam_g: PamParams::new(rng, c_t),
            ld_l: LdconvParams::new(rng, c_c, c_skip),
            ld_g: LdconvParams::new(rng, c_t, c_skip),
        }
    }
}

pub fn sfe_gaf_forward(l_fuse: &Tensor, g_fuse: &Tensor, p: &SfeGafParams) -> Tensor {
    assert_eq!(
        p.ld_l.weight.shape()[0],
        p.ld_g.weight.shape()[0],
        "sfe_gaf_forward: channel contract violated, branch convolutions map to {} vs {} channels",
        p.ld_l.weight.shape()[0],
        p.ld_g.weight.shape()[0]
    );
    add(
        &ldconv_forward(&pam_forward(l_fuse, &p.pam_l), &p.ld_l),
        &ldconv_forward(&pam_forward(g_fuse, &p.pam_g), &p.ld_g),
    )
}
