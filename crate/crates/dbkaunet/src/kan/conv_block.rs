//! The KANConv block: Y = GELU(H(X) + D(X)) with
//! H = BN ∘ DwConv ∘ Φ ∘ DwConv ∘ Φ, where Φ is a pixelwise channel-mixing
//! KANLinear. The block doubles channels and halves both spatial dimensions.

use super::linear::{kan_linear_forward, KanLinearLayer};
use super::spline::SplineGrid;
use crate::conv::{conv2d, depthwise_conv2d, ConvParams};
use crate::init::{const_param, zeros_param, Prng};
use crate::ops::{add, avg_pool2x2, batchnorm, gelu, reshape, transpose2d, BnState};
use crate::tensor::Tensor;
use std::rc::Rc;

pub struct KanConvBlockParams {
    /// Φ₁: C → 2C channel mixing
    pub phi1: KanLinearLayer,
    /// first depthwise 3×3, stride 2 (the spatial halving)
    pub dw1: ConvParams,
    /// Φ₂: 2C → 2C channel mixing
    pub phi2: KanLinearLayer,
    /// second depthwise 3×3, stride 1
    pub dw2: ConvParams,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub bn: BnState,
    /// shortcut 1×1 channel-doubling projection (after average pooling)
    pub proj: ConvParams,
}

impl KanConvBlockParams {
    pub fn new(rng: &mut Prng, c: usize, grid: Rc<SplineGrid>) -> KanConvBlockParams {
        KanConvBlockParams {
            phi1: KanLinearLayer::new(c, 2 * c, grid.clone(), rng),
            dw1: ConvParams::depthwise(rng, 2 * c, 3, 2, 1),
            phi2: KanLinearLayer::new(2 * c, 2 * c, grid, rng),
            dw2: ConvParams::depthwise(rng, 2 * c, 3, 1, 1),
            bn_gamma: const_param(&[2 * c], 1.0),
            bn_beta: zeros_param(&[2 * c]),
            bn: BnState::new(2 * c),
            proj: ConvParams::new(rng, c, 2 * c, 1, 1, 0),
        }
    }
}

/// Applies a KANLinear across the channel axis independently at every pixel.
pub fn kan_channel_mix(x: &Tensor, layer: &KanLinearLayer) -> Tensor {
    assert_eq!(x.rank(), 3, "kan_channel_mix expects [C,H,W], got {:?}", x.shape());
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let rows = transpose2d(&reshape(x, &[c, h * w])); // [H·W, C]
    let mixed = kan_linear_forward(&rows, layer); // [H·W, C']
    reshape(&transpose2d(&mixed), &[layer.n_out, h, w])
}

pub fn kanconv_block_forward(x: &Tensor, p: &KanConvBlockParams, train: bool) -> Tensor {
    assert_eq!(x.rank(), 3, "kanconv_block_forward expects [C,H,W], got {:?}", x.shape());
    let (h, w) = (x.shape()[1], x.shape()[2]);
    assert!(
        h % 2 == 0 && w % 2 == 0,
        "kanconv_block_forward: spatial dims must be even, got {h}x{w}"
    );
    let main = kan_channel_mix(x, &p.phi1);
    let main = depthwise_conv2d(&main, &p.dw1);
    let main = kan_channel_mix(&main, &p.phi2);
    let main = depthwise_conv2d(&main, &p.dw2);
    let main = batchnorm(&main, &p.bn_gamma, &p.bn_beta, &p.bn, train);
    let short = conv2d(&avg_pool2x2(x), &p.proj);
    gelu(&add(&main, &short))
}
