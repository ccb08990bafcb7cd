//! Linear deformable convolution with the 20-point X-shaped sampling pattern.
//!
//! Each output pixel gathers the pattern points shifted by learned continuous
//! offsets, samples them bilinearly, and mixes them with per-point weights —
//! a 1×20 reshaped convolution over the gathered values.

use super::bilinear::bilinear_sample;
use super::standard::{conv2d, ConvParams};
use crate::init::{kaiming_param, Prng};
use crate::ops::{matmul, reshape};
use crate::tensor::Tensor;
use std::rc::Rc;

/// The pattern's top-left-origin offsets are shifted by this constant so the
/// receptive field is symmetric around the output pixel. Kept integral so
/// that zero learned offsets sample exact pixel centers.
pub const LDCONV_CENTER: f64 = 4.0;

/// Ordered integer sampling offsets relative to the top-left origin.
#[derive(Debug, Clone)]
pub struct SamplingPattern {
    pub points: Vec<(i64, i64)>,
}

impl SamplingPattern {
    pub fn count(&self) -> usize {
        self.points.len()
    }
}

/// The 20-point X pattern {(i,i)} ∪ {(i,9−i)}, diagonal branch first.
pub fn xshape_pattern() -> SamplingPattern {
    let mut points: Vec<(i64, i64)> = (0..10).map(|i| (i, i)).collect();
    points.extend((0..10).map(|i| (i, 9 - i)));
    SamplingPattern { points }
}

pub struct LdconvParams {
    /// [C_out, C_in · 20] per-point mixing weights
    pub weight: Tensor,
    /// 3×3 convolution producing 2 offset channels (row, col) per point
    pub offset_conv: ConvParams,
    pub pattern: SamplingPattern,
}

impl LdconvParams {
    /// Offset predictor starts at zero, so training begins from the
    /// undeformed X pattern.
    pub fn new(rng: &mut Prng, c_in: usize, c_out: usize) -> LdconvParams {
        let pattern = xshape_pattern();
        let np = pattern.count();
        let offset_conv = ConvParams::new(rng, c_in, 2 * np, 3, 1, 1);
        offset_conv.weight.set_data(&vec![0.0; offset_conv.weight.numel()]);
        LdconvParams {
            weight: kaiming_param(rng, &[c_out, c_in * np], c_in * np),
            offset_conv,
            pattern,
        }
    }
}

/// Absolute sampling coordinates [20·H·W, 2]: pixel position + centered
/// pattern point + predicted offset.
fn ldconv_coords(offsets: &Tensor, pattern: &SamplingPattern, h: usize, w: usize) -> Tensor {
    let np = pattern.count();
    let hw = h * w;
    let od = offsets.data();
    let mut data = vec![0.0; np * hw * 2];
    for (n, &(pr, pc)) in pattern.points.iter().enumerate() {
        let (br, bc) = (pr as f64 - LDCONV_CENTER, pc as f64 - LDCONV_CENTER);
        for p in 0..hw {
            let (i, j) = (p / w, p % w);
            data[(n * hw + p) * 2] = i as f64 + br + od[2 * n * hw + p];
            data[(n * hw + p) * 2 + 1] = j as f64 + bc + od[(2 * n + 1) * hw + p];
        }
    }
    drop(od);
    let oc = offsets.clone();
    Tensor::from_op(
        "ldconv_coords",
        vec![np * hw, 2],
        data,
        vec![offsets.clone()],
        move |g, _| {
            let mut go = vec![0.0; 2 * np * hw];
            for n in 0..np {
                for p in 0..hw {
                    go[2 * n * hw + p] = g[(n * hw + p) * 2];
                    go[(2 * n + 1) * hw + p] = g[(n * hw + p) * 2 + 1];
                }
            }
            oc.accum_grad(&go);
        },
    )
}

/// Eq: Y(p0) = Σ_n w_n · X(p0 + p_n + Δp_n), same spatial size as the input.
pub fn ldconv_forward(x: &Tensor, params: &LdconvParams) -> Tensor {
    assert_eq!(x.rank(), 3, "ldconv_forward expects [C,H,W], got {:?}", x.shape());
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let np = params.pattern.count();
    let c_out = params.weight.shape()[0];
    assert_eq!(
        params.weight.shape()[1],
        c_in * np,
        "ldconv weight {:?} does not match {c_in} channels x {np} points",
        params.weight.shape()
    );
    let offsets = conv2d(x, &params.offset_conv);
    assert_eq!(
        offsets.shape()[0],
        2 * np,
        "ldconv offset predictor produced {} channels, expected {}",
        offsets.shape()[0],
        2 * np
    );
    assert_eq!(&offsets.shape()[1..], &[h, w], "ldconv offset predictor changed spatial size");
    let hw = h * w;
    let coords = ldconv_coords(&offsets, &params.pattern, h, w);
    // [C_in, 20·H·W] sampled values, re-laid-out to [C_in·20, H·W]
    let sampled = bilinear_sample(x, &coords);
    let mut idx = Vec::with_capacity(c_in * np * hw);
    for ci in 0..c_in {
        for n in 0..np {
            let base = ci * np * hw + n * hw;
            idx.extend(base..base + hw);
        }
    }
    let gathered = crate::ops::gather_fixed(&sampled, Rc::new(idx), &[c_in * np, hw]);
    reshape(&matmul(&params.weight, &gathered), &[c_out, h, w])
}
