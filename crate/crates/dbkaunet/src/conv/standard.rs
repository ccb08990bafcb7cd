//! Standard, depthwise and transposed 2-D convolution (cross-correlation
//! convention) over CHW tensors, implemented with im2col + GEMM.

use crate::init::{kaiming_param, zeros_param, Prng};
use crate::ops::{gemm, gemm_nt, gemm_tn};
use crate::tensor::Tensor;

/// Convolution parameters. For [`conv2d`] the weight is
/// `[C_out, C_in/groups, kH, kW]`; [`transposed_conv2d`] interprets it as
/// `[C_in, C_out, kH, kW]`.
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvParams {
    pub fn new(
        rng: &mut Prng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> ConvParams {
        ConvParams::grouped(rng, c_in, c_out, k, stride, padding, 1)
    }

    pub fn grouped(
        rng: &mut Prng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> ConvParams {
        assert!(c_in % groups == 0 && c_out % groups == 0, "conv: channels not divisible by groups");
        let fan_in = c_in / groups * k * k;
        ConvParams {
            weight: kaiming_param(rng, &[c_out, c_in / groups, k, k], fan_in),
            bias: Some(zeros_param(&[c_out])),
            stride,
            padding,
            groups,
        }
    }

    /// Depthwise: groups == C_in == C_out, one kernel per channel.
    pub fn depthwise(rng: &mut Prng, c: usize, k: usize, stride: usize, padding: usize) -> ConvParams {
        ConvParams::grouped(rng, c, c, k, stride, padding, c)
    }

    /// Weight laid out `[C_in, C_out, kH, kW]` for [`transposed_conv2d`].
    pub fn transposed(
        rng: &mut Prng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> ConvParams {
        ConvParams {
            weight: kaiming_param(rng, &[c_in, c_out, k, k], c_in * k * k),
            bias: Some(zeros_param(&[c_out])),
            stride,
            padding,
            groups: 1,
        }
    }

    pub fn no_bias(mut self) -> ConvParams {
        self.bias = None;
        self
    }
}

/// col[(c·kH+ki)·kW+kj, gi·gw+gj] = img[c, gi·stride+ki−pad, gj·stride+kj−pad]
/// (zero where the index leaves the image).
#[allow(clippy::too_many_arguments)]
fn im2col(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gh: usize,
    gw: usize,
) -> Vec<f64> {
    let ncols = gh * gw;
    let mut col = vec![0.0; c * kh * kw * ncols];
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let base = ((ci * kh + ki) * kw + kj) * ncols;
                for gi in 0..gh {
                    let ih = gi * stride + ki;
                    if ih < pad || ih >= h + pad {
                        continue;
                    }
                    let ih = ih - pad;
                    for gj in 0..gw {
                        let iw = gj * stride + kj;
                        if iw < pad || iw >= w + pad {
                            continue;
                        }
                        col[base + gi * gw + gj] = img[(ci * h + ih) * w + iw - pad];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds the column matrix back into an image.
#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gh: usize,
    gw: usize,
    img: &mut [f64],
) {
    let ncols = gh * gw;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let base = ((ci * kh + ki) * kw + kj) * ncols;
                for gi in 0..gh {
                    let ih = gi * stride + ki;
                    if ih < pad || ih >= h + pad {
                        continue;
                    }
                    let ih = ih - pad;
                    for gj in 0..gw {
                        let iw = gj * stride + kj;
                        if iw < pad || iw >= w + pad {
                            continue;
                        }
                        img[(ci * h + ih) * w + iw - pad] += col[base + gi * gw + gj];
                    }
                }
            }
        }
    }
}

/// 2-D convolution of a CHW tensor; H' = ⌊(H + 2·pad − kH)/stride⌋ + 1.
pub fn conv2d(x: &Tensor, p: &ConvParams) -> Tensor {
    assert_eq!(x.rank(), 3, "conv2d expects [C,H,W], got {:?}", x.shape());
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ws = p.weight.shape().to_vec();
    assert_eq!(ws.len(), 4, "conv2d weight must be rank 4, got {:?}", ws);
    let (c_out, cpg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (g, s, pad) = (p.groups, p.stride, p.padding);
    assert!(s >= 1, "conv2d: stride must be at least 1");
    assert!(
        c_in == cpg * g && c_out % g == 0,
        "conv2d: {c_in} input channels incompatible with weight {ws:?} and {g} groups"
    );
    assert!(
        h + 2 * pad >= kh && w + 2 * pad >= kw,
        "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
        h + 2 * pad,
        w + 2 * pad
    );
    let oh = (h + 2 * pad - kh) / s + 1;
    let ow = (w + 2 * pad - kw) / s + 1;
    let ncols = oh * ow;
    let opg = c_out / g;
    let krows = cpg * kh * kw;

    let col = im2col(&x.data(), c_in, h, w, kh, kw, s, pad, oh, ow);
    let wd = p.weight.data();
    let mut out = vec![0.0; c_out * ncols];
    for gi in 0..g {
        gemm(
            opg,
            krows,
            ncols,
            &wd[gi * opg * krows..(gi + 1) * opg * krows],
            &col[gi * krows * ncols..(gi + 1) * krows * ncols],
            &mut out[gi * opg * ncols..(gi + 1) * opg * ncols],
        );
    }
    drop(wd);
    if let Some(b) = &p.bias {
        assert_eq!(b.shape(), &[c_out], "conv2d bias shape {:?}", b.shape());
        let bd = b.data();
        for co in 0..c_out {
            for v in &mut out[co * ncols..(co + 1) * ncols] {
                *v += bd[co];
            }
        }
    }

    let mut parents = vec![x.clone(), p.weight.clone()];
    if let Some(b) = &p.bias {
        parents.push(b.clone());
    }
    let (xc, wc, bc) = (x.clone(), p.weight.clone(), p.bias.clone());
    Tensor::from_op("conv2d", vec![c_out, oh, ow], out, parents, move |gout, _| {
        if let Some(b) = &bc {
            if b.needs_grad() {
                let mut gb = vec![0.0; c_out];
                for co in 0..c_out {
                    gb[co] = gout[co * ncols..(co + 1) * ncols].iter().sum();
                }
                b.accum_grad(&gb);
            }
        }
        let need_x = xc.needs_grad();
        let need_w = wc.needs_grad();
        if !need_x && !need_w {
            return;
        }
        let col = im2col(&xc.data(), c_in, h, w, kh, kw, s, pad, oh, ow);
        if need_w {
            let mut gw = vec![0.0; c_out * krows];
            for gi in 0..g {
                gemm_nt(
                    opg,
                    ncols,
                    krows,
                    &gout[gi * opg * ncols..(gi + 1) * opg * ncols],
                    &col[gi * krows * ncols..(gi + 1) * krows * ncols],
                    &mut gw[gi * opg * krows..(gi + 1) * opg * krows],
                );
            }
            wc.accum_grad(&gw);
        }
        if need_x {
            let wd = wc.data();
            let mut gcol = vec![0.0; c_in * kh * kw * ncols];
            for gi in 0..g {
                gemm_tn(
                    krows,
                    opg,
                    ncols,
                    &wd[gi * opg * krows..(gi + 1) * opg * krows],
                    &gout[gi * opg * ncols..(gi + 1) * opg * ncols],
                    &mut gcol[gi * krows * ncols..(gi + 1) * krows * ncols],
                );
            }
            drop(wd);
            let mut gx = vec![0.0; c_in * h * w];
            col2im(&gcol, c_in, h, w, kh, kw, s, pad, oh, ow, &mut gx);
            xc.accum_grad(&gx);
        }
    })
}

/// Convolution where channel c sees only kernel c (groups == channels).
pub fn depthwise_conv2d(x: &Tensor, p: &ConvParams) -> Tensor {
    let c = x.shape()[0];
    assert!(
        p.groups == c && p.weight.shape()[0] == c && p.weight.shape()[1] == 1,
        "depthwise_conv2d: need groups == channels == {c}, got {} groups and weight {:?}",
        p.groups,
        p.weight.shape()
    );
    conv2d(x, p)
}

/// Transposed convolution: output spatial = (H−1)·stride − 2·pad + kH, and
/// ⟨conv2d(x), y⟩ = ⟨x, transposed_conv2d(y)⟩ for matching (bias-free)
/// parameters.
pub fn transposed_conv2d(x: &Tensor, p: &ConvParams) -> Tensor {
    assert_eq!(x.rank(), 3, "transposed_conv2d expects [C,H,W], got {:?}", x.shape());
    assert_eq!(p.groups, 1, "transposed_conv2d supports groups == 1 only");
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ws = p.weight.shape().to_vec();
    assert_eq!(ws.len(), 4, "transposed_conv2d weight must be rank 4, got {:?}", ws);
    let (wc_in, c_out, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(wc_in, c_in, "transposed_conv2d: weight {ws:?} does not accept {c_in} channels");
    let (s, pad) = (p.stride, p.padding);
    assert!(s >= 1, "transposed_conv2d: stride must be at least 1");
    assert!(
        (h - 1) * s + kh > 2 * pad && (w - 1) * s + kw > 2 * pad,
        "transposed_conv2d: invalid geometry ({h}x{w}, kernel {kh}x{kw}, stride {s}, pad {pad})"
    );
    let oh = (h - 1) * s - 2 * pad + kh;
    let ow = (w - 1) * s - 2 * pad + kw;
    let krows = c_out * kh * kw;
    let npos = h * w;

    // col = W^T · X, then scatter back onto the (larger) output canvas
    let mut col = vec![0.0; krows * npos];
    gemm_tn(krows, c_in, npos, &p.weight.data(), &x.data(), &mut col);
    let mut out = vec![0.0; c_out * oh * ow];
    col2im(&col, c_out, oh, ow, kh, kw, s, pad, h, w, &mut out);
    drop(col);
    if let Some(b) = &p.bias {
        assert_eq!(b.shape(), &[c_out], "transposed_conv2d bias shape {:?}", b.shape());
        let bd = b.data();
        for co in 0..c_out {
            for v in &mut out[co * oh * ow..(co + 1) * oh * ow] {
                *v += bd[co];
            }
        }
    }

    let mut parents = vec![x.clone(), p.weight.clone()];
    if let Some(b) = &p.bias {
        parents.push(b.clone());
    }
    let (xc, wgt, bc) = (x.clone(), p.weight.clone(), p.bias.clone());
    Tensor::from_op("transposed_conv2d", vec![c_out, oh, ow], out, parents, move |gout, _| {
        if let Some(b) = &bc {
            if b.needs_grad() {
                let mut gb = vec![0.0; c_out];
                for co in 0..c_out {
                    gb[co] = gout[co * oh * ow..(co + 1) * oh * ow].iter().sum();
                }
                b.accum_grad(&gb);
            }
        }
        let need_x = xc.needs_grad();
        let need_w = wgt.needs_grad();
        if !need_x && !need_w {
            return;
        }
        let gcol = im2col(gout, c_out, oh, ow, kh, kw, s, pad, h, w);
        if need_x {
            let mut gx = vec![0.0; c_in * npos];
            gemm(c_in, krows, npos, &wgt.data(), &gcol, &mut gx);
            xc.accum_grad(&gx);
        }
        if need_w {
            let mut gw = vec![0.0; c_in * krows];
            gemm_nt(c_in, npos, krows, &xc.data(), &gcol, &mut gw);
            wgt.accum_grad(&gw);
        }
    })
}
