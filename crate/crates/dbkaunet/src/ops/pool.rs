//! Pooling, nearest-neighbor upsampling and per-channel broadcasting for
//! C x H x W feature maps.

use crate::tensor::Tensor;

fn chw(x: &Tensor) -> (usize, usize, usize) {
    assert_eq!(x.rank(), 3, "expected C x H x W input, got {:?}", x.shape());
    (x.shape()[0], x.shape()[1], x.shape()[2])
}

/// Global average pool to 1 x 1: each channel becomes its spatial mean.
/// Accepts C x H x W or batched N x C x H x W.
pub fn adaptive_avg_pool_to_1(x: &Tensor) -> Tensor {
    let (batch, c, h, w, out_shape): (usize, usize, usize, usize, Vec<usize>) = match x.rank() {
        3 => (1, x.shape()[0], x.shape()[1], x.shape()[2], vec![x.shape()[0], 1, 1]),
        4 => (
            x.shape()[0],
            x.shape()[1],
            x.shape()[2],
            x.shape()[3],
            vec![x.shape()[0], x.shape()[1], 1, 1],
        ),
        _ => panic!("adaptive_avg_pool_to_1 expects rank 3 or 4, got {:?}", x.shape()),
    };
    assert!(h > 0 && w > 0, "adaptive_avg_pool_to_1: zero spatial extent");
    let hw = h * w;
    let xd = x.data();
    let mut out = vec![0.0; batch * c];
    for i in 0..batch * c {
        out[i] = xd[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64;
    }
    drop(xd);
    let xc = x.clone();
    Tensor::from_op("adaptive_avg_pool", out_shape, out, vec![x.clone()], move |g, _| {
        let mut gx = vec![0.0; batch * c * hw];
        for i in 0..batch * c {
            let gi = g[i] / hw as f64;
            for v in &mut gx[i * hw..(i + 1) * hw] {
                *v = gi;
            }
        }
        xc.accum_grad(&gx);
    })
}

/// 2x2 average pooling with stride 2; requires even spatial dims.
pub fn avg_pool2x2(x: &Tensor) -> Tensor {
    let (c, h, w) = chw(x);
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2x2 needs even dims, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ch * h * w + 2 * oy * w + 2 * ox;
                out[ch * oh * ow + oy * ow + ox] =
                    0.25 * (xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1]);
            }
        }
    }
    drop(xd);
    let xc = x.clone();
    Tensor::from_op("avg_pool2x2", vec![c, oh, ow], out, vec![x.clone()], move |g, _| {
        let mut gx = vec![0.0; c * h * w];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gi = 0.25 * g[ch * oh * ow + oy * ow + ox];
                    let base = ch * h * w + 2 * oy * w + 2 * ox;
                    gx[base] += gi;
                    gx[base + 1] += gi;
                    gx[base + w] += gi;
                    gx[base + w + 1] += gi;
                }
            }
        }
        xc.accum_grad(&gx);
    })
}

/// Nearest-neighbor x2 upsampling.
pub fn upsample_nearest2(x: &Tensor) -> Tensor {
    let (c, h, w) = chw(x);
    let (oh, ow) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                out[ch * oh * ow + oy * ow + ox] = xd[ch * h * w + (oy / 2) * w + ox / 2];
            }
        }
    }
    drop(xd);
    let xc = x.clone();
    Tensor::from_op("upsample_nearest2", vec![c, oh, ow], out, vec![x.clone()], move |g, _| {
        let mut gx = vec![0.0; c * h * w];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    gx[ch * h * w + (oy / 2) * w + ox / 2] += g[ch * oh * ow + oy * ow + ox];
                }
            }
        }
        xc.accum_grad(&gx);
    })
}

/// y[c,h,w] = x[c,h,w] * v[c]; `v` may be shaped [C] or [C,1,1].
pub fn scale_channels(x: &Tensor, v: &Tensor) -> Tensor {
    let (c, h, w) = chw(x);
    assert_eq!(v.numel(), c, "scale_channels: {} factors for {c} channels", v.numel());
    let xd = x.data();
    let vd = v.data();
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        for i in 0..hw {
            out[ch * hw + i] = xd[ch * hw + i] * vd[ch];
        }
    }
    drop(xd);
    drop(vd);
    let (xc, vc) = (x.clone(), v.clone());
    Tensor::from_op(
        "scale_channels",
        vec![c, h, w],
        out,
        vec![x.clone(), v.clone()],
        move |g, _| {
            if xc.needs_grad() {
                let vd = vc.data();
                let mut gx = vec![0.0; c * hw];
                for ch in 0..c {
                    for i in 0..hw {
                        gx[ch * hw + i] = g[ch * hw + i] * vd[ch];
                    }
                }
                drop(vd);
                xc.accum_grad(&gx);
            }
            if vc.needs_grad() {
                let xd = xc.data();
                let mut gv = vec![0.0; c];
                for ch in 0..c {
                    for i in 0..hw {
                        gv[ch] += g[ch * hw + i] * xd[ch * hw + i];
                    }
                }
                drop(xd);
                vc.accum_grad(&gv);
            }
        },
    )
}

/// y[c,h,w] = x[c,h,w] + b[c]
pub fn add_channels(x: &Tensor, b: &Tensor) -> Tensor {
    let (c, h, w) = chw(x);
    assert_eq!(b.numel(), c, "add_channels: {} biases for {c} channels", b.numel());
    let xd = x.data();
    let bd = b.data();
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        for i in 0..hw {
            out[ch * hw + i] = xd[ch * hw + i] + bd[ch];
        }
    }
    drop(xd);
    drop(bd);
    let (xc, bc) = (x.clone(), b.clone());
    Tensor::from_op(
        "add_channels",
        vec![c, h, w],
        out,
        vec![x.clone(), b.clone()],
        move |g, _| {
            xc.accum_grad(g);
            if bc.needs_grad() {
                let mut gb = vec![0.0; c];
                for ch in 0..c {
                    gb[ch] = g[ch * hw..(ch + 1) * hw].iter().sum();
                }
                bc.accum_grad(&gb);
            }
        },
    )
}
