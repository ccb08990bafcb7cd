//! Differentiable bilinear sampling at fractional coordinates with zero
//! padding outside the image.

use crate::tensor::Tensor;

/// Samples x[C,H,W] at `coords` [P,2] rows of (row, col) floats, returning
/// [C,P]. Coordinates outside [0,H−1]×[0,W−1] fade linearly to zero (zero
/// padding); the result is differentiable with respect to both the image and
/// the coordinates.
pub fn bilinear_sample(x: &Tensor, coords: &Tensor) -> Tensor {
    assert_eq!(x.rank(), 3, "bilinear_sample image must be [C,H,W], got {:?}", x.shape());
    assert!(
        coords.rank() == 2 && coords.shape()[1] == 2,
        "bilinear_sample coords must be [P,2], got {:?}",
        coords.shape()
    );
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let p = coords.shape()[0];
    let cd = coords.data();
    assert!(cd.iter().all(|v| v.is_finite()), "bilinear_sample: non-finite coordinate");
    let xd = x.data();
    let mut out = vec![0.0; c * p];
    for pi in 0..p {
        let (r, cl) = (cd[2 * pi], cd[2 * pi + 1]);
        let r0 = r.floor();
        let c0 = cl.floor();
        let (fr, fc) = (r - r0, cl - c0);
        for (di, dj, wt) in [
            (0.0, 0.0, (1.0 - fr) * (1.0 - fc)),
            (0.0, 1.0, (1.0 - fr) * fc),
            (1.0, 0.0, fr * (1.0 - fc)),
            (1.0, 1.0, fr * fc),
        ] {
            let (ri, cj) = (r0 + di, c0 + dj);
            if wt == 0.0 || ri < 0.0 || cj < 0.0 || ri >= h as f64 || cj >= w as f64 {
                continue;
            }
            let (ri, cj) = (ri as usize, cj as usize);
            for ch in 0..c {
                out[ch * p + pi] += wt * xd[(ch * h + ri) * w + cj];
            }
        }
    }
    drop(cd);
    drop(xd);
    let (xc, cc) = (x.clone(), coords.clone());
    Tensor::from_op(
        "bilinear_sample",
        vec![c, p],
        out,
        vec![x.clone(), coords.clone()],
        move |g, _| {
            let cd = cc.data();
            let xd = xc.data();
            let need_x = xc.needs_grad();
            let need_c = cc.needs_grad();
            let mut gx = vec![0.0; xd.len()];
            let mut gc = vec![0.0; cd.len()];
            for pi in 0..p {
                let (r, cl) = (cd[2 * pi], cd[2 * pi + 1]);
                let r0 = r.floor();
                let c0 = cl.floor();
                let (fr, fc) = (r - r0, cl - c0);
                // weight and its partials w.r.t. (r, c) per corner
                for (di, dj, wt, dwr, dwc) in [
                    (0.0, 0.0, (1.0 - fr) * (1.0 - fc), -(1.0 - fc), -(1.0 - fr)),
                    (0.0, 1.0, (1.0 - fr) * fc, -fc, 1.0 - fr),
                    (1.0, 0.0, fr * (1.0 - fc), 1.0 - fc, -fr),
                    (1.0, 1.0, fr * fc, fc, fr),
                ] {
                    let (ri, cj) = (r0 + di, c0 + dj);
                    if ri < 0.0 || cj < 0.0 || ri >= h as f64 || cj >= w as f64 {
                        continue;
                    }
                    let (ri, cj) = (ri as usize, cj as usize);
                    for ch in 0..c {
                        let gi = g[ch * p + pi];
                        if gi == 0.0 {
                            continue;
                        }
                        let xv = xd[(ch * h + ri) * w + cj];
                        if need_x {
                            gx[(ch * h + ri) * w + cj] += wt * gi;
                        }
                        if need_c {
                            gc[2 * pi] += gi * dwr * xv;
                            gc[2 * pi + 1] += gi * dwc * xv;
                        }
                    }
                }
            }
            drop(cd);
            drop(xd);
            xc.accum_grad(&gx);
            cc.accum_grad(&gc);
        },
    )
}
