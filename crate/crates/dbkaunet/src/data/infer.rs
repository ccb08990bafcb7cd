//! Sliding-window full-image inference with mean aggregation.

use crate::tensor::{NoGradGuard, Tensor};

/// Window top-left offsets covering `len` with `patch`-sized windows at
/// `stride`; the final window is clamped so coverage reaches the edge.
fn window_starts(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..=len - patch).step_by(stride).collect();
    if *starts.last().unwrap() != len - patch {
        starts.push(len - patch);
    }
    starts
}

/// Reflect-pads a [1,H,W] image on the bottom/right to at least `min` in each
/// dimension, returning the padded image (H', W' >= min).
fn reflect_pad_to(img: &Tensor, min: usize) -> Tensor {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let (nh, nw) = (h.max(min), w.max(min));
    if nh == h && nw == w {
        return img.clone();
    }
    assert!(nh - h < h && nw - w < w, "reflect_pad_to: image too small to reflect");
    let d = img.data();
    let mut out = vec![0.0; nh * nw];
    for r in 0..nh {
        let sr = if r < h { r } else { 2 * h - 2 - r };
        for c in 0..nw {
            let sc = if c < w { c } else { 2 * w - 2 - c };
            out[r * nw + c] = d[sr * w + sc];
        }
    }
    Tensor::new(&[1, nh, nw], out)
}

/// Covers the image with `patch × patch` windows at the given stride, runs
/// `model` on each (gradient recording disabled), and averages the per-pixel
/// predictions over all covering windows. Images smaller than the patch are
/// reflect-padded first and the output cropped back.
pub fn sliding_window_infer(
    model: &dyn Fn(&Tensor) -> Tensor,
    image: &Tensor,
    stride: usize,
    patch: usize,
) -> Tensor {
    assert_eq!(image.rank(), 3, "sliding_window_infer expects [1,H,W]");
    assert!(stride >= 1, "sliding_window_infer: zero stride");
    let (orig_h, orig_w) = (image.shape()[1], image.shape()[2]);
    let padded = reflect_pad_to(image, patch);
    let (h, w) = (padded.shape()[1], padded.shape()[2]);

    let _guard = NoGradGuard::new();
    let mut sum = vec![0.0f64; h * w];
    let mut count = vec![0u32; h * w];
    let pd = padded.data();
    for &r0 in &window_starts(h, patch, stride) {
        for &c0 in &window_starts(w, patch, stride) {
            let mut win = Vec::with_capacity(patch * patch);
            for r in 0..patch {
                let row = (r0 + r) * w + c0;
                win.extend_from_slice(&pd[row..row + patch]);
            }
            let pred = model(&Tensor::new(&[1, patch, patch], win));
            assert_eq!(
                pred.numel(),
                patch * patch,
                "model output {:?} does not match the {patch}x{patch} window",
                pred.shape()
            );
            let out = pred.data();
            for r in 0..patch {
                for c in 0..patch {
                    sum[(r0 + r) * w + c0 + c] += out[r * patch + c];
                    count[(r0 + r) * w + c0 + c] += 1;
                }
            }
        }
    }
    let mut map = vec![0.0; orig_h * orig_w];
    for r in 0..orig_h {
        for c in 0..orig_w {
            let i = r * w + c;
            debug_assert!(count[i] >= 1);
            map[r * orig_w + c] = sum[i] / count[i] as f64;
        }
    }
    Tensor::new(&[orig_h, orig_w], map)
}
