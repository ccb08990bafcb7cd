//! Batch and layer normalization.

use crate::tensor::Tensor;
use std::cell::RefCell;
use std::rc::Rc;

/// Running statistics of one batch-norm layer. Updated in train mode,
/// consumed in eval mode; serialized with checkpoints.
#[derive(Clone)]
pub struct BnState {
    pub running_mean: Rc<RefCell<Vec<f64>>>,
    pub running_var: Rc<RefCell<Vec<f64>>>,
    pub eps: f64,
    pub momentum: f64,
}

impl BnState {
    pub fn new(channels: usize) -> BnState {
        BnState {
            running_mean: Rc::new(RefCell::new(vec![0.0; channels])),
            running_var: Rc::new(RefCell::new(vec![1.0; channels])),
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

fn nchw(x: &Tensor) -> (usize, usize, usize) {
    match x.rank() {
        3 => (1, x.shape()[0], x.shape()[1] * x.shape()[2]),
        4 => (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]),
        _ => panic!("batchnorm expects rank 3 or 4, got {:?}", x.shape()),
    }
}

/// Batch normalization over (N, H, W) per channel. Train mode normalizes with
/// batch statistics and updates the running stats; eval mode uses the running
/// stats as fixed affine constants.
pub fn batchnorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, state: &BnState, train: bool) -> Tensor {
    let (n, c, hw) = nchw(x);
    assert_eq!(
        gamma.numel(),
        c,
        "batchnorm: {} scale parameters for {c} channels",
        gamma.numel()
    );
    assert_eq!(beta.numel(), c, "batchnorm: {} shift parameters for {c} channels", beta.numel());
    let count = n * hw;
    let xd = x.data();
    let (mut mu, mut var) = (vec![0.0; c], vec![0.0; c]);
    if train {
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                s += xd[base..base + hw].iter().sum::<f64>();
            }
            mu[ch] = s / count as f64;
            let mut v = 0.0;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                for &e in &xd[base..base + hw] {
                    v += (e - mu[ch]) * (e - mu[ch]);
                }
            }
            var[ch] = v / count as f64;
        }
        let mut rm = state.running_mean.borrow_mut();
        let mut rv = state.running_var.borrow_mut();
        for ch in 0..c {
            let unbiased = if count > 1 {
                var[ch] * count as f64 / (count - 1) as f64
            } else {
                var[ch]
            };
            rm[ch] = (1.0 - state.momentum) * rm[ch] + state.momentum * mu[ch];
            rv[ch] = (1.0 - state.momentum) * rv[ch] + state.momentum * unbiased;
        }
    } else {
        mu.copy_from_slice(&state.running_mean.borrow());
        var.copy_from_slice(&state.running_var.borrow());
    }
    let invstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + state.eps).sqrt()).collect();
    let gd = gamma.data();
    let bd = beta.data();
    let mut out = vec![0.0; xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in 0..hw {
                out[base + i] = (xd[base + i] - mu[ch]) * invstd[ch] * gd[ch] + bd[ch];
            }
        }
    }
    drop(xd);
    drop(gd);
    drop(bd);
    let (xc, gc, bc) = (x.clone(), gamma.clone(), beta.clone());
    Tensor::from_op(
        "batchnorm",
        x.shape().to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |g, _| {
            let xd = xc.data();
            let gd = gc.data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut gx = vec![0.0; xd.len()];
            for ch in 0..c {
                let (mut sum_g, mut sum_gxh) = (0.0, 0.0);
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    for i in 0..hw {
                        let xh = (xd[base + i] - mu[ch]) * invstd[ch];
                        sum_g += g[base + i];
                        sum_gxh += g[base + i] * xh;
                    }
                }
                dbeta[ch] = sum_g;
                dgamma[ch] = sum_gxh;
                let m = count as f64;
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    for i in 0..hw {
                        let xh = (xd[base + i] - mu[ch]) * invstd[ch];
                        gx[base + i] = if train {
                            gd[ch] * invstd[ch] * (g[base + i] - sum_g / m - xh * sum_gxh / m)
                        } else {
                            gd[ch] * invstd[ch] * g[base + i]
                        };
                    }
                }
            }
            drop(xd);
            drop(gd);
            xc.accum_grad(&gx);
            gc.accum_grad(&dgamma);
            bc.accum_grad(&dbeta);
        },
    )
}

/// Layer normalization over the last axis (token embeddings).
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let d = *x.shape().last().expect("layernorm on rank-0 tensor");
    assert_eq!(gamma.numel(), d, "layernorm: {} scale parameters for width {d}", gamma.numel());
    assert_eq!(beta.numel(), d, "layernorm: {} shift parameters for width {d}", beta.numel());
    let rows = x.numel() / d;
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut out = vec![0.0; xd.len()];
    let mut mu = vec![0.0; rows];
    let mut invstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let m = row.iter().sum::<f64>() / d as f64;
        let v = row.iter().map(|&e| (e - m) * (e - m)).sum::<f64>() / d as f64;
        mu[r] = m;
        invstd[r] = 1.0 / (v + eps).sqrt();
        for i in 0..d {
            out[r * d + i] = (row[i] - m) * invstd[r] * gd[i] + bd[i];
        }
    }
    drop(xd);
    drop(gd);
    drop(bd);
    let (xc, gc, bc) = (x.clone(), gamma.clone(), beta.clone());
    Tensor::from_op(
        "layernorm",
        x.shape().to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |g, _| {
            let xd = xc.data();
            let gd = gc.data();
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            let mut gx = vec![0.0; xd.len()];
            for r in 0..rows {
                let (mut sum_gg, mut sum_ggxh) = (0.0, 0.0);
                for i in 0..d {
                    let xh = (xd[r * d + i] - mu[r]) * invstd[r];
                    let gg = g[r * d + i] * gd[i];
                    sum_gg += gg;
                    sum_ggxh += gg * xh;
                    dgamma[i] += g[r * d + i] * xh;
                    dbeta[i] += g[r * d + i];
                }
                for i in 0..d {
                    let xh = (xd[r * d + i] - mu[r]) * invstd[r];
                    let gg = g[r * d + i] * gd[i];
                    gx[r * d + i] =
                        invstd[r] * (gg - sum_gg / d as f64 - xh * sum_ggxh / d as f64);
                }
            }
            drop(xd);
            drop(gd);
            xc.accum_grad(&gx);
            gc.accum_grad(&dgamma);
            bc.accum_grad(&dbeta);
        },
    )
}
