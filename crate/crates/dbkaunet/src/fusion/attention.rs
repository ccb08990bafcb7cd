//! Squeeze-and-attention (SAM) and position attention (PAM), both
//! shape-preserving C×H×W → C×H×W.

use crate::conv::{conv2d, ConvParams};
use crate::init::Prng;
use crate::ops::{
    add, avg_pool2x2, matmul, mul, reshape, sigmoid, softmax_along, transpose2d,
    upsample_nearest2,
};
use crate::tensor::Tensor;

/// SAM: main 3×3 convolution gated by a pooled attention branch,
/// out = main(x)·attn + attn with attn = σ(up(conv(pool(x)))).
pub struct SamParams {
    pub main: ConvParams,
    pub attn: ConvParams,
}

impl SamParams {
    pub fn new(rng: &mut Prng, c: usize) -> SamParams {
        SamParams {
            main: ConvParams::new(rng, c, c, 3, 1, 1),
            attn: ConvParams::new(rng, c, c, 3, 1, 1),
        }
    }
}

pub fn sam_forward(x: &Tensor, p: &SamParams) -> Tensor {
    assert_eq!(x.rank(), 3, "sam_forward expects [C,H,W], got {:?}", x.shape());
    assert!(
        x.shape()[1] % 2 == 0 && x.shape()[2] % 2 == 0,
        "sam_forward: spatial dims must be even for the pooled branch, got {:?}",
        x.shape()
    );
    let a = sigmoid(&upsample_nearest2(&conv2d(&avg_pool2x2(x), &p.attn)));
    add(&mul(&conv2d(x, &p.main), &a), &a)
}

/// PAM: spatial self-attention with a zero-initialized residual scale, so it
/// starts as the identity.
pub struct PamParams {
    pub q: ConvParams,
    pub k: ConvParams,
    pub v: ConvParams,
    /// scalar residual weight, zero at init
    pub scale: Tensor,
}

impl PamParams {
    pub fn new(rng: &mut Prng, c: usize) -> PamParams {
        let cq = (c / 8).max(1);
        PamParams {
            q: ConvParams::new(rng, c, cq, 1, 1, 0),
            k: ConvParams::new(rng, c, cq, 1, 1, 0),
            v: ConvParams::new(rng, c, c, 1, 1, 0),
            scale: Tensor::param(&[1], vec![0.0]),
        }
    }
}

/// Row-stochastic position-attention matrix A = softmax(QᵀK) over [HW, HW].
pub fn pam_attention(x: &Tensor, p: &PamParams) -> Tensor {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let hw = h * w;
    let qc = p.q.weight.shape()[0];
    let qf = reshape(&conv2d(x, &p.q), &[qc, hw]);
    let kf = reshape(&conv2d(x, &p.k), &[qc, hw]);
    softmax_along(&matmul(&transpose2d(&qf), &kf), 1)
}

pub fn pam_forward(x: &Tensor, p: &PamParams) -> Tensor {
    assert_eq!(x.rank(), 3, "pam_forward expects [C,H,W], got {:?}", x.shape());
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let hw = h * w;
    let a = pam_attention(x, p);
    let vf = reshape(&conv2d(x, &p.v), &[c, hw]);
    let att = matmul(&vf, &transpose2d(&a));
    add(x, &reshape(&mul(&att, &p.scale), &[c, h, w]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck_wrt;
    use crate::ops::sum_all;
    use rand::{Rng, SeedableRng};

    fn rand_chw(rng: &mut crate::init::Prng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::new(&[c, h, w], (0..c * h * w).map(|_| 2.0 * rng.gen::<f64>() - 1.0).collect())
    }

    #[test]
    fn sam_preserves_shape() {
        let mut rng = crate::init::Prng::seed_from_u64(1);
        for &(c, h, w) in &[(3usize, 4usize, 6usize), (1, 8, 8), (5, 2, 10)] {
            let p = SamParams::new(&mut rng, c);
            let x = rand_chw(&mut rng, c, h, w);
            assert_eq!(sam_forward(&x, &p).shape(), &[c, h, w]);
        }
    }

    #[test]
    fn sam_zero_parameters_give_constant_half() {
        // with all weights and biases zero the main path vanishes and the
        // attention branch is sigmoid(0) = 0.5, so out = 0·0.5 + 0.5
        let mut rng = crate::init::Prng::seed_from_u64(2);
        let p = SamParams::new(&mut rng, 2);
        for cp in [&p.main, &p.attn] {
            cp.weight.set_data(&vec![0.0; cp.weight.numel()]);
            let b = cp.bias.as_ref().unwrap();
            b.set_data(&vec![0.0; b.numel()]);
        }
        let y = sam_forward(&rand_chw(&mut rng, 2, 4, 4), &p);
        assert!(y.to_vec().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn sam_gradcheck() {
        let mut rng = crate::init::Prng::seed_from_u64(3);
        let p = SamParams::new(&mut rng, 2);
        let x = Tensor::param(&[2, 4, 4], (0..32).map(|_| rng.gen::<f64>()).collect());
        let f = {
            let x = x.clone();
            let p = SamParams {
                main: ConvParams {
                    weight: p.main.weight.clone(),
                    bias: p.main.bias.clone(),
                    stride: 1,
                    padding: 1,
                    groups: 1,
                },
                attn: ConvParams {
                    weight: p.attn.weight.clone(),
                    bias: p.attn.bias.clone(),
                    stride: 1,
                    padding: 1,
                    groups: 1,
                },
            };
            move || {
                let y = sam_forward(&x, &p);
                sum_all(&mul(&y, &y))
            }
        };
        for t in [&x, &p.main.weight, &p.attn.weight, p.attn.bias.as_ref().unwrap()] {
            assert!(gradcheck_wrt(&f, t, 1e-5) < 1e-5);
        }
    }

    #[test]
    fn pam_is_identity_at_init() {
        let mut rng = crate::init::Prng::seed_from_u64(4);
        let p = PamParams::new(&mut rng, 4);
        let x = rand_chw(&mut rng, 4, 4, 4);
        assert_eq!(pam_forward(&x, &p).to_vec(), x.to_vec());
    }

    #[test]
    fn pam_single_position_attention_is_one() {
        let mut rng = crate::init::Prng::seed_from_u64(5);
        let p = PamParams::new(&mut rng, 3);
        p.scale.set_data(&[0.7]);
        let x = rand_chw(&mut rng, 3, 1, 1);
        assert_eq!(pam_attention(&x, &p).to_vec(), vec![1.0]);
        let v = conv2d(&x, &p.v).to_vec();
        let y = pam_forward(&x, &p).to_vec();
        for ch in 0..3 {
            let want = x.to_vec()[ch] + 0.7 * v[ch];
            assert!((y[ch] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn pam_attention_rows_are_stochastic() {
        let mut rng = crate::init::Prng::seed_from_u64(6);
        let p = PamParams::new(&mut rng, 4);
        let x = rand_chw(&mut rng, 4, 3, 5);
        let a = pam_attention(&x, &p);
        let ad = a.data();
        let hw = 15;
        for r in 0..hw {
            let s: f64 = ad[r * hw..(r + 1) * hw].iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "row {r} sums to {s}");
        }
    }

    #[test]
    fn pam_gradcheck() {
        let mut rng = crate::init::Prng::seed_from_u64(7);
        let p = PamParams::new(&mut rng, 2);
        p.scale.set_data(&[0.4]);
        let x = Tensor::param(&[2, 3, 3], (0..18).map(|_| rng.gen::<f64>()).collect());
        let f = {
            let x = x.clone();
            let p = PamParams {
                q: ConvParams {
                    weight: p.q.weight.clone(),
                    bias: p.q.bias.clone(),
                    stride: 1,
                    padding: 0,
                    groups: 1,
                },
                k: ConvParams {
                    weight: p.k.weight.clone(),
                    bias: p.k.bias.clone(),
                    stride: 1,
                    padding: 0,
                    groups: 1,
                },
                v: ConvParams {
                    weight: p.v.weight.clone(),
                    bias: p.v.bias.clone(),
                    stride: 1,
                    padding: 0,
                    groups: 1,
                },
                scale: p.scale.clone(),
            };
            move || {
                let y = pam_forward(&x, &p);
                sum_all(&mul(&y, &y))
            }
        };
        for t in [&x, &p.q.weight, &p.k.weight, &p.v.weight, &p.scale] {
            assert!(gradcheck_wrt(&f, t, 1e-5) < 1e-4);
        }
    }
}
