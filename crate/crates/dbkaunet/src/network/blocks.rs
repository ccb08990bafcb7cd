//! Network building blocks: residual CNN block, pre-norm ViT block, and the
//! KAT block (ViT with a group-rational KAN feed-forward).

use crate::conv::{conv2d, ConvParams};
use crate::init::{const_param, kaiming_param, zeros_param, Prng};
use crate::kan::{grkan_forward, RationalGroupParams};
use crate::ops::{
    add, batchnorm, concat_cols, gelu, layernorm, matmul, relu, scale, slice_cols,
    softmax_along, transpose2d, BnState,
};
use crate::tensor::Tensor;

/// x[R,C] + b[C], broadcasting the bias across rows.
pub fn add_row_bias(x: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(x.rank(), 2, "add_row_bias expects rank 2, got {:?}", x.shape());
    let (r, c) = (x.shape()[0], x.shape()[1]);
    assert_eq!(b.numel(), c, "add_row_bias: {} bias entries for {c} columns", b.numel());
    let xd = x.data();
    let bd = b.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[i * c + j] = xd[i * c + j] + bd[j];
        }
    }
    drop(xd);
    drop(bd);
    let (xc, bc) = (x.clone(), b.clone());
    Tensor::from_op(
        "add_row_bias",
        vec![r, c],
        out,
        vec![x.clone(), b.clone()],
        move |g, _| {
            xc.accum_grad(g);
            if bc.needs_grad() {
                let mut gb = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        gb[j] += g[i * c + j];
                    }
                }
                bc.accum_grad(&gb);
            }
        },
    )
}

/// Dense layer over token rows: x[T,in]·w[in,out] + b.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    add_row_bias(&matmul(x, w), b)
}

pub struct LinearParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearParams {
    pub fn new(rng: &mut Prng, n_in: usize, n_out: usize) -> LinearParams {
        LinearParams {
            w: kaiming_param(rng, &[n_in, n_out], n_in),
            b: zeros_param(&[n_out]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        linear(x, &self.w, &self.b)
    }
}

// ---------------------------------------------------------------------------
// Residual CNN block

pub struct ResidualBlockParams {
    pub conv1: ConvParams,
    pub bn1_gamma: Tensor,
    pub bn1_beta: Tensor,
    pub bn1: BnState,
    pub conv2: ConvParams,
    pub bn2_gamma: Tensor,
    pub bn2_beta: Tensor,
    pub bn2: BnState,
    /// 1×1 projection when stride or channel count changes; None = identity
    pub shortcut: Option<ConvParams>,
}

impl ResidualBlockParams {
    pub fn new(rng: &mut Prng, c_in: usize, c_out: usize, stride: usize) -> ResidualBlockParams {
        let shortcut = if stride != 1 || c_in != c_out {
            Some(ConvParams::new(rng, c_in, c_out, 1, stride, 0))
        } else {
            None
        };
        ResidualBlockParams {
            conv1: ConvParams::new(rng, c_in, c_out, 3, stride, 1),
            bn1_gamma: const_param(&[c_out], 1.0),
            bn1_beta: zeros_param(&[c_out]),
            bn1: BnState::new(c_out),
            conv2: ConvParams::new(rng, c_out, c_out, 3, 1, 1),
            bn2_gamma: const_param(&[c_out], 1.0),
            bn2_beta: zeros_param(&[c_out]),
            bn2: BnState::new(c_out),
            shortcut,
        }
    }
}

/// conv-BN-ReLU-conv-BN plus (projected) shortcut, then ReLU.
pub fn residual_block_forward(x: &Tensor, p: &ResidualBlockParams, train: bool) -> Tensor {
    let main = batchnorm(&conv2d(x, &p.conv1), &p.bn1_gamma, &p.bn1_beta, &p.bn1, train);
    let main = batchnorm(&conv2d(&relu(&main), &p.conv2), &p.bn2_gamma, &p.bn2_beta, &p.bn2, train);
    let short = match &p.shortcut {
        Some(proj) => conv2d(x, proj),
        None => x.clone(),
    };
    relu(&add(&main, &short))
}

// ---------------------------------------------------------------------------
// Multi-head self-attention shared by ViT and KAT blocks

pub struct AttnParams {
    pub heads: usize,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub o: LinearParams,
}

impl AttnParams {
    pub fn new(rng: &mut Prng, d: usize, heads: usize) -> AttnParams {
        assert!(d % heads == 0, "embed dim {d} not divisible by {heads} heads");
        AttnParams {
            heads,
            ln_gamma: const_param(&[d], 1.0),
            ln_beta: zeros_param(&[d]),
            q: LinearParams::new(rng, d, d),
            k: LinearParams::new(rng, d, d),
            v: LinearParams::new(rng, d, d),
            o: LinearParams::new(rng, d, d),
        }
    }
}

/// Row-stochastic attention matrix of one head over pre-normed tokens.
pub fn mhsa_head_attention(tokens: &Tensor, p: &AttnParams, head: usize) -> Tensor {
    let d = tokens.shape()[1];
    let dh = d / p.heads;
    let xn = layernorm(tokens, &p.ln_gamma, &p.ln_beta, 1e-5);
    let q = slice_cols(&p.q.forward(&xn), head * dh, (head + 1) * dh);
    let k = slice_cols(&p.k.forward(&xn), head * dh, (head + 1) * dh);
    softmax_along(&scale(&matmul(&q, &transpose2d(&k)), 1.0 / (dh as f64).sqrt()), 1)
}

/// Pre-norm multi-head self-attention, returned WITHOUT the residual add.
pub fn mhsa(tokens: &Tensor, p: &AttnParams) -> Tensor {
    assert_eq!(tokens.rank(), 2, "mhsa expects [T,D] tokens, got {:?}", tokens.shape());
    let d = tokens.shape()[1];
    assert!(
        d % p.heads == 0,
        "mhsa: embed dim {d} not divisible by {} heads",
        p.heads
    );
    let dh = d / p.heads;
    let xn = layernorm(tokens, &p.ln_gamma, &p.ln_beta, 1e-5);
    let q = p.q.forward(&xn);
    let k = p.k.forward(&xn);
    let v = p.v.forward(&xn);
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = slice_cols(&q, h * dh, (h + 1) * dh);
        let kh = slice_cols(&k, h * dh, (h + 1) * dh);
        let vh = slice_cols(&v, h * dh, (h + 1) * dh);
        let a = softmax_along(&scale(&matmul(&qh, &transpose2d(&kh)), 1.0 / (dh as f64).sqrt()), 1);
        heads.push(matmul(&a, &vh));
    }
    let refs: Vec<&Tensor> = heads.iter().collect();
    p.o.forward(&concat_cols(&refs))
}

// ---------------------------------------------------------------------------
// ViT block: pre-norm MHSA + GELU MLP, both residual

pub struct VitBlockParams {
    pub attn: AttnParams,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl VitBlockParams {
    pub fn new(rng: &mut Prng, d: usize, heads: usize, hidden: usize) -> VitBlockParams {
        VitBlockParams {
            attn: AttnParams::new(rng, d, heads),
            ln2_gamma: const_param(&[d], 1.0),
            ln2_beta: zeros_param(&[d]),
            fc1: LinearParams::new(rng, d, hidden),
            fc2: LinearParams::new(rng, hidden, d),
        }
    }
}

pub fn vit_block_forward(tokens: &Tensor, p: &VitBlockParams) -> Tensor {
    let t1 = add(tokens, &mhsa(tokens, &p.attn));
    let xn = layernorm(&t1, &p.ln2_gamma, &p.ln2_beta, 1e-5);
    add(&t1, &p.fc2.forward(&gelu(&p.fc1.forward(&xn))))
}

// ---------------------------------------------------------------------------
// KAT block: ViT with the MLP replaced by (GR-KAN → linear) × 2

pub struct KatBlockParams {
    pub attn: AttnParams,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub rat1: RationalGroupParams,
    pub fc1: LinearParams,
    pub rat2: RationalGroupParams,
    pub fc2: LinearParams,
}

impl KatBlockParams {
    pub fn new(
        rng: &mut Prng,
        d: usize,
        heads: usize,
        hidden: usize,
        groups: usize,
    ) -> KatBlockParams {
        KatBlockParams {
            attn: AttnParams::new(rng, d, heads),
            ln2_gamma: const_param(&[d], 1.0),
            ln2_beta: zeros_param(&[d]),
            rat1: RationalGroupParams::silu_init(groups),
            fc1: LinearParams::new(rng, d, hidden),
            rat2: RationalGroupParams::silu_init(groups),
            fc2: LinearParams::new(rng, hidden, d),
        }
    }
}

pub fn kat_block_forward(tokens: &Tensor, p: &KatBlockParams) -> Tensor {
    let t1 = add(tokens, &mhsa(tokens, &p.attn));
    let xn = layernorm(&t1, &p.ln2_gamma, &p.ln2_beta, 1e-5);
    let h = p.fc1.forward(&grkan_forward(&xn, &p.rat1));
    add(&t1, &p.fc2.forward(&grkan_forward(&h, &p.rat2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck_wrt;
    use crate::ops::{mul, sum_all};
    use rand::{Rng, SeedableRng};

    fn rand_t(rng: &mut crate::init::Prng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| 2.0 * rng.gen::<f64>() - 1.0).collect())
    }

    #[test]
    fn residual_identity_configuration_is_relu() {
        let mut rng = crate::init::Prng::seed_from_u64(1);
        let p = ResidualBlockParams::new(&mut rng, 3, 3, 1);
        assert!(p.shortcut.is_none());
        for cp in [&p.conv1, &p.conv2] {
            cp.weight.set_data(&vec![0.0; cp.weight.numel()]);
            let b = cp.bias.as_ref().unwrap();
            b.set_data(&vec![0.0; b.numel()]);
        }
        let x = rand_t(&mut rng, &[3, 4, 4]);
        let y = residual_block_forward(&x, &p, true).to_vec();
        for (yv, xv) in y.iter().zip(x.to_vec()) {
            assert_eq!(*yv, xv.max(0.0));
        }
    }

    #[test]
    fn residual_stride_two_shape() {
        let mut rng = crate::init::Prng::seed_from_u64(2);
        let p = ResidualBlockParams::new(&mut rng, 16, 32, 2);
        let y = residual_block_forward(&Tensor::zeros(&[16, 32, 32]), &p, true);
        assert_eq!(y.shape(), &[32, 16, 16]);
    }

    #[test]
    fn residual_gradcheck() {
        let mut rng = crate::init::Prng::seed_from_u64(3);
        let p = ResidualBlockParams::new(&mut rng, 2, 4, 2);
        let x = Tensor::param(&[2, 4, 4], (0..32).map(|_| rng.gen::<f64>() + 0.1).collect());
        let f = {
            let x = x.clone();
            let p = ResidualBlockParams {
                conv1: share_conv(&p.conv1),
                bn1_gamma: p.bn1_gamma.clone(),
                bn1_beta: p.bn1_beta.clone(),
                bn1: p.bn1.clone(),
                conv2: share_conv(&p.conv2),
                bn2_gamma: p.bn2_gamma.clone(),
                bn2_beta: p.bn2_beta.clone(),
                bn2: p.bn2.clone(),
                shortcut: p.shortcut.as_ref().map(share_conv),
            };
            move || {
                let y = residual_block_forward(&x, &p, true);
                sum_all(&mul(&y, &y))
            }
        };
        for t in [&x, &p.conv1.weight, &p.conv2.weight, &p.bn1_gamma] {
            assert!(gradcheck_wrt(&f, t, 1e-5) < 1e-5);
        }
    }

    fn share_conv(c: &ConvParams) -> ConvParams {
        ConvParams {
            weight: c.weight.clone(),
            bias: c.bias.clone(),
            stride: c.stride,
            padding: c.padding,
            groups: c.groups,
        }
    }

    #[test]
    fn vit_attention_rows_sum_to_one() {
        let mut rng = crate::init::Prng::seed_from_u64(4);
        let p = VitBlockParams::new(&mut rng, 8, 2, 16);
        let tokens = rand_t(&mut rng, &[5, 8]);
        for h in 0..2 {
            let a = mhsa_head_attention(&tokens, &p.attn, h);
            let ad = a.data();
            for r in 0..5 {
                let s: f64 = ad[r * 5..(r + 1) * 5].iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "head {h} row {r} sums to {s}");
            }
        }
    }

    #[test]
    fn vit_single_token_reduces_to_residual_paths() {
        let mut rng = crate::init::Prng::seed_from_u64(5);
        let p = VitBlockParams::new(&mut rng, 8, 2, 16);
        let t = rand_t(&mut rng, &[1, 8]);
        let got = vit_block_forward(&t, &p).to_vec();
        // one position: attention weights are the scalar 1, so MHSA is just
        // o(v(ln(t)))
        let xn = layernorm(&t, &p.attn.ln_gamma, &p.attn.ln_beta, 1e-5);
        let t1 = add(&t, &p.attn.o.forward(&p.attn.v.forward(&xn)));
        let xn2 = layernorm(&t1, &p.ln2_gamma, &p.ln2_beta, 1e-5);
        let want = add(&t1, &p.fc2.forward(&gelu(&p.fc1.forward(&xn2)))).to_vec();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn vit_gradcheck() {
        let mut rng = crate::init::Prng::seed_from_u64(6);
        let p = VitBlockParams::new(&mut rng, 8, 2, 16);
        let tokens = Tensor::param(&[4, 8], (0..32).map(|_| rng.gen::<f64>()).collect());
        let f = {
            let tokens = tokens.clone();
            let p = VitBlockParams {
                attn: share_attn(&p.attn),
                ln2_gamma: p.ln2_gamma.clone(),
                ln2_beta: p.ln2_beta.clone(),
                fc1: share_lin(&p.fc1),
                fc2: share_lin(&p.fc2),
            };
            move || {
                let y = vit_block_forward(&tokens, &p);
                sum_all(&mul(&y, &y))
            }
        };
        for t in [&tokens, &p.attn.q.w, &p.attn.o.b, &p.fc1.w, &p.ln2_gamma] {
            assert!(gradcheck_wrt(&f, t, 1e-5) < 1e-4);
        }
    }

    fn share_lin(l: &LinearParams) -> LinearParams {
        LinearParams { w: l.w.clone(), b: l.b.clone() }
    }

    fn share_attn(a: &AttnParams) -> AttnParams {
        AttnParams {
            heads: a.heads,
            ln_gamma: a.ln_gamma.clone(),
            ln_beta: a.ln_beta.clone(),
            q: share_lin(&a.q),
            k: share_lin(&a.k),
            v: share_lin(&a.v),
            o: share_lin(&a.o),
        }
    }

    #[test]
    fn kat_identity_rationals_match_linear_mlp() {
        let mut rng = crate::init::Prng::seed_from_u64(7);
        let mut p = KatBlockParams::new(&mut rng, 8, 2, 16, 2);
        p.rat1 = RationalGroupParams::identity(2, 5, 4);
        p.rat2 = RationalGroupParams::identity(2, 5, 4);
        let tokens = rand_t(&mut rng, &[4, 8]);
        let got = kat_block_forward(&tokens, &p).to_vec();
        let t1 = add(&tokens, &mhsa(&tokens, &p.attn));
        let xn = layernorm(&t1, &p.ln2_gamma, &p.ln2_beta, 1e-5);
        let want = add(&t1, &p.fc2.forward(&p.fc1.forward(&xn))).to_vec();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(kat_block_forward(&tokens, &p).shape(), tokens.shape());
    }

    #[test]
    fn kat_gradcheck_including_rational_coefficients() {
        let mut rng = crate::init::Prng::seed_from_u64(8);
        let p = KatBlockParams::new(&mut rng, 8, 2, 16, 2);
        let tokens = Tensor::param(&[3, 8], (0..24).map(|_| rng.gen::<f64>()).collect());
        let f = {
            let tokens = tokens.clone();
            let p = KatBlockParams {
                attn: share_attn(&p.attn),
                ln2_gamma: p.ln2_gamma.clone(),
                ln2_beta: p.ln2_beta.clone(),
                rat1: share_rat(&p.rat1),
                fc1: share_lin(&p.fc1),
                rat2: share_rat(&p.rat2),
                fc2: share_lin(&p.fc2),
            };
            move || {
                let y = kat_block_forward(&tokens, &p);
                sum_all(&mul(&y, &y))
            }
        };
        for t in [&tokens, &p.rat1.a, &p.rat1.b, &p.rat2.gamma, &p.fc1.w, &p.attn.v.w] {
            assert!(gradcheck_wrt(&f, t, 1e-5) < 1e-4);
        }
    }

    fn share_rat(r: &RationalGroupParams) -> RationalGroupParams {
        RationalGroupParams {
            m: r.m,
            n: r.n,
            groups: r.groups,
            a: r.a.clone(),
            b: r.b.clone(),
            gamma: r.gamma.clone(),
        }
    }

    #[test]
    #[should_panic(expected = "not divisible by 3 heads")]
    fn head_divisibility_enforced() {
        let mut rng = crate::init::Prng::seed_from_u64(0);
        AttnParams::new(&mut rng, 8, 3);
    }
}
