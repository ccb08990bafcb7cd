//! KANLinear: a layer whose edges carry learnable univariate functions,
//! each a SiLU base term plus a spline term on a shared grid:
//!
//!   phi(x) = beta * SiLU(x) + s * sum_k c_k B_k(x)
//!
//! and the layer output is the per-node sum of its incoming edges.

use crate::init::{normal_param, Prng};
use crate::kan::spline::SplineGrid;
use crate::ops::{silu_deriv, silu_scalar};
use crate::tensor::Tensor;
use std::rc::Rc;

/// Learnable parameters of one KANLinear layer: per-edge base weight `beta`,
/// spline scale `s`, and `n_basis` spline coefficients `c`, on one shared grid.
pub struct KanLinearLayer {
    pub n_in: usize,
    pub n_out: usize,
    /// [n_out, n_in]
    pub beta: Tensor,
    /// [n_out, n_in]
    pub s: Tensor,
    /// [n_out, n_in, n_basis]
    pub c: Tensor,
    pub grid: Rc<SplineGrid>,
}

impl KanLinearLayer {
    pub fn new(n_in: usize, n_out: usize, grid: Rc<SplineGrid>, rng: &mut Prng) -> KanLinearLayer {
        // beta = 1/n_in (fan-in-scaled so wide layers stay O(1)), s = 1,
        // c ~ N(0, 0.1): starts near a plain SiLU network
        let nb = grid.n_basis;
        KanLinearLayer {
            n_in,
            n_out,
            beta: Tensor::param(&[n_out, n_in], vec![1.0 / n_in as f64; n_out * n_in]),
            s: Tensor::param(&[n_out, n_in], vec![1.0; n_out * n_in]),
            c: normal_param(rng, &[n_out, n_in, nb], 0.1),
            grid,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        kan_linear_forward(x, self)
    }

    /// A handle onto the same parameter tensors (clones share storage).
    pub fn share(&self) -> KanLinearLayer {
        KanLinearLayer {
            n_in: self.n_in,
            n_out: self.n_out,
            beta: self.beta.clone(),
            s: self.s.clone(),
            c: self.c.clone(),
            grid: self.grid.clone(),
        }
    }
}

/// Applies a KANLinear layer. Input is `[n_in]` or batched `[B, n_in]`;
/// output matches with `n_out` in the last axis.
pub fn kan_linear_forward(x: &Tensor, layer: &KanLinearLayer) -> Tensor {
    let (batch, n_in) = match x.rank() {
        1 => (1, x.shape()[0]),
        2 => (x.shape()[0], x.shape()[1]),
        _ => panic!("kan_linear_forward expects rank 1 or 2 input, got {:?}", x.shape()),
    };
    let n_out = layer.n_out;
    assert_eq!(
        n_in, layer.n_in,
        "kan_linear_forward: input length {n_in} does not match layer n_in {}",
        layer.n_in
    );
    let nb = layer.grid.n_basis;
    let grid = layer.grid.clone();

    let xd = x.data();
    let bd = layer.beta.data();
    let sd = layer.s.data();
    let cd = layer.c.data();

    // Basis expansion once per input element; edges share the grid.
    let mut basis = vec![0.0; batch * n_in * nb];
    let mut siluv = vec![0.0; batch * n_in];
    for (i, &v) in xd.iter().enumerate() {
        grid.basis_into(v, &mut basis[i * nb..(i + 1) * nb]);
        siluv[i] = silu_scalar(v);
    }

    let mut out = vec![0.0; batch * n_out];
    for b in 0..batch {
        let bas = &basis[b * n_in * nb..(b + 1) * n_in * nb];
        let sil = &siluv[b * n_in..(b + 1) * n_in];
        let orow = &mut out[b * n_out..(b + 1) * n_out];
        for j in 0..n_out {
            let mut acc = 0.0;
            let ebase = j * n_in;
            for i in 0..n_in {
                let mut spline = 0.0;
                let cb = (ebase + i) * nb;
                for k in 0..nb {
                    spline += cd[cb + k] * bas[i * nb + k];
                }
                acc += bd[ebase + i] * sil[i] + sd[ebase + i] * spline;
            }
            orow[j] = acc;
        }
    }
    drop(xd);
    drop(bd);
    drop(sd);
    drop(cd);

    let out_shape = if x.rank() == 1 {
        vec![n_out]
    } else {
        vec![batch, n_out]
    };
    let (xc, betac, sc, cc) = (
        x.clone(),
        layer.beta.clone(),
        layer.s.clone(),
        layer.c.clone(),
    );
    Tensor::from_op(
        "kan_linear",
        out_shape,
        out,
        vec![x.clone(), layer.beta.clone(), layer.s.clone(), layer.c.clone()],
        move |g, _| {
            let xd = xc.data();
            let bd = betac.data();
            let sd = sc.data();
            let cd = cc.data();
            let want_x = xc.needs_grad();
            let mut gx = vec![0.0; batch * n_in];
            let mut gb = vec![0.0; n_out * n_in];
            let mut gs = vec![0.0; n_out * n_in];
            let mut gc = vec![0.0; n_out * n_in * nb];
            let mut bas = vec![0.0; nb];
            let mut der = vec![0.0; nb];
            for b in 0..batch {
                for i in 0..n_in {
                    let xv = xd[b * n_in + i];
                    grid.basis_and_deriv(xv, &mut bas, &mut der);
                    let sil = silu_scalar(xv);
                    let dsil = silu_deriv(xv);
                    let mut dxi = 0.0;
                    for j in 0..n_out {
                        let gj = g[b * n_out + j];
                        if gj == 0.0 {
                            continue;
                        }
                        let e = j * n_in + i;
                        let (mut spline, mut dspline) = (0.0, 0.0);
                        let cb = e * nb;
                        for k in 0..nb {
                            spline += cd[cb + k] * bas[k];
                            dspline += cd[cb + k] * der[k];
                        }
                        gb[e] += gj * sil;
                        gs[e] += gj * spline;
                        for k in 0..nb {
                            gc[cb + k] += gj * sd[e] * bas[k];
                        }
                        if want_x {
                            dxi += gj * (bd[e] * dsil + sd[e] * dspline);
                        }
                    }
                    gx[b * n_in + i] = dxi;
                }
            }
            drop(xd);
            drop(bd);
            drop(sd);
            drop(cd);
            if want_x {
                xc.accum_grad(&gx);
            }
            betac.accum_grad(&gb);
            sc.accum_grad(&gs);
            cc.accum_grad(&gc);
        },
    )
}

/// Sequential composition of KANLinear layers.
pub fn kan_compose(layers: &[KanLinearLayer], x0: &Tensor) -> Tensor {
    assert!(!layers.is_empty(), "kan_compose of zero layers");
    for w in layers.windows(2) {
        assert_eq!(
            w[0].n_out, w[1].n_in,
            "kan_compose: layer dimensions do not chain ({} -> {})",
            w[0].n_out, w[1].n_in
        );
    }
    let mut x = x0.clone();
    for layer in layers {
        x = layer.forward(&x);
    }
    x
}
