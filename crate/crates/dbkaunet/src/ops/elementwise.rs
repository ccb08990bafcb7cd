//! Elementwise primitives with analytic gradients.
//!
//! Binary operations accept equal shapes or one scalar (single-element)
//! operand, which broadcasts. GELU uses the exact erf form so the finite
//! difference oracle is unambiguous.

use crate::tensor::Tensor;

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu_scalar(x: f64) -> f64 {
    x * sigmoid_scalar(x)
}

/// d/dx silu = sigma(x) * (1 + x * (1 - sigma(x)))
pub(crate) fn silu_deriv(x: f64) -> f64 {
    let s = sigmoid_scalar(x);
    s * (1.0 + x * (1.0 - s))
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_deriv(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn unary(
    op: &'static str,
    x: &Tensor,
    f: impl Fn(f64) -> f64,
    // derivative as a function of (input value, output value)
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let xc = x.clone();
    Tensor::from_op(op, x.shape().to_vec(), data, vec![x.clone()], move |g, out| {
        let xd = xc.data();
        let gx: Vec<f64> = g
            .iter()
            .zip(xd.iter().zip(out))
            .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
            .collect();
        drop(xd);
        xc.accum_grad(&gx);
    })
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    unary("sigmoid", x, sigmoid_scalar, |_, y| y * (1.0 - y))
}

pub fn silu(x: &Tensor) -> Tensor {
    unary("silu", x, silu_scalar, |xi, _| silu_deriv(xi))
}

pub fn gelu(x: &Tensor) -> Tensor {
    unary("gelu", x, gelu_scalar, |xi, _| gelu_deriv(xi))
}

pub fn relu(x: &Tensor) -> Tensor {
    unary("relu", x, |v| v.max(0.0), |xi, _| if xi > 0.0 { 1.0 } else { 0.0 })
}

pub fn abs(x: &Tensor) -> Tensor {
    unary("abs", x, f64::abs, |xi, _| xi.signum())
}

pub fn exp(x: &Tensor) -> Tensor {
    unary("exp", x, f64::exp, |_, y| y)
}

/// ln(max(x, floor)): the clamp keeps cross-entropy finite at p = 0.
pub fn ln_clamped(x: &Tensor, floor: f64) -> Tensor {
    assert!(floor > 0.0, "ln_clamped floor must be positive");
    unary(
        "ln_clamped",
        x,
        move |v| v.max(floor).ln(),
        move |xi, _| if xi > floor { 1.0 / xi } else { 0.0 },
    )
}

pub fn neg(x: &Tensor) -> Tensor {
    unary("neg", x, |v| -v, |_, _| -1.0)
}

pub fn scale(x: &Tensor, c: f64) -> Tensor {
    unary("scale", x, move |v| c * v, move |_, _| c)
}

pub fn add_scalar(x: &Tensor, c: f64) -> Tensor {
    unary("add_scalar", x, move |v| v + c, |_, _| 1.0)
}

enum Broadcast {
    None,
    Left,  // a is scalar
    Right, // b is scalar
}

fn binary_layout(op: &'static str, a: &Tensor, b: &Tensor) -> (Vec<usize>, Broadcast) {
    if a.shape() == b.shape() {
        (a.shape().to_vec(), Broadcast::None)
    } else if a.numel() == 1 {
        (b.shape().to_vec(), Broadcast::Left)
    } else if b.numel() == 1 {
        (a.shape().to_vec(), Broadcast::Right)
    } else {
        panic!(
            "{op}: shape mismatch {:?} vs {:?} (equal shapes or one scalar operand required)",
            a.shape(),
            b.shape()
        );
    }
}

fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
    // partials wrt (a_i, b_i) as functions of (a_i, b_i, out_i)
    dfa: impl Fn(f64, f64, f64) -> f64 + 'static,
    dfb: impl Fn(f64, f64, f64) -> f64 + 'static,
) -> Tensor {
    let (shape, bc) = binary_layout(op, a, b);
    let ad = a.data();
    let bd = b.data();
    let data: Vec<f64> = match bc {
        Broadcast::None => ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Left => bd.iter().map(|&y| f(ad[0], y)).collect(),
        Broadcast::Right => ad.iter().map(|&x| f(x, bd[0])).collect(),
    };
    drop(ad);
    drop(bd);
    let (ac, bc2) = (a.clone(), b.clone());
    Tensor::from_op(op, shape, data, vec![a.clone(), b.clone()], move |g, out| {
        let ad = ac.data();
        let bd = bc2.data();
        let at = |i: usize| if ad.len() == 1 { ad[0] } else { ad[i] };
        let bt = |i: usize| if bd.len() == 1 { bd[0] } else { bd[i] };
        if ac.needs_grad() {
            if ad.len() == 1 && g.len() > 1 {
                let s: f64 = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * dfa(at(i), bt(i), out[i]))
                    .sum();
                drop(ad);
                ac.accum_grad(&[s]);
            } else {
                let ga: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * dfa(at(i), bt(i), out[i]))
                    .collect();
                drop(ad);
                ac.accum_grad(&ga);
            }
        }
        if bc2.needs_grad() {
            let ad = ac.data();
            let at = |i: usize| if ad.len() == 1 { ad[0] } else { ad[i] };
            if bd.len() == 1 && g.len() > 1 {
                let s: f64 = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * dfb(at(i), bt(i), out[i]))
                    .sum();
                drop(bd);
                bc2.accum_grad(&[s]);
            } else {
                let gb: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * dfb(at(i), bt(i), out[i]))
                    .collect();
                drop(bd);
                bc2.accum_grad(&gb);
            }
        }
    })
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    binary("add", a, b, |x, y| x + y, |_, _, _| 1.0, |_, _, _| 1.0)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    binary("sub", a, b, |x, y| x - y, |_, _, _| 1.0, |_, _, _| -1.0)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    binary("mul", a, b, |x, y| x * y, |_, y, _| y, |x, _, _| x)
}

pub fn div(a: &Tensor, b: &Tensor) -> Tensor {
    binary(
        "div",
        a,
        b,
        |x, y| x / y,
        |_, y, _| 1.0 / y,
        |x, y, _| -x / (y * y),
    )
}

pub fn sum_all(x: &Tensor) -> Tensor {
    let s: f64 = x.data().iter().sum();
    let xc = x.clone();
    Tensor::from_op("sum_all", vec![1], vec![s], vec![x.clone()], move |g, _| {
        xc.accum_grad(&vec![g[0]; xc.numel()]);
    })
}

pub fn mean_all(x: &Tensor) -> Tensor {
    let n = x.numel() as f64;
    let s: f64 = x.data().iter().sum::<f64>() / n;
    let xc = x.clone();
    Tensor::from_op("mean_all", vec![1], vec![s], vec![x.clone()], move |g, _| {
        xc.accum_grad(&vec![g[0] / n; xc.numel()]);
    })
}
