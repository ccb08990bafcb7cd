//! Matrix multiplication, transposition and softmax.

use crate::tensor::Tensor;

/// c[m x n] += a[m x k] * b[k x n]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m x n] += a^T * b with a stored as [k x m], b as [k x n]
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m x n] += a * b^T with a stored as [m x k], b as [n x k]
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            c[i * n + j] += acc;
        }
    }
}

/// Standard 2-D product; gradients dA = dY B^T, dB = A^T dY.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rank(), 2, "matmul lhs must be rank 2, got {:?}", a.shape());
    assert_eq!(b.rank(), 2, "matmul rhs must be rank 2, got {:?}", b.shape());
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(
        k, k2,
        "matmul: inner dimensions disagree: {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data(), &b.data(), &mut out);
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op(
        "matmul",
        vec![m, n],
        out,
        vec![a.clone(), b.clone()],
        move |g, _| {
            if ac.needs_grad() {
                let mut da = vec![0.0; m * k];
                gemm_nt(m, n, k, g, &bc.data(), &mut da);
                ac.accum_grad(&da);
            }
            if bc.needs_grad() {
                let mut db = vec![0.0; k * n];
                gemm_tn(k, m, n, &ac.data(), g, &mut db);
                bc.accum_grad(&db);
            }
        },
    )
}

pub fn transpose2d(x: &Tensor) -> Tensor {
    assert_eq!(x.rank(), 2, "transpose2d expects rank 2, got {:?}", x.shape());
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = xd[i * c + j];
        }
    }
    drop(xd);
    let xc = x.clone();
    Tensor::from_op("transpose2d", vec![c, r], out, vec![x.clone()], move |g, _| {
        let mut gx = vec![0.0; r * c];
        for j in 0..c {
            for i in 0..r {
                gx[i * c + j] = g[j * r + i];
            }
        }
        xc.accum_grad(&gx);
    })
}

fn axis_layout(shape: &[usize], dim: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..dim].iter().product();
    let len = shape[dim];
    let inner: usize = shape[dim + 1..].iter().product();
    (outer, len, inner)
}

/// Numerically stabilized softmax along `dim`: each slice is shifted by its
/// maximum before exponentiation, so entries of magnitude 1e4 do not overflow.
pub fn softmax_along(x: &Tensor, dim: usize) -> Tensor {
    assert!(
        dim < x.rank(),
        "softmax_along: axis {dim} out of range for shape {:?}",
        x.shape()
    );
    let (outer, len, inner) = axis_layout(x.shape(), dim);
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..len {
                mx = mx.max(xd[base + j * inner]);
            }
            let mut z = 0.0;
            for j in 0..len {
                let e = (xd[base + j * inner] - mx).exp();
                out[base + j * inner] = e;
                z += e;
            }
            for j in 0..len {
                out[base + j * inner] /= z;
            }
        }
    }
    drop(xd);
    let xc = x.clone();
    Tensor::from_op(
        "softmax_along",
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        move |g, y| {
            let mut gx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = 0.0;
                    for j in 0..len {
                        let idx = base + j * inner;
                        dot += g[idx] * y[idx];
                    }
                    for j in 0..len {
                        let idx = base + j * inner;
                        gx[idx] = y[idx] * (g[idx] - dot);
                    }
                }
            }
            xc.accum_grad(&gx);
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::sum_all;

    #[test]
    fn identity_matmul() {
        let eye = Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let m = Tensor::new(&[3, 2], (0..6).map(|v| v as f64).collect());
        assert_eq!(matmul(&eye, &m).to_vec(), m.to_vec());
    }

    #[test]
    fn hand_dot_product() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::new(&[2, 1], vec![5.0, 6.0]);
        assert_eq!(matmul(&a, &b).to_vec(), vec![17.0, 39.0]);
    }

    #[test]
    #[should_panic(expected = "inner dimensions disagree")]
    fn inner_dim_mismatch() {
        matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 2]));
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let y = softmax_along(&Tensor::new(&[3], vec![7.0, 7.0, 7.0]), 0).to_vec();
        for v in y {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let y = softmax_along(&Tensor::new(&[2], vec![1000.0, 0.0]), 0).to_vec();
        assert!(y.iter().all(|v| v.is_finite()));
        assert!((y[0] - 1.0).abs() < 1e-12 && y[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut st = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            st = st.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((st >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let x = Tensor::new(&[5, 7], (0..35).map(|_| next() * 10.0).collect());
        let y = softmax_along(&x, 1);
        let yd = y.data();
        for r in 0..5 {
            let s: f64 = yd[r * 7..(r + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "row {r} sums to {s}");
        }
    }

    #[test]
    #[should_panic(expected = "axis 2 out of range")]
    fn softmax_invalid_axis() {
        softmax_along(&Tensor::zeros(&[2, 2]), 2);
    }

    #[test]
    fn transpose_roundtrip_gradient() {
        let x = Tensor::param(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = transpose2d(&x);
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.to_vec(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        sum_all(&y).backward();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }
}
