//! Shape plumbing: reshape, concatenation, slicing and fixed-index gathers.

use crate::tensor::{numel_of, Tensor};
use std::rc::Rc;

/// Same data, new shape (row-major reinterpretation).
pub fn reshape(x: &Tensor, shape: &[usize]) -> Tensor {
    assert_eq!(
        numel_of(shape),
        x.numel(),
        "reshape: cannot view {:?} as {:?}",
        x.shape(),
        shape
    );
    let xc = x.clone();
    Tensor::from_op(
        "reshape",
        shape.to_vec(),
        x.to_vec(),
        vec![x.clone()],
        move |g, _| {
            xc.accum_grad(g);
        },
    )
}

/// Concatenation along axis 0 (contiguous in row-major layout).
pub fn concat0(parts: &[&Tensor]) -> Tensor {
    assert!(!parts.is_empty(), "concat0 of zero tensors");
    let tail = &parts[0].shape()[1..];
    let mut dim0 = 0;
    for p in parts {
        assert_eq!(
            &p.shape()[1..],
            tail,
            "concat0: trailing dims differ: {:?} vs {:?}",
            p.shape(),
            parts[0].shape()
        );
        dim0 += p.shape()[0];
    }
    let mut shape = vec![dim0];
    shape.extend_from_slice(tail);
    let mut data = Vec::with_capacity(numel_of(&shape));
    for p in parts {
        data.extend_from_slice(&p.data());
    }
    let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
    let owned_bw = owned.clone();
    Tensor::from_op("concat0", shape, data, owned, move |g, _| {
        let mut off = 0;
        for p in &owned_bw {
            let n = p.numel();
            p.accum_grad(&g[off..off + n]);
            off += n;
        }
    })
}

/// Rows `r0..r1` of the leading axis (e.g. one channel of a CHW map).
pub fn slice0(x: &Tensor, r0: usize, r1: usize) -> Tensor {
    assert!(
        r0 < r1 && r1 <= x.shape()[0],
        "slice0: range {r0}..{r1} out of bounds for shape {:?}",
        x.shape()
    );
    let stride: usize = x.shape()[1..].iter().product();
    let mut shape = x.shape().to_vec();
    shape[0] = r1 - r0;
    let data = x.data()[r0 * stride..r1 * stride].to_vec();
    let xc = x.clone();
    Tensor::from_op("slice0", shape, data, vec![x.clone()], move |g, _| {
        let mut gx = vec![0.0; xc.numel()];
        gx[r0 * stride..r1 * stride].copy_from_slice(g);
        xc.accum_grad(&gx);
    })
}

/// Columns `c0..c1` of a 2-D tensor (per-head views in attention).
pub fn slice_cols(x: &Tensor, c0: usize, c1: usize) -> Tensor {
    assert_eq!(x.rank(), 2, "slice_cols expects rank 2, got {:?}", x.shape());
    let (r, c) = (x.shape()[0], x.shape()[1]);
    assert!(c0 < c1 && c1 <= c, "slice_cols: range {c0}..{c1} out of bounds for {c} columns");
    let w = c1 - c0;
    let xd = x.data();
    let mut data = Vec::with_capacity(r * w);
    for i in 0..r {
        data.extend_from_slice(&xd[i * c + c0..i * c + c1]);
    }
    drop(xd);
    let xc = x.clone();
    Tensor::from_op("slice_cols", vec![r, w], data, vec![x.clone()], move |g, _| {
        let mut gx = vec![0.0; r * c];
        for i in 0..r {
            gx[i * c + c0..i * c + c1].copy_from_slice(&g[i * w..(i + 1) * w]);
        }
        xc.accum_grad(&gx);
    })
}

/// Column-wise concatenation of equal-height 2-D tensors.
pub fn concat_cols(parts: &[&Tensor]) -> Tensor {
    assert!(!parts.is_empty(), "concat_cols of zero tensors");
    let r = parts[0].shape()[0];
    let widths: Vec<usize> = parts
        .iter()
        .map(|p| {
            assert_eq!(p.rank(), 2, "concat_cols expects rank 2");
            assert_eq!(p.shape()[0], r, "concat_cols: row counts differ");
            p.shape()[1]
        })
        .collect();
    let total: usize = widths.iter().sum();
    let mut data = vec![0.0; r * total];
    let mut off = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        let pd = p.data();
        for i in 0..r {
            data[i * total + off..i * total + off + w].copy_from_slice(&pd[i * w..(i + 1) * w]);
        }
        off += w;
    }
    let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
    let owned_bw = owned.clone();
    Tensor::from_op("concat_cols", vec![r, total], data, owned, move |g, _| {
        let mut off = 0;
        for (p, &w) in owned_bw.iter().zip(&widths) {
            let mut gp = vec![0.0; r * w];
            for i in 0..r {
                gp[i * w..(i + 1) * w].copy_from_slice(&g[i * total + off..i * total + off + w]);
            }
            p.accum_grad(&gp);
            off += w;
        }
    })
}

/// out[i] = x[idx[i]] for a fixed (non-learnable) index table; the backward
/// pass scatter-adds, so repeated indices accumulate.
pub fn gather_fixed(x: &Tensor, idx: Rc<Vec<usize>>, shape: &[usize]) -> Tensor {
    assert_eq!(
        numel_of(shape),
        idx.len(),
        "gather_fixed: index table length {} does not match shape {:?}",
        idx.len(),
        shape
    );
    let xd = x.data();
    let n = xd.len();
    let data: Vec<f64> = idx
        .iter()
        .map(|&i| {
            assert!(i < n, "gather_fixed: index {i} out of bounds for {n} elements");
            xd[i]
        })
        .collect();
    drop(xd);
    let xc = x.clone();
    let idx_bw = idx.clone();
    Tensor::from_op("gather_fixed", shape.to_vec(), data, vec![x.clone()], move |g, _| {
        let mut gx = vec![0.0; n];
        for (&i, &gi) in idx_bw.iter().zip(g) {
            gx[i] += gi;
        }
        xc.accum_grad(&gx);
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::sum_all;

    #[test]
    fn concat0_and_slice0_are_adjoint_views() {
        let a = Tensor::param(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::param(&[1, 2], vec![5.0, 6.0]);
        let y = concat0(&[&a, &b]);
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(slice0(&y, 2, 3).to_vec(), vec![5.0, 6.0]);
        sum_all(&slice0(&y, 0, 1)).backward();
        assert_eq!(a.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0]);
        assert!(b.grad().is_none() || b.grad().unwrap() == vec![0.0, 0.0]);
    }

    #[test]
    fn cols_roundtrip() {
        let x = Tensor::param(&[2, 4], (0..8).map(|v| v as f64).collect());
        let l = slice_cols(&x, 0, 2);
        let r = slice_cols(&x, 2, 4);
        let y = concat_cols(&[&l, &r]);
        assert_eq!(y.to_vec(), x.to_vec());
        sum_all(&y).backward();
        assert_eq!(x.grad().unwrap(), vec![1.0; 8]);
    }

    #[test]
    fn gather_scatter_accumulates() {
        let x = Tensor::param(&[3], vec![10.0, 20.0, 30.0]);
        let y = gather_fixed(&x, Rc::new(vec![2, 2, 0]), &[3]);
        assert_eq!(y.to_vec(), vec![30.0, 30.0, 10.0]);
        sum_all(&y).backward();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 2.0]);
    }
}
