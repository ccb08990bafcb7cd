//! Group-rational KAN activation: a safe Pade rational function per channel
//! group,
//!
//!   phi(x) = gamma * (a_0 + a_1 x + ... + a_m x^m) / (1 + |b_1 x + ... + b_n x^n|)
//!
//! The |.| in the denominator bounds it below by 1, so the activation has no
//! poles for any real coefficients.

use crate::tensor::Tensor;
use std::sync::OnceLock;

/// Rational coefficients shared within each channel group.
pub struct RationalGroupParams {
    pub m: usize,
    pub n: usize,
    pub groups: usize,
    /// [groups, m + 1]
    pub a: Tensor,
    /// [groups, n]
    pub b: Tensor,
    /// [groups]
    pub gamma: Tensor,
}

impl RationalGroupParams {
    /// Default orders m = 5, n = 4, initialized from a least-squares fit of
    /// SiLU computed once per process.
    pub fn silu_init(groups: usize) -> RationalGroupParams {
        let (a0, b0) = silu_fit_coefficients();
        RationalGroupParams::from_coeffs(groups, a0, b0)
    }

    /// Exact identity: P(x) = x, Q(x) = 1, gamma = 1.
    pub fn identity(groups: usize, m: usize, n: usize) -> RationalGroupParams {
        let mut a = vec![0.0; m + 1];
        a[1] = 1.0;
        RationalGroupParams::from_coeffs(groups, a, vec![0.0; n])
    }

    pub fn from_coeffs(groups: usize, a: Vec<f64>, b: Vec<f64>) -> RationalGroupParams {
        let m = a.len() - 1;
        let n = b.len();
        RationalGroupParams {
            m,
            n,
            groups,
            a: Tensor::param(&[groups, m + 1], a.repeat(groups)),
            b: Tensor::param(&[groups, n], b.repeat(groups)),
            gamma: Tensor::param(&[groups], vec![1.0; groups]),
        }
    }
}

/// P, Q = 1 + |z|, and z by Horner evaluation.
fn rational_parts(x: f64, a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mut p = 0.0;
    for &ak in a.iter().rev() {
        p = p * x + ak;
    }
    let mut z = 0.0;
    for &bk in b.iter().rev() {
        z = z * x + bk;
    }
    z *= x; // b polynomial has no constant term
    (p, 1.0 + z.abs(), z)
}

/// Applies the group-rational activation along the last axis (channels).
pub fn grkan_forward(x: &Tensor, params: &RationalGroupParams) -> Tensor {
    let c = *x.shape().last().expect("grkan on rank-0 tensor");
    assert!(
        c % params.groups == 0,
        "grkan: {} channels not divisible by {} groups",
        c,
        params.groups
    );
    let per_group = c / params.groups;
    let (m, n, groups) = (params.m, params.n, params.groups);
    let rows = x.numel() / c;
    let xd = x.data();
    let ad = params.a.data();
    let bd = params.b.data();
    let gd = params.gamma.data();
    let mut out = vec![0.0; xd.len()];
    for r in 0..rows {
        for ch in 0..c {
            let g = ch / per_group;
            let xv = xd[r * c + ch];
            let (p, q, _) = rational_parts(
                xv,
                &ad[g * (m + 1)..(g + 1) * (m + 1)],
                &bd[g * n..(g + 1) * n],
            );
            out[r * c + ch] = gd[g] * p / q;
        }
    }
    drop(xd);
    drop(ad);
    drop(bd);
    drop(gd);
    let (xc, ac, bc, gc) = (
        x.clone(),
        params.a.clone(),
        params.b.clone(),
        params.gamma.clone(),
    );
    Tensor::from_op(
        "grkan",
        x.shape().to_vec(),
        out,
        vec![x.clone(), params.a.clone(), params.b.clone(), params.gamma.clone()],
        move |g, _| {
            let xd = xc.data();
            let ad = ac.data();
            let bd = bc.data();
            let gd = gc.data();
            let mut gx = vec![0.0; xd.len()];
            let mut ga = vec![0.0; groups * (m + 1)];
            let mut gb = vec![0.0; groups * n];
            let mut gg = vec![0.0; groups];
            for r in 0..rows {
                for ch in 0..c {
                    let grp = ch / per_group;
                    let idx = r * c + ch;
                    let gout = g[idx];
                    if gout == 0.0 {
                        continue;
                    }
                    let xv = xd[idx];
                    let av = &ad[grp * (m + 1)..(grp + 1) * (m + 1)];
                    let bv = &bd[grp * n..(grp + 1) * n];
                    let (p, q, z) = rational_parts(xv, av, bv);
                    let gamma = gd[grp];
                    // dP/dx and dz/dx by Horner on the derivative polynomials
                    let mut dp = 0.0;
                    for k in (1..=m).rev() {
                        dp = dp * xv + k as f64 * av[k];
                    }
                    let mut dz = 0.0;
                    for k in (1..=n).rev() {
                        dz = dz * xv + k as f64 * bv[k - 1];
                    }
                    let sgn = if z > 0.0 {
                        1.0
                    } else if z < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    gx[idx] = gout * gamma * (dp * q - p * sgn * dz) / (q * q);
                    gg[grp] += gout * p / q;
                    let mut xpow = 1.0;
                    for k in 0..=m {
                        ga[grp * (m + 1) + k] += gout * gamma * xpow / q;
                        if k < n {
                            gb[grp * n + k] +=
                                -gout * gamma * p / (q * q) * sgn * xpow * xv;
                        }
                        xpow *= xv;
                    }
                }
            }
            drop(xd);
            drop(ad);
            drop(bd);
            drop(gd);
            xc.accum_grad(&gx);
            ac.accum_grad(&ga);
            bc.accum_grad(&gb);
            gc.accum_grad(&gg);
        },
    )
}

/// Coefficients of the default m=5 / n=4 safe-Pade approximation of SiLU,
/// fitted by deterministic gradient descent over [-3, 3] once per process.
fn silu_fit_coefficients() -> (Vec<f64>, Vec<f64>) {
    static FIT: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    FIT.get_or_init(|| fit_rational_to(crate::ops::silu_scalar, 5, 4)).clone()
}

/// Least-squares fit of phi(x) = P(x)/(1+|z(x)|) to `target` on a fixed grid.
/// A linearized fit (P - y z = y, linear in all coefficients) seeds a short
/// Adam refinement of the true objective. Deterministic.
fn fit_rational_to(target: impl Fn(f64) -> f64, m: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let xs: Vec<f64> = (0..601).map(|i| -3.0 + i as f64 * 0.01).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| target(x)).collect();
    let (mut a, mut b) = linearized_rational_fit(&xs, &ys, m, n);
    let dim = m + 1 + n;
    let (mut mom, mut vel) = (vec![0.0; dim], vec![0.0; dim]);
    let (beta1, beta2, lr, eps) = (0.9, 0.999, 2e-3, 1e-8);
    for step in 1..=2000 {
        let mut grad = vec![0.0; dim];
        for (&x, &y) in xs.iter().zip(&ys) {
            let (p, q, z) = rational_parts(x, &a, &b);
            let err = p / q - y;
            let sgn = if z > 0.0 { 1.0 } else if z < 0.0 { -1.0 } else { 0.0 };
            let mut xpow = 1.0;
            for k in 0..=m {
                grad[k] += 2.0 * err * xpow / q;
                if k < n {
                    grad[m + 1 + k] += 2.0 * err * (-p / (q * q)) * sgn * xpow * x;
                }
                xpow *= x;
            }
        }
        let scale = 1.0 / xs.len() as f64;
        for (i, g) in grad.iter().enumerate() {
            let g = g * scale;
            mom[i] = beta1 * mom[i] + (1.0 - beta1) * g;
            vel[i] = beta2 * vel[i] + (1.0 - beta2) * g * g;
            let mhat = mom[i] / (1.0 - beta1.powi(step));
            let vhat = vel[i] / (1.0 - beta2.powi(step));
            let upd = lr * mhat / (vhat.sqrt() + eps);
            if i <= m {
                a[i] -= upd;
            } else {
                b[i - m - 1] -= upd;
            }
        }
    }
    (a, b)
}

/// Solves min_{a,b} sum_i (P(x_i) - y_i z(x_i) - y_i)^2 — the rational fit
/// with the residual multiplied through by the (abs-free) denominator, which
/// is linear in all coefficients — via its normal equations.
fn linearized_rational_fit(xs: &[f64], ys: &[f64], m: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let dim = m + 1 + n;
    // feature vector: [1, x, ..., x^m, -y x, ..., -y x^n]
    let mut ata = vec![0.0; dim * dim];
    let mut atb = vec![0.0; dim];
    let mut feat = vec![0.0; dim];
    for (&x, &y) in xs.iter().zip(ys) {
        let mut xpow = 1.0;
        for k in 0..=m {
            feat[k] = xpow;
            if k < n {
                feat[m + 1 + k] = -y * xpow * x;
            }
            xpow *= x;
        }
        for i in 0..dim {
            for j in 0..dim {
                ata[i * dim + j] += feat[i] * feat[j];
            }
            atb[i] += feat[i] * y;
        }
    }
    for i in 0..dim {
        ata[i * dim + i] += 1e-9; // ridge term keeps the solve well-posed
    }
    let sol = solve_dense(&mut ata, &mut atb, dim);
    (sol[..=m].to_vec(), sol[m + 1..].to_vec())
}

/// Gaussian elimination with partial pivoting; consumes its inputs.
fn solve_dense(a: &mut [f64], rhs: &mut [f64], dim: usize) -> Vec<f64> {
    for col in 0..dim {
        let piv = (col..dim)
            .max_by(|&i, &j| a[i * dim + col].abs().total_cmp(&a[j * dim + col].abs()))
            .unwrap();
        if piv != col {
            for j in 0..dim {
                a.swap(col * dim + j, piv * dim + j);
            }
            rhs.swap(col, piv);
        }
        let d = a[col * dim + col];
        assert!(d.abs() > 1e-300, "singular system in rational fit");
        for row in col + 1..dim {
            let f = a[row * dim + col] / d;
            if f == 0.0 {
                continue;
            }
            for j in col..dim {
                a[row * dim + j] -= f * a[col * dim + j];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; dim];
    for col in (0..dim).rev() {
        let mut v = rhs[col];
        for j in col + 1..dim {
            v -= a[col * dim + j] * x[j];
        }
        x[col] = v / a[col * dim + col];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck_wrt;
    use crate::ops;
    use rand::{Rng, SeedableRng};

    fn random_params(groups: usize, seed: u64) -> RationalGroupParams {
        let mut rng = crate::init::Prng::seed_from_u64(seed);
        let p = RationalGroupParams::silu_init(groups);
        let mut jitter = |t: &Tensor| {
            let d: Vec<f64> = t.to_vec().iter().map(|v| v + 0.3 * rng.gen::<f64>() - 0.15).collect();
            t.set_data(&d);
        };
        jitter(&p.a);
        jitter(&p.b);
        jitter(&p.gamma);
        p
    }

    #[test]
    fn origin_returns_gamma_a0() {
        let p = random_params(2, 1);
        let x = Tensor::zeros(&[2, 4]);
        let y = grkan_forward(&x, &p).to_vec();
        let a = p.a.to_vec();
        let g = p.gamma.to_vec();
        for ch in 0..4 {
            let grp = ch / 2;
            let want = g[grp] * a[grp * 6];
            assert!((y[ch] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_denominator_coeffs_give_pure_polynomial() {
        let p = random_params(1, 2);
        p.b.set_data(&vec![0.0; p.b.numel()]);
        let xv = 0.7;
        let y = grkan_forward(&Tensor::new(&[1], vec![xv]), &p).item();
        let a = p.a.to_vec();
        let want: f64 = p.gamma.item() * (0..=5).map(|k| a[k] * xv.powi(k as i32)).sum::<f64>();
        assert!((y - want).abs() < 1e-12);
    }

    #[test]
    fn matches_scalar_horner_oracle_and_denominator_floor() {
        let p = random_params(1, 3);
        let mut rng = crate::init::Prng::seed_from_u64(99);
        let xs: Vec<f64> = (0..16).map(|_| 4.0 * rng.gen::<f64>() - 2.0).collect();
        let y = grkan_forward(&Tensor::new(&[2, 8], xs.clone()), &p).to_vec();
        let a = p.a.to_vec();
        let b = p.b.to_vec();
        let g = p.gamma.item();
        for (i, &x) in xs.iter().enumerate() {
            let pnum: f64 = (0..=5).map(|k| a[k] * x.powi(k as i32)).sum();
            let z: f64 = (1..=4).map(|k| b[k - 1] * x.powi(k as i32)).sum();
            let want = g * pnum / (1.0 + z.abs());
            assert!((y[i] - want).abs() < 1e-10, "{} vs {want}", y[i]);
        }
        // denominator >= 1 at 1e5 random points in [-100, 100]
        for _ in 0..100_000 {
            let x = 200.0 * rng.gen::<f64>() - 100.0;
            let (_, q, _) = rational_parts(x, &a, &b);
            assert!(q >= 1.0);
        }
    }

    #[test]
    fn finite_for_large_inputs() {
        let p = random_params(1, 4);
        let y = grkan_forward(&Tensor::new(&[4], vec![-1e3, -10.0, 10.0, 1e3]), &p);
        assert!(y.to_vec().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn group_sharing_commutes_with_in_group_permutation() {
        let p = random_params(2, 5);
        let xs: Vec<f64> = (0..8).map(|i| 0.3 * i as f64 - 1.0).collect();
        let y = grkan_forward(&Tensor::new(&[8], xs.clone()), &p).to_vec();
        // swap channels 0 and 3 (same group of width 4)
        let mut xp = xs.clone();
        xp.swap(0, 3);
        let yp = grkan_forward(&Tensor::new(&[8], xp), &p).to_vec();
        assert_eq!(y[0], yp[3]);
        assert_eq!(y[3], yp[0]);
        assert_eq!(y[1], yp[1]);
    }

    #[test]
    #[should_panic(expected = "not divisible")]
    fn group_divisibility_enforced() {
        let p = random_params(3, 6);
        grkan_forward(&Tensor::zeros(&[4]), &p);
    }

    #[test]
    fn gradcheck_input_and_coefficients() {
        let p = random_params(2, 7);
        let x = Tensor::param(&[2, 4], vec![0.3, -0.8, 1.4, 0.1, -0.2, 0.9, -1.1, 0.6]);
        let f = {
            let x = x.clone();
            let p = RationalGroupParams {
                m: p.m,
                n: p.n,
                groups: p.groups,
                a: p.a.clone(),
                b: p.b.clone(),
                gamma: p.gamma.clone(),
            };
            move || ops::sum_all(&ops::mul(&grkan_forward(&x, &p), &grkan_forward(&x, &p)))
        };
        for (name, t) in [("x", &x), ("a", &p.a), ("b", &p.b), ("gamma", &p.gamma)] {
            let err = gradcheck_wrt(&f, t, 1e-4);
            assert!(err < 1e-5, "{name}: rel error {err}");
        }
    }

    #[test]
    fn silu_fit_is_close() {
        let p = RationalGroupParams::silu_init(1);
        let a = p.a.to_vec();
        let b = p.b.to_vec();
        let mut worst = 0.0_f64;
        for i in 0..300 {
            let x = -3.0 + 6.0 * i as f64 / 299.0;
            let (pn, q, _) = rational_parts(x, &a, &b);
            worst = worst.max((pn / q - crate::ops::silu_scalar(x)).abs());
        }
        assert!(worst < 0.05, "silu fit max error {worst}");
    }

    #[test]
    fn identity_coefficients_are_exact() {
        let p = RationalGroupParams::identity(1, 5, 4);
        let xs = vec![-2.0, -0.5, 0.0, 0.7, 3.0];
        let y = grkan_forward(&Tensor::new(&[5], xs.clone()), &p).to_vec();
        assert_eq!(y, xs);
    }
}
