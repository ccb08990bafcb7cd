//! B-spline basis evaluation on a shared uniform knot grid.
//!
//! The basis is evaluated by the Cox-de Boor recursion on a uniform grid
//! extended by `degree` knot spans on each side, which yields
//! `intervals + degree` basis functions forming a partition of unity on
//! `[grid_min, grid_max]`. Inputs outside the grid are clamped to the
//! boundary (no extrapolation), with zero spline gradient past the clamp.

/// Shared knot grid for every edge of one KAN layer.
#[derive(Debug, Clone)]
pub struct SplineGrid {
    knots: Vec<f64>,
    pub degree: usize,
    pub n_basis: usize,
    pub grid_min: f64,
    pub grid_max: f64,
    pub intervals: usize,
}

impl SplineGrid {
    pub fn uniform(intervals: usize, degree: usize, grid_min: f64, grid_max: f64) -> SplineGrid {
        assert!(intervals >= 1, "spline grid needs at least one interval");
        assert!(grid_max > grid_min, "spline grid bounds must be increasing");
        let h = (grid_max - grid_min) / intervals as f64;
        let n_knots = intervals + 2 * degree + 1;
        let knots: Vec<f64> = (0..n_knots)
            .map(|i| grid_min + (i as f64 - degree as f64) * h)
            .collect();
        debug_assert!(knots.windows(2).all(|w| w[1] > w[0]));
        SplineGrid {
            knots,
            degree,
            n_basis: intervals + degree,
            grid_min,
            grid_max,
            intervals,
        }
    }

    /// Defaults used throughout the network: cubic, 5 intervals on [-2, 2],
    /// giving 8 basis functions.
    pub fn default_kan() -> SplineGrid {
        SplineGrid::uniform(5, 3, -2.0, 2.0)
    }

    fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.grid_min, self.grid_max)
    }

    /// All basis values at `x` (clamped to the grid).
    pub fn basis(&self, x: f64) -> Vec<f64> {
        let mut b = vec![0.0; self.n_basis];
        self.basis_into(x, &mut b);
        b
    }

    /// Cox-de Boor table evaluation into a caller-provided buffer.
    pub fn basis_into(&self, x: f64, out: &mut [f64]) {
        let mut deriv = [0.0; 0];
        self.eval(x, out, &mut deriv, false);
    }

    /// Basis values and their derivatives with respect to x. The derivative
    /// is zero for inputs past the clamped boundary.
    pub fn basis_and_deriv(&self, x: f64, basis: &mut [f64], deriv: &mut [f64]) {
        self.eval(x, basis, deriv, true);
        if x < self.grid_min || x > self.grid_max {
            deriv.iter_mut().for_each(|d| *d = 0.0);
        }
    }

    fn eval(&self, x: f64, basis: &mut [f64], deriv: &mut [f64], want_deriv: bool) {
        let p = self.degree;
        let t = &self.knots;
        let xc = self.clamp(x);
        let n_seg = t.len() - 1;
        // degree-0 indicators; the last interior interval is closed on the right
        let mut work = vec![0.0; n_seg];
        let top = self.degree + self.intervals; // index of the right boundary knot
        for (i, w) in work.iter_mut().enumerate() {
            let in_seg = if i + 1 == top {
                t[i] <= xc && xc <= t[i + 1]
            } else {
                // spans past the right boundary knot stay zero even when
                // xc == t[top], which already belongs to the closed span
                i < top && t[i] <= xc && xc < t[i + 1]
            };
            *w = if in_seg { 1.0 } else { 0.0 };
        }
        let mut prev = work.clone();
        for k in 1..=p {
            if want_deriv && k == p {
                let n = prev.len();
                prev.copy_from_slice(&work[..n]);
            }
            for i in 0..n_seg - k {
                let left = if t[i + k] > t[i] {
                    (xc - t[i]) / (t[i + k] - t[i]) * work[i]
                } else {
                    0.0
                };
                let right = if t[i + k + 1] > t[i + 1] {
                    (t[i + k + 1] - xc) / (t[i + k + 1] - t[i + 1]) * work[i + 1]
                } else {
                    0.0
                };
                work[i] = left + right;
            }
        }
        basis.copy_from_slice(&work[..self.n_basis]);
        if want_deriv {
            // B'_{i,p}(x) = p [ B_{i,p-1}/(t_{i+p}-t_i) - B_{i+1,p-1}/(t_{i+p+1}-t_{i+1}) ]
            if p == 0 {
                deriv.iter_mut().for_each(|d| *d = 0.0);
                return;
            }
            for i in 0..self.n_basis {
                let a = if t[i + p] > t[i] {
                    prev[i] / (t[i + p] - t[i])
                } else {
                    0.0
                };
                let b = if t[i + p + 1] > t[i + 1] {
                    prev[i + 1] / (t[i + p + 1] - t[i + 1])
                } else {
                    0.0
                };
                deriv[i] = p as f64 * (a - b);
            }
        }
    }
}
