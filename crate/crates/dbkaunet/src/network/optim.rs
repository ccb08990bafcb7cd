//! AdamW with decoupled weight decay, cosine learning-rate annealing, and
//! global-norm gradient clipping.

use crate::tensor::Tensor;

/// lr(step) = lr0 · ½(1 + cos(π · step/total)); lr(0) = lr0, lr(total) = 0.
pub fn cosine_lr(lr0: f64, step: usize, total_steps: usize) -> f64 {
    let t = (step as f64 / total_steps.max(1) as f64).min(1.0);
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

pub fn global_grad_norm(params: &[Tensor]) -> f64 {
    let mut sq = 0.0;
    for p in params {
        if let Some(g) = p.grad() {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    sq.sqrt()
}

/// Scales all gradients so their global norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm(params: &[Tensor], max_norm: f64) -> f64 {
    let norm = global_grad_norm(params);
    if norm > max_norm {
        let f = max_norm / norm;
        for p in params {
            p.scale_grad(f);
        }
    }
    norm
}

pub struct AdamW {
    pub lr0: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    pub step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// first/second moments, one slot per parameter in registration order
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr0: f64, weight_decay: f64, total_steps: usize) -> AdamW {
        AdamW {
            lr0,
            weight_decay,
            total_steps,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over `params` from their accumulated gradients; gradients
    /// are consumed (zeroed). Decay is decoupled: applied to the data
    /// directly, not through the moments.
    pub fn update(&mut self, params: &[Tensor]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        assert_eq!(self.m.len(), params.len(), "optimizer state does not match parameter list");
        let lr = cosine_lr(self.lr0, self.step, self.total_steps);
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter().enumerate() {
            let g = match p.grad() {
                Some(g) => g,
                None => continue,
            };
            let mut data = p.to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                data[j] -= update + lr * self.weight_decay * data[j];
            }
            p.set_data(&data);
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{mul, sub};

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(5e-4, 0, 1000), 5e-4);
        assert!(cosine_lr(5e-4, 1000, 1000).abs() < 1e-18);
        assert!((cosine_lr(5e-4, 500, 1000) - 2.5e-4).abs() < 1e-12);
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let p = Tensor::param(&[2], vec![0.0, 0.0]);
        p.accum_grad(&[30.0, 40.0]); // norm 50
        let pre = clip_global_norm(&[p.clone()], 5.0);
        assert_eq!(pre, 50.0);
        let post = global_grad_norm(&[p]);
        assert!((post - 5.0).abs() < 1e-9);
    }

    #[test]
    fn small_gradients_are_left_alone() {
        let p = Tensor::param(&[1], vec![0.0]);
        p.accum_grad(&[2.0]);
        clip_global_norm(&[p.clone()], 5.0);
        assert_eq!(p.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn adamw_converges_on_a_quadratic() {
        let x = Tensor::param(&[1], vec![3.0]);
        let mut opt = AdamW::new(0.1, 0.0, usize::MAX);
        for _ in 0..200 {
            let d = sub(&x, &Tensor::scalar(2.0));
            mul(&d, &d).backward();
            opt.update(&[x.clone()]);
        }
        assert!((x.item() - 2.0).abs() < 1e-2, "x ended at {}", x.item());
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let x = Tensor::param(&[1], vec![1.0]);
        x.accum_grad(&[0.0]);
        let mut opt = AdamW::new(0.5, 0.1, usize::MAX);
        opt.update(&[x.clone()]);
        // zero gradient: the only change is the decay term lr·wd·x
        assert!((x.item() - (1.0 - 0.5 * 0.1)).abs() < 1e-12);
    }
}
