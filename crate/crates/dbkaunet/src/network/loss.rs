//! Composite segmentation loss: α·CE + (1−α)·Dice.

use crate::ops::{
    add, add_scalar, div, ln_clamped, mean_all, mul, neg, scale, sub, sum_all,
};
use crate::tensor::Tensor;

/// Log-argument clamp for the cross-entropy term.
pub const CE_CLAMP: f64 = 1e-7;
/// Dice smoothing constant.
pub const DICE_EPS: f64 = 1.0;

/// `prob` holds vessel-class probabilities, `target` a binary mask of the
/// same size. CE is the mean pixelwise binary cross-entropy with clamped log
/// arguments; Dice loss is 1 − (2·Σp·t + ε)/(Σp + Σt + ε).
pub fn composite_loss(prob: &Tensor, target: &Tensor, alpha: f64) -> Tensor {
    assert_eq!(
        prob.shape(),
        target.shape(),
        "composite_loss: shape mismatch {:?} vs {:?}",
        prob.shape(),
        target.shape()
    );
    assert!((0.0..=1.0).contains(&alpha), "composite_loss: alpha {alpha} outside [0,1]");
    assert!(
        target.data().iter().all(|&t| t == 0.0 || t == 1.0),
        "composite_loss: non-binary target"
    );
    let one_minus_p = add_scalar(&neg(prob), 1.0);
    let one_minus_t = add_scalar(&neg(target), 1.0);
    let ce_terms = add(
        &mul(target, &ln_clamped(prob, CE_CLAMP)),
        &mul(&one_minus_t, &ln_clamped(&one_minus_p, CE_CLAMP)),
    );
    let ce = neg(&mean_all(&ce_terms));
    let inter = sum_all(&mul(prob, target));
    let denom = add(&sum_all(prob), &sum_all(target));
    let dice = sub(
        &Tensor::scalar(1.0),
        &div(&add_scalar(&scale(&inter, 2.0), DICE_EPS), &add_scalar(&denom, DICE_EPS)),
    );
    add(&scale(&ce, alpha), &scale(&dice, 1.0 - alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck_wrt;

    #[test]
    fn hand_evaluated_case() {
        let p = Tensor::new(&[4], vec![0.5; 4]);
        let t = Tensor::new(&[4], vec![1.0, 1.0, 0.0, 0.0]);
        let total = composite_loss(&p, &t, 0.5).item();
        let want = 0.5 * (2.0f64).ln() + 0.2; // CE = ln 2, Dice = 0.4
        assert!((total - want).abs() < 1e-12, "{total} vs {want}");
    }

    #[test]
    fn alpha_endpoints_select_terms() {
        let p = Tensor::new(&[4], vec![0.5; 4]);
        let t = Tensor::new(&[4], vec![1.0, 1.0, 0.0, 0.0]);
        assert!((composite_loss(&p, &t, 1.0).item() - (2.0f64).ln()).abs() < 1e-12);
        assert!((composite_loss(&p, &t, 0.0).item() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn perfect_confident_prediction_is_near_zero() {
        let d = CE_CLAMP;
        let t = Tensor::new(&[6], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let p = Tensor::new(
            &[6],
            t.to_vec().iter().map(|&v| if v == 1.0 { 1.0 - d } else { d }).collect(),
        );
        assert!(composite_loss(&p, &t, 0.5).item() < 1e-5);
    }

    #[test]
    fn gradcheck_probabilities() {
        let p = Tensor::param(&[6], vec![0.3, 0.7, 0.55, 0.2, 0.9, 0.4]);
        let t = Tensor::new(&[6], vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
        let f = {
            let (p, t) = (p.clone(), t.clone());
            move || composite_loss(&p, &t, 0.5)
        };
        assert!(gradcheck_wrt(&f, &p, 1e-5) < 1e-5);
    }

    #[test]
    #[should_panic(expected = "non-binary target")]
    fn rejects_soft_targets() {
        let p = Tensor::new(&[2], vec![0.5, 0.5]);
        composite_loss(&p, &Tensor::new(&[2], vec![0.3, 1.0]), 0.5);
    }

    #[test]
    #[should_panic(expected = "alpha 1.5 outside")]
    fn rejects_bad_alpha() {
        let p = Tensor::new(&[1], vec![0.5]);
        composite_loss(&p, &Tensor::new(&[1], vec![1.0]), 1.5);
    }
}
