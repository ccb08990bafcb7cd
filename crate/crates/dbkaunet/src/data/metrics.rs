//! FOV-masked segmentation metrics: confusion counts, SE/SP/ACC/F1 and
//! trapezoidal ROC AUC.

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub auc: f64,
    pub f1: f64,
    pub se: f64,
    pub sp: f64,
    pub acc: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

/// Trapezoidal area under the ROC curve traced over every distinct score
/// threshold. Pairs are (score, positive?). When one class is absent the
/// curve is degenerate and 1.0 is returned (no ranking errors observable).
fn roc_auc(pairs: &mut [(f64, bool)]) -> f64 {
    let p: u64 = pairs.iter().filter(|x| x.1).count() as u64;
    let n = pairs.len() as u64 - p;
    if p == 0 || n == 0 {
        return 1.0;
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let (mut auc, mut tp, mut fp) = (0.0f64, 0u64, 0u64);
    let (mut prev_tpr, mut prev_fpr) = (0.0f64, 0.0f64);
    let mut i = 0;
    while i < pairs.len() {
        // consume the whole tie group at this score
        let s = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == s {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tpr = tp as f64 / p as f64;
        let fpr = fp as f64 / n as f64;
        auc += 0.5 * (fpr - prev_fpr) * (tpr + prev_tpr);
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    auc
}

/// Confusion counts and derived metrics at `threshold`, over FOV pixels only.
pub fn compute_metrics(
    prob_map: &Tensor,
    vessel_mask: &Tensor,
    fov_mask: &Tensor,
    threshold: f64,
) -> MetricsReport {
    let n = prob_map.numel();
    assert_eq!(vessel_mask.numel(), n, "compute_metrics: vessel mask size mismatch");
    assert_eq!(fov_mask.numel(), n, "compute_metrics: fov mask size mismatch");
    let pd = prob_map.data();
    let vd = vessel_mask.data();
    let fd = fov_mask.data();

    let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    let mut pairs = Vec::new();
    for i in 0..n {
        if fd[i] == 0.0 {
            continue;
        }
        let truth = vd[i] == 1.0;
        let pred = pd[i] >= threshold;
        match (pred, truth) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
        pairs.push((pd[i], truth));
    }
    assert!(!pairs.is_empty(), "compute_metrics: empty FOV mask");

    let total = (tp + fp + tn + fn_) as f64;
    let div = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    MetricsReport {
        auc: roc_auc(&mut pairs),
        f1: div(2 * tp, 2 * tp + fp + fn_),
        se: div(tp, tp + fn_),
        sp: div(tn, tn + fp),
        acc: (tp + tn) as f64 / total,
        tp,
        fp,
        tn,
        fn_,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::Prng;
    use rand::{Rng, SeedableRng};

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor {
        Tensor::new(shape, v)
    }

    fn identities_hold(r: &MetricsReport) {
        let (tp, fp, tn, fn_) = (r.tp as f64, r.fp as f64, r.tn as f64, r.fn_ as f64);
        assert!((r.acc - (tp + tn) / (tp + fp + tn + fn_)).abs() < 1e-12);
        if tp + fn_ > 0.0 {
            assert!((r.se - tp / (tp + fn_)).abs() < 1e-12);
        }
        if tn + fp > 0.0 {
            assert!((r.sp - tn / (tn + fp)).abs() < 1e-12);
        }
        if 2.0 * tp + fp + fn_ > 0.0 {
            assert!((r.f1 - 2.0 * tp / (2.0 * tp + fp + fn_)).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let mask = t(&[2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let fov = Tensor::full(&[2, 3], 1.0);
        let r = compute_metrics(&mask, &mask, &fov, 0.5);
        assert_eq!((r.se, r.sp, r.acc, r.f1, r.auc), (1.0, 1.0, 1.0, 1.0, 1.0));
        identities_hold(&r);
    }

    #[test]
    fn all_zero_prediction_on_vessels() {
        let prob = Tensor::zeros(&[2, 2]);
        let mask = t(&[2, 2], vec![1.0, 1.0, 0.0, 0.0]);
        let fov = Tensor::full(&[2, 2], 1.0);
        let r = compute_metrics(&prob, &mask, &fov, 0.5);
        assert_eq!(r.se, 0.0);
        assert_eq!(r.sp, 1.0);
        assert_eq!(r.f1, 0.0);
        identities_hold(&r);
    }

    #[test]
    fn hand_case_four_pixels() {
        // scores [0.9,0.6,0.4,0.1], labels [1,0,1,0]: one inversion among the
        // four positive-negative pairs -> AUC 0.75; at 0.5: TP=FP=FN=TN=1
        let prob = t(&[1, 4], vec![0.9, 0.6, 0.4, 0.1]);
        let mask = t(&[1, 4], vec![1.0, 0.0, 1.0, 0.0]);
        let fov = Tensor::full(&[1, 4], 1.0);
        let r = compute_metrics(&prob, &mask, &fov, 0.5);
        assert_eq!((r.tp, r.fp, r.fn_, r.tn), (1, 1, 1, 1));
        for v in [r.se, r.sp, r.acc, r.f1] {
            assert!((v - 0.5).abs() < 1e-12);
        }
        assert!((r.auc - 0.75).abs() < 1e-12);
        identities_hold(&r);
    }

    #[test]
    fn fov_excludes_outside_pixels() {
        // outside-FOV pixels would be wrong; they must not count
        let prob = t(&[1, 4], vec![1.0, 0.0, 1.0, 1.0]);
        let mask = t(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]);
        let fov = t(&[1, 4], vec![1.0, 1.0, 0.0, 0.0]);
        let r = compute_metrics(&prob, &mask, &fov, 0.5);
        assert_eq!((r.tp, r.fp, r.fn_, r.tn), (1, 0, 0, 1));
        assert_eq!(r.acc, 1.0);
    }

    #[test]
    fn auc_is_invariant_under_monotone_transforms() {
        let mut rng = Prng::seed_from_u64(11);
        let n = 400;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let labels: Vec<f64> =
            (0..n).map(|_| if rng.gen::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect();
        let fov = Tensor::full(&[n], 1.0);
        let mask = t(&[n], labels);
        let base = compute_metrics(&t(&[n], scores.clone()), &mask, &fov, 0.5).auc;
        for transform in [
            (|s: f64| s * s) as fn(f64) -> f64,
            |s| s.sqrt(),
            |s| 1.0 / (1.0 + (-5.0 * s).exp()),
            |s| 3.0 * s + 7.0,
        ] {
            let ts: Vec<f64> = scores.iter().map(|&s| transform(s)).collect();
            let auc = compute_metrics(&t(&[n], ts), &mask, &fov, 0.5).auc;
            assert!((auc - base).abs() < 1e-12, "transform changed AUC: {auc} vs {base}");
        }
    }

    #[test]
    fn thresholds_are_monotone_in_se_and_sp() {
        let mut rng = Prng::seed_from_u64(13);
        for _ in 0..100 {
            let n = 50;
            let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let labels: Vec<f64> =
                (0..n).map(|_| if rng.gen::<f64>() < 0.4 { 1.0 } else { 0.0 }).collect();
            if !labels.contains(&1.0) || !labels.contains(&0.0) {
                continue;
            }
            let prob = t(&[n], scores);
            let mask = t(&[n], labels);
            let fov = Tensor::full(&[n], 1.0);
            let mut prev: Option<MetricsReport> = None;
            for k in 0..=10 {
                let r = compute_metrics(&prob, &mask, &fov, k as f64 / 10.0);
                identities_hold(&r);
                if let Some(p) = prev {
                    assert!(r.se <= p.se + 1e-12, "SE rose with threshold");
                    assert!(r.sp >= p.sp - 1e-12, "SP fell with threshold");
                }
                prev = Some(r);
            }
        }
    }

    #[test]
    #[should_panic(expected = "empty FOV")]
    fn rejects_empty_fov() {
        let z = Tensor::zeros(&[2, 2]);
        compute_metrics(&z, &z, &z, 0.5);
    }
}
