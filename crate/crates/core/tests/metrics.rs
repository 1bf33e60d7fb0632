//! Metric implementations against direct formula evaluation.

use pcp_core::metrics::{compute_metric, confusion_matrix, mean_std, MetricKind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn counts(preds: &[usize], golds: &[usize], k: usize) -> (usize, Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut tp = vec![0; k];
    let mut p = vec![0; k];
    let mut t = vec![0; k];
    let mut correct = 0;
    for (&a, &b) in preds.iter().zip(golds) {
        p[a] += 1;
        t[b] += 1;
        if a == b {
            tp[a] += 1;
            correct += 1;
        }
    }
    (correct, tp, p, t)
}

fn f1(tp: usize, predicted: usize, actual: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / predicted as f64;
    let recall = tp as f64 / actual as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Gorodkin's K-category correlation written with label totals.
fn mcc_oracle(correct: usize, p: &[usize], t: &[usize]) -> f64 {
    let s = p.iter().sum::<usize>() as f64;
    let c = correct as f64;
    let pt: f64 = p.iter().zip(t).map(|(&a, &b)| a as f64 * b as f64).sum();
    let pp: f64 = p.iter().map(|&a| (a * a) as f64).sum();
    let tt: f64 = t.iter().map(|&b| (b * b) as f64).sum();
    let denom = (s * s - pp) * (s * s - tt);
    if denom <= 0.0 {
        0.0
    } else {
        (c * s - pt) / denom.sqrt()
    }
}

fn oracle(kind: MetricKind, preds: &[usize], golds: &[usize]) -> f64 {
    let k = preds.iter().chain(golds).max().unwrap() + 1;
    let (correct, tp, p, t) = counts(preds, golds, k.max(2));
    match kind {
        MetricKind::Accuracy => correct as f64 / golds.len() as f64,
        MetricKind::BinaryF1 => f1(tp[1], p[1], t[1]),
        MetricKind::MacroF1 => {
            let present: Vec<usize> = (0..k).filter(|&c| p[c] + t[c] > 0).collect();
            present.iter().map(|&c| f1(tp[c], p[c], t[c])).sum::<f64>() / present.len() as f64
        }
        MetricKind::Matthews => mcc_oracle(correct, &p, &t),
    }
}

const KINDS: [MetricKind; 4] = [MetricKind::Accuracy, MetricKind::MacroF1, MetricKind::BinaryF1, MetricKind::Matthews];

#[test]
fn thousand_random_confusions_agree_with_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..1000 {
        let k = rng.random_range(2..=4);
        let n = rng.random_range(1..=60);
        let skew = rng.random_range(0.0..1.0);
        let golds: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let preds: Vec<usize> = golds
            .iter()
            .map(|&g| if rng.random_bool(skew) { g } else { rng.random_range(0..k) })
            .collect();
        for kind in KINDS {
            let got = compute_metric(kind, &preds, &golds).unwrap();
            let want = oracle(kind, &preds, &golds);
            assert!((got - want).abs() < 1e-12, "case {case} {kind}: {got} vs {want}");
        }
    }
}

#[test]
fn binary_mcc_closed_form() {
    // TP=4 FP=1 FN=2 TN=3, positive class 1.
    let mut preds = vec![1; 4];
    let mut golds = vec![1; 4];
    preds.push(1);
    golds.push(0);
    preds.extend([0, 0]);
    golds.extend([1, 1]);
    preds.extend([0; 3]);
    golds.extend([0; 3]);
    let (tp, fp, fn_, tn) = (4.0f64, 1.0, 2.0, 3.0);
    let closed = (tp * tn - fp * fn_) / ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    let got = compute_metric(MetricKind::Matthews, &preds, &golds).unwrap();
    assert!((got - closed).abs() < 1e-12);
    assert!((got - 0.408).abs() < 1e-3);
}

#[test]
fn perfect_and_zero_marginal() {
    let golds = [0, 1, 1, 0, 2, 2];
    for kind in KINDS {
        assert_eq!(compute_metric(kind, &golds, &golds).unwrap(), 1.0, "{kind}");
    }
    let balanced = [0, 1, 0, 1];
    assert_eq!(compute_metric(MetricKind::Matthews, &[1; 4], &balanced).unwrap(), 0.0);
    assert_eq!(compute_metric(MetricKind::Matthews, &balanced, &[0; 4]).unwrap(), 0.0);
}

#[test]
fn length_mismatch_and_empty_fail() {
    assert!(compute_metric(MetricKind::Accuracy, &[0], &[0, 1]).is_err());
    assert!(compute_metric(MetricKind::Accuracy, &[], &[]).is_err());
}

proptest! {
    #[test]
    fn confusion_cells_sum_to_n(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..80)) {
        let (preds, golds): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = confusion_matrix(&preds, &golds);
        prop_assert_eq!(m.iter().flatten().sum::<u64>() as usize, preds.len());
        for kind in KINDS {
            let v = compute_metric(kind, &preds, &golds).unwrap();
            let lo = if kind == MetricKind::Matthews { -1.0 } else { 0.0 };
            prop_assert!(v >= lo - 1e-12 && v <= 1.0 + 1e-12, "{} = {}", kind, v);
        }
    }

    #[test]
    fn mean_std_matches_two_pass(values in prop::collection::vec(-100.0f64..100.0, 2..20)) {
        let (m, s) = mean_std(&values);
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        prop_assert!((m - mean).abs() < 1e-9);
        prop_assert!((s.unwrap() - var.sqrt()).abs() < 1e-9);
    }
}
