//! Classification metrics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use num_traits::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    MacroF1,
    /// F1 of label id 1.
    BinaryF1,
    Matthews,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Accuracy => "accuracy",
            Self::MacroF1 => "macro_f1",
            Self::BinaryF1 => "binary_f1",
            Self::Matthews => "matthews",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(Self::Accuracy),
            "macro_f1" => Ok(Self::MacroF1),
            "binary_f1" => Ok(Self::BinaryF1),
            "matthews" => Ok(Self::Matthews),
            _ => Err(Error::Config(format!("unknown metric `{s}`"))),
        }
    }
}

/// `counts[gold][pred]`, sized to cover every label seen.
pub fn confusion_matrix(predictions: &[usize], golds: &[usize]) -> Vec<Vec<u64>> {
    let k = predictions
        .iter()
        .chain(golds)
        .max()
        .map_or(0, |m| m + 1)
        .max(2);
    let mut m = vec![vec![0u64; k]; k];
    for (&p, &g) in predictions.iter().zip(golds) {
        m[g][p] += 1;
    }
    m
}

fn f1(tp: f64, fp: f64, fn_: f64) -> f64 {
    let denom = 2.0 * tp + fp + fn_;
    if denom == 0.0 {
        0.0
    } else {
        2.0 * tp / denom
    }
}

fn class_f1(m: &[Vec<u64>], c: usize) -> f64 {
    let tp = m[c][c] as f64;
    let fp: f64 = (0..m.len()).filter(|&g| g != c).map(|g| m[g][c] as f64).sum();
    let fn_: f64 = (0..m.len()).filter(|&p| p != c).map(|p| m[c][p] as f64).sum();
    f1(tp, fp, fn_)
}

/// Multiclass Matthews correlation (Gorodkin's R_K); 0 when undefined.
fn matthews(m: &[Vec<u64>]) -> f64 {
    let k = m.len();
    let n: f64 = m.iter().flatten().map(|&v| v as f64).sum();
    let correct: f64 = (0..k).map(|i| m[i][i] as f64).sum();
    let pred: Vec<f64> = (0..k).map(|j| (0..k).map(|i| m[i][j] as f64).sum()).collect();
    let gold: Vec<f64> = (0..k).map(|i| m[i].iter().map(|&v| v as f64).sum()).collect();
    let cov_pg = correct * n - pred.iter().zip(&gold).map(|(p, g)| p * g).sum::<f64>();
    let cov_pp = n * n - pred.iter().map(|p| p * p).sum::<f64>();
    let cov_gg = n * n - gold.iter().map(|g| g * g).sum::<f64>();
    let denom = cov_pp * cov_gg;
    if denom <= 0.0 {
        0.0
    } else {
        cov_pg / Float::sqrt(denom)
    }
}

/// Scores `predictions` against `golds`.
///
/// Macro-F1 averages over every class id present in either list, so a class
/// that is never predicted contributes 0.
pub fn compute_metric(kind: MetricKind, predictions: &[usize], golds: &[usize]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    if golds.is_empty() {
        return Err(Error::Data("cannot score an empty prediction set".into()));
    }
    let m = confusion_matrix(predictions, golds);
    Ok(match kind {
        MetricKind::Accuracy => {
            let hits = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
            hits as f64 / golds.len() as f64
        }
        MetricKind::BinaryF1 => class_f1(&m, 1),
        MetricKind::MacroF1 => {
            let present: Vec<usize> = (0..m.len())
                .filter(|&c| predictions.contains(&c) || golds.contains(&c))
                .collect();
            present.iter().map(|&c| class_f1(&m, c)).sum::<f64>() / present.len() as f64
        }
        MetricKind::Matthews => matthews(&m),
    })
}

/// Mean and population standard deviation; the deviation is `None` for fewer
/// than two values.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    if values.is_empty() {
        return (f64::NAN, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, Some(Float::sqrt(var)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let g = [0, 1, 1, 0, 1];
        for kind in [MetricKind::Accuracy, MetricKind::MacroF1, MetricKind::BinaryF1, MetricKind::Matthews] {
            assert_eq!(compute_metric(kind, &g, &g).unwrap(), 1.0, "{kind}");
        }
    }

    #[test]
    fn constant_prediction_has_zero_mcc() {
        let g = [0, 1, 0, 1];
        assert_eq!(compute_metric(MetricKind::Matthews, &[1, 1, 1, 1], &g).unwrap(), 0.0);
        assert_eq!(compute_metric(MetricKind::Accuracy, &[1, 1, 1, 1], &g).unwrap(), 0.5);
    }

    #[test]
    fn mcc_closed_form() {
        // TP=4 FP=1 FN=2 TN=3
        let mut p = vec![];
        let mut g = vec![];
        for (pp, gg, n) in [(1, 1, 4), (1, 0, 1), (0, 1, 2), (0, 0, 3)] {
            for _ in 0..n {
                p.push(pp);
                g.push(gg);
            }
        }
        let expect = (4.0 * 3.0 - 1.0 * 2.0) / Float::sqrt(5.0 * 6.0 * 4.0 * 5.0);
        let got = compute_metric(MetricKind::Matthews, &p, &g).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 0.408).abs() < 1e-3);
        let f1 = compute_metric(MetricKind::BinaryF1, &p, &g).unwrap();
        assert!((f1 - 8.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn errors_and_names() {
        assert!(compute_metric(MetricKind::Accuracy, &[0], &[0, 1]).is_err());
        assert!(compute_metric(MetricKind::Accuracy, &[], &[]).is_err());
        for kind in [MetricKind::Accuracy, MetricKind::MacroF1, MetricKind::BinaryF1, MetricKind::Matthews] {
            assert_eq!(kind.name().parse::<MetricKind>().unwrap(), kind);
        }
        assert!("f2".parse::<MetricKind>().is_err());
    }

    #[test]
    fn mean_std_population() {
        assert_eq!(mean_std(&[0.5]), (0.5, None));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, Some(1.0));
    }
}
