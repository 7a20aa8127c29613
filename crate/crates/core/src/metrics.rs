//! Regression and classification metrics for sentiment scores.

use serde::{Deserialize, Serialize};

use crate::data::LabelScale;
use crate::error::{Error, Result};

/// Zero-label handling for the binary metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Acc2Setting {
    /// Negative vs non-negative over all samples.
    NonNeg,
    /// Negative vs positive with zero labels dropped.
    Pos,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub corr: f64,
    pub acc2_nonneg: f64,
    /// `None` when every label is zero.
    pub acc2_pos: Option<f64>,
    /// One-scale labels only.
    pub acc3: Option<f64>,
    pub acc5: Option<f64>,
    /// Three-scale labels only.
    pub acc7: Option<f64>,
    pub f1_nonneg: f64,
    pub f1_pos: Option<f64>,
    #[serde(skip)]
    pub n_samples: usize,
    /// Set when either side had zero variance and `corr` was forced to 0.
    #[serde(skip)]
    pub corr_degenerate: bool,
}

fn check_lengths(preds: &[f64], labels: &[f64]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Contract("metrics need at least one sample".into()));
    }
    Ok(())
}

/// Mean absolute error, Pearson correlation and the zero-variance flag.
pub fn regression_metrics(preds: &[f64], labels: &[f64]) -> Result<(f64, f64, bool)> {
    check_lengths(preds, labels)?;
    let n = preds.len() as f64;
    let mae = preds.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / n;
    let (mp, my) = (preds.iter().sum::<f64>() / n, labels.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, y) in preds.iter().zip(labels) {
        let (dp, dy) = (p - mp, y - my);
        sxy += dp * dy;
        sxx += dp * dp;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        log::warn!("pearson correlation undefined for constant input; reporting 0");
        return Ok((mae, 0.0, true));
    }
    Ok((mae, (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0), false))
}

const NEUTRAL_BAND: f64 = 1e-8;

/// Lower edges of the upper four of five equal-width bins on [-1, 1].
const ONE_SCALE_EDGES: [f64; 4] = [-0.6, -0.2, 0.2, 0.6];

/// Bin index of a score for the given class count and label scale.
pub fn class_bin(v: f64, n_classes: usize, scale: LabelScale) -> Result<i64> {
    match (scale, n_classes) {
        (LabelScale::Three, 7) => Ok(v.clamp(-3.0, 3.0).round_ties_even() as i64),
        (LabelScale::Three, 5) => Ok(v.clamp(-2.0, 2.0).round_ties_even() as i64),
        (LabelScale::One, 3) => Ok(if v < -NEUTRAL_BAND {
            0
        } else if v <= NEUTRAL_BAND {
            1
        } else {
            2
        }),
        (LabelScale::One, 5) => Ok(ONE_SCALE_EDGES.iter().filter(|&&e| v >= e).count() as i64),
        _ => Err(Error::Config(format!(
            "no {n_classes}-class binning defined for the {scale:?} scale"
        ))),
    }
}

pub fn class_accuracy(preds: &[f64], labels: &[f64], n_classes: usize, scale: LabelScale) -> Result<f64> {
    check_lengths(preds, labels)?;
    let mut hits = 0usize;
    for (&p, &y) in preds.iter().zip(labels) {
        if class_bin(p, n_classes, scale)? == class_bin(y, n_classes, scale)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / preds.len() as f64)
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Binary accuracy and support-weighted F1. Predictions of exactly 0 count as non-negative.
pub fn acc2_f1(preds: &[f64], labels: &[f64], setting: Acc2Setting) -> Result<(f64, f64)> {
    check_lengths(preds, labels)?;
    // Confusion counts indexed [label][pred], class 1 = non-negative / positive.
    let mut cm = [[0usize; 2]; 2];
    for (&p, &y) in preds.iter().zip(labels) {
        if setting == Acc2Setting::Pos && y == 0.0 {
            continue;
        }
        cm[usize::from(y >= 0.0)][usize::from(p >= 0.0)] += 1;
    }
    let n = cm[0][0] + cm[0][1] + cm[1][0] + cm[1][1];
    if n == 0 {
        return Err(Error::Data("no non-zero labels for the negative/positive setting".into()));
    }
    let acc = (cm[0][0] + cm[1][1]) as f64 / n as f64;
    let mut wf1 = 0.0;
    for c in 0..2 {
        let o = 1 - c;
        let support = cm[c][0] + cm[c][1];
        wf1 += support as f64 / n as f64 * f1(cm[c][c], cm[o][c], cm[c][o]);
    }
    Ok((acc, wf1))
}

/// The full metric suite for one set of predictions.
pub fn evaluate_predictions(preds: &[f64], labels: &[f64], scale: LabelScale) -> Result<MetricReport> {
    let (mae, corr, corr_degenerate) = regression_metrics(preds, labels)?;
    let (acc2_nonneg, f1_nonneg) = acc2_f1(preds, labels, Acc2Setting::NonNeg)?;
    let pos = match acc2_f1(preds, labels, Acc2Setting::Pos) {
        Ok(v) => Some(v),
        Err(Error::Data(_)) => None,
        Err(e) => return Err(e),
    };
    let acc = |k| class_accuracy(preds, labels, k, scale).map(Some);
    let (acc3, acc5, acc7) = match scale {
        LabelScale::Three => (None, acc(5)?, acc(7)?),
        LabelScale::One => (acc(3)?, acc(5)?, None),
    };
    Ok(MetricReport {
        mae,
        corr,
        acc2_nonneg,
        acc2_pos: pos.map(|p| p.0),
        acc3,
        acc5,
        acc7,
        f1_nonneg,
        f1_pos: pos.map(|p| p.1),
        n_samples: preds.len(),
        corr_degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn identical_and_mirrored_vectors() {
        let x = [0.5, -1.0, 2.0, 0.1];
        assert_eq!(regression_metrics(&x, &x).unwrap(), (0.0, 1.0, false));
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let (_, r, _) = regression_metrics(&x, &neg).unwrap();
        assert_abs_diff_eq!(r, -1.0, epsilon = 1e-15);
    }

    #[test]
    fn constant_input_sets_the_degenerate_flag() {
        let (_, r, flag) = regression_metrics(&[1.0, 1.0], &[0.0, 2.0]).unwrap();
        assert_eq!((r, flag), (0.0, true));
    }

    #[test]
    fn length_errors() {
        assert!(regression_metrics(&[1.0], &[1.0, 2.0]).is_err());
        assert!(regression_metrics(&[], &[]).is_err());
    }

    #[test]
    fn manual_binning_examples() {
        assert_eq!(class_bin(1.2, 7, LabelScale::Three).unwrap(), 1);
        assert_eq!(class_bin(1.4, 7, LabelScale::Three).unwrap(), 1);
        assert_eq!(class_accuracy(&[1.2], &[1.4], 7, LabelScale::Three).unwrap(), 1.0);
        assert_eq!(class_bin(2.6, 7, LabelScale::Three).unwrap(), 3);
        assert_eq!(class_bin(2.6, 5, LabelScale::Three).unwrap(), 2);
        assert_eq!(class_bin(-9.0, 7, LabelScale::Three).unwrap(), -3);
        assert_eq!(class_bin(0.0, 3, LabelScale::One).unwrap(), 1);
        assert_eq!(class_bin(1e-9, 3, LabelScale::One).unwrap(), 1);
        assert_eq!(class_bin(0.01, 3, LabelScale::One).unwrap(), 2);
        assert_eq!(class_bin(1.0, 5, LabelScale::One).unwrap(), 4);
        assert_eq!(class_bin(-1.0, 5, LabelScale::One).unwrap(), 0);
        assert_eq!(class_bin(0.0, 5, LabelScale::One).unwrap(), 2);
        assert_eq!(class_bin(0.2, 5, LabelScale::One).unwrap(), 3);
        assert_eq!(class_bin(-0.2, 5, LabelScale::One).unwrap(), 2);
        assert_eq!(class_bin(0.19, 5, LabelScale::One).unwrap(), 2);
        assert!(matches!(class_bin(0.0, 7, LabelScale::One), Err(Error::Config(_))));
        assert!(matches!(class_bin(0.0, 3, LabelScale::Three), Err(Error::Config(_))));
    }

    #[test]
    fn zero_inclusive_and_exclusive_fixture() {
        let v = [-1.0, 0.0, 1.0];
        assert_eq!(acc2_f1(&v, &v, Acc2Setting::NonNeg).unwrap(), (1.0, 1.0));
        assert_eq!(acc2_f1(&v, &v, Acc2Setting::Pos).unwrap(), (1.0, 1.0));
        // The zero label is dropped: a wrong sign on it changes only the inclusive setting.
        let p = [-1.0, -0.5, 1.0];
        let (acc, _) = acc2_f1(&p, &v, Acc2Setting::NonNeg).unwrap();
        assert_abs_diff_eq!(acc, 2.0 / 3.0);
        assert_eq!(acc2_f1(&p, &v, Acc2Setting::Pos).unwrap().0, 1.0);
    }

    #[test]
    fn single_class_predictions_on_balanced_labels() {
        let labels = [-1.0, -2.0, 1.0, 2.0];
        let preds = [1.0; 4];
        let (acc, f1w) = acc2_f1(&preds, &labels, Acc2Setting::NonNeg).unwrap();
        assert_eq!(acc, 0.5);
        assert_abs_diff_eq!(f1w, 0.5 * (2.0 / 3.0), epsilon = 1e-15);
    }

    #[test]
    fn all_zero_labels_leave_pos_setting_undefined() {
        assert!(acc2_f1(&[1.0, -1.0], &[0.0, 0.0], Acc2Setting::Pos).is_err());
        let r = evaluate_predictions(&[1.0, -1.0], &[0.0, 0.0], LabelScale::Three).unwrap();
        assert_eq!((r.acc2_pos, r.f1_pos), (None, None));
    }

    #[test]
    fn report_json_has_fixed_keys() {
        let r = evaluate_predictions(&[0.5, -1.0, 2.0], &[0.4, -1.2, 2.5], LabelScale::Three).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(
            keys,
            ["acc2_nonneg", "acc2_pos", "acc3", "acc5", "acc7", "corr", "f1_nonneg", "f1_pos", "mae"]
        );
        assert!(v["acc3"].is_null() && v["acc7"].is_number());
        let one = evaluate_predictions(&[0.5, -0.1], &[0.4, -0.2], LabelScale::One).unwrap();
        assert!(one.acc3.is_some() && one.acc5.is_some() && one.acc7.is_none());
    }

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let y = [-2.2, -0.3, 0.0, 0.7, 1.4, 3.0];
        let r = evaluate_predictions(&y, &y, LabelScale::Three).unwrap();
        assert_eq!(r.mae, 0.0);
        assert_abs_diff_eq!(r.corr, 1.0, epsilon = 1e-12);
        for v in [r.acc2_nonneg, r.f1_nonneg, r.acc2_pos.unwrap(), r.f1_pos.unwrap(), r.acc5.unwrap(), r.acc7.unwrap()] {
            assert_eq!(v, 1.0);
        }
    }

    proptest! {
        #[test]
        fn binning_is_monotone(a in -4.0f64..4.0, b in -4.0f64..4.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            for (k, s) in [(7, LabelScale::Three), (5, LabelScale::Three)] {
                prop_assert!(class_bin(lo, k, s).unwrap() <= class_bin(hi, k, s).unwrap());
            }
            let (lo1, hi1) = (lo / 3.0, hi / 3.0);
            for k in [3, 5] {
                prop_assert!(class_bin(lo1, k, LabelScale::One).unwrap() <= class_bin(hi1, k, LabelScale::One).unwrap());
            }
        }

        #[test]
        fn metrics_are_permutation_invariant(pairs in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 2..30), rot in 0usize..30) {
            let (p, y): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let k = rot % p.len();
            let (mut p2, mut y2) = (p.clone(), y.clone());
            p2.rotate_left(k);
            y2.rotate_left(k);
            let a = evaluate_predictions(&p, &y, LabelScale::Three).unwrap();
            let b = evaluate_predictions(&p2, &y2, LabelScale::Three).unwrap();
            prop_assert!((a.mae - b.mae).abs() < 1e-12 && (a.corr - b.corr).abs() < 1e-12);
            prop_assert_eq!((a.acc2_nonneg, a.acc7, a.f1_nonneg, a.f1_pos), (b.acc2_nonneg, b.acc7, b.f1_nonneg, b.f1_pos));
        }
    }
}
