//! Confusion counts, the five agreement metrics, and ROC AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Pred and ground truth exchanged.
    pub fn transposed(&self) -> Self {
        ConfusionCounts {
            tp: self.tp,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tn,
        }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

/// Precision, recall, overall accuracy, F1, Cohen's kappa and the
/// chance agreement it is corrected for. `degenerate` is set when any
/// ratio had a zero denominator and was reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pre: f64,
    pub rec: f64,
    pub oa: f64,
    pub f1: f64,
    pub kappa: f64,
    pub pe: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub degenerate: bool,
}

impl MetricReport {
    pub fn counts(&self) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
            tn: self.tn,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric report serializes")
    }
}

fn check_mask(m: &Raster, what: &str) -> Result<()> {
    if !m.is_binary_mask() {
        return Err(Error::Data(format!("{what} is not a uint8 mask with values in {{0, 1}}")));
    }
    Ok(())
}

/// Per-pixel tally with 1 = changed, 0 = unchanged.
pub fn confusion_counts(pred: &Raster, gt: &Raster) -> Result<ConfusionCounts> {
    if !pred.same_size(gt) || pred.bands() != gt.bands() {
        return Err(Error::Contract(format!(
            "prediction is {}x{}x{}, ground truth is {}x{}x{}",
            pred.width(),
            pred.height(),
            pred.bands(),
            gt.width(),
            gt.height(),
            gt.bands()
        )));
    }
    check_mask(pred, "prediction")?;
    check_mask(gt, "ground truth")?;
    let mut table = [0u64; 4];
    for (&p, &g) in pred.as_u8()?.iter().zip(gt.as_u8()?) {
        table[(p * 2 + g) as usize] += 1;
    }
    Ok(ConfusionCounts {
        tn: table[0],
        fn_: table[1],
        fp: table[2],
        tp: table[3],
    })
}

pub fn compute_metrics(c: &ConfusionCounts) -> Result<MetricReport> {
    let total = c.total();
    if total == 0 {
        return Err(Error::Contract("metrics of an empty confusion table".into()));
    }
    let mut degenerate = false;
    let mut ratio = |num: f64, den: f64| {
        if den == 0.0 {
            degenerate = true;
            0.0
        } else {
            num / den
        }
    };
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let n = total as f64;
    let pre = ratio(tp, tp + fp);
    let rec = ratio(tp, tp + fn_);
    let f1 = ratio(2.0 * pre * rec, pre + rec);
    let oa = (tp + tn) / n;
    let pe = ((tp + fp) * (tp + fn_) + (fn_ + tn) * (fp + tn)) / (n * n);
    let kappa = ratio(oa - pe, 1.0 - pe);
    Ok(MetricReport {
        pre,
        rec,
        oa,
        f1,
        kappa,
        pe,
        tp: c.tp,
        fp: c.fp,
        fn_: c.fn_,
        tn: c.tn,
        degenerate,
    })
}

/// Area under the ROC curve of `scores` against binary `labels`, by the
/// trapezoidal rule over every distinct score threshold.
pub fn roc_auc(scores: &[f32], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Data("labels must be 0 or 1".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::Degenerate("AUC needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0.0f64, 0.0f64);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        area += (fp - fp0) * (tp + tp0) / 2.0;
    }
    Ok(area / (pos * neg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    #[test]
    fn perfect_prediction() {
        let m = compute_metrics(&counts(1, 0, 0, 1)).unwrap();
        assert_eq!((m.pre, m.rec, m.f1, m.oa, m.kappa), (1.0, 1.0, 1.0, 1.0, 1.0));
        assert!(!m.degenerate);
    }

    #[test]
    fn chance_case() {
        let m = compute_metrics(&counts(25, 25, 25, 25)).unwrap();
        assert_eq!((m.pre, m.rec, m.oa, m.pe, m.kappa), (0.5, 0.5, 0.5, 0.5, 0.0));
    }

    #[test]
    fn hand_computed_case() {
        let m = compute_metrics(&counts(2, 1, 2, 5)).unwrap();
        assert!((m.pre - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.rec, 0.5);
        assert!((m.oa - 0.7).abs() < 1e-15);
        assert!((m.f1 - 4.0 / 7.0).abs() < 1e-15);
        assert!((m.pe - 0.54).abs() < 1e-15);
        assert!((m.kappa - 0.16 / 0.46).abs() < 1e-12);
    }

    #[test]
    fn degenerate_cases_flagged() {
        let m = compute_metrics(&counts(0, 0, 3, 7)).unwrap();
        assert_eq!((m.pre, m.f1), (0.0, 0.0));
        assert!(m.degenerate);
        let all_neg = compute_metrics(&counts(0, 0, 0, 9)).unwrap();
        assert_eq!((all_neg.pe, all_neg.kappa), (1.0, 0.0));
        assert!(all_neg.degenerate);
        assert!(matches!(compute_metrics(&counts(0, 0, 0, 0)), Err(Error::Contract(_))));
    }

    #[test]
    fn json_has_contract_keys() {
        let m = compute_metrics(&counts(2, 1, 2, 5)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        let obj = v.as_object().unwrap();
        for k in ["pre", "rec", "oa", "f1", "kappa", "pe", "tp", "fp", "fn", "tn", "degenerate"] {
            assert!(obj.contains_key(k), "{k}");
        }
        assert_eq!(obj.len(), 11);
    }

    #[test]
    fn confusion_examples() {
        let gt: Vec<u8> = (0..100).map(|i| (i < 10) as u8).collect();
        let g = Raster::new_u8(10, 10, 1, gt.clone()).unwrap();
        assert_eq!(confusion_counts(&g, &g).unwrap(), counts(10, 0, 0, 90));
        let inv = Raster::new_u8(10, 10, 1, gt.iter().map(|v| 1 - v).collect()).unwrap();
        let c = confusion_counts(&inv, &g).unwrap();
        assert_eq!((c.tp, c.tn, c.fp + c.fn_), (0, 0, 100));
        let small = Raster::new_u8(5, 10, 1, vec![0; 50]).unwrap();
        assert!(matches!(confusion_counts(&small, &g), Err(Error::Contract(_))));
        let bad = Raster::new_u8(10, 10, 1, vec![2; 100]).unwrap();
        assert!(matches!(confusion_counts(&bad, &g), Err(Error::Data(_))));
    }

    /// Probability that a random positive outscores a random negative.
    fn pairwise_auc(scores: &[f32], labels: &[u8]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li == 1 && lj == 0 {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.9], &[0, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.1], &[0, 1]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.5, 0.5], &[1, 1]), Err(Error::Degenerate(_))));
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_oracle(
            data in prop::collection::vec((0u8..6, 0u8..2), 2..60)
        ) {
            let scores: Vec<f32> = data.iter().map(|d| d.0 as f32).collect();
            let labels: Vec<u8> = data.iter().map(|d| d.1).collect();
            let pos = labels.iter().filter(|&&l| l == 1).count();
            prop_assume!(pos > 0 && pos < labels.len());
            let a = roc_auc(&scores, &labels).unwrap();
            prop_assert!((a - pairwise_auc(&scores, &labels)).abs() < 1e-12);
        }

        #[test]
        fn metric_identities(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500, tn in 0u64..500) {
            let c = counts(tp, fp, fn_, tn);
            prop_assume!(c.total() > 0);
            let m = compute_metrics(&c).unwrap();
            let t = compute_metrics(&c.transposed()).unwrap();
            prop_assert_eq!(m.oa, t.oa);
            prop_assert_eq!((m.pre, m.rec), (t.rec, t.pre));
            if 2 * tp + fp + fn_ > 0 {
                let alt = 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
                prop_assert!((m.f1 - alt).abs() < 1e-12);
            }
            prop_assert!(m.kappa <= m.oa + 1e-12);
            prop_assert!((-1.0..=1.0).contains(&m.kappa));
        }
    }
}
