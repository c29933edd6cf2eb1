use serde::{Deserialize, Serialize};

use crate::domain::DiagnosisClass;
use crate::error::{Error, Result};

/// Area under the ROC curve for `scores` against binary `labels`, with tied
/// scores sharing credit equally (the Mann-Whitney statistic).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: scores.len(), found: labels.len() });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    // Sum of positive ranks with ties averaged; twice the rank keeps it integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let pos = idx[i..=j].iter().filter(|k| labels[**k]).count() as u128;
        // Ranks i+1..=j+1 average to (i + j + 2) / 2.
        twice_rank_sum += pos * (i + j + 2) as u128;
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// One-vs-rest sensitivity and specificity. `None` marks an undefined ratio
/// (no positives, or no negatives).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensSpec {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

pub fn sensitivity_specificity(preds: &[DiagnosisClass], truths: &[DiagnosisClass], positive: DiagnosisClass) -> Result<SensSpec> {
    if preds.len() != truths.len() {
        return Err(Error::DimensionMismatch { expected: truths.len(), found: preds.len() });
    }
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (mut tp, mut fn_, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for (p, t) in preds.iter().zip(truths) {
        match (*t == positive, *p == positive) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    let ratio = |a: usize, b: usize| (a + b > 0).then(|| a as f64 / (a + b) as f64);
    Ok(SensSpec { sensitivity: ratio(tp, fn_), specificity: ratio(tn, fp) })
}

/// Fraction of exact matches over all items, Unknown included.
pub fn accuracy(preds: &[DiagnosisClass], truths: &[DiagnosisClass]) -> Result<f64> {
    if preds.len() != truths.len() {
        return Err(Error::DimensionMismatch { expected: truths.len(), found: preds.len() });
    }
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(preds.iter().zip(truths).filter(|(p, t)| p == t).count() as f64 / preds.len() as f64)
}

/// Accuracy restricted to items whose truth is a known class. Predicting
/// Unknown for such an item counts as an error.
pub fn known_accuracy(preds: &[DiagnosisClass], truths: &[DiagnosisClass]) -> Result<f64> {
    let (p, t): (Vec<_>, Vec<_>) = preds
        .iter()
        .zip(truths)
        .filter(|(_, t)| **t != DiagnosisClass::Unknown)
        .map(|(p, t)| (*p, *t))
        .unzip();
    accuracy(&p, &t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use DiagnosisClass::*;

    fn pair_count(scores: &[f64], labels: &[bool]) -> f64 {
        let mut credit = 0.0;
        let mut pairs = 0.0;
        for (i, si) in scores.iter().enumerate() {
            for (j, sj) in scores.iter().enumerate() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    credit += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
                }
            }
        }
        credit / pairs
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        let (s, l) = ([0.1, 0.4, 0.35, 0.8], [false, false, true, true]);
        assert_eq!(roc_auc(&s, &l).unwrap(), 0.75);
        assert_eq!(pair_count(&s, &l), 0.75);
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn sens_spec_examples() {
        let truths = [AD, AD, AD, AD, CN, CN, CN, CN, CN, CN];
        let preds = [AD, AD, AD, CN, CN, CN, CN, CN, CN, AD];
        let r = sensitivity_specificity(&preds, &truths, AD).unwrap();
        assert_eq!(r.sensitivity, Some(0.75));
        assert!((r.specificity.unwrap() - 5.0 / 6.0).abs() < 1e-12);
        let all = sensitivity_specificity(&truths, &truths, AD).unwrap();
        assert_eq!((all.sensitivity, all.specificity), (Some(1.0), Some(1.0)));
        let pos = sensitivity_specificity(&[AD; 10], &truths, AD).unwrap();
        assert_eq!(pos.specificity, Some(0.0));
        let undefined = sensitivity_specificity(&[CN, CN], &[CN, CN], Unknown).unwrap();
        assert_eq!(undefined.sensitivity, None);
        assert!(sensitivity_specificity(&[], &[], AD).is_err());
    }

    #[test]
    fn accuracy_variants() {
        let truths = [AD, CN, Unknown, Unknown];
        let preds = [AD, Unknown, Unknown, CN];
        assert_eq!(accuracy(&preds, &truths).unwrap(), 0.5);
        assert_eq!(known_accuracy(&preds, &truths).unwrap(), 0.5);
    }

    proptest! {
        #[test]
        fn auc_matches_pair_counting(items in prop::collection::vec((0u8..20, any::<bool>()), 2..200)) {
            let scores: Vec<f64> = items.iter().map(|(s, _)| *s as f64 / 7.0).collect();
            let labels: Vec<bool> = items.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.iter().any(|l| *l) && labels.iter().any(|l| !*l));
            let a = roc_auc(&scores, &labels).unwrap();
            prop_assert!((a - pair_count(&scores, &labels)).abs() <= 1e-12);
        }
    }
}
