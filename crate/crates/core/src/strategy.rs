//! Diagnostic strategy enumeration and the pairwise reward that turns
//! classifier predictions into examination-recommendation training data.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::domain::{layout, DiagnosisClass, ExamKind, ExamSet, OarTuple, StrategySet, VisitRecord};
use crate::error::{Error, Result};
use crate::openmax::{self, OpenMaxCalibration};
use crate::par;

/// Default bound on strategies per visit.
pub const DEFAULT_STRATEGY_CAP: usize = 4096;

/// Every Base-anchored subset of the visit's examinations, ordered by
/// cardinality and then lexicographically in canonical kind order, truncated
/// to `cap` entries.
pub fn enumerate_strategies(v: &VisitRecord, cap: usize) -> StrategySet {
    let kinds = v.kinds();
    if !kinds.contains(ExamKind::Base) {
        return StrategySet::default();
    }
    let optional: Vec<ExamKind> = kinds.iter().filter(|k| *k != ExamKind::Base).collect();
    let mut out = Vec::new();
    'sizes: for size in 0..=optional.len() {
        let mut combo: Vec<usize> = (0..size).collect();
        loop {
            if out.len() >= cap {
                break 'sizes;
            }
            let mut s = ExamSet::base();
            for &i in &combo {
                s.insert(optional[i]);
            }
            out.push(s);
            if !next_combination(&mut combo, optional.len()) {
                break;
            }
        }
    }
    StrategySet { strategies: out }
}

/// Advances `combo` to the next k-combination of `0..n` in lexicographic order.
fn next_combination(combo: &mut [usize], n: usize) -> bool {
    let k = combo.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if combo[i] < n - k + i {
            combo[i] += 1;
            for j in i + 1..k {
                combo[j] = combo[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// One positive-reward transition between two strategies of a visit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardRecord {
    /// The smaller strategy (current observation).
    pub from: ExamSet,
    /// The larger strategy reached by the action.
    pub to: ExamSet,
    pub action: ExamSet,
    pub reward: f64,
}

impl RewardRecord {
    /// The training triple with the observation drawn from `visit`.
    pub fn to_oar(&self, visit: &VisitRecord, pred: [f64; 3]) -> OarTuple {
        OarTuple { obs: visit.observe(self.from, pred), action: self.action, reward: self.reward }
    }
}

/// `sum(y * p) - sum((1 - y) * p)`: the reward between two strategies is the
/// difference of their margins.
fn margin(y_true: &[f64], pred: &[f64]) -> f64 {
    y_true.iter().zip(pred).map(|(y, p)| y * p - (1.0 - y) * p).sum()
}

/// For every ordered pair `q < v` (after sorting by cardinality) with
/// `ds_q` a strict subset of `ds_v`, emits a record when the reward
/// `sum(y*(p_v - p_q)) + sum(!y*(p_q - p_v))` is positive.
pub fn compute_rewards(ds: &StrategySet, preds: &BTreeMap<ExamSet, Vec<f64>>, y_true: &[f64]) -> Result<Vec<RewardRecord>> {
    let mut sorted = ds.strategies.clone();
    sorted.sort_by_key(|s| s.len());
    let margins: Vec<f64> = sorted
        .iter()
        .map(|s| {
            let p = preds.get(s).ok_or_else(|| Error::MissingPrediction(s.to_string()))?;
            if p.len() != y_true.len() {
                return Err(Error::DimensionMismatch { expected: y_true.len(), found: p.len() });
            }
            Ok(margin(y_true, p))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for q in 0..sorted.len() {
        for v in q + 1..sorted.len() {
            if sorted[q].is_proper_subset(sorted[v]) {
                let reward = margins[v] - margins[q];
                if reward > 0.0 {
                    out.push(RewardRecord {
                        from: sorted[q],
                        to: sorted[v],
                        action: sorted[v].difference(sorted[q]),
                        reward,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// One entry of the examination dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExaminationRecord {
    pub subject_id: String,
    pub visit_index: u32,
    pub obs_kinds: ExamSet,
    /// Open-set prediction on `obs_kinds`, `[AD, CN, unknown]`.
    pub pred: [f64; 3],
    pub action_kinds: ExamSet,
    pub reward: f64,
}

/// One-hot over the known classes.
pub fn one_hot(class: DiagnosisClass) -> Option<Vec<f64>> {
    let k = class.known_index()?;
    let mut y = vec![0.0; crate::domain::KNOWN_CLASSES];
    y[k] = 1.0;
    Some(y)
}

/// Open-set prediction for one strategy of a visit, `[unknown, AD, CN]`.
pub fn predict_strategy(visit: &VisitRecord, s: ExamSet, backbone: &Backbone, cal: &OpenMaxCalibration) -> Result<Vec<f64>> {
    let input = visit.flatten_subset(s)?.dense_input();
    openmax::predict(cal, &backbone.forward(&input)?)
}

/// Runs the reward computation over every known-class visit, with
/// predictions from the calibrated backbone. Unknown-class visits carry no
/// reward signal and are skipped. Records are ordered by visit position.
pub fn build_examination_dataset(
    visits: &[VisitRecord],
    strategies: &[StrategySet],
    backbone: &Backbone,
    cal: &OpenMaxCalibration,
) -> Result<Vec<ExaminationRecord>> {
    if visits.len() != strategies.len() {
        return Err(Error::DimensionMismatch { expected: visits.len(), found: strategies.len() });
    }
    let per_visit = par::map_range(visits.len(), |i| -> Result<Vec<ExaminationRecord>> {
        let v = &visits[i];
        let Some(y) = one_hot(v.label.class) else {
            return Ok(Vec::new());
        };
        let mut full = BTreeMap::new();
        let mut known = BTreeMap::new();
        for s in strategies[i].iter() {
            let p = predict_strategy(v, *s, backbone, cal)?;
            known.insert(*s, openmax::known_renormalized(&p));
            full.insert(*s, p);
        }
        let records = compute_rewards(&strategies[i], &known, &y)?;
        Ok(records
            .into_iter()
            .map(|r| {
                let t = layout::to_threshold_order(&full[&r.from]);
                ExaminationRecord {
                    subject_id: v.subject_id.clone(),
                    visit_index: v.visit_index,
                    obs_kinds: r.from,
                    pred: [t[0], t[1], t[2]],
                    action_kinds: r.action,
                    reward: r.reward,
                }
            })
            .collect())
    });
    let mut out = Vec::new();
    for r in per_visit {
        out.extend(r?);
    }
    Ok(out)
}

pub fn write_examination<W: Write>(mut w: W, records: &[ExaminationRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_examination<R: BufRead>(r: R) -> Result<Vec<ExaminationRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{DiagnosisLabel, FeatureRow};
    use proptest::prelude::*;

    fn visit(kinds: &[ExamKind]) -> VisitRecord {
        VisitRecord {
            subject_id: "a".into(),
            visit_index: 0,
            label: DiagnosisLabel::known(DiagnosisClass::AD),
            rows: kinds.iter().map(|k| (*k, FeatureRow(vec![0.0; 2]))).collect(),
        }
    }

    fn set(kinds: &[ExamKind]) -> ExamSet {
        kinds.iter().copied().collect()
    }

    #[test]
    fn enumerates_base_anchored_subsets() {
        use ExamKind::*;
        let s = enumerate_strategies(&visit(&[Base, Cog]), DEFAULT_STRATEGY_CAP);
        assert_eq!(s.strategies, vec![set(&[Base]), set(&[Base, Cog])]);
        let s = enumerate_strategies(&visit(&[Base, Cog, MRI, CSF]), DEFAULT_STRATEGY_CAP);
        assert_eq!(s.len(), 8);
        assert!(s.iter().all(|x| x.contains(Base)));
        assert!(s.strategies.windows(2).all(|w| w[0].len() <= w[1].len()));
        let capped = enumerate_strategies(&visit(&[Base, Cog, MRI, CSF]), 4);
        assert_eq!(
            capped.strategies,
            vec![set(&[Base]), set(&[Base, Cog]), set(&[Base, MRI]), set(&[Base, CSF])]
        );
        assert!(enumerate_strategies(&visit(&[Cog]), 10).is_empty());
    }

    #[test]
    fn reward_examples() {
        use ExamKind::*;
        let ds = StrategySet { strategies: vec![set(&[Base]), set(&[Base, MRI])] };
        let mut preds = BTreeMap::new();
        preds.insert(set(&[Base]), vec![0.6, 0.4]);
        preds.insert(set(&[Base, MRI]), vec![0.8, 0.2]);
        let r = compute_rewards(&ds, &preds, &[1.0, 0.0]).unwrap();
        assert_eq!(r.len(), 1);
        assert!((r[0].reward - 0.4).abs() < 1e-12);
        assert_eq!(r[0].action, set(&[MRI]));

        preds.insert(set(&[Base, MRI]), vec![0.6, 0.4]);
        assert!(compute_rewards(&ds, &preds, &[1.0, 0.0]).unwrap().is_empty());
        preds.insert(set(&[Base, MRI]), vec![0.3, 0.7]);
        assert!(compute_rewards(&ds, &preds, &[1.0, 0.0]).unwrap().is_empty());

        preds.remove(&set(&[Base, MRI]));
        assert!(matches!(compute_rewards(&ds, &preds, &[1.0, 0.0]), Err(Error::MissingPrediction(_))));
    }

    #[test]
    fn examination_jsonl_shape() {
        let r = ExaminationRecord {
            subject_id: "s".into(),
            visit_index: 2,
            obs_kinds: set(&[ExamKind::Base]),
            pred: [0.5, 0.25, 0.25],
            action_kinds: set(&[ExamKind::MRI, ExamKind::Cog]),
            reward: 0.125,
        };
        let mut buf = Vec::new();
        write_examination(&mut buf, std::slice::from_ref(&r)).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "{\"subject_id\":\"s\",\"visit_index\":2,\"obs_kinds\":[\"Base\"],\"pred\":[0.5,0.25,0.25],\
             \"action_kinds\":[\"Cog\",\"MRI\"],\"reward\":0.125}\n"
        );
        assert_eq!(read_examination(&buf[..]).unwrap(), vec![r]);
    }

    proptest! {
        #[test]
        fn rewards_are_bounded_and_actions_disjoint(bits in prop::collection::vec(0u16..4096, 1..12), seed in 0u64..1000) {
            let mut strategies: Vec<ExamSet> = bits.iter().map(|b| ExamSet::from_bits(b << 1).with(ExamKind::Base)).collect();
            strategies.sort();
            strategies.dedup();
            strategies.sort_by_key(|s| s.len());
            let mut preds = BTreeMap::new();
            for (i, s) in strategies.iter().enumerate() {
                let a = ((seed as f64 * 0.618 + i as f64 * 0.377) % 1.0).abs();
                preds.insert(*s, vec![a, 1.0 - a]);
            }
            let ds = StrategySet { strategies };
            for r in compute_rewards(&ds, &preds, &[0.0, 1.0]).unwrap() {
                prop_assert!(r.reward > 0.0 && r.reward <= 2.0);
                prop_assert!(!r.action.is_empty());
                prop_assert!(r.action.intersection(r.from).is_empty());
                prop_assert!(r.from.is_proper_subset(r.to));
            }
        }
    }
}
