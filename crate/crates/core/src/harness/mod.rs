//! Evaluation: metrics, bootstrap intervals and summary tables.

pub mod bootstrap;
pub mod metrics;
pub mod tables;

use serde::{Deserialize, Serialize};

use crate::domain::DiagnosisClass;
use crate::engine::TraceRecord;
use crate::error::{Error, Result};
use bootstrap::{bootstrap_ci, BootstrapConfig};
use metrics::{accuracy, known_accuracy, roc_auc, sensitivity_specificity, SensSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_trials: usize,
    pub sample_size: usize,
    pub redraws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: DiagnosisClass,
    pub auc: Option<MetricReport>,
    #[serde(flatten)]
    pub rates: SensSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n: usize,
    /// Exact-match accuracy over every visit, Unknown included.
    pub accuracy_open: f64,
    /// Accuracy over known-class visits only.
    pub accuracy_known: Option<f64>,
    pub classes: Vec<ClassReport>,
    pub exams_requested: usize,
    pub exams_granted: usize,
    pub adjustments: usize,
    pub truncated: usize,
}

/// Per-item view used by the metric closures.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Scored {
    pred: [f64; 3],
    truth: DiagnosisClass,
}

fn scored_cmp(a: &Scored, b: &Scored) -> std::cmp::Ordering {
    a.truth
        .cmp(&b.truth)
        .then_with(|| a.pred.iter().zip(&b.pred).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal))
}

fn class_auc(items: &[Scored], class: DiagnosisClass) -> Result<f64> {
    let i = class.threshold_index();
    let scores: Vec<f64> = items.iter().map(|s| s.pred[i]).collect();
    let labels: Vec<bool> = items.iter().map(|s| s.truth == class).collect();
    roc_auc(&scores, &labels)
}

/// Metrics of a set of diagnosis traces. AUCs are one-vs-rest on the last
/// prediction of each trace.
pub fn evaluate(records: &[TraceRecord], boot: &BootstrapConfig) -> Result<EvaluationReport> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds: Vec<DiagnosisClass> = records.iter().map(|r| r.trace.final_label.class).collect();
    let truths: Vec<DiagnosisClass> = records.iter().map(|r| r.truth.class).collect();
    let items: Vec<Scored> = records.iter().map(|r| Scored { pred: r.trace.final_pred, truth: r.truth.class }).collect();
    let mut classes = Vec::new();
    for class in DiagnosisClass::ALL {
        let auc = match class_auc(&items, class) {
            Ok(point) => {
                let ci = bootstrap_ci(&items, |s| class_auc(s, class), scored_cmp, boot)?;
                Some(MetricReport {
                    metric: format!("auc_{}", class.name()),
                    point,
                    ci_low: ci.low,
                    ci_high: ci.high,
                    n_trials: boot.n_trials,
                    sample_size: boot.sample_size,
                    redraws: ci.redraws,
                })
            }
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        classes.push(ClassReport { class, auc, rates: sensitivity_specificity(&preds, &truths, class)? });
    }
    let accuracy_known = match known_accuracy(&preds, &truths) {
        Ok(a) => Some(a),
        Err(Error::EmptyDataset) => None,
        Err(e) => return Err(e),
    };
    let requests = records.iter().flat_map(|r| r.trace.requested.iter());
    Ok(EvaluationReport {
        n: records.len(),
        accuracy_open: accuracy(&preds, &truths)?,
        accuracy_known,
        classes,
        exams_requested: requests.clone().count(),
        exams_granted: requests.filter(|q| q.granted).count(),
        adjustments: records.iter().map(|r| r.trace.adjustments).sum(),
        truncated: records.iter().filter(|r| r.trace.truncated).count(),
    })
}
