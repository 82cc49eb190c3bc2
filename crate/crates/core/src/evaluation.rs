//! Confusion-matrix metrics, ROC/AUC, majority-vote ensembles and the
//! train/test AUC gap.
//!
//! A metric whose denominator is zero is `None` ("undefined"), never 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
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
}

fn check_lengths(scores: usize, labels: usize) -> Result<()> {
    if scores != labels {
        return Err(Error::shape("evaluation", "labels", scores, labels));
    }
    Ok(())
}

/// A score at or above `threshold` is a positive prediction.
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionCounts> {
    check_lengths(scores.len(), labels.len())?;
    let mut c = ConfusionCounts::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: Option<f64>,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    /// TN / (TN + FN): how often a "no object" call is right.
    pub inverse_precision: Option<f64>,
    pub f1: Option<f64>,
}

pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    Metrics {
        accuracy: ratio(c.tp + c.tn, c.total()),
        recall,
        precision,
        inverse_precision: ratio(c.tn, c.tn + c.fn_),
        f1,
    }
}

/// ROC points at every distinct score, from (0,0) to (1,1), with the
/// trapezoidal area under them.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<(Vec<(f64, f64)>, f64)> {
    check_lengths(scores.len(), labels.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // trapezoid in count units, normalized once at the end
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok((points, area / (pos as f64 * neg as f64)))
}

pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    Ok(roc_auc(scores, labels)?.1)
}

/// AUC, or `None` for single-class input.
pub fn auc_opt(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    match roc_auc(scores, labels) {
        Ok((_, a)) => Ok(Some(a)),
        Err(Error::SingleClass) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn roc_csv(points: &[(f64, f64)]) -> String {
    let mut out = String::from("fpr,tpr\n");
    for (f, t) in points {
        out.push_str(&format!("{f},{t}\n"));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub counts: ConfusionCounts,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub auc: Option<f64>,
    pub roc: Vec<(f64, f64)>,
}

/// Thresholded metrics plus ROC/AUC for one score vector.
pub fn evaluate(scores: &[f64], labels: &[u8], threshold: f64) -> Result<EvalReport> {
    let counts = confusion(scores, labels, threshold)?;
    let (roc, auc) = match roc_auc(scores, labels) {
        Ok((r, a)) => (r, Some(a)),
        Err(Error::SingleClass) => (Vec::new(), None),
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        threshold,
        counts,
        metrics: metrics(&counts),
        auc,
        roc,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Folds where the metric was defined.
    pub folds: usize,
}

/// Mean and population standard deviation over the defined values.
pub fn aggregate(values: &[Option<f64>]) -> Aggregate {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        return Aggregate {
            mean: None,
            std: None,
            folds: 0,
        };
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Aggregate {
        mean: Some(mean),
        std: Some(var.sqrt()),
        folds: v.len(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub accuracy: Aggregate,
    pub recall: Aggregate,
    pub precision: Aggregate,
    pub inverse_precision: Aggregate,
    pub f1: Aggregate,
    pub auc: Aggregate,
}

pub fn aggregate_reports(reports: &[EvalReport]) -> AggregateReport {
    let col = |f: fn(&EvalReport) -> Option<f64>| aggregate(&reports.iter().map(f).collect::<Vec<_>>());
    AggregateReport {
        accuracy: col(|r| r.metrics.accuracy),
        recall: col(|r| r.metrics.recall),
        precision: col(|r| r.metrics.precision),
        inverse_precision: col(|r| r.metrics.inverse_precision),
        f1: col(|r| r.metrics.f1),
        auc: col(|r| r.auc),
    }
}

/// Majority vote at `threshold` and mean score across models. A vote split
/// exactly in half goes positive.
pub fn ensemble_combine(model_scores: &[&[f64]], threshold: f64) -> Result<Vec<(u8, f64)>> {
    let first = model_scores.first().ok_or(Error::Empty("ensemble"))?;
    let k = model_scores.len();
    if let Some(bad) = model_scores.iter().find(|s| s.len() != first.len()) {
        return Err(Error::shape("ensemble", "scores per model", first.len(), bad.len()));
    }
    Ok((0..first.len())
        .map(|i| {
            let votes = model_scores.iter().filter(|s| s[i] >= threshold).count();
            let mean = model_scores.iter().map(|s| s[i]).sum::<f64>() / k as f64;
            (u8::from(2 * votes >= k), mean)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub models: usize,
    pub threshold: f64,
    /// Counts and metrics of the majority vote.
    pub counts: ConfusionCounts,
    #[serde(flatten)]
    pub metrics: Metrics,
    /// AUC of the mean score.
    pub auc: Option<f64>,
    pub roc: Vec<(f64, f64)>,
    /// Mean of the member models' stored training AUCs.
    pub train_auc: Option<f64>,
    pub delta_auc: Option<f64>,
}

pub fn evaluate_ensemble(
    model_scores: &[&[f64]],
    labels: &[u8],
    threshold: f64,
    train_aucs: &[Option<f64>],
) -> Result<EnsembleReport> {
    let combined = ensemble_combine(model_scores, threshold)?;
    check_lengths(combined.len(), labels.len())?;
    let votes: Vec<f64> = combined.iter().map(|&(v, _)| v as f64).collect();
    let mean: Vec<f64> = combined.iter().map(|&(_, m)| m).collect();
    let counts = confusion(&votes, labels, 0.5)?;
    let (roc, auc) = match roc_auc(&mean, labels) {
        Ok((r, a)) => (r, Some(a)),
        Err(Error::SingleClass) => (Vec::new(), None),
        Err(e) => return Err(e),
    };
    let train_auc = aggregate(train_aucs).mean;
    Ok(EnsembleReport {
        models: model_scores.len(),
        threshold,
        counts,
        metrics: metrics(&counts),
        auc,
        roc,
        train_auc,
        delta_auc: auc.zip(train_auc).map(|(t, tr)| generalization_gap(tr, t)),
    })
}

/// Test AUC minus training AUC; negative means overfitting.
pub fn generalization_gap(train_auc: f64, test_auc: f64) -> f64 {
    test_auc - train_auc
}
