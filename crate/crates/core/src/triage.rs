//! Dual-threshold routing: confident scores are decided automatically, the
//! band between the thresholds goes to a human.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriagePolicy {
    pub positive_threshold: f64,
    pub negative_threshold: f64,
}

impl TriagePolicy {
    pub fn new(positive_threshold: f64, negative_threshold: f64) -> Result<Self> {
        let p = TriagePolicy {
            positive_threshold,
            negative_threshold,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (p, n) = (self.positive_threshold, self.negative_threshold);
        if !(0.0..=1.0).contains(&p) || !(0.0..=1.0).contains(&n) {
            return Err(Error::invalid(format!("thresholds must lie in [0, 1], got pos {p}, neg {n}")));
        }
        if n > p {
            return Err(Error::invalid(format!("infeasible policy: negative threshold {n} > positive {p}")));
        }
        Ok(())
    }

    pub fn midpoint(&self) -> f64 {
        (self.positive_threshold + self.negative_threshold) / 2.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    AutoPositive,
    AutoNegative,
    HumanReview,
}

/// Above `pos` is automatic positive, below `neg` automatic negative, the
/// closed band in between is human review.
pub fn route(score: f64, policy: &TriagePolicy) -> Result<Bucket> {
    policy.validate()?;
    Ok(route_unchecked(score, policy))
}

fn route_unchecked(score: f64, policy: &TriagePolicy) -> Bucket {
    if score > policy.positive_threshold {
        Bucket::AutoPositive
    } else if score < policy.negative_threshold {
        Bucket::AutoNegative
    } else {
        Bucket::HumanReview
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TriageStats {
    pub total: usize,
    pub auto_positive: usize,
    pub auto_negative: usize,
    pub human_review: usize,
    /// Objects among automatic positives.
    pub precision: Option<f64>,
    /// Non-objects among automatic negatives.
    pub inverse_precision: Option<f64>,
    pub remaining_ratio: f64,
    /// Non-objects wrongly auto-accepted, as a share of automatic positives.
    pub false_positive_rate_auto: Option<f64>,
    /// Objects wrongly auto-rejected, as a share of automatic negatives.
    pub false_negative_rate_auto: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn stats_from_counts(total: usize, pos_n: usize, pos_obj: usize, neg_n: usize, neg_obj: usize) -> TriageStats {
    let precision = ratio(pos_obj, pos_n);
    let inverse_precision = ratio(neg_n - neg_obj, neg_n);
    TriageStats {
        total,
        auto_positive: pos_n,
        auto_negative: neg_n,
        human_review: total - pos_n - neg_n,
        precision,
        inverse_precision,
        remaining_ratio: (total - pos_n - neg_n) as f64 / total as f64,
        false_positive_rate_auto: precision.map(|p| 1.0 - p),
        false_negative_rate_auto: inverse_precision.map(|p| 1.0 - p),
    }
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Empty("triage scores"));
    }
    if scores.len() != labels.len() {
        return Err(Error::shape("triage", "labels", scores.len(), labels.len()));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::invalid(format!("score {s} outside [0, 1]")));
    }
    Ok(())
}

pub fn triage_stats(scores: &[f64], labels: &[u8], policy: &TriagePolicy) -> Result<TriageStats> {
    check_inputs(scores, labels)?;
    policy.validate()?;
    let (mut pn, mut po, mut nn, mut no) = (0, 0, 0, 0);
    for (&s, &y) in scores.iter().zip(labels) {
        match route_unchecked(s, policy) {
            Bucket::AutoPositive => {
                pn += 1;
                po += usize::from(y == 1);
            }
            Bucket::AutoNegative => {
                nn += 1;
                no += usize::from(y == 1);
            }
            Bucket::HumanReview => {}
        }
    }
    Ok(stats_from_counts(scores.len(), pn, po, nn, no))
}

/// Sorted scores with prefix object counts, for O(log n) bucket counts.
struct SortedScores {
    scores: Vec<f64>,
    /// `objects[i]` = objects among the `i` smallest scores.
    objects: Vec<usize>,
}

impl SortedScores {
    fn new(scores: &[f64], labels: &[u8]) -> Self {
        let mut pairs: Vec<(f64, u8)> = scores.iter().copied().zip(labels.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut objects = Vec::with_capacity(pairs.len() + 1);
        objects.push(0);
        for &(_, y) in &pairs {
            objects.push(objects.last().unwrap() + usize::from(y == 1));
        }
        SortedScores {
            scores: pairs.into_iter().map(|p| p.0).collect(),
            objects,
        }
    }

    /// (count, objects) with score > t.
    fn above(&self, t: f64) -> (usize, usize) {
        let i = self.scores.partition_point(|&s| s <= t);
        (self.scores.len() - i, self.objects[self.scores.len()] - self.objects[i])
    }

    /// (count, objects) with score < t.
    fn below(&self, t: f64) -> (usize, usize) {
        let i = self.scores.partition_point(|&s| s < t);
        (i, self.objects[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriageRow {
    pub pos: f64,
    pub neg: f64,
    pub precision: Option<f64>,
    pub inverse_precision: Option<f64>,
    pub remaining_ratio: f64,
    pub auto_positive: usize,
    pub auto_negative: usize,
    pub human_review: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriageTable {
    pub step: f64,
    /// Feasible pairs ordered by (pos, neg).
    pub rows: Vec<TriageRow>,
}

/// Threshold lattice `i / n` with `n = round(1 / step)`.
pub fn lattice(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step < 1.0) {
        return Err(Error::invalid(format!("grid step must lie in (0, 1), got {step}")));
    }
    let n = (1.0 / step).round() as usize;
    Ok((0..=n).map(|i| i as f64 / n as f64).collect())
}

/// Every feasible `(pos, neg)` pair of the lattice, `neg <= pos`.
pub fn grid_search(scores: &[f64], labels: &[u8], step: f64) -> Result<TriageTable> {
    check_inputs(scores, labels)?;
    let grid = lattice(step)?;
    let sorted = SortedScores::new(scores, labels);
    let total = scores.len();
    let per_pos = par::map_range(grid.len(), |i| {
        let pos = grid[i];
        let (pn, po) = sorted.above(pos);
        grid[..=i]
            .iter()
            .map(|&neg| {
                let (nn, no) = sorted.below(neg);
                let s = stats_from_counts(total, pn, po, nn, no);
                TriageRow {
                    pos,
                    neg,
                    precision: s.precision,
                    inverse_precision: s.inverse_precision,
                    remaining_ratio: s.remaining_ratio,
                    auto_positive: s.auto_positive,
                    auto_negative: s.auto_negative,
                    human_review: s.human_review,
                }
            })
            .collect::<Vec<_>>()
    });
    Ok(TriageTable {
        step,
        rows: per_pos.into_iter().flatten().collect(),
    })
}

/// A constraint of zero or less is vacuous; a positive one needs a defined
/// value at or above it.
pub fn meets(value: Option<f64>, min: f64) -> bool {
    min <= 0.0 || value.is_some_and(|v| v >= min)
}

/// Orders rows by preference: smaller remaining ratio, higher precision,
/// higher inverse precision, smaller pos, smaller neg.
pub fn preference(a: &TriageRow, b: &TriageRow) -> std::cmp::Ordering {
    let undefined_low = |v: Option<f64>| v.unwrap_or(f64::NEG_INFINITY);
    a.remaining_ratio
        .total_cmp(&b.remaining_ratio)
        .then(undefined_low(b.precision).total_cmp(&undefined_low(a.precision)))
        .then(undefined_low(b.inverse_precision).total_cmp(&undefined_low(a.inverse_precision)))
        .then(a.pos.total_cmp(&b.pos))
        .then(a.neg.total_cmp(&b.neg))
}

pub fn select_operating_point(table: &TriageTable, min_precision: f64, min_inverse_precision: f64) -> Result<TriageRow> {
    if table.rows.is_empty() {
        return Err(Error::Empty("triage table"));
    }
    table
        .rows
        .iter()
        .filter(|r| meets(r.precision, min_precision) && meets(r.inverse_precision, min_inverse_precision))
        .min_by(|a, b| preference(a, b))
        .copied()
        .ok_or(Error::NoFeasiblePolicy)
}

impl TriageRow {
    pub fn policy(&self) -> TriagePolicy {
        TriagePolicy {
            positive_threshold: self.pos,
            negative_threshold: self.neg,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_left: f64,
    pub objects: usize,
    pub false_positives: usize,
}

/// Equal-width bins over [0, 1]; the last bin includes 1.
pub fn score_histogram(scores: &[f64], labels: &[u8], bins: usize) -> Result<Vec<HistogramBin>> {
    if bins < 2 {
        return Err(Error::invalid(format!("histogram needs >= 2 bins, got {bins}")));
    }
    if scores.len() != labels.len() {
        return Err(Error::shape("score_histogram", "labels", scores.len(), labels.len()));
    }
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            bin_left: i as f64 / bins as f64,
            objects: 0,
            false_positives: 0,
        })
        .collect();
    for (&s, &y) in scores.iter().zip(labels) {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::invalid(format!("score {s} outside [0, 1]")));
        }
        let i = ((s * bins as f64).floor() as usize).min(bins - 1);
        if y == 1 {
            out[i].objects += 1;
        } else {
            out[i].false_positives += 1;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    /// Over samples scoring strictly above the threshold.
    pub precision_auto: Option<f64>,
    /// Over samples scoring strictly below the threshold.
    pub inverse_precision_auto: Option<f64>,
    /// Plain classifier over all samples, score >= threshold is positive.
    pub precision_all: Option<f64>,
    pub inverse_precision_all: Option<f64>,
}

/// Precision against a single threshold, computed both ways.
pub fn precision_curves(scores: &[f64], labels: &[u8], step: f64) -> Result<Vec<CurvePoint>> {
    check_inputs(scores, labels)?;
    let sorted = SortedScores::new(scores, labels);
    let n = scores.len();
    let objects = sorted.objects[n];
    Ok(lattice(step)?
        .into_iter()
        .map(|t| {
            let (an, ao) = sorted.above(t);
            let (bn, bo) = sorted.below(t);
            CurvePoint {
                threshold: t,
                precision_auto: ratio(ao, an),
                inverse_precision_auto: ratio(bn - bo, bn),
                precision_all: ratio(objects - bo, n - bn),
                inverse_precision_all: ratio(bn - bo, bn),
            }
        })
        .collect())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| x.to_string())
}

pub fn table_csv(table: &TriageTable) -> String {
    let mut s = String::from("pos,neg,precision,inverse_precision,remaining_ratio\n");
    for r in &table.rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.pos,
            r.neg,
            opt(r.precision),
            opt(r.inverse_precision),
            r.remaining_ratio
        ));
    }
    s
}

pub fn histogram_csv(bins: &[HistogramBin]) -> String {
    let mut s = String::from("bin_left,objects,false_positives\n");
    for b in bins {
        s.push_str(&format!("{},{},{}\n", b.bin_left, b.objects, b.false_positives));
    }
    s
}

pub fn curves_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("threshold,precision_auto,inverse_precision_auto,precision_all,inverse_precision_all\n");
    for p in points {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            p.threshold,
            opt(p.precision_auto),
            opt(p.inverse_precision_auto),
            opt(p.precision_all),
            opt(p.inverse_precision_all)
        ));
    }
    s
}
