use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use stackvet::datagen::{Dataset, Sample, CUTOUT, FRAMES};
use stackvet::triage::{route, Bucket, TriagePolicy};

use crate::ReviewError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictLabel {
    Object,
    FalsePositive,
}

/// Body of `POST /api/verdict`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictRequest {
    pub id: String,
    pub label: VerdictLabel,
    pub reviewer: String,
}

/// One line of the verdict log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictRecord {
    pub id: String,
    pub label: VerdictLabel,
    pub reviewer: String,
    pub timestamp_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictAck {
    pub id: String,
    /// False when an identical verdict was already active.
    pub recorded: bool,
    pub record: VerdictRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelView {
    pub depth: usize,
    pub group: usize,
    pub min: f32,
    pub max: f32,
    /// Row-major `size × size`.
    pub pixels: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueItem {
    pub id: String,
    pub score: f64,
    pub combo: Vec<usize>,
    pub size: usize,
    pub channels: Vec<ChannelView>,
    pub enqueued_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleView {
    #[serde(flatten)]
    pub item: QueueItem,
    pub bucket: Bucket,
    pub verdict: Option<VerdictRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewStats {
    pub total: usize,
    pub auto_positive: usize,
    pub auto_negative: usize,
    pub pending: usize,
    pub reviewed: usize,
    pub objects: usize,
    pub false_positives: usize,
    pub positive_threshold: f64,
    pub negative_threshold: f64,
    /// Human-bucket share of all candidates, reviewed or not.
    pub remaining_ratio: f64,
    /// Share of all candidates still waiting for a verdict.
    pub pending_ratio: f64,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Queue, verdicts and the append-only log behind them.
pub struct ReviewState {
    dataset: Dataset,
    scores: Vec<f64>,
    buckets: Vec<Bucket>,
    index: BTreeMap<String, usize>,
    policy: TriagePolicy,
    /// Human-bucket sample indices, most ambiguous first.
    order: Vec<usize>,
    active: BTreeMap<String, VerdictRecord>,
    log: File,
    log_path: PathBuf,
    started_ms: u64,
}

impl ReviewState {
    /// `scores[i]` belongs to `dataset.samples[i]`. Verdicts already in the
    /// log at `log_path` are replayed; later lines supersede earlier ones.
    pub fn new(dataset: Dataset, scores: Vec<f64>, policy: TriagePolicy, log_path: &Path) -> Result<Self, ReviewError> {
        policy.validate()?;
        if scores.len() != dataset.samples.len() {
            return Err(ReviewError::Setup(format!(
                "{} scores for {} samples",
                scores.len(),
                dataset.samples.len()
            )));
        }
        let buckets = scores
            .iter()
            .map(|&s| route(s, &policy))
            .collect::<Result<Vec<_>, _>>()?;
        let index: BTreeMap<String, usize> = dataset
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.clone(), i))
            .collect();
        if index.len() != dataset.samples.len() {
            return Err(ReviewError::Setup("duplicate sample ids".into()));
        }
        let mid = policy.midpoint();
        let mut order: Vec<usize> = (0..scores.len()).filter(|&i| buckets[i] == Bucket::HumanReview).collect();
        order.sort_by(|&a, &b| {
            (scores[a] - mid)
                .abs()
                .total_cmp(&(scores[b] - mid).abs())
                .then_with(|| dataset.samples[a].id.cmp(&dataset.samples[b].id))
        });

        let mut active = BTreeMap::new();
        if log_path.exists() {
            let reader = BufReader::new(File::open(log_path)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: VerdictRecord = serde_json::from_str(&line)
                    .map_err(|e| ReviewError::Setup(format!("{}:{}: {e}", log_path.display(), n + 1)))?;
                match index.get(&rec.id) {
                    Some(&i) if buckets[i] == Bucket::HumanReview => {
                        active.insert(rec.id.clone(), rec);
                    }
                    _ => {
                        return Err(ReviewError::Setup(format!(
                            "{}:{}: verdict for {} which is not in the review bucket",
                            log_path.display(),
                            n + 1,
                            rec.id
                        )))
                    }
                }
            }
        }
        let log = OpenOptions::new().create(true).append(true).open(log_path)?;
        Ok(ReviewState {
            dataset,
            scores,
            buckets,
            index,
            policy,
            order,
            active,
            log,
            log_path: log_path.to_path_buf(),
            started_ms: now_ms(),
        })
    }

    pub fn policy(&self) -> TriagePolicy {
        self.policy
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    fn view(&self, i: usize) -> QueueItem {
        let s: &Sample = &self.dataset.samples[i];
        let plane = CUTOUT * CUTOUT;
        let mut labels = Vec::new();
        for &d in self.dataset.combo.depths() {
            for g in 0..FRAMES / d {
                labels.push((d, g));
            }
        }
        let channels = labels
            .iter()
            .enumerate()
            .map(|(c, &(depth, group))| {
                let pixels = s.channels.data()[c * plane..(c + 1) * plane].to_vec();
                let min = pixels.iter().copied().fold(f32::INFINITY, f32::min);
                let max = pixels.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                ChannelView {
                    depth,
                    group,
                    min,
                    max,
                    pixels,
                }
            })
            .collect();
        QueueItem {
            id: s.id.clone(),
            score: self.scores[i],
            combo: self.dataset.combo.depths().to_vec(),
            size: CUTOUT,
            channels,
            enqueued_ms: self.started_ms,
        }
    }

    /// Unreviewed human-bucket items, most ambiguous first.
    pub fn queue(&self, limit: usize) -> Vec<QueueItem> {
        self.order
            .iter()
            .filter(|&&i| !self.active.contains_key(&self.dataset.samples[i].id))
            .take(limit)
            .map(|&i| self.view(i))
            .collect()
    }

    pub fn pending(&self) -> usize {
        self.order.len() - self.active.len()
    }

    pub fn sample(&self, id: &str) -> Result<SampleView, ReviewError> {
        let &i = self.index.get(id).ok_or_else(|| ReviewError::NotFound(id.to_string()))?;
        Ok(SampleView {
            item: self.view(i),
            bucket: self.buckets[i],
            verdict: self.active.get(id).cloned(),
        })
    }

    /// Appends the verdict to the log and syncs it to disk before the
    /// in-memory state changes. A repeat of the active verdict writes
    /// nothing.
    pub fn post_verdict(&mut self, req: VerdictRequest) -> Result<VerdictAck, ReviewError> {
        let &i = self
            .index
            .get(&req.id)
            .ok_or_else(|| ReviewError::NotFound(req.id.clone()))?;
        if self.buckets[i] != Bucket::HumanReview {
            return Err(ReviewError::NotFound(format!("{} is not awaiting review", req.id)));
        }
        if req.reviewer.trim().is_empty() {
            return Err(ReviewError::BadRequest("reviewer must not be empty".into()));
        }
        if let Some(prev) = self.active.get(&req.id) {
            if prev.label == req.label && prev.reviewer == req.reviewer {
                return Ok(VerdictAck {
                    id: req.id,
                    recorded: false,
                    record: prev.clone(),
                });
            }
        }
        let record = VerdictRecord {
            id: req.id,
            label: req.label,
            reviewer: req.reviewer,
            timestamp_ms: now_ms(),
        };
        let mut line = serde_json::to_string(&record).map_err(|e| ReviewError::Setup(e.to_string()))?;
        line.push('\n');
        self.log.write_all(line.as_bytes())?;
        self.log.flush()?;
        self.log.sync_data()?;
        self.active.insert(record.id.clone(), record.clone());
        Ok(VerdictAck {
            id: record.id.clone(),
            recorded: true,
            record,
        })
    }

    pub fn stats(&self) -> ReviewStats {
        let total = self.scores.len();
        let count = |b: Bucket| self.buckets.iter().filter(|&&x| x == b).count();
        let human = self.order.len();
        let objects = self.active.values().filter(|r| r.label == VerdictLabel::Object).count();
        let ratio = |n: usize| if total == 0 { 0.0 } else { n as f64 / total as f64 };
        ReviewStats {
            total,
            auto_positive: count(Bucket::AutoPositive),
            auto_negative: count(Bucket::AutoNegative),
            pending: self.pending(),
            reviewed: self.active.len(),
            objects,
            false_positives: self.active.len() - objects,
            positive_threshold: self.policy.positive_threshold,
            negative_threshold: self.policy.negative_threshold,
            remaining_ratio: ratio(human),
            pending_ratio: ratio(self.pending()),
        }
    }
}
