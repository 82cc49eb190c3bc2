//! Binary cross-entropy, Adam with coupled weight decay, step schedule,
//! early stopping and grouped k-fold cross-validation.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{batch, Sample};
use crate::error::{Error, Result};
use crate::evaluation::{aggregate_reports, auc_opt, evaluate, AggregateReport, EvalReport, DEFAULT_THRESHOLD};
use crate::models::{build_model, Mode, Model, ModelSpec, OptimizerBlob};
use crate::par;
use crate::tensor::{Graph, Parameter, Scalar, Tensor, BCE_CLAMP};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            lr_decay_factor: 0.1,
            lr_decay_every: 5,
            epochs: 20,
            batch_size: 32,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            patience: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.learning_rate, self.lr_decay_factor, self.eps];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("learning_rate, lr_decay_factor and eps must be > 0"));
        }
        if self.lr_decay_every == 0 || self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::invalid("lr_decay_every, epochs, batch_size and patience must be > 0"));
        }
        if self.patience > self.epochs {
            return Err(Error::invalid(format!(
                "patience {} exceeds epochs {}",
                self.patience, self.epochs
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("beta1 and beta2 must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be >= 0"));
        }
        Ok(())
    }
}

/// Step schedule: `lr · factor^floor(epoch / every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.learning_rate * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32)
}

/// Mean binary cross-entropy with probabilities clamped to
/// `[BCE_CLAMP, 1 - BCE_CLAMP]`.
pub fn bce_loss(probs: &[f64], labels: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Empty("bce_loss"));
    }
    if probs.len() != labels.len() {
        return Err(Error::shape("bce_loss", "labels", probs.len(), labels.len()));
    }
    let sum: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / probs.len() as f64)
}

// -------------------------------------------------------------------- adam

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Parameter<T>]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.value.dims())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.dims())).collect(),
        }
    }
}

impl AdamState<f32> {
    pub fn to_blob(&self) -> OptimizerBlob {
        OptimizerBlob {
            step: self.step,
            tensors: self.m.iter().chain(&self.v).cloned().collect(),
        }
    }

    pub fn from_blob(blob: &OptimizerBlob, params: &[Parameter<f32>]) -> Result<Self> {
        let n = params.len();
        if blob.tensors.len() != 2 * n {
            return Err(Error::Format(format!(
                "optimizer state holds {} tensors, expected {}",
                blob.tensors.len(),
                2 * n
            )));
        }
        let state = AdamState {
            step: blob.step,
            m: blob.tensors[..n].to_vec(),
            v: blob.tensors[n..].to_vec(),
        };
        state.check(params)?;
        Ok(state)
    }
}

impl<T: Scalar> AdamState<T> {
    fn check(&self, params: &[Parameter<T>]) -> Result<()> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::shape("adam_step", "state tensors", params.len(), self.m.len()));
        }
        for ((p, m), v) in params.iter().zip(&self.m).zip(&self.v) {
            if m.dims() != p.value.dims() || v.dims() != p.value.dims() || p.grad.dims() != p.value.dims() {
                return Err(Error::shape(
                    "adam_step",
                    "state dims",
                    format!("{:?}", p.value.dims()),
                    format!("{:?}", m.dims()),
                ));
            }
        }
        Ok(())
    }
}

/// One Adam update from the gradients stored in `params`. Weight decay is
/// added to the gradient before the moment updates.
pub fn adam_step<T: Scalar>(params: &mut [Parameter<T>], state: &mut AdamState<T>, lr: f64, cfg: &TrainConfig) -> Result<()> {
    state.check(params)?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grads = p.grad.data();
        let values = p.value.data_mut();
        for (((w, &g), m), v) in values.iter_mut().zip(grads).zip(m.data_mut()).zip(v.data_mut()) {
            let g = g.as_f64() + cfg.weight_decay * w.as_f64();
            let mm = b1 * m.as_f64() + (1.0 - b1) * g;
            let vv = b2 * v.as_f64() + (1.0 - b2) * g * g;
            *m = T::of(mm);
            *v = T::of(vv);
            let update = lr * (mm / c1) / ((vv / c2).sqrt() + cfg.eps);
            *w = T::of(w.as_f64() - update);
        }
    }
    Ok(())
}

// ----------------------------------------------------------------- trainer

/// Generator for one mini-batch: independent of how many steps ran before.
pub fn step_rng(seed: u64, epoch: usize, batch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | batch as u64);
    rng
}

fn shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - epoch as u64);
    rng
}

#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar = f32> {
    pub model: Model<T>,
    pub adam: AdamState<T>,
    pub config: TrainConfig,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Self {
        let adam = AdamState::new(&model.params);
        Trainer { model, adam, config }
    }

    /// Forward, backward and one optimizer step on a batch of at least two
    /// samples. Returns the batch loss.
    pub fn step(&mut self, x: Tensor<T>, labels: &[T], lr: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.input(x);
        let fwd = self.model.forward(&mut g, xv, Mode::Train, rng)?;
        let loss = g.bce(fwd.probs, labels)?;
        let value = g.value(loss).data()[0].as_f64();
        g.backward(loss)?;
        self.model.zero_grad();
        g.accumulate_param_grads(&mut self.model.params);
        self.model.update_running(&fwd);
        adam_step(&mut self.model.params, &mut self.adam, lr, &self.config)?;
        Ok(value)
    }
}

impl Trainer<f32> {
    pub fn resume(model: Model<f32>, blob: &OptimizerBlob, config: TrainConfig) -> Result<Self> {
        let adam = AdamState::from_blob(blob, &model.params)?;
        Ok(Trainer { model, adam, config })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Infer-mode probabilities as `f64`.
pub fn scores(model: &Model<f32>, samples: &[&Sample]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let (x, _) = batch(samples)?;
    let p = model.predict(&x, Mode::Infer, &mut ChaCha8Rng::seed_from_u64(0))?;
    Ok(p.into_iter().map(f64::from).collect())
}

fn labels_f64(samples: &[&Sample]) -> Vec<f64> {
    samples.iter().map(|s| s.label as f64).collect()
}

fn labels_u8(samples: &[&Sample]) -> Vec<u8> {
    samples.iter().map(|s| s.label).collect()
}

/// Mini-batch training with early stopping on validation loss. Returns the
/// model as it was at the best epoch.
pub fn train(
    model: Model<f32>,
    train_set: &[&Sample],
    validation: &[&Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model<f32>, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if validation.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let train_ids: BTreeSet<&str> = train_set.iter().map(|s| s.id.as_str()).collect();
    if let Some(s) = validation.iter().find(|s| train_ids.contains(s.id.as_str())) {
        return Err(Error::invalid(format!("sample {} is in both training and validation sets", s.id)));
    }
    let val_labels = labels_f64(validation);
    let val_labels_u8 = labels_u8(validation);
    let mut trainer = Trainer::new(model, cfg.clone());
    let mut best: Option<(f64, Model<f32>)> = None;
    let mut history = TrainHistory::default();
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng(cfg.seed, epoch));
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            // batch statistics need two samples
            if chunk.len() < 2 {
                continue;
            }
            let picked: Vec<&Sample> = chunk.iter().map(|&i| train_set[i]).collect();
            let (x, y) = batch(&picked)?;
            let loss = trainer.step(x, &y, lr, &mut step_rng(cfg.seed, epoch, b))?;
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        if seen == 0 {
            return Err(Error::invalid("training set too small for a batch of two"));
        }
        let val_scores = scores(&trainer.model, validation)?;
        let val_loss = bce_loss(&val_scores, &val_labels)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            val_loss,
            val_auc: auc_opt(&val_scores, &val_labels_u8)?,
        };
        on_epoch(&record);
        history.epochs.push(record);
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, trainer.model.clone()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                history.stopped_early = epoch + 1 < cfg.epochs;
                break;
            }
        }
    }
    let (_, mut model) = best.expect("at least one epoch ran");
    model.metadata.best_epoch = Some(history.best_epoch);
    Ok((model, history))
}

// -------------------------------------------------------- cross-validation

/// Groups samples by source, shuffles the sources by `seed` and deals them
/// round-robin into `k` folds. Returns sample indices per fold.
pub fn fold_assignment(samples: &[&Sample], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::invalid(format!("k-fold needs k >= 2, got {k}")));
    }
    let mut sources: Vec<u64> = samples.iter().map(|s| s.source).collect::<BTreeSet<_>>().into_iter().collect();
    if sources.len() < k {
        return Err(Error::invalid(format!("{} source images cannot fill {k} folds", sources.len())));
    }
    sources.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold_of: std::collections::BTreeMap<u64, usize> =
        sources.iter().enumerate().map(|(i, &s)| (s, i % k)).collect();
    let mut folds = vec![Vec::new(); k];
    for (i, s) in samples.iter().enumerate() {
        folds[fold_of[&s.source]].push(i);
    }
    Ok(folds)
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub model: Model<f32>,
    pub history: TrainHistory,
    /// Metrics on the held-out fold.
    pub report: EvalReport,
    pub train_auc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct CvResult {
    pub folds: Vec<FoldResult>,
    pub aggregate: AggregateReport,
}

/// Seed for everything fold `i` does.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(fold as u64 + 1)
}

/// Trains one model per fold (on the other k−1 folds, stopping on the held
/// one out) and aggregates the held-out metrics.
pub fn cross_validate(
    samples: &[&Sample],
    spec: &ModelSpec,
    cfg: &TrainConfig,
    k: usize,
    on_epoch: impl Fn(usize, &EpochRecord) + Sync,
) -> Result<CvResult> {
    cfg.validate()?;
    let folds = fold_assignment(samples, k, cfg.seed)?;
    let results = par::map_range(k, |f| -> Result<FoldResult> {
        let held: Vec<&Sample> = folds[f].iter().map(|&i| samples[i]).collect();
        let rest: Vec<&Sample> = folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != f)
            .flat_map(|(_, idx)| idx.iter().map(|&i| samples[i]))
            .collect();
        let seed = fold_seed(cfg.seed, f);
        let model = build_model(spec, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let fold_cfg = TrainConfig { seed, ..cfg.clone() };
        let (mut model, history) = train(model, &rest, &held, &fold_cfg, |r| on_epoch(f, r))?;
        let train_auc = auc_opt(&scores(&model, &rest)?, &labels_u8(&rest))?;
        let held_scores = scores(&model, &held)?;
        let report = evaluate(&held_scores, &labels_u8(&held), DEFAULT_THRESHOLD)?;
        model.metadata.fold = Some(f);
        model.metadata.train_auc = train_auc;
        model.metadata.validation_auc = report.auc;
        Ok(FoldResult {
            fold: f,
            model,
            history,
            report,
            train_auc,
        })
    });
    let folds = results.into_iter().collect::<Result<Vec<_>>>()?;
    let reports: Vec<EvalReport> = folds.iter().map(|f| f.report.clone()).collect();
    Ok(CvResult {
        aggregate: aggregate_reports(&reports),
        folds,
    })
}
