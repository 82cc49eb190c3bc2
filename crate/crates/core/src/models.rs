//! The six small CNN backbones, optionally with an attention block after
//! every pooling stage, ending in a single-logit sigmoid head.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{self, CbamParams, CbamVars, DEFAULT_REDUCTION_RATIO};
use crate::canonical;
use crate::error::{Error, Result};
use crate::tensor::{read_mdt, uniform_init, write_mdt, Graph, Parameter, PoolMode, Scalar, Tensor, Var};

pub const INPUT_SIZE: usize = 20;
pub const DEFAULT_DROPOUT: f64 = 0.25;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const MODEL_MAGIC: &[u8; 5] = b"MDLV1";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelId {
    #[serde(rename = "CNN1")]
    Cnn1,
    #[serde(rename = "CNN2")]
    Cnn2,
    #[serde(rename = "CNN3")]
    Cnn3,
    #[serde(rename = "CNN4")]
    Cnn4,
    #[serde(rename = "CNN5")]
    Cnn5,
    #[serde(rename = "CNN6")]
    Cnn6,
}

impl ModelId {
    pub const ALL: [ModelId; 6] = [
        ModelId::Cnn1,
        ModelId::Cnn2,
        ModelId::Cnn3,
        ModelId::Cnn4,
        ModelId::Cnn5,
        ModelId::Cnn6,
    ];

    /// Output channels of each convolutional layer.
    pub fn channel_plan(self) -> &'static [usize] {
        match self {
            ModelId::Cnn1 => &[32, 64],
            ModelId::Cnn2 => &[64, 128],
            ModelId::Cnn3 => &[32, 32, 64, 64],
            ModelId::Cnn4 => &[64, 64, 128, 128],
            ModelId::Cnn5 => &[32, 64, 128, 256],
            ModelId::Cnn6 => &[64, 128, 256, 512],
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = ModelId::ALL.iter().position(|m| m == self).unwrap_or(0) + 1;
        write!(f, "CNN{i}")
    }
}

impl FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        lower
            .strip_prefix("cnn")
            .and_then(|d| d.parse::<usize>().ok())
            .filter(|d| (1..=6).contains(d))
            .map(|d| ModelId::ALL[d - 1])
            .ok_or_else(|| Error::invalid(format!("unknown model id {s:?} (expected cnn1..cnn6)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub model_id: ModelId,
    pub channel_plan: Vec<usize>,
    pub input_channels: usize,
    pub input_size: usize,
    pub cbam_enabled: bool,
    pub dropout_rate: f64,
    pub reduction_ratio: usize,
}

impl ModelSpec {
    pub fn new(model_id: ModelId, input_channels: usize, cbam_enabled: bool) -> Self {
        ModelSpec {
            model_id,
            channel_plan: model_id.channel_plan().to_vec(),
            input_channels,
            input_size: INPUT_SIZE,
            cbam_enabled,
            dropout_rate: DEFAULT_DROPOUT,
            reduction_ratio: DEFAULT_REDUCTION_RATIO,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_plan != self.model_id.channel_plan() {
            return Err(Error::invalid(format!(
                "channel plan {:?} does not match {} ({:?})",
                self.channel_plan,
                self.model_id,
                self.model_id.channel_plan()
            )));
        }
        if self.input_channels == 0 || self.input_size == 0 {
            return Err(Error::invalid("input channels and size must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if self.reduction_ratio == 0 {
            return Err(Error::invalid("reduction ratio must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let text = canonical::to_string(self)?;
        Ok(Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }
}

/// Indices into [`Model::params`] for one conv block.
#[derive(Clone, Debug)]
struct Block {
    conv: usize,
    gamma: usize,
    beta: usize,
    cbam: Option<usize>,
    pool: bool,
}

/// Batch-norm running statistics of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Provenance carried alongside the weights in a model file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMetadata {
    pub fold: Option<usize>,
    pub best_epoch: Option<usize>,
    /// AUC on the model's own training data (infer mode).
    pub train_auc: Option<f64>,
    pub validation_auc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub spec: ModelSpec,
    /// Declaration order: per block conv weight, bn gamma, bn beta, then the
    /// three attention weights when enabled; finally head weight and bias.
    pub params: Vec<Parameter<T>>,
    pub running: Vec<RunningStats<T>>,
    pub metadata: ModelMetadata,
    blocks: Vec<Block>,
    head_weight: usize,
    head_bias: usize,
}

/// Result of one forward pass.
pub struct Forward<T> {
    /// Probabilities, shaped `[N]`.
    pub probs: Var,
    /// Per-block batch mean and biased variance (train mode only).
    pub batch_stats: Vec<(Vec<T>, Vec<T>)>,
    /// Elements per channel that produced each batch statistic.
    pub stat_counts: Vec<usize>,
}

pub fn conv_param_count(cin: usize, cout: usize, kernel: usize, bias: bool) -> usize {
    cin * cout * kernel * kernel + if bias { cout } else { 0 }
}

pub fn affine_param_count(fan_in: usize, fan_out: usize, bias: bool) -> usize {
    fan_in * fan_out + if bias { fan_out } else { 0 }
}

/// Instantiates `spec` with uniform `±sqrt(1/fan_in)` weights, batch-norm
/// scale 1 and shift 0.
pub fn build_model<T: Scalar, R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Model<T>> {
    spec.validate()?;
    let mut params = Vec::new();
    let mut blocks = Vec::new();
    let mut running = Vec::new();
    let mut cin = spec.input_channels;
    let mut size = spec.input_size;
    for (i, &cout) in spec.channel_plan.iter().enumerate() {
        let name = |s: &str| format!("block{}.{s}", i + 1);
        let conv = params.len();
        params.push(Parameter::new(name("conv.weight"), uniform_init(&[cout, cin, 3, 3], cin * 9, rng)));
        let gamma = params.len();
        params.push(Parameter::new(name("bn.gamma"), Tensor::full(&[cout], T::one())));
        let beta = params.len();
        params.push(Parameter::new(name("bn.beta"), Tensor::zeros(&[cout])));
        let pool = size % 2 == 0;
        if pool {
            size /= 2;
        }
        let cbam = spec.cbam_enabled.then(|| {
            let at = params.len();
            for mut p in CbamParams::<T>::init(cout, spec.reduction_ratio, rng).into_params() {
                p.name = name(&p.name);
                params.push(p);
            }
            at
        });
        blocks.push(Block {
            conv,
            gamma,
            beta,
            cbam,
            pool,
        });
        running.push(RunningStats {
            mean: vec![T::zero(); cout],
            var: vec![T::one(); cout],
        });
        cin = cout;
    }
    let flat = cin * size * size;
    let head_weight = params.len();
    params.push(Parameter::new("head.weight", uniform_init(&[1, flat], flat, rng)));
    let head_bias = params.len();
    params.push(Parameter::new("head.bias", uniform_init(&[1], flat, rng)));
    Ok(Model {
        spec: spec.clone(),
        params,
        running,
        metadata: ModelMetadata::default(),
        blocks,
        head_weight,
        head_bias,
    })
}

impl<T: Scalar> Model<T> {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    /// Spatial side length entering the head.
    pub fn final_size(&self) -> usize {
        self.blocks
            .iter()
            .fold(self.spec.input_size, |s, b| if b.pool { s / 2 } else { s })
    }

    pub fn pool_count(&self) -> usize {
        self.blocks.iter().filter(|b| b.pool).count()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn head_weight_mut(&mut self) -> &mut Parameter<T> {
        &mut self.params[self.head_weight]
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter::new(p.name.clone(), p.value.cast()))
                .collect(),
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    mean: r.mean.iter().map(|v| U::of(v.as_f64())).collect(),
                    var: r.var.iter().map(|v| U::of(v.as_f64())).collect(),
                })
                .collect(),
            metadata: self.metadata.clone(),
            blocks: self.blocks.clone(),
            head_weight: self.head_weight,
            head_bias: self.head_bias,
        }
    }

    fn check_input(&self, dims: &[usize]) -> Result<usize> {
        let s = self.spec.input_size;
        match dims {
            [n, c, h, w] => {
                if *c != self.spec.input_channels {
                    return Err(Error::shape(
                        "predict",
                        "input channels",
                        self.spec.input_channels,
                        *c,
                    ));
                }
                if *h != s || *w != s {
                    return Err(Error::shape("predict", "input size", format!("{s}x{s}"), format!("{h}x{w}")));
                }
                Ok(*n)
            }
            _ => Err(Error::shape("predict", "rank", 4, dims.len())),
        }
    }

    /// Records a forward pass of `x` (`N×C×S×S`) using `params` in place of
    /// the model's own weights.
    pub fn forward_with<R: Rng + ?Sized>(
        &self,
        params: &[Parameter<T>],
        g: &mut Graph<T>,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Forward<T>> {
        let n = self.check_input(g.value(x).dims())?;
        let train = mode == Mode::Train;
        let mut h = x;
        let mut batch_stats = Vec::new();
        let mut stat_counts = Vec::new();
        for (b, stats) in self.blocks.iter().zip(&self.running) {
            let w = g.param(&params[b.conv], b.conv);
            h = g.conv2d(h, w, None, 1)?;
            let gamma = g.param(&params[b.gamma], b.gamma);
            let beta = g.param(&params[b.beta], b.beta);
            if train {
                let [_, _, hh, ww] = g.value(h).dims4("batch_norm")?;
                let (y, mean, var) = g.batch_norm_train(h, gamma, beta, BN_EPS)?;
                batch_stats.push((mean, var));
                stat_counts.push(n * hh * ww);
                h = y;
            } else {
                h = g.batch_norm_infer(h, gamma, beta, &stats.mean, &stats.var, BN_EPS)?;
            }
            h = g.relu(h);
            if b.pool {
                h = g.pool2d(h, PoolMode::Max)?;
            }
            if let Some(at) = b.cbam {
                let vars = CbamVars {
                    w0: g.param(&params[at], at),
                    w1: g.param(&params[at + 1], at + 1),
                    conv7: g.param(&params[at + 2], at + 2),
                };
                h = attention::cbam(g, h, vars)?;
            }
            h = g.dropout(h, self.spec.dropout_rate, rng, train)?;
        }
        let flat = g.value(h).len() / n.max(1);
        let h = g.reshape(h, &[n, flat])?;
        let w = g.param(&params[self.head_weight], self.head_weight);
        let b = g.param(&params[self.head_bias], self.head_bias);
        let logit = g.affine(h, w, Some(b))?;
        let p = g.sigmoid(logit);
        let probs = g.reshape(p, &[n])?;
        Ok(Forward {
            probs,
            batch_stats,
            stat_counts,
        })
    }

    pub fn forward<R: Rng + ?Sized>(&self, g: &mut Graph<T>, x: Var, mode: Mode, rng: &mut R) -> Result<Forward<T>> {
        self.forward_with(&self.params, g, x, mode, rng)
    }

    /// Exponential moving average update of the running statistics
    /// (`momentum` weight on the new batch; unbiased batch variance).
    pub fn update_running(&mut self, fwd: &Forward<T>) {
        let m = T::of(BN_MOMENTUM);
        for ((stats, (mean, var)), &cnt) in self.running.iter_mut().zip(&fwd.batch_stats).zip(&fwd.stat_counts) {
            let unbias = if cnt > 1 {
                T::of(cnt as f64 / (cnt - 1) as f64)
            } else {
                T::one()
            };
            for (r, &b) in stats.mean.iter_mut().zip(mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            for (r, &b) in stats.var.iter_mut().zip(var) {
                *r = (T::one() - m) * *r + m * b * unbias;
            }
        }
    }

    /// Probabilities for a batch `N×C×S×S`. Infer mode is deterministic and
    /// evaluated in chunks; train mode uses batch statistics and dropout but
    /// leaves the running statistics untouched.
    pub fn predict<R: Rng + ?Sized>(&self, batch: &Tensor<T>, mode: Mode, rng: &mut R) -> Result<Vec<T>> {
        let n = self.check_input(batch.dims())?;
        let per = batch.len() / n.max(1);
        let chunk = if mode == Mode::Infer { 256 } else { n.max(1) };
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(chunk.max(1)) {
            let m = chunk.min(n - start);
            let mut dims = batch.dims().to_vec();
            dims[0] = m;
            let part = Tensor::new(dims, batch.data()[start * per..(start + m) * per].to_vec())?;
            let mut g = Graph::new();
            let x = g.input(part);
            let f = self.forward(&mut g, x, mode, rng)?;
            out.extend_from_slice(g.value(f.probs).data());
        }
        Ok(out)
    }
}

// ------------------------------------------------------------------ files

/// Optimizer state stored after the model tensors in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerBlob {
    pub step: u64,
    pub tensors: Vec<Tensor<f32>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    metadata: ModelMetadata,
    optimizer_step: Option<u64>,
    optimizer_tensors: usize,
    spec: ModelSpec,
    spec_hash: String,
    tensors: Vec<String>,
}

fn model_tensors(model: &Model<f32>) -> Vec<(String, Tensor<f32>)> {
    let mut out: Vec<(String, Tensor<f32>)> = model
        .params
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    for (i, r) in model.running.iter().enumerate() {
        let c = r.mean.len();
        out.push((
            format!("block{}.bn.running_mean", i + 1),
            Tensor::new(vec![c], r.mean.clone()).expect("length matches"),
        ));
        out.push((
            format!("block{}.bn.running_var", i + 1),
            Tensor::new(vec![c], r.var.clone()).expect("length matches"),
        ));
    }
    out
}

pub fn write_model<W: Write>(w: &mut W, model: &Model<f32>, optimizer: Option<&OptimizerBlob>) -> Result<()> {
    let tensors = model_tensors(model);
    let header = Header {
        format_version: MODEL_FORMAT_VERSION,
        metadata: model.metadata.clone(),
        optimizer_step: optimizer.map(|o| o.step),
        optimizer_tensors: optimizer.map_or(0, |o| o.tensors.len()),
        spec: model.spec.clone(),
        spec_hash: model.spec.hash()?,
        tensors: tensors.iter().map(|(n, _)| n.clone()).collect(),
    };
    let text = canonical::to_string(&header)?;
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    for (_, t) in &tensors {
        write_mdt(w, t)?;
    }
    if let Some(o) = optimizer {
        for t in &o.tensors {
            write_mdt(w, t)?;
        }
    }
    Ok(())
}

/// Parses a model file; nothing is returned unless every byte checks out.
pub fn read_model<R: Read>(r: &mut R) -> Result<(Model<f32>, Option<OptimizerBlob>)> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated model magic".into()))?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)
        .map_err(|_| Error::Format("truncated model header".into()))?;
    let len = u32::from_le_bytes(len) as usize;
    if len > 1 << 24 {
        return Err(Error::Format("implausible header length".into()));
    }
    let mut text = vec![0u8; len];
    r.read_exact(&mut text)
        .map_err(|_| Error::Format("truncated model header".into()))?;
    let header: Header =
        serde_json::from_slice(&text).map_err(|e| Error::Format(format!("model header: {e}")))?;
    if header.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "model format version {} (expected {MODEL_FORMAT_VERSION})",
            header.format_version
        )));
    }
    if header.spec.hash()? != header.spec_hash {
        return Err(Error::Format("spec hash mismatch".into()));
    }
    let mut skeleton: Model<f32> = build_model(&header.spec, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| Error::Format(format!("model spec: {e}")))?;
    skeleton.metadata = header.metadata;
    let expected = model_tensors(&skeleton);
    if expected.len() != header.tensors.len()
        || expected.iter().zip(&header.tensors).any(|((n, _), h)| n != h)
    {
        return Err(Error::Format("tensor list does not match spec".into()));
    }
    let np = skeleton.params.len();
    for (i, (name, shape)) in expected.iter().enumerate() {
        let t = read_mdt(r)?;
        if t.dims() != shape.dims() {
            return Err(Error::Format(format!(
                "{name}: dims {:?}, expected {:?}",
                t.dims(),
                shape.dims()
            )));
        }
        if i < np {
            skeleton.params[i] = Parameter::new(name.clone(), t);
        } else {
            let j = i - np;
            let stats = &mut skeleton.running[j / 2];
            if j % 2 == 0 {
                stats.mean = t.into_data();
            } else {
                stats.var = t.into_data();
            }
        }
    }
    let optimizer = match header.optimizer_step {
        Some(step) => {
            let mut tensors = Vec::with_capacity(header.optimizer_tensors);
            for _ in 0..header.optimizer_tensors {
                tensors.push(read_mdt(r)?);
            }
            Some(OptimizerBlob { step, tensors })
        }
        None => None,
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after model".into()));
    }
    Ok((skeleton, optimizer))
}

pub fn save_model(model: &Model<f32>, path: &Path) -> Result<()> {
    save_checkpoint(model, None, path)
}

pub fn save_checkpoint(model: &Model<f32>, optimizer: Option<&OptimizerBlob>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(&mut w, model, optimizer)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model<f32>> {
    Ok(load_checkpoint(path)?.0)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, Option<OptimizerBlob>)> {
    read_model(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn channel_plans_and_depth() {
        let m: Model = build_model(&ModelSpec::new(ModelId::Cnn1, 3, true), &mut rng(1)).unwrap();
        assert_eq!(m.blocks.len(), 2);
        assert_eq!(m.params[m.blocks[1].conv].value.dims(), &[64, 32, 3, 3]);
        assert_eq!(m.final_size(), 5);
        let m: Model = build_model(&ModelSpec::new(ModelId::Cnn6, 9, false), &mut rng(1)).unwrap();
        let outs: Vec<usize> = m.blocks.iter().map(|b| m.params[b.conv].value.dims()[0]).collect();
        assert_eq!(outs, vec![64, 128, 256, 512]);
        assert_eq!(m.final_size(), 5);
        assert_eq!(m.pool_count(), 2);
    }

    #[test]
    fn same_seed_same_weights() {
        let spec = ModelSpec::new(ModelId::Cnn3, 9, true);
        let a: Model = build_model(&spec, &mut rng(5)).unwrap();
        let b: Model = build_model(&spec, &mut rng(5)).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn unknown_ids_and_bad_specs() {
        assert!("cnn7".parse::<ModelId>().is_err());
        assert_eq!("CNN3".parse::<ModelId>().unwrap(), ModelId::Cnn3);
        let mut spec = ModelSpec::new(ModelId::Cnn2, 1, false);
        spec.channel_plan = vec![32, 64];
        assert!(build_model::<f32, _>(&spec, &mut rng(0)).is_err());
        assert!(serde_json::from_str::<ModelSpec>(r#"{"model_id":"CNN9"}"#).is_err());
    }

    #[test]
    fn spot_counts() {
        assert_eq!(affine_param_count(10, 1, true), 11);
        assert_eq!(conv_param_count(3, 32, 3, true), 896);
    }

    #[test]
    fn cbam_adds_parameters() {
        for id in ModelId::ALL {
            let with: Model = build_model(&ModelSpec::new(id, 9, true), &mut rng(0)).unwrap();
            let without: Model = build_model(&ModelSpec::new(id, 9, false), &mut rng(0)).unwrap();
            assert!(without.param_count() < with.param_count(), "{id}");
        }
    }

    #[test]
    fn zero_head_gives_half() {
        let mut m: Model<f64> = build_model(&ModelSpec::new(ModelId::Cnn1, 2, true), &mut rng(2)).unwrap();
        m.head_weight_mut().value.data_mut().fill(0.0);
        let hb = m.head_bias;
        m.params[hb].value.data_mut().fill(0.0);
        let x = Tensor::from_fn(&[3, 2, 20, 20], |i| (i as f64 * 0.37).sin());
        let p = m.predict(&x, Mode::Infer, &mut rng(0)).unwrap();
        assert!(p.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn predict_modes() {
        let m: Model<f64> = build_model(&ModelSpec::new(ModelId::Cnn3, 2, true), &mut rng(3)).unwrap();
        let x = Tensor::from_fn(&[4, 2, 20, 20], |i| (i as f64 * 0.11).cos() * 2.0);
        let a = m.predict(&x, Mode::Infer, &mut rng(0)).unwrap();
        let b = m.predict(&x, Mode::Infer, &mut rng(9)).unwrap();
        assert_eq!(a, b);
        let t = m.predict(&x, Mode::Train, &mut rng(0)).unwrap();
        assert!(t.iter().chain(&a).all(|v| v.is_finite() && *v > 0.0 && *v < 1.0));
        assert_ne!(a, t);
        let bad = Tensor::zeros(&[1, 3, 20, 20]);
        let err = m.predict(&bad, Mode::Infer, &mut rng(0)).unwrap_err().to_string();
        assert!(err.contains("expected 2, found 3"), "{err}");
    }

    #[test]
    fn save_load_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mdl");
        let mut m: Model = build_model(&ModelSpec::new(ModelId::Cnn1, 2, true), &mut rng(4)).unwrap();
        m.running[0].mean[3] = 0.25;
        m.metadata.train_auc = Some(0.75);
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.running, m.running);
        assert_eq!(back.spec, m.spec);
        assert_eq!(back.metadata, m.metadata);
        let x = Tensor::from_fn(&[2, 2, 20, 20], |i| (i as f32 * 0.3).sin());
        assert_eq!(
            m.predict(&x, Mode::Infer, &mut rng(0)).unwrap(),
            back.predict(&x, Mode::Infer, &mut rng(0)).unwrap()
        );

        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.mdl");
        std::fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
        assert!(load_model(&cut).is_err());

        // tamper with the spec but keep the stored hash
        let text = String::from_utf8_lossy(&bytes[9..]).to_string();
        let tampered = text.replacen("\"dropout_rate\":0.25", "\"dropout_rate\":0.35", 1);
        let mut forged = bytes[..9].to_vec();
        forged.extend_from_slice(tampered.as_bytes());
        let bad = dir.path().join("bad.mdl");
        std::fs::write(&bad, &forged).unwrap();
        let err = load_model(&bad).unwrap_err().to_string();
        assert!(err.contains("hash"), "{err}");
    }
}
