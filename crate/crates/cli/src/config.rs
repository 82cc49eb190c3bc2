//! Run configuration. Precedence, lowest first: built-in defaults, the
//! `--config` file, command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stackvet::datagen::{Combo, GenConfig};
use stackvet::attention::DEFAULT_REDUCTION_RATIO;
use stackvet::models::{ModelId, ModelSpec, DEFAULT_DROPOUT};
use stackvet::training::TrainConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub model_id: ModelId,
    pub cbam: bool,
    pub dropout_rate: f64,
    pub reduction_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            model_id: ModelId::Cnn3,
            cbam: true,
            dropout_rate: DEFAULT_DROPOUT,
            reduction_ratio: DEFAULT_REDUCTION_RATIO,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, input_channels: usize) -> ModelSpec {
        ModelSpec {
            dropout_rate: self.dropout_rate,
            reduction_ratio: self.reduction_ratio,
            ..ModelSpec::new(self.model_id, input_channels, self.cbam)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TriageConfig {
    /// Lattice spacing of the threshold grid.
    pub step: f64,
    pub min_precision: f64,
    pub min_inverse_precision: f64,
    pub histogram_bins: usize,
}

impl Default for TriageConfig {
    fn default() -> Self {
        TriageConfig {
            step: 0.01,
            min_precision: 0.99,
            min_inverse_precision: 0.95,
            histogram_bins: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Validation,
    #[default]
    Test,
    All,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub models: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub policy: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

/// Everything a pipeline run depends on. `seed` drives generation, the
/// split, fold assignment and training; `train.seed` is replaced by it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub gen: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub folds: usize,
    pub eval_split: SplitName,
    pub triage: TriageConfig,
    pub port: u16,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            gen: GenConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            folds: 5,
            eval_split: SplitName::Test,
            triage: TriageConfig::default(),
            port: 8080,
            paths: Paths::default(),
        }
    }
}

/// Flag values that override the config file when present.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub combo: Option<Combo>,
    pub model: Option<ModelId>,
    pub cbam: Option<bool>,
    pub port: Option<u16>,
    pub samples: Option<usize>,
    pub epochs: Option<usize>,
    pub folds: Option<usize>,
    pub split: Option<SplitName>,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(c) = &o.combo {
            self.gen.combo = c.clone();
        }
        if let Some(m) = o.model {
            self.model.model_id = m;
        }
        if let Some(c) = o.cbam {
            self.model.cbam = c;
        }
        if let Some(p) = o.port {
            self.port = p;
        }
        if let Some(n) = o.samples {
            self.gen.samples = n;
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
            self.train.patience = self.train.patience.min(e);
        }
        if let Some(k) = o.folds {
            self.folds = k;
        }
        if let Some(s) = o.split {
            self.eval_split = s;
        }
        let p = &o.paths;
        for (dst, src) in [
            (&mut self.paths.data, &p.data),
            (&mut self.paths.models, &p.models),
            (&mut self.paths.scores, &p.scores),
            (&mut self.paths.policy, &p.policy),
            (&mut self.paths.out, &p.out),
            (&mut self.paths.log, &p.log),
        ] {
            if src.is_some() {
                dst.clone_from(src);
            }
        }
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: stackvet::Error| CliError::Usage(e.to_string());
        self.gen.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        self.model.spec(1).validate().map_err(usage)?;
        if self.folds < 2 {
            return Err(CliError::Usage(format!("folds must be >= 2, got {}", self.folds)));
        }
        stackvet::triage::lattice(self.triage.step).map_err(usage)?;
        if self.triage.histogram_bins == 0 {
            return Err(CliError::Usage("histogram_bins must be positive".into()));
        }
        Ok(())
    }
}
