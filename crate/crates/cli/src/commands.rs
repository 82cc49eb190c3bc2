use std::fmt::Write as _;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stackvet::canonical;
use stackvet::datagen::{generate, read_dataset, split, write_dataset, Dataset, DatasetSplit, LabelSummary, Sample};
use stackvet::evaluation::{
    evaluate_ensemble, roc_csv, AggregateReport, EnsembleReport, EvalReport, DEFAULT_THRESHOLD,
};
use stackvet::models::{load_model, save_model, Model, ModelSpec};
use stackvet::training::{cross_validate, scores, TrainHistory};
use stackvet::triage::{
    curves_csv, grid_search, histogram_csv, precision_curves, score_histogram, select_operating_point, table_csv,
    triage_stats, TriagePolicy, TriageRow, TriageStats,
};
use stackvet_review::ReviewState;

use crate::config::{RunConfig, SplitName};
use crate::CliError;

pub const SPLIT_FILE: &str = "split.json";
pub const CONFIG_FILE: &str = "config.json";
pub const CV_REPORT: &str = "cv_report.json";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const ROC_CSV: &str = "roc.csv";
pub const SCORES_CSV: &str = "scores.csv";
pub const POLICY_FILE: &str = "policy.json";
pub const TABLE_CSV: &str = "triage_table.csv";
pub const HISTOGRAM_CSV: &str = "histogram.csv";
pub const CURVES_CSV: &str = "precision_curves.csv";

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    p.as_deref()
        .ok_or_else(|| CliError::Usage(format!("{flag} is required (flag or config paths)")))
}

/// Creates `dir` and proves it is writable; failures are usage errors.
fn prepare_out(dir: &Path) -> Result<(), CliError> {
    let probe = dir.join(".write-probe");
    fs::create_dir_all(dir)
        .and_then(|_| fs::write(&probe, b""))
        .and_then(|_| fs::remove_file(&probe))
        .map_err(|e| CliError::Usage(format!("output directory {} is not writable: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Other(format!("writing {}: {e}", path.display())))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    let mut text = canonical::to_string(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Other(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

// ------------------------------------------------------------------- gen

fn summary_table(ds: &Dataset, sp: &DatasetSplit) -> Result<String, CliError> {
    let mut out = String::new();
    let _ = writeln!(out, "{:<12}{:>22}{:>25}{:>8}", "split", "Images with Objects", "Images without Objects", "total");
    let mut row = |name: &str, s: LabelSummary| {
        let _ = writeln!(out, "{name:<12}{:>22}{:>25}{:>8}", s.positive, s.negative, s.total);
    };
    for (name, ids) in [("train", &sp.train), ("validation", &sp.validation), ("test", &sp.test)] {
        row(name, LabelSummary::of(ds.select(ids)?.into_iter()));
    }
    row("total", ds.summary());
    Ok(out)
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<String, CliError> {
    let out = required(&cfg.paths.out, "--out")?;
    prepare_out(out)?;
    let ds = generate(&cfg.gen, cfg.seed)?;
    let sp = split(&ds.samples, cfg.seed)?;
    write_dataset(&ds, out)?;
    write_json(&out.join(SPLIT_FILE), &sp)?;
    // paths are where this run happened, not what it produced
    let recorded = RunConfig {
        paths: Default::default(),
        ..cfg.clone()
    };
    write_json(&out.join(CONFIG_FILE), &recorded)?;
    let mut msg = format!(
        "wrote {} samples ({} channels, combo {}) to {}\n",
        ds.samples.len(),
        ds.channels(),
        ds.combo,
        out.display()
    );
    msg.push_str(&summary_table(&ds, &sp)?);
    Ok(msg)
}

// ----------------------------------------------------------------- train

fn load_data(cfg: &RunConfig) -> Result<(Dataset, DatasetSplit), CliError> {
    let dir = required(&cfg.paths.data, "--data")?;
    let ds = read_dataset(dir)?;
    let sp: DatasetSplit = read_json(&dir.join(SPLIT_FILE))?;
    Ok((ds, sp))
}

fn pick<'a>(ds: &'a Dataset, sp: &DatasetSplit, which: SplitName) -> Result<Vec<&'a Sample>, CliError> {
    let ids: Vec<String> = match which {
        SplitName::Train => sp.train.clone(),
        SplitName::Validation => sp.validation.clone(),
        SplitName::Test => sp.test.clone(),
        SplitName::All => return Ok(ds.samples.iter().collect()),
    };
    Ok(ds.select(&ids)?)
}

pub fn model_file(fold: usize) -> String {
    format!("fold{fold}.model")
}

pub fn log_file(fold: usize) -> String {
    format!("fold{fold}.log.ndjson")
}

#[derive(Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub train_size: usize,
    pub held_out_size: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub train_auc: Option<f64>,
    pub held_out: EvalReport,
}

#[derive(Serialize, Deserialize)]
pub struct CvReport {
    pub spec: ModelSpec,
    pub param_count: usize,
    pub seed: u64,
    pub samples: usize,
    pub folds: Vec<FoldSummary>,
    pub aggregate: AggregateReport,
}

fn history_ndjson(h: &TrainHistory) -> Result<String, CliError> {
    let mut s = String::new();
    for e in &h.epochs {
        s.push_str(&canonical::to_string(e)?);
        s.push('\n');
    }
    Ok(s)
}

fn fmt_agg(a: &stackvet::evaluation::Aggregate) -> String {
    match (a.mean, a.std) {
        (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
        _ => "undefined".into(),
    }
}

/// Cross-validation on train + validation; the test split stays unseen.
pub fn cmd_train(cfg: &RunConfig) -> Result<String, CliError> {
    let out = required(&cfg.paths.out, "--out")?;
    let (ds, sp) = load_data(cfg)?;
    prepare_out(out)?;
    let mut samples = pick(&ds, &sp, SplitName::Train)?;
    samples.extend(pick(&ds, &sp, SplitName::Validation)?);
    let spec = cfg.model.spec(ds.channels());
    let cv = cross_validate(&samples, &spec, &cfg.train, cfg.folds, |_, _| {})?;
    let mut folds = Vec::new();
    for f in &cv.folds {
        save_model(&f.model, &out.join(model_file(f.fold)))?;
        write_text(&out.join(log_file(f.fold)), &history_ndjson(&f.history)?)?;
        let held = f.report.counts.total() as usize;
        folds.push(FoldSummary {
            fold: f.fold,
            train_size: samples.len() - held,
            held_out_size: held,
            best_epoch: f.history.best_epoch,
            epochs_run: f.history.epochs.len(),
            stopped_early: f.history.stopped_early,
            train_auc: f.train_auc,
            held_out: f.report.clone(),
        });
    }
    let report = CvReport {
        param_count: cv.folds[0].model.param_count(),
        spec,
        seed: cfg.seed,
        samples: samples.len(),
        folds,
        aggregate: cv.aggregate.clone(),
    };
    write_json(&out.join(CV_REPORT), &report)?;
    let a = &cv.aggregate;
    let mut msg = format!(
        "{}-fold CV of {}{} ({} parameters) on {} samples\n",
        cfg.folds,
        report.spec.model_id,
        if report.spec.cbam_enabled { "+CBAM" } else { "" },
        report.param_count,
        samples.len()
    );
    for (name, agg) in [
        ("accuracy", &a.accuracy),
        ("recall", &a.recall),
        ("precision", &a.precision),
        ("inverse_precision", &a.inverse_precision),
        ("f1", &a.f1),
        ("auc", &a.auc),
    ] {
        let _ = writeln!(msg, "  {name:<18}{}", fmt_agg(agg));
    }
    Ok(msg)
}

// ------------------------------------------------------------------ eval

/// Fold models in `dir`, by fold number.
pub fn load_models(dir: &Path) -> Result<Vec<(String, Model)>, CliError> {
    let mut found = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| CliError::Other(format!("reading {}: {e}", dir.display())))?;
    for e in entries {
        let name = e.map_err(|e| CliError::Other(e.to_string()))?.file_name().to_string_lossy().into_owned();
        if let Some(k) = name.strip_prefix("fold").and_then(|r| r.strip_suffix(".model")) {
            if let Ok(k) = k.parse::<usize>() {
                found.push((k, name));
            }
        }
    }
    if found.is_empty() {
        return Err(CliError::Other(format!("no fold*.model files in {}", dir.display())));
    }
    found.sort();
    found
        .into_iter()
        .map(|(_, name)| Ok((name.clone(), load_model(&dir.join(&name))?)))
        .collect()
}

fn check_channels(models: &[(String, Model)], ds: &Dataset) -> Result<(), CliError> {
    for (name, m) in models {
        if m.spec.input_channels != ds.channels() {
            return Err(CliError::Other(format!(
                "channel mismatch: {name} expects {} input channels, dataset (combo {}) has {}",
                m.spec.input_channels,
                ds.combo,
                ds.channels()
            )));
        }
    }
    Ok(())
}

/// Per-model scores and their mean, aligned with `samples`.
pub fn ensemble_scores(models: &[(String, Model)], samples: &[&Sample]) -> Result<(Vec<Vec<f64>>, Vec<f64>), CliError> {
    let per: Vec<Vec<f64>> = models
        .iter()
        .map(|(_, m)| scores(m, samples))
        .collect::<stackvet::Result<_>>()?;
    let mean = (0..samples.len())
        .map(|i| per.iter().map(|s| s[i]).sum::<f64>() / per.len() as f64)
        .collect();
    Ok((per, mean))
}

#[derive(Serialize, Deserialize)]
pub struct ModelEval {
    pub file: String,
    pub fold: Option<usize>,
    pub train_auc: Option<f64>,
    pub auc: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct EvalDocument {
    pub split: SplitName,
    pub samples: usize,
    pub ensemble: EnsembleReport,
    pub members: Vec<ModelEval>,
}

pub fn scores_csv(samples: &[&Sample], mean: &[f64]) -> String {
    let mut s = String::from("id,label,score\n");
    for (x, m) in samples.iter().zip(mean) {
        let _ = writeln!(s, "{},{},{}", x.id, x.label, m);
    }
    s
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<String, CliError> {
    let out = required(&cfg.paths.out, "--out")?;
    let models_dir = required(&cfg.paths.models, "--models")?;
    let (ds, sp) = load_data(cfg)?;
    let models = load_models(models_dir)?;
    check_channels(&models, &ds)?;
    prepare_out(out)?;
    let samples = pick(&ds, &sp, cfg.eval_split)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let (per, mean) = ensemble_scores(&models, &samples)?;
    let refs: Vec<&[f64]> = per.iter().map(Vec::as_slice).collect();
    let train_aucs: Vec<Option<f64>> = models.iter().map(|(_, m)| m.metadata.train_auc).collect();
    let ensemble = evaluate_ensemble(&refs, &labels, DEFAULT_THRESHOLD, &train_aucs)?;
    let members = models
        .iter()
        .zip(&per)
        .map(|((file, m), s)| {
            let r = stackvet::evaluation::evaluate(s, &labels, DEFAULT_THRESHOLD)?;
            Ok(ModelEval {
                file: file.clone(),
                fold: m.metadata.fold,
                train_auc: m.metadata.train_auc,
                auc: r.auc,
                f1: r.metrics.f1,
            })
        })
        .collect::<stackvet::Result<Vec<_>>>()?;
    let doc = EvalDocument {
        split: cfg.eval_split,
        samples: samples.len(),
        ensemble,
        members,
    };
    write_json(&out.join(EVAL_REPORT), &doc)?;
    write_text(&out.join(ROC_CSV), &roc_csv(&doc.ensemble.roc))?;
    write_text(&out.join(SCORES_CSV), &scores_csv(&samples, &mean))?;
    let e = &doc.ensemble;
    let f = |x: Option<f64>| x.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    Ok(format!(
        "{}-model majority vote on {} {} samples: accuracy {} f1 {} precision {} recall {}; mean-score AUC {} (training {}, delta {})\n",
        e.models,
        doc.samples,
        format!("{:?}", cfg.eval_split).to_lowercase(),
        f(e.metrics.accuracy),
        f(e.metrics.f1),
        f(e.metrics.precision),
        f(e.metrics.recall),
        f(e.auc),
        f(e.train_auc),
        f(e.delta_auc)
    ))
}

// ---------------------------------------------------------------- triage

pub fn read_scores_csv(path: &Path) -> Result<(Vec<String>, Vec<u8>, Vec<f64>), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Other(format!("reading {}: {e}", path.display())))?;
    let mut lines = text.lines();
    if lines.next() != Some("id,label,score") {
        return Err(CliError::Other(format!("{}: expected header id,label,score", path.display())));
    }
    let (mut ids, mut labels, mut scores) = (Vec::new(), Vec::new(), Vec::new());
    for (n, line) in lines.enumerate() {
        let bad = || CliError::Other(format!("{}:{}: malformed row {line:?}", path.display(), n + 2));
        let mut parts = line.split(',');
        let (Some(id), Some(l), Some(s), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(bad());
        };
        let label: u8 = l.parse().ok().filter(|&v| v <= 1).ok_or_else(bad)?;
        let score: f64 = s.parse().ok().filter(|v: &f64| (0.0..=1.0).contains(v)).ok_or_else(bad)?;
        ids.push(id.to_string());
        labels.push(label);
        scores.push(score);
    }
    if scores.is_empty() {
        return Err(CliError::Other(format!("{}: no scores", path.display())));
    }
    Ok((ids, labels, scores))
}

#[derive(Serialize, Deserialize)]
pub struct PolicyDocument {
    pub policy: TriagePolicy,
    pub min_precision: f64,
    pub min_inverse_precision: f64,
    pub step: f64,
    pub selected: TriageRow,
    pub stats: TriageStats,
}

pub fn cmd_triage(cfg: &RunConfig) -> Result<String, CliError> {
    let out = required(&cfg.paths.out, "--out")?;
    let path = required(&cfg.paths.scores, "--scores")?;
    let (_, labels, scores) = read_scores_csv(path)?;
    prepare_out(out)?;
    let t = &cfg.triage;
    let table = grid_search(&scores, &labels, t.step)?;
    write_text(&out.join(TABLE_CSV), &table_csv(&table))?;
    write_text(
        &out.join(HISTOGRAM_CSV),
        &histogram_csv(&score_histogram(&scores, &labels, t.histogram_bins)?),
    )?;
    write_text(&out.join(CURVES_CSV), &curves_csv(&precision_curves(&scores, &labels, t.step)?))?;
    let selected = match select_operating_point(&table, t.min_precision, t.min_inverse_precision) {
        Ok(r) => r,
        Err(stackvet::Error::NoFeasiblePolicy) => {
            let _ = fs::remove_file(out.join(POLICY_FILE));
            return Err(CliError::Infeasible(format!(
                "no threshold pair on the {} lattice reaches precision >= {} and inverse precision >= {}",
                t.step, t.min_precision, t.min_inverse_precision
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let policy = selected.policy();
    let stats = triage_stats(&scores, &labels, &policy)?;
    let doc = PolicyDocument {
        policy,
        min_precision: t.min_precision,
        min_inverse_precision: t.min_inverse_precision,
        step: t.step,
        selected,
        stats,
    };
    write_json(&out.join(POLICY_FILE), &doc)?;
    Ok(format!(
        "policy pos {} neg {}: {} auto-positive, {} auto-negative, {} to review; remaining ratio {:.4} (task reduction {:.2}%)\n",
        policy.positive_threshold,
        policy.negative_threshold,
        stats.auto_positive,
        stats.auto_negative,
        stats.human_review,
        stats.remaining_ratio,
        100.0 * (1.0 - stats.remaining_ratio)
    ))
}

// ----------------------------------------------------------------- serve

/// Scores the configured split with the ensemble and builds the review
/// state. Split out from `cmd_serve` so it can be checked without a socket.
pub fn review_state(cfg: &RunConfig) -> Result<ReviewState, CliError> {
    let models_dir = required(&cfg.paths.models, "--models")?;
    let policy_path = required(&cfg.paths.policy, "--policy")?;
    let (ds, sp) = load_data(cfg)?;
    let models = load_models(models_dir)?;
    check_channels(&models, &ds)?;
    let doc: PolicyDocument = read_json(policy_path)?;
    let picked: Vec<Sample> = pick(&ds, &sp, cfg.eval_split)?.into_iter().cloned().collect();
    let refs: Vec<&Sample> = picked.iter().collect();
    let (_, mean) = ensemble_scores(&models, &refs)?;
    let subset = Dataset {
        combo: ds.combo.clone(),
        samples: picked,
        standardization: ds.standardization,
    };
    let log = match &cfg.paths.log {
        Some(p) => p.clone(),
        None => required(&cfg.paths.out, "--out or --log")?.join("verdicts.ndjson"),
    };
    if let Some(parent) = log.parent().filter(|p| !p.as_os_str().is_empty()) {
        prepare_out(parent)?;
    }
    Ok(ReviewState::new(subset, mean, doc.policy, &log)?)
}

pub fn cmd_serve(cfg: &RunConfig) -> Result<String, CliError> {
    let state = review_state(cfg)?;
    let stats = state.stats();
    let addr = SocketAddr::from(([127, 0, 0, 1], cfg.port));
    eprintln!(
        "serving {} review items ({} pending) on http://{addr}; verdicts -> {}",
        stats.pending + stats.reviewed,
        stats.pending,
        state.log_path().display()
    );
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Other(e.to_string()))?;
    rt.block_on(stackvet_review::serve(state, addr))
        .map_err(|e| CliError::Other(format!("review service on {addr}: {e}")))?;
    Ok("review service stopped\n".into())
}
