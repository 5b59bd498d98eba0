//! Training, evaluation, curve aggregation and reporting.

mod curve;
mod eval;
mod train;

pub use curve::{
    aggregate_runs, read_aggregate, write_aggregate, AggregateRow, Curve, CurveRow, CurveWriter, AGGREGATE_HEADER,
    CURVE_HEADER,
};
pub use eval::{evaluate, evaluate_checkpoint, pattern_key, predict, EvalReport, GroupStats};
pub use train::{
    load_model, memorize, train_run, train_step, MemorizeReport, RunPaths, StepStats, CHECKPOINT_META_KIND,
};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetError;
use crate::models::{ConfigError, ModelConfig};
use crate::nn::NnError;
use crate::preset::Preset;

pub const BATCH_SIZE: usize = 64;
pub const LEARNING_RATE: f64 = 3e-4;
pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("non-finite loss at iteration {iteration}; snapshot written to {}", snapshot.display())]
    Numeric { iteration: u64, snapshot: PathBuf },
    #[error("vocabulary of the checkpoint does not match the dataset")]
    VocabularyMismatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit code: 2 configuration, 3 data, 4 numeric, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Data(_) | HarnessError::VocabularyMismatch => 3,
            HarnessError::Numeric { .. } => 4,
            HarnessError::Io(_) => 1,
        }
    }
}

impl From<DatasetError> for HarnessError {
    fn from(e: DatasetError) -> Self {
        HarnessError::Data(e.to_string())
    }
}

impl From<ConfigError> for HarnessError {
    fn from(e: ConfigError) -> Self {
        HarnessError::Config(e.to_string())
    }
}

impl From<NnError> for HarnessError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Io(io) => HarnessError::Io(io),
            NnError::Checkpoint(msg) => HarnessError::Data(format!("checkpoint: {msg}")),
            other => HarnessError::Data(other.to_string()),
        }
    }
}

/// Iteration budget from the experiment protocol: 200k at full scale, half
/// that for unimodal baselines; desk scale uses 30k throughout.
pub fn default_iterations(preset: Preset, model: &ModelConfig) -> u64 {
    match preset {
        Preset::Full if model.zero_modality.is_some() => 100_000,
        Preset::Full => 200_000,
        Preset::Desk => 30_000,
    }
}

pub fn default_eval_every(preset: Preset) -> u64 {
    match preset {
        Preset::Full => 1000,
        Preset::Desk => 250,
    }
}

fn default_batch_size() -> usize {
    BATCH_SIZE
}

fn default_learning_rate() -> f64 {
    LEARNING_RATE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub model: ModelConfig,
    pub iterations: u64,
    pub eval_every: u64,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    pub preset: Preset,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
}

impl ExperimentConfig {
    pub fn new(dataset: PathBuf, model: ModelConfig, output: PathBuf) -> Self {
        let preset = model.preset;
        ExperimentConfig {
            dataset,
            iterations: default_iterations(preset, &model),
            eval_every: default_eval_every(preset),
            model,
            seeds: DEFAULT_SEEDS.to_vec(),
            output,
            preset,
            batch_size: BATCH_SIZE,
            learning_rate: LEARNING_RATE,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.iterations < 1 {
            return bad("iterations must be at least 1");
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.eval_every < 1 || self.iterations % self.eval_every != 0 {
            return bad("eval_every must divide iterations");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.preset != self.model.preset {
            return bad("model preset differs from experiment preset");
        }
        self.model.validate()?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn name(&self) -> String {
        self.model.name()
    }
}

/// Final mean/min/max validation accuracy of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub iteration: u64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Writes every aggregate curve in long form (`experiment` plus the
/// aggregate columns) and returns the final-row comparison table.
pub fn emit_report(
    experiments: &[(String, Vec<AggregateRow>)],
    curves_out: &std::path::Path,
) -> Result<Vec<ReportRow>, HarnessError> {
    let mut text = format!("experiment,{AGGREGATE_HEADER}\n");
    let mut table = Vec::new();
    for (name, rows) in experiments {
        for r in rows {
            text.push_str(&format!("{name},{},{},{},{}\n", r.iteration, r.mean, r.min, r.max));
        }
        if let Some(last) = rows.last() {
            table.push(ReportRow {
                experiment: name.clone(),
                iteration: last.iteration,
                mean: last.mean,
                min: last.min,
                max: last.max,
            });
        }
    }
    std::fs::write(curves_out, text)?;
    Ok(table)
}

pub fn write_table(rows: &[ReportRow], path: &std::path::Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::Data(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
