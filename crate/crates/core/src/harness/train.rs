use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use super::{eval, Curve, CurveRow, CurveWriter, ExperimentConfig, HarnessError};
use crate::dataset::{batch_iterator, Batch, Dataset, Example, Split};
use crate::lang::Vocabulary;
use crate::models::{predictions, Model, ModelConfig};
use crate::nn::{apply_stat_updates, load_checkpoint, save_checkpoint, Adam, Graph, Mode, NnError};
use crate::seed;

pub const CHECKPOINT_META_KIND: &str = "spatialvqa-model";

const INIT_TAG: u64 = 0x1417;
const ORDER_TAG: u64 = 0x0bde;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub size: usize,
}

/// One Adam step on one batch: forward in train mode, backward, running
/// statistics update, parameter update. A non-finite loss leaves the model
/// untouched.
pub fn train_step(model: &mut Model<f32>, batch: &Batch, adam: &Adam) -> Result<StepStats, NnError> {
    let mut g = Graph::new(&model.store, Mode::Train);
    let out = model.forward(&mut g, batch)?;
    let loss = g.tape.cross_entropy(out.logits, &batch.labels)?;
    let value = g.tape.value(loss).data[0] as f64;
    let correct = predictions(g.tape.value(out.logits))
        .iter()
        .zip(&batch.labels)
        .filter(|(p, l)| p == l)
        .count();
    let stats = StepStats {
        loss: value,
        correct,
        size: batch.size,
    };
    if !value.is_finite() {
        return Ok(stats);
    }
    let grads = g.tape.backward(loss);
    let (tape, updates) = g.into_parts();
    tape.accumulate(&grads, &mut model.store);
    apply_stat_updates(&mut model.store, &updates);
    adam.step(&mut model.store);
    Ok(stats)
}

/// File locations of one seed's run inside an experiment directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub curve: PathBuf,
    pub checkpoint: PathBuf,
    pub diagnostic: PathBuf,
}

impl RunPaths {
    pub fn new(output: &Path, seed: u64) -> Self {
        RunPaths {
            curve: output.join(format!("seed-{seed}.csv")),
            checkpoint: output.join(format!("seed-{seed}.ckpt")),
            diagnostic: output.join(format!("seed-{seed}.diagnostic.ckpt")),
        }
    }
}

fn meta(config: &ModelConfig, vocab: &Vocabulary, seed: u64, iteration: u64) -> serde_json::Value {
    json!({
        "kind": CHECKPOINT_META_KIND,
        "model": config,
        "vocabulary": vocab.words(),
        "seed": seed,
        "iteration": iteration,
    })
}

/// Rebuilds a model from a checkpoint. Returns the model, the vocabulary it
/// was trained with and the iteration it was saved at.
pub fn load_model(path: &Path) -> Result<(Model<f32>, Vocabulary, u64), HarnessError> {
    let ck = load_checkpoint(path)?;
    if ck.meta["kind"] != CHECKPOINT_META_KIND {
        return Err(HarnessError::Data(format!("{} is not a model checkpoint", path.display())));
    }
    let config: ModelConfig =
        serde_json::from_value(ck.meta["model"].clone()).map_err(|e| HarnessError::Data(e.to_string()))?;
    let words: Vec<String> =
        serde_json::from_value(ck.meta["vocabulary"].clone()).map_err(|e| HarnessError::Data(e.to_string()))?;
    let vocab = Vocabulary::from_words(words).map_err(|e| HarnessError::Data(e.to_string()))?;
    let mut model = Model::build(config, vocab.len(), 0)?;
    ck.restore(&mut model.store)?;
    let iteration = ck.meta["iteration"].as_u64().unwrap_or(0);
    Ok((model, vocab, iteration))
}

fn check_compatible(model: &ModelConfig, ds: &Dataset) -> Result<(), HarnessError> {
    let canvas = model.dims().canvas;
    if ds.manifest.canvas != canvas {
        return Err(HarnessError::Data(format!(
            "dataset images are {} pixels, the {} model expects {canvas}",
            ds.manifest.canvas,
            model.preset
        )));
    }
    Ok(())
}

/// Trains one seed of an experiment, appending a curve row and saving a
/// checkpoint every `eval_every` iterations. With `resume`, training
/// continues from the last checkpoint and produces exactly the rows an
/// uninterrupted run would.
pub fn train_run(
    cfg: &ExperimentConfig,
    run_seed: u64,
    resume: bool,
    mut on_row: impl FnMut(&CurveRow),
) -> Result<Curve, HarnessError> {
    cfg.validate()?;
    let ds = Dataset::open(&cfg.dataset)?;
    check_compatible(&cfg.model, &ds)?;
    let train = ds.load(Split::Train)?;
    let val = ds.load(Split::Val)?;
    if train.len() < cfg.batch_size {
        return Err(HarnessError::Data(format!(
            "{} training examples cannot fill a batch of {}",
            train.len(),
            cfg.batch_size
        )));
    }
    let vocab = &ds.manifest.vocabulary;
    fs::create_dir_all(&cfg.output)?;
    let paths = RunPaths::new(&cfg.output, run_seed);
    let mut model = Model::<f32>::build(cfg.model, vocab.len(), seed::derive(&[run_seed, INIT_TAG]))?;

    let mut start = 0;
    let mut curve = Curve::default();
    if resume && paths.checkpoint.exists() {
        let ck = load_checkpoint(&paths.checkpoint)?;
        if ck.meta["model"] != serde_json::to_value(cfg.model).expect("serializable")
            || ck.meta["seed"] != run_seed
        {
            return Err(HarnessError::Config("checkpoint belongs to a different experiment".into()));
        }
        ck.restore(&mut model.store)?;
        start = ck.meta["iteration"].as_u64().unwrap_or(0);
        if paths.curve.exists() {
            curve = Curve::read(&paths.curve)?;
            curve.rows.retain(|r| r.iteration <= start);
        }
        curve.write(&paths.curve)?;
    } else if paths.curve.exists() {
        fs::remove_file(&paths.curve)?;
    }
    let mut writer = CurveWriter::open(&paths.curve)?;

    let adam = Adam::with_lr(cfg.learning_rate);
    let bs = cfg.batch_size;
    let per_epoch = (train.len() / bs) as u64;
    let mut order: Option<(u64, Vec<usize>)> = None;
    let (mut loss_sum, mut correct, mut seen, mut steps) = (0.0, 0usize, 0usize, 0usize);
    for it in start..cfg.iterations {
        let epoch = it / per_epoch;
        if order.as_ref().map(|o| o.0) != Some(epoch) {
            let iter = batch_iterator(&train, bs, seed::derive(&[run_seed, ORDER_TAG, epoch]));
            order = Some((epoch, iter.order().to_vec()));
        }
        let k = (it % per_epoch) as usize;
        let idx = &order.as_ref().expect("set above").1[k * bs..(k + 1) * bs];
        let batch = Batch::from_examples(&train, idx);
        let stats = train_step(&mut model, &batch, &adam)?;
        if !stats.loss.is_finite() {
            let snapshot = paths.diagnostic.clone();
            let mut m = meta(&cfg.model, vocab, run_seed, it);
            m["loss"] = json!(stats.loss.to_string());
            save_checkpoint(&snapshot, &model.store, &m)?;
            return Err(HarnessError::Numeric { iteration: it, snapshot });
        }
        loss_sum += stats.loss;
        correct += stats.correct;
        seen += stats.size;
        steps += 1;
        if (it + 1) % cfg.eval_every == 0 {
            let val_accuracy = eval::accuracy(&model, &val, 256)?;
            let row = CurveRow {
                iteration: it + 1,
                train_accuracy: correct as f64 / seen as f64,
                val_accuracy,
                loss: loss_sum / steps as f64,
            };
            writer.append(&row)?;
            curve.rows.push(row);
            on_row(&row);
            save_checkpoint(&paths.checkpoint, &model.store, &meta(&cfg.model, vocab, run_seed, it + 1))?;
            (loss_sum, correct, seen, steps) = (0.0, 0, 0, 0);
        }
    }
    Ok(curve)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MemorizeReport {
    /// Iterations run, at most the budget.
    pub iterations: usize,
    /// Accuracy of the last training batch.
    pub train_accuracy: f64,
    pub final_loss: f64,
}

/// Trains on one fixed set of examples, used whole as every batch, until
/// all are classified correctly or the budget runs out.
pub fn memorize(
    config: ModelConfig,
    examples: &[Example],
    vocab_size: usize,
    max_iterations: usize,
    init_seed: u64,
) -> Result<MemorizeReport, HarnessError> {
    let mut model = Model::<f32>::build(config, vocab_size, init_seed)?;
    let idx: Vec<usize> = (0..examples.len()).collect();
    let batch = Batch::from_examples(examples, &idx);
    let adam = Adam::default();
    let mut report = MemorizeReport {
        iterations: 0,
        train_accuracy: 0.0,
        final_loss: f64::NAN,
    };
    while report.iterations < max_iterations {
        let stats = train_step(&mut model, &batch, &adam)?;
        report.iterations += 1;
        report.train_accuracy = stats.correct as f64 / stats.size as f64;
        report.final_loss = stats.loss;
        if !stats.loss.is_finite() {
            break;
        }
        if stats.correct == stats.size {
            break;
        }
    }
    Ok(report)
}
