use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{load_model, HarnessError};
use crate::dataset::{decode_caption, eval_batches, Dataset, Example, Split};
use crate::lang::{Caption, NpPattern, Vocabulary};
use crate::models::{predictions, Model};
use crate::nn::{Graph, Mode};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: usize,
    pub correct: usize,
}

impl GroupStats {
    /// `None` for an empty group.
    pub fn accuracy(&self) -> Option<f64> {
        (self.count > 0).then(|| self.correct as f64 / self.count as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub count: usize,
    pub by_relation: BTreeMap<String, GroupStats>,
    pub by_pattern: BTreeMap<String, GroupStats>,
}

fn np_name(p: NpPattern) -> &'static str {
    match p {
        NpPattern::Color => "color",
        NpPattern::Shape => "shape",
        NpPattern::ColorShape => "color-shape",
    }
}

/// Group key for the attribute patterns of a caption's two noun phrases,
/// e.g. `shape/color-shape`.
pub fn pattern_key(caption: &Caption) -> String {
    let (a, b) = caption.np_patterns();
    format!("{}/{}", np_name(a), np_name(b))
}

/// Eval-mode predictions for every example, in order.
pub fn predict(model: &Model<f32>, examples: &[Example], batch_size: usize) -> Result<Vec<usize>, HarnessError> {
    let mut out = Vec::with_capacity(examples.len());
    for batch in eval_batches(examples, batch_size) {
        let mut g = Graph::new(&model.store, Mode::Eval);
        let f = model.forward(&mut g, &batch)?;
        out.extend(predictions(g.tape.value(f.logits)));
    }
    Ok(out)
}

pub(super) fn accuracy(model: &Model<f32>, examples: &[Example], batch_size: usize) -> Result<f64, HarnessError> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let preds = predict(model, examples, batch_size)?;
    let correct = preds.iter().zip(examples).filter(|(&p, e)| p == e.label as usize).count();
    Ok(correct as f64 / examples.len() as f64)
}

/// Overall accuracy plus breakdowns by relation kind and by noun-phrase
/// pattern. Every relation kind of the dataset's caption type is listed,
/// including ones with no examples.
pub fn evaluate(
    model: &Model<f32>,
    examples: &[Example],
    vocab: &Vocabulary,
    batch_size: usize,
) -> Result<EvalReport, HarnessError> {
    let preds = predict(model, examples, batch_size)?;
    let mut by_relation = BTreeMap::new();
    let mut by_pattern = BTreeMap::new();
    let mut correct = 0;
    for (ex, &p) in examples.iter().zip(&preds) {
        let caption = decode_caption(vocab, ex)?;
        if by_relation.is_empty() {
            for k in caption.caption_type().relation_kinds() {
                by_relation.insert(k.name().to_string(), GroupStats::default());
            }
        }
        let hit = p == ex.label as usize;
        correct += hit as usize;
        for g in [
            by_relation.entry(caption.relation().kind.name().to_string()).or_default(),
            by_pattern.entry(pattern_key(&caption)).or_default(),
        ] {
            g.count += 1;
            g.correct += hit as usize;
        }
    }
    Ok(EvalReport {
        accuracy: if examples.is_empty() { 0.0 } else { correct as f64 / examples.len() as f64 },
        count: examples.len(),
        by_relation,
        by_pattern,
    })
}

/// Evaluates a saved model on one split of a dataset. The dataset must use
/// the vocabulary the model was trained with.
pub fn evaluate_checkpoint(checkpoint: &Path, data: &Path, split: Split) -> Result<EvalReport, HarnessError> {
    let (model, vocab, _) = load_model(checkpoint)?;
    let ds = Dataset::open(data)?;
    if ds.manifest.vocabulary != vocab {
        return Err(HarnessError::VocabularyMismatch);
    }
    if ds.manifest.canvas != model.config.dims().canvas {
        return Err(HarnessError::Data(format!(
            "dataset images are {} pixels, the model expects {}",
            ds.manifest.canvas,
            model.config.dims().canvas
        )));
    }
    let examples = ds.load(split)?;
    evaluate(&model, &examples, &vocab, 256)
}
