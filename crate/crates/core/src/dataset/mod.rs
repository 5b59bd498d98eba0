//! Reproducible, label-balanced datasets of (image, caption, agreement)
//! triples, stored as checksummed binary shards plus a JSON manifest.

mod batch;
mod shard;

pub use batch::{batch_iterator, eval_batches, Batch, BatchIter};
pub use shard::{
    read_examples, verify_checksum, write_examples, ShardHeader, ShardReader, ShardWriter,
    FORMAT_VERSION,
};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lang::{
    generate_caption, parse, realize, Caption, CaptionType, Encoded, Vocabulary, MAX_TOKENS,
};
use crate::par;
use crate::preset::Preset;
use crate::scene::{render, sample_scene, Image, Scene, SceneConfig};
use crate::seed;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCABULARY_FILE: &str = "vocabulary.json";
/// Scenes tried per record before the build aborts.
pub const SCENE_RESAMPLES: u32 = 64;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checksum mismatch in {path}")]
    Checksum { path: PathBuf },
    #[error("truncated or malformed record {record} in {path}")]
    Truncated { path: PathBuf, record: usize },
    #[error("format version {found} not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("{path} is not a shard file")]
    BadMagic { path: PathBuf },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("record {index} of {split}: {reason}")]
    Generation {
        split: Split,
        index: usize,
        reason: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(format!("unknown split '{s}' (expected train or val)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub image: Image,
    pub tokens: Encoded,
    /// Agreement between caption and image, i.e. the yes/no answer.
    pub label: bool,
    pub scene_seed: u32,
    pub caption_seed: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardInfo {
    pub split: Split,
    pub file: String,
    pub count: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub caption_type: CaptionType,
    pub preset: Preset,
    pub canvas: usize,
    pub max_len: usize,
    pub master_seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub vocabulary: Vocabulary,
    pub shards: Vec<ShardInfo>,
}

impl DatasetManifest {
    pub fn scene_config(&self) -> SceneConfig {
        scene_config(self.caption_type, self.canvas)
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
        }
    }
}

pub fn scene_config(caption_type: CaptionType, canvas: usize) -> SceneConfig {
    SceneConfig {
        allow_overlap: caption_type.needs_overlap(),
        ..SceneConfig::with_canvas(canvas)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub caption_type: CaptionType,
    pub n_train: usize,
    pub n_val: usize,
    pub master_seed: u64,
    pub preset: Preset,
    pub shard_size: usize,
}

impl BuildConfig {
    pub fn new(caption_type: CaptionType, preset: Preset, master_seed: u64) -> Self {
        BuildConfig {
            caption_type,
            n_train: preset.train_instances(),
            n_val: preset.val_instances(),
            master_seed,
            preset,
            shard_size: 10_000,
        }
    }
}

/// Seeds of record `index`: the caption seed is fixed per record, the scene
/// seed advances with each resample.
fn record_seeds(master: u64, split: Split, index: usize, attempt: u32) -> (u32, u32) {
    let caption = seed::derive_u32(&[master, split.tag(), index as u64, 0]);
    let scene = seed::derive_u32(&[master, split.tag(), index as u64, 1, attempt as u64]);
    (scene, caption)
}

/// Target label of record `index`; alternation gives exact balance.
pub fn target_label(index: usize) -> bool {
    index % 2 == 0
}

/// Generated record before image rendering.
#[derive(Clone, Debug)]
pub struct Instance {
    pub scene: Scene,
    pub caption: Caption,
    pub label: bool,
    pub scene_seed: u32,
    pub caption_seed: u32,
}

pub fn generate_instance(
    caption_type: CaptionType,
    canvas: usize,
    master_seed: u64,
    split: Split,
    index: usize,
) -> Result<Instance, DatasetError> {
    let cfg = scene_config(caption_type, canvas);
    let target = target_label(index);
    let mut last = String::new();
    for attempt in 0..SCENE_RESAMPLES {
        let (scene_seed, caption_seed) = record_seeds(master_seed, split, index, attempt);
        let scene = match sample_scene(scene_seed as u64, &cfg) {
            Ok(s) => s,
            Err(e) => {
                last = e.to_string();
                continue;
            }
        };
        match generate_caption(&scene, caption_type, target, caption_seed as u64) {
            Ok((caption, label)) => {
                return Ok(Instance {
                    scene,
                    caption,
                    label,
                    scene_seed,
                    caption_seed,
                })
            }
            Err(e) => last = e.to_string(),
        }
    }
    Err(DatasetError::Generation {
        split,
        index,
        reason: format!("gave up after {SCENE_RESAMPLES} scenes: {last}"),
    })
}

fn to_example(vocab: &Vocabulary, inst: &Instance) -> Example {
    let tokens = vocab
        .encode(&realize(&inst.caption), MAX_TOKENS)
        .expect("realized words are in the vocabulary");
    Example {
        image: render(&inst.scene),
        tokens,
        label: inst.label,
        scene_seed: inst.scene_seed,
        caption_seed: inst.caption_seed,
    }
}

/// Generates records `start..start + count` of a split, in index order.
pub fn generate_examples(
    caption_type: CaptionType,
    canvas: usize,
    master_seed: u64,
    split: Split,
    start: usize,
    count: usize,
) -> Result<Vec<Example>, DatasetError> {
    let vocab = Vocabulary::standard();
    par::map_indexed(count, |k| {
        generate_instance(caption_type, canvas, master_seed, split, start + k)
            .map(|inst| to_example(&vocab, &inst))
    })
    .into_iter()
    .collect()
}

/// Materializes train and validation shards plus the manifest in `out`.
pub fn build_dataset(cfg: &BuildConfig, out: &Path) -> Result<DatasetManifest, DatasetError> {
    if cfg.n_train == 0 || cfg.n_val == 0 || cfg.shard_size == 0 {
        return Err(DatasetError::Manifest(
            "instance counts and shard size must be positive".into(),
        ));
    }
    fs::create_dir_all(out)?;
    let canvas = cfg.preset.canvas();
    let vocab = Vocabulary::standard();
    let mut shards = Vec::new();
    for (split, total) in [(Split::Train, cfg.n_train), (Split::Val, cfg.n_val)] {
        let mut start = 0;
        let mut k = 0;
        while start < total {
            let count = cfg.shard_size.min(total - start);
            let examples =
                generate_examples(cfg.caption_type, canvas, cfg.master_seed, split, start, count)?;
            let file = format!("{}-{:05}.bin", split.name(), k);
            let sha256 = write_examples(&out.join(&file), canvas, MAX_TOKENS, &examples)?;
            shards.push(ShardInfo {
                split,
                file,
                count,
                sha256,
            });
            start += count;
            k += 1;
        }
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        caption_type: cfg.caption_type,
        preset: cfg.preset,
        canvas,
        max_len: MAX_TOKENS,
        master_seed: cfg.master_seed,
        n_train: cfg.n_train,
        n_val: cfg.n_val,
        vocabulary: vocab.clone(),
        shards,
    };
    fs::write(
        out.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest).map_err(|e| DatasetError::Manifest(e.to_string()))?,
    )?;
    fs::write(out.join(VOCABULARY_FILE), vocab.to_json())?;
    Ok(manifest)
}

/// A dataset directory opened through its manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| DatasetError::Manifest(e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(DatasetError::Version {
                found: manifest.format_version,
                expected: FORMAT_VERSION,
            });
        }
        for split in [Split::Train, Split::Val] {
            let n: usize = manifest
                .shards
                .iter()
                .filter(|s| s.split == split)
                .map(|s| s.count)
                .sum();
            if n != manifest.count(split) {
                return Err(DatasetError::Manifest(format!(
                    "{split} shards hold {n} records, manifest says {}",
                    manifest.count(split)
                )));
            }
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    /// Opens one shard, checking its digest against the manifest as well as
    /// its own trailer.
    pub fn shard_reader(&self, info: &ShardInfo) -> Result<ShardReader, DatasetError> {
        let path = self.dir.join(&info.file);
        let reader = ShardReader::open(&path)?;
        if reader.digest() != info.sha256 {
            return Err(DatasetError::Checksum { path });
        }
        let h = reader.header();
        if h.count as usize != info.count
            || h.canvas as usize != self.manifest.canvas
            || h.max_len as usize != self.manifest.max_len
        {
            return Err(DatasetError::Manifest(format!(
                "{} header disagrees with manifest",
                info.file
            )));
        }
        Ok(reader)
    }

    /// Loads a whole split into memory.
    pub fn load(&self, split: Split) -> Result<Vec<Example>, DatasetError> {
        let mut out = Vec::with_capacity(self.manifest.count(split));
        for info in self.manifest.shards.iter().filter(|s| s.split == split) {
            for ex in self.shard_reader(info)? {
                out.push(ex?);
            }
        }
        Ok(out)
    }

    /// Re-runs scene sampling, rendering and caption generation from a
    /// record's provenance and reports whether everything matches.
    pub fn replay(&self, split: Split, index: usize, ex: &Example) -> Result<bool, DatasetError> {
        let m = &self.manifest;
        let inst = generate_instance(m.caption_type, m.canvas, m.master_seed, split, index)?;
        if inst.scene_seed != ex.scene_seed || inst.caption_seed != ex.caption_seed {
            return Ok(false);
        }
        let regenerated = to_example(&m.vocabulary, &inst);
        let caption = decode_caption(&m.vocabulary, ex)?;
        let verdict = crate::semantics::evaluate(&inst.scene, &caption);
        Ok(regenerated == *ex && verdict.as_bool() == Some(ex.label))
    }
}

/// Decodes and parses an example's caption.
pub fn decode_caption(vocab: &Vocabulary, ex: &Example) -> Result<Caption, DatasetError> {
    let words = vocab
        .decode(&ex.tokens.ids[..ex.tokens.len])
        .map_err(|e| DatasetError::Shape(e.to_string()))?;
    parse(&words).map_err(|e| DatasetError::Shape(e.to_string()))
}
