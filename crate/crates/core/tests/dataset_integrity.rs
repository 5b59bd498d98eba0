use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use spatialvqa::dataset::{build_dataset, BuildConfig, Dataset, DatasetError, Split};
use spatialvqa::lang::CaptionType;
use spatialvqa::preset::Preset;

fn config(ty: CaptionType, n_train: usize, n_val: usize, seed: u64) -> BuildConfig {
    BuildConfig {
        caption_type: ty,
        n_train,
        n_val,
        master_seed: seed,
        preset: Preset::Desk,
        shard_size: 256,
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn first_shard(dir: &Path) -> std::path::PathBuf {
    let ds = Dataset::open(dir).unwrap();
    dir.join(&ds.manifest.shards[0].file)
}

/// Rewrites the trailing digest so that only the targeted defect remains.
fn reseal(bytes: &mut Vec<u8>) {
    let body = bytes.len() - 32;
    let digest = Sha256::digest(&bytes[..body]);
    bytes[body..].copy_from_slice(&digest);
}

#[test]
fn identical_seeds_give_identical_bytes() {
    for ty in CaptionType::ALL {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        build_dataset(&config(ty, 600, 100, 77), a.path()).unwrap();
        build_dataset(&config(ty, 600, 100, 77), b.path()).unwrap();
        let fa = files(a.path());
        assert!(fa.len() >= 5);
        assert_eq!(fa, files(b.path()), "{ty}");
        let c = tempfile::tempdir().unwrap();
        build_dataset(&config(ty, 600, 100, 78), c.path()).unwrap();
        assert_ne!(fa, files(c.path()));
    }
}

#[test]
fn labels_are_exactly_balanced() {
    let dir = tempfile::tempdir().unwrap();
    build_dataset(&config(CaptionType::Comparative, 500, 37, 3), dir.path()).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let train = ds.load(Split::Train).unwrap();
    assert_eq!(train.iter().filter(|e| e.label).count(), 250);
    let val = ds.load(Split::Val).unwrap();
    assert_eq!(val.iter().filter(|e| e.label).count(), 19);
}

#[test]
fn provenance_replay_of_a_thousand_records() {
    for ty in CaptionType::ALL {
        let dir = tempfile::tempdir().unwrap();
        build_dataset(&config(ty, 1000, 20, 11), dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        for (split, examples) in [Split::Train, Split::Val].map(|s| (s, ds.load(s).unwrap())) {
            for (i, ex) in examples.iter().enumerate() {
                assert!(ds.replay(split, i, ex).unwrap(), "{ty} {split} {i}");
            }
        }
        let train = ds.load(Split::Train).unwrap();
        assert!(!ds.replay(Split::Train, 1, &train[0]).unwrap());
    }
}

#[test]
fn corruption_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    build_dataset(&config(CaptionType::Explicit, 300, 10, 5), dir.path()).unwrap();
    let shard = first_shard(dir.path());
    let pristine = fs::read(&shard).unwrap();
    let load = || Dataset::open(dir.path()).unwrap().load(Split::Train);

    for at in [0, 21, 600, pristine.len() / 2, pristine.len() - 40, pristine.len() - 1] {
        let mut bytes = pristine.clone();
        bytes[at] ^= 0x10;
        fs::write(&shard, &bytes).unwrap();
        assert!(load().is_err(), "flip at byte {at} went unnoticed");
    }

    let mut bytes = pristine.clone();
    bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
    reseal(&mut bytes);
    fs::write(&shard, &bytes).unwrap();
    assert!(matches!(load(), Err(DatasetError::Version { found: 2, .. })));

    // A record cut short, with a valid trailer and a manifest digest
    // that no longer matches.
    let mut bytes = pristine[..pristine.len() - 32 - 100].to_vec();
    bytes.extend_from_slice(&[0u8; 32]);
    reseal(&mut bytes);
    fs::write(&shard, &bytes).unwrap();
    assert!(load().is_err());
    let reader = spatialvqa::dataset::ShardReader::open(&shard).unwrap();
    let results: Vec<_> = reader.collect();
    assert!(matches!(results.last(), Some(Err(DatasetError::Truncated { .. }))));

    fs::write(&shard, &pristine[..10]).unwrap();
    assert!(load().is_err());

    fs::write(&shard, &pristine).unwrap();
    assert_eq!(load().unwrap().len(), 300);
}

#[test]
fn manifest_version_is_checked() {
    let dir = tempfile::tempdir().unwrap();
    build_dataset(&config(CaptionType::Superlative, 10, 2, 1), dir.path()).unwrap();
    let path = dir.path().join("manifest.json");
    let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    m["format_version"] = 9.into();
    fs::write(&path, m.to_string()).unwrap();
    assert!(matches!(Dataset::open(dir.path()), Err(DatasetError::Version { found: 9, .. })));
}
