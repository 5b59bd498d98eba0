//! A second, deliberately naive evaluator: quantifiers spelled out over all
//! entity tuples, overlap from full-canvas pixel scans, implicit selection by
//! sorting on a scalar key.
#![allow(dead_code)]

use spatialvqa::dataset::{generate_instance, scene_config, Split};
use spatialvqa::lang::{Caption, CaptionType, Degree, NounPhrase, RelationKind};
use spatialvqa::scene::{sample_scene, Entity, Scene};
use spatialvqa::seed;
use spatialvqa::semantics::{evaluate, Verdict, MARGIN};

fn matching(scene: &Scene, np: &NounPhrase) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, e) in scene.entities.iter().enumerate() {
        let color_ok = np.color.is_none() || np.color == Some(e.color);
        let shape_ok = np.shape.is_none() || np.shape == Some(e.shape);
        if color_ok && shape_ok {
            out.push(i);
        }
    }
    out
}

fn pixels_overlap(scene: &Scene, a: usize, b: usize) -> bool {
    let n = scene.canvas;
    for r in 0..n {
        for c in 0..n {
            let x = (c as f64 + 0.5) / n as f64;
            let y = (r as f64 + 0.5) / n as f64;
            if scene.entities[a].contains(x, y) && scene.entities[b].contains(x, y) {
                return true;
            }
        }
    }
    false
}

fn dist(a: &Entity, b: &Entity) -> f64 {
    ((a.center.x - b.center.x).powi(2) + (a.center.y - b.center.y).powi(2)).sqrt()
}

/// Smaller key means "more <kind>".
fn key(e: &Entity, kind: RelationKind, landmark: Option<&Entity>) -> f64 {
    match kind {
        RelationKind::Left => e.center.x,
        RelationKind::Right => -e.center.x,
        RelationKind::Above => e.center.y,
        RelationKind::Below => -e.center.y,
        RelationKind::Closer => dist(e, landmark.unwrap()),
        RelationKind::Farther => -dist(e, landmark.unwrap()),
        _ => unreachable!(),
    }
}

/// The single entity matching a definite landmark, if exactly one does.
fn landmark(scene: &Scene, np: Option<NounPhrase>) -> Result<Option<usize>, ()> {
    match np {
        None => Ok(None),
        Some(np) => {
            let m = matching(scene, &np);
            if m.len() == 1 {
                Ok(Some(m[0]))
            } else {
                Err(())
            }
        }
    }
}

pub fn oracle(scene: &Scene, caption: &Caption) -> Verdict {
    let ents = &scene.entities;
    match *caption {
        Caption::Explicit {
            subject,
            relation,
            object,
        } => {
            let Ok(lm) = landmark(scene, relation.reference) else {
                return Verdict::Inapplicable;
            };
            let l = lm.map(|k| &ents[k]);
            let mut pairs = 0;
            let mut holds = false;
            let mut tie = false;
            for a in matching(scene, &subject) {
                for b in matching(scene, &object) {
                    if a == b || Some(a) == lm || Some(b) == lm {
                        continue;
                    }
                    if relation.kind.is_depth() {
                        if !pixels_overlap(scene, a, b) {
                            continue;
                        }
                        pairs += 1;
                        let behind = ents[a].z < ents[b].z;
                        holds |= if relation.kind == RelationKind::Behind { behind } else { !behind };
                        continue;
                    }
                    pairs += 1;
                    let d = key(&ents[b], relation.kind, l) - key(&ents[a], relation.kind, l);
                    if d > MARGIN {
                        holds = true;
                    } else if d.abs() <= MARGIN {
                        tie = true;
                    }
                }
            }
            if holds {
                Verdict::True
            } else if pairs == 0 || tie {
                Verdict::Inapplicable
            } else {
                Verdict::False
            }
        }
        Caption::Implicit {
            degree,
            selector,
            restrictor,
            predicate,
        } => {
            let cands = matching(scene, &restrictor);
            let Ok(lm) = landmark(scene, selector.reference) else {
                return Verdict::Inapplicable;
            };
            if lm.is_some_and(|k| cands.contains(&k)) {
                return Verdict::Inapplicable;
            }
            let size_ok = match degree {
                Degree::Comparative => cands.len() == 2,
                Degree::Superlative => cands.len() >= 2,
            };
            if !size_ok {
                return Verdict::Inapplicable;
            }
            let l = lm.map(|k| &ents[k]);
            let mut keyed: Vec<(f64, usize)> = cands.iter().map(|&c| (key(&ents[c], selector.kind, l), c)).collect();
            keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            if keyed[1].0 - keyed[0].0 <= MARGIN {
                return Verdict::Inapplicable;
            }
            let chosen = &ents[keyed[0].1];
            let ok = predicate.color.map_or(true, |c| c == chosen.color)
                && predicate.shape.map_or(true, |s| s == chosen.shape);
            if ok {
                Verdict::True
            } else {
                Verdict::False
            }
        }
    }
}

/// Verdict counts `[true, false, inapplicable]` over `pairs` random scenes
/// with random captions, or the first disagreement with the library.
pub fn random_agreement(ty: CaptionType, pairs: usize) -> Result<[usize; 3], String> {
    let cfg = scene_config(ty, 64);
    let mut rng = seed::rng(seed::derive(&[ty as u64, 99]));
    let mut counts = [0usize; 3];
    for i in 0..pairs {
        let Ok(scene) = sample_scene(seed::derive(&[ty as u64, i as u64]), &cfg) else {
            continue;
        };
        let caption = super::random_caption(&mut rng, ty, Some(&scene));
        let expected = oracle(&scene, &caption);
        let got = evaluate(&scene, &caption);
        if got != expected {
            return Err(format!("{ty} pair {i}: library {got:?}, oracle {expected:?} for {caption:?}"));
        }
        counts[expected as usize] += 1;
    }
    Ok(counts)
}

/// Checks emitted records against the oracle: each must be applicable and
/// carry the oracle's label.
pub fn emitted_agreement(ty: CaptionType, records: usize) -> Result<(), String> {
    for i in 0..records {
        let inst = generate_instance(ty, 32, 5, Split::Train, i).map_err(|e| e.to_string())?;
        let verdict = oracle(&inst.scene, &inst.caption);
        if verdict.as_bool() != Some(inst.label) || inst.caption.caption_type() != ty {
            return Err(format!("{ty} record {i}: oracle {verdict:?}, label {}", inst.label));
        }
    }
    Ok(())
}
