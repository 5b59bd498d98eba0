use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use super::{Caption, CaptionType, Degree, NounPhrase, Relation, RelationKind};
use crate::scene::Scene;
use crate::seed;
use crate::semantics::{denote, Evaluator, Verdict};

/// Proposals tried before giving up on a scene.
pub const GENERATION_ATTEMPTS: usize = 600;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("no {caption_type} caption with label {label} ({kind}) found in {attempts} attempts")]
pub struct GenerationError {
    pub caption_type: CaptionType,
    pub kind: RelationKind,
    pub label: bool,
    pub attempts: usize,
}

/// Describes an entity by its color, its shape, or both, chosen uniformly.
fn describe<R: Rng>(rng: &mut R, scene: &Scene, i: usize, definite: bool) -> NounPhrase {
    let e = &scene.entities[i];
    match rng.gen_range(0..3) {
        0 => NounPhrase::new(Some(e.color), None, definite),
        1 => NounPhrase::new(None, Some(e.shape), definite),
        _ => NounPhrase::new(Some(e.color), Some(e.shape), definite),
    }
}

fn pick_other<R: Rng>(rng: &mut R, n: usize, exclude: &[usize]) -> Option<usize> {
    let pool: Vec<usize> = (0..n).filter(|i| !exclude.contains(i)).collect();
    pool.choose(rng).copied()
}

fn propose_explicit<R: Rng>(
    rng: &mut R,
    eval: &Evaluator<'_>,
    kind: RelationKind,
) -> Option<Caption> {
    let scene = eval.scene();
    let n = scene.entities.len();
    let a = rng.gen_range(0..n);
    let b = if kind.is_depth() {
        // Bias towards overlapping partners so depth captions stay applicable.
        let partners: Vec<usize> = (0..n).filter(|&j| j != a && eval.overlapping(a, j)).collect();
        match partners.choose(rng) {
            Some(&j) => j,
            None => pick_other(rng, n, &[a])?,
        }
    } else {
        pick_other(rng, n, &[a])?
    };
    let relation = if kind.is_proximity() {
        let r = pick_other(rng, n, &[a, b])?;
        Relation::proximity(kind, describe(rng, scene, r, true))
    } else {
        Relation::simple(kind)
    };
    Some(Caption::Explicit {
        subject: describe(rng, scene, a, false),
        relation,
        object: describe(rng, scene, b, false),
    })
}

fn propose_implicit<R: Rng>(
    rng: &mut R,
    eval: &Evaluator<'_>,
    degree: Degree,
    kind: RelationKind,
) -> Option<Caption> {
    let scene = eval.scene();
    let n = scene.entities.len();
    let anchor = rng.gen_range(0..n);
    let restrictor = describe(rng, scene, anchor, true);
    let members = denote(scene, &restrictor);
    let cardinality_ok = match degree {
        Degree::Comparative => members.len() == 2,
        Degree::Superlative => members.len() >= 2,
    };
    if !cardinality_ok {
        return None;
    }
    // The predicate must split the restrictor set, otherwise the selector
    // would play no role in the verdict.
    let source = *members.choose(rng)?;
    let predicate = describe(rng, scene, source, false);
    let hits = members
        .iter()
        .filter(|&&m| predicate.matches(&scene.entities[m]))
        .count();
    if hits == 0 || hits == members.len() {
        return None;
    }
    let selector = if kind.is_proximity() {
        let r = pick_other(rng, n, &members)?;
        Relation::proximity(kind, describe(rng, scene, r, true))
    } else {
        Relation::simple(kind)
    };
    Some(Caption::Implicit {
        degree,
        selector,
        restrictor,
        predicate,
    })
}

/// Samples a caption of the requested type whose verdict on `scene` equals
/// `target`. The relation kind is drawn uniformly from the type's kinds
/// before any proposal, so a failure never skews the kind distribution:
/// callers resample the scene and retry with the same seed.
pub fn generate_caption(
    scene: &Scene,
    caption_type: CaptionType,
    target: bool,
    caption_seed: u64,
) -> Result<(Caption, bool), GenerationError> {
    let mut rng = seed::rng(caption_seed);
    let kinds = caption_type.relation_kinds();
    let kind = kinds[rng.gen_range(0..kinds.len())];
    let failure = GenerationError {
        caption_type,
        kind,
        label: target,
        attempts: GENERATION_ATTEMPTS,
    };
    if scene.entities.len() < 2 {
        return Err(failure);
    }
    let eval = Evaluator::new(scene);
    for _ in 0..GENERATION_ATTEMPTS {
        let proposal = match caption_type {
            CaptionType::Explicit => propose_explicit(&mut rng, &eval, kind),
            CaptionType::Comparative => propose_implicit(&mut rng, &eval, Degree::Comparative, kind),
            CaptionType::Superlative => propose_implicit(&mut rng, &eval, Degree::Superlative, kind),
        };
        let Some(caption) = proposal else { continue };
        if caption.validate().is_err() {
            continue;
        }
        if eval.evaluate(&caption) == Verdict::from(target) {
            return Ok((caption, target));
        }
    }
    Err(failure)
}
