#![allow(dead_code)]

pub mod gradcheck;
pub mod oracle;

use rand::seq::SliceRandom;
use rand::Rng;

use spatialvqa::dataset::Batch;
use spatialvqa::lang::{Caption, CaptionType, Degree, NounPhrase, Relation, RelationKind, Vocabulary, MAX_TOKENS};
use spatialvqa::seed;
use spatialvqa::scene::{Color, Scene, Shape};

/// A noun phrase with at least one attribute, drawn from the scene's
/// entities half of the time so that captions actually refer to something.
pub fn random_np(rng: &mut impl Rng, scene: Option<&Scene>, definite: bool) -> NounPhrase {
    let (mut color, mut shape) = match scene.filter(|_| rng.gen_bool(0.5)) {
        Some(s) => {
            let e = s.entities.choose(rng).expect("non-empty scene");
            (Some(e.color), Some(e.shape))
        }
        None => (
            Some(*Color::ALL.choose(rng).unwrap()),
            Some(*Shape::ALL.choose(rng).unwrap()),
        ),
    };
    match rng.gen_range(0..3) {
        0 => color = None,
        1 => shape = None,
        _ => {}
    }
    NounPhrase::new(color, shape, definite)
}

fn relation(rng: &mut impl Rng, kind: RelationKind, scene: Option<&Scene>, others: &[NounPhrase]) -> Relation {
    if !kind.is_proximity() {
        return Relation::simple(kind);
    }
    loop {
        let r = random_np(rng, scene, true);
        if others.iter().all(|o| !o.same_description(&r)) {
            return Relation::proximity(kind, r);
        }
    }
}

/// A structurally valid caption of the given type.
pub fn random_caption(rng: &mut impl Rng, ty: CaptionType, scene: Option<&Scene>) -> Caption {
    let kind = *ty.relation_kinds().choose(rng).unwrap();
    let caption = match ty {
        CaptionType::Explicit => {
            let subject = random_np(rng, scene, false);
            let object = random_np(rng, scene, false);
            Caption::Explicit {
                subject,
                relation: relation(rng, kind, scene, &[subject, object]),
                object,
            }
        }
        _ => {
            let restrictor = random_np(rng, scene, true);
            Caption::Implicit {
                degree: if ty == CaptionType::Comparative {
                    Degree::Comparative
                } else {
                    Degree::Superlative
                },
                selector: relation(rng, kind, scene, &[restrictor]),
                restrictor,
                predicate: random_np(rng, scene, false),
            }
        }
    };
    caption.validate().expect("generated caption is valid");
    caption
}

/// Random images and token ids; labels alternate.
pub fn fake_batch(n: usize, canvas: usize, tag: u64) -> Batch {
    let mut rng = seed::rng(tag);
    let lengths: Vec<usize> = (0..n).map(|_| rng.gen_range(4..=MAX_TOKENS)).collect();
    let mut tokens = vec![0u8; n * MAX_TOKENS];
    for (i, &l) in lengths.iter().enumerate() {
        for t in 0..l {
            tokens[i * MAX_TOKENS + t] = rng.gen_range(1..Vocabulary::standard().len() as u8);
        }
    }
    Batch {
        size: n,
        height: canvas,
        width: canvas,
        images: (0..n * canvas * canvas * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
        tokens,
        max_len: MAX_TOKENS,
        lengths,
        labels: (0..n).map(|i| i % 2).collect(),
        indices: (0..n).collect(),
    }
}
