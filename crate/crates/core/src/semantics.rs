//! Truth-conditional evaluation of captions against scenes.
//!
//! Every geometric comparison uses a margin of [`MARGIN`] unit-canvas lengths.
//! A comparison that falls inside the margin is a tie, and a caption whose
//! verdict would depend on a tie is [`Verdict::Inapplicable`], as is any
//! caption whose presuppositions fail.

use std::cell::OnceCell;

use serde::{Deserialize, Serialize};

use crate::lang::{Caption, Degree, NounPhrase, RelationKind};
use crate::scene::{Entity, Scene};

pub const MARGIN: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    True,
    False,
    Inapplicable,
}

impl Verdict {
    pub fn as_bool(self) -> Option<bool> {
        match self {
            Verdict::True => Some(true),
            Verdict::False => Some(false),
            Verdict::Inapplicable => None,
        }
    }
}

impl From<bool> for Verdict {
    fn from(b: bool) -> Self {
        if b {
            Verdict::True
        } else {
            Verdict::False
        }
    }
}

/// Outcome of one margin-aware comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Comparison {
    Holds,
    Tie,
    Fails,
}

fn compare_signed(diff: f64) -> Comparison {
    if diff > MARGIN {
        Comparison::Holds
    } else if diff.abs() <= MARGIN {
        Comparison::Tie
    } else {
        Comparison::Fails
    }
}

/// Indices of the entities matching every attribute of `np`.
pub fn denote(scene: &Scene, np: &NounPhrase) -> Vec<usize> {
    scene
        .entities
        .iter()
        .enumerate()
        .filter(|(_, e)| np.matches(e))
        .map(|(i, _)| i)
        .collect()
}

/// Signed "how strongly does `kind` hold" score for a directional kind.
fn directional_score(e1: &Entity, kind: RelationKind, e2: &Entity, reference: Option<&Entity>) -> f64 {
    match kind {
        RelationKind::Left => e2.center.x - e1.center.x,
        RelationKind::Right => e1.center.x - e2.center.x,
        RelationKind::Above => e2.center.y - e1.center.y,
        RelationKind::Below => e1.center.y - e2.center.y,
        RelationKind::Closer | RelationKind::Farther => {
            let r = reference.expect("proximity relation needs a resolved reference").center;
            let d = e2.center.distance(r) - e1.center.distance(r);
            if kind == RelationKind::Closer {
                d
            } else {
                -d
            }
        }
        RelationKind::Behind | RelationKind::Front => unreachable!("depth is not directional"),
    }
}

/// Margin-aware comparison of `e1 <kind> e2`. Depth kinds are a plain z test
/// gated on overlap: without overlap they never hold.
pub fn compare(
    e1: &Entity,
    kind: RelationKind,
    e2: &Entity,
    reference: Option<&Entity>,
    overlapping: bool,
) -> Comparison {
    match kind {
        RelationKind::Behind | RelationKind::Front => {
            let ordered = if kind == RelationKind::Behind {
                e1.z < e2.z
            } else {
                e1.z > e2.z
            };
            if overlapping && ordered {
                Comparison::Holds
            } else {
                Comparison::Fails
            }
        }
        _ => compare_signed(directional_score(e1, kind, e2, reference)),
    }
}

/// Whether `scene.entities[i] <kind> scene.entities[j]` holds with margin.
/// `reference` indexes the resolved landmark of closer/farther.
pub fn relation_holds(
    scene: &Scene,
    i: usize,
    kind: RelationKind,
    j: usize,
    reference: Option<usize>,
) -> bool {
    if i == j {
        return false;
    }
    let overlapping = kind.is_depth() && scene.overlap(i, j);
    let r = reference.map(|k| &scene.entities[k]);
    compare(&scene.entities[i], kind, &scene.entities[j], r, overlapping) == Comparison::Holds
}

/// Caches the overlap table of one scene across many evaluations.
pub struct Evaluator<'a> {
    scene: &'a Scene,
    overlaps: OnceCell<Vec<bool>>,
}

impl<'a> Evaluator<'a> {
    pub fn new(scene: &'a Scene) -> Self {
        Evaluator {
            scene,
            overlaps: OnceCell::new(),
        }
    }

    pub fn scene(&self) -> &'a Scene {
        self.scene
    }

    pub fn overlapping(&self, i: usize, j: usize) -> bool {
        let n = self.scene.entities.len();
        self.overlaps.get_or_init(|| self.scene.overlap_table())[i * n + j]
    }

    /// Resolves a definite landmark: exactly one entity must match.
    fn unique(&self, np: &NounPhrase) -> Option<usize> {
        match denote(self.scene, np).as_slice() {
            [only] => Some(*only),
            _ => None,
        }
    }

    pub fn evaluate(&self, caption: &Caption) -> Verdict {
        match caption {
            Caption::Explicit {
                subject,
                relation,
                object,
            } => {
                let reference = match relation.reference {
                    Some(np) if relation.kind.is_proximity() => match self.unique(&np) {
                        Some(r) => Some(r),
                        None => return Verdict::Inapplicable,
                    },
                    _ => None,
                };
                let keep = |i: &usize| Some(*i) != reference;
                let subjects: Vec<usize> = denote(self.scene, subject).into_iter().filter(keep).collect();
                let objects: Vec<usize> = denote(self.scene, object).into_iter().filter(keep).collect();
                self.explicit(&subjects, relation.kind, &objects, reference)
            }
            Caption::Implicit {
                degree,
                selector,
                restrictor,
                predicate,
            } => {
                let candidates = denote(self.scene, restrictor);
                let reference = match selector.reference {
                    Some(np) if selector.kind.is_proximity() => match self.unique(&np) {
                        Some(r) if !candidates.contains(&r) => Some(r),
                        _ => return Verdict::Inapplicable,
                    },
                    _ => None,
                };
                let cardinality_ok = match degree {
                    Degree::Comparative => candidates.len() == 2,
                    Degree::Superlative => candidates.len() >= 2,
                };
                if !cardinality_ok || selector.kind.is_depth() {
                    return Verdict::Inapplicable;
                }
                match self.select(&candidates, selector.kind, reference) {
                    Some(chosen) => predicate.matches(&self.scene.entities[chosen]).into(),
                    None => Verdict::Inapplicable,
                }
            }
        }
    }

    fn explicit(
        &self,
        subjects: &[usize],
        kind: RelationKind,
        objects: &[usize],
        reference: Option<usize>,
    ) -> Verdict {
        let ents = &self.scene.entities;
        let r = reference.map(|k| &ents[k]);
        let mut any_pair = false;
        let mut any_tie = false;
        for &a in subjects {
            for &b in objects {
                if a == b {
                    continue;
                }
                let overlapping = kind.is_depth() && self.overlapping(a, b);
                if kind.is_depth() && !overlapping {
                    continue;
                }
                any_pair = true;
                match compare(&ents[a], kind, &ents[b], r, overlapping) {
                    Comparison::Holds => return Verdict::True,
                    Comparison::Tie => any_tie = true,
                    Comparison::Fails => {}
                }
            }
        }
        if !any_pair || any_tie {
            Verdict::Inapplicable
        } else {
            Verdict::False
        }
    }

    /// The candidate that beats every other candidate under `kind` by more
    /// than the margin, if any.
    pub fn select(
        &self,
        candidates: &[usize],
        kind: RelationKind,
        reference: Option<usize>,
    ) -> Option<usize> {
        let ents = &self.scene.entities;
        let r = reference.map(|k| &ents[k]);
        candidates.iter().copied().find(|&c| {
            candidates
                .iter()
                .all(|&o| o == c || compare(&ents[c], kind, &ents[o], r, false) == Comparison::Holds)
        })
    }
}

/// One-shot evaluation; see [`Evaluator`] for repeated queries on one scene.
pub fn evaluate(scene: &Scene, caption: &Caption) -> Verdict {
    Evaluator::new(scene).evaluate(caption)
}
