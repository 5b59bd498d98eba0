//! Caption language: the typed AST for the three spatial statement types,
//! the closed vocabulary, the realizer/parser pair and the scene-driven
//! caption generator.

mod generate;
mod grammar;
mod vocab;

pub use generate::{generate_caption, GenerationError, GENERATION_ATTEMPTS};
pub use grammar::{parse, realize, ParseError};
pub use vocab::{Encoded, Vocabulary, VocabularyError, MAX_TOKENS, PAD_ID, PAD_TOKEN};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::scene::{Color, Entity, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationKind {
    Left,
    Right,
    Above,
    Below,
    Closer,
    Farther,
    Behind,
    Front,
}

impl RelationKind {
    pub const ALL: [RelationKind; 8] = [
        RelationKind::Left,
        RelationKind::Right,
        RelationKind::Above,
        RelationKind::Below,
        RelationKind::Closer,
        RelationKind::Farther,
        RelationKind::Behind,
        RelationKind::Front,
    ];

    /// Kinds usable as comparative/superlative selectors.
    pub const IMPLICIT: [RelationKind; 6] = [
        RelationKind::Left,
        RelationKind::Right,
        RelationKind::Above,
        RelationKind::Below,
        RelationKind::Closer,
        RelationKind::Farther,
    ];

    pub fn is_proximity(self) -> bool {
        matches!(self, RelationKind::Closer | RelationKind::Farther)
    }

    pub fn is_depth(self) -> bool {
        matches!(self, RelationKind::Behind | RelationKind::Front)
    }

    pub fn name(self) -> &'static str {
        match self {
            RelationKind::Left => "left",
            RelationKind::Right => "right",
            RelationKind::Above => "above",
            RelationKind::Below => "below",
            RelationKind::Closer => "closer",
            RelationKind::Farther => "farther",
            RelationKind::Behind => "behind",
            RelationKind::Front => "front",
        }
    }
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A description of one or more entities. An absent shape is realized by the
/// hypernym "shape".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NounPhrase {
    pub color: Option<Color>,
    pub shape: Option<Shape>,
    pub definite: bool,
}

impl NounPhrase {
    pub fn new(color: Option<Color>, shape: Option<Shape>, definite: bool) -> Self {
        NounPhrase {
            color,
            shape,
            definite,
        }
    }

    pub fn matches(&self, e: &Entity) -> bool {
        self.color.map_or(true, |c| c == e.color) && self.shape.map_or(true, |s| s == e.shape)
    }

    /// Same attributes, ignoring the determiner.
    pub fn same_description(&self, other: &NounPhrase) -> bool {
        self.color == other.color && self.shape == other.shape
    }

    pub fn pattern(&self) -> NpPattern {
        match (self.color, self.shape) {
            (Some(_), None) => NpPattern::Color,
            (None, Some(_)) => NpPattern::Shape,
            _ => NpPattern::ColorShape,
        }
    }

    fn has_attribute(&self) -> bool {
        self.color.is_some() || self.shape.is_some()
    }
}

/// Which attributes a noun phrase mentions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NpPattern {
    Color,
    Shape,
    ColorShape,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Relation {
    pub kind: RelationKind,
    /// Landmark for closer/farther; absent for every other kind.
    pub reference: Option<NounPhrase>,
}

impl Relation {
    pub fn simple(kind: RelationKind) -> Self {
        Relation {
            kind,
            reference: None,
        }
    }

    pub fn proximity(kind: RelationKind, reference: NounPhrase) -> Self {
        Relation {
            kind,
            reference: Some(reference),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Degree {
    Comparative,
    Superlative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Caption {
    Explicit {
        subject: NounPhrase,
        relation: Relation,
        object: NounPhrase,
    },
    Implicit {
        degree: Degree,
        selector: Relation,
        restrictor: NounPhrase,
        predicate: NounPhrase,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionType {
    Explicit,
    Comparative,
    Superlative,
}

impl CaptionType {
    pub const ALL: [CaptionType; 3] = [
        CaptionType::Explicit,
        CaptionType::Comparative,
        CaptionType::Superlative,
    ];

    pub fn relation_kinds(self) -> &'static [RelationKind] {
        match self {
            CaptionType::Explicit => &RelationKind::ALL,
            _ => &RelationKind::IMPLICIT,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CaptionType::Explicit => "explicit",
            CaptionType::Comparative => "comparative",
            CaptionType::Superlative => "superlative",
        }
    }

    /// Behind/front captions need partially occluding entities.
    pub fn needs_overlap(self) -> bool {
        self == CaptionType::Explicit
    }
}

impl fmt::Display for CaptionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CaptionType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CaptionType::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown caption type '{s}'"))
    }
}

impl Caption {
    pub fn caption_type(&self) -> CaptionType {
        match self {
            Caption::Explicit { .. } => CaptionType::Explicit,
            Caption::Implicit {
                degree: Degree::Comparative,
                ..
            } => CaptionType::Comparative,
            Caption::Implicit { .. } => CaptionType::Superlative,
        }
    }

    pub fn relation(&self) -> &Relation {
        match self {
            Caption::Explicit { relation, .. } => relation,
            Caption::Implicit { selector, .. } => selector,
        }
    }

    /// Attribute patterns of the two main noun phrases: subject/object for
    /// explicit captions, restrictor/predicate for implicit ones.
    pub fn np_patterns(&self) -> (NpPattern, NpPattern) {
        match self {
            Caption::Explicit {
                subject, object, ..
            } => (subject.pattern(), object.pattern()),
            Caption::Implicit {
                restrictor,
                predicate,
                ..
            } => (restrictor.pattern(), predicate.pattern()),
        }
    }

    /// Checks the structural invariants the grammar relies on.
    pub fn validate(&self) -> Result<(), String> {
        let check_ref = |rel: &Relation, others: &[&NounPhrase]| -> Result<(), String> {
            match (rel.kind.is_proximity(), rel.reference) {
                (true, None) => Err(format!("{} needs a reference noun phrase", rel.kind)),
                (false, Some(_)) => Err(format!("{} takes no reference noun phrase", rel.kind)),
                (true, Some(r)) => {
                    if !r.has_attribute() {
                        return Err("reference noun phrase is empty".into());
                    }
                    if !r.definite {
                        return Err("reference noun phrase must be definite".into());
                    }
                    if others.iter().any(|o| o.same_description(&r)) {
                        return Err("reference must differ from the other descriptions".into());
                    }
                    Ok(())
                }
                (false, None) => Ok(()),
            }
        };
        match self {
            Caption::Explicit {
                subject,
                relation,
                object,
            } => {
                if !subject.has_attribute() || !object.has_attribute() {
                    return Err("noun phrase without color or shape".into());
                }
                if subject.definite || object.definite {
                    return Err("explicit subject and object are indefinite".into());
                }
                check_ref(relation, &[subject, object])
            }
            Caption::Implicit {
                selector,
                restrictor,
                predicate,
                ..
            } => {
                if selector.kind.is_depth() {
                    return Err("behind/front cannot be used as a selector".into());
                }
                if !restrictor.has_attribute() || !predicate.has_attribute() {
                    return Err("noun phrase without color or shape".into());
                }
                if !restrictor.definite || predicate.definite {
                    return Err("restrictor is definite, predicate is not".into());
                }
                check_ref(selector, &[restrictor])
            }
        }
    }
}
