//! Fixed templates for realizing captions and a recursive-descent parser that
//! inverts them.
//!
//! Explicit:    `a <np> is <relation> a <np> .`
//! Comparative: `the <left|right|upper|lower> <np> is <pred> .`
//!              `the <np> <closer to|farther from> the <np> is <pred> .`
//! Superlative: `the <leftmost|rightmost|uppermost|lowermost> <np> is <pred> .`
//!              `the <np> <closest to|farthest from> the <np> is <pred> .`
//!
//! A predicate is a bare color (`green`) or an indefinite phrase naming a
//! shape (`a cross`, `a green cross`).

use thiserror::Error;

use super::{Caption, Degree, NounPhrase, Relation, RelationKind};
use crate::scene::{Color, Shape};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("parse error at token {position}: expected {expected}, found '{found}'")]
pub struct ParseError {
    /// 1-based index of the offending token; `len + 1` means end of input.
    pub position: usize,
    pub expected: String,
    pub found: String,
}

fn push_np(out: &mut Vec<&'static str>, np: &NounPhrase) {
    out.push(if np.definite { "the" } else { "a" });
    push_np_body(out, np);
}

fn push_np_body(out: &mut Vec<&'static str>, np: &NounPhrase) {
    if let Some(c) = np.color {
        out.push(c.word());
    }
    out.push(np.shape.map_or("shape", Shape::word));
}

fn push_predicate(out: &mut Vec<&'static str>, np: &NounPhrase) {
    match (np.color, np.shape) {
        (Some(c), None) => out.push(c.word()),
        _ => {
            out.push("a");
            push_np_body(out, np);
        }
    }
}

fn reference(rel: &Relation) -> &NounPhrase {
    rel.reference
        .as_ref()
        .expect("proximity relations carry a reference")
}

/// Realizes a caption as lower-case tokens ending in ".".
pub fn realize(caption: &Caption) -> Vec<&'static str> {
    let mut out = Vec::with_capacity(16);
    match caption {
        Caption::Explicit {
            subject,
            relation,
            object,
        } => {
            push_np(&mut out, subject);
            out.push("is");
            match relation.kind {
                RelationKind::Left => out.extend(["to", "the", "left", "of"]),
                RelationKind::Right => out.extend(["to", "the", "right", "of"]),
                RelationKind::Above => out.push("above"),
                RelationKind::Below => out.push("below"),
                RelationKind::Behind => out.push("behind"),
                RelationKind::Front => out.extend(["in", "front", "of"]),
                RelationKind::Closer | RelationKind::Farther => {
                    let (w, p) = if relation.kind == RelationKind::Closer {
                        ("closer", "to")
                    } else {
                        ("farther", "from")
                    };
                    out.extend([w, p]);
                    push_np(&mut out, reference(relation));
                    out.push("than");
                }
            }
            push_np(&mut out, object);
        }
        Caption::Implicit {
            degree,
            selector,
            restrictor,
            predicate,
        } => {
            out.push("the");
            if selector.kind.is_proximity() {
                push_np_body(&mut out, restrictor);
                let phrase = match (degree, selector.kind) {
                    (Degree::Comparative, RelationKind::Closer) => ["closer", "to"],
                    (Degree::Comparative, _) => ["farther", "from"],
                    (Degree::Superlative, RelationKind::Closer) => ["closest", "to"],
                    (Degree::Superlative, _) => ["farthest", "from"],
                };
                out.extend(phrase);
                push_np(&mut out, reference(selector));
            } else {
                out.push(adjective(*degree, selector.kind));
                push_np_body(&mut out, restrictor);
            }
            out.push("is");
            push_predicate(&mut out, predicate);
        }
    }
    out.push(".");
    out
}

fn adjective(degree: Degree, kind: RelationKind) -> &'static str {
    match (degree, kind) {
        (Degree::Comparative, RelationKind::Left) => "left",
        (Degree::Comparative, RelationKind::Right) => "right",
        (Degree::Comparative, RelationKind::Above) => "upper",
        (Degree::Comparative, RelationKind::Below) => "lower",
        (Degree::Superlative, RelationKind::Left) => "leftmost",
        (Degree::Superlative, RelationKind::Right) => "rightmost",
        (Degree::Superlative, RelationKind::Above) => "uppermost",
        (Degree::Superlative, RelationKind::Below) => "lowermost",
        _ => unreachable!("no adjective for {kind:?}"),
    }
}

fn adjective_meaning(word: &str) -> Option<(Degree, RelationKind)> {
    Some(match word {
        "left" => (Degree::Comparative, RelationKind::Left),
        "right" => (Degree::Comparative, RelationKind::Right),
        "upper" => (Degree::Comparative, RelationKind::Above),
        "lower" => (Degree::Comparative, RelationKind::Below),
        "leftmost" => (Degree::Superlative, RelationKind::Left),
        "rightmost" => (Degree::Superlative, RelationKind::Right),
        "uppermost" => (Degree::Superlative, RelationKind::Above),
        "lowermost" => (Degree::Superlative, RelationKind::Below),
        _ => return None,
    })
}

struct Parser<'a, S> {
    tokens: &'a [S],
    pos: usize,
}

impl<'a, S: AsRef<str>> Parser<'a, S> {
    fn peek(&self) -> Option<&'a str> {
        self.tokens.get(self.pos).map(AsRef::as_ref)
    }

    fn error(&self, expected: &str) -> ParseError {
        ParseError {
            position: self.pos + 1,
            expected: expected.to_string(),
            found: self.peek().unwrap_or("<end>").to_string(),
        }
    }

    fn expect(&mut self, word: &str) -> Result<(), ParseError> {
        if self.peek() == Some(word) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(&format!("'{word}'")))
        }
    }

    fn color(&mut self) -> Option<Color> {
        let c = self.peek().and_then(Color::from_word)?;
        self.pos += 1;
        Some(c)
    }

    /// `[color] (shape | "shape")`, with at least one attribute.
    fn np_body(&mut self, definite: bool) -> Result<NounPhrase, ParseError> {
        let color = self.color();
        let shape = match self.peek() {
            Some("shape") if color.is_some() => None,
            Some(w) => match Shape::from_word(w) {
                Some(s) => Some(s),
                None => return Err(self.error("a shape noun")),
            },
            None => return Err(self.error("a shape noun")),
        };
        self.pos += 1;
        Ok(NounPhrase::new(color, shape, definite))
    }

    fn np(&mut self, determiner: &str) -> Result<NounPhrase, ParseError> {
        self.expect(determiner)?;
        self.np_body(determiner == "the")
    }

    fn predicate(&mut self) -> Result<NounPhrase, ParseError> {
        if let Some(c) = self.color() {
            return Ok(NounPhrase::new(Some(c), None, false));
        }
        self.expect("a")?;
        let color = self.color();
        let shape = self
            .peek()
            .and_then(Shape::from_word)
            .ok_or_else(|| self.error("a shape noun"))?;
        self.pos += 1;
        Ok(NounPhrase::new(color, Some(shape), false))
    }

    fn explicit_relation(&mut self) -> Result<Relation, ParseError> {
        let word = self.peek().ok_or_else(|| self.error("a relation"))?;
        self.pos += 1;
        let kind = match word {
            "to" => {
                self.expect("the")?;
                let k = match self.peek() {
                    Some("left") => RelationKind::Left,
                    Some("right") => RelationKind::Right,
                    _ => return Err(self.error("'left' or 'right'")),
                };
                self.pos += 1;
                self.expect("of")?;
                k
            }
            "above" => RelationKind::Above,
            "below" => RelationKind::Below,
            "behind" => RelationKind::Behind,
            "in" => {
                self.expect("front")?;
                self.expect("of")?;
                RelationKind::Front
            }
            "closer" | "farther" => {
                let (kind, prep) = if word == "closer" {
                    (RelationKind::Closer, "to")
                } else {
                    (RelationKind::Farther, "from")
                };
                self.expect(prep)?;
                let r = self.np("the")?;
                self.expect("than")?;
                return Ok(Relation::proximity(kind, r));
            }
            _ => {
                self.pos -= 1;
                return Err(self.error("a relation"));
            }
        };
        Ok(Relation::simple(kind))
    }

    fn caption(&mut self) -> Result<Caption, ParseError> {
        let caption = match self.peek() {
            Some("a") => {
                let subject = self.np("a")?;
                self.expect("is")?;
                let relation = self.explicit_relation()?;
                let object = self.np("a")?;
                Caption::Explicit {
                    subject,
                    relation,
                    object,
                }
            }
            Some("the") => {
                self.pos += 1;
                let adj = self.peek().and_then(adjective_meaning);
                let (degree, selector, restrictor) = match adj {
                    Some((degree, kind)) => {
                        self.pos += 1;
                        (degree, Relation::simple(kind), self.np_body(true)?)
                    }
                    None => {
                        let restrictor = self.np_body(true)?;
                        let (degree, kind, prep) = match self.peek() {
                            Some("closer") => (Degree::Comparative, RelationKind::Closer, "to"),
                            Some("farther") => {
                                (Degree::Comparative, RelationKind::Farther, "from")
                            }
                            Some("closest") => (Degree::Superlative, RelationKind::Closer, "to"),
                            Some("farthest") => {
                                (Degree::Superlative, RelationKind::Farther, "from")
                            }
                            _ => return Err(self.error("a proximity phrase")),
                        };
                        self.pos += 1;
                        self.expect(prep)?;
                        let r = self.np("the")?;
                        (degree, Relation::proximity(kind, r), restrictor)
                    }
                };
                self.expect("is")?;
                let predicate = self.predicate()?;
                Caption::Implicit {
                    degree,
                    selector,
                    restrictor,
                    predicate,
                }
            }
            _ => return Err(self.error("'a' or 'the'")),
        };
        self.expect(".")?;
        if self.pos != self.tokens.len() {
            return Err(self.error("end of input"));
        }
        Ok(caption)
    }
}

/// Parses a token sequence produced by [`realize`].
pub fn parse<S: AsRef<str>>(tokens: &[S]) -> Result<Caption, ParseError> {
    let mut p = Parser { tokens, pos: 0 };
    let caption = p.caption()?;
    caption.validate().map_err(|msg| ParseError {
        position: tokens.len(),
        expected: msg,
        found: ".".into(),
    })?;
    Ok(caption)
}
