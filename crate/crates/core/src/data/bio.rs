//! BIO tags over a configurable set of entity types.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    Outside,
    Begin(u8),
    Inside(u8),
}

impl Tag {
    pub fn entity_type(self) -> Option<u8> {
        match self {
            Tag::Outside => None,
            Tag::Begin(t) | Tag::Inside(t) => Some(t),
        }
    }
}

/// Entity types plus the `O` label. Label indices are `O = 0`, then
/// `B-T, I-T` for each type in order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelScheme {
    types: Vec<String>,
}

impl Default for LabelScheme {
    fn default() -> Self {
        Self::wikiann()
    }
}

impl LabelScheme {
    pub fn new(types: Vec<String>) -> Self {
        assert!(types.len() < 128, "too many entity types");
        Self { types }
    }

    /// `PER`, `ORG`, `LOC`.
    pub fn wikiann() -> Self {
        Self::new(vec!["PER".into(), "ORG".into(), "LOC".into()])
    }

    pub fn types(&self) -> &[String] {
        &self.types
    }

    pub fn type_name(&self, t: u8) -> &str {
        &self.types[t as usize]
    }

    pub fn n_labels(&self) -> usize {
        1 + 2 * self.types.len()
    }

    pub fn index(&self, tag: Tag) -> usize {
        match tag {
            Tag::Outside => 0,
            Tag::Begin(t) => 1 + 2 * t as usize,
            Tag::Inside(t) => 2 + 2 * t as usize,
        }
    }

    pub fn tag(&self, index: usize) -> Option<Tag> {
        match index {
            0 => Some(Tag::Outside),
            i if i < self.n_labels() => {
                let t = ((i - 1) / 2) as u8;
                Some(if i % 2 == 1 { Tag::Begin(t) } else { Tag::Inside(t) })
            }
            _ => None,
        }
    }

    pub fn parse(&self, s: &str) -> Option<Tag> {
        if s == "O" {
            return Some(Tag::Outside);
        }
        let (prefix, name) = s.split_once('-')?;
        let t = self.types.iter().position(|n| n == name)? as u8;
        match prefix {
            "B" => Some(Tag::Begin(t)),
            "I" => Some(Tag::Inside(t)),
            _ => None,
        }
    }

    pub fn render(&self, tag: Tag) -> String {
        TagDisplay(self, tag).to_string()
    }
}

struct TagDisplay<'a>(&'a LabelScheme, Tag);

impl fmt::Display for TagDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.1 {
            Tag::Outside => f.write_str("O"),
            Tag::Begin(t) => write!(f, "B-{}", self.0.type_name(t)),
            Tag::Inside(t) => write!(f, "I-{}", self.0.type_name(t)),
        }
    }
}

/// `I-X` is only allowed right after `B-X` or `I-X`.
pub fn is_valid_bio(tags: &[Tag]) -> bool {
    let mut prev = Tag::Outside;
    for &t in tags {
        if let Tag::Inside(x) = t {
            if prev.entity_type() != Some(x) {
                return false;
            }
        }
        prev = t;
    }
    true
}

/// Relabels every `I-X` that does not continue an `X` span as `B-X`.
/// Returns the number of relabeled positions.
pub fn repair_bio(tags: &mut [Tag]) -> usize {
    let mut repairs = 0;
    let mut prev = Tag::Outside;
    for t in tags.iter_mut() {
        if let Tag::Inside(x) = *t {
            if prev.entity_type() != Some(x) {
                *t = Tag::Begin(x);
                repairs += 1;
            }
        }
        prev = *t;
    }
    repairs
}
